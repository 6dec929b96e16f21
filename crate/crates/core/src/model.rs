//! The five learnable functions: visual encoder `f`, semantic encoder `g`,
//! semantic projection `h`, and the two critics.
//!
//! Batches are rows: a `[B, visual_dim]` input yields `[B, latent_dim]`
//! latents, and the critics return `[B, 1]` unbounded scores.

use rand::Rng;

use crate::bytes::{put_f64s, put_u32, Reader, Truncated};
use crate::diffcore::{mlp_forward, Activation, BoundMlp, DiffError, Graph, Layer, Mlp, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ZSLCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Spaces {
    pub visual_dim: usize,
    pub semantic_dim: usize,
    pub latent_dim: usize,
    /// May be zero: `g` then sees only the semantic vector.
    pub noise_dim: usize,
}

impl Default for Spaces {
    fn default() -> Self {
        Self {
            visual_dim: 32,
            semantic_dim: 16,
            latent_dim: 32,
            noise_dim: 16,
        }
    }
}

impl Spaces {
    pub fn validate(&self) -> Result<(), String> {
        if self.visual_dim == 0 || self.semantic_dim == 0 || self.latent_dim == 0 {
            return Err(format!("visual, semantic and latent dims must be positive: {self:?}"));
        }
        Ok(())
    }
}

/// Hidden width and activations shared by the default stacks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arch {
    pub hidden_width: usize,
    pub encoder_act: Activation,
    pub critic_act: Activation,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            encoder_act: Activation::Relu,
            critic_act: Activation::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spaces: Spaces,
    pub f: Mlp,
    pub g: Mlp,
    pub h: Mlp,
    pub d1: Mlp,
    pub d2: Mlp,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(spaces: Spaces, arch: Arch, rng: &mut R) -> Self {
        let Spaces {
            visual_dim,
            semantic_dim,
            latent_dim,
            noise_dim,
        } = spaces;
        let hw = arch.hidden_width;
        let id = Activation::Identity;
        let f = Mlp::init(&[visual_dim, hw, latent_dim], arch.encoder_act, id, rng);
        let g = Mlp::init(&[noise_dim + semantic_dim, hw, latent_dim], arch.encoder_act, id, rng);
        let h = Mlp::init(&[latent_dim, semantic_dim], id, id, rng);
        let d1 = Mlp::init(&[latent_dim + semantic_dim, hw, 1], arch.critic_act, id, rng);
        let d2 = Mlp::init(&[latent_dim + semantic_dim, hw, 1], arch.critic_act, id, rng);
        Self { spaces, f, g, h, d1, d2 }
    }

    /// Assembles from explicit networks, checking every width against `spaces`.
    pub fn from_parts(spaces: Spaces, f: Mlp, g: Mlp, h: Mlp, d1: Mlp, d2: Mlp) -> Result<Self, DiffError> {
        let s = spaces;
        let check = |name: &'static str, m: &Mlp, input: usize, output: usize| {
            if m.in_width() != input || m.out_width() != output {
                Err(DiffError::Shape {
                    op: name,
                    detail: format!(
                        "expected {input} -> {output}, network is {} -> {}",
                        m.in_width(),
                        m.out_width()
                    ),
                })
            } else {
                Ok(())
            }
        };
        check("f", &f, s.visual_dim, s.latent_dim)?;
        check("g", &g, s.noise_dim + s.semantic_dim, s.latent_dim)?;
        check("h", &h, s.latent_dim, s.semantic_dim)?;
        check("d1", &d1, s.latent_dim + s.semantic_dim, 1)?;
        check("d2", &d2, s.latent_dim + s.semantic_dim, 1)?;
        for (name, d) in [("d1", &d1), ("d2", &d2)] {
            if d.output != Activation::Identity {
                return Err(DiffError::Shape {
                    op: name,
                    detail: "critic output must be unsquashed".into(),
                });
            }
        }
        Ok(Self { spaces, f, g, h, d1, d2 })
    }

    pub fn nets(&self) -> [&Mlp; 5] {
        [&self.f, &self.g, &self.h, &self.d1, &self.d2]
    }

    fn nets_mut(&mut self) -> [&mut Mlp; 5] {
        [&mut self.f, &mut self.g, &mut self.h, &mut self.d1, &mut self.d2]
    }

    /// Encoder and projection parameters, in the order used by the generator optimizer.
    pub fn generator_tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.f.tensors().chain(self.g.tensors()).chain(self.h.tensors())
    }

    pub fn generator_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.f
            .tensors_mut()
            .chain(self.g.tensors_mut())
            .chain(self.h.tensors_mut())
    }

    /// Visual latents for a `[B, visual_dim]` batch, outside any training graph.
    pub fn embed_visual(&self, x: &Tensor) -> Result<Tensor, DiffError> {
        let mut g = Graph::new();
        let f = self.f.bind(&mut g);
        let xv = g.leaf(x.clone());
        let z = encode_visual(&mut g, &f, xv)?;
        Ok(g.value(z).clone())
    }

    /// Header plus parameters, as described by the checkpoint format.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.nets().iter().map(|m| m.n_params()).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let s = self.spaces;
        for d in [s.visual_dim, s.semantic_dim, s.latent_dim, s.noise_dim] {
            put_u32(&mut out, d as u32);
        }
        for net in self.nets() {
            let widths = net.widths();
            put_u32(&mut out, widths.len() as u32);
            for w in widths {
                put_u32(&mut out, w as u32);
            }
            put_u32(&mut out, net.hidden.code());
            put_u32(&mut out, net.output.code());
        }
        for net in self.nets() {
            for t in net.tensors() {
                put_f64s(&mut out, t.data());
            }
        }
        out
    }

    /// Parses the model part of a checkpoint and returns the offset where it ends.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), CheckpointError> {
        let mut r = Reader::new(bytes);
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            if magic.starts_with(&CHECKPOINT_MAGIC[..7]) {
                return Err(CheckpointError::Version(String::from_utf8_lossy(magic).into_owned()));
            }
            return Err(CheckpointError::BadMagic);
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let spaces = Spaces {
            visual_dim: dims[0],
            semantic_dim: dims[1],
            latent_dim: dims[2],
            noise_dim: dims[3],
        };
        spaces.validate().map_err(|detail| CheckpointError::Invalid { offset: 8, detail })?;

        let mut shapes = Vec::with_capacity(5);
        for _ in 0..5 {
            let at = r.offset();
            let n = r.u32()? as usize;
            if !(2..=64).contains(&n) {
                return Err(CheckpointError::Invalid {
                    offset: at,
                    detail: format!("implausible layer count {}", n.saturating_sub(1)),
                });
            }
            let mut widths = Vec::with_capacity(n);
            for _ in 0..n {
                let w = r.u32()? as usize;
                if w == 0 {
                    return Err(CheckpointError::Invalid {
                        offset: r.offset() - 4,
                        detail: "zero layer width".into(),
                    });
                }
                widths.push(w);
            }
            let at = r.offset();
            let hidden = Activation::from_code(r.u32()?);
            let output = Activation::from_code(r.u32()?);
            let (Some(hidden), Some(output)) = (hidden, output) else {
                return Err(CheckpointError::Invalid {
                    offset: at,
                    detail: "unknown activation code".into(),
                });
            };
            shapes.push((widths, hidden, output));
        }

        let mut nets = Vec::with_capacity(5);
        for (widths, hidden, output) in shapes {
            let mut layers = Vec::with_capacity(widths.len() - 1);
            for w in widths.windows(2) {
                let weight = r.f64s(w[0] * w[1])?;
                let bias = r.f64s(w[1])?;
                let at = r.offset();
                let invalid = |e: DiffError| CheckpointError::Invalid {
                    offset: at,
                    detail: e.to_string(),
                };
                layers.push(Layer {
                    weight: Tensor::matrix(w[0], w[1], weight).map_err(invalid)?,
                    bias: Tensor::matrix(1, w[1], bias).map_err(invalid)?,
                });
            }
            nets.push(Mlp { layers, hidden, output });
        }
        let mut it = nets.into_iter();
        let mut next = || it.next().unwrap();
        let (f, g, h, d1, d2) = (next(), next(), next(), next(), next());
        let params = Self::from_parts(spaces, f, g, h, d1, d2).map_err(|e| CheckpointError::Invalid {
            offset: 8,
            detail: e.to_string(),
        })?;
        Ok((params, r.offset()))
    }

    /// Flat parameter vector across all five networks.
    pub fn flatten(&self) -> Vec<f64> {
        self.nets()
            .iter()
            .flat_map(|n| n.tensors().flat_map(|t| t.data().iter().copied()))
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut i = 0;
        for net in self.nets_mut() {
            for t in net.tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[i..i + n]);
                i += n;
            }
        }
        assert_eq!(i, flat.len());
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected ZSLCKPT1)")]
    Version(String),
    #[error("checkpoint truncated at byte {offset} (needed {needed} more bytes)")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid checkpoint at byte {offset}: {detail}")]
    Invalid { offset: usize, detail: String },
    #[error("checkpoint (format ZSLCKPT1) lacks required section '{name}'")]
    MissingSection { name: String },
    #[error("checkpoint I/O: {0}")]
    Io(String),
}

impl From<Truncated> for CheckpointError {
    fn from(t: Truncated) -> Self {
        CheckpointError::Truncated {
            offset: t.offset,
            needed: t.needed,
        }
    }
}

fn check_width(g: &Graph, v: Var, expected: usize, op: &'static str) -> Result<(), DiffError> {
    let w = g.dims(v).1;
    if w != expected {
        return Err(DiffError::Shape {
            op,
            detail: format!("input width {w}, expected {expected}"),
        });
    }
    Ok(())
}

/// `z_v = f(x)`.
pub fn encode_visual(g: &mut Graph, f: &BoundMlp, x: Var) -> Result<Var, DiffError> {
    check_width(g, x, f.in_width(), "encode_visual")?;
    mlp_forward(g, f, x)
}

/// `z_a = g([n ; a])`; `noise` is `None` only for a zero-width noise space.
pub fn encode_semantic(g: &mut Graph, gen: &BoundMlp, noise: Option<Var>, a: Var) -> Result<Var, DiffError> {
    let input = match noise {
        Some(n) => g.concat_cols(n, a)?,
        None => a,
    };
    check_width(g, input, gen.in_width(), "encode_semantic")?;
    mlp_forward(g, gen, input)
}

/// `â = h(z)`.
pub fn project(g: &mut Graph, h: &BoundMlp, z: Var) -> Result<Var, DiffError> {
    check_width(g, z, h.in_width(), "project")?;
    mlp_forward(g, h, z)
}

/// Critic score `D([z ; a])`, one per row.
pub fn discriminate(g: &mut Graph, d: &BoundMlp, z: Var, a: Var) -> Result<Var, DiffError> {
    let input = g.concat_cols(z, a)?;
    check_width(g, input, d.in_width(), "discriminate")?;
    mlp_forward(g, d, input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Spaces, Arch) {
        (
            Spaces {
                visual_dim: 3,
                semantic_dim: 2,
                latent_dim: 4,
                noise_dim: 2,
            },
            Arch {
                hidden_width: 5,
                ..Arch::default()
            },
        )
    }

    #[test]
    fn identity_visual_encoder() {
        let eye = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let f = Mlp::new(
            vec![Layer::new(eye, Tensor::zeros(1, 2)).unwrap()],
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap();
        let mut g = Graph::new();
        let fb = f.bind(&mut g);
        let x = g.leaf(Tensor::row(&[1.0, 2.0]).unwrap());
        let z = encode_visual(&mut g, &fb, x).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 2.0]);
        let bad = g.leaf(Tensor::row(&[1.0, 2.0, 3.0]).unwrap());
        assert!(encode_visual(&mut g, &fb, bad).is_err());
    }

    #[test]
    fn batches_are_row_independent() {
        let (s, a) = small();
        let p = ModelParams::init(s, a, &mut ChaCha8Rng::seed_from_u64(3));
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]]).unwrap();
        let both = p.embed_visual(&x).unwrap();
        let second = p.embed_visual(&x.select_rows(&[1])).unwrap();
        assert_eq!(both.row_slice(1), second.data());
    }

    #[test]
    fn semantic_encoder_uses_noise() {
        let (s, a) = small();
        let p = ModelParams::init(s, a, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new();
        let gb = p.g.bind(&mut g);
        let sem = g.leaf(Tensor::row(&[0.3, -0.2]).unwrap());
        let n1 = g.leaf(Tensor::row(&[1.0, 0.0]).unwrap());
        let n2 = g.leaf(Tensor::row(&[-0.5, 2.0]).unwrap());
        let z1 = encode_semantic(&mut g, &gb, Some(n1), sem).unwrap();
        let z2 = encode_semantic(&mut g, &gb, Some(n2), sem).unwrap();
        assert_ne!(g.value(z1), g.value(z2));
        assert!(encode_semantic(&mut g, &gb, None, sem).is_err());
    }

    #[test]
    fn zero_weight_semantic_encoder_is_constant() {
        let layer = Layer::new(Tensor::zeros(3, 2), Tensor::row(&[0.5, -1.5]).unwrap()).unwrap();
        let gen = Mlp::new(vec![layer], Activation::Identity, Activation::Identity).unwrap();
        let mut g = Graph::new();
        let gb = gen.bind(&mut g);
        let sem = g.leaf(Tensor::row(&[0.3, -0.2]).unwrap());
        let n = g.leaf(Tensor::row(&[9.0]).unwrap());
        let z = encode_semantic(&mut g, &gb, Some(n), sem).unwrap();
        assert_eq!(g.value(z).data(), &[0.5, -1.5]);
    }

    #[test]
    fn noise_free_generator_is_deterministic() {
        let s = Spaces {
            visual_dim: 3,
            semantic_dim: 2,
            latent_dim: 4,
            noise_dim: 0,
        };
        let p = ModelParams::init(s, small().1, &mut ChaCha8Rng::seed_from_u64(5));
        let mut g = Graph::new();
        let gb = p.g.bind(&mut g);
        let sem = g.leaf(Tensor::row(&[0.3, -0.2]).unwrap());
        let z1 = encode_semantic(&mut g, &gb, None, sem).unwrap();
        let z2 = encode_semantic(&mut g, &gb, None, sem).unwrap();
        assert_eq!(g.value(z1), g.value(z2));
    }

    #[test]
    fn critic_is_conditional_and_unbounded() {
        let w = Tensor::column(&[0.0, 0.0, 0.0]).unwrap();
        let d = Mlp::new(
            vec![Layer::new(w, Tensor::scalar(7.5).unwrap()).unwrap()],
            Activation::Tanh,
            Activation::Identity,
        )
        .unwrap();
        let mut g = Graph::new();
        let db = d.bind(&mut g);
        let z = g.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let a = g.leaf(Tensor::column(&[0.5, -0.5]).unwrap());
        let s = discriminate(&mut g, &db, z, a).unwrap();
        assert_eq!(g.value(s).data(), &[7.5, 7.5]);

        let (sp, ar) = small();
        let p = ModelParams::init(sp, ar, &mut ChaCha8Rng::seed_from_u64(6));
        let d1 = p.d1.bind(&mut g);
        let z = g.leaf(Tensor::row(&[0.1, 0.2, 0.3, 0.4]).unwrap());
        let a1 = g.leaf(Tensor::row(&[1.0, 0.0]).unwrap());
        let a2 = g.leaf(Tensor::row(&[0.0, 1.0]).unwrap());
        let s1 = discriminate(&mut g, &d1, z, a1).unwrap();
        let s2 = discriminate(&mut g, &d1, z, a2).unwrap();
        assert_ne!(g.value(s1), g.value(s2));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (s, a) = small();
        let p = ModelParams::init(s, a, &mut ChaCha8Rng::seed_from_u64(8));
        let bytes = p.encode();
        let (q, end) = ModelParams::decode(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(end, bytes.len());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(ModelParams::decode(&bad).unwrap_err(), CheckpointError::BadMagic);
        let mut newer = bytes.clone();
        newer[7] = b'2';
        assert_eq!(
            ModelParams::decode(&newer).unwrap_err(),
            CheckpointError::Version("ZSLCKPT2".into())
        );
        assert!(matches!(
            ModelParams::decode(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
    }
}
