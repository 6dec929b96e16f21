//! Central-difference verification of every training objective on small
//! tanh networks. Used by the `gradcheck` command and the test suites.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{finite_diff_check_with, Activation, Stencil, DiffError, Graph, Mlp, Tensor, Var};
use crate::losses::{self, BatchEmbeds, CenterTable, Hyper};
use crate::model::{encode_semantic, encode_visual, project, Arch, ModelParams, Spaces};

pub const TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: &'static str,
    /// Largest relative error seen over all points.
    pub max_rel_err: f64,
    pub points: usize,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct GradSuiteReport {
    pub entries: Vec<GradCheckEntry>,
    pub seconds: f64,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradCheckEntry::passed)
    }
}

/// Which parameter groups a check differentiates.
#[derive(Clone, Copy)]
struct Wrt {
    f: bool,
    g: bool,
    h: bool,
    d1: bool,
    d2: bool,
    centers: bool,
}

const NONE: Wrt = Wrt {
    f: false,
    g: false,
    h: false,
    d1: false,
    d2: false,
    centers: false,
};

/// A random problem instance: small tanh model plus a labelled batch.
struct Instance {
    params: ModelParams,
    centers: CenterTable,
    x: Tensor,
    noise: Tensor,
    a_y: Tensor,
    a_table: Tensor,
    labels: Arc<[usize]>,
    eta: Tensor,
    hyper: Hyper,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let spaces = Spaces {
        visual_dim: 3,
        semantic_dim: 2,
        latent_dim: 3,
        noise_dim: 2,
    };
    let arch = Arch {
        hidden_width: 4,
        encoder_act: Activation::Tanh,
        critic_act: Activation::Tanh,
    };
    let mut params = ModelParams::init(spaces, arch, rng);
    // Non-zero biases so every parameter is exercised.
    for net in [&mut params.f, &mut params.g, &mut params.h, &mut params.d1, &mut params.d2] {
        for layer in &mut net.layers {
            for b in layer.bias.data_mut() {
                *b = 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let n_classes = 3;
    let batch = 4;
    let a_table = gaussian(rng, n_classes, spaces.semantic_dim, 1.0);
    let labels: Vec<usize> = (0..batch).map(|i| if i < n_classes { i } else { rng.gen_range(0..n_classes) }).collect();
    let a_y = a_table.select_rows(&labels);
    Instance {
        centers: CenterTable::random(n_classes, spaces.latent_dim, rng),
        x: gaussian(rng, batch, spaces.visual_dim, 1.0),
        noise: gaussian(rng, batch, spaces.noise_dim, 1.0),
        eta: losses::sample_eta(rng, batch),
        params,
        a_y,
        a_table,
        labels: labels.into(),
        hyper: Hyper {
            lambda: 10.0,
            delta: 0.5,
            alpha: 0.3,
            gamma: 0.7,
            kappa: 0.5,
            critic_ratio: 5,
        },
    }
}

type LossFn = fn(&mut Graph, &Bound, &Instance) -> Result<Var, DiffError>;

struct Bound {
    embeds: BatchEmbeds,
    d1: crate::diffcore::BoundMlp,
    d2: crate::diffcore::BoundMlp,
    h: crate::diffcore::BoundMlp,
    a_table: Var,
    centers: Var,
    eta: Var,
}

/// Binds the instance, turning the requested groups into the checked inputs.
fn bind(g: &mut Graph, inst: &Instance, wrt: Wrt, vars: &[Var]) -> Result<Bound, DiffError> {
    let mut it = vars.iter().copied();
    let mut net = |g: &mut Graph, m: &Mlp, on: bool| {
        if on {
            let n = m.tensors().count();
            let vs: Vec<Var> = it.by_ref().take(n).collect();
            m.bind_vars(&vs)
        } else {
            m.bind(g)
        }
    };
    let p = &inst.params;
    let f = net(g, &p.f, wrt.f);
    let gen = net(g, &p.g, wrt.g);
    let h = net(g, &p.h, wrt.h);
    let d1 = net(g, &p.d1, wrt.d1);
    let d2 = net(g, &p.d2, wrt.d2);
    let centers = if wrt.centers {
        it.next().unwrap()
    } else {
        g.leaf(inst.centers.centers.clone())
    };

    let x = g.leaf(inst.x.clone());
    let n = g.leaf(inst.noise.clone());
    let a_y = g.leaf(inst.a_y.clone());
    let z_v = encode_visual(g, &f, x)?;
    let z_a = encode_semantic(g, &gen, Some(n), a_y)?;
    let a_hat = project(g, &h, z_a)?;
    let a_table = g.leaf(inst.a_table.clone());
    let eta = g.leaf(inst.eta.clone());
    Ok(Bound {
        embeds: BatchEmbeds {
            z_v,
            z_a,
            a_y,
            a_hat,
            labels: inst.labels.clone(),
            domains: vec![0; inst.labels.len()].into(),
        },
        d1,
        d2,
        h,
        a_table,
        centers,
        eta,
    })
}

fn points(inst: &Instance, wrt: Wrt) -> Vec<Tensor> {
    let p = &inst.params;
    let mut out = Vec::new();
    for (on, m) in [(wrt.f, &p.f), (wrt.g, &p.g), (wrt.h, &p.h), (wrt.d1, &p.d1), (wrt.d2, &p.d2)] {
        if on {
            out.extend(m.tensors().cloned());
        }
    }
    if wrt.centers {
        out.push(inst.centers.centers.clone());
    }
    out
}

fn checks() -> Vec<(&'static str, Wrt, LossFn)> {
    let gen = Wrt { f: true, g: true, h: true, ..NONE };
    vec![
        ("L_D1", Wrt { d1: true, ..NONE }, |g, b, i| {
            losses::loss_d1(g, &b.d1, &b.embeds, &i.hyper, b.eta)
        }),
        ("L_align", gen, |g, b, _| {
            Ok(losses::loss_align(g, &b.d1, &b.h, &b.embeds, b.a_table)?.align)
        }),
        ("L_V", Wrt { f: true, h: true, ..NONE }, |g, b, _| {
            Ok(losses::loss_align(g, &b.d1, &b.h, &b.embeds, b.a_table)?.l_v)
        }),
        ("L_S", Wrt { g: true, h: true, ..NONE }, |g, b, _| {
            Ok(losses::loss_align(g, &b.d1, &b.h, &b.embeds, b.a_table)?.l_s)
        }),
        ("L_center", Wrt { f: true, g: true, centers: true, ..NONE }, |g, b, i| {
            losses::loss_center(g, &b.embeds, b.centers, &i.hyper)
        }),
        ("L_D2", Wrt { d2: true, ..NONE }, |g, b, i| {
            losses::loss_d2(g, &b.d2, &b.embeds, &i.hyper, b.eta)
        }),
        ("L_cls", gen, |g, b, i| {
            losses::loss_cls(g, &b.d2, &b.h, &b.embeds, b.a_table, &i.hyper)
        }),
        ("L_gen", Wrt { f: true, g: true, ..NONE }, |g, b, i| {
            losses::loss_gen(g, &b.d2, &b.embeds, &i.hyper)
        }),
    ]
}

/// Checks one loss at one random instance; returns the max relative error.
fn check_one(inst: &Instance, wrt: Wrt, loss: LossFn) -> Result<f64, DiffError> {
    finite_diff_check_with(
        |g, vars| {
            let b = bind(g, inst, wrt, vars)?;
            loss(g, &b, inst)
        },
        &points(inst, wrt),
        FD_STEP,
        Stencil::FivePoint,
    )
}

/// Runs every loss check at `n_points` random instances derived from `seed`.
pub fn run_gradient_suite(seed: u64, n_points: usize) -> Result<GradSuiteReport, DiffError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<Instance> = (0..n_points).map(|_| instance(&mut rng)).collect();
    let mut entries = Vec::new();
    for (name, wrt, loss) in checks() {
        let mut worst = 0.0f64;
        for inst in &instances {
            worst = worst.max(check_one(inst, wrt, loss)?);
        }
        entries.push(GradCheckEntry {
            name,
            max_rel_err: worst,
            points: n_points,
        });
    }
    entries.push(GradCheckEntry {
        name: "double_backward",
        max_rel_err: double_backward_check(&mut rng, n_points)?,
        points: n_points,
    });
    Ok(GradSuiteReport {
        entries,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// `d/dθ ||∇_x D_θ(x)||²` for tanh critics against central differences.
fn double_backward_check(rng: &mut ChaCha8Rng, n_points: usize) -> Result<f64, DiffError> {
    let mut worst = 0.0f64;
    for _ in 0..n_points {
        let d = Mlp::init(&[3, 5, 1], Activation::Tanh, Activation::Identity, rng);
        let x = gaussian(rng, 2, 3, 1.0);
        let pts: Vec<Tensor> = d.tensors().cloned().collect();
        let err = finite_diff_check_with(
            |g, vars| {
                let bd = d.bind_vars(vars);
                let xv = g.leaf(x.clone());
                let y = crate::diffcore::mlp_forward(g, &bd, xv)?;
                let s = g.sum(y)?;
                let gx = g.grad(s, &[xv])?[0];
                let n = g.row_sq_norm(gx)?;
                g.sum(n)
            },
            &pts,
            FD_STEP,
            Stencil::FivePoint,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_points() {
        let report = run_gradient_suite(11, 3).unwrap();
        for e in &report.entries {
            assert!(e.passed(), "{}: {}", e.name, e.max_rel_err);
        }
    }
}
