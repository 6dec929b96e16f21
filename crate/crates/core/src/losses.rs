//! Training objectives: critic losses with gradient penalties, the
//! compatibility classifier, latent alignment, multimodal center loss and the
//! triple-adversarial joint-invariance terms.
//!
//! All expectations are arithmetic means over batch rows. Labels are indices
//! into the seen-class semantic table (`0..S`), not raw class ids.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{BoundMlp, DiffError, Graph, Tensor, Var};
use crate::model::discriminate;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper {
    /// Gradient-penalty weight.
    pub lambda: f64,
    /// Center-loss weight.
    pub delta: f64,
    /// Mixing weight of the projection-classifier fake in the joint critic; `beta = 1 - alpha`.
    pub alpha: f64,
    /// Weight of the compatibility terms inside the classifier loss.
    pub gamma: f64,
    /// Center update rate.
    pub kappa: f64,
    pub critic_ratio: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            delta: 0.5,
            alpha: 0.5,
            gamma: 1.0,
            kappa: 0.5,
            critic_ratio: 5,
        }
    }
}

impl Hyper {
    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("delta", self.delta),
            ("gamma", self.gamma),
            ("kappa", self.kappa),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("hyper.{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("hyper.alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.kappa > 1.0 {
            return Err(format!("hyper.kappa must lie in (0, 1], got {}", self.kappa));
        }
        if self.critic_ratio < 1 {
            return Err("hyper.critic_ratio must be at least 1".into());
        }
        Ok(())
    }
}

/// Which loss terms drive the generator update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationMode {
    /// Alignment only.
    M1,
    /// Alignment and center loss.
    M2,
    /// Alignment, center loss and joint invariance.
    M3,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::M1, AblationMode::M2, AblationMode::M3];

    pub fn uses_center(self) -> bool {
        self >= AblationMode::M2
    }

    pub fn uses_joint(self) -> bool {
        self == AblationMode::M3
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "M1" | "m1" => Ok(AblationMode::M1),
            "M2" | "m2" => Ok(AblationMode::M2),
            "M3" | "m3" => Ok(AblationMode::M3),
            other => Err(format!("unknown ablation mode '{other}' (expected M1, M2 or M3)")),
        }
    }
}

/// Per-seen-class latent centers, one row per seen class.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterTable {
    pub centers: Tensor,
}

impl CenterTable {
    pub fn random<R: Rng + ?Sized>(n_classes: usize, latent_dim: usize, rng: &mut R) -> Self {
        let data = (0..n_classes * latent_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self {
            centers: Tensor::matrix(n_classes, latent_dim, data).expect("positive center table shape"),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One batch of embeddings living in a graph.
#[derive(Clone, Debug)]
pub struct BatchEmbeds {
    pub z_v: Var,
    pub z_a: Var,
    /// True class semantics, one row per sample.
    pub a_y: Var,
    /// `h(z_a)`.
    pub a_hat: Var,
    /// Seen-class table index per row.
    pub labels: Arc<[usize]>,
    pub domains: Arc<[u32]>,
}

impl BatchEmbeds {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-row mixing weights `eta ~ U(0, 1)` as a `[B, 1]` column.
pub fn sample_eta<R: Rng + ?Sized>(rng: &mut R, rows: usize) -> Tensor {
    let data = (0..rows).map(|_| rng.gen::<f64>()).collect();
    Tensor::matrix(rows, 1, data).expect("batch is non-empty")
}

/// Row-wise convex combination `eta * p + (1 - eta) * q`.
pub fn interpolate(g: &mut Graph, p: Var, q: Var, eta: Var) -> Result<Var, DiffError> {
    if g.dims(p) != g.dims(q) {
        return Err(DiffError::Shape {
            op: "interpolate",
            detail: format!("{:?} vs {:?}", g.dims(p), g.dims(q)),
        });
    }
    let diff = g.sub(p, q)?;
    let scaled = g.scale_rows(diff, eta)?;
    g.add(q, scaled)
}

/// `E[(||grad||_2 - 1)^2]` for critic `d` at `(z, a)`.
///
/// The norm covers the gradient with respect to `z`, and additionally the
/// gradient with respect to `a` when `penalize_condition` is set.
pub fn gradient_penalty(
    g: &mut Graph,
    d: &BoundMlp,
    z: Var,
    a: Var,
    penalize_condition: bool,
) -> Result<Var, DiffError> {
    let scores = discriminate(g, d, z, a)?;
    let total = g.sum(scores)?;
    let grad = if penalize_condition {
        let gs = g.grad(total, &[z, a])?;
        g.concat_cols(gs[0], gs[1])?
    } else {
        g.grad(total, &[z])?[0]
    };
    let norm = g.row_norm(grad)?;
    let dev = g.affine(norm, 1.0, -1.0)?;
    let sq = g.mul(dev, dev)?;
    g.mean(sq)
}

fn mean_score(g: &mut Graph, d: &BoundMlp, z: Var, a: Var) -> Result<Var, DiffError> {
    let s = discriminate(g, d, z, a)?;
    g.mean(s)
}

/// Alignment critic objective, maximized by `D1`:
/// `E[D1(z_v, a)] - E[D1(z_a, a)] - lambda * GP` at `eta z_v + (1 - eta) z_a`.
pub fn loss_d1(g: &mut Graph, d1: &BoundMlp, b: &BatchEmbeds, hyper: &Hyper, eta: Var) -> Result<Var, DiffError> {
    let gap = critic_gap(g, d1, b)?;
    let z_mix = interpolate(g, b.z_v, b.z_a, eta)?;
    let gp = gradient_penalty(g, d1, z_mix, b.a_y, false)?;
    let gp = g.scale(gp, hyper.lambda)?;
    g.sub(gap, gp)
}

/// `E[D1(z_v, a)] - E[D1(z_a, a)]`.
pub fn critic_gap(g: &mut Graph, d1: &BoundMlp, b: &BatchEmbeds) -> Result<Var, DiffError> {
    let real = mean_score(g, d1, b.z_v, b.a_y)?;
    let fake = mean_score(g, d1, b.z_a, b.a_y)?;
    g.sub(real, fake)
}

/// Compatibility logits `<h(z), a_k>` for every seen class `k`: `[B, S]`.
pub fn compat_logits(g: &mut Graph, h_out: Var, a_table: Var) -> Result<Var, DiffError> {
    g.matmul_t(h_out, a_table, false, true)
}

/// Softmax cross-entropy of the compatibility logits against `labels`.
pub fn compat_loss(g: &mut Graph, h_out: Var, a_table: Var, labels: &Arc<[usize]>) -> Result<Var, DiffError> {
    let n_classes = g.dims(a_table).0;
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(DiffError::Shape {
            op: "compat_loss",
            detail: format!("label {bad} outside the {n_classes} seen classes"),
        });
    }
    let logits = compat_logits(g, h_out, a_table)?;
    let lse = g.logsumexp_rows(logits)?;
    let picked = g.pick_cols(logits, labels.clone())?;
    let nll = g.sub(lse, picked)?;
    g.mean(nll)
}

#[derive(Clone, Copy, Debug)]
pub struct AlignTerms {
    pub align: Var,
    pub l_v: Var,
    pub l_s: Var,
}

/// `E[D1(z_v, a)] - E[D1(z_a, a)] + L_V + L_S`, minimized by `f`, `g`, `h`.
pub fn loss_align(
    g: &mut Graph,
    d1: &BoundMlp,
    h: &BoundMlp,
    b: &BatchEmbeds,
    a_table: Var,
) -> Result<AlignTerms, DiffError> {
    let gap = critic_gap(g, d1, b)?;
    let hv = crate::model::project(g, h, b.z_v)?;
    let l_v = compat_loss(g, hv, a_table, &b.labels)?;
    let l_s = compat_loss(g, b.a_hat, a_table, &b.labels)?;
    let cls = g.add(l_v, l_s)?;
    let align = g.add(gap, cls)?;
    Ok(AlignTerms { align, l_v, l_s })
}

/// `delta * (E||z_v - c_y||^2 + E||z_a - c_y||^2)`.
pub fn loss_center(g: &mut Graph, b: &BatchEmbeds, centers: Var, hyper: &Hyper) -> Result<Var, DiffError> {
    let n_centers = g.dims(centers).0;
    if let Some(&bad) = b.labels.iter().find(|&&y| y >= n_centers) {
        return Err(DiffError::Shape {
            op: "loss_center",
            detail: format!("no center for label {bad} ({n_centers} centers)"),
        });
    }
    let c = g.gather_rows(centers, b.labels.clone())?;
    let dv = g.sub(b.z_v, c)?;
    let da = g.sub(b.z_a, c)?;
    let nv = g.row_sq_norm(dv)?;
    let na = g.row_sq_norm(da)?;
    let ev = g.mean(nv)?;
    let ea = g.mean(na)?;
    let s = g.add(ev, ea)?;
    g.scale(s, hyper.delta)
}

/// Per-class `Δc_y = E[c_y - z_v] + E[c_y - z_a]` over each class's rows,
/// `None` for classes absent from the batch.
pub fn center_deltas(centers: &CenterTable, z_v: &Tensor, z_a: &Tensor, labels: &[usize]) -> Vec<Option<Vec<f64>>> {
    let dim = centers.centers.cols();
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; centers.len()];
    for (r, &y) in labels.iter().enumerate() {
        let c = centers.centers.row_slice(y);
        let (acc, n) = sums[y].get_or_insert_with(|| (vec![0.0; dim], 0));
        for (k, a) in acc.iter_mut().enumerate() {
            *a += (c[k] - z_v.get(r, k)) + (c[k] - z_a.get(r, k));
        }
        *n += 1;
    }
    sums.into_iter()
        .map(|s| s.map(|(acc, n)| acc.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// `c_y <- c_y - kappa * Δc_y` for each class present in the batch.
pub fn center_update(centers: &mut CenterTable, z_v: &Tensor, z_a: &Tensor, labels: &[usize], kappa: f64) {
    let deltas = center_deltas(centers, z_v, z_a, labels);
    let dim = centers.centers.cols();
    let data = centers.centers.data_mut();
    for (y, delta) in deltas.into_iter().enumerate() {
        if let Some(delta) = delta {
            for (c, d) in data[y * dim..(y + 1) * dim].iter_mut().zip(delta) {
                *c -= kappa * d;
            }
        }
    }
}

/// Joint critic objective, maximized by `D2`: `(z_a, a_y)` is real,
/// `(z_a, â_y)` and `(z_v, a_y)` are fakes weighted `alpha` and `beta`.
pub fn loss_d2(g: &mut Graph, d2: &BoundMlp, b: &BatchEmbeds, hyper: &Hyper, eta: Var) -> Result<Var, DiffError> {
    let (alpha, beta) = (hyper.alpha, hyper.beta());
    let real = mean_score(g, d2, b.z_a, b.a_y)?;
    let fake_cls = mean_score(g, d2, b.z_a, b.a_hat)?;
    let fake_vis = mean_score(g, d2, b.z_v, b.a_y)?;
    let fake_cls = g.scale(fake_cls, alpha)?;
    let fake_vis = g.scale(fake_vis, beta)?;
    let adv = g.sub(real, fake_cls)?;
    let adv = g.sub(adv, fake_vis)?;

    let za = g.scale(b.z_a, alpha)?;
    let zv = g.scale(b.z_v, beta)?;
    let z_fake = g.add(za, zv)?;
    let z_mix = interpolate(g, b.z_a, z_fake, eta)?;
    let ah = g.scale(b.a_hat, alpha)?;
    let ay = g.scale(b.a_y, beta)?;
    let a_fake = g.add(ah, ay)?;
    let a_mix = interpolate(g, b.a_y, a_fake, eta)?;
    let gp = gradient_penalty(g, d2, z_mix, a_mix, true)?;
    let gp = g.scale(gp, hyper.lambda)?;
    g.sub(adv, gp)
}

/// `-alpha * E[p_h(y|z_a) * D2(z_a, â_y)] + gamma * (L_V + L_S)`, minimized by `h`.
pub fn loss_cls(
    g: &mut Graph,
    d2: &BoundMlp,
    h: &BoundMlp,
    b: &BatchEmbeds,
    a_table: Var,
    hyper: &Hyper,
) -> Result<Var, DiffError> {
    let logits = compat_logits(g, b.a_hat, a_table)?;
    let lse = g.logsumexp_rows(logits)?;
    let picked = g.pick_cols(logits, b.labels.clone())?;
    let log_p = g.sub(picked, lse)?;
    let p = g.exp(log_p)?;
    let score = discriminate(g, d2, b.z_a, b.a_hat)?;
    let weighted = g.mul(p, score)?;
    let adv = g.mean(weighted)?;
    let adv = g.scale(adv, -hyper.alpha)?;

    let hv = crate::model::project(g, h, b.z_v)?;
    let l_v = compat_loss(g, hv, a_table, &b.labels)?;
    let l_s = compat_loss(g, b.a_hat, a_table, &b.labels)?;
    let cls = g.add(l_v, l_s)?;
    let cls = g.scale(cls, hyper.gamma)?;
    g.add(adv, cls)
}

/// `E[D2(z_a, a_y)] - beta * E[D2(z_v, a_y)]`, minimized by `f` and `g`.
pub fn loss_gen(g: &mut Graph, d2: &BoundMlp, b: &BatchEmbeds, hyper: &Hyper) -> Result<Var, DiffError> {
    let real = mean_score(g, d2, b.z_a, b.a_y)?;
    let vis = mean_score(g, d2, b.z_v, b.a_y)?;
    let vis = g.scale(vis, hyper.beta())?;
    g.sub(real, vis)
}

/// Scalar values of every loss term for one step. Terms a mode does not
/// evaluate are reported as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub d1: f64,
    pub align: f64,
    pub v: f64,
    pub s: f64,
    pub center: f64,
    pub d2: f64,
    pub cls: f64,
    pub gen: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 9] = ["d1", "align", "v", "s", "center", "d2", "cls", "gen", "total"];

    pub fn joint_inv(&self) -> f64 {
        self.cls + self.gen
    }

    /// `L_align + L_center + L_joint-inv`, restricted to the terms `mode` trains with.
    pub fn total(&self, mode: AblationMode) -> f64 {
        let mut t = self.align;
        if mode.uses_center() {
            t += self.center;
        }
        if mode.uses_joint() {
            t += self.joint_inv();
        }
        t
    }

    pub fn values(&self, mode: AblationMode) -> [f64; 9] {
        [
            self.d1,
            self.align,
            self.v,
            self.s,
            self.center,
            self.d2,
            self.cls,
            self.gen,
            self.total(mode),
        ]
    }
}

/// Graph-level sum of the generator objective for `mode`.
pub fn loss_total(
    g: &mut Graph,
    mode: AblationMode,
    align: Var,
    center: Option<Var>,
    cls: Option<Var>,
    gen: Option<Var>,
) -> Result<Var, DiffError> {
    let mut total = align;
    if mode.uses_center() {
        if let Some(c) = center {
            total = g.add(total, c)?;
        }
    }
    if mode.uses_joint() {
        for t in [cls, gen].into_iter().flatten() {
            total = g.add(total, t)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Activation, Layer, Mlp};

    fn linear_critic(w: &[f64], b: f64) -> Mlp {
        Mlp::new(
            vec![Layer::new(Tensor::column(w).unwrap(), Tensor::scalar(b).unwrap()).unwrap()],
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap()
    }

    fn val(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    fn leaf(g: &mut Graph, rows: &[&[f64]]) -> Var {
        g.leaf(Tensor::from_rows(rows).unwrap())
    }

    /// Batch with 1-d latents and 1-d semantics; `a_hat` defaults to `a_y`.
    fn batch(g: &mut Graph, zv: &[f64], za: &[f64], a: &[f64], a_hat: &[f64], labels: &[usize]) -> BatchEmbeds {
        BatchEmbeds {
            z_v: g.leaf(Tensor::column(zv).unwrap()),
            z_a: g.leaf(Tensor::column(za).unwrap()),
            a_y: g.leaf(Tensor::column(a).unwrap()),
            a_hat: g.leaf(Tensor::column(a_hat).unwrap()),
            labels: labels.into(),
            domains: vec![0; labels.len()].into(),
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let mut g = Graph::new();
        let p = leaf(&mut g, &[&[0.0, 0.0]]);
        let q = leaf(&mut g, &[&[2.0, 4.0]]);
        for (eta, expect) in [(1.0, [0.0, 0.0]), (0.0, [2.0, 4.0]), (0.5, [1.0, 2.0])] {
            let e = leaf(&mut g, &[&[eta]]);
            let m = interpolate(&mut g, p, q, e).unwrap();
            assert_eq!(g.value(m).data(), &expect);
        }
        let r = leaf(&mut g, &[&[1.0]]);
        let e = leaf(&mut g, &[&[0.5]]);
        assert!(interpolate(&mut g, p, r, e).is_err());
    }

    #[test]
    fn penalty_of_linear_critics() {
        let mut g = Graph::new();
        let z = leaf(&mut g, &[&[0.3, -0.1], &[2.0, 1.0]]);
        let a = leaf(&mut g, &[&[5.0], &[-5.0]]);
        for (w, expect) in [
            (vec![0.6, 0.8, 3.0], 0.0),
            (vec![1.2, 1.6, 3.0], 1.0),
            (vec![0.0, 0.0, 0.0], 1.0),
        ] {
            let d = linear_critic(&w, 0.0).bind(&mut g);
            let gp = gradient_penalty(&mut g, &d, z, a, false).unwrap();
            assert!((val(&g, gp) - expect).abs() < 1e-15, "{w:?}");
        }
        // Joint penalty covers the condition too: ||(0.6, 0.8, 0)|| = 1.
        let d = linear_critic(&[0.6, 0.8, 0.0], 0.0).bind(&mut g);
        let gp = gradient_penalty(&mut g, &d, z, a, true).unwrap();
        assert!(val(&g, gp).abs() < 1e-15);
    }

    #[test]
    fn d1_examples() {
        let mut g = Graph::new();
        // Unit-norm weight on z, zero on a: penalty vanishes. D(z_v) = 2, D(z_a) = 1.
        let d = linear_critic(&[1.0, 0.0], 0.0).bind(&mut g);
        let b = batch(&mut g, &[2.0], &[1.0], &[0.7], &[0.7], &[0]);
        let eta = g.leaf(Tensor::column(&[0.3]).unwrap());
        let h = Hyper::default();
        let l = loss_d1(&mut g, &d, &b, &h, eta).unwrap();
        assert!((val(&g, l) - 1.0).abs() < 1e-15);

        // Identical embeddings: only the penalty remains.
        let d = linear_critic(&[2.0, 1.0], 0.5).bind(&mut g);
        let b = batch(&mut g, &[0.4, -1.0], &[0.4, -1.0], &[0.1, 0.2], &[0.1, 0.2], &[0, 0]);
        let eta = g.leaf(Tensor::column(&[0.1, 0.9]).unwrap());
        let l = loss_d1(&mut g, &d, &b, &h, eta).unwrap();
        assert!((val(&g, l) + h.lambda * 1.0).abs() < 1e-12);

        let h0 = Hyper { lambda: 0.0, ..h };
        let b = batch(&mut g, &[1.0, 3.0], &[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &[0, 0]);
        let l = loss_d1(&mut g, &d, &b, &h0, eta).unwrap();
        assert!((val(&g, l) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn compat_examples() {
        let mut g = Graph::new();
        let single = leaf(&mut g, &[&[0.3, 0.9]]);
        let hz = leaf(&mut g, &[&[4.0, -2.0], &[1.0, 1.0]]);
        let l = compat_loss(&mut g, hz, single, &Arc::from(vec![0, 0])).unwrap();
        assert_eq!(val(&g, l), 0.0);

        let table = leaf(&mut g, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let hz = leaf(&mut g, &[&[1.0, 0.0]]);
        let l = compat_loss(&mut g, hz, table, &Arc::from(vec![1])).unwrap();
        assert!((val(&g, l) - 2f64.ln()).abs() < 1e-15);

        let table = leaf(&mut g, &[&[1.0], &[-1.0]]);
        let hz = leaf(&mut g, &[&[5.0]]);
        let l = compat_loss(&mut g, hz, table, &Arc::from(vec![0])).unwrap();
        let expect = (-10f64).exp().ln_1p();
        assert!((val(&g, l) - expect).abs() < 1e-15);
        assert!((val(&g, l) - 4.54e-5).abs() < 1e-7);

        assert!(compat_loss(&mut g, hz, table, &Arc::from(vec![2])).is_err());
    }

    #[test]
    fn align_vanishes_for_identical_single_class() {
        let mut g = Graph::new();
        let d = linear_critic(&[0.5, -0.3], 0.1).bind(&mut g);
        let h = linear_critic(&[1.0], 0.0).bind(&mut g);
        let b = batch(&mut g, &[0.2, 0.7], &[0.2, 0.7], &[1.0, 1.0], &[0.2, 0.7], &[0, 0]);
        let table = leaf(&mut g, &[&[1.0]]);
        let t = loss_align(&mut g, &d, &h, &b, table).unwrap();
        assert_eq!(val(&g, t.align), 0.0);
    }

    #[test]
    fn align_sums_gap_and_compat() {
        // Gap 1 (critic reads z only) and uniform two-class logits on both branches.
        let mut g = Graph::new();
        let d = linear_critic(&[1.0, 0.0], 0.0).bind(&mut g);
        let h = Mlp::new(
            vec![Layer::new(Tensor::row(&[0.0, 0.0]).unwrap(), Tensor::row(&[1.0, 0.0]).unwrap()).unwrap()],
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap()
        .bind(&mut g);
        let b = BatchEmbeds {
            z_v: leaf(&mut g, &[&[2.0]]),
            z_a: leaf(&mut g, &[&[1.0]]),
            a_y: leaf(&mut g, &[&[0.0]]),
            a_hat: leaf(&mut g, &[&[1.0, 0.0]]),
            labels: vec![0].into(),
            domains: vec![0].into(),
        };
        let table = leaf(&mut g, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let t = loss_align(&mut g, &d, &h, &b, table).unwrap();
        assert!((val(&g, t.align) - (1.0 + 2.0 * 2f64.ln())).abs() < 1e-12);
        assert!((val(&g, t.align) - 2.386).abs() < 1e-3);
    }

    #[test]
    fn align_decreases_when_fake_score_rises() {
        let mut g = Graph::new();
        let d = linear_critic(&[1.0, 0.0], 0.0).bind(&mut g);
        let h = linear_critic(&[1.0], 0.0).bind(&mut g);
        let table = leaf(&mut g, &[&[1.0]]);
        let lo = batch(&mut g, &[2.0], &[1.0], &[0.0], &[1.0], &[0]);
        let hi = batch(&mut g, &[2.0], &[1.5], &[0.0], &[1.5], &[0]);
        let a = loss_align(&mut g, &d, &h, &lo, table).unwrap().align;
        let b = loss_align(&mut g, &d, &h, &hi, table).unwrap().align;
        assert!(val(&g, b) < val(&g, a));
    }

    #[test]
    fn center_loss_examples() {
        let mut g = Graph::new();
        let b = BatchEmbeds {
            z_v: leaf(&mut g, &[&[1.0, 0.0]]),
            z_a: leaf(&mut g, &[&[0.0, 1.0]]),
            a_y: leaf(&mut g, &[&[0.0]]),
            a_hat: leaf(&mut g, &[&[0.0]]),
            labels: vec![0].into(),
            domains: vec![0].into(),
        };
        let c = leaf(&mut g, &[&[0.0, 0.0]]);
        let h1 = Hyper { delta: 1.0, ..Hyper::default() };
        let l = loss_center(&mut g, &b, c, &h1).unwrap();
        assert_eq!(val(&g, l), 2.0);
        let h05 = Hyper { delta: 0.5, ..h1 };
        let l = loss_center(&mut g, &b, c, &h05).unwrap();
        assert_eq!(val(&g, l), 1.0);

        let same = leaf(&mut g, &[&[1.0, 0.0]]);
        let b0 = BatchEmbeds { z_a: b.z_v, ..b.clone() };
        let l = loss_center(&mut g, &b0, same, &h1).unwrap();
        assert_eq!(val(&g, l), 0.0);

        let b_bad = BatchEmbeds { labels: vec![3].into(), ..b };
        assert!(loss_center(&mut g, &b_bad, c, &h1).is_err());
    }

    #[test]
    fn center_update_examples() {
        let mut table = CenterTable {
            centers: Tensor::from_rows(&[[0.0, 0.0], [5.0, 5.0]]).unwrap(),
        };
        let zv = Tensor::row(&[1.0, 0.0]).unwrap();
        let za = Tensor::row(&[0.0, 1.0]).unwrap();
        let d = center_deltas(&table, &zv, &za, &[0]);
        assert_eq!(d[0].as_deref(), Some(&[-1.0, -1.0][..]));
        assert!(d[1].is_none());
        center_update(&mut table, &zv, &za, &[0], 0.5);
        assert_eq!(table.centers.row_slice(0), &[0.5, 0.5]);
        assert_eq!(table.centers.row_slice(1), &[5.0, 5.0]);

        let c = Tensor::row(&[0.5, 0.5]).unwrap();
        let d = center_deltas(&table, &c, &c, &[0]);
        assert_eq!(d[0].as_deref(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn d2_examples() {
        let h = Hyper::default();
        let mut g = Graph::new();
        // Identical fakes and reals: adversarial part cancels, penalty remains.
        let d = linear_critic(&[2.0, 0.0], 0.3).bind(&mut g);
        let b = batch(&mut g, &[0.5, 1.0], &[0.5, 1.0], &[0.2, -0.2], &[0.2, -0.2], &[0, 0]);
        let eta = g.leaf(Tensor::column(&[0.25, 0.75]).unwrap());
        let l = loss_d2(&mut g, &d, &b, &h, eta).unwrap();
        assert!((val(&g, l) + h.lambda).abs() < 1e-12);

        // Critic reads z + a with joint gradient (0.6, 0.8): penalty 0.
        // D(z_a, a) = 3, D(z_a, â) = 1, D(z_v, a) = 1.
        let d = linear_critic(&[0.6, 0.8], 0.0).bind(&mut g);
        let za = 5.0 / 0.6 * 0.5;
        let a = (3.0 - 0.6 * za) / 0.8;
        let a_hat = (1.0 - 0.6 * za) / 0.8;
        let zv = (1.0 - 0.8 * a) / 0.6;
        let b = batch(&mut g, &[zv], &[za], &[a], &[a_hat], &[0]);
        let eta = g.leaf(Tensor::column(&[0.4]).unwrap());
        let l = loss_d2(&mut g, &d, &b, &h, eta).unwrap();
        assert!((val(&g, l) - 2.0).abs() < 1e-12);

        // alpha = 1: the visual fake drops out.
        let h1 = Hyper { alpha: 1.0, lambda: 1e-9, ..h };
        let b2 = batch(&mut g, &[100.0], &[za], &[a], &[a_hat], &[0]);
        let l = loss_d2(&mut g, &d, &b2, &h1, eta).unwrap();
        assert!((val(&g, l) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn cls_examples() {
        let mut g = Graph::new();
        // Two classes with equal logits: p_h = 0.5. D2 constant 2.
        let d = linear_critic(&[0.0, 0.0, 0.0], 2.0).bind(&mut g);
        let b = BatchEmbeds {
            z_v: leaf(&mut g, &[&[1.0]]),
            z_a: leaf(&mut g, &[&[1.0]]),
            a_y: leaf(&mut g, &[&[1.0, 0.0]]),
            a_hat: leaf(&mut g, &[&[1.0, 0.0]]),
            labels: vec![0].into(),
            domains: vec![0].into(),
        };
        let h_proj = Mlp::new(
            vec![Layer::new(Tensor::row(&[1.0, 0.0]).unwrap(), Tensor::row(&[0.0, 0.0]).unwrap()).unwrap()],
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap()
        .bind(&mut g);
        let table = leaf(&mut g, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let hy = Hyper { alpha: 1.0, gamma: 0.0, ..Hyper::default() };
        let l = loss_cls(&mut g, &d, &h_proj, &b, table, &hy).unwrap();
        assert!((val(&g, l) + 1.0).abs() < 1e-12);

        // alpha = 0 reduces to gamma * (L_V + L_S) = gamma * 2 ln 2.
        let hy = Hyper { alpha: 0.0, gamma: 1.5, ..Hyper::default() };
        let l = loss_cls(&mut g, &d, &h_proj, &b, table, &hy).unwrap();
        assert!((val(&g, l) - 1.5 * 2.0 * 2f64.ln()).abs() < 1e-12);

        let dz = linear_critic(&[0.0, 0.0, 0.0], 0.0).bind(&mut g);
        let hy = Hyper { gamma: 0.0, ..Hyper::default() };
        let l = loss_cls(&mut g, &dz, &h_proj, &b, table, &hy).unwrap();
        assert_eq!(val(&g, l), 0.0);
    }

    #[test]
    fn gen_examples() {
        let mut g = Graph::new();
        let d = linear_critic(&[1.0, 0.0], 0.0).bind(&mut g);
        let b = batch(&mut g, &[1.0], &[3.0], &[0.0], &[0.0], &[0]);
        let hy = Hyper { alpha: 0.5, ..Hyper::default() };
        let l = loss_gen(&mut g, &d, &b, &hy).unwrap();
        assert_eq!(val(&g, l), 2.5);
        let hy0 = Hyper { alpha: 1.0, ..hy };
        let l = loss_gen(&mut g, &d, &b, &hy0).unwrap();
        assert_eq!(val(&g, l), 3.0);
        let hy1 = Hyper { alpha: 0.0, ..hy };
        let same = batch(&mut g, &[3.0], &[3.0], &[0.0], &[0.0], &[0]);
        let l = loss_gen(&mut g, &d, &same, &hy1).unwrap();
        assert_eq!(val(&g, l), 0.0);
    }

    #[test]
    fn total_respects_mode() {
        let t = LossTerms {
            align: 2.386,
            center: 2.0,
            cls: 1.0,
            gen: 0.5,
            ..LossTerms::default()
        };
        assert!((t.total(AblationMode::M3) - 5.886).abs() < 1e-12);
        assert!((t.total(AblationMode::M2) - 4.386).abs() < 1e-12);
        assert!((t.total(AblationMode::M1) - 2.386).abs() < 1e-12);
        assert_eq!(LossTerms::default().total(AblationMode::M3), 0.0);

        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(1.0).unwrap());
        let c = g.leaf(Tensor::scalar(2.0).unwrap());
        let j = g.leaf(Tensor::scalar(4.0).unwrap());
        let m2 = loss_total(&mut g, AblationMode::M2, a, Some(c), Some(j), Some(j)).unwrap();
        assert_eq!(val(&g, m2), 3.0);
        let m3 = loss_total(&mut g, AblationMode::M3, a, Some(c), Some(j), Some(j)).unwrap();
        assert_eq!(val(&g, m3), 11.0);
    }

    #[test]
    fn hyper_validation() {
        assert!(Hyper::default().validate().is_ok());
        assert!(Hyper { alpha: 1.5, ..Hyper::default() }.validate().is_err());
        assert!(Hyper { critic_ratio: 0, ..Hyper::default() }.validate().is_err());
        assert!(Hyper { lambda: 0.0, ..Hyper::default() }.validate().is_err());
        let h = Hyper { alpha: 0.3, ..Hyper::default() };
        assert_eq!(1.0 - h.alpha - h.beta(), 0.0);
    }
}
