//! Synthetic multi-domain benchmark: every sample is a domain transform of
//! noisy class content, `x = T_d(C_y + eps)`, and class semantics are a
//! noisy linear image of the same content, `a_y = P C_y + zeta`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::diffcore::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("domain shift too weak after {attempts} draws (best drop {best:.3}, need {needed:.3})")]
    WeakShift { attempts: usize, best: f64, needed: f64 },
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("empty partition")]
    EmptyPartition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    /// `x = C`; requires `visual_dim == content_dim`.
    Identity,
    /// `x = A_d C + b_d`.
    Affine,
    /// `x = tanh(A_d C + b_d)`.
    AffineTanh,
}

impl std::str::FromStr for TransformKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Self::Identity),
            "affine" => Ok(Self::Affine),
            "affine+tanh" | "affine_tanh" => Ok(Self::AffineTanh),
            other => Err(format!("unknown transform kind '{other}' (identity, affine, affine+tanh)")),
        }
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Affine => "affine",
            Self::AffineTanh => "affine+tanh",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub n_classes: usize,
    pub n_domains: usize,
    pub n_seen_classes: usize,
    pub n_seen_domains: usize,
    pub samples_per_class_domain: usize,
    pub visual_dim: usize,
    pub semantic_dim: usize,
    pub content_dim: usize,
    pub content_noise_std: f64,
    pub semantic_noise_std: f64,
    pub transform_kind: TransformKind,
    /// How far each domain's rotation strays from a shared base rotation.
    /// Large values make domains unrelated; 0 leaves only scale and bias shifts.
    pub domain_shift: f64,
    /// Std of the per-domain bias `b_d`.
    pub bias_std: f64,
    /// Required accuracy drop of a linear probe on the held-out domain; 0 disables the check.
    pub min_shift_drop: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_classes: 30,
            n_domains: 6,
            n_seen_classes: 25,
            n_seen_domains: 5,
            samples_per_class_domain: 40,
            visual_dim: 32,
            semantic_dim: 16,
            content_dim: 16,
            content_noise_std: 0.1,
            semantic_noise_std: 0.05,
            transform_kind: TransformKind::AffineTanh,
            domain_shift: 0.0,
            bias_std: 0.5,
            min_shift_drop: 0.15,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        for (name, v) in [
            ("n_classes", self.n_classes),
            ("n_domains", self.n_domains),
            ("samples_per_class_domain", self.samples_per_class_domain),
            ("visual_dim", self.visual_dim),
            ("semantic_dim", self.semantic_dim),
            ("content_dim", self.content_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.n_seen_classes >= self.n_classes {
            return bad(format!(
                "n_seen_classes ({}) must be below n_classes ({})",
                self.n_seen_classes, self.n_classes
            ));
        }
        if self.n_seen_domains >= self.n_domains {
            return bad(format!(
                "n_seen_domains ({}) must be below n_domains ({})",
                self.n_seen_domains, self.n_domains
            ));
        }
        for (name, v) in [
            ("content_noise_std", self.content_noise_std),
            ("semantic_noise_std", self.semantic_noise_std),
            ("domain_shift", self.domain_shift),
            ("bias_std", self.bias_std),
            ("min_shift_drop", self.min_shift_drop),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.transform_kind == TransformKind::Identity && self.visual_dim != self.content_dim {
            return bad("identity transform needs visual_dim == content_dim".into());
        }
        if self.transform_kind != TransformKind::Identity && self.visual_dim < self.content_dim {
            return bad("visual_dim below content_dim cannot keep the transform full rank".into());
        }
        Ok(())
    }
}

/// Seen/unseen partition of both axes. Ids are sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub seen_classes: Vec<u32>,
    pub unseen_classes: Vec<u32>,
    pub seen_domains: Vec<u32>,
    pub unseen_domains: Vec<u32>,
}

impl Split {
    /// Checks the sets are disjoint and exactly cover `0..n_classes` and `0..n_domains`.
    pub fn validate(&self, n_classes: usize, n_domains: usize) -> Result<(), DataError> {
        partition_ok("class", &self.seen_classes, &self.unseen_classes, n_classes)?;
        partition_ok("domain", &self.seen_domains, &self.unseen_domains, n_domains)
    }

    /// The same class split with a different domain split.
    pub fn with_domains(&self, seen: Vec<u32>, unseen: Vec<u32>) -> Self {
        Self {
            seen_classes: self.seen_classes.clone(),
            unseen_classes: self.unseen_classes.clone(),
            seen_domains: seen,
            unseen_domains: unseen,
        }
    }
}

fn partition_ok(axis: &str, seen: &[u32], unseen: &[u32], n: usize) -> Result<(), DataError> {
    let mut hit = vec![false; n];
    for &id in seen.iter().chain(unseen) {
        let slot = hit
            .get_mut(id as usize)
            .ok_or_else(|| DataError::Split(format!("{axis} id {id} out of range 0..{n}")))?;
        if *slot {
            return Err(DataError::Split(format!("{axis} id {id} listed twice")));
        }
        *slot = true;
    }
    if let Some(missing) = hit.iter().position(|h| !h) {
        return Err(DataError::Split(format!("{axis} id {missing} in neither set")));
    }
    Ok(())
}

/// Random class and domain partition with the configured counts.
pub fn make_splits<R: Rng + ?Sized>(cfg: &BenchConfig, rng: &mut R) -> Result<Split, DataError> {
    if cfg.n_seen_classes > cfg.n_classes || cfg.n_seen_domains > cfg.n_domains {
        return Err(DataError::Split(format!(
            "{} seen classes of {} / {} seen domains of {}",
            cfg.n_seen_classes, cfg.n_classes, cfg.n_seen_domains, cfg.n_domains
        )));
    }
    let (seen_classes, unseen_classes) = random_partition(cfg.n_classes, cfg.n_seen_classes, rng);
    let (seen_domains, unseen_domains) = random_partition(cfg.n_domains, cfg.n_seen_domains, rng);
    Ok(Split {
        seen_classes,
        unseen_classes,
        seen_domains,
        unseen_domains,
    })
}

fn random_partition<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> (Vec<u32>, Vec<u32>) {
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.shuffle(rng);
    let mut seen = ids[..k].to_vec();
    let mut unseen = ids[k..].to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();
    (seen, unseen)
}

/// Held-out-domain rotation: fold `k` holds out domains `k, k+1, …` (mod
/// `n_domains`), `n_domains - n_seen_domains` of them, and trains on the rest.
pub fn rotation_folds(base: &Split, n_domains: usize, n_seen_domains: usize) -> Result<Vec<Split>, DataError> {
    if n_seen_domains >= n_domains {
        return Err(DataError::Split(format!(
            "rotation needs an unseen domain ({n_seen_domains} seen of {n_domains})"
        )));
    }
    let n_unseen = n_domains - n_seen_domains;
    Ok((0..n_domains)
        .map(|k| {
            let mut unseen: Vec<u32> = (0..n_unseen).map(|j| ((k + j) % n_domains) as u32).collect();
            unseen.sort_unstable();
            let seen = (0..n_domains as u32).filter(|d| !unseen.contains(d)).collect();
            base.with_domains(seen, unseen)
        })
        .collect())
}

/// Feature rows with labels, a per-class semantic table and a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub visual_dim: usize,
    pub semantic_dim: usize,
    pub n_classes: usize,
    pub n_domains: usize,
    /// Row-major, `len() * visual_dim`.
    pub features: Vec<f64>,
    pub classes: Vec<u32>,
    pub domains: Vec<u32>,
    /// Row-major, `n_classes * semantic_dim`; row `y` is `a_y`.
    pub semantics: Vec<f64>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.visual_dim..(i + 1) * self.visual_dim]
    }

    pub fn semantic(&self, class: u32) -> &[f64] {
        let c = class as usize;
        &self.semantics[c * self.semantic_dim..(c + 1) * self.semantic_dim]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.visual_dim == 0 || self.semantic_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.domains.len() != self.len() || self.features.len() != self.len() * self.visual_dim {
            return bad("row arrays disagree in length".into());
        }
        if self.semantics.len() != self.n_classes * self.semantic_dim {
            return bad("semantic table does not cover every class".into());
        }
        if let Some(i) = self.classes.iter().position(|&c| c as usize >= self.n_classes) {
            return bad(format!("row {i} has class {} of {}", self.classes[i], self.n_classes));
        }
        if let Some(i) = self.domains.iter().position(|&d| d as usize >= self.n_domains) {
            return bad(format!("row {i} has domain {} of {}", self.domains[i], self.n_domains));
        }
        if self.features.iter().chain(&self.semantics).any(|v| !v.is_finite()) {
            return bad("non-finite value".into());
        }
        self.split.validate(self.n_classes, self.n_domains)
    }

    /// Row indices whose class is in `classes` and domain in `domains`.
    pub fn select(&self, classes: &[u32], domains: &[u32]) -> Vec<usize> {
        let mut class_on = vec![false; self.n_classes];
        classes.iter().for_each(|&c| class_on[c as usize] = true);
        let mut dom_on = vec![false; self.n_domains];
        domains.iter().for_each(|&d| dom_on[d as usize] = true);
        (0..self.len())
            .filter(|&i| class_on[self.classes[i] as usize] && dom_on[self.domains[i] as usize])
            .collect()
    }

    /// Seen classes in seen domains.
    pub fn train_indices(&self, split: &Split) -> Vec<usize> {
        self.select(&split.seen_classes, &split.seen_domains)
    }

    /// Feature rows `[n, visual_dim]`.
    pub fn features_of(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.visual_dim);
        idx.iter().for_each(|&i| data.extend_from_slice(self.row(i)));
        Tensor::matrix(idx.len(), self.visual_dim, data).expect("non-empty selection")
    }

    /// Semantic rows `[classes.len(), semantic_dim]`, in the given order.
    pub fn semantic_table(&self, classes: &[u32]) -> Tensor {
        let mut data = Vec::with_capacity(classes.len() * self.semantic_dim);
        classes.iter().for_each(|&c| data.extend_from_slice(self.semantic(c)));
        Tensor::matrix(classes.len(), self.semantic_dim, data).expect("non-empty class set")
    }
}

/// Per-domain map from content to visual space.
#[derive(Clone, Debug)]
pub struct DomainTransform {
    /// `[visual_dim, content_dim]`, full column rank.
    pub matrix: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub kind: TransformKind,
}

impl DomainTransform {
    pub fn apply(&self, content: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            TransformKind::Identity => content.clone(),
            TransformKind::Affine => &self.matrix * content + &self.bias,
            TransformKind::AffineTanh => (&self.matrix * content + &self.bias).map(f64::tanh),
        }
    }
}

/// A generated dataset together with the generator-only ground truth.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub dataset: Dataset,
    /// `C_y`, one per class.
    pub content: Vec<DVector<f64>>,
    pub transforms: Vec<DomainTransform>,
    /// Accuracy of assigning each noisy content `C_y + eps` to its nearest `C_y'`.
    pub oracle_accuracy: f64,
    /// Per held-out domain: linear-probe accuracy on seen domains minus on that domain.
    pub shift_drops: Vec<f64>,
    /// Transform draws needed to pass the shift check.
    pub attempts: usize,
}

const MAX_TRANSFORM_DRAWS: usize = 20;

pub fn gen_benchmark(cfg: &BenchConfig) -> Result<Dataset, DataError> {
    generate(cfg).map(|b| b.dataset)
}

/// Generates a benchmark; transforms are redrawn until every rotation fold
/// shows a linear-probe drop of at least `min_shift_drop`.
pub fn generate(cfg: &BenchConfig) -> Result<Benchmark, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let content: Vec<DVector<f64>> = (0..cfg.n_classes).map(|_| gaussian_vec(&mut rng, cfg.content_dim, 1.0)).collect();
    let projection = gaussian_mat(&mut rng, cfg.semantic_dim, cfg.content_dim, 1.0 / (cfg.content_dim as f64).sqrt());
    let mut semantics = Vec::with_capacity(cfg.n_classes * cfg.semantic_dim);
    for c in &content {
        let a = &projection * c + gaussian_vec(&mut rng, cfg.semantic_dim, cfg.semantic_noise_std);
        semantics.extend(a.iter());
    }
    let split = make_splits(cfg, &mut rng)?;

    let check = cfg.min_shift_drop > 0.0 && cfg.transform_kind != TransformKind::Identity && cfg.n_seen_domains > 0;
    let mut best = f64::NEG_INFINITY;
    for attempt in 1..=MAX_TRANSFORM_DRAWS {
        let transforms = draw_transforms(cfg, &mut rng);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        sample_rng.set_stream(attempt as u64);
        let (dataset, oracle_accuracy) = draw_samples(cfg, &content, &transforms, semantics.clone(), split.clone(), &mut sample_rng);
        let shift_drops = if check { shift_drops(&dataset, cfg)? } else { Vec::new() };
        let worst = shift_drops.iter().copied().fold(f64::INFINITY, f64::min);
        if !check || worst >= cfg.min_shift_drop {
            return Ok(Benchmark {
                dataset,
                content,
                transforms,
                oracle_accuracy,
                shift_drops,
                attempts: attempt,
            });
        }
        best = best.max(worst);
    }
    Err(DataError::WeakShift {
        attempts: MAX_TRANSFORM_DRAWS,
        best,
        needed: cfg.min_shift_drop,
    })
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_mat<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Orthonormal columns spanning the column space of `m`.
fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.qr();
    let (q, r) = (qr.q(), qr.r());
    // Fix column signs so the map is continuous in `m`.
    let mut q = q;
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `A_d = orth(Q_0 + shift G_d) diag(s_d)` with `s_d ~ U[0.5, 2]`, `b_d ~ N(0, bias_std^2)`.
fn draw_transforms<R: Rng + ?Sized>(cfg: &BenchConfig, rng: &mut R) -> Vec<DomainTransform> {
    let (v, c) = (cfg.visual_dim, cfg.content_dim);
    let base = orthonormalize(gaussian_mat(rng, v, c, 1.0));
    (0..cfg.n_domains)
        .map(|_| {
            let perturbed = &base + gaussian_mat(rng, v, c, cfg.domain_shift);
            let mut matrix = orthonormalize(perturbed);
            for j in 0..c {
                let s = rng.gen_range(0.5..=2.0);
                matrix.column_mut(j).scale_mut(s);
            }
            DomainTransform {
                matrix,
                bias: gaussian_vec(rng, v, cfg.bias_std),
                kind: cfg.transform_kind,
            }
        })
        .collect()
}

fn draw_samples<R: Rng + ?Sized>(
    cfg: &BenchConfig,
    content: &[DVector<f64>],
    transforms: &[DomainTransform],
    semantics: Vec<f64>,
    split: Split,
    rng: &mut R,
) -> (Dataset, f64) {
    let n = cfg.n_classes * cfg.n_domains * cfg.samples_per_class_domain;
    let mut features = Vec::with_capacity(n * cfg.visual_dim);
    let mut classes = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    let mut oracle_hits = 0usize;
    let noise = Normal::new(0.0, cfg.content_noise_std).expect("validated std");
    for (d, t) in transforms.iter().enumerate() {
        for (y, c) in content.iter().enumerate() {
            for _ in 0..cfg.samples_per_class_domain {
                let noisy = c + DVector::from_fn(cfg.content_dim, |_, _| noise.sample(rng));
                if nearest(content, &noisy) == y {
                    oracle_hits += 1;
                }
                features.extend(t.apply(&noisy).iter());
                classes.push(y as u32);
                domains.push(d as u32);
            }
        }
    }
    let dataset = Dataset {
        visual_dim: cfg.visual_dim,
        semantic_dim: cfg.semantic_dim,
        n_classes: cfg.n_classes,
        n_domains: cfg.n_domains,
        features,
        classes,
        domains,
        semantics,
        split,
    };
    (dataset, oracle_hits as f64 / n as f64)
}

fn nearest(points: &[DVector<f64>], q: &DVector<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// For each rotation fold: ridge probe on seen classes from the seen domains
/// (even-indexed rows of each cell), scored on the odd rows of the seen
/// domains and on all rows of the held-out domains.
fn shift_drops(ds: &Dataset, cfg: &BenchConfig) -> Result<Vec<f64>, DataError> {
    let folds = rotation_folds(&ds.split, cfg.n_domains, cfg.n_seen_domains)?;
    let classes = &ds.split.seen_classes;
    Ok(folds
        .iter()
        .map(|fold| {
            let seen = ds.select(classes, &fold.seen_domains);
            let (fit, held): (Vec<usize>, Vec<usize>) = seen.iter().partition(|&&i| i % 2 == 0);
            let probe = RidgeProbe::fit(ds, &fit, classes, 1e-3);
            let shifted = ds.select(classes, &fold.unseen_domains);
            probe.accuracy(ds, &held) - probe.accuracy(ds, &shifted)
        })
        .collect())
}

/// One-vs-all least-squares linear classifier on raw features.
pub struct RidgeProbe {
    weights: DMatrix<f64>,
    classes: Vec<u32>,
}

impl RidgeProbe {
    pub fn fit(ds: &Dataset, rows: &[usize], classes: &[u32], ridge: f64) -> Self {
        let p = ds.visual_dim + 1;
        let x = DMatrix::from_fn(rows.len(), p, |r, c| if c < ds.visual_dim { ds.row(rows[r])[c] } else { 1.0 });
        let y = DMatrix::from_fn(rows.len(), classes.len(), |r, k| {
            if ds.classes[rows[r]] == classes[k] {
                1.0
            } else {
                0.0
            }
        });
        let gram = x.transpose() * &x + DMatrix::identity(p, p) * ridge;
        let rhs = x.transpose() * y;
        let weights = gram.cholesky().expect("ridge term keeps the Gram matrix positive definite").solve(&rhs);
        Self {
            weights,
            classes: classes.to_vec(),
        }
    }

    pub fn accuracy(&self, ds: &Dataset, rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let hits = rows
            .iter()
            .filter(|&&i| {
                let feats = ds.row(i);
                let score = |k: usize| {
                    feats.iter().enumerate().map(|(c, v)| v * self.weights[(c, k)]).sum::<f64>()
                        + self.weights[(ds.visual_dim, k)]
                };
                let best = (0..self.classes.len())
                    .max_by(|&a, &b| score(a).total_cmp(&score(b)))
                    .expect("at least one class");
                self.classes[best] == ds.classes[i]
            })
            .count();
        hits as f64 / rows.len() as f64
    }
}

/// Shuffled mini-batches over a fixed set of row indices. Each epoch draws a
/// fresh permutation; the last batch of an epoch may be short.
#[derive(Clone, Debug)]
pub struct BatchIterator<R> {
    indices: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    epoch: usize,
    rng: R,
}

/// One batch and the epoch it belongs to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub epoch: usize,
    pub rows: Vec<usize>,
}

impl<R: Rng> BatchIterator<R> {
    pub fn new(indices: Vec<usize>, batch_size: usize, rng: R) -> Result<Self, DataError> {
        if batch_size < 1 {
            return Err(DataError::BatchSize);
        }
        if indices.is_empty() {
            return Err(DataError::EmptyPartition);
        }
        Ok(Self {
            order: Vec::new(),
            pos: 0,
            indices,
            batch_size,
            epoch: 0,
            rng,
        })
    }
}

impl<R: Rng> Iterator for BatchIterator<R> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos == self.order.len() {
            if !self.order.is_empty() {
                self.epoch += 1;
            }
            self.order = self.indices.clone();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let rows = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch { epoch: self.epoch, rows })
    }
}

/// All batches of one epoch.
pub fn epoch_batches<R: Rng + ?Sized>(indices: &[usize], batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size < 1 {
        return Err(DataError::BatchSize);
    }
    if indices.is_empty() {
        return Err(DataError::EmptyPartition);
    }
    let mut order = indices.to_vec();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
