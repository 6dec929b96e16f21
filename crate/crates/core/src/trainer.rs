//! Alternating critic/generator training with per-mode loss scheduling,
//! center maintenance, metric logging and resumable checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bytes::{put_f64s, put_u32, put_u64, Reader};
use crate::diffcore::{AdamConfig, AdamState, BoundMlp, DiffError, Graph, Tensor, Var};
use crate::losses::{self, AblationMode, BatchEmbeds, CenterTable, Hyper, LossTerms};
use crate::model::{encode_semantic, encode_visual, project, Arch, CheckpointError, ModelParams, Spaces};
use crate::synthdata::{epoch_batches, DataError, Dataset, Split};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite value in {term}: {source}")]
    NonFinite { term: &'static str, source: DiffError },
    #[error("{term}: {source}")]
    Graph { term: &'static str, source: DiffError },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O on {path}: {detail}")]
    Io { path: PathBuf, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Attaches the name of the loss term being evaluated to a graph failure.
fn term<T>(name: &'static str, r: Result<T, DiffError>) -> Result<T, TrainError> {
    r.map_err(|e| match e {
        DiffError::NonFinite { .. } => TrainError::NonFinite { term: name, source: e },
        _ => TrainError::Graph { term: name, source: e },
    })
}

/// Latent/noise sizes and network shape; data dims come from the dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub noise_dim: usize,
    pub arch: Arch,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = Spaces::default();
        Self {
            latent_dim: s.latent_dim,
            noise_dim: s.noise_dim,
            arch: Arch::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: AblationMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub hyper: Hyper,
    pub model: ModelConfig,
    /// Optimizer for `f`, `g`, `h`.
    pub gen_adam: AdamConfig,
    /// Optimizer for each critic.
    pub critic_adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
    /// Append a wall-clock column to the metric log. Off by default so that
    /// logs of identical runs compare equal byte for byte.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: AblationMode::M3,
            epochs: 60,
            batch_size: 128,
            hyper: Hyper::default(),
            model: ModelConfig::default(),
            gen_adam: AdamConfig::default(),
            critic_adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.hyper.validate().map_err(TrainError::Config)?;
        if self.hyper.critic_ratio < 1 {
            return Err(TrainError::Config("critic_ratio must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.model.latent_dim == 0 || self.model.arch.hidden_width == 0 {
            return Err(TrainError::Config("latent_dim and hidden_width must be positive".into()));
        }
        for (name, a) in [("gen", &self.gen_adam), ("critic", &self.critic_adam)] {
            let ok = a.lr >= 0.0
                && a.lr.is_finite()
                && (0.0..1.0).contains(&a.beta1)
                && (0.0..1.0).contains(&a.beta2)
                && a.eps > 0.0;
            if !ok {
                return Err(TrainError::Config(format!("bad {name} optimizer settings {a:?}")));
            }
        }
        Ok(())
    }
}

/// The training partition: seen classes in seen domains, labels re-indexed
/// into the seen-class semantic table.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub visual_dim: usize,
    pub semantic_dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    domains: Vec<u32>,
    /// `[S, semantic_dim]`, row `k` is the semantics of `seen_classes[k]`.
    pub a_table: Tensor,
    pub seen_classes: Vec<u32>,
}

/// One mini-batch as tensors.
#[derive(Clone, Debug)]
pub struct BatchData {
    pub x: Tensor,
    pub a_y: Tensor,
    pub labels: Arc<[usize]>,
    pub domains: Arc<[u32]>,
}

impl TrainSet {
    pub fn new(ds: &Dataset, split: &Split) -> Result<Self, DataError> {
        let rows = ds.train_indices(split);
        if rows.is_empty() || split.seen_classes.is_empty() {
            return Err(DataError::EmptyPartition);
        }
        let mut slot = vec![usize::MAX; ds.n_classes];
        for (k, &c) in split.seen_classes.iter().enumerate() {
            slot[c as usize] = k;
        }
        let mut features = Vec::with_capacity(rows.len() * ds.visual_dim);
        rows.iter().for_each(|&i| features.extend_from_slice(ds.row(i)));
        Ok(Self {
            visual_dim: ds.visual_dim,
            semantic_dim: ds.semantic_dim,
            features,
            labels: rows.iter().map(|&i| slot[ds.classes[i] as usize]).collect(),
            domains: rows.iter().map(|&i| ds.domains[i]).collect(),
            a_table: ds.semantic_table(&split.seen_classes),
            seen_classes: split.seen_classes.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers rows (indices into this set, not the dataset).
    pub fn batch(&self, rows: &[usize]) -> BatchData {
        let v = self.visual_dim;
        let s = self.semantic_dim;
        let mut x = Vec::with_capacity(rows.len() * v);
        let mut a = Vec::with_capacity(rows.len() * s);
        for &r in rows {
            x.extend_from_slice(&self.features[r * v..(r + 1) * v]);
            a.extend_from_slice(self.a_table.row_slice(self.labels[r]));
        }
        BatchData {
            x: Tensor::matrix(rows.len(), v, x).expect("non-empty batch"),
            a_y: Tensor::matrix(rows.len(), s, a).expect("non-empty batch"),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            domains: rows.iter().map(|&r| self.domains[r]).collect(),
        }
    }
}

/// Everything a run needs to continue exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub centers: CenterTable,
    pub opt_gen: AdamState,
    pub opt_d1: AdamState,
    pub opt_d2: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed generator steps.
    pub step: u64,
    pub seed: u64,
    pub mode: AblationMode,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, visual_dim: usize, semantic_dim: usize, n_seen: usize) -> Self {
        let spaces = Spaces {
            visual_dim,
            semantic_dim,
            latent_dim: cfg.model.latent_dim,
            noise_dim: cfg.model.noise_dim,
        };
        let mut rng = run_rng(cfg.seed, 0);
        let params = ModelParams::init(spaces, cfg.model.arch, &mut rng);
        let centers = CenterTable::random(n_seen, spaces.latent_dim, &mut rng);
        Self {
            opt_gen: AdamState::new(cfg.gen_adam, params.generator_tensors()),
            opt_d1: AdamState::new(cfg.critic_adam, params.d1.tensors()),
            opt_d2: AdamState::new(cfg.critic_adam, params.d2.tensors()),
            params,
            centers,
            epoch: 0,
            step: 0,
            seed: cfg.seed,
            mode: cfg.mode,
        }
    }
}

/// Stream 0 seeds initialization; stream `e + 1` drives epoch `e`, so a run
/// resumed at an epoch boundary replays the same randomness.
fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    /// Cumulative critic optimizer steps (D1).
    pub critic_steps: u64,
    pub terms: LossTerms,
    pub total: f64,
    /// `E[D1(z_v, a)] - E[D1(z_a, a)]` after the critic updates.
    pub critic_gap: f64,
    /// Gradient norm over both critics at the last critic update.
    pub critic_grad_norm: f64,
    /// Gradient norm over `f`, `g`, `h` at the generator update.
    pub gen_grad_norm: f64,
    pub wall_time: f64,
}

impl StepMetrics {
    pub fn csv_header(wall_time: bool) -> String {
        let mut cols = vec!["step", "epoch", "critic_steps"];
        cols.extend(LossTerms::NAMES);
        cols.extend(["critic_gap", "critic_grad_norm", "gen_grad_norm"]);
        if wall_time {
            cols.push("wall_time");
        }
        cols.join(",")
    }

    pub fn csv_row(&self, wall_time: bool) -> String {
        let t = &self.terms;
        let mut row = format!("{},{},{}", self.step, self.epoch, self.critic_steps);
        for v in [
            t.d1,
            t.align,
            t.v,
            t.s,
            t.center,
            t.d2,
            t.cls,
            t.gen,
            self.total,
            self.critic_gap,
            self.critic_grad_norm,
            self.gen_grad_norm,
        ] {
            row.push_str(&format!(",{v}"));
        }
        if wall_time {
            row.push_str(&format!(",{}", self.wall_time));
        }
        row
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Option<Tensor> {
    (cols > 0).then(|| {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::matrix(rows, cols, data).expect("positive noise shape")
    })
}

fn grad_norm(g: &Graph, grads: &[Var]) -> f64 {
    grads
        .iter()
        .map(|&v| g.value(v).data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn values(g: &Graph, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| g.value(v).clone()).collect()
}

/// Latents of one forward pass through the encoders with fresh noise.
struct Forward {
    embeds: BatchEmbeds,
    a_table: Var,
}

fn forward(
    g: &mut Graph,
    f: &BoundMlp,
    gen: &BoundMlp,
    h: &BoundMlp,
    batch: &BatchData,
    a_table: &Tensor,
    noise: Option<Tensor>,
) -> Result<Forward, TrainError> {
    let x = g.leaf(batch.x.clone());
    let a_y = g.leaf(batch.a_y.clone());
    let n = noise.map(|t| g.leaf(t));
    let z_v = term("f", encode_visual(g, f, x))?;
    let z_a = term("g", encode_semantic(g, gen, n, a_y))?;
    let a_hat = term("h", project(g, h, z_a))?;
    Ok(Forward {
        embeds: BatchEmbeds {
            z_v,
            z_a,
            a_y,
            a_hat,
            labels: batch.labels.clone(),
            domains: batch.domains.clone(),
        },
        a_table: g.leaf(a_table.clone()),
    })
}

/// Summary of one round of critic updates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticReport {
    pub d1: f64,
    pub d2: f64,
    pub grad_norm: f64,
}

/// `steps` ascent updates of D1 (and D2 when `mode` trains the joint term)
/// on one batch with the encoders frozen. Noise and interpolation weights
/// are redrawn every update. Returns the losses of the last update.
pub fn train_critics(
    state: &mut TrainState,
    batch: &BatchData,
    a_table: &Tensor,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    steps: usize,
) -> Result<CriticReport, TrainError> {
    let joint = cfg.mode.uses_joint();
    let rows = batch.x.rows();
    let mut report = CriticReport::default();
    for _ in 0..steps {
        let noise = gaussian(rng, rows, state.params.spaces.noise_dim);
        let eta1 = losses::sample_eta(rng, rows);
        let eta2 = joint.then(|| losses::sample_eta(rng, rows));

        let mut g = Graph::new();
        let p = &state.params;
        let (f, gen, h) = (p.f.bind(&mut g), p.g.bind(&mut g), p.h.bind(&mut g));
        let fw = forward(&mut g, &f, &gen, &h, batch, a_table, noise)?;
        let d1 = p.d1.bind(&mut g);
        let eta = g.leaf(eta1);
        let l1 = term("L_D1", losses::loss_d1(&mut g, &d1, &fw.embeds, &cfg.hyper, eta))?;
        let mut objective = l1;
        let mut wrt = d1.vars();
        let mut l2 = None;
        if let Some(eta2) = eta2 {
            let d2 = p.d2.bind(&mut g);
            let eta = g.leaf(eta2);
            let l = term("L_D2", losses::loss_d2(&mut g, &d2, &fw.embeds, &cfg.hyper, eta))?;
            objective = term("L_D2", g.add(objective, l))?;
            wrt.extend(d2.vars());
            l2 = Some(l);
        }
        let grads = term("critic gradients", g.grad(objective, &wrt))?;
        let n1 = state.params.d1.layers.len() * 2;
        let gvals = values(&g, &grads);
        report = CriticReport {
            d1: g.value(l1).item().expect("scalar loss"),
            d2: l2.map_or(0.0, |l| g.value(l).item().expect("scalar loss")),
            grad_norm: grad_norm(&g, &grads),
        };
        term("D1 update", state.opt_d1.step(state.params.d1.tensors_mut(), &gvals[..n1], true))?;
        if joint {
            term("D2 update", state.opt_d2.step(state.params.d2.tensors_mut(), &gvals[n1..], true))?;
        }
    }
    Ok(report)
}

/// One training step: `critic_ratio` critic updates, one generator update of
/// `f`, `g`, `h` on the mode's objective, then the center update.
pub fn train_step(
    state: &mut TrainState,
    batch: &BatchData,
    a_table: &Tensor,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics, TrainError> {
    let start = Instant::now();
    let mode = cfg.mode;
    let critic = train_critics(state, batch, a_table, cfg, rng, cfg.hyper.critic_ratio)?;

    let rows = batch.x.rows();
    let noise = gaussian(rng, rows, state.params.spaces.noise_dim);
    let mut g = Graph::new();
    let p = &state.params;
    let (f, gen, h) = (p.f.bind(&mut g), p.g.bind(&mut g), p.h.bind(&mut g));
    let d1 = p.d1.bind(&mut g);
    let fw = forward(&mut g, &f, &gen, &h, batch, a_table, noise)?;
    let b = &fw.embeds;

    let align = term("L_align", losses::loss_align(&mut g, &d1, &h, b, fw.a_table))?;
    let mut terms = LossTerms {
        d1: critic.d1,
        d2: critic.d2,
        ..LossTerms::default()
    };
    let mut center = None;
    if mode.uses_center() {
        let c = g.leaf(state.centers.centers.clone());
        center = Some(term("L_center", losses::loss_center(&mut g, b, c, &cfg.hyper))?);
    }
    let (mut cls, mut gen_loss) = (None, None);
    if mode.uses_joint() {
        let d2 = p.d2.bind(&mut g);
        // The classifier term trains h only, so it sees the latents as constants.
        let z_v = g.detach(b.z_v);
        let z_a = g.detach(b.z_a);
        let a_hat = term("h", project(&mut g, &h, z_a))?;
        let detached = BatchEmbeds {
            z_v,
            z_a,
            a_hat,
            ..b.clone()
        };
        cls = Some(term("L_cls", losses::loss_cls(&mut g, &d2, &h, &detached, fw.a_table, &cfg.hyper))?);
        gen_loss = Some(term("L_gen", losses::loss_gen(&mut g, &d2, b, &cfg.hyper))?);
    }
    let total = term("L_total", losses::loss_total(&mut g, mode, align.align, center, cls, gen_loss))?;

    let mut wrt = f.vars();
    wrt.extend(gen.vars());
    wrt.extend(h.vars());
    let grads = term("generator gradients", g.grad(total, &wrt))?;
    let gvals = values(&g, &grads);
    let item = |v: Var| g.value(v).item().expect("scalar loss");
    terms.align = item(align.align);
    terms.v = item(align.l_v);
    terms.s = item(align.l_s);
    terms.center = center.map_or(0.0, item);
    terms.cls = cls.map_or(0.0, item);
    terms.gen = gen_loss.map_or(0.0, item);
    let critic_gap = terms.align - terms.v - terms.s;
    let total_value = item(total);
    let gen_grad_norm = grad_norm(&g, &grads);
    let z_v = g.value(b.z_v).clone();
    let z_a = g.value(b.z_a).clone();
    drop(g);

    term("generator update", state.opt_gen.step(state.params.generator_tensors_mut(), &gvals, false))?;
    if mode.uses_center() {
        losses::center_update(&mut state.centers, &z_v, &z_a, &batch.labels, cfg.hyper.kappa);
    }
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        epoch: state.epoch,
        critic_steps: state.opt_d1.step,
        terms,
        total: total_value,
        critic_gap,
        critic_grad_norm: critic.grad_norm,
        gen_grad_norm,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepMetrics>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

/// Trains from scratch. With `out_dir`, streams the metric log there and
/// writes periodic and final checkpoints.
pub fn run_training(ds: &Dataset, split: &Split, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let set = TrainSet::new(ds, split)?;
    let state = TrainState::init(cfg, set.visual_dim, set.semantic_dim, set.seen_classes.len());
    continue_training(&set, cfg, state, out_dir)
}

/// Continues a run from `state` up to `cfg.epochs`. When logging to
/// `out_dir`, rows are appended to an existing metric log.
pub fn continue_training(
    set: &TrainSet,
    cfg: &TrainConfig,
    mut state: TrainState,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if state.params.spaces.visual_dim != set.visual_dim || state.params.spaces.semantic_dim != set.semantic_dim {
        return Err(TrainError::Config("checkpoint dimensions do not match the dataset".into()));
    }
    if state.seed != cfg.seed || state.mode != cfg.mode {
        return Err(TrainError::Config(format!(
            "state belongs to a {} run with seed {}, config asks for {} with seed {}",
            state.mode, state.seed, cfg.mode, cfg.seed
        )));
    }
    if state.centers.len() != set.seen_classes.len() {
        return Err(TrainError::Config("center table does not match the seen classes".into()));
    }
    let mut sink = match out_dir {
        Some(dir) => Some(MetricSink::open(dir, cfg.log_wall_time)?),
        None => None,
    };
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let mut rng = run_rng(cfg.seed, state.epoch as u64 + 1);
        for rows in epoch_batches(&indices, cfg.batch_size, &mut rng)? {
            let batch = set.batch(&rows);
            let m = train_step(&mut state, &batch, &set.a_table, cfg, &mut rng)?;
            if let Some(s) = sink.as_mut() {
                s.write(&m)?;
            }
            log.push(m);
        }
        state.epoch += 1;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(&state, &dir.join(checkpoint_name(state.epoch)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        if let Some(s) = sink.as_mut() {
            s.flush()?;
        }
        save_checkpoint(&state, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { state, log })
}

struct MetricSink {
    path: PathBuf,
    out: BufWriter<File>,
    wall_time: bool,
}

impl MetricSink {
    fn open(dir: &Path, wall_time: bool) -> Result<Self, TrainError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(METRICS_FILE);
        let fresh = std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        let mut sink = Self {
            out: BufWriter::new(file),
            path,
            wall_time,
        };
        if fresh {
            let header = StepMetrics::csv_header(wall_time);
            writeln!(sink.out, "{header}").map_err(io_err(&sink.path))?;
        }
        Ok(sink)
    }

    fn write(&mut self, m: &StepMetrics) -> Result<(), TrainError> {
        writeln!(self.out, "{}", m.csv_row(self.wall_time)).map_err(io_err(&self.path))
    }

    fn flush(&mut self) -> Result<(), TrainError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

/// Renders a log exactly as the metric file holds it.
pub fn render_log(log: &[StepMetrics], wall_time: bool) -> String {
    let mut s = StepMetrics::csv_header(wall_time);
    s.push('\n');
    for m in log {
        s.push_str(&m.csv_row(wall_time));
        s.push('\n');
    }
    s
}

const TAG_CENTERS: &[u8; 4] = b"CENT";
const TAG_OPTIM: &[u8; 4] = b"OPTM";
const TAG_PROGRESS: &[u8; 4] = b"PROG";

/// Model encoding followed by tagged sections `(tag[4], u64 length, payload)`.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = state.params.encode();
    let section = |out: &mut Vec<u8>, tag: &[u8; 4], body: Vec<u8>| {
        out.extend_from_slice(tag);
        put_u64(out, body.len() as u64);
        out.extend_from_slice(&body);
    };

    let mut body = Vec::new();
    let c = &state.centers.centers;
    put_u32(&mut body, c.rows() as u32);
    put_u32(&mut body, c.cols() as u32);
    put_f64s(&mut body, c.data());
    section(&mut out, TAG_CENTERS, body);

    let mut body = Vec::new();
    for opt in [&state.opt_gen, &state.opt_d1, &state.opt_d2] {
        put_u64(&mut body, opt.step);
        let a = opt.config;
        put_f64s(&mut body, &[a.lr, a.beta1, a.beta2, a.eps]);
        put_u32(&mut body, opt.m.len() as u32);
        for (m, v) in opt.m.iter().zip(&opt.v) {
            put_u32(&mut body, m.rows() as u32);
            put_u32(&mut body, m.cols() as u32);
            put_f64s(&mut body, m.data());
            put_f64s(&mut body, v.data());
        }
    }
    section(&mut out, TAG_OPTIM, body);

    let mut body = Vec::new();
    put_u64(&mut body, state.epoch as u64);
    put_u64(&mut body, state.step);
    put_u64(&mut body, state.seed);
    put_u32(&mut body, mode_code(state.mode));
    section(&mut out, TAG_PROGRESS, body);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState, CheckpointError> {
    let (params, start) = ModelParams::decode(bytes)?;
    let mut r = Reader::new(&bytes[start..]);
    let (mut centers, mut optim, mut progress) = (None, None, None);
    while r.remaining() > 0 {
        let tag_at = start + r.offset();
        let tag: [u8; 4] = r.take(4).map_err(|t| shift(t, start))?.try_into().unwrap();
        let len = r.u64().map_err(|t| shift(t, start))?;
        let len = usize::try_from(len).unwrap_or(usize::MAX);
        let body_at = start + r.offset();
        let body = r.take(len).map_err(|t| shift(t, start))?;
        let slot = match &tag {
            TAG_CENTERS => &mut centers,
            TAG_OPTIM => &mut optim,
            TAG_PROGRESS => &mut progress,
            // Sections from newer writers are skipped.
            _ => continue,
        };
        if slot.is_some() {
            return Err(CheckpointError::Invalid {
                offset: tag_at,
                detail: format!("duplicate section {}", String::from_utf8_lossy(&tag)),
            });
        }
        *slot = Some((body_at, body));
    }
    let missing = |name: &str| CheckpointError::MissingSection { name: name.into() };
    let (at, body) = centers.ok_or_else(|| missing("CENT"))?;
    let centers = decode_centers(body, at)?;
    let (at, body) = optim.ok_or_else(|| missing("OPTM"))?;
    let [opt_gen, opt_d1, opt_d2] = decode_optim(body, at, &params)?;
    let (at, body) = progress.ok_or_else(|| missing("PROG"))?;
    let mut pr = Reader::new(body);
    let epoch = pr.u64().map_err(|t| shift(t, at))? as usize;
    let step = pr.u64().map_err(|t| shift(t, at))?;
    let seed = pr.u64().map_err(|t| shift(t, at))?;
    let mode_at = at + pr.offset();
    let code = pr.u32().map_err(|t| shift(t, at))?;
    let mode = mode_from_code(code).ok_or_else(|| CheckpointError::Invalid {
        offset: mode_at,
        detail: format!("unknown ablation mode code {code}"),
    })?;
    if centers.centers.cols() != params.spaces.latent_dim {
        return Err(CheckpointError::Invalid {
            offset: at,
            detail: "center width differs from latent_dim".into(),
        });
    }
    Ok(TrainState {
        params,
        centers,
        opt_gen,
        opt_d1,
        opt_d2,
        epoch,
        step,
        seed,
        mode,
    })
}

fn mode_code(m: AblationMode) -> u32 {
    match m {
        AblationMode::M1 => 1,
        AblationMode::M2 => 2,
        AblationMode::M3 => 3,
    }
}

fn mode_from_code(c: u32) -> Option<AblationMode> {
    AblationMode::ALL.into_iter().find(|&m| mode_code(m) == c)
}

fn shift(t: crate::bytes::Truncated, base: usize) -> CheckpointError {
    CheckpointError::Truncated {
        offset: base + t.offset,
        needed: t.needed,
    }
}

fn decode_centers(body: &[u8], at: usize) -> Result<CenterTable, CheckpointError> {
    let mut r = Reader::new(body);
    let rows = r.u32().map_err(|t| shift(t, at))? as usize;
    let cols = r.u32().map_err(|t| shift(t, at))? as usize;
    let data = r.f64s(rows.saturating_mul(cols)).map_err(|t| shift(t, at))?;
    let centers = Tensor::matrix(rows, cols, data).map_err(|e| CheckpointError::Invalid {
        offset: at,
        detail: e.to_string(),
    })?;
    Ok(CenterTable { centers })
}

fn decode_optim(body: &[u8], at: usize, params: &ModelParams) -> Result<[AdamState; 3], CheckpointError> {
    let mut r = Reader::new(body);
    let groups: [Vec<&Tensor>; 3] = [
        params.generator_tensors().collect(),
        params.d1.tensors().collect(),
        params.d2.tensors().collect(),
    ];
    let mut out = Vec::with_capacity(3);
    for group in groups {
        let tr = |t| shift(t, at);
        let step = r.u64().map_err(tr)?;
        let c = r.f64s(4).map_err(tr)?;
        let config = AdamConfig {
            lr: c[0],
            beta1: c[1],
            beta2: c[2],
            eps: c[3],
        };
        let n = r.u32().map_err(tr)? as usize;
        if n != group.len() {
            return Err(CheckpointError::Invalid {
                offset: at + r.offset(),
                detail: format!("optimizer has {n} slots, model group has {}", group.len()),
            });
        }
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for p in group {
            let rows = r.u32().map_err(tr)? as usize;
            let cols = r.u32().map_err(tr)? as usize;
            if (rows, cols) != (p.rows(), p.cols()) {
                return Err(CheckpointError::Invalid {
                    offset: at + r.offset(),
                    detail: format!("moment shape {rows}x{cols} vs parameter {:?}", p.shape()),
                });
            }
            let invalid = |e: DiffError| CheckpointError::Invalid {
                offset: at,
                detail: e.to_string(),
            };
            m.push(Tensor::matrix(rows, cols, r.f64s(rows * cols).map_err(tr)?).map_err(invalid)?);
            v.push(Tensor::matrix(rows, cols, r.f64s(rows * cols).map_err(tr)?).map_err(invalid)?);
        }
        out.push(AdamState { config, step, m, v });
    }
    Ok(out.try_into().expect("three optimizer groups"))
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, encode_checkpoint(state)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}
