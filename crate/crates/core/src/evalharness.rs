//! Inference, per-class accuracy and the evaluation protocols: held-out
//! domain rotation, limited sources, domain generalization, and the ablation
//! ladder.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::diffcore::{DiffError, Graph, Tensor};
use crate::exec::map_jobs;
use crate::losses::AblationMode;
use crate::model::{encode_visual, project, ModelParams};
use crate::synthdata::{rotation_folds, DataError, Dataset, Split};
use crate::trainer::{encode_checkpoint, run_training, TrainConfig, TrainError, TrainState};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty candidate set")]
    NoCandidates,
    #[error("no test samples for any candidate class")]
    NoSamples,
    #[error("candidate table has {rows} rows for {ids} ids")]
    CandidateMismatch { rows: usize, ids: usize },
    #[error("protocol needs at least one seed")]
    NoSeeds,
    #[error("invalid protocol setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Graph(#[from] DiffError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("I/O: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: u32,
    /// Softmax over candidates, in candidate order.
    pub probs: Vec<f64>,
}

/// Index of the highest score; among equal scores the lowest id wins.
pub fn argmax_lowest_id(scores: &[f64], ids: &[u32]) -> usize {
    let mut best = 0;
    for k in 1..scores.len() {
        if scores[k] > scores[best] || (scores[k] == scores[best] && ids[k] < ids[best]) {
            best = k;
        }
    }
    best
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Compatibility scores `<h(f(x)), a_k>`, `[B, K]`.
pub fn scores(params: &ModelParams, x: &Tensor, candidates: &Tensor) -> Result<Tensor, DiffError> {
    let mut g = Graph::new();
    let f = params.f.bind(&mut g);
    let h = params.h.bind(&mut g);
    let xv = g.leaf(x.clone());
    let z = encode_visual(&mut g, &f, xv)?;
    let a_hat = project(&mut g, &h, z)?;
    let table = g.leaf(candidates.clone());
    let s = g.matmul_t(a_hat, table, false, true)?;
    Ok(g.value(s).clone())
}

/// Classifies each row of `x` among the candidate classes `ids`, whose
/// semantic vectors are the rows of `candidates`.
pub fn predict(params: &ModelParams, x: &Tensor, candidates: &Tensor, ids: &[u32]) -> Result<Vec<Prediction>, EvalError> {
    if ids.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    if candidates.rows() != ids.len() {
        return Err(EvalError::CandidateMismatch {
            rows: candidates.rows(),
            ids: ids.len(),
        });
    }
    let s = scores(params, x, candidates)?;
    Ok((0..s.rows())
        .map(|r| {
            let row = s.row_slice(r);
            Prediction {
                class: ids[argmax_lowest_id(row, ids)],
                probs: softmax(row),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub class: u32,
    pub correct: usize,
    pub total: usize,
}

impl ClassScore {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAccuracy {
    /// Classes with at least one sample, ascending id.
    pub per_class: Vec<ClassScore>,
    /// Candidate classes without samples; left out of the mean.
    pub excluded: Vec<u32>,
    /// Mean of per-class accuracies.
    pub mean: f64,
}

/// Per-class accuracy from labels and predictions over the given classes.
pub fn class_accuracy(truth: &[u32], predicted: &[u32], classes: &[u32]) -> Result<ClassAccuracy, EvalError> {
    let classes: BTreeSet<u32> = classes.iter().copied().collect();
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for &c in &classes {
        let (mut correct, mut total) = (0, 0);
        for (t, p) in truth.iter().zip(predicted) {
            if *t == c {
                total += 1;
                correct += usize::from(p == t);
            }
        }
        if total == 0 {
            excluded.push(c);
        } else {
            per_class.push(ClassScore { class: c, correct, total });
        }
    }
    if per_class.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let mean = per_class.iter().map(ClassScore::accuracy).sum::<f64>() / per_class.len() as f64;
    Ok(ClassAccuracy {
        per_class,
        excluded,
        mean,
    })
}

/// Per-class accuracy of the model on dataset rows `rows` with the given candidates.
pub fn per_class_accuracy(params: &ModelParams, ds: &Dataset, rows: &[usize], candidates: &[u32]) -> Result<ClassAccuracy, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    if rows.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let preds = predict(params, &ds.features_of(rows), &ds.semantic_table(candidates), candidates)?;
    let truth: Vec<u32> = rows.iter().map(|&i| ds.classes[i]).collect();
    let predicted: Vec<u32> = preds.iter().map(|p| p.class).collect();
    class_accuracy(&truth, &predicted, candidates)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Each domain held out once; unseen classes in the held-out domain.
    Rotation,
    /// Few fixed source domains; unseen classes in each remaining domain.
    LimitedSources,
    /// Rotation folds, but seen classes in the held-out domain.
    DomainGeneralization,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rotation" => Ok(Self::Rotation),
            "ls" => Ok(Self::LimitedSources),
            "dg" => Ok(Self::DomainGeneralization),
            other => Err(format!("unknown protocol '{other}' (rotation, ls, dg)")),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rotation => "rotation",
            Self::LimitedSources => "ls",
            Self::DomainGeneralization => "dg",
        })
    }
}

/// Protocol knobs besides the training config.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    pub modes: Vec<AblationMode>,
    pub seeds: Vec<u64>,
    /// Source domains in limited-sources mode: the lowest this many ids.
    pub ls_seen_domains: usize,
    /// Concurrent training runs.
    pub jobs: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Rotation,
            modes: vec![AblationMode::M3],
            seeds: vec![0],
            ls_seen_domains: 2,
            jobs: 1,
        }
    }
}

/// Accuracy of one trained model on one evaluation domain.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub mode: AblationMode,
    pub seed: u64,
    pub domain: u32,
    pub accuracy: ClassAccuracy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub results: Vec<FoldResult>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl EvalReport {
    pub fn modes(&self) -> Vec<AblationMode> {
        AblationMode::ALL
            .into_iter()
            .filter(|m| self.results.iter().any(|r| r.mode == *m))
            .collect()
    }

    pub fn domains(&self) -> Vec<u32> {
        self.results.iter().map(|r| r.domain).collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn find(&self, mode: AblationMode, seed: u64, domain: u32) -> Option<&FoldResult> {
        self.results.iter().find(|r| r.mode == mode && r.seed == seed && r.domain == domain)
    }

    /// Mean over evaluation domains of per-class mean accuracy, for one run set.
    pub fn avg(&self, mode: AblationMode, seed: u64) -> f64 {
        let v: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.mode == mode && r.seed == seed)
            .map(|r| r.accuracy.mean)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Median over seeds of [`EvalReport::avg`].
    pub fn median_avg(&self, mode: AblationMode) -> f64 {
        let v: Vec<f64> = self.seeds.iter().map(|&s| self.avg(mode, s)).collect();
        median(&v)
    }

    /// Mean over seeds of [`EvalReport::avg`].
    pub fn mean_avg(&self, mode: AblationMode) -> f64 {
        self.seeds.iter().map(|&s| self.avg(mode, s)).sum::<f64>() / self.seeds.len() as f64
    }

    /// Median over seeds of one domain's accuracy.
    pub fn median_cell(&self, mode: AblationMode, domain: u32) -> f64 {
        let v: Vec<f64> = self
            .seeds
            .iter()
            .filter_map(|&s| self.find(mode, s, domain))
            .map(|r| r.accuracy.mean)
            .collect();
        median(&v)
    }

    /// `mode,d<id>...,AVG` rows with seed medians, in percent.
    pub fn table_csv(&self) -> String {
        let domains = self.domains();
        let mut s = String::from("mode");
        for d in &domains {
            write!(s, ",d{d}").unwrap();
        }
        s.push_str(",AVG\n");
        for m in self.modes() {
            write!(s, "{m}").unwrap();
            for &d in &domains {
                write!(s, ",{:.2}", 100.0 * self.median_cell(m, d)).unwrap();
            }
            writeln!(s, ",{:.2}", 100.0 * self.median_avg(m)).unwrap();
        }
        s
    }

    /// One row per (mode, seed, domain, class).
    pub fn classes_csv(&self) -> String {
        let mut s = String::from("protocol,mode,seed,domain,class,correct,total,accuracy\n");
        for r in &self.results {
            for c in &r.accuracy.per_class {
                writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    self.protocol,
                    r.mode,
                    r.seed,
                    r.domain,
                    c.class,
                    c.correct,
                    c.total,
                    c.accuracy()
                )
                .unwrap();
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "protocol: {}", self.protocol).unwrap();
        writeln!(s, "config fingerprint: {}", self.fingerprint).unwrap();
        writeln!(s, "seeds: {:?}", self.seeds).unwrap();
        writeln!(s, "per-class accuracy (%), median over seeds:").unwrap();
        let domains = self.domains();
        write!(s, "{:<6}", "mode").unwrap();
        for d in &domains {
            write!(s, "{:>8}", format!("d{d}")).unwrap();
        }
        writeln!(s, "{:>8}", "AVG").unwrap();
        for m in self.modes() {
            write!(s, "{:<6}", m.to_string()).unwrap();
            for &d in &domains {
                write!(s, "{:>8.2}", 100.0 * self.median_cell(m, d)).unwrap();
            }
            writeln!(s, "{:>8.2}", 100.0 * self.median_avg(m)).unwrap();
        }
        for r in &self.results {
            if !r.accuracy.excluded.is_empty() {
                writeln!(
                    s,
                    "note: {} seed {} domain {}: classes without samples {:?}",
                    r.mode, r.seed, r.domain, r.accuracy.excluded
                )
                .unwrap();
            }
        }
        s
    }

    /// Writes `<prefix>_table.csv`, `<prefix>_classes.csv` and `<prefix>_summary.txt`.
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir).map_err(|e| EvalError::Io(format!("{}: {e}", dir.display())))?;
        for (suffix, body) in [
            ("table.csv", self.table_csv()),
            ("classes.csv", self.classes_csv()),
            ("summary.txt", self.summary()),
        ] {
            let path = dir.join(format!("{prefix}_{suffix}"));
            std::fs::write(&path, body).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

/// Stable 64-bit FNV-1a digest, used to fingerprint configs and data.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

fn fingerprint(ds: &Dataset, cfg: &TrainConfig, pc: &ProtocolConfig) -> String {
    let mut h = fnv1a(format!("{cfg:?}|{:?}|{}", pc.protocol, pc.ls_seen_domains).as_bytes());
    for v in ds.features.iter().chain(&ds.semantics) {
        h = fnv1a(&[h.to_le_bytes(), v.to_le_bytes()].concat());
    }
    format!("{h:016x}")
}

/// A training split plus what to evaluate after training on it.
#[derive(Clone, Debug)]
struct Fold {
    split: Split,
    evals: Vec<FoldEval>,
}

#[derive(Clone, Debug)]
struct FoldEval {
    kind: Protocol,
    domain: u32,
    candidates: Vec<u32>,
}

fn folds(ds: &Dataset, protocol: Protocol, ls_seen: usize, with_dg: bool) -> Result<Vec<Fold>, EvalError> {
    let base = &ds.split;
    let n_seen = base.seen_domains.len();
    let zsl = |domain| FoldEval {
        kind: protocol,
        domain,
        candidates: base.unseen_classes.clone(),
    };
    let dg = |domain| FoldEval {
        kind: Protocol::DomainGeneralization,
        domain,
        candidates: base.seen_classes.clone(),
    };
    match protocol {
        Protocol::Rotation | Protocol::DomainGeneralization => {
            let folds = rotation_folds(base, ds.n_domains, n_seen)?;
            Ok(folds
                .into_iter()
                .map(|split| {
                    let mut evals = Vec::new();
                    for &d in &split.unseen_domains {
                        if protocol == Protocol::Rotation {
                            evals.push(zsl(d));
                        }
                        if with_dg || protocol == Protocol::DomainGeneralization {
                            evals.push(dg(d));
                        }
                    }
                    Fold { split, evals }
                })
                .collect())
        }
        Protocol::LimitedSources => {
            if ls_seen == 0 || ls_seen >= ds.n_domains {
                return Err(EvalError::Setup(format!(
                    "limited sources needs 1..{} seen domains, got {ls_seen}",
                    ds.n_domains
                )));
            }
            let seen: Vec<u32> = (0..ls_seen as u32).collect();
            let unseen: Vec<u32> = (ls_seen as u32..ds.n_domains as u32).collect();
            let evals = unseen.iter().map(|&d| zsl(d)).collect();
            Ok(vec![Fold {
                split: base.with_domains(seen, unseen),
                evals,
            }])
        }
    }
}

struct Job<'a> {
    mode: AblationMode,
    seed: u64,
    fold: &'a Fold,
}

/// Trains every (mode, seed, fold) and evaluates; returns results per protocol kind.
fn run_jobs(
    ds: &Dataset,
    cfg: &TrainConfig,
    folds: &[Fold],
    modes: &[AblationMode],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<(Protocol, FoldResult)>, EvalError> {
    let mut work = Vec::new();
    for &mode in modes {
        for &seed in seeds {
            for fold in folds {
                work.push(Job { mode, seed, fold });
            }
        }
    }
    let outcomes = map_jobs(&work, jobs, |job| -> Result<Vec<(Protocol, FoldResult)>, EvalError> {
        let run_cfg = TrainConfig {
            mode: job.mode,
            seed: job.seed,
            ..cfg.clone()
        };
        let trained = run_training(ds, &job.fold.split, &run_cfg, None)?;
        job.fold
            .evals
            .iter()
            .map(|ev| {
                let rows = ds.select(&ev.candidates, &[ev.domain]);
                let accuracy = per_class_accuracy(&trained.state.params, ds, &rows, &ev.candidates)?;
                Ok((
                    ev.kind,
                    FoldResult {
                        mode: job.mode,
                        seed: job.seed,
                        domain: ev.domain,
                        accuracy,
                    },
                ))
            })
            .collect()
    });
    let mut all = Vec::new();
    for o in outcomes {
        all.extend(o?);
    }
    Ok(all)
}

/// Runs one protocol for every configured mode and seed.
pub fn run_protocol(ds: &Dataset, cfg: &TrainConfig, pc: &ProtocolConfig) -> Result<EvalReport, EvalError> {
    if pc.seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    ds.validate()?;
    let folds = folds(ds, pc.protocol, pc.ls_seen_domains, false)?;
    let results = run_jobs(ds, cfg, &folds, &pc.modes, &pc.seeds, pc.jobs)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    Ok(EvalReport {
        protocol: pc.protocol,
        fingerprint: fingerprint(ds, cfg, pc),
        seeds: pc.seeds.clone(),
        results,
    })
}

/// Scores an already trained model on the dataset's own split: unseen
/// classes (or seen classes for `DomainGeneralization`) in each unseen domain.
pub fn evaluate_state(state: &TrainState, ds: &Dataset, protocol: Protocol) -> Result<EvalReport, EvalError> {
    ds.validate()?;
    let split = &ds.split;
    let candidates = match protocol {
        Protocol::DomainGeneralization => &split.seen_classes,
        _ => &split.unseen_classes,
    };
    let mut results = Vec::new();
    for &domain in &split.unseen_domains {
        let rows = ds.select(candidates, &[domain]);
        results.push(FoldResult {
            mode: state.mode,
            seed: state.seed,
            domain,
            accuracy: per_class_accuracy(&state.params, ds, &rows, candidates)?,
        });
    }
    let mut h = fnv1a(&encode_checkpoint(state));
    for v in ds.features.iter().chain(&ds.semantics) {
        h = fnv1a(&[h.to_le_bytes(), v.to_le_bytes()].concat());
    }
    Ok(EvalReport {
        protocol,
        fingerprint: format!("{h:016x}"),
        seeds: vec![state.seed],
        results,
    })
}

/// The ablation ladder over rotation folds. Each trained model is scored on
/// unseen classes (the ablation table) and on seen classes (the DG view) in
/// its held-out domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub zsl: EvalReport,
    pub dg: EvalReport,
}

pub fn ablate(ds: &Dataset, cfg: &TrainConfig, seeds: &[u64], jobs: usize) -> Result<Ablation, EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    ds.validate()?;
    let pc = ProtocolConfig {
        protocol: Protocol::Rotation,
        modes: AblationMode::ALL.to_vec(),
        seeds: seeds.to_vec(),
        jobs,
        ..ProtocolConfig::default()
    };
    let folds = folds(ds, Protocol::Rotation, 0, true)?;
    let (mut zsl, mut dg) = (Vec::new(), Vec::new());
    for (kind, r) in run_jobs(ds, cfg, &folds, &pc.modes, seeds, jobs)? {
        match kind {
            Protocol::DomainGeneralization => dg.push(r),
            _ => zsl.push(r),
        }
    }
    let report = |protocol, results| EvalReport {
        protocol,
        fingerprint: fingerprint(ds, cfg, &pc),
        seeds: seeds.to_vec(),
        results,
    };
    Ok(Ablation {
        zsl: report(Protocol::Rotation, zsl),
        dg: report(Protocol::DomainGeneralization, dg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_two_one_zero() {
        let p = softmax(&[2.0, 1.0, 0.0]);
        for (a, b) in p.iter().zip([0.665, 0.245, 0.090]) {
            assert!((a - b).abs() < 1e-3);
        }
        assert_eq!(argmax_lowest_id(&[2.0, 1.0, 0.0], &[0, 1, 2]), 0);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        assert_eq!(argmax_lowest_id(&[1.0, 1.0], &[7, 3]), 1);
        assert_eq!(softmax(&[1.0, 1.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn per_class_mean_not_per_sample() {
        let mut truth = vec![0; 10];
        truth.push(1);
        let pred = vec![0; 11];
        let acc = class_accuracy(&truth, &pred, &[0, 1]).unwrap();
        assert_eq!(acc.mean, 0.5);
    }

    #[test]
    fn constant_predictor_over_five_classes() {
        let truth: Vec<u32> = (0..5).flat_map(|c| [c; 4]).collect();
        let acc = class_accuracy(&truth, &[0; 20], &[0, 1, 2, 3, 4]).unwrap();
        let per: Vec<f64> = acc.per_class.iter().map(ClassScore::accuracy).collect();
        assert_eq!(per, [1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((acc.mean - 0.2).abs() < 1e-15);
    }

    #[test]
    fn empty_classes_are_excluded() {
        let acc = class_accuracy(&[0, 0], &[0, 0], &[0, 1]).unwrap();
        assert_eq!(acc.excluded, vec![1]);
        assert_eq!(acc.mean, 1.0);
        assert!(matches!(class_accuracy(&[], &[], &[0]), Err(EvalError::NoSamples)));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
