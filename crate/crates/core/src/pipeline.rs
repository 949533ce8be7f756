//! The three training stages and representation-level evaluation.
//!
//! * [`run_ucl`]: contrastive domain adaptation over every point.
//! * [`run_stage1`]: supervised fine-tuning on labeled points plus
//!   distillation from the parameters at stage entry.
//! * [`run_stage2`]: rounds of cluster → align → pseudo-label training.
//!
//! Every stage owns a fresh Adam state and takes its randomness from
//! `cfg.seed`, so a run is reproducible bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::clustering::{align_centroids, apply_alignment, kmeans, ClusterModel, KMeansOptions};
use crate::encoder::{
    apply_update, supervised_step, ucl_step, AdamState, EncoderParams, Gradients, ModelSnapshot, TrainConfig,
};
use crate::corpus::{split_known_ratio, Corpus, SplitSpec};
use crate::linalg::Matrix;
use crate::metrics::{evaluate_labels, MetricTriple};
use crate::rng::{derive_seed, SplitMix64};
use crate::{Error, Result};

/// Seed used by [`evaluate`] when the caller has no preference.
pub const EVAL_SEED: u64 = 0x5EED_E7A1;

/// Prefix of the label names of the stage-2 pseudo-label head.
pub const PSEUDO_LABEL_PREFIX: &str = "\u{1}cluster-";

const UCL_STREAM: u64 = 0x5543_4c00;
const STAGE1_STREAM: u64 = 0x5354_3100;
const STAGE2_STREAM: u64 = 0x5354_3200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    /// Epochs of contrastive pre-training; `None` uses `train.epochs`.
    pub ucl_epochs: Option<usize>,
    /// Epochs of pseudo-label training per stage-2 round.
    pub stage2_epochs: usize,
    pub stage2_max_rounds: usize,
    /// Stage 2 stops once fewer than this fraction of points change label.
    pub stage2_change_tol: f64,
    /// Ground-truth cluster count; skips K estimation when set.
    pub fixed_k: Option<usize>,
    pub k_prime: usize,
    /// Allows stage 2 without a preceding supervised stage.
    pub unsupervised_only: bool,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub kmeans: KMeansOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            ucl_epochs: None,
            stage2_epochs: 1,
            stage2_max_rounds: 10,
            stage2_change_tol: 0.005,
            fixed_k: None,
            k_prime: 200,
            unsupervised_only: false,
            hidden_dim: 768,
            dropout_rate: 0.1,
            kmeans: KMeansOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.stage2_change_tol > 0.0 && self.stage2_change_tol < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "stage2_change_tol must lie in (0, 1), got {}",
                self.stage2_change_tol
            )));
        }
        if self.stage2_max_rounds == 0 {
            return Err(Error::InvalidArgument("stage2_max_rounds must be at least 1".into()));
        }
        if self.k_prime == 0 {
            return Err(Error::InvalidArgument("k_prime must be at least 1".into()));
        }
        if self.fixed_k == Some(0) {
            return Err(Error::InvalidArgument("fixed_k must be at least 1".into()));
        }
        if self.hidden_dim < 2 {
            return Err(Error::InvalidArgument("hidden_dim must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument("dropout_rate must lie in [0, 1)".into()));
        }
        if self.kmeans.max_iter == 0 || self.kmeans.n_init == 0 {
            return Err(Error::InvalidArgument("kmeans needs max_iter and n_init of at least 1".into()));
        }
        Ok(())
    }

    pub fn ucl_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.ucl_epochs.unwrap_or(self.train.epochs),
            ..self.train
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ucl,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ucl => "ucl",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    /// Total optimisation epochs (summed over rounds in stage 2).
    pub epochs: usize,
    /// Sample-weighted mean loss of every epoch, in order.
    pub losses: Vec<f64>,
    pub final_loss: Option<f64>,
    /// Stage-2 cluster/train rounds executed (0 for other stages).
    pub rounds: usize,
    /// Fraction of points whose aligned pseudo-label changed, per round ≥ 2.
    pub label_changes: Vec<f64>,
    pub seed: u64,
    /// Zero when built without the `std` feature.
    pub wall_time_secs: f64,
    pub metrics: Option<MetricTriple>,
}

impl StageReport {
    fn new(stage: Stage, seed: u64) -> Self {
        Self {
            stage,
            epochs: 0,
            losses: Vec::new(),
            final_loss: None,
            rounds: 0,
            label_changes: Vec::new(),
            seed,
            wall_time_secs: 0.0,
            metrics: None,
        }
    }
}

#[cfg(feature = "std")]
struct Timer(std::time::Instant);
#[cfg(feature = "std")]
impl Timer {
    fn start() -> Self {
        Timer(std::time::Instant::now())
    }
    fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}
#[cfg(not(feature = "std"))]
struct Timer;
#[cfg(not(feature = "std"))]
impl Timer {
    fn start() -> Self {
        Timer
    }
    fn secs(&self) -> f64 {
        0.0
    }
}

/// Shuffled mini-batches of `0..n`; a trailing batch smaller than `min` is
/// folded into the one before it.
fn batches(n: usize, batch_size: usize, min: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min) {
        let tail = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(tail);
    }
    out
}

struct Epochs<'a> {
    stage: Stage,
    seed: u64,
    cfg: &'a TrainConfig,
    min_batch: usize,
    /// Offset of the first epoch, for stages that run several loops.
    first_epoch: usize,
}

impl Epochs<'_> {
    /// Runs `epochs` epochs of `step` over `n` items; returns per-epoch losses.
    fn run<F>(&self, params: &mut EncoderParams, adam: &mut AdamState, n: usize, epochs: usize, mut step: F) -> Result<Vec<f64>>
    where
        F: FnMut(&EncoderParams, &[usize], u64) -> Result<(f64, Gradients)>,
    {
        let mut losses = Vec::with_capacity(epochs);
        for e in 0..epochs {
            let epoch = self.first_epoch + e;
            let epoch_seed = derive_seed(self.seed, epoch as u64);
            let mut total = 0.0;
            for (b, idx) in batches(n, self.cfg.batch_size, self.min_batch, epoch_seed).iter().enumerate() {
                let (loss, grads) = step(params, idx, derive_seed(epoch_seed, 1 + b as u64))?;
                if !loss.is_finite() || !grads.slices().iter().all(|s| s.iter().all(|g| g.is_finite())) {
                    return Err(Error::NonFiniteLoss {
                        stage: String::from(self.stage.name()),
                        epoch,
                        batch: b,
                    });
                }
                apply_update(params, &grads, self.cfg.learning_rate, adam)?;
                total += loss * idx.len() as f64;
            }
            losses.push(total / n as f64);
        }
        Ok(losses)
    }
}

fn rows<'a>(points: &'a Matrix, idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|&i| points.row(i)).collect()
}

fn check_points(params: &EncoderParams, points: &Matrix) -> Result<()> {
    if points.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: points.cols(),
        });
    }
    Ok(())
}

/// Contrastive pre-training over every row of `points` (labels unused).
pub fn run_ucl(params: &mut EncoderParams, points: &Matrix, cfg: &TrainConfig) -> Result<StageReport> {
    cfg.validate()?;
    check_points(params, points)?;
    let seed = derive_seed(cfg.seed, UCL_STREAM);
    let mut report = StageReport::new(Stage::Ucl, seed);
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if points.rows() < 2 {
        return Err(Error::BatchTooSmall {
            min: 2,
            actual: points.rows(),
        });
    }
    let timer = Timer::start();
    let mut adam = AdamState::for_params(params);
    let epochs = Epochs {
        stage: Stage::Ucl,
        seed,
        cfg,
        min_batch: 2,
        first_epoch: 0,
    };
    report.losses = epochs.run(params, &mut adam, points.rows(), cfg.epochs, |p, idx, s| {
        ucl_step(p, &rows(points, idx), cfg, s)
    })?;
    report.epochs = cfg.epochs;
    report.final_loss = report.losses.last().copied();
    report.wall_time_secs = timer.secs();
    Ok(report)
}

/// Result of a supervised stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Outcome {
    /// Index of the head over `label_space` after training.
    pub head: usize,
    pub report: StageReport,
}

/// Supervised fine-tuning of a head over `label_space` on the labeled rows.
///
/// The distillation target is a snapshot of `params` at entry. If `params`
/// already carries a supervised head (the most recent one in
/// `previous_head`), the snapshot keeps that head and predictions go through
/// its retained copy; otherwise the new head is also used on the snapshot's
/// representations. Every head other than the new one and the retained one is
/// dropped on entry, and the retained one on exit.
pub fn run_stage1(
    params: &mut EncoderParams,
    points: &Matrix,
    labeled: &[usize],
    labels: &[String],
    label_space: &[String],
    previous_head: Option<usize>,
    cfg: &TrainConfig,
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    check_points(params, points)?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("stage 1 needs at least one labeled point".into()));
    }
    if labeled.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labeled.len(),
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labeled.iter().find(|&&i| i >= points.rows()) {
        return Err(Error::InvalidArgument(format!("labeled index {bad} out of range")));
    }
    let seed = derive_seed(cfg.seed, STAGE1_STREAM);
    let timer = Timer::start();

    let keep: Vec<usize> = previous_head.into_iter().collect();
    let kept = params.retain_heads(&keep);
    let previous = kept.first().copied();
    let snapshot = ModelSnapshot::capture(params, previous)?;
    let head = params.ensure_head(label_space, derive_seed(seed, u64::MAX))?;
    let targets = crate::encoder::encode_labels(params, head, labels)?;

    let mut adam = AdamState::for_params(params);
    let epochs = Epochs {
        stage: Stage::Stage1,
        seed,
        cfg,
        min_batch: 1,
        first_epoch: 0,
    };
    let losses = epochs.run(params, &mut adam, labeled.len(), cfg.epochs, |p, idx, s| {
        let batch: Vec<&[f64]> = idx.iter().map(|&i| points.row(labeled[i])).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
        supervised_step(p, head, Some(&snapshot), &batch, &ys, cfg, Some(s))
    })?;
    let head = params.retain_heads(&[head])[0];

    let mut report = StageReport::new(Stage::Stage1, seed);
    report.epochs = cfg.epochs;
    report.final_loss = losses.last().copied();
    report.losses = losses;
    report.wall_time_secs = timer.secs();
    Ok(Stage1Outcome { head, report })
}

/// L2-normalised inference-mode representations of the selected rows.
pub fn normalized_representations(params: &EncoderParams, points: &Matrix, idx: Option<&[usize]>) -> Result<Matrix> {
    let mut reps = match idx {
        Some(idx) => params.represent_all(&points.select_rows(idx))?,
        None => params.represent_all(points)?,
    };
    reps.normalize_rows();
    Ok(reps)
}

/// Result of the deep-clustering stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Outcome {
    /// Clustering of the last round, with aligned labels.
    pub clusters: ClusterModel,
    /// Index of the supervised head, which survives the stage.
    pub stage1_head: Option<usize>,
    pub report: StageReport,
}

fn pseudo_label_space(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{PSEUDO_LABEL_PREFIX}{i}")).collect()
}

/// Iterative pseudo-label training over every row of `points` with `k`
/// clusters.
///
/// Distils through the supervised head `stage1_head` against a snapshot taken
/// at entry. Without such a head the stage refuses to run unless
/// `cfg.unsupervised_only` is set, in which case the pseudo-label head plays
/// both roles. The pseudo-label head is removed again before returning.
pub fn run_stage2(
    params: &mut EncoderParams,
    points: &Matrix,
    k: usize,
    stage1_head: Option<usize>,
    cfg: &PipelineConfig,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    check_points(params, points)?;
    if k == 0 || k > points.rows() {
        return Err(Error::TooFewPoints {
            points: points.rows(),
            clusters: k,
        });
    }
    if stage1_head.is_none() && !cfg.unsupervised_only {
        return Err(Error::StageOrder(
            "stage 2 needs a supervised head; set unsupervised_only to skip stage 1".into(),
        ));
    }
    let train = &cfg.train;
    let seed = derive_seed(train.seed, STAGE2_STREAM);
    let timer = Timer::start();

    let keep: Vec<usize> = stage1_head.into_iter().collect();
    let stage1_head = params.retain_heads(&keep).first().copied();
    let snapshot = ModelSnapshot::capture(params, stage1_head)?;
    let pseudo = params.ensure_head(&pseudo_label_space(k), derive_seed(seed, u64::MAX))?;
    let mut adam = AdamState::for_params(params);

    let n = points.rows();
    let mut report = StageReport::new(Stage::Stage2, seed);
    let mut prev: Option<ClusterModel> = None;
    for round in 0..cfg.stage2_max_rounds {
        let reps = normalized_representations(params, points, None)?;
        let raw = kmeans(&reps, k, derive_seed(seed, round as u64), &cfg.kmeans)?;
        let clusters = match &prev {
            Some(p) => apply_alignment(&raw, &align_centroids(p, &raw)?)?,
            None => raw,
        };
        report.rounds = round + 1;
        let mut stop = false;
        if let Some(p) = &prev {
            let changed = p
                .assignments
                .iter()
                .zip(&clusters.assignments)
                .filter(|(a, b)| a != b)
                .count();
            let frac = changed as f64 / n as f64;
            report.label_changes.push(frac);
            stop = frac < cfg.stage2_change_tol;
        }
        if stop {
            prev = Some(clusters);
            break;
        }
        let epochs = Epochs {
            stage: Stage::Stage2,
            seed,
            cfg: train,
            min_batch: 1,
            first_epoch: report.epochs,
        };
        let targets = &clusters.assignments;
        let losses = epochs.run(params, &mut adam, n, cfg.stage2_epochs, |p, idx, s| {
            let ys: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            supervised_step(p, pseudo, Some(&snapshot), &rows(points, idx), &ys, train, Some(s))
        })?;
        report.epochs += losses.len();
        report.losses.extend(losses);
        prev = Some(clusters);
    }
    let stage1_head = match stage1_head {
        Some(h) => Some(params.retain_heads(&[h])[0]),
        None => {
            params.retain_heads(&[]);
            None
        }
    };
    report.final_loss = report.losses.last().copied();
    report.wall_time_secs = timer.secs();
    Ok(Stage2Outcome {
        clusters: prev.expect("at least one round"),
        stage1_head,
        report,
    })
}

/// Clusters the representations of `eval` into `k` groups and scores them
/// against `gold`.
pub fn evaluate<S: AsRef<str>>(
    params: &EncoderParams,
    points: &Matrix,
    eval: &[usize],
    gold: &[S],
    k: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<MetricTriple> {
    if eval.len() != gold.len() {
        return Err(Error::DimensionMismatch {
            expected: eval.len(),
            actual: gold.len(),
        });
    }
    check_points(params, points)?;
    let reps = normalized_representations(params, points, Some(eval))?;
    let model = kmeans(&reps, k, seed, opts)?;
    let gold: Vec<&str> = gold.iter().map(|g| g.as_ref()).collect();
    evaluate_labels(&gold, &model.assignments)
}

/// Scores of one known-ratio run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownRatioRun {
    pub seed: u64,
    pub known_intents: Vec<String>,
    pub labeled: usize,
    pub evaluated: usize,
    pub k: usize,
    pub stage1: MetricTriple,
    pub stage2: MetricTriple,
    pub reports: Vec<StageReport>,
}

const TEST_STREAM: u64 = 0x5445_5354;

/// Held-out evaluation points: `round(test_fraction · N)` indices drawn with
/// a seed derived from `seed`, ascending.
pub fn test_split(n: usize, test_fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!("test fraction must lie in [0, 1), got {test_fraction}")));
    }
    let count = libm::round(test_fraction * n as f64) as usize;
    Ok(SplitMix64::new(derive_seed(seed, TEST_STREAM)).sample_indices(n, count.min(n.saturating_sub(1))))
}

/// One run of the known-ratio protocol.
///
/// A `test_fraction` of the corpus is held out from all training. The rest
/// is split by `split`; UCL and stage 2 see every training point, stage 1 the
/// labeled ones. The held-out points (every training point when
/// `test_fraction` is 0) are clustered with the ground-truth cluster count, or
/// `cfg.fixed_k`, after each supervised stage.
pub fn run_known_ratio(corpus: &Corpus, split: &SplitSpec, test_fraction: f64, cfg: &PipelineConfig) -> Result<KnownRatioRun> {
    cfg.validate()?;
    let test = test_split(corpus.len(), test_fraction, split.seed)?;
    let mut is_test = alloc::vec![false; corpus.len()];
    test.iter().for_each(|&i| is_test[i] = true);
    let train_idx: Vec<usize> = (0..corpus.len()).filter(|&i| !is_test[i]).collect();
    let train_corpus = Corpus::new(train_idx.iter().map(|&i| corpus.get(i).clone()).collect())?;
    let known = split_known_ratio(&train_corpus, split)?;

    let all_points = corpus.base_matrix();
    let points = train_corpus.base_matrix();
    let k = cfg.fixed_k.unwrap_or(corpus.vocab().len());
    let held_out = !test.is_empty();
    let (eval_points, eval) = if !held_out {
        (&points, (0..train_corpus.len()).collect::<Vec<_>>())
    } else {
        (&all_points, test)
    };
    let gold: Vec<String> = eval
        .iter()
        .map(|&i| {
            let u = if held_out { corpus.get(i) } else { train_corpus.get(i) };
            u.gold_label.clone().ok_or_else(|| Error::MissingGoldLabel(u.id.clone()))
        })
        .collect::<Result<_>>()?;
    let train = TrainConfig {
        seed: derive_seed(cfg.train.seed, split.seed),
        ..cfg.train
    };
    let cfg = PipelineConfig { train, ..cfg.clone() };

    let mut params = EncoderParams::new(corpus.dim(), cfg.hidden_dim, cfg.dropout_rate, derive_seed(train.seed, 0))?;
    let ucl = run_ucl(&mut params, &points, &cfg.ucl_train())?;
    let labels: Vec<String> = train_corpus
        .gold_labels(&known.labeled)?
        .into_iter()
        .map(String::from)
        .collect();
    let mut s1 = run_stage1(&mut params, &points, &known.labeled, &labels, &known.known_intents, None, &train)?;
    let stage1 = evaluate(&params, eval_points, &eval, &gold, k, EVAL_SEED, &cfg.kmeans)?;
    s1.report.metrics = Some(stage1);
    let mut s2 = run_stage2(&mut params, &points, k, Some(s1.head), &cfg)?;
    let stage2 = evaluate(&params, eval_points, &eval, &gold, k, EVAL_SEED, &cfg.kmeans)?;
    s2.report.metrics = Some(stage2);
    Ok(KnownRatioRun {
        seed: split.seed,
        known_intents: known.known_intents,
        labeled: known.labeled.len(),
        evaluated: eval.len(),
        k,
        stage1,
        stage2,
        reports: alloc::vec![ucl, s1.report, s2.report],
    })
}
