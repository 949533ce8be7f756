//! Incremental human-in-the-loop discovery.
//!
//! A session starts from contrastive pre-training over the whole corpus with
//! nothing labeled. Each iteration clusters the unlabeled pool into `k_t`
//! groups and proposes, per cluster, the samples whose centroid cosine clears
//! the confidence threshold. A reviewer (or [`simulated_oracle`]) accepts
//! samples under intent names; [`advance_iteration`] then retrains on the grown
//! labeled set, records metrics and raises `k_t` to the number of intents when
//! that is larger.
//!
//! The session is a deterministic function of its configuration, the corpus
//! and the sequence of [`SessionEvent`]s, which [`replay`] exploits.

mod feedback;
mod oracle;

pub use feedback::{validate_feedback, ClusterFeedback, Feedback, Violation};
pub use oracle::simulated_oracle;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::clustering::{estimate_k, kmeans};
use crate::corpus::Corpus;
use crate::encoder::{EncoderParams, TrainConfig};
use crate::linalg::{project_2d, Matrix};
use crate::metrics::MetricTriple;
use crate::pipeline::{
    evaluate, normalized_representations, run_stage1, run_stage2, run_ucl, PipelineConfig, StageReport, EVAL_SEED,
};
use crate::rng::derive_seed;
use crate::{Error, Result};

const PARAMS_STREAM: u64 = 1;
const UCL_STREAM: u64 = 2;
const ESTIMATE_STREAM: u64 = 3;
const PROPOSE_STREAM: u64 = 4;
const TRAIN_STREAM: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryMode {
    /// A person reviews proposals; stops when `k_t` plateaus.
    Interactive,
    /// Gold labels answer; stops when every gold intent is discovered.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    /// Confidence threshold on the first iteration.
    pub gamma_first: f64,
    /// Confidence threshold on later iterations.
    pub gamma_rest: f64,
    pub top_fraction: f64,
    pub top_window: usize,
    /// Over-clustering size for the initial K estimate.
    pub k_prime: usize,
    /// Initial cluster count; skips the estimate when set.
    pub fixed_k: Option<usize>,
    /// Unchanged `k_t` transitions that end an interactive session.
    pub patience: usize,
    pub mode: DiscoveryMode,
    /// Upper bound on iterations for unattended runs.
    pub max_iterations: usize,
    /// Cluster count used when scoring against gold labels; defaults to the
    /// size of the gold vocabulary.
    pub eval_k: Option<usize>,
    pub seed: u64,
    /// Training settings; its `fixed_k` and `k_prime` are not consulted here.
    pub pipeline: PipelineConfig,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            gamma_first: 0.75,
            gamma_rest: 0.95,
            top_fraction: 0.75,
            top_window: 20,
            k_prime: 200,
            fixed_k: None,
            patience: 2,
            mode: DiscoveryMode::Interactive,
            max_iterations: 20,
            eval_k: None,
            seed: 0,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("gamma_first", self.gamma_first), ("gamma_rest", self.gamma_rest)] {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {g}")));
            }
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "top_fraction must lie in (0, 1], got {}",
                self.top_fraction
            )));
        }
        if self.top_window == 0 || self.k_prime == 0 || self.patience == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidArgument(
                "top_window, k_prime, patience and max_iterations must be positive".into(),
            ));
        }
        if self.fixed_k == Some(0) || self.eval_k == Some(0) {
            return Err(Error::InvalidArgument("cluster counts must be positive".into()));
        }
        self.pipeline.validate()
    }

    pub fn gamma(&self, iteration: usize) -> f64 {
        if iteration <= 1 {
            self.gamma_first
        } else {
            self.gamma_rest
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingFeedback,
    Training,
    Converged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSample {
    pub id: String,
    /// Position in the corpus.
    pub index: usize,
    pub text: String,
    pub confidence: f64,
    pub xy: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: String,
    pub xy: [f64; 2],
}

/// One cluster of the unlabeled pool as shown to the reviewer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProposal {
    pub cluster_id: usize,
    pub size: usize,
    /// Samples above the confidence threshold, most confident first.
    pub samples: Vec<ProposalSample>,
    /// Every member on the two leading principal components.
    pub members: Vec<ProjectedPoint>,
    pub centroid_xy: [f64; 2],
}

/// The row of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cluster count used by this iteration.
    pub k: usize,
    pub k_next: usize,
    pub intents: usize,
    pub labeled: usize,
    pub labeled_pct: f64,
    /// Samples accepted during this iteration.
    pub accepted: usize,
    pub metrics: Option<MetricTriple>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub config: DiscoveryConfig,
    pub corpus_size: usize,
    /// Corpus index → intent (the labeled set).
    pub labeled: BTreeMap<usize, String>,
    /// Corpus indices still unlabeled, ascending.
    pub unlabeled: Vec<usize>,
    /// Discovered intents in order of first appearance.
    pub intents: Vec<String>,
    pub k_t: usize,
    /// `k_t` at the start of every iteration so far.
    pub k_history: Vec<usize>,
    pub iteration: usize,
    pub params: EncoderParams,
    /// Head of `params` trained on the labeled set, once one exists.
    pub stage1_head: Option<usize>,
    pub history: Vec<IterationRecord>,
    pub status: SessionStatus,
    pub proposals: Vec<ClusterProposal>,
    /// Whether feedback arrived since the last advance.
    pub feedback_pending: bool,
    pub accepted_this_iteration: usize,
    pub finalized: bool,
    pub termination: Option<String>,
}

impl SessionState {
    pub fn labeled_pct(&self) -> f64 {
        100.0 * self.labeled.len() as f64 / self.corpus_size as f64
    }

    pub fn labeled_ids<'a>(&self, corpus: &'a Corpus) -> Vec<&'a str> {
        self.labeled.keys().map(|&i| corpus.get(i).id.as_str()).collect()
    }

    fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.len() != self.corpus_size || corpus.dim() != self.params.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "session was created for {} points of dimension {}, got {} of dimension {}",
                self.corpus_size,
                self.params.input_dim(),
                corpus.len(),
                corpus.dim()
            )));
        }
        Ok(())
    }
}

/// Contrastive pre-training, the initial `k_1` and the first proposals.
pub fn init_session(corpus: &Corpus, cfg: &DiscoveryConfig) -> Result<(SessionState, StageReport)> {
    cfg.validate()?;
    let pc = &cfg.pipeline;
    let points = corpus.base_matrix();
    let mut params = EncoderParams::new(
        corpus.dim(),
        pc.hidden_dim,
        pc.dropout_rate,
        derive_seed(cfg.seed, PARAMS_STREAM),
    )?;
    let ucl_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, UCL_STREAM),
        ..pc.ucl_train()
    };
    let report = run_ucl(&mut params, &points, &ucl_cfg)?;
    let k_1 = match cfg.fixed_k {
        Some(k) => k,
        None => {
            let reps = normalized_representations(&params, &points, None)?;
            estimate_k(&reps, cfg.k_prime, derive_seed(cfg.seed, ESTIMATE_STREAM), &pc.kmeans)?.k
        }
    };
    let mut session = SessionState {
        config: cfg.clone(),
        corpus_size: corpus.len(),
        labeled: BTreeMap::new(),
        unlabeled: (0..corpus.len()).collect(),
        intents: Vec::new(),
        k_t: k_1,
        k_history: alloc::vec![k_1],
        iteration: 1,
        params,
        stage1_head: None,
        history: Vec::new(),
        status: SessionStatus::AwaitingFeedback,
        proposals: Vec::new(),
        feedback_pending: false,
        accepted_this_iteration: 0,
        finalized: false,
        termination: None,
    };
    propose_clusters(&mut session, corpus)?;
    Ok((session, report))
}

/// Clusters the unlabeled pool with `k_t` (capped at its size) and stores the
/// proposals, largest cluster first.
pub fn propose_clusters<'s>(session: &'s mut SessionState, corpus: &Corpus) -> Result<&'s [ClusterProposal]> {
    session.check_corpus(corpus)?;
    if session.status == SessionStatus::Converged {
        return Err(Error::InvalidStatus(session.status));
    }
    if session.unlabeled.is_empty() {
        session.proposals.clear();
        converge(session, "unlabeled pool exhausted");
        return Ok(&session.proposals);
    }
    let points = corpus.base_matrix();
    let reps = normalized_representations(&session.params, &points, Some(&session.unlabeled))?;
    let k = session.k_t.min(reps.rows());
    let seed = derive_seed(derive_seed(session.config.seed, PROPOSE_STREAM), session.iteration as u64);
    let model = kmeans(&reps, k, seed, &session.config.pipeline.kmeans)?;
    let xy = project_2d(&reps);
    let centroid_xy = centroid_projection(&reps, &xy, &model.assignments, k);
    let gamma = session.config.gamma(session.iteration);

    let mut proposals: Vec<ClusterProposal> = (0..k)
        .map(|c| ClusterProposal {
            cluster_id: c,
            size: 0,
            samples: Vec::new(),
            members: Vec::new(),
            centroid_xy: centroid_xy[c],
        })
        .collect();
    for (row, &c) in model.assignments.iter().enumerate() {
        let index = session.unlabeled[row];
        let u = corpus.get(index);
        let p = &mut proposals[c];
        p.size += 1;
        p.members.push(ProjectedPoint {
            id: u.id.clone(),
            xy: xy[row],
        });
        let s = model.confidences[row];
        if s > gamma {
            p.samples.push(ProposalSample {
                id: u.id.clone(),
                index,
                text: u.text.clone(),
                confidence: s,
                xy: xy[row],
            });
        }
    }
    for p in &mut proposals {
        p.samples.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.index.cmp(&b.index)));
    }
    proposals.sort_by(|a, b| b.size.cmp(&a.size).then(a.cluster_id.cmp(&b.cluster_id)));
    proposals.retain(|p| p.size > 0);
    session.proposals = proposals;
    session.status = SessionStatus::AwaitingFeedback;
    Ok(&session.proposals)
}

fn centroid_projection(reps: &Matrix, xy: &[[f64; 2]], assignments: &[usize], k: usize) -> Vec<[f64; 2]> {
    let mut sums = alloc::vec![[0.0; 2]; k];
    let mut counts = alloc::vec![0usize; k];
    for (row, &c) in assignments.iter().enumerate().take(reps.rows()) {
        sums[c][0] += xy[row][0];
        sums[c][1] += xy[row][1];
        counts[c] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { [0.0, 0.0] } else { [s[0] / n as f64, s[1] / n as f64] })
        .collect()
}

/// Moves accepted samples into the labeled set under their intents.
pub fn apply_feedback(session: &mut SessionState, corpus: &Corpus, feedback: &Feedback) -> Result<()> {
    session.check_corpus(corpus)?;
    if session.status != SessionStatus::AwaitingFeedback {
        return Err(Error::InvalidStatus(session.status));
    }
    let violations = validate_feedback(session, corpus, feedback);
    if !violations.is_empty() {
        return Err(Error::InvalidFeedback(violations));
    }
    let ids = corpus.id_index();
    for c in &feedback.clusters {
        if c.accepted.is_empty() {
            continue;
        }
        let intent = feedback::resolved_intent(feedback, c);
        if !session.intents.iter().any(|i| i == intent) {
            session.intents.push(String::from(intent));
        }
        for id in &c.accepted {
            session.labeled.insert(ids[id.as_str()], String::from(intent));
        }
    }
    let labeled = &session.labeled;
    session.unlabeled.retain(|i| !labeled.contains_key(i));
    session.accepted_this_iteration += feedback.accepted_count();
    session.feedback_pending = true;
    Ok(())
}

/// What [`advance_iteration`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvanceOutcome {
    /// `None` when there was no feedback to learn from and nothing changed.
    pub record: Option<IterationRecord>,
    pub reports: Vec<StageReport>,
}

/// Retrains on the labeled set, logs the iteration, updates `k_t` and either
/// converges or proposes the next clusters.
pub fn advance_iteration(session: &mut SessionState, corpus: &Corpus) -> Result<AdvanceOutcome> {
    session.check_corpus(corpus)?;
    if session.status == SessionStatus::Converged {
        return Err(Error::InvalidStatus(session.status));
    }
    if !session.feedback_pending {
        return Ok(AdvanceOutcome {
            record: None,
            reports: Vec::new(),
        });
    }
    let cfg = session.config.clone();
    let points = corpus.base_matrix();
    let train = TrainConfig {
        seed: derive_seed(derive_seed(cfg.seed, TRAIN_STREAM), session.iteration as u64),
        ..cfg.pipeline.train
    };
    let pc = PipelineConfig {
        train,
        ..cfg.pipeline.clone()
    };
    let mut reports = Vec::new();
    if !session.labeled.is_empty() {
        let idx: Vec<usize> = session.labeled.keys().copied().collect();
        let labels: Vec<String> = session.labeled.values().cloned().collect();
        let s1 = run_stage1(
            &mut session.params,
            &points,
            &idx,
            &labels,
            &session.intents,
            session.stage1_head,
            &train,
        )?;
        session.stage1_head = Some(s1.head);
        reports.push(s1.report);
    }
    if session.stage1_head.is_some() || pc.unsupervised_only {
        let k = session.k_t.min(points.rows());
        let s2 = run_stage2(&mut session.params, &points, k, session.stage1_head, &pc)?;
        session.stage1_head = s2.stage1_head;
        reports.push(s2.report);
    }
    let metrics = if corpus.fully_labeled() {
        let all: Vec<usize> = (0..corpus.len()).collect();
        let gold = corpus.gold_labels(&all)?;
        let k = cfg.eval_k.unwrap_or(corpus.vocab().len()).min(corpus.len());
        Some(evaluate(&session.params, &points, &all, &gold, k, EVAL_SEED, &pc.kmeans)?)
    } else {
        None
    };
    let k_next = session.k_t.max(session.intents.len());
    let record = IterationRecord {
        iteration: session.iteration,
        k: session.k_t,
        k_next,
        intents: session.intents.len(),
        labeled: session.labeled.len(),
        labeled_pct: session.labeled_pct(),
        accepted: session.accepted_this_iteration,
        metrics,
    };
    if let Some(r) = reports.last_mut() {
        r.metrics = metrics;
    }
    session.history.push(record.clone());
    session.k_t = k_next;
    session.k_history.push(k_next);
    session.iteration += 1;
    session.feedback_pending = false;
    session.accepted_this_iteration = 0;

    match should_terminate(session, corpus) {
        Some(reason) => converge(session, &reason),
        None => {
            propose_clusters(session, corpus)?;
        }
    }
    Ok(AdvanceOutcome {
        record: Some(record),
        reports,
    })
}

/// Why the session should stop now, if it should.
pub fn should_terminate(session: &SessionState, corpus: &Corpus) -> Option<String> {
    if session.finalized {
        return Some("finalized by user".into());
    }
    if session.unlabeled.is_empty() {
        return Some("unlabeled pool exhausted".into());
    }
    match session.config.mode {
        DiscoveryMode::Oracle => {
            (session.intents.len() == corpus.vocab().len()).then(|| "all intents discovered".into())
        }
        DiscoveryMode::Interactive => {
            let unchanged = session
                .k_history
                .windows(2)
                .rev()
                .take_while(|w| w[0] == w[1])
                .count();
            (unchanged >= session.config.patience)
                .then(|| format!("k_t unchanged for {unchanged} iterations"))
        }
    }
}

/// Ends the session on the reviewer's request.
pub fn finalize(session: &mut SessionState) {
    session.finalized = true;
    converge(session, "finalized by user");
}

fn converge(session: &mut SessionState, reason: &str) {
    session.status = SessionStatus::Converged;
    session.termination = Some(String::from(reason));
}

/// A state-changing request, as recorded in a session's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    Init { config: DiscoveryConfig },
    Feedback { feedback: Feedback },
    Advance,
    Finalize,
}

/// Applies one logged event to `session` (or creates it on `Init`).
pub fn apply_event(session: Option<SessionState>, corpus: &Corpus, event: &SessionEvent) -> Result<SessionState> {
    match (session, event) {
        (None, SessionEvent::Init { config }) => Ok(init_session(corpus, config)?.0),
        (Some(_), SessionEvent::Init { .. }) => Err(Error::InvalidArgument("session already initialised".into())),
        (None, _) => Err(Error::InvalidArgument("event log must start with init".into())),
        (Some(mut s), SessionEvent::Feedback { feedback }) => {
            apply_feedback(&mut s, corpus, feedback)?;
            Ok(s)
        }
        (Some(mut s), SessionEvent::Advance) => {
            advance_iteration(&mut s, corpus)?;
            Ok(s)
        }
        (Some(mut s), SessionEvent::Finalize) => {
            finalize(&mut s);
            Ok(s)
        }
    }
}

/// Rebuilds a session from its event log.
pub fn replay(corpus: &Corpus, events: &[SessionEvent]) -> Result<SessionState> {
    let mut state = None;
    for e in events {
        state = Some(apply_event(state, corpus, e)?);
    }
    state.ok_or_else(|| Error::InvalidArgument("empty event log".into()))
}

/// Result of an unattended oracle-driven run.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub session: SessionState,
    pub events: Vec<SessionEvent>,
    pub reports: Vec<StageReport>,
}

/// Runs the discovery loop with [`simulated_oracle`] until the session
/// converges or `max_iterations` iterations have been advanced.
pub fn run_oracle(corpus: &Corpus, cfg: &DiscoveryConfig) -> Result<OracleRun> {
    let cfg = DiscoveryConfig {
        mode: DiscoveryMode::Oracle,
        ..cfg.clone()
    };
    if !corpus.fully_labeled() {
        let missing = corpus.utterances().iter().find(|u| u.gold_label.is_none());
        return Err(Error::MissingGoldLabel(missing.map(|u| u.id.clone()).unwrap_or_default()));
    }
    let (mut session, ucl) = init_session(corpus, &cfg)?;
    let mut events = alloc::vec![SessionEvent::Init { config: cfg.clone() }];
    let mut reports = alloc::vec![ucl];
    while session.status != SessionStatus::Converged && session.history.len() < cfg.max_iterations {
        let feedback = simulated_oracle(&cfg, corpus, &session.proposals)?;
        apply_feedback(&mut session, corpus, &feedback)?;
        events.push(SessionEvent::Feedback { feedback });
        let outcome = advance_iteration(&mut session, corpus)?;
        events.push(SessionEvent::Advance);
        reports.extend(outcome.reports);
    }
    Ok(OracleRun {
        session,
        events,
        reports,
    })
}
