use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::SessionState;
use crate::corpus::Corpus;

/// A reviewer's decision on one proposed cluster.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterFeedback {
    pub cluster_id: usize,
    pub accepted: Vec<String>,
    pub rejected: Vec<String>,
    /// Intent for the accepted samples, new or existing.
    pub intent: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Feedback {
    pub clusters: Vec<ClusterFeedback>,
    /// Groups of cluster ids whose accepted samples share one intent: the
    /// intent of the first listed cluster that names one.
    pub merges: Vec<Vec<usize>>,
}

impl Feedback {
    pub fn is_empty(&self) -> bool {
        self.clusters.iter().all(|c| c.accepted.is_empty()) && self.merges.is_empty()
    }

    pub fn accepted_count(&self) -> usize {
        self.clusters.iter().map(|c| c.accepted.len()).sum()
    }
}

/// One reason a [`Feedback`] cannot be applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    UnknownCluster { cluster_id: usize },
    DuplicateCluster { cluster_id: usize },
    UnknownId { cluster_id: usize, id: String },
    AlreadyLabeled { cluster_id: usize, id: String },
    AcceptedAndRejected { cluster_id: usize, id: String },
    AcceptedTwice { id: String },
    EmptyIntent { cluster_id: usize },
    MergeUnknownCluster { cluster_id: usize },
    MergeOverlap { cluster_id: usize },
}

/// Every violation of `feedback` against the session's current proposals
/// and unlabeled pool; empty when the feedback may be applied.
pub fn validate_feedback(session: &SessionState, corpus: &Corpus, feedback: &Feedback) -> Vec<Violation> {
    let mut out = Vec::new();
    let known: BTreeSet<usize> = session.proposals.iter().map(|p| p.cluster_id).collect();
    let ids = corpus.id_index();
    let mut seen_clusters = BTreeSet::new();
    let mut accepted_anywhere: BTreeMap<&str, usize> = BTreeMap::new();

    for c in &feedback.clusters {
        let cid = c.cluster_id;
        if !known.contains(&cid) {
            out.push(Violation::UnknownCluster { cluster_id: cid });
        }
        if !seen_clusters.insert(cid) {
            out.push(Violation::DuplicateCluster { cluster_id: cid });
        }
        let rejected: BTreeSet<&str> = c.rejected.iter().map(String::as_str).collect();
        for id in &c.rejected {
            if !ids.contains_key(id.as_str()) {
                out.push(Violation::UnknownId {
                    cluster_id: cid,
                    id: id.clone(),
                });
            }
        }
        for id in &c.accepted {
            match ids.get(id.as_str()) {
                None => out.push(Violation::UnknownId {
                    cluster_id: cid,
                    id: id.clone(),
                }),
                Some(&i) if session.labeled.contains_key(&i) => out.push(Violation::AlreadyLabeled {
                    cluster_id: cid,
                    id: id.clone(),
                }),
                Some(_) => {}
            }
            if rejected.contains(id.as_str()) {
                out.push(Violation::AcceptedAndRejected {
                    cluster_id: cid,
                    id: id.clone(),
                });
            }
            let n = accepted_anywhere.entry(id.as_str()).or_insert(0);
            *n += 1;
            if *n == 2 {
                out.push(Violation::AcceptedTwice { id: id.clone() });
            }
        }
    }

    let mut merged = BTreeSet::new();
    for group in &feedback.merges {
        for &cid in group {
            if !known.contains(&cid) {
                out.push(Violation::MergeUnknownCluster { cluster_id: cid });
            }
            if !merged.insert(cid) {
                out.push(Violation::MergeOverlap { cluster_id: cid });
            }
        }
    }

    for c in &feedback.clusters {
        if c.accepted.is_empty() || !c.intent.trim().is_empty() {
            continue;
        }
        let rescued = merge_intent(feedback, c.cluster_id).is_some();
        if !rescued {
            out.push(Violation::EmptyIntent { cluster_id: c.cluster_id });
        }
    }
    out
}

/// Intent shared by the merge group containing `cluster_id`, if any.
pub(crate) fn merge_intent(feedback: &Feedback, cluster_id: usize) -> Option<&str> {
    let group = feedback.merges.iter().find(|g| g.contains(&cluster_id))?;
    group.iter().find_map(|cid| {
        feedback
            .clusters
            .iter()
            .find(|c| c.cluster_id == *cid && !c.intent.trim().is_empty())
            .map(|c| c.intent.trim())
    })
}

/// Intent under which the accepted samples of `c` are recorded.
pub(crate) fn resolved_intent<'a>(feedback: &'a Feedback, c: &'a ClusterFeedback) -> &'a str {
    merge_intent(feedback, c.cluster_id).unwrap_or_else(|| c.intent.trim())
}
