use alloc::string::String;
use alloc::vec::Vec;

use super::feedback::{ClusterFeedback, Feedback};
use super::{ClusterProposal, DiscoveryConfig};
use crate::corpus::Corpus;
use crate::{Error, Result};

/// Answers proposals from gold labels.
///
/// For each cluster's confidence-ranked samples: when the leading
/// `⌈top_fraction · len⌉` all share a label, every one of them is accepted
/// under it. Otherwise, among the first `top_window`, the samples carrying the
/// most frequent label (earliest first seen on ties) are accepted. Clusters
/// with no samples above the threshold get no entry.
pub fn simulated_oracle(cfg: &DiscoveryConfig, corpus: &Corpus, proposals: &[ClusterProposal]) -> Result<Feedback> {
    let mut clusters = Vec::new();
    for p in proposals {
        if p.samples.is_empty() {
            continue;
        }
        let gold: Vec<&str> = p
            .samples
            .iter()
            .map(|s| {
                let u = corpus.get(s.index);
                u.gold_label.as_deref().ok_or_else(|| Error::MissingGoldLabel(u.id.clone()))
            })
            .collect::<Result<_>>()?;
        let len = gold.len();
        let top = (libm::ceil(cfg.top_fraction * len as f64 - 1e-9) as usize).clamp(1, len);
        let (label, chosen): (&str, Vec<usize>) = if gold[..top].iter().all(|g| *g == gold[0]) {
            (gold[0], (0..top).collect())
        } else {
            let window = &gold[..cfg.top_window.min(len)];
            let label = modal(window);
            (label, (0..window.len()).filter(|&i| window[i] == label).collect())
        };
        clusters.push(ClusterFeedback {
            cluster_id: p.cluster_id,
            accepted: chosen.iter().map(|&i| p.samples[i].id.clone()).collect(),
            rejected: Vec::new(),
            intent: String::from(label),
        });
    }
    Ok(Feedback {
        clusters,
        merges: Vec::new(),
    })
}

/// Most frequent value; ties go to the one seen first.
fn modal<'a>(xs: &[&'a str]) -> &'a str {
    let mut best = (xs[0], 0usize);
    for (i, x) in xs.iter().enumerate() {
        if xs[..i].contains(x) {
            continue;
        }
        let count = xs.iter().filter(|y| *y == x).count();
        if count > best.1 {
            best = (x, count);
        }
    }
    best.0
}
