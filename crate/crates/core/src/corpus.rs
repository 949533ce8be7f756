//! Utterances with frozen base embeddings, known-ratio splits and synthetic
//! blob fixtures.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::rng::SplitMix64;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub gold_label: Option<String>,
    pub base_embedding: Vec<f32>,
}

/// An immutable, validated collection of utterances sharing one embedding
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    dim: usize,
    vocab: Vec<String>,
}

impl Corpus {
    /// Validates the utterances and builds the label vocabulary (sorted).
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let first = utterances
            .first()
            .ok_or_else(|| Error::InvalidArgument("corpus must contain at least one utterance".into()))?;
        let dim = first.base_embedding.len();
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension must be at least 2, got {dim}"
            )));
        }
        let mut seen = BTreeSet::new();
        let mut vocab = BTreeSet::new();
        for (row, u) in utterances.iter().enumerate() {
            if u.base_embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: u.base_embedding.len(),
                });
            }
            if let Some(col) = u.base_embedding.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding row {row}, column {col}")));
            }
            if !seen.insert(u.id.as_str()) {
                return Err(Error::DuplicateId(u.id.clone()));
            }
            if let Some(label) = &u.gold_label {
                vocab.insert(label.clone());
            }
        }
        Ok(Self {
            utterances,
            dim,
            vocab: vocab.into_iter().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn get(&self, index: usize) -> &Utterance {
        &self.utterances[index]
    }

    /// Distinct gold labels, sorted.
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn fully_labeled(&self) -> bool {
        self.utterances.iter().all(|u| u.gold_label.is_some())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.utterances.iter().position(|u| u.id == id)
    }

    /// Map from id to corpus index.
    pub fn id_index(&self) -> BTreeMap<&str, usize> {
        self.utterances
            .iter()
            .enumerate()
            .map(|(i, u)| (u.id.as_str(), i))
            .collect()
    }

    /// Base embeddings widened to `f64`, one row per utterance.
    pub fn base_matrix(&self) -> Matrix {
        let data = self
            .utterances
            .iter()
            .flat_map(|u| u.base_embedding.iter().map(|&v| f64::from(v)))
            .collect();
        Matrix::from_vec(self.len(), self.dim, data).expect("validated shape")
    }

    /// Gold labels of the given rows; errors on the first unlabeled one.
    pub fn gold_labels(&self, indices: &[usize]) -> Result<Vec<&str>> {
        indices
            .iter()
            .map(|&i| {
                let u = &self.utterances[i];
                u.gold_label
                    .as_deref()
                    .ok_or_else(|| Error::MissingGoldLabel(u.id.clone()))
            })
            .collect()
    }
}

/// Parameters of the known-intent evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub known_ratio: f64,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("known_ratio", self.known_ratio),
            ("labeled_fraction", self.labeled_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Result of [`split_known_ratio`]; indices refer to corpus rows and are
/// ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub known_intents: Vec<String>,
}

impl KnownSplit {
    pub fn labeled_ids<'a>(&self, corpus: &'a Corpus) -> Vec<&'a str> {
        self.labeled.iter().map(|&i| corpus.get(i).id.as_str()).collect()
    }

    pub fn unlabeled_ids<'a>(&self, corpus: &'a Corpus) -> Vec<&'a str> {
        self.unlabeled.iter().map(|&i| corpus.get(i).id.as_str()).collect()
    }
}

/// `⌈fraction · n⌉`, tolerant of floating-point noise in the product.
fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    (libm::ceil(x - 1e-9) as usize).min(n)
}

/// Picks `⌈known_ratio·|vocab|⌉` known intents and reveals `labeled_fraction`
/// (rounded up) of each known intent's utterances.
pub fn split_known_ratio(corpus: &Corpus, spec: &SplitSpec) -> Result<KnownSplit> {
    spec.validate()?;
    if let Some(u) = corpus.utterances().iter().find(|u| u.gold_label.is_none()) {
        return Err(Error::MissingGoldLabel(u.id.clone()));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let vocab = corpus.vocab();
    let n_known = ceil_fraction(spec.known_ratio, vocab.len()).max(1);
    let known_intents: Vec<String> = rng
        .sample_indices(vocab.len(), n_known)
        .into_iter()
        .map(|i| vocab[i].clone())
        .collect();

    let mut labeled = Vec::new();
    for intent in &known_intents {
        let members: Vec<usize> = corpus
            .utterances()
            .iter()
            .enumerate()
            .filter(|(_, u)| u.gold_label.as_deref() == Some(intent.as_str()))
            .map(|(i, _)| i)
            .collect();
        let take = ceil_fraction(spec.labeled_fraction, members.len()).max(1);
        labeled.extend(rng.sample_indices(members.len(), take).into_iter().map(|j| members[j]));
    }
    labeled.sort_unstable();
    let mut is_labeled = alloc::vec![false; corpus.len()];
    labeled.iter().for_each(|&i| is_labeled[i] = true);
    let unlabeled = (0..corpus.len()).filter(|&i| !is_labeled[i]).collect();
    Ok(KnownSplit {
        labeled,
        unlabeled,
        known_intents,
    })
}

/// Isotropic Gaussian blobs around `k` centres on a sphere of radius
/// `separation`. Utterance `i` belongs to blob `i mod k`.
pub fn make_synthetic_blobs(
    n: usize,
    k: usize,
    dim: usize,
    separation: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Corpus> {
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("need n >= k >= 1, got n={n}, k={k}")));
    }
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("dim must be at least 2, got {dim}")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!("separation must be nonnegative, got {separation}")));
    }
    if !(noise_sigma > 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_sigma must be positive, got {noise_sigma}")));
    }
    let mut rng = SplitMix64::new(seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let mut c: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let len = crate::linalg::norm(&c);
            c.iter_mut().for_each(|v| *v *= separation / len);
            c
        })
        .collect();
    let width = digits(n);
    let utterances = (0..n)
        .map(|i| {
            let c = i % k;
            let base_embedding = centers[c]
                .iter()
                .map(|&m| (m + noise_sigma * rng.normal()) as f32)
                .collect();
            Utterance {
                id: format!("u{i:0width$}"),
                text: format!("synthetic utterance {i} from blob {c}"),
                gold_label: Some(c.to_string()),
                base_embedding,
            }
        })
        .collect();
    Corpus::new(utterances)
}

fn digits(mut n: usize) -> usize {
    let mut d = 1;
    while n >= 10 {
        n /= 10;
        d += 1;
    }
    d
}
