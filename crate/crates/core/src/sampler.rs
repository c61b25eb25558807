//! Candidate-list construction for each selection strategy.
//!
//! Every strategy yields a [`CandidateList`]: image ids in descending priority,
//! each with a non-negative weight. The loop consumes lists front to back.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::ImageId;
use crate::scoring::ImageScore;
use crate::seed;

/// Default confidence bin edges, in percent.
pub const DEFAULT_EDGES: [f64; 7] = [40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 95.0];
/// Images at or above this mean confidence (percent) count as handled.
pub const DEFAULT_UNCERTAINTY_THRESHOLD: f64 = 95.0;
/// Minimum confidence in the rate formula, in percent.
pub const DEFAULT_R_MIN: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Uncertainty,
    Bba,
    Ma,
    Tc,
    Entropy,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Random,
        Strategy::Uncertainty,
        Strategy::Bba,
        Strategy::Ma,
        Strategy::Tc,
        Strategy::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Uncertainty => "uncertainty",
            Strategy::Bba => "bba",
            Strategy::Ma => "ma",
            Strategy::Tc => "tc",
            Strategy::Entropy => "entropy",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown strategy `{s}` (expected random|uncertainty|bba|ma|tc|entropy)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub image_id: ImageId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub strategy: Strategy,
    pub seed: u64,
    pub entries: Vec<Candidate>,
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ImageId> {
        self.entries.iter().map(|c| &c.image_id)
    }

    /// Removes and returns up to `n` entries from the front.
    pub fn take_front(&mut self, n: usize) -> Vec<Candidate> {
        let n = n.min(self.entries.len());
        self.entries.drain(..n).collect()
    }

    pub fn has_unique_ids(&self) -> bool {
        let mut seen = HashSet::new();
        self.ids().all(|id| seen.insert(id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBin {
    pub low: f64,
    pub high: f64,
    pub members: Vec<ImageId>,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub edges: Vec<f64>,
    pub r_min: f64,
    pub uncertainty_threshold: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            edges: DEFAULT_EDGES.to_vec(),
            r_min: DEFAULT_R_MIN,
            uncertainty_threshold: DEFAULT_UNCERTAINTY_THRESHOLD,
        }
    }
}

/// Percent of a bin to sample: `max(0, 100 - (bin_low - r_min))`.
pub fn sampling_rate(bin_low: f64, r_min: f64) -> Result<f64> {
    if bin_low < r_min {
        return Err(Error::config(format!(
            "bin lower bound {bin_low} lies below the minimum confidence {r_min}"
        )));
    }
    Ok((100.0 - (bin_low - r_min)).max(0.0))
}

/// Partitions images into half-open bins `[edges[i], edges[i+1])` of mean
/// confidence (percent). Images at or above `uncertainty_threshold` are left
/// out; images below the first edge, or without detections, join the first
/// bin. Rates are derived from `r_min`.
pub fn bin_by_confidence(
    scores: &[ImageScore],
    edges: &[f64],
    uncertainty_threshold: f64,
    r_min: f64,
) -> Result<Vec<ConfidenceBin>> {
    if edges.len() < 2 {
        return Err(Error::config(format!(
            "need at least 2 bin edges, got {}",
            edges.len()
        )));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "bin edges must be strictly increasing, got {edges:?}"
        )));
    }
    let (first, last) = (edges[0], edges[edges.len() - 1]);
    if !(uncertainty_threshold > first && uncertainty_threshold <= last) {
        return Err(Error::config(format!(
            "uncertainty threshold {uncertainty_threshold} must lie in ({first}, {last}]"
        )));
    }
    let mut bins = edges
        .windows(2)
        .map(|w| {
            Ok(ConfidenceBin {
                low: w[0],
                high: w[1],
                members: Vec::new(),
                rate: sampling_rate(w[0], r_min)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    for s in scores {
        let pct = match s.mean_confidence {
            None => {
                bins[0].members.push(s.image_id.clone());
                continue;
            }
            Some(c) => c * 100.0,
        };
        if pct >= uncertainty_threshold {
            continue;
        }
        // Index of the last edge <= pct; values below the first edge go to bin 0.
        let idx = edges.partition_point(|&e| e <= pct).saturating_sub(1);
        let last_bin = bins.len() - 1;
        bins[idx.min(last_bin)].members.push(s.image_id.clone());
    }
    Ok(bins)
}

/// Number of members a bin contributes: `ceil(rate / 100 * n)`.
pub fn bin_draw_count(rate: f64, n: usize) -> usize {
    let exact = rate * n as f64 / 100.0;
    let rounded = exact.round();
    // Snap values within float noise of an integer before taking the ceiling.
    let count = if (exact - rounded).abs() < 1e-9 {
        rounded
    } else {
        exact.ceil()
    };
    (count.max(0.0) as usize).min(n)
}

/// Draws `ceil(rate/100 * |bin|)` members from every bin without replacement
/// and concatenates the bins from lowest to highest confidence.
pub fn sample_uncertainty(bins: &[ConfidenceBin], seed: u64) -> CandidateList {
    let mut rng = seed::rng(seed::derive(seed, 0x756e_6365_7274));
    let mut order: Vec<&ConfidenceBin> = bins.iter().collect();
    order.sort_by(|a, b| a.low.total_cmp(&b.low));
    let mut entries = Vec::new();
    for bin in order {
        let take = bin_draw_count(bin.rate, bin.members.len());
        for i in index::sample(&mut rng, bin.members.len(), take) {
            entries.push(Candidate {
                image_id: bin.members[i].clone(),
                weight: bin.rate,
            });
        }
    }
    CandidateList {
        strategy: Strategy::Uncertainty,
        seed,
        entries,
    }
}

/// Ids sorted lexicographically, then shuffled with `seed`. Independent of
/// the caller's ingestion order.
fn canonical_shuffle<'a>(ids: impl Iterator<Item = &'a ImageId>, seed: u64) -> Vec<ImageId> {
    let mut v: Vec<ImageId> = ids.cloned().collect();
    v.sort();
    v.shuffle(&mut seed::rng(seed));
    v
}

/// Orders images by descending score for `bba`, `ma` or `entropy`. Ties keep
/// the order of a seeded shuffle of the lexicographically sorted ids. Images
/// with no MA score sort last.
pub fn rank_by_score(scores: &[ImageScore], strategy: Strategy, seed: u64) -> Result<CandidateList> {
    let key: fn(&ImageScore) -> Option<f64> = match strategy {
        Strategy::Bba => |s| Some(s.bba),
        Strategy::Ma => |s| s.ma,
        Strategy::Entropy => |s| Some(s.entropy),
        other => {
            return Err(Error::config(format!(
                "strategy `{other}` is not a score ranking"
            )))
        }
    };
    let by_id: std::collections::HashMap<&ImageId, Option<f64>> =
        scores.iter().map(|s| (&s.image_id, key(s))).collect();
    let mut ids = canonical_shuffle(scores.iter().map(|s| &s.image_id), seed::derive(seed, 1));
    ids.sort_by(|a, b| match (by_id[a], by_id[b]) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    });
    let entries = ids
        .into_iter()
        .map(|id| {
            let weight = by_id[&id].unwrap_or(0.0);
            Candidate {
                image_id: id,
                weight,
            }
        })
        .collect();
    Ok(CandidateList {
        strategy,
        seed,
        entries,
    })
}

/// Weighted ordering over multi-table images. Images with more than one
/// predicted table are drawn without replacement with probability
/// proportional to their table count; the rest follow in seeded random order
/// with weight 0.
pub fn weight_by_table_count(scores: &[ImageScore], seed: u64) -> CandidateList {
    let mut eligible: Vec<&ImageScore> = scores.iter().filter(|s| s.table_count > 1).collect();
    eligible.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let total: f64 = eligible.iter().map(|s| s.table_count as f64).sum();

    // Exponential-key sampling: sorting by E_i / w_i ascending (E_i ~ Exp(1))
    // is a weighted draw without replacement.
    let mut rng = seed::rng(seed::derive(seed, 2));
    let mut keyed: Vec<(f64, &ImageScore)> = eligible
        .into_iter()
        .map(|s| {
            let u: f64 = rng.random::<f64>();
            let e = -(1.0 - u).ln();
            (e / s.table_count as f64, s)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.image_id.cmp(&b.1.image_id)));

    let mut entries: Vec<Candidate> = keyed
        .iter()
        .map(|(_, s)| Candidate {
            image_id: s.image_id.clone(),
            weight: s.table_count as f64 / total,
        })
        .collect();
    let rest = canonical_shuffle(
        scores.iter().filter(|s| s.table_count <= 1).map(|s| &s.image_id),
        seed::derive(seed, 3),
    );
    entries.extend(rest.into_iter().map(|image_id| Candidate {
        image_id,
        weight: 0.0,
    }));
    CandidateList {
        strategy: Strategy::Tc,
        seed,
        entries,
    }
}

/// Uniform seeded shuffle with equal weights.
pub fn random_baseline(image_ids: &[ImageId], seed: u64) -> CandidateList {
    let mut ids = image_ids.to_vec();
    ids.shuffle(&mut seed::rng(seed::derive(seed, 4)));
    CandidateList {
        strategy: Strategy::Random,
        seed,
        entries: ids
            .into_iter()
            .map(|image_id| Candidate {
                image_id,
                weight: 1.0,
            })
            .collect(),
    }
}

/// Builds the candidate list for any strategy.
pub fn build_candidates(
    strategy: Strategy,
    scores: &[ImageScore],
    config: &SelectionConfig,
    seed: u64,
) -> Result<CandidateList> {
    match strategy {
        Strategy::Random => {
            let ids: Vec<ImageId> = scores.iter().map(|s| s.image_id.clone()).collect();
            Ok(random_baseline(&ids, seed))
        }
        Strategy::Uncertainty => {
            let bins = bin_by_confidence(
                scores,
                &config.edges,
                config.uncertainty_threshold,
                config.r_min,
            )?;
            Ok(sample_uncertainty(&bins, seed))
        }
        Strategy::Ma => {
            if scores.iter().any(|s| s.ma.is_none()) {
                return Err(Error::config(
                    "strategy `ma` requires segmentation masks on every prediction",
                ));
            }
            rank_by_score(scores, strategy, seed)
        }
        Strategy::Bba | Strategy::Entropy => rank_by_score(scores, strategy, seed),
        Strategy::Tc => Ok(weight_by_table_count(scores, seed)),
    }
}
