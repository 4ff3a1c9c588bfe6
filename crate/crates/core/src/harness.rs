//! Downstream reward consumption: best-of-n selection, uncertainty filtering,
//! threshold penalties, accuracy-vs-threshold curves, and OOD reports.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::model::{RewardScorer, Score, UncertaintyKind};
use crate::scalar::Scalar;
use crate::trainer::accuracy_from_rewards;
use crate::world::{PreferencePair, Record};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidate<T> {
    pub record: Record<T>,
    pub reward: T,
    pub uncertainty: T,
    pub kind: UncertaintyKind,
}

/// A preference pair with both sides scored. Pair uncertainty is the larger
/// of the two sides.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair<T> {
    pub pair: PreferencePair<T>,
    pub chosen: Score<T>,
    pub rejected: Score<T>,
    pub uncertainty: T,
    pub kind: UncertaintyKind,
}

/// Items that can be ranked by uncertainty with a deterministic tie-break.
pub trait Uncertain<T> {
    fn uncertainty(&self) -> T;
    fn tie_key(&self) -> u64;
}

impl<T: Scalar> Uncertain<T> for ScoredCandidate<T> {
    fn uncertainty(&self) -> T {
        self.uncertainty
    }

    fn tie_key(&self) -> u64 {
        self.record.id
    }
}

impl<T: Scalar> Uncertain<T> for ScoredPair<T> {
    fn uncertainty(&self) -> T {
        self.uncertainty
    }

    fn tie_key(&self) -> u64 {
        self.pair.chosen.id.min(self.pair.rejected.id)
    }
}

pub fn score_records<T: Scalar, S: RewardScorer<T> + ?Sized>(
    scorer: &S,
    records: &[Record<T>],
    kind: UncertaintyKind,
) -> Result<Vec<ScoredCandidate<T>>> {
    records
        .par_iter()
        .map(|r| {
            let s = scorer.score(&r.features)?;
            Ok(ScoredCandidate {
                record: r.clone(),
                reward: s.reward,
                uncertainty: s.uncertainty(kind)?,
                kind,
            })
        })
        .collect()
}

pub fn score_pairs<T: Scalar, S: RewardScorer<T> + ?Sized>(
    scorer: &S,
    pairs: &[PreferencePair<T>],
    kind: UncertaintyKind,
) -> Result<Vec<ScoredPair<T>>> {
    pairs
        .par_iter()
        .map(|p| {
            let chosen = scorer.score(&p.chosen.features)?;
            let rejected = scorer.score(&p.rejected.features)?;
            let uncertainty = chosen.uncertainty(kind)?.max(rejected.uncertainty(kind)?);
            Ok(ScoredPair {
                pair: p.clone(),
                chosen,
                rejected,
                uncertainty,
                kind,
            })
        })
        .collect()
}

/// Uniformly subsamples `min(n, len)` candidates and returns the highest
/// reward among them; ties go to the lower record id.
pub fn bon_select<T: Scalar>(
    candidates: &[ScoredCandidate<T>],
    n: usize,
    seed: u64,
) -> Result<&ScoredCandidate<T>> {
    if candidates.is_empty() {
        return input_err("best-of-n needs at least one candidate");
    }
    if n == 0 {
        return config_err("best-of-n needs n >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = n.min(candidates.len());
    let picked = sample(&mut rng, candidates.len(), take);
    let best = picked
        .iter()
        .map(|i| &candidates[i])
        .max_by(|a, b| {
            a.reward
                .partial_cmp(&b.reward)
                .unwrap_or(Ordering::Equal)
                .then_with(|| b.record.id.cmp(&a.record.id))
        })
        .expect("at least one candidate sampled");
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterMode {
    /// Keep the `ceil(f * N)` least uncertain items.
    KeepFraction(f64),
    /// Keep items with uncertainty at most `t`.
    Threshold(f64),
}

/// Drops uncertain items. Keep-fraction output is ordered by ascending
/// uncertainty; threshold output preserves input order.
pub fn filter_by_uncertainty<T: Scalar, I: Uncertain<T> + Clone>(
    items: &[I],
    mode: FilterMode,
) -> Result<Vec<I>> {
    match mode {
        FilterMode::KeepFraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return config_err(format!("keep fraction {f} must lie in (0, 1]"));
            }
            let keep = (f * items.len() as f64).ceil() as usize;
            let mut order: Vec<&I> = items.iter().collect();
            order.sort_by(|a, b| {
                a.uncertainty()
                    .partial_cmp(&b.uncertainty())
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| a.tie_key().cmp(&b.tie_key()))
            });
            Ok(order.into_iter().take(keep).cloned().collect())
        }
        FilterMode::Threshold(t) => {
            if !(t >= 0.0) {
                return config_err(format!("uncertainty threshold {t} must be nonnegative"));
            }
            let t = T::lit(t);
            Ok(items.iter().filter(|i| i.uncertainty() <= t).cloned().collect())
        }
    }
}

/// Hard step penalty: subtract `penalty` when `uncertainty > threshold`.
pub fn penalized_reward<T: Scalar>(reward: T, uncertainty: T, threshold: T, penalty: T) -> T {
    if uncertainty <= threshold {
        reward
    } else {
        reward - penalty
    }
}

/// Default penalty magnitude: twice the interquartile range of `rewards`.
pub fn default_penalty<T: Scalar>(rewards: &[T]) -> Option<T> {
    if rewards.is_empty() {
        return None;
    }
    let mut sorted: Vec<f64> = rewards.iter().map(|r| r.as_f64()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    Some(T::lit(2.0 * (quantile(&sorted, 0.75) - quantile(&sorted, 0.25))))
}

/// Linear-interpolated quantile of ascending data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub thresholds: Vec<f64>,
    /// `None` where every pair was filtered out.
    pub accuracy: Vec<Option<f64>>,
    pub retained_fraction: Vec<f64>,
    pub kind: UncertaintyKind,
}

/// Pairwise accuracy after dropping pairs whose chosen or rejected side is
/// more uncertain than each threshold.
pub fn accuracy_vs_threshold<T: Scalar, S: RewardScorer<T> + ?Sized>(
    scorer: &S,
    pairs: &[PreferencePair<T>],
    thresholds: &[f64],
    kind: Option<UncertaintyKind>,
) -> Result<ThresholdCurve> {
    if pairs.is_empty() {
        return input_err("threshold curve needs at least one pair");
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) || thresholds.iter().any(|t| t.is_nan()) {
        return config_err("thresholds must be sorted ascending");
    }
    let kind = kind.unwrap_or_else(|| scorer.default_uncertainty());
    let scored = score_pairs(scorer, pairs, kind)?;
    Ok(curve_from_scored(&scored, thresholds, kind))
}

pub fn curve_from_scored<T: Scalar>(
    scored: &[ScoredPair<T>],
    thresholds: &[f64],
    kind: UncertaintyKind,
) -> ThresholdCurve {
    let mut accuracy = Vec::with_capacity(thresholds.len());
    let mut retained = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let kept: Vec<(T, T)> = scored
            .iter()
            .filter(|p| p.uncertainty.as_f64() <= t)
            .map(|p| (p.chosen.reward, p.rejected.reward))
            .collect();
        retained.push(kept.len() as f64 / scored.len() as f64);
        accuracy.push(accuracy_from_rewards(&kept));
    }
    ThresholdCurve {
        thresholds: thresholds.to_vec(),
        accuracy,
        retained_fraction: retained,
        kind,
    }
}

/// Area under the ROC curve with `positives` as the positive class.
/// Tied scores contribute one half (Mann-Whitney statistic).
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let np = positives.len() as f64;
    let nn = negatives.len() as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; the last bin is closed.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let idx = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub mean: f64,
    pub median: f64,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub kind: UncertaintyKind,
    pub id: SetSummary,
    pub ood: SetSummary,
    /// OOD is the positive class.
    pub auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub id_count: usize,
    pub ood_count: usize,
    pub kinds: Vec<KindReport>,
}

impl OodReport {
    pub fn get(&self, kind: UncertaintyKind) -> Option<&KindReport> {
        self.kinds.iter().find(|k| k.kind == kind)
    }
}

const HISTOGRAM_BINS: usize = 20;

fn summarize(values: &[f64], lo: f64, hi: f64) -> SetSummary {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    SetSummary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: quantile(&sorted, 0.5),
        histogram: Histogram::new(values, lo, hi, HISTOGRAM_BINS),
    }
}

/// Compares uncertainty on in-distribution and OOD records for every
/// uncertainty kind the scorer provides.
pub fn ood_report<T: Scalar, S: RewardScorer<T> + ?Sized>(
    scorer: &S,
    id_set: &[Record<T>],
    ood_set: &[Record<T>],
) -> Result<OodReport> {
    if id_set.is_empty() || ood_set.is_empty() {
        return input_err("OOD report needs nonempty ID and OOD sets");
    }
    let score_all = |set: &[Record<T>]| -> Result<Vec<Score<T>>> {
        set.par_iter().map(|r| scorer.score(&r.features)).collect()
    };
    let id_scores = score_all(id_set)?;
    let ood_scores = score_all(ood_set)?;
    let mut kinds = Vec::new();
    for kind in UncertaintyKind::ALL {
        let pick = |scores: &[Score<T>]| -> Option<Vec<f64>> {
            scores
                .iter()
                .map(|s| s.uncertainty(kind).ok().map(Scalar::as_f64))
                .collect()
        };
        let (Some(id_vals), Some(ood_vals)) = (pick(&id_scores), pick(&ood_scores)) else {
            continue;
        };
        let (lo, hi) = id_vals
            .iter()
            .chain(&ood_vals)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        kinds.push(KindReport {
            kind,
            id: summarize(&id_vals, lo, hi),
            ood: summarize(&ood_vals, lo, hi),
            auroc: auroc(&ood_vals, &id_vals).expect("both sets nonempty"),
        });
    }
    Ok(OodReport {
        id_count: id_set.len(),
        ood_count: ood_set.len(),
        kinds,
    })
}
