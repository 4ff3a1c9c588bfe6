//! Synthetic ground-truth world with known attribute distributions.
//!
//! Each attribute `i` has a mean `f_i(x)` and a standard deviation `g_i(x)`,
//! both given by frozen one-hidden-layer tanh nets over the feature vector.
//! In-distribution inputs come from a Gaussian mixture; out-of-distribution
//! inputs come from the same mixture shifted by `delta` along one direction.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::head::{HeadKind, LogStdClamp};
use crate::model::{Combination, Schema, UrmModel};
use crate::numeric::{Activation, DenseNet, LayerShape};
use crate::scalar::{dot, Scalar};

/// Attribute names used when a world has five attributes.
pub const DEFAULT_ATTRIBUTES: [&str; 5] =
    ["helpfulness", "correctness", "coherence", "complexity", "verbosity"];

pub const STD_MIN: f64 = 0.05;
pub const STD_MAX: f64 = 2.0;
const SHIFT_CANDIDATES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub input_dim: usize,
    pub num_attributes: usize,
    /// Distance between each in-distribution component mean and its shifted copy.
    pub delta: f64,
    /// Temperature of margin-dependent label flips.
    pub tau: f64,
    pub mixture_components: usize,
    /// Standard deviation of the mixture component centers.
    pub center_scale: f64,
    /// Per-coordinate spread of prompts around their component center.
    pub component_std: f64,
    /// Per-coordinate spread of responses around their prompt.
    pub response_std: f64,
    pub group_size: usize,
    pub mean_hidden: usize,
    /// Typical magnitude of each attribute mean.
    pub mean_scale: f64,
    pub std_hidden: usize,
    /// Draw labels from the attribute Gaussians; otherwise labels equal the means.
    pub label_noise: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            num_attributes: 5,
            delta: 6.0,
            tau: 1.0,
            mixture_components: 4,
            center_scale: 2.0,
            component_std: 0.3,
            response_std: 0.5,
            group_size: 8,
            mean_hidden: 8,
            mean_scale: 3.0,
            std_hidden: 2,
            label_noise: true,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return config_err("world input dimension must be at least 2");
        }
        if self.num_attributes < 1 {
            return config_err("world needs at least one attribute");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return config_err("OOD separation delta must be positive");
        }
        if !(self.tau > 0.0) {
            return config_err("flip temperature tau must be positive");
        }
        if self.mixture_components == 0 || self.mean_hidden == 0 || self.std_hidden == 0 {
            return config_err("mixture components and hidden widths must be positive");
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return config_err("mean scale must be positive");
        }
        if self.group_size < 2 {
            return config_err("prompt groups need at least two responses");
        }
        if !(self.center_scale >= 0.0 && self.component_std > 0.0 && self.response_std >= 0.0) {
            return config_err("mixture scales must be nonnegative (component_std positive)");
        }
        Ok(())
    }

    pub fn attribute_names(&self) -> Vec<String> {
        if self.num_attributes == DEFAULT_ATTRIBUTES.len() {
            DEFAULT_ATTRIBUTES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.num_attributes).map(|i| format!("attr{i}")).collect()
        }
    }
}

/// One prompt-response instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record<T> {
    pub id: u64,
    pub features: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_mean: Option<Vec<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_std: Option<Vec<T>>,
    pub is_ood: bool,
    pub prompt_group: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair<T> {
    pub chosen: Record<T>,
    pub rejected: Record<T>,
    /// `w* . mean(preferred) - w* . mean(other)` before any label noise; never negative.
    pub true_margin: T,
    /// Set when label noise swapped chosen and rejected.
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GroundTruthWorld<T> {
    pub config: WorldConfig,
    pub seed: u64,
    pub attribute_names: Vec<String>,
    mean_net: DenseNet<T>,
    log_std_net: DenseNet<T>,
    true_weights: Vec<T>,
    id_centers: Vec<Vec<T>>,
    ood_shift: Vec<T>,
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * std_normal(rng)).collect()
}

fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

/// Default-config world with the given dimensions.
pub fn gen_world<T: Scalar>(input_dim: usize, num_attributes: usize, seed: u64) -> Result<GroundTruthWorld<T>> {
    GroundTruthWorld::generate(
        WorldConfig {
            input_dim,
            num_attributes,
            ..WorldConfig::default()
        },
        seed,
    )
}

impl<T: Scalar> GroundTruthWorld<T> {
    pub fn generate(config: WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.input_dim;
        let n = config.num_attributes;

        let id_centers: Vec<Vec<f64>> = (0..config.mixture_components)
            .map(|_| normal_vec(&mut rng, d, config.center_scale))
            .collect();
        // Norm of the spread within one mixture component; hidden
        // pre-activations vary on unit scale inside a component.
        let input_scale = (config.component_std.powi(2) + config.response_std.powi(2)).sqrt()
            * (d as f64).sqrt();

        let mean_net = {
            let shapes = vec![
                LayerShape::new(d, config.mean_hidden, Activation::Tanh),
                LayerShape::new(config.mean_hidden, n, Activation::Identity),
            ];
            let mut net = DenseNet::<T>::zeros(shapes)?;
            for w in net.weights_mut(0) {
                *w = T::lit(1.5 * std_normal(&mut rng) / input_scale);
            }
            for b in net.bias_mut(0) {
                *b = T::lit(0.3 * std_normal(&mut rng));
            }
            let out_scale = config.mean_scale / (config.mean_hidden as f64).sqrt();
            for w in net.weights_mut(1) {
                *w = T::lit(out_scale * std_normal(&mut rng));
            }
            for b in net.bias_mut(1) {
                *b = T::lit(rng.random_range(-0.5..0.5));
            }
            net
        };

        // log g_i = c_i + sum_j v_ij tanh(u_j . x + b_j), with sum_j |v_ij| <= s_i
        // chosen so that g stays inside [STD_MIN, STD_MAX].
        let log_std_net = {
            let shapes = vec![
                LayerShape::new(d, config.std_hidden, Activation::Tanh),
                LayerShape::new(config.std_hidden, n, Activation::Identity),
            ];
            let mut net = DenseNet::<T>::zeros(shapes)?;
            for w in net.weights_mut(0) {
                *w = T::lit(1.5 * std_normal(&mut rng) / input_scale);
            }
            for b in net.bias_mut(0) {
                *b = T::lit(0.2 * std_normal(&mut rng));
            }
            let (lo, hi) = (STD_MIN.ln(), STD_MAX.ln());
            for i in 0..n {
                let center = rng.random_range(-1.0..-0.3);
                let reach = (center - lo).min(hi - center) * 0.95;
                let raw: Vec<f64> = normal_vec(&mut rng, config.std_hidden, 1.0);
                let l1: f64 = raw.iter().map(|v| v.abs()).sum::<f64>().max(1e-12);
                let row = &mut net.weights_mut(1)[i * config.std_hidden..(i + 1) * config.std_hidden];
                for (w, v) in row.iter_mut().zip(&raw) {
                    *w = T::lit(v / l1 * reach);
                }
                net.bias_mut(1)[i] = T::lit(center);
            }
            net
        };

        let true_weights = {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|w| T::lit(w / total)).collect()
        };

        // Shift direction: among random directions that keep every shifted
        // center at distance >= delta from every in-distribution center, take
        // the one whose shifted centers carry the most label noise.
        let noise_at = |x: &[f64]| -> f64 {
            let x: Vec<T> = x.iter().map(|&v| T::lit(v)).collect();
            log_std_net
                .forward(&x)
                .map(|o| o.iter().map(|s| (s.as_f64() * 2.0).exp()).sum())
                .unwrap_or(f64::NEG_INFINITY)
        };
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut feasible = 0;
        for _ in 0..10_000 {
            if feasible == SHIFT_CANDIDATES {
                break;
            }
            let dir = normal_vec(&mut rng, d, 1.0);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let shift: Vec<f64> = dir.iter().map(|v| v / norm * config.delta).collect();
            let shifted: Vec<Vec<f64>> = id_centers
                .iter()
                .map(|c| c.iter().zip(&shift).map(|(a, b)| a + b).collect())
                .collect();
            let separated = shifted.iter().all(|s| {
                id_centers
                    .iter()
                    .all(|other| euclidean(s, other) >= config.delta - 1e-12)
            });
            if !separated {
                continue;
            }
            feasible += 1;
            let noise: f64 = shifted.iter().map(|c| noise_at(c)).sum();
            if best.as_ref().is_none_or(|(b, _)| noise > *b) {
                best = Some((noise, shift));
            }
        }
        let Some((_, ood_shift)) = best else {
            return config_err("could not place OOD components at the requested separation");
        };

        Ok(Self {
            attribute_names: config.attribute_names(),
            config,
            seed,
            mean_net,
            log_std_net,
            true_weights,
            id_centers: id_centers
                .into_iter()
                .map(|c| c.into_iter().map(T::lit).collect())
                .collect(),
            ood_shift: ood_shift.into_iter().map(T::lit).collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn num_attributes(&self) -> usize {
        self.config.num_attributes
    }

    pub fn true_weights(&self) -> &[T] {
        &self.true_weights
    }

    pub fn mean_net(&self) -> &DenseNet<T> {
        &self.mean_net
    }

    pub fn log_std_net(&self) -> &DenseNet<T> {
        &self.log_std_net
    }

    pub fn id_centers(&self) -> &[Vec<T>] {
        &self.id_centers
    }

    pub fn ood_centers(&self) -> Vec<Vec<T>> {
        self.id_centers
            .iter()
            .map(|c| c.iter().zip(&self.ood_shift).map(|(&a, &b)| a + b).collect())
            .collect()
    }

    /// Replaces the true combination weights (e.g. a one-hot preference).
    pub fn with_true_weights(mut self, weights: Vec<T>) -> Result<Self> {
        if weights.len() != self.num_attributes() {
            return config_err("true weight vector length differs from attribute count");
        }
        self.true_weights = weights;
        Ok(self)
    }

    pub fn true_mean(&self, x: &[T]) -> Result<Vec<T>> {
        self.mean_net.forward(x)
    }

    pub fn true_std(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self
            .log_std_net
            .forward(x)?
            .into_iter()
            .map(|s| s.exp())
            .collect())
    }

    /// A reward model that reproduces the world exactly: its head computes
    /// `f` and `log g`, and it combines attributes with `w*`.
    pub fn oracle_model(&self) -> Result<UrmModel<T>> {
        let d = self.input_dim();
        let n = self.num_attributes();
        let (mh, sh) = (self.mean_net.layers()[0].outputs, self.log_std_net.layers()[0].outputs);
        let hidden = mh + sh;
        let mut head = DenseNet::<T>::zeros(vec![
            LayerShape::new(d, hidden, Activation::Tanh),
            LayerShape::new(hidden, 2 * n, Activation::Identity),
        ])?;
        let w0 = head.weights_mut(0);
        w0[..mh * d].copy_from_slice(self.mean_net.weights(0));
        w0[mh * d..].copy_from_slice(self.log_std_net.weights(0));
        let b0 = head.bias_mut(0);
        b0[..mh].copy_from_slice(self.mean_net.bias(0));
        b0[mh..].copy_from_slice(self.log_std_net.bias(0));
        let w1 = head.weights_mut(1);
        for i in 0..n {
            w1[i * hidden..i * hidden + mh].copy_from_slice(&self.mean_net.weights(1)[i * mh..(i + 1) * mh]);
            let row = (n + i) * hidden + mh;
            w1[row..row + sh].copy_from_slice(&self.log_std_net.weights(1)[i * sh..(i + 1) * sh]);
        }
        let b1 = head.bias_mut(1);
        b1[..n].copy_from_slice(self.mean_net.bias(1));
        b1[n..].copy_from_slice(self.log_std_net.bias(1));
        let mut model = UrmModel::new(
            Schema::new(d, self.attribute_names.clone())?,
            None,
            head,
            HeadKind::Probabilistic,
            LogStdClamp::default(),
            Combination::Fixed(self.true_weights.clone()),
        )?;
        model.metadata.provenance = Some(format!("oracle of world seed {}", self.seed));
        Ok(model)
    }

    /// Ground-truth scalar utility `w* . f(x)`.
    pub fn true_utility(&self, x: &[T]) -> Result<T> {
        Ok(dot(&self.true_weights, &self.true_mean(x)?))
    }

    /// Draws one label vector `R_i ~ N(f_i(x), g_i(x)^2)`.
    pub fn draw_labels<R: Rng + ?Sized>(&self, x: &[T], rng: &mut R) -> Result<Vec<T>> {
        let mean = self.true_mean(x)?;
        if !self.config.label_noise {
            return Ok(mean);
        }
        let std = self.true_std(x)?;
        Ok(mean
            .iter()
            .zip(&std)
            .map(|(&m, &s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * T::lit(z)
            })
            .collect())
    }

    /// Samples one prompt location from the (possibly shifted) mixture.
    fn sample_prompt<R: Rng + ?Sized>(&self, ood: bool, rng: &mut R) -> Vec<T> {
        let k = rng.random_range(0..self.id_centers.len());
        let std = self.config.component_std;
        self.id_centers[k]
            .iter()
            .zip(&self.ood_shift)
            .map(|(&c, &s)| {
                let z: f64 = StandardNormal.sample(rng);
                c + if ood { s } else { T::zero() } + T::lit(std * z)
            })
            .collect()
    }

    /// Samples one input point (prompt plus response jitter).
    pub fn sample_input<R: Rng + ?Sized>(&self, ood: bool, rng: &mut R) -> Vec<T> {
        let prompt = self.sample_prompt(ood, rng);
        self.jitter(&prompt, rng)
    }

    fn jitter<R: Rng + ?Sized>(&self, prompt: &[T], rng: &mut R) -> Vec<T> {
        let s = self.config.response_std;
        prompt
            .iter()
            .map(|&p| {
                let z: f64 = StandardNormal.sample(rng);
                p + T::lit(s * z)
            })
            .collect()
    }

    fn make_record<R: Rng + ?Sized>(
        &self,
        id: u64,
        features: Vec<T>,
        is_ood: bool,
        prompt_group: u64,
        rng: &mut R,
    ) -> Result<Record<T>> {
        let labels = self.draw_labels(&features, rng)?;
        Ok(Record {
            id,
            true_mean: Some(self.true_mean(&features)?),
            true_std: Some(self.true_std(&features)?),
            labels: Some(labels),
            features,
            is_ood,
            prompt_group,
        })
    }
}

/// Samples `count` records; the last `floor(count * ood_fraction)` are OOD.
///
/// Records are emitted in prompt groups of `config.group_size` responses that
/// share a prompt; a group never mixes ID and OOD records.
pub fn sample_records<T: Scalar>(
    world: &GroundTruthWorld<T>,
    count: usize,
    ood_fraction: f64,
    seed: u64,
) -> Result<Vec<Record<T>>> {
    if count == 0 {
        return input_err("record count must be positive");
    }
    if !(0.0..=1.0).contains(&ood_fraction) {
        return config_err(format!("ood fraction {ood_fraction} outside [0, 1]"));
    }
    let n_ood = (count as f64 * ood_fraction).floor() as usize;
    let n_id = count - n_ood;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let group_size = world.config.group_size;
    let mut records = Vec::with_capacity(count);
    let mut group = 0u64;
    for (is_ood, total) in [(false, n_id), (true, n_ood)] {
        let mut made = 0;
        while made < total {
            let prompt = world.sample_prompt(is_ood, &mut rng);
            for _ in 0..group_size.min(total - made) {
                let x = world.jitter(&prompt, &mut rng);
                let id = records.len() as u64;
                records.push(world.make_record(id, x, is_ood, group, &mut rng)?);
                made += 1;
            }
            group += 1;
        }
    }
    Ok(records)
}

/// Labels drawn at one fixed input, for checking the label distribution.
pub fn redraw_labels<T: Scalar>(
    world: &GroundTruthWorld<T>,
    x: &[T],
    draws: usize,
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws).map(|_| world.draw_labels(x, &mut rng)).collect()
}

fn order_pair<T: Scalar>(a: Record<T>, ua: T, b: Record<T>, ub: T) -> PreferencePair<T> {
    let a_first = ua > ub || (ua == ub && a.id < b.id);
    if a_first {
        PreferencePair {
            chosen: a,
            rejected: b,
            true_margin: ua - ub,
            flipped: false,
        }
    } else {
        PreferencePair {
            chosen: b,
            rejected: a,
            true_margin: ub - ua,
            flipped: false,
        }
    }
}

/// Builds a pair from two records; the higher true utility is chosen and
/// ties go to the lower id.
pub fn pair_records<T: Scalar>(
    world: &GroundTruthWorld<T>,
    a: Record<T>,
    b: Record<T>,
) -> Result<PreferencePair<T>> {
    let ua = world.true_utility(&a.features)?;
    let ub = world.true_utility(&b.features)?;
    Ok(order_pair(a, ua, b, ub))
}

/// Samples `pairs` preference pairs, each from two distinct members of one
/// prompt group. Groups with fewer than two records are skipped.
pub fn make_pairs<T: Scalar>(
    records: &[Record<T>],
    world: &GroundTruthWorld<T>,
    pairs: usize,
    seed: u64,
) -> Result<Vec<PreferencePair<T>>> {
    let mut groups: std::collections::BTreeMap<u64, Vec<usize>> = Default::default();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.prompt_group).or_default().push(i);
    }
    let eligible: Vec<&Vec<usize>> = groups.values().filter(|g| g.len() >= 2).collect();
    if eligible.is_empty() {
        return input_err("no prompt group has at least two records");
    }
    let utilities: Vec<T> = records
        .iter()
        .map(|r| world.true_utility(&r.features))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let group = eligible[rng.random_range(0..eligible.len())];
        let picked: Vec<usize> = group.choose_multiple(&mut rng, 2).copied().collect();
        let (i, j) = (picked[0], picked[1]);
        out.push(order_pair(
            records[i].clone(),
            utilities[i],
            records[j].clone(),
            utilities[j],
        ));
    }
    Ok(out)
}

/// Swaps chosen and rejected with probability `flip_rate * exp(-margin / tau)`.
pub fn label_noise<T: Scalar>(
    pairs: &[PreferencePair<T>],
    flip_rate: f64,
    tau: f64,
    seed: u64,
) -> Result<Vec<PreferencePair<T>>> {
    if !(0.0..0.5).contains(&flip_rate) {
        return config_err(format!("flip rate {flip_rate} must lie in [0, 0.5)"));
    }
    if !(tau > 0.0) {
        return config_err("flip temperature must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pairs
        .iter()
        .map(|p| {
            let prob = flip_probability(p.true_margin.as_f64(), flip_rate, tau);
            let u: f64 = rng.random();
            if u < prob {
                PreferencePair {
                    chosen: p.rejected.clone(),
                    rejected: p.chosen.clone(),
                    true_margin: p.true_margin,
                    flipped: !p.flipped,
                }
            } else {
                p.clone()
            }
        })
        .collect())
}

pub fn flip_probability(margin: f64, flip_rate: f64, tau: f64) -> f64 {
    flip_rate * (-margin / tau).exp()
}

/// Shuffles records deterministically, keeping whole prompt groups together.
pub fn split_by_group<T: Clone>(
    records: &[Record<T>],
    fractions: &[f64],
    seed: u64,
) -> Vec<Vec<Record<T>>> {
    let mut groups: Vec<u64> = records.iter().map(|r| r.prompt_group).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let total: f64 = fractions.iter().sum();
    let mut bounds = Vec::with_capacity(fractions.len());
    let mut acc = 0.0;
    for f in fractions {
        acc += f / total;
        bounds.push((acc * groups.len() as f64).round() as usize);
    }
    let mut assignment = std::collections::HashMap::new();
    let mut start = 0;
    for (split, &end) in bounds.iter().enumerate() {
        for g in &groups[start..end.max(start)] {
            assignment.insert(*g, split);
        }
        start = end.max(start);
    }
    let mut out = vec![Vec::new(); fractions.len()];
    for r in records {
        if let Some(&s) = assignment.get(&r.prompt_group) {
            out[s].push(r.clone());
        }
    }
    out
}
