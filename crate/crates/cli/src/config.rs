//! Run configuration: built-in defaults, overridden by a TOML file,
//! overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use urm_core::gating::GatingConfig;
use urm_core::trainer::TrainConfig;
use urm_core::world::WorldConfig;
use urm_core::Schema;

use crate::error::{CliError, CliResult};
use crate::persist::read_text;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Total records sampled for the train/val/eval/ood splits.
    pub count: usize,
    pub ood_fraction: f64,
    /// Relative sizes of the train, val, and eval splits of the ID records.
    pub splits: [f64; 3],
    pub val_pairs: usize,
    pub eval_pairs: usize,
    pub flip_rate: f64,
    pub bon_prompts: usize,
    pub bon_candidates: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 30_000,
            ood_fraction: 0.2,
            splits: [0.8, 0.1, 0.1],
            val_pairs: 1000,
            eval_pairs: 2000,
            flip_rate: 0.3,
            bon_prompts: 500,
            bon_candidates: 32,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.count == 0 {
            return bad("data.count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ood_fraction) {
            return bad(format!("data.ood_fraction {} must lie in [0, 1)", self.ood_fraction));
        }
        if self.splits.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return bad("data.splits entries must be positive".into());
        }
        if !(0.0..0.5).contains(&self.flip_rate) {
            return bad(format!("data.flip_rate {} must lie in [0, 0.5)", self.flip_rate));
        }
        if self.bon_prompts == 0 || self.bon_candidates == 0 {
            return bad("data.bon_prompts and data.bon_candidates must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub gating: GatingConfig,
    /// Fixed combination weights keyed by attribute name.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<BTreeMap<String, f64>>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = read_text(path)?;
        toml::from_str(&text).map_err(|e| {
            CliError::Config(format!("{}: {}", path.display(), e.message()))
        })
    }

    /// Weight vector in schema order, from either `[weights]` or `train.weights`.
    pub fn weight_vector(&self, schema: &Schema) -> CliResult<Option<Vec<f64>>> {
        match (&self.weights, &self.train.weights) {
            (Some(_), Some(_)) => Err(CliError::Config(
                "set combination weights in [weights] or train.weights, not both".into(),
            )),
            (None, w) => Ok(w.clone()),
            (Some(map), None) => {
                if let Some(unknown) = map.keys().find(|k| !schema.attributes.contains(k)) {
                    return Err(CliError::Config(format!("weights.{unknown}: no such attribute")));
                }
                schema
                    .attributes
                    .iter()
                    .map(|a| {
                        map.get(a)
                            .copied()
                            .ok_or_else(|| CliError::Config(format!("weights.{a} is missing")))
                    })
                    .collect::<CliResult<Vec<_>>>()
                    .map(Some)
            }
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
