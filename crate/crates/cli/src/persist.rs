//! On-disk formats: line-delimited datasets, JSON checkpoints, ensemble
//! manifests, and world files. Every write goes through a temporary file in
//! the destination directory and is renamed into place on success.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use urm_core::ensemble::{schema_hash, Urme};
use urm_core::gating::GatingNet;
use urm_core::head::{HeadKind, LogStdClamp};
use urm_core::model::{Combination, LossKind, ModelMetadata, Schema, UrmModel};
use urm_core::numeric::{Activation, DenseNet, LayerShape};
use urm_core::world::{GroundTruthWorld, PreferencePair, Record};

use crate::error::{CliError, CliResult};

pub const DATASET_FORMAT: &str = "urm-dataset";
pub const CHECKPOINT_FORMAT: &str = "urm-checkpoint";
pub const MANIFEST_FORMAT: &str = "urm-ensemble";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let io = |source| CliError::io(path, source);
    let mut builder = tempfile::Builder::new();
    builder.prefix(".urm-tmp");
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(&dir).map_err(io)?;
    tmp.write_all(contents).map_err(io)?;
    tmp.flush().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> CliResult<T> {
    serde_json::from_str(text).map_err(|e| CliError::format(path, e.to_string()))
}

fn to_json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("in-memory values serialize")
}

fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("in-memory values serialize");
    s.push('\n');
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairRole {
    Chosen,
    Rejected,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub d: usize,
    pub n: usize,
    pub attributes: Vec<String>,
    /// True combination weights of the generating world, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combination_weights: Option<Vec<f64>>,
}

impl DatasetHeader {
    pub fn new(schema: &Schema, combination_weights: Option<Vec<f64>>) -> Self {
        Self {
            format: DATASET_FORMAT.to_string(),
            version: FORMAT_VERSION,
            d: schema.input_dim,
            n: schema.num_attributes(),
            attributes: schema.attributes.clone(),
            combination_weights,
        }
    }

    pub fn schema(&self) -> CliResult<Schema> {
        Ok(Schema::new(self.d, self.attributes.clone())?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: u64,
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_std: Option<Vec<f64>>,
    is_ood: bool,
    prompt_group: u64,
    role: PairRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pair_id: Option<u64>,
}

impl RecordLine {
    fn new(r: &Record<f64>, role: PairRole, pair_id: Option<u64>) -> Self {
        Self {
            id: r.id,
            features: r.features.clone(),
            labels: r.labels.clone(),
            true_mean: r.true_mean.clone(),
            true_std: r.true_std.clone(),
            is_ood: r.is_ood,
            prompt_group: r.prompt_group,
            role,
            pair_id,
        }
    }

    fn into_record(self) -> Record<f64> {
        Record {
            id: self.id,
            features: self.features,
            labels: self.labels,
            true_mean: self.true_mean,
            true_std: self.true_std,
            is_ood: self.is_ood,
            prompt_group: self.prompt_group,
        }
    }
}

/// Contents of a dataset file: plain records plus any pairs.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub records: Vec<Record<f64>>,
    pub pairs: Vec<PreferencePair<f64>>,
}

pub fn dataset_text(header: &DatasetHeader, data: &Dataset) -> String {
    let mut out = to_json_line(header);
    out.push('\n');
    for r in &data.records {
        out.push_str(&to_json_line(&RecordLine::new(r, PairRole::None, None)));
        out.push('\n');
    }
    for (i, p) in data.pairs.iter().enumerate() {
        let pid = Some(i as u64);
        out.push_str(&to_json_line(&RecordLine::new(&p.chosen, PairRole::Chosen, pid)));
        out.push('\n');
        out.push_str(&to_json_line(&RecordLine::new(&p.rejected, PairRole::Rejected, pid)));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, data: &Dataset) -> CliResult<()> {
    write_atomic(path, dataset_text(header, data).as_bytes())
}

pub fn read_dataset(path: &Path) -> CliResult<(DatasetHeader, Dataset)> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| CliError::format(path, "empty dataset file"))?;
    let header: DatasetHeader = parse_json(path, first)?;
    if header.format != DATASET_FORMAT || header.version != FORMAT_VERSION {
        return Err(CliError::format(
            path,
            format!("unsupported dataset format {} v{}", header.format, header.version),
        ));
    }
    if header.attributes.len() != header.n {
        return Err(CliError::format(path, "header attribute list does not match n"));
    }
    let mut data = Dataset::default();
    let mut open: BTreeMap<u64, (Option<Record<f64>>, Option<Record<f64>>)> = BTreeMap::new();
    for (lineno, line) in lines {
        let rec: RecordLine = serde_json::from_str(line)
            .map_err(|e| CliError::format(path, format!("line {}: {e}", lineno + 1)))?;
        if rec.features.len() != header.d {
            return Err(CliError::format(
                path,
                format!("line {}: {} features, header says {}", lineno + 1, rec.features.len(), header.d),
            ));
        }
        for (name, v) in [("labels", &rec.labels), ("true_mean", &rec.true_mean), ("true_std", &rec.true_std)] {
            if v.as_ref().is_some_and(|v| v.len() != header.n) {
                return Err(CliError::format(path, format!("line {}: {name} length differs from n", lineno + 1)));
            }
        }
        match (rec.role, rec.pair_id) {
            (PairRole::None, _) => data.records.push(rec.into_record()),
            (_, None) => {
                return Err(CliError::format(path, format!("line {}: paired record without pair_id", lineno + 1)))
            }
            (role, Some(pid)) => {
                let slot = open.entry(pid).or_default();
                let target = if role == PairRole::Chosen { &mut slot.0 } else { &mut slot.1 };
                if target.replace(rec.into_record()).is_some() {
                    return Err(CliError::format(path, format!("pair {pid} has a duplicate {role:?} record")));
                }
            }
        }
    }
    let weights = header.combination_weights.clone();
    for (pid, slot) in open {
        let (Some(chosen), Some(rejected)) = slot else {
            return Err(CliError::format(path, format!("pair {pid} is incomplete")));
        };
        let true_margin = match (&weights, &chosen.true_mean, &rejected.true_mean) {
            (Some(w), Some(a), Some(b)) => w.iter().zip(a.iter().zip(b)).map(|(w, (a, b))| w * (a - b)).sum(),
            _ => 0.0,
        };
        data.pairs.push(PreferencePair {
            chosen,
            rejected,
            true_margin,
            flipped: false,
        });
    }
    Ok((header, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFile {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetFile {
    pub layers: Vec<LayerFile>,
}

impl NetFile {
    pub fn of(net: &DenseNet<f64>) -> Self {
        Self {
            layers: (0..net.layers().len())
                .map(|k| {
                    let s = net.layers()[k];
                    LayerFile {
                        inputs: s.inputs,
                        outputs: s.outputs,
                        activation: s.activation,
                        weights: net.weights(k).to_vec(),
                        bias: net.bias(k).to_vec(),
                    }
                })
                .collect(),
        }
    }

    pub fn to_net(&self) -> CliResult<DenseNet<f64>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut params = Vec::new();
        for l in &self.layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(CliError::Config(format!(
                    "layer {}x{} stores {} weights and {} biases",
                    l.outputs,
                    l.inputs,
                    l.weights.len(),
                    l.bias.len()
                )));
            }
            shapes.push(LayerShape::new(l.inputs, l.outputs, l.activation));
            params.extend_from_slice(&l.weights);
            params.extend_from_slice(&l.bias);
        }
        Ok(DenseNet::new(shapes, params)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum CombinationFile {
    Fixed(Vec<f64>),
    Gated(NetFile),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub format: String,
    pub version: u32,
    pub schema: Schema,
    pub head_kind: HeadKind,
    pub loss: Option<LossKind>,
    pub clamp: LogStdClamp,
    pub trunk: Option<NetFile>,
    pub head: NetFile,
    pub combination: CombinationFile,
    pub metadata: ModelMetadata,
    /// Effective configuration of the run that produced the model.
    pub config: Value,
}

pub fn checkpoint_of(model: &UrmModel<f64>, config: Value) -> CheckpointFile {
    CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: FORMAT_VERSION,
        schema: model.schema().clone(),
        head_kind: model.head_kind(),
        loss: model.metadata.loss,
        clamp: *model.clamp(),
        trunk: model.trunk().map(NetFile::of),
        head: NetFile::of(model.head()),
        combination: match model.combination() {
            Combination::Fixed(w) => CombinationFile::Fixed(w.clone()),
            Combination::Gated(g) => CombinationFile::Gated(NetFile::of(g.net())),
        },
        metadata: model.metadata.clone(),
        config,
    }
}

pub fn model_of(file: &CheckpointFile) -> CliResult<UrmModel<f64>> {
    if file.format != CHECKPOINT_FORMAT || file.version != FORMAT_VERSION {
        return Err(CliError::Config(format!(
            "unsupported checkpoint format {} v{}",
            file.format, file.version
        )));
    }
    let combination = match &file.combination {
        CombinationFile::Fixed(w) => Combination::Fixed(w.clone()),
        CombinationFile::Gated(net) => Combination::Gated(GatingNet::from_net(net.to_net()?)?),
    };
    let trunk = file.trunk.as_ref().map(NetFile::to_net).transpose()?;
    let mut model = UrmModel::new(
        file.schema.clone(),
        trunk,
        file.head.to_net()?,
        file.head_kind,
        file.clamp,
        combination,
    )?;
    model.metadata = file.metadata.clone();
    Ok(model)
}

pub fn checkpoint_text(model: &UrmModel<f64>, config: Value) -> String {
    to_json_pretty(&checkpoint_of(model, config))
}

pub fn save_checkpoint(path: &Path, model: &UrmModel<f64>, config: Value) -> CliResult<()> {
    write_atomic(path, checkpoint_text(model, config).as_bytes())
}

pub fn load_checkpoint(path: &Path) -> CliResult<(UrmModel<f64>, Value)> {
    let file: CheckpointFile = parse_json(path, &read_text(path)?)?;
    let model = model_of(&file).map_err(|e| CliError::format(path, e.to_string()))?;
    Ok((model, file.config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub schema_hash: String,
    /// Member checkpoint paths, relative to the manifest's directory.
    pub members: Vec<String>,
}

/// Writes each member checkpoint next to the manifest, then the manifest.
pub fn save_ensemble(path: &Path, ensemble: &Urme<f64>, config: &Value) -> CliResult<Manifest> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let stem = path
        .file_name()
        .and_then(|s| s.to_str())
        .map(|s| s.strip_suffix(".manifest.json").unwrap_or(s).to_string())
        .unwrap_or_else(|| "ensemble".to_string());
    let mut members = Vec::with_capacity(ensemble.len());
    for (m, seed) in ensemble.members().iter().zip(ensemble.seeds()) {
        let name = format!("{stem}.seed{seed}.json");
        save_checkpoint(&dir.join(&name), m, config.clone())?;
        members.push(name);
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: FORMAT_VERSION,
        k: ensemble.len(),
        seeds: ensemble.seeds().to_vec(),
        schema_hash: schema_hash(ensemble.schema()),
        members,
    };
    write_atomic(path, to_json_pretty(&manifest).as_bytes())?;
    Ok(manifest)
}

pub fn load_ensemble(path: &Path) -> CliResult<Urme<f64>> {
    let manifest: Manifest = parse_json(path, &read_text(path)?)?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != FORMAT_VERSION {
        return Err(CliError::format(path, "not an ensemble manifest"));
    }
    if manifest.k != manifest.members.len() || manifest.k != manifest.seeds.len() {
        return Err(CliError::format(path, "manifest k disagrees with its member list"));
    }
    let dir = path.parent().unwrap_or(Path::new(""));
    let members = manifest
        .members
        .iter()
        .map(|m| load_checkpoint(&dir.join(m)).map(|(model, _)| model))
        .collect::<CliResult<Vec<_>>>()?;
    let ensemble = Urme::new(members, manifest.seeds.clone())?;
    if schema_hash(ensemble.schema()) != manifest.schema_hash {
        return Err(CliError::format(path, "schema hash does not match the members"));
    }
    Ok(ensemble)
}

/// A single model or an ensemble, chosen by the file's format tag.
pub enum Scorer {
    Single(UrmModel<f64>),
    Ensemble(Urme<f64>),
}

impl Scorer {
    pub fn schema(&self) -> &Schema {
        match self {
            Scorer::Single(m) => m.schema(),
            Scorer::Ensemble(e) => e.schema(),
        }
    }

    pub fn as_dyn(&self) -> &dyn urm_core::RewardScorer<f64> {
        match self {
            Scorer::Single(m) => m,
            Scorer::Ensemble(e) => e,
        }
    }
}

pub fn load_scorer(path: &Path) -> CliResult<Scorer> {
    let value: Value = parse_json(path, &read_text(path)?)?;
    match value.get("format").and_then(Value::as_str) {
        Some(MANIFEST_FORMAT) => Ok(Scorer::Ensemble(load_ensemble(path)?)),
        Some(CHECKPOINT_FORMAT) => Ok(Scorer::Single(load_checkpoint(path)?.0)),
        _ => Err(CliError::format(path, "neither a checkpoint nor an ensemble manifest")),
    }
}

pub fn save_world(path: &Path, world: &GroundTruthWorld<f64>) -> CliResult<()> {
    write_atomic(path, to_json_pretty(world).as_bytes())
}

pub fn load_world(path: &Path) -> CliResult<GroundTruthWorld<f64>> {
    parse_json(path, &read_text(path)?)
}
