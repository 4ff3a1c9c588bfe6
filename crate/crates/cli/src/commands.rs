use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use urm_core::ensemble::build_ensemble;
use urm_core::gating::train_gating;
use urm_core::harness::{
    accuracy_vs_threshold, bon_select, default_penalty, filter_by_uncertainty, ood_report,
    penalized_reward, score_pairs, FilterMode, ScoredCandidate, ThresholdCurve,
};
use urm_core::model::Combination;
use urm_core::trainer::{
    accuracy_from_rewards, init_model, merge_models, train_urm_with_validation, TrainHistory,
};
use urm_core::world::{make_pairs, sample_records, split_by_group, GroundTruthWorld, Record};
use urm_core::{LossKind, Schema, UncertaintyKind};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::persist::{
    load_checkpoint, load_scorer, read_dataset, save_checkpoint, save_ensemble, save_world,
    write_dataset, Dataset, DatasetHeader,
};
use crate::report::{fmt_float, write_report, Csv};

#[derive(Debug, Parser)]
#[command(name = "urm", version, about = "Uncertainty-aware reward models on a synthetic preference world")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Master seed; overrides every seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// TOML file with [world], [data], [train], [gating], and [weights] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic world and write train/val/eval/ood/bon datasets.
    GenData(GenDataArgs),
    /// Train a model, an ensemble, or a gating layer on a frozen model.
    Train(TrainArgs),
    /// Pairwise accuracy, threshold curve, and optional OOD report.
    Eval(EvalArgs),
    /// Best-of-n selection over prompt groups, scored by true utility.
    Bon(BonArgs),
    /// Drop the most uncertain preference pairs.
    Filter(FilterArgs),
    /// Interpolate the parameters of two checkpoints.
    Merge(MergeArgs),
    /// Compare uncertainty on in-distribution and OOD records.
    OodReport(OodArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub ood_fraction: Option<f64>,
    #[arg(long)]
    pub val_pairs: Option<usize>,
    #[arg(long)]
    pub eval_pairs: Option<usize>,
    #[arg(long)]
    pub flip_rate: Option<f64>,
    #[arg(long)]
    pub bon_prompts: Option<usize>,
    #[arg(long)]
    pub bon_candidates: Option<usize>,
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub num_attributes: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset whose records carry labels.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset whose pairs are scored after every epoch.
    #[arg(long)]
    pub val_pairs: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Shared initialization seed (members then differ only in data order).
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Number of ensemble members.
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Train a gating layer on the pairs in this dataset.
    #[arg(long)]
    pub gating_pairs: Option<PathBuf>,
    /// Skip model training and fit the gating layer on this checkpoint.
    #[arg(long, requires = "gating_pairs")]
    pub base: Option<PathBuf>,
    /// Expected feature dimension of the data.
    #[arg(long)]
    pub input_dim: Option<usize>,
    /// Expected attribute count of the data.
    #[arg(long)]
    pub num_attributes: Option<usize>,
    #[arg(long, default_value = "model")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint or ensemble manifest.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "inf")]
    pub thresholds: Vec<f64>,
    #[arg(long)]
    pub kind: Option<UncertaintyKind>,
    /// In-distribution records for an OOD report.
    #[arg(long, requires = "ood")]
    pub id: Option<PathBuf>,
    #[arg(long, requires = "id")]
    pub ood: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct BonArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Records grouped by prompt, carrying true attribute means.
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    pub n: Vec<usize>,
    /// Penalize candidates whose uncertainty exceeds this value.
    #[arg(long)]
    pub penalty_threshold: Option<f64>,
    /// Penalty size; twice the reward interquartile range by default.
    #[arg(long, requires = "penalty_threshold")]
    pub penalty: Option<f64>,
    #[arg(long)]
    pub kind: Option<UncertaintyKind>,
    #[arg(long, default_value = "bon")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Keep the least uncertain fraction of pairs.
    #[arg(long, conflicts_with = "threshold", required_unless_present = "threshold")]
    pub keep_fraction: Option<f64>,
    /// Keep pairs whose uncertainty is at most this value.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub kind: Option<UncertaintyKind>,
    #[arg(long, default_value = "filtered")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Weight of the first model.
    #[arg(long)]
    pub lambda: f64,
    pub m1: PathBuf,
    pub m2: PathBuf,
    #[arg(long, default_value = "merged")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct OodArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub id: PathBuf,
    #[arg(long)]
    pub ood: PathBuf,
    #[arg(long, default_value = "ood_report")]
    pub name: String,
}

/// Derives an independent stream seed from the master seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // A second call within one process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut config = RunConfig::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        config.seed = seed;
        config.train.seed = seed;
        config.gating.seed = seed;
    }
    let out = cli.global.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    match cli.command {
        Command::GenData(a) => gen_data(config, a, &out),
        Command::Train(a) => train(config, a, &out),
        Command::Eval(a) => eval(config, a, &out),
        Command::Bon(a) => bon(config, a, &out),
        Command::Filter(a) => filter(config, a, &out),
        Command::Merge(a) => merge(config, a, &out),
        Command::OodReport(a) => ood(config, a, &out),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn world_schema(world: &GroundTruthWorld<f64>) -> CliResult<Schema> {
    Ok(Schema::new(world.input_dim(), world.attribute_names.clone())?)
}

fn gen_data(mut config: RunConfig, a: GenDataArgs, out: &Path) -> CliResult<()> {
    let d = &mut config.data;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(d.count, a.count);
    set!(d.ood_fraction, a.ood_fraction);
    set!(d.val_pairs, a.val_pairs);
    set!(d.eval_pairs, a.eval_pairs);
    set!(d.flip_rate, a.flip_rate);
    set!(d.bon_prompts, a.bon_prompts);
    set!(d.bon_candidates, a.bon_candidates);
    set!(config.world.input_dim, a.input_dim);
    set!(config.world.num_attributes, a.num_attributes);
    set!(config.world.delta, a.delta);
    config.data.validate()?;
    config.world.validate()?;
    let data = config.data.clone();
    let seed = config.seed;

    let world = GroundTruthWorld::<f64>::generate(config.world.clone(), seed)?;
    let schema = world_schema(&world)?;
    let header = DatasetHeader::new(&schema, Some(world.true_weights().to_vec()));

    let records = sample_records(&world, data.count, data.ood_fraction, sub_seed(seed, 1))?;
    let (ood_records, id_records): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.is_ood);
    let mut splits = split_by_group(&id_records, &data.splits, sub_seed(seed, 2)).into_iter();
    let (train, val, eval) = (
        splits.next().unwrap_or_default(),
        splits.next().unwrap_or_default(),
        splits.next().unwrap_or_default(),
    );
    let pairs_of = |recs: &[Record<f64>], count: usize, stream: u64| -> CliResult<Vec<_>> {
        if count == 0 || recs.is_empty() {
            return Ok(Vec::new());
        }
        Ok(make_pairs(recs, &world, count, sub_seed(seed, stream))?)
    };
    let val_pairs = pairs_of(&val, data.val_pairs, 3)?;
    let eval_pairs = pairs_of(&eval, data.eval_pairs, 4)?;
    let ood_pairs = pairs_of(&ood_records, data.eval_pairs, 5)?;
    let noisy = urm_core::world::label_noise(&eval_pairs, data.flip_rate, world.config.tau, sub_seed(seed, 6))?;

    let mut bon_world = world.clone();
    bon_world.config.group_size = data.bon_candidates;
    let bon = sample_records(&bon_world, data.bon_prompts * data.bon_candidates, 0.0, sub_seed(seed, 7))?;

    let oracle = world.oracle_model()?;
    let config_value = config.to_value();

    save_world(&out.join("world.json"), &world)?;
    let files: [(&str, Dataset); 6] = [
        ("train.jsonl", Dataset { records: train, pairs: Vec::new() }),
        ("val.jsonl", Dataset { records: val, pairs: val_pairs }),
        ("eval.jsonl", Dataset { records: eval, pairs: eval_pairs }),
        ("eval_noisy.jsonl", Dataset { records: Vec::new(), pairs: noisy }),
        ("ood.jsonl", Dataset { records: ood_records, pairs: ood_pairs }),
        ("bon.jsonl", Dataset { records: bon, pairs: Vec::new() }),
    ];
    for (name, ds) in &files {
        write_dataset(&out.join(name), &header, ds)?;
    }
    save_checkpoint(&out.join("oracle.json"), &oracle, config_value)?;

    let id_count: usize = files[..3].iter().map(|(_, ds)| ds.records.len()).sum();
    println!("id records: {id_count}");
    println!("ood records: {}", files[4].1.records.len());
    for (name, ds) in &files {
        println!("{name}: {} records, {} pairs", ds.records.len(), ds.pairs.len());
    }
    Ok(())
}

fn history_csv(path: &Path, history: &TrainHistory) -> CliResult<()> {
    let mut csv = Csv::new(&["epoch", "train_loss", "val_loss", "mean_log_std", "val_accuracy"]);
    let opt = |x: Option<f64>| x.map(fmt_float).unwrap_or_default();
    for e in &history.epochs {
        csv.row(&[
            e.epoch.to_string(),
            fmt_float(e.train_loss),
            fmt_float(e.val_loss),
            opt(e.mean_log_std),
            opt(e.val_accuracy),
        ]);
    }
    csv.write(path)
}

fn check_schema(schema: &Schema, a: &TrainArgs) -> CliResult<()> {
    if let Some(d) = a.input_dim.filter(|&d| d != schema.input_dim) {
        return Err(CliError::Config(format!(
            "--input-dim {d} does not match the data's {} features",
            schema.input_dim
        )));
    }
    if let Some(n) = a.num_attributes.filter(|&n| n != schema.num_attributes()) {
        return Err(CliError::Config(format!(
            "--num-attributes {n} does not match the data's {} attributes",
            schema.num_attributes()
        )));
    }
    Ok(())
}

fn train(mut config: RunConfig, a: TrainArgs, out: &Path) -> CliResult<()> {
    let t = &mut config.train;
    if let Some(v) = a.loss {
        t.loss = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.adam.learning_rate = v;
        config.gating.adam.learning_rate = v;
    }
    if a.init_seed.is_some() {
        config.train.init_seed = a.init_seed;
    }
    let seeds = match (a.ensemble, a.seeds.clone()) {
        (Some(k), Some(s)) if k != s.len() => {
            return Err(CliError::Config(format!("--ensemble {k} but {} seeds given", s.len())))
        }
        (_, Some(s)) => s,
        (Some(k), None) => (0..k as u64).map(|i| config.train.seed + i).collect(),
        (None, None) => vec![config.train.seed],
    };

    let val_pairs = match &a.val_pairs {
        Some(p) => Some(read_dataset(p)?.1.pairs),
        None => None,
    };

    let model = if let Some(base) = &a.base {
        let (model, _) = load_checkpoint(base)?;
        check_schema(model.schema(), &a)?;
        model
    } else {
        let data = a
            .data
            .as_ref()
            .ok_or_else(|| CliError::Config("train needs --data or --base".into()))?;
        let (header, ds) = read_dataset(data)?;
        let schema = header.schema()?;
        check_schema(&schema, &a)?;
        config.train.weights = config.weight_vector(&schema)?;
        config.weights = None;
        let config_value = config.to_value();
        if seeds.len() > 1 {
            if a.gating_pairs.is_some() {
                return Err(CliError::Config("gating layers are trained on single models, not ensembles".into()));
            }
            let (ensemble, histories) = build_ensemble(&ds.records, &schema, &config.train, &seeds)?;
            let manifest_path = out.join(format!("{}.manifest.json", a.name));
            let manifest = save_ensemble(&manifest_path, &ensemble, &config_value)?;
            for (seed, h) in seeds.iter().zip(&histories) {
                history_csv(&out.join(format!("{}.seed{seed}.history.csv", a.name)), h)?;
            }
            println!("wrote {} ({} members)", path_str(&manifest_path), manifest.k);
            return Ok(());
        }
        config.train.seed = seeds[0];
        let model = if config.train.epochs == 0 {
            let mut m = init_model(&schema, &config.train)?;
            m.metadata.seed = Some(config.train.seed);
            m.metadata.init_seed = Some(config.train.init_seed.unwrap_or(config.train.seed));
            m.metadata.loss = Some(config.train.loss);
            m.metadata.provenance = Some("untrained initialization".into());
            m
        } else {
            let (m, history) = train_urm_with_validation(&ds.records, val_pairs.as_deref(), &schema, &config.train)?;
            history_csv(&out.join(format!("{}.history.csv", a.name)), &history)?;
            m
        };
        model
    };

    let model = match &a.gating_pairs {
        None => model,
        Some(p) => {
            let (_, ds) = read_dataset(p)?;
            let trained = train_gating(&model, &ds.pairs, &config.gating)?;
            let mut csv = Csv::new(&["epoch", "train_loss", "val_accuracy"]);
            for e in &trained.history {
                csv.row(&[e.epoch.to_string(), fmt_float(e.train_loss), fmt_float(e.val_accuracy)]);
            }
            csv.write(&out.join(format!("{}.gating.csv", a.name)))?;
            println!(
                "gating: best epoch {} validation accuracy {}",
                trained.best_epoch,
                fmt_float(trained.best_val_accuracy)
            );
            model.with_combination(Combination::Gated(trained.gating))?
        }
    };
    let path = out.join(format!("{}.json", a.name));
    save_checkpoint(&path, &model, config.to_value())?;
    println!("wrote {}", path_str(&path));
    Ok(())
}

fn curve_json(curve: &ThresholdCurve) -> Value {
    json!({
        "kind": curve.kind.name(),
        "thresholds": curve.thresholds.iter().map(|&t| fmt_float(t)).collect::<Vec<_>>(),
        "accuracy": curve.accuracy,
        "retained_fraction": curve.retained_fraction,
    })
}

fn eval(config: RunConfig, a: EvalArgs, out: &Path) -> CliResult<()> {
    let scorer = load_scorer(&a.model)?;
    let (_, ds) = read_dataset(&a.pairs)?;
    if ds.pairs.is_empty() {
        return Err(CliError::Config(format!("{} holds no pairs", path_str(&a.pairs))));
    }
    let s = scorer.as_dyn();
    let rewards = ds
        .pairs
        .iter()
        .map(|p| Ok((s.score(&p.chosen.features)?.reward, s.score(&p.rejected.features)?.reward)))
        .collect::<CliResult<Vec<(f64, f64)>>>()?;
    let accuracy = accuracy_from_rewards(&rewards).expect("nonempty");
    let ties = rewards.iter().filter(|(c, r)| c == r).count() as f64 / rewards.len() as f64;

    let all_infinite = a.thresholds.iter().all(|t| *t == f64::INFINITY);
    let curve = match accuracy_vs_threshold(s, &ds.pairs, &a.thresholds, a.kind) {
        Ok(c) => c,
        // Scorers without uncertainty can still report the degenerate curve.
        Err(_) if all_infinite && a.kind.is_none() => ThresholdCurve {
            thresholds: a.thresholds.clone(),
            accuracy: vec![Some(accuracy); a.thresholds.len()],
            retained_fraction: vec![1.0; a.thresholds.len()],
            kind: s.default_uncertainty(),
        },
        Err(e) => return Err(e.into()),
    };

    let ood = match (&a.id, &a.ood) {
        (Some(id), Some(ood)) => {
            let (_, id_ds) = read_dataset(id)?;
            let (_, ood_ds) = read_dataset(ood)?;
            Some(ood_report(s, &id_ds.records, &ood_ds.records)?)
        }
        _ => None,
    };

    let mut csv = Csv::new(&["threshold", "accuracy", "retained_fraction"]);
    for i in 0..curve.thresholds.len() {
        csv.row(&[
            fmt_float(curve.thresholds[i]),
            curve.accuracy[i].map(fmt_float).unwrap_or_default(),
            fmt_float(curve.retained_fraction[i]),
        ]);
    }
    csv.write(&out.join(format!("{}.curve.csv", a.name)))?;
    let report = json!({
        "accuracy": accuracy,
        "pairs": ds.pairs.len(),
        "tie_fraction": ties,
        "curve": curve_json(&curve),
        "ood": ood,
        "inputs": {"model": path_str(&a.model), "pairs": path_str(&a.pairs)},
        "config": config.to_value(),
    });
    let path = out.join(format!("{}.json", a.name));
    write_report(&path, &report)?;
    println!("accuracy {} on {} pairs", fmt_float(accuracy), ds.pairs.len());
    println!("wrote {}", path_str(&path));
    Ok(())
}

fn bon(config: RunConfig, a: BonArgs, out: &Path) -> CliResult<()> {
    let scorer = load_scorer(&a.model)?;
    let (header, ds) = read_dataset(&a.candidates)?;
    let weights = header
        .combination_weights
        .clone()
        .ok_or_else(|| CliError::format(&a.candidates, "header lacks combination_weights"))?;
    if a.n.is_empty() || a.n.contains(&0) {
        return Err(CliError::Config("--n values must be positive".into()));
    }
    let s = scorer.as_dyn();
    let kind = a.kind.unwrap_or_else(|| s.default_uncertainty());
    let mut candidates = Vec::with_capacity(ds.records.len());
    for r in &ds.records {
        if r.true_mean.is_none() {
            return Err(CliError::format(&a.candidates, format!("record {} lacks true_mean", r.id)));
        }
        let score = s.score(&r.features)?;
        let uncertainty = match a.penalty_threshold {
            Some(_) => score.uncertainty(kind)?,
            None => score.uncertainty(kind).unwrap_or(f64::NAN),
        };
        candidates.push(ScoredCandidate {
            record: r.clone(),
            reward: score.reward,
            uncertainty,
            kind,
        });
    }
    let penalty = match a.penalty_threshold {
        None => None,
        Some(t) => {
            let rewards: Vec<f64> = candidates.iter().map(|c| c.reward).collect();
            let p = a.penalty.or_else(|| default_penalty(&rewards)).unwrap_or(0.0);
            for c in &mut candidates {
                c.reward = penalized_reward(c.reward, c.uncertainty, t, p);
            }
            Some((t, p))
        }
    };

    let mut groups: std::collections::BTreeMap<u64, Vec<ScoredCandidate<f64>>> = Default::default();
    for c in candidates {
        groups.entry(c.record.prompt_group).or_default().push(c);
    }
    let utility = |r: &Record<f64>| -> f64 {
        let m = r.true_mean.as_ref().expect("checked above");
        weights.iter().zip(m).map(|(w, f)| w * f).sum()
    };
    let mut csv = Csv::new(&["n", "mean_true_utility", "mean_reward", "prompts"]);
    let mut rows = Vec::new();
    for &n in &a.n {
        let (mut u_sum, mut r_sum) = (0.0, 0.0);
        for (&g, cands) in &groups {
            let best = bon_select(cands, n, sub_seed(config.seed, g))?;
            u_sum += utility(&best.record);
            r_sum += best.reward;
        }
        let k = groups.len() as f64;
        csv.row(&[n.to_string(), fmt_float(u_sum / k), fmt_float(r_sum / k), groups.len().to_string()]);
        rows.push((n, u_sum / k));
    }
    let path = out.join(format!("{}.csv", a.name));
    csv.write(&path)?;
    write_report(
        &out.join(format!("{}.json", a.name)),
        &json!({
            "n": rows.iter().map(|r| r.0).collect::<Vec<_>>(),
            "mean_true_utility": rows.iter().map(|r| r.1).collect::<Vec<_>>(),
            "penalty": penalty.map(|(t, p)| json!({"threshold": t, "penalty": p, "kind": kind.name()})),
            "inputs": {"model": path_str(&a.model), "candidates": path_str(&a.candidates)},
            "config": config.to_value(),
        }),
    )?;
    for (n, u) in rows {
        println!("n={n} mean true utility {}", fmt_float(u));
    }
    println!("wrote {}", path_str(&path));
    Ok(())
}

fn filter(config: RunConfig, a: FilterArgs, out: &Path) -> CliResult<()> {
    let scorer = load_scorer(&a.model)?;
    let (header, ds) = read_dataset(&a.pairs)?;
    let s = scorer.as_dyn();
    let kind = a.kind.unwrap_or_else(|| s.default_uncertainty());
    let mode = match (a.keep_fraction, a.threshold) {
        (Some(f), _) => FilterMode::KeepFraction(f),
        (None, Some(t)) => FilterMode::Threshold(t),
        (None, None) => unreachable!("clap requires one mode"),
    };
    let scored = score_pairs(s, &ds.pairs, kind)?;
    let kept: Vec<_> = filter_by_uncertainty(&scored, mode)?.into_iter().map(|p| p.pair).collect();
    let path = out.join(format!("{}.jsonl", a.name));
    write_dataset(&path, &header, &Dataset { records: Vec::new(), pairs: kept.clone() })?;
    write_report(
        &out.join(format!("{}.json", a.name)),
        &json!({
            "kind": kind.name(),
            "input_pairs": ds.pairs.len(),
            "kept_pairs": kept.len(),
            "keep_fraction": a.keep_fraction,
            "threshold": a.threshold,
            "inputs": {"model": path_str(&a.model), "pairs": path_str(&a.pairs)},
            "config": config.to_value(),
        }),
    )?;
    println!("kept {} of {} pairs", kept.len(), ds.pairs.len());
    println!("wrote {}", path_str(&path));
    Ok(())
}

fn merge(config: RunConfig, a: MergeArgs, out: &Path) -> CliResult<()> {
    let (m1, _) = load_checkpoint(&a.m1)?;
    let (m2, _) = load_checkpoint(&a.m2)?;
    let mut merged = merge_models(&m1, &m2, a.lambda)?;
    if let Some(p) = merged.metadata.provenance.as_mut() {
        p.push_str(&format!(" from {} and {}", path_str(&a.m1), path_str(&a.m2)));
    }
    let mut value = config.to_value();
    value["merge"] = json!({"lambda": a.lambda, "m1": path_str(&a.m1), "m2": path_str(&a.m2)});
    let path = out.join(format!("{}.json", a.name));
    save_checkpoint(&path, &merged, value)?;
    println!("wrote {}", path_str(&path));
    Ok(())
}

fn ood(config: RunConfig, a: OodArgs, out: &Path) -> CliResult<()> {
    let scorer = load_scorer(&a.model)?;
    let (_, id_ds) = read_dataset(&a.id)?;
    let (_, ood_ds) = read_dataset(&a.ood)?;
    let report = ood_report(scorer.as_dyn(), &id_ds.records, &ood_ds.records)?;
    let path = out.join(format!("{}.json", a.name));
    write_report(
        &path,
        &json!({
            "report": report,
            "inputs": {"model": path_str(&a.model), "id": path_str(&a.id), "ood": path_str(&a.ood)},
            "config": config.to_value(),
        }),
    )?;
    for k in &report.kinds {
        println!(
            "{}: auroc {} mean id {} mean ood {}",
            k.kind.name(),
            fmt_float(k.auroc),
            fmt_float(k.id.mean),
            fmt_float(k.ood.mean)
        );
    }
    println!("wrote {}", path_str(&path));
    Ok(())
}
