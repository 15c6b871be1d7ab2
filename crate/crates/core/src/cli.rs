//! Command implementations behind the `fewuser` binary. Every command writes
//! only under its output directory and records enough in a manifest to be
//! replayed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, RunConfig};
use crate::corpus::{
    dataset_to_string, filter_minority_classes, make_shot_subsets, make_split, FewShotSplit,
    SplitRatios,
};
use crate::encoder::EncoderInit;
use crate::error::{Error, Result};
use crate::eval::{render_table, EvalReport};
use crate::geo_prompt::{PromptSpec, SOFT_INIT_SIGMA, TEMPLATES};
use crate::trainer::{
    curve_csv, load_configured, prepare, run_fewshot_models, run_zeroshot, sha256_hex, Prepared, RunManifest,
    RunResult, MANIFEST_FORMAT, MANIFEST_VERSION,
};
use crate::user_repr::{FieldFilter, FusionKind, IntegrationKind};

/// Directory for cached splits; unset disables caching.
pub const CACHE_ENV: &str = "FEWUSER_CACHE_DIR";

pub const SPLIT_FORMAT: &str = "fewuser-split";
pub const ABLATION_FORMAT: &str = "fewuser-ablation";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_pretty(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Applies the `--seed` and `--shots` overrides.
pub fn apply_overrides(cfg: &mut RunConfig, seed: Option<u64>, shots: Option<usize>) -> Result<()> {
    if let Some(s) = seed {
        cfg.split.seed = s;
        cfg.train.seed = s;
    }
    if let Some(s) = shots {
        cfg.split.shots = s;
    }
    cfg.validate()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub format: String,
    pub version: u32,
    pub dataset: DatasetConfig,
    pub dataset_sha256: String,
    pub shots: Vec<usize>,
    pub subset_seeds: [u64; 3],
    pub dev_cap: Option<usize>,
    pub split: FewShotSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessArgs {
    pub dataset: DatasetConfig,
    pub seed: u64,
    pub shots: Vec<usize>,
    pub ratios: SplitRatios,
    pub dev_cap: Option<usize>,
    pub subset_seeds: [u64; 3],
}

impl PreprocessArgs {
    /// Dataset and split settings of `cfg`, with subsets for every shot count
    /// in `shots`.
    pub fn from_config(cfg: &RunConfig, shots: Vec<usize>) -> Self {
        Self {
            dataset: cfg.dataset.clone(),
            seed: cfg.split.seed,
            shots,
            ratios: cfg.split.ratios,
            dev_cap: cfg.split.dev_cap,
            subset_seeds: cfg.split.subset_seeds,
        }
    }
}

/// Filter, split and draw shot subsets; writes `split_manifest.json`.
pub fn cmd_preprocess(args: &PreprocessArgs, out: &Path) -> Result<SplitManifest> {
    let raw = load_configured(&args.dataset)?;
    let dataset = filter_minority_classes(&raw, args.dataset.min_count)?;
    let split = make_split(&dataset, args.ratios, args.seed, args.dev_cap)?;
    let split = make_shot_subsets(&split, &dataset, &args.shots, &args.subset_seeds)?;
    let manifest = SplitManifest {
        format: SPLIT_FORMAT.into(),
        version: 1,
        dataset: args.dataset.clone(),
        dataset_sha256: sha256_hex(dataset_to_string(&dataset)?.as_bytes()),
        shots: args.shots.clone(),
        subset_seeds: args.subset_seeds,
        dev_cap: args.dev_cap,
        split,
    };
    create_dir(out)?;
    write_pretty(&out.join("split_manifest.json"), &manifest)?;
    Ok(manifest)
}

fn split_cache_key(dataset_text: &str, cfg: &RunConfig) -> Result<String> {
    let key = serde_json::json!({
        "dataset": sha256_hex(dataset_text.as_bytes()),
        "min_count": cfg.dataset.min_count,
        "split": cfg.split,
    });
    Ok(sha256_hex(serde_json::to_string(&key)?.as_bytes()))
}

/// [`prepare`], reusing a split cached under `$FEWUSER_CACHE_DIR` when one
/// exists for the same data and split settings.
pub fn prepare_cached(cfg: &RunConfig) -> Result<Prepared> {
    let dataset = load_configured(&cfg.dataset)?;
    let Some(dir) = std::env::var_os(CACHE_ENV).map(PathBuf::from) else {
        return prepare(&dataset, cfg);
    };
    let key = split_cache_key(&dataset_to_string(&dataset)?, cfg)?;
    let path = dir.join(format!("split-{key}.json"));
    if path.exists() {
        let split: FewShotSplit = read_json(&path)?;
        let dataset = filter_minority_classes(&dataset, cfg.dataset.min_count)?;
        return Ok(Prepared { dataset, split });
    }
    let prep = prepare(&dataset, cfg)?;
    create_dir(&dir)?;
    write_pretty(&path, &prep.split)?;
    Ok(prep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSummary {
    pub seed_index: usize,
    pub seed: u64,
    pub train_users: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub metrics: EvalReport,
}

/// Metric file contents: everything but the training curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub averaged: EvalReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_subset: Vec<SubsetSummary>,
}

impl Report {
    pub fn from_result(r: &RunResult) -> Self {
        Self {
            averaged: r.averaged.clone(),
            per_subset: r
                .subsets
                .iter()
                .map(|s| SubsetSummary {
                    seed_index: s.seed_index,
                    seed: s.seed,
                    train_users: s.train_users,
                    best_epoch: s.best_epoch,
                    epochs_run: s.epochs_run,
                    metrics: s.report.clone(),
                })
                .collect(),
        }
    }
}

pub fn model_name(cfg: &RunConfig) -> &'static str {
    match cfg.objective.model {
        crate::config::ModelKind::FewUser => "FewUser",
        crate::config::ModelKind::ClassUser => "ClassUser",
    }
}

fn run_and_write(cfg: &RunConfig, prep: &Prepared, out: &Path) -> Result<RunResult> {
    create_dir(out)?;
    let result = if cfg.split.shots == 0 {
        run_zeroshot(prep, cfg)?
    } else {
        let (result, models) = run_fewshot_models(prep, cfg)?;
        let curves = out.join("curves");
        let ckpts = out.join("checkpoints");
        create_dir(&curves)?;
        for (s, model) in result.subsets.iter().zip(&models) {
            write_text(&curves.join(format!("subset_{}.csv", s.seed_index)), &curve_csv(&s.curve))?;
            let dir = ckpts.join(format!("subset_{}", s.seed_index));
            create_dir(&dir)?;
            model.encoder.save_checkpoint(&model.store, dir.join("encoder.json"))?;
            model.save_params(dir.join("model.json"))?;
        }
        result
    };
    write_pretty(&out.join("manifest.json"), &result.manifest)?;
    write_pretty(&out.join("report.json"), &Report::from_result(&result))?;
    let mut rows = vec![(format!("{} ({}-shot)", model_name(cfg), cfg.split.shots), result.averaged.clone())];
    for s in &result.subsets {
        rows.push((format!("  subset {}", s.seed_index), s.report.clone()));
    }
    write_text(&out.join("report.txt"), &render_table(&rows))?;
    Ok(result)
}

/// Runs the configured experiment: zero-shot when `split.shots` is 0,
/// otherwise the three-subset few-shot protocol.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<RunResult> {
    cfg.validate()?;
    run_and_write(cfg, &prepare_cached(cfg)?, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Integration,
    Fusion,
    Prompt,
    Tweets,
    Fields,
    Backbone,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Integration => "integration",
            Axis::Fusion => "fusion",
            Axis::Prompt => "prompt",
            Axis::Tweets => "tweets",
            Axis::Fields => "fields",
            Axis::Backbone => "backbone",
        }
    }
}

/// Column labels and configs for one sweep, all other settings held fixed.
pub fn ablation_variants(base: &RunConfig, axis: Axis) -> Vec<(String, RunConfig)> {
    let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (label, c)
    };
    match axis {
        Axis::Integration => IntegrationKind::ALL
            .iter()
            .map(|k| with(k.label().to_string(), &|c| c.representation.strategy = *k))
            .collect(),
        Axis::Fusion => FusionKind::ALL
            .iter()
            .map(|k| with(k.label().to_string(), &|c| c.representation.fusion = *k))
            .collect(),
        Axis::Tweets => (2..=10)
            .map(|t| with(t.to_string(), &|c| c.representation.num_posts = t))
            .collect(),
        Axis::Fields => FieldFilter::ALL
            .iter()
            .map(|f| with(format!("{f:?}"), &|c| c.representation.field_filter = Some(*f)))
            .collect(),
        Axis::Prompt => {
            let mut v: Vec<_> = TEMPLATES
                .iter()
                .map(|t| {
                    with(format!("{t:?}"), &|c| {
                        c.prompt = PromptSpec::Hard { template: t.to_string() }
                    })
                })
                .collect();
            v.extend((1..=14).map(|m| {
                with(format!("soft m={m}"), &|c| {
                    c.prompt = PromptSpec::Soft { m, sigma: SOFT_INIT_SIGMA }
                })
            }));
            v
        }
        Axis::Backbone => vec![
            with("toy-aligned".into(), &|c| c.encoder.toy.init = EncoderInit::Aligned),
            with("toy-random".into(), &|c| c.encoder.toy.init = EncoderInit::Random),
            with("toy-aligned+pos".into(), &|c| {
                c.encoder.toy.init = EncoderInit::Aligned;
                c.encoder.toy.positional = true;
            }),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub column: String,
    pub manifest: RunManifest,
    pub averaged: EvalReport,
}

/// Contents of `ablation_<axis>.json`: the sweep's base config and one entry
/// per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationManifest {
    pub format: String,
    pub version: u32,
    pub axis: Axis,
    pub config: RunConfig,
    pub entries: Vec<AblationEntry>,
}

/// Table with one column per variant and one row per metric.
pub fn render_ablation(axis: Axis, model: &str, entries: &[AblationEntry]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    let width = entries.iter().map(|e| e.column.len()).max().unwrap_or(0).max(10);
    let mut out = String::new();
    let _ = writeln!(out, "axis: {}  model: {model}", axis.name());
    let _ = write!(out, "{:<12}", "metric");
    for e in entries {
        let _ = write!(out, "  {:>width$}", e.column);
    }
    out.push('\n');
    let rows: [(&str, &dyn Fn(&EvalReport) -> Option<f64>); 3] = [
        ("acc (%)", &|r| Some(100.0 * r.acc)),
        ("meanD (km)", &|r| r.mean_d),
        ("medD (km)", &|r| r.med_d),
    ];
    for (name, f) in rows {
        let _ = write!(out, "{name:<12}");
        for e in entries {
            let _ = write!(out, "  {:>width$}", cell(f(&e.averaged)));
        }
        out.push('\n');
    }
    out
}

/// Sweeps one axis; writes `ablation_<axis>.txt` and `.json`.
pub fn cmd_ablate(cfg: &RunConfig, axis: Axis, out: &Path) -> Result<Vec<AblationEntry>> {
    let mut entries = Vec::new();
    for (column, variant) in ablation_variants(cfg, axis) {
        variant.validate()?;
        let prep = prepare_cached(&variant)?;
        let result = if variant.split.shots == 0 {
            run_zeroshot(&prep, &variant)?
        } else {
            run_fewshot_models(&prep, &variant)?.0
        };
        entries.push(AblationEntry { column, manifest: result.manifest, averaged: result.averaged });
    }
    create_dir(out)?;
    let stem = format!("ablation_{}", axis.name());
    write_text(&out.join(format!("{stem}.txt")), &render_ablation(axis, model_name(cfg), &entries))?;
    let manifest = AblationManifest {
        format: ABLATION_FORMAT.into(),
        version: 1,
        axis,
        config: cfg.clone(),
        entries,
    };
    write_pretty(&out.join(format!("{stem}.json")), &manifest)?;
    Ok(manifest.entries)
}

/// What a manifest file turned out to describe.
#[derive(Debug)]
pub enum Replayed {
    Split(SplitManifest),
    Run(Box<RunResult>),
    Ablation(Vec<AblationEntry>),
}

/// Re-executes the command that produced `manifest_path`, writing the same
/// files under `out`.
pub fn cmd_replay(manifest_path: &Path, out: &Path) -> Result<Replayed> {
    let value: serde_json::Value = read_json(manifest_path)?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(SPLIT_FORMAT) => {
            let m: SplitManifest = serde_json::from_value(value)?;
            let args = PreprocessArgs {
                dataset: m.dataset.clone(),
                seed: m.split.global_seed,
                shots: m.shots.clone(),
                ratios: m.split.ratios,
                dev_cap: m.dev_cap,
                subset_seeds: m.subset_seeds,
            };
            let raw = load_configured(&args.dataset)?;
            let filtered = filter_minority_classes(&raw, args.dataset.min_count)?;
            let got = sha256_hex(dataset_to_string(&filtered)?.as_bytes());
            if got != m.dataset_sha256 {
                return Err(Error::Config(format!("dataset hash {got} differs from manifest {}", m.dataset_sha256)));
            }
            Ok(Replayed::Split(cmd_preprocess(&args, out)?))
        }
        Some(MANIFEST_FORMAT) => {
            let m: RunManifest = serde_json::from_value(value)?;
            if m.version != MANIFEST_VERSION {
                return Err(Error::Config(format!("unsupported manifest version {}", m.version)));
            }
            let prep = prepare_cached(&m.config)?;
            let got = sha256_hex(dataset_to_string(&prep.dataset)?.as_bytes());
            if got != m.dataset_sha256 {
                return Err(Error::Config(format!("dataset hash {got} differs from manifest {}", m.dataset_sha256)));
            }
            let got = sha256_hex(serde_json::to_string(&prep.split)?.as_bytes());
            if got != m.split_sha256 {
                return Err(Error::Config(format!("split hash {got} differs from manifest {}", m.split_sha256)));
            }
            Ok(Replayed::Run(Box::new(run_and_write(&m.config, &prep, out)?)))
        }
        Some(ABLATION_FORMAT) => {
            let m: AblationManifest = serde_json::from_value(value)?;
            Ok(Replayed::Ablation(cmd_ablate(&m.config, m.axis, out)?))
        }
        other => Err(Error::Config(format!("unrecognized manifest format {other:?}"))),
    }
}

/// One-line description of a model configuration, for logs.
pub fn describe(cfg: &RunConfig) -> String {
    format!(
        "{} | {} T={} {:?} | {} | prompt {} | k={} {:?} {} | H={}",
        model_name(cfg),
        cfg.representation.strategy.label(),
        cfg.representation.num_posts,
        cfg.strategy().field_filter,
        cfg.representation.fusion.label(),
        cfg.prompt.describe(),
        cfg.objective.k,
        cfg.objective.mining,
        cfg.objective.fusion_kind.label(),
        cfg.encoder.toy.hidden,
    )
}
