//! Argument definitions and command bodies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use semscale::applications::{
    collection_stop, hierarchy_match, marginal_curve, nested_gaussian_fixture, pizza_select,
};
use semscale::imbalance::{imbalance_report, DatasetKind};
use semscale::trainer::{evaluate, gaussian_benchmark, trace_to_csv, train, TrainConfig};
use semscale::{dsb_weights, LabeledFeatureSet, VolumeParams};
use serde::Serialize;

use crate::{
    checksum, convert_whitespace, emit, feature_csv, parse_number_list, read_bytes,
    read_feature_file, CliError, CliResult, ReportFile,
};

/// Samples per class of the built-in training benchmark.
pub const BENCHMARK_SAMPLES_PER_CLASS: usize = 500;

#[derive(Debug, Parser)]
#[command(
    name = "semscale",
    version,
    about = "Measure per-class semantic scale and derive balancing loss weights"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-class semantic scales, interference weights and loss weights of a feature file.
    Scale(ScaleArgs),
    /// Three-stage re-weighted training of a toy classifier; writes the trace and final report.
    TrainDemo(TrainDemoArgs),
    /// Semantic scale against subsample size (marginal-effect curve).
    Curve(CurveArgs),
    /// Pick the most diverse of several random subsets of one class.
    Select(SelectArgs),
    /// Decide whether sample collection can stop given a history of scales.
    Collect(CollectArgs),
    /// Match child classes to parent classes by the growth of the parent's scale.
    Hierarchy(HierarchyArgs),
    /// Normalized inverse-scale loss weights for a list of scales.
    Weights(WeightsArgs),
    /// Convert a whitespace-separated matrix to a feature CSV.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    /// Feature CSV with header `label,f0,...`.
    #[arg(long)]
    pub features: PathBuf,
    /// Distortion epsilon of the volume estimate.
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    /// Interference-weight smoothing; defaults to 2 for long-tailed data and 1 for balanced data.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `long-tailed` or `balanced`.
    #[arg(long, default_value = "balanced")]
    pub dataset_kind: DatasetKind,
    /// Report path (JSON); stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDemoArgs {
    /// TOML training config; unset keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training data; the built-in 3-class Gaussian benchmark when omitted.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Trace CSV output.
    #[arg(long)]
    pub trace: PathBuf,
    /// Final pool report (JSON) output.
    #[arg(long)]
    pub report: PathBuf,
    /// Seed for initialization, shuffling and the built-in data [default: 42, or the config's seed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional CSV dump of the final storage pool.
    #[arg(long)]
    pub pool_dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Strictly increasing per-class subsample sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    /// Make every subsample contain the previous one.
    #[arg(long)]
    pub nested: bool,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// CSV output `size,class_id,scale`; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Class to select from; may be omitted when the file holds a single class.
    #[arg(long)]
    pub class: Option<usize>,
    /// Number of samples to keep.
    #[arg(long)]
    pub budget: usize,
    /// Number of random candidate subsets.
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Selection summary (JSON); stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Optional feature CSV of the selected rows.
    #[arg(long)]
    pub subset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    /// Scale history, one value per line or comma/whitespace separated.
    #[arg(long)]
    pub history: PathBuf,
    /// Stop once the relative increment falls below this percentage.
    #[arg(long, default_value_t = 1.0)]
    pub threshold_pct: f64,
}

#[derive(Debug, Args)]
pub struct HierarchyArgs {
    /// Parent classes as a feature CSV (label = parent id).
    #[arg(long, required_unless_present = "fixture", conflicts_with = "fixture")]
    pub parents: Option<PathBuf>,
    /// Child classes as a feature CSV (label = child id).
    #[arg(long, required_unless_present = "fixture", conflicts_with = "fixture")]
    pub children: Option<PathBuf>,
    /// Use the synthetic 3-parent / 7-child nested Gaussian fixture.
    #[arg(long)]
    pub fixture: bool,
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    /// Seed of the fixture.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Match result (JSON); stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    /// Positive per-class scales, comma separated.
    #[arg(
        long,
        value_delimiter = ',',
        required_unless_present = "report",
        conflicts_with = "report"
    )]
    pub scales: Vec<f64>,
    /// Take the combined scales from a scale report instead.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// JSON output; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Whitespace-separated matrix, one sample per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Give every row this label; otherwise the first column is the label.
    #[arg(long)]
    pub label: Option<usize>,
    /// Feature CSV output; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Scale(a) => scale(&a),
        Command::TrainDemo(a) => train_demo(&a),
        Command::Curve(a) => curve(&a),
        Command::Select(a) => select(&a),
        Command::Collect(a) => collect(&a),
        Command::Hierarchy(a) => hierarchy(&a),
        Command::Weights(a) => weights(&a),
        Command::Convert(a) => convert(&a),
    }
}

fn json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn scale(a: &ScaleArgs) -> CliResult<()> {
    let (data, bytes) = read_feature_file(&a.features)?;
    let alpha = a.alpha.unwrap_or_else(|| a.dataset_kind.default_alpha());
    let report = imbalance_report(&data, &VolumeParams::new(a.epsilon)?, alpha, a.dataset_kind)?;
    emit(
        a.output.as_deref(),
        &ReportFile::new(&report, checksum(&bytes)).to_json()?,
    )
}

pub fn load_train_config(path: &Path) -> CliResult<TrainConfig> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        message: e.message().to_string(),
    })
}

pub fn train_demo(a: &TrainDemoArgs) -> CliResult<()> {
    let mut config = match &a.config {
        Some(p) => load_train_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate_reweighting()?;

    let (data, bytes) = match &a.features {
        Some(p) => read_feature_file(p)?,
        None => {
            let data = gaussian_benchmark(BENCHMARK_SAMPLES_PER_CLASS, config.seed);
            let bytes = feature_csv(&data).into_bytes();
            (data, bytes)
        }
    };
    let outcome = train(&data, &config)?;

    crate::write_atomic(
        &a.trace,
        trace_to_csv(&outcome.trace, config.weight_scaling).as_bytes(),
    )?;
    crate::write_atomic(
        &a.report,
        ReportFile::new(&outcome.final_report, checksum(&bytes))
            .to_json()?
            .as_bytes(),
    )?;
    if let Some(p) = &a.pool_dump {
        crate::write_atomic(p, outcome.pool.to_csv().as_bytes())?;
    }

    let eval = evaluate(&outcome.model, &data)?;
    let recalls: Vec<String> = eval
        .per_class_recall
        .iter()
        .map(|r| format!("{r:.4}"))
        .collect();
    println!(
        "trained {} epochs ({} iterations); accuracy {:.4}; per-class recall {}",
        config.epochs,
        outcome.trace.len(),
        eval.accuracy,
        recalls.join(" ")
    );
    Ok(())
}

pub fn curve(a: &CurveArgs) -> CliResult<()> {
    let (data, _) = read_feature_file(&a.features)?;
    let c = marginal_curve(
        &data,
        &a.sizes,
        a.nested,
        &VolumeParams::new(a.epsilon)?,
        a.seed,
    )?;
    let mut out = String::from("size,class_id,scale\n");
    for (size, class, scale) in c.rows() {
        match class {
            Some(id) => writeln!(out, "{size},{id},{scale:?}"),
            None => writeln!(out, "{size},sum,{scale:?}"),
        }
        .expect("writing to a String");
    }
    emit(a.output.as_deref(), &out)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SelectOutput {
    class: usize,
    budget: usize,
    trials: usize,
    /// 0-based data-row indices in the input file.
    rows: Vec<usize>,
    scale: f64,
    trial: usize,
}

pub fn select(a: &SelectArgs) -> CliResult<()> {
    let (data, _) = read_feature_file(&a.features)?;
    let class = match a.class {
        Some(c) => c,
        None => match data.class_ids().as_slice() {
            [only] => *only,
            ids => {
                return Err(CliError::Usage(format!(
                    "file holds {} classes; pick one with --class",
                    ids.len()
                )))
            }
        },
    };
    let rows = data.class_indices(class);
    if rows.is_empty() {
        return Err(CliError::Usage(format!("class {class} has no samples")));
    }
    let pick = pizza_select(
        &data.class_matrix(class),
        a.budget,
        a.trials,
        &VolumeParams::new(a.epsilon)?,
        a.seed,
    )
    .map_err(|e| match e {
        semscale::Error::InsufficientSamples {
            available,
            requested,
            ..
        } => semscale::Error::InsufficientSamples {
            class,
            available,
            requested,
        },
        e => e,
    })?;
    let selected: Vec<usize> = pick.indices.iter().map(|&i| rows[i]).collect();
    if let Some(p) = &a.subset {
        crate::write_atomic(p, feature_csv(&data.select(&selected)?).as_bytes())?;
    }
    emit(
        a.output.as_deref(),
        &json(&SelectOutput {
            class,
            budget: a.budget,
            trials: a.trials,
            rows: selected,
            scale: pick.scale,
            trial: pick.trial,
        })?,
    )
}

pub fn collect(a: &CollectArgs) -> CliResult<()> {
    let path = a.history.display().to_string();
    let text = String::from_utf8(read_bytes(&a.history)?).map_err(|e| CliError::Parse {
        path: path.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let history = parse_number_list(&text, &path)?;
    match collection_stop(&history, a.threshold_pct)?.stop_index {
        Some(i) => println!("stop at index {i}"),
        None => println!("no stop within {} entries", history.len()),
    }
    Ok(())
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct ChildOutput {
    child: String,
    ratios: BTreeMap<String, f64>,
    assigned_parent: String,
    ambiguous: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    expected_parent: Option<String>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct HierarchyOutput {
    children: Vec<ChildOutput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    correct: Option<usize>,
}

fn split_classes(data: &LabeledFeatureSet) -> (Vec<String>, Vec<DMatrix<f64>>) {
    let ids = data.class_ids();
    (
        ids.iter().map(|id| id.to_string()).collect(),
        ids.iter().map(|&id| data.class_matrix(id)).collect(),
    )
}

pub fn hierarchy(a: &HierarchyArgs) -> CliResult<()> {
    let params = VolumeParams::new(a.epsilon)?;
    let (parent_names, parents, child_names, children, truth) = if a.fixture {
        let f = nested_gaussian_fixture(a.seed);
        (
            f.parent_names,
            f.parents,
            f.child_names,
            f.children,
            Some(f.child_parent),
        )
    } else {
        let load = |p: &Option<PathBuf>| -> CliResult<LabeledFeatureSet> {
            let p = p
                .as_ref()
                .ok_or_else(|| CliError::Usage("--parents and --children are required".into()))?;
            Ok(read_feature_file(p)?.0)
        };
        let (pn, pm) = split_classes(&load(&a.parents)?);
        let (cn, cm) = split_classes(&load(&a.children)?);
        (pn, pm, cn, cm, None)
    };
    let result = hierarchy_match(&children, &parents, &params)?;

    let children_out: Vec<ChildOutput> = result
        .children
        .iter()
        .map(|m| ChildOutput {
            child: child_names[m.child].clone(),
            ratios: parent_names
                .iter()
                .cloned()
                .zip(m.ratios.iter().copied())
                .collect(),
            assigned_parent: parent_names[m.assigned_parent].clone(),
            ambiguous: m.ambiguous,
            expected_parent: truth.as_ref().map(|t| parent_names[t[m.child]].clone()),
        })
        .collect();
    let correct = truth.as_ref().map(|t| {
        result
            .children
            .iter()
            .filter(|m| !m.ambiguous && m.assigned_parent == t[m.child])
            .count()
    });
    if let Some(c) = correct {
        eprintln!("matched {c}/{}", result.children.len());
    }
    emit(
        a.output.as_deref(),
        &json(&HierarchyOutput {
            children: children_out,
            correct,
        })?,
    )
}

#[derive(Serialize)]
struct WeightsOutput {
    scales: Vec<f64>,
    weights: Vec<f64>,
}

pub fn weights(a: &WeightsArgs) -> CliResult<()> {
    let scales = match &a.report {
        Some(p) => {
            let text = String::from_utf8(read_bytes(p)?).map_err(|e| CliError::Parse {
                path: p.display().to_string(),
                line: 0,
                message: e.to_string(),
            })?;
            ReportFile::from_json(&text)?
                .classes
                .iter()
                .map(|c| c.combined_scale)
                .collect()
        }
        None => a.scales.clone(),
    };
    let w = dsb_weights(&scales)?;
    emit(
        a.output.as_deref(),
        &json(&WeightsOutput {
            scales,
            weights: w.per_class,
        })?,
    )
}

pub fn convert(a: &ConvertArgs) -> CliResult<()> {
    let path = a.input.display().to_string();
    let text = String::from_utf8(read_bytes(&a.input)?).map_err(|e| CliError::Parse {
        path: path.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    emit(
        a.output.as_deref(),
        &convert_whitespace(&text, &path, a.label)?,
    )
}
