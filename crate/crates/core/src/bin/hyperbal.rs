//! Command-line pipeline for balanced hyperbolic embeddings: hierarchy
//! embedding, prototype training, OOD scoring and evaluation, plus a
//! deterministic synthetic benchmark generator.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hyperbal::embedder::{
    train_balanced, write_trace_csv, EmbedConfig, EmbeddingSet,
};
use hyperbal::error::{Error, Result};
use hyperbal::geometry::{Ball, Curvature};
use hyperbal::hierarchy::Hierarchy;
use hyperbal::metrics::{
    distortion_metric, evaluate_scores, hierarchical_report, level_norm_stats, map_metric,
    EvalReport, HierReport, LevelNormStats,
};
use hyperbal::protohead::{
    scale_prototypes, train, write_train_trace_csv, Backbone, Head, LabeledFeatures, LinearHead,
    Model, TrainConfig,
};
use hyperbal::scoring::{
    read_score_file, score_batch, write_score_file, FeatureBank, ScoreMethod, ScoreSource,
};
use hyperbal::synthdata::{generate, SynthSpec};

#[derive(Parser)]
#[command(
    name = "hyperbal",
    version,
    about = "Balanced hyperbolic embeddings for hierarchy-aware OOD detection",
    long_about = "Embeds class hierarchies into the Poincare ball, trains a hyperbolic \
prototype classifier (or a matched Euclidean baseline) on feature CSVs, scores \
out-of-distribution detection, and reports detection plus hierarchical metrics. \
All commands are deterministic under --seed and write a config echo next to \
their outputs."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train balanced hyperbolic embeddings from a hierarchy edge list.
    ///
    /// Input format: tab-separated "parent\tchild" lines, '#' comments
    /// allowed, e.g. "animal\tdog". Output: embedding TSV with a header
    /// "#dim=64 curvature=1 seed=0" and one "node\tv1\t...\tvd" row per
    /// node.
    Embed(EmbedArgs),
    /// Evaluate embedding quality against its hierarchy.
    ///
    /// Prints JSON {"distortion": ..., "map": ..., "level_norms": [...]}.
    EmbedEval(EmbedEvalArgs),
    /// Generate a synthetic hierarchy-aligned benchmark.
    ///
    /// Writes hierarchy.tsv, train.csv, test_id.csv, test_ood.csv plus
    /// id_classes.txt / ood_classes.txt leaf markers into --out-dir.
    GenData(GenDataArgs),
    /// Train a classifier head over an MLP backbone on a features CSV.
    ///
    /// Features CSV: header "f0,...,f{m-1},label", one row per sample.
    /// With --embeddings the head is hyperbolic prototypes; with
    /// --euclidean-baseline it is an affine softmax head.
    Train(TrainArgs),
    /// Score a features CSV with an OOD scoring function.
    ///
    /// Output: "# method=... source=..." header then one score per line,
    /// higher = more in-distribution.
    Score(ScoreArgs),
    /// Detection metrics from ID and OOD score files.
    ///
    /// Prints JSON {"auroc": ..., "aupr": ..., "fpr_at_95": ...,
    /// "n_id": ..., "n_ood": ...}.
    Eval(EvalArgs),
    /// Hierarchical generalization metrics from a predictions TSV.
    ///
    /// Predictions TSV: "predicted\tground_truth" leaf ids per line.
    /// Prints JSON {"h_dist": ..., "hsi_b1": ..., "hsi_b2": ..., "m": ...}.
    HierEval(HierEvalArgs),
    /// Run gen-data, embed, both trainings, scoring and evaluation
    /// end-to-end into one directory, writing summary.json.
    Pipeline(PipelineArgs),
}

#[derive(Args, Serialize)]
struct EmbedArgs {
    /// Hierarchy edge-list TSV.
    #[arg(long)]
    hierarchy: PathBuf,
    /// Output embedding TSV.
    #[arg(long)]
    out: PathBuf,
    /// Embedding dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Ball curvature magnitude c (> 0).
    #[arg(long, default_value_t = 1.0)]
    curvature: f64,
    /// Epochs of distortion + balancing training (0 = initialization only).
    #[arg(long, default_value_t = 10_000)]
    epochs: usize,
    /// Epochs of the softmax-ranking initialization.
    #[arg(long, default_value_t = 100)]
    init_epochs: usize,
    /// Norm-balancing weight; default 0.01 for hierarchies up to two
    /// levels, 0.1 for deeper ones.
    #[arg(long)]
    tau: Option<f64>,
    /// Step size of the main phase.
    #[arg(long, default_value_t = 8.0)]
    lr: f64,
    /// Step size of the initialization phase.
    #[arg(long, default_value_t = 0.1)]
    init_lr: f64,
    /// Negative samples per edge during initialization.
    #[arg(long, default_value_t = 10)]
    negatives: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional training-trace CSV (epoch,l_d,l_n,total).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EmbedEvalArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    /// Embedding TSV produced by `embed`.
    #[arg(long)]
    embeddings: PathBuf,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
}

#[derive(Args, Serialize, Clone)]
struct GenDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Levels below the root.
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// Children per node at each level, comma-separated.
    #[arg(long, default_value = "10,10", value_delimiter = ',')]
    branching: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    #[arg(long, default_value_t = 200)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    /// Isotropic within-class noise scale.
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    /// Fraction of leaves held out as OOD classes.
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    /// Fraction of non-root nodes removed (whole subtrees) for imbalance.
    #[arg(long, default_value_t = 0.0)]
    removal: f64,
    /// Center offset of level-1 nodes; halves per level.
    #[arg(long, default_value_t = 3.0)]
    center_step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Training features CSV.
    #[arg(long)]
    features: PathBuf,
    /// Embedding TSV; enables the hyperbolic prototype head.
    #[arg(long, required_unless_present = "euclidean_baseline")]
    embeddings: Option<PathBuf>,
    /// Train the Euclidean softmax baseline instead of prototypes.
    #[arg(long, default_value_t = false)]
    euclidean_baseline: bool,
    /// Prototype shrink factor.
    #[arg(long, default_value_t = 0.95)]
    proto_scale: f64,
    /// Logit temperature on negative distances.
    #[arg(long, default_value_t = 10.0)]
    gamma: f64,
    /// Hidden layer sizes, comma-separated.
    #[arg(long, default_value = "128,128", value_delimiter = ',')]
    hidden: Vec<usize>,
    /// Backbone output dimension for the Euclidean baseline without
    /// embeddings (otherwise the embedding dimension is used).
    #[arg(long, default_value_t = 64)]
    output_dim: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-3)]
    weight_decay: f64,
    /// Optional leaf-marker file pinning the in-distribution class set.
    #[arg(long)]
    id_classes: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model checkpoint JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional training-trace CSV (epoch,loss,accuracy).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    /// Model checkpoint JSON from `train`.
    #[arg(long)]
    model: PathBuf,
    /// Features CSV to score.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Output score file.
    #[arg(long)]
    out: PathBuf,
    /// Temperature for tempscale (default 1000) or energy (default 0.05
    /// hyperbolic / 1 Euclidean).
    #[arg(long)]
    temperature: Option<f64>,
    /// GEN exponent in (0, 1).
    #[arg(long, default_value_t = 0.1)]
    gen_gamma: f64,
    /// GEN top-M probabilities (default: all classes).
    #[arg(long)]
    gen_top_m: Option<usize>,
    /// Neighbor rank for knn.
    #[arg(long, default_value_t = 300)]
    k: usize,
    /// Training features CSV for the knn bank (required for knn).
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Also write per-row "predicted\tlabel" TSV.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    id_scores: PathBuf,
    #[arg(long)]
    ood_scores: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
}

#[derive(Args, Serialize)]
struct HierEvalArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    /// TSV of "predicted\tground_truth" leaf ids.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
}

#[derive(Args, Serialize)]
struct PipelineArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: PipelineDataArgs,
    /// Embedding dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 10_000)]
    embed_epochs: usize,
    #[arg(long, default_value_t = 8.0)]
    embed_lr: f64,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value = "128,128", value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 40)]
    train_epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    train_lr: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-3)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.95)]
    proto_scale: f64,
    #[arg(long, default_value_t = 10.0)]
    gamma: f64,
    /// Scoring methods to evaluate.
    #[arg(long, default_value = "msp,energy", value_delimiter = ',')]
    methods: Vec<MethodArg>,
}

#[derive(Args, Serialize, Clone)]
struct PipelineDataArgs {
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value = "10,10", value_delimiter = ',')]
    branching: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    #[arg(long, default_value_t = 200)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    #[arg(long, default_value_t = 0.0)]
    removal: f64,
    #[arg(long, default_value_t = 3.0)]
    center_step: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ReportFormat {
    Json,
    Tsv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Debug)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Msp,
    Tempscale,
    Energy,
    Gen,
    Knn,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Embed(args) => cmd_embed(args),
        Command::EmbedEval(args) => cmd_embed_eval(args),
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Score(args) => cmd_score(args),
        Command::Eval(args) => cmd_eval(args),
        Command::HierEval(args) => cmd_hier_eval(args),
        Command::Pipeline(args) => cmd_pipeline(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Usage-level problems (bad flags, missing/unreadable inputs) exit with 2;
/// runtime failures with 1.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Config(_) => 2,
        _ => 1,
    }
}

/// Tracks files written by one command so a failure removes partial output.
struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Outputs {
            files: Vec::new(),
            dirs: Vec::new(),
            committed: false,
        }
    }

    fn mkdir(&mut self, dir: &Path) -> Result<()> {
        if !dir.exists() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            self.dirs.push(dir.to_path_buf());
        }
        Ok(())
    }

    fn write(&mut self, path: &Path, contents: &[u8]) -> Result<()> {
        fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.files.push(path.to_path_buf());
        Ok(())
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

fn open_reader(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn config_echo_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    out.with_file_name(name)
}

fn write_config_echo(outputs: &mut Outputs, path: &Path, args: &impl Serialize) -> Result<()> {
    let echo = serde_json::to_string_pretty(args)?;
    outputs.write(path, echo.as_bytes())
}

fn emit_report(
    report: &impl Serialize,
    out: Option<&Path>,
    format: ReportFormat,
    args: &impl Serialize,
) -> Result<()> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
        ReportFormat::Tsv => {
            let value = serde_json::to_value(report)?;
            let mut s = String::new();
            flatten_tsv(&value, "", &mut s);
            s
        }
    };
    match out {
        Some(path) => {
            let mut outputs = Outputs::new();
            outputs.write(path, text.as_bytes())?;
            write_config_echo(&mut outputs, &config_echo_path(path), args)?;
            outputs.commit();
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn flatten_tsv(value: &serde_json::Value, prefix: &str, out: &mut String) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_tsv(v, &key, out);
            }
        }
        serde_json::Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten_tsv(v, &format!("{prefix}[{i}]"), out);
            }
        }
        other => {
            out.push_str(prefix);
            out.push('\t');
            out.push_str(&other.to_string());
            out.push('\n');
        }
    }
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let h = Hierarchy::parse_edge_list(open_reader(&args.hierarchy)?)?;
    let dist = h.all_pairs_distances();
    let cfg = EmbedConfig {
        dim: args.dim,
        curvature: Curvature::new(args.curvature)?,
        total_epochs: args.epochs,
        init_epochs: args.init_epochs,
        learning_rate: args.lr,
        init_learning_rate: args.init_lr,
        tau: args.tau,
        negatives_per_edge: args.negatives,
        seed: args.seed,
    };
    let (emb, trace) = train_balanced(&h, &dist, &cfg)?;

    let mut outputs = Outputs::new();
    let mut buf = Vec::new();
    emb.write_tsv(&mut buf)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    outputs.write(&args.out, &buf)?;
    if let Some(trace_path) = &args.trace {
        let mut tbuf = Vec::new();
        write_trace_csv(&trace, &mut tbuf)
            .map_err(|e| Error::io(trace_path.display().to_string(), e))?;
        outputs.write(trace_path, &tbuf)?;
    }
    write_config_echo(&mut outputs, &config_echo_path(&args.out), &args)?;
    outputs.commit();
    Ok(())
}

/// Embedding-quality report emitted by `embed-eval`.
#[derive(Serialize)]
struct EmbedQualityReport {
    distortion: f64,
    map: f64,
    level_norms: Vec<LevelNormStats>,
}

fn cmd_embed_eval(args: EmbedEvalArgs) -> Result<()> {
    let h = Hierarchy::parse_edge_list(open_reader(&args.hierarchy)?)?;
    let emb = EmbeddingSet::read_tsv(open_reader(&args.embeddings)?)?;
    let dist = h.all_pairs_distances();
    let report = EmbedQualityReport {
        distortion: distortion_metric(&emb, &h, &dist)?,
        map: map_metric(&emb, &h)?,
        level_norms: level_norm_stats(&emb, &h)?,
    };
    emit_report(&report, args.out.as_deref(), args.format, &args)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut outputs = Outputs::new();
    write_dataset(&mut outputs, &args)?;
    outputs.commit();
    Ok(())
}

fn write_dataset(outputs: &mut Outputs, args: &GenDataArgs) -> Result<()> {
    let spec = SynthSpec {
        depth: args.depth,
        branching: args.branching.clone(),
        removal_fraction: args.removal,
        feature_dim: args.feature_dim,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        sigma_within: args.sigma,
        holdout_fraction: args.holdout,
        center_step: args.center_step,
        seed: args.seed,
    };
    let data = generate(&spec)?;
    outputs.mkdir(&args.out_dir)?;

    outputs.write(
        &args.out_dir.join("hierarchy.tsv"),
        data.hierarchy.to_edge_list().as_bytes(),
    )?;
    for (name, split) in [
        ("train.csv", &data.train),
        ("test_id.csv", &data.test_id),
        ("test_ood.csv", &data.test_ood),
    ] {
        let mut buf = Vec::new();
        split
            .write_csv(&mut buf)
            .map_err(|e| Error::io(name, e))?;
        outputs.write(&args.out_dir.join(name), &buf)?;
    }
    outputs.write(
        &args.out_dir.join("id_classes.txt"),
        (data.id_classes.join("\n") + "\n").as_bytes(),
    )?;
    outputs.write(
        &args.out_dir.join("ood_classes.txt"),
        (data.ood_classes.join("\n") + "\n").as_bytes(),
    )?;
    write_config_echo(outputs, &args.out_dir.join("config.json"), args)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let data = LabeledFeatures::read_csv(open_reader(&args.features)?, "train")?;
    let mut classes = data.class_set();
    if let Some(marker_path) = &args.id_classes {
        let mut pinned = parse_markers_plain(marker_path)?;
        pinned.sort();
        pinned.dedup();
        if pinned != classes {
            return Err(Error::Config(format!(
                "id-classes file '{}' does not match the training label set",
                marker_path.display()
            )));
        }
        classes = pinned;
    }

    let model = build_model(&args, &data, classes)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        seed: args.seed,
    };
    let (model, trace) = train(model, &data, &cfg)?;

    let mut outputs = Outputs::new();
    outputs.write(&args.out, model.to_json()?.as_bytes())?;
    if let Some(trace_path) = &args.trace {
        let mut tbuf = Vec::new();
        write_train_trace_csv(&trace, &mut tbuf)
            .map_err(|e| Error::io(trace_path.display().to_string(), e))?;
        outputs.write(trace_path, &tbuf)?;
    }
    write_config_echo(&mut outputs, &config_echo_path(&args.out), &args)?;
    outputs.commit();
    Ok(())
}

/// Reads a leaf-marker style file: one id per line, '#' comments allowed.
fn parse_markers_plain(path: &Path) -> Result<Vec<String>> {
    Ok(read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

fn build_model(args: &TrainArgs, data: &LabeledFeatures, classes: Vec<String>) -> Result<Model> {
    if args.euclidean_baseline {
        let output_dim = match &args.embeddings {
            Some(path) => EmbeddingSet::read_tsv(open_reader(path)?)?.dim(),
            None => args.output_dim,
        };
        let mut sizes = vec![data.feature_dim];
        sizes.extend(&args.hidden);
        sizes.push(output_dim);
        Ok(Model {
            backbone: Backbone::new(&sizes, args.seed)?,
            head: Head::Euclidean(LinearHead::new(classes, output_dim, args.seed)?),
        })
    } else {
        let path = args
            .embeddings
            .as_ref()
            .expect("clap requires embeddings unless euclidean-baseline");
        let emb = EmbeddingSet::read_tsv(open_reader(path)?)?;
        if !(args.gamma.is_finite() && args.gamma > 0.0) {
            return Err(Error::Config(format!(
                "gamma {} must be positive",
                args.gamma
            )));
        }
        let mut head = scale_prototypes(&emb, &classes, args.proto_scale)?;
        head.gamma = args.gamma;
        let mut sizes = vec![data.feature_dim];
        sizes.extend(&args.hidden);
        sizes.push(emb.dim());
        Ok(Model {
            backbone: Backbone::new(&sizes, args.seed)?,
            head: Head::Hyperbolic(head),
        })
    }
}

fn method_from_args(args: &ScoreArgs) -> ScoreMethod {
    match args.method {
        MethodArg::Msp => ScoreMethod::Msp,
        MethodArg::Tempscale => ScoreMethod::TempScale {
            t: args.temperature.unwrap_or(1000.0),
        },
        MethodArg::Energy => ScoreMethod::Energy {
            t: args.temperature,
        },
        MethodArg::Gen => ScoreMethod::Gen {
            gamma_g: args.gen_gamma,
            top_m: args.gen_top_m,
        },
        MethodArg::Knn => ScoreMethod::Knn { k: args.k },
    }
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let model = Model::from_json(&read_to_string(&args.model)?)?;
    let features = LabeledFeatures::read_csv(open_reader(&args.features)?, "score")?;
    let method = method_from_args(&args);
    let bank = match (&method, &args.bank) {
        (ScoreMethod::Knn { .. }, Some(path)) => {
            let bank_feats = LabeledFeatures::read_csv(open_reader(path)?, "bank")?;
            Some(FeatureBank::from_model(&model, &bank_feats)?)
        }
        (ScoreMethod::Knn { .. }, None) => {
            return Err(Error::Config(
                "the knn method requires --bank <training features CSV>".into(),
            ))
        }
        _ => None,
    };
    let scores = score_batch(&method, &model, &features, bank.as_ref())?;
    let source = if model.head.is_hyperbolic() {
        ScoreSource::Hyperbolic
    } else {
        ScoreSource::Euclidean
    };

    let mut outputs = Outputs::new();
    let mut buf = Vec::new();
    write_score_file(&scores, &method, source, &mut buf)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    outputs.write(&args.out, &buf)?;
    if let Some(pred_path) = &args.predictions {
        let text = predictions_tsv(&model, &features)?;
        outputs.write(pred_path, text.as_bytes())?;
    }
    write_config_echo(&mut outputs, &config_echo_path(&args.out), &args)?;
    outputs.commit();
    Ok(())
}

fn predictions_tsv(model: &Model, features: &LabeledFeatures) -> Result<String> {
    let classes = model.class_names();
    let mut text = String::new();
    for i in 0..features.len() {
        let pred = model.predict_idx(features.row(i))?;
        text.push_str(&classes[pred]);
        text.push('\t');
        text.push_str(features.label(i));
        text.push('\n');
    }
    Ok(text)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let id = read_score_file(open_reader(&args.id_scores)?)?;
    let ood = read_score_file(open_reader(&args.ood_scores)?)?;
    let report = evaluate_scores(&id, &ood)?;
    emit_report(&report, args.out.as_deref(), args.format, &args)
}

fn read_predictions_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in read_to_string(path)?.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        match t.split('\t').collect::<Vec<_>>().as_slice() {
            [pred, gt] => out.push((pred.to_string(), gt.to_string())),
            _ => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected 'predicted\\tground_truth', got '{t}'"),
                })
            }
        }
    }
    Ok(out)
}

fn cmd_hier_eval(args: HierEvalArgs) -> Result<()> {
    let h = Hierarchy::parse_edge_list(open_reader(&args.hierarchy)?)?;
    let preds = read_predictions_tsv(&args.predictions)?;
    let report = hierarchical_report(&h, &preds)?;
    emit_report(&report, args.out.as_deref(), args.format, &args)
}

/// Per-head section of the pipeline summary.
#[derive(Serialize)]
struct HeadSummary {
    accuracy: f64,
    reports: Vec<MethodReport>,
    hier: HierReport,
    mean_id_norm: Option<f64>,
    mean_ood_norm: Option<f64>,
}

#[derive(Serialize)]
struct MethodReport {
    method: String,
    report: EvalReport,
}

#[derive(Serialize)]
struct PipelineSummary {
    seed: u64,
    hyperbolic: HeadSummary,
    euclidean: HeadSummary,
    embedding: EmbedQualityReport,
}

fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    let mut outputs = Outputs::new();
    outputs.mkdir(&args.out_dir)?;

    // data
    let data_args = GenDataArgs {
        out_dir: args.out_dir.join("data"),
        depth: args.data.depth,
        branching: args.data.branching.clone(),
        feature_dim: args.data.feature_dim,
        train_per_class: args.data.train_per_class,
        test_per_class: args.data.test_per_class,
        sigma: args.data.sigma,
        holdout: args.data.holdout,
        removal: args.data.removal,
        center_step: args.data.center_step,
        seed: args.seed,
    };
    write_dataset(&mut outputs, &data_args)?;
    let h = Hierarchy::parse_edge_list(open_reader(&data_args.out_dir.join("hierarchy.tsv"))?)?;
    let train_data =
        LabeledFeatures::read_csv(open_reader(&data_args.out_dir.join("train.csv"))?, "train")?;
    let test_id = LabeledFeatures::read_csv(
        open_reader(&data_args.out_dir.join("test_id.csv"))?,
        "test_id",
    )?;
    let test_ood = LabeledFeatures::read_csv(
        open_reader(&data_args.out_dir.join("test_ood.csv"))?,
        "test_ood",
    )?;

    // embedding
    let dist = h.all_pairs_distances();
    let ecfg = EmbedConfig {
        dim: args.dim,
        total_epochs: args.embed_epochs,
        learning_rate: args.embed_lr,
        tau: args.tau,
        seed: args.seed,
        ..EmbedConfig::default()
    };
    let (emb, etrace) = train_balanced(&h, &dist, &ecfg)?;
    let mut buf = Vec::new();
    emb.write_tsv(&mut buf)
        .map_err(|e| Error::io("embedding.tsv", e))?;
    outputs.write(&args.out_dir.join("embedding.tsv"), &buf)?;
    let mut tbuf = Vec::new();
    write_trace_csv(&etrace, &mut tbuf).map_err(|e| Error::io("embedding_trace.csv", e))?;
    outputs.write(&args.out_dir.join("embedding_trace.csv"), &tbuf)?;
    let embedding_quality = EmbedQualityReport {
        distortion: distortion_metric(&emb, &h, &dist)?,
        map: map_metric(&emb, &h)?,
        level_norms: level_norm_stats(&emb, &h)?,
    };

    // both heads over the same backbone shape and optimizer
    let classes = train_data.class_set();
    let tcfg = TrainConfig {
        epochs: args.train_epochs,
        batch_size: args.batch_size,
        learning_rate: args.train_lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        seed: args.seed,
    };
    let mut sizes = vec![train_data.feature_dim];
    sizes.extend(&args.hidden);
    sizes.push(args.dim);

    let mut head = scale_prototypes(&emb, &classes, args.proto_scale)?;
    head.gamma = args.gamma;
    let hyper = Model {
        backbone: Backbone::new(&sizes, args.seed)?,
        head: Head::Hyperbolic(head),
    };
    let (hyper, _) = train(hyper, &train_data, &tcfg)?;
    outputs.write(
        &args.out_dir.join("model_hyperbolic.json"),
        hyper.to_json()?.as_bytes(),
    )?;

    let eucl = Model {
        backbone: Backbone::new(&sizes, args.seed)?,
        head: Head::Euclidean(LinearHead::new(classes.clone(), args.dim, args.seed)?),
    };
    let (eucl, _) = train(eucl, &train_data, &tcfg)?;
    outputs.write(
        &args.out_dir.join("model_euclidean.json"),
        eucl.to_json()?.as_bytes(),
    )?;

    // scoring + evaluation
    let scores_dir = args.out_dir.join("scores");
    let reports_dir = args.out_dir.join("reports");
    outputs.mkdir(&scores_dir)?;
    outputs.mkdir(&reports_dir)?;

    let mut summaries = Vec::new();
    for (tag, model) in [("hyperbolic", &hyper), ("euclidean", &eucl)] {
        let source = if model.head.is_hyperbolic() {
            ScoreSource::Hyperbolic
        } else {
            ScoreSource::Euclidean
        };
        let bank = if args.methods.contains(&MethodArg::Knn) {
            Some(FeatureBank::from_model(model, &train_data)?)
        } else {
            None
        };
        let mut reports = Vec::new();
        for method_arg in &args.methods {
            let method = match method_arg {
                MethodArg::Msp => ScoreMethod::Msp,
                MethodArg::Tempscale => ScoreMethod::TempScale { t: 1000.0 },
                MethodArg::Energy => ScoreMethod::Energy { t: None },
                MethodArg::Gen => ScoreMethod::Gen {
                    gamma_g: 0.1,
                    top_m: None,
                },
                MethodArg::Knn => ScoreMethod::Knn { k: 300 },
            };
            let id_scores = score_batch(&method, model, &test_id, bank.as_ref())?;
            let ood_scores = score_batch(&method, model, &test_ood, bank.as_ref())?;
            for (split, scores) in [("id", &id_scores), ("ood", &ood_scores)] {
                let mut sbuf = Vec::new();
                write_score_file(scores, &method, source, &mut sbuf)
                    .map_err(|e| Error::io("score file", e))?;
                outputs.write(
                    &scores_dir.join(format!("{tag}_{}_{split}.txt", method.name())),
                    &sbuf,
                )?;
            }
            let report = evaluate_scores(&id_scores, &ood_scores)?;
            outputs.write(
                &reports_dir.join(format!("{tag}_{}.json", method.name())),
                (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
            )?;
            reports.push(MethodReport {
                method: method.name().to_string(),
                report,
            });
        }

        // hierarchical generalization of the OOD predictions
        let preds_text = predictions_tsv(model, &test_ood)?;
        let preds_path = args.out_dir.join(format!("predictions_{tag}_ood.tsv"));
        outputs.write(&preds_path, preds_text.as_bytes())?;
        let preds = read_predictions_tsv(&preds_path)?;
        let hier = hierarchical_report(&h, &preds)?;
        outputs.write(
            &reports_dir.join(format!("hier_{tag}.json")),
            (serde_json::to_string_pretty(&hier)? + "\n").as_bytes(),
        )?;

        let (mean_id_norm, mean_ood_norm) = if model.head.is_hyperbolic() {
            let ball = Ball::new(Curvature::unit());
            let mean_norm = |split: &LabeledFeatures| -> Result<f64> {
                let mut total = 0.0;
                for i in 0..split.len() {
                    let (z, _) = model
                        .hyper_embedding(split.row(i))?
                        .expect("hyperbolic head");
                    total += ball.poincare_norm(z.coords());
                }
                Ok(total / split.len() as f64)
            };
            (Some(mean_norm(&test_id)?), Some(mean_norm(&test_ood)?))
        } else {
            (None, None)
        };

        summaries.push(HeadSummary {
            accuracy: model.accuracy(&test_id)?,
            reports,
            hier,
            mean_id_norm,
            mean_ood_norm,
        });
    }

    let euclidean = summaries.pop().expect("two summaries");
    let hyperbolic = summaries.pop().expect("two summaries");
    let summary = PipelineSummary {
        seed: args.seed,
        hyperbolic,
        euclidean,
        embedding: embedding_quality,
    };
    outputs.write(
        &args.out_dir.join("summary.json"),
        (serde_json::to_string_pretty(&summary)? + "\n").as_bytes(),
    )?;
    write_config_echo(&mut outputs, &args.out_dir.join("config.json"), &args)?;
    outputs.commit();
    Ok(())
}
