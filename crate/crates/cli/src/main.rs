use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use edgeformer::cloud::PointCloud;
use edgeformer::descriptor::normalized_descriptors;
use edgeformer::evalmetrics::{evaluate, IcpParams, Protocol};
use edgeformer::groundtruth::{parse_abc_features, synth_shape, synth_shape_with_points, EdgeLabelSet, ShapeKind};
use edgeformer::gradsuite::run_suite;
use edgeformer::io::{labels_sidecar_path, load_cloud, load_cloud_with_labels, load_obj_mesh, save_cloud, CloudFormat};
use edgeformer::model::{Ablation, EdgeFormerParams};
use edgeformer::perturb::{add_gaussian_noise, random_downsample, sampling_density};
use edgeformer::spatial::{estimate_normals_pca, mesh_vertex_normals_from};
use edgeformer::training::{predict, train, LabeledPatchSet, TrainConfig};

mod manifest;

use manifest::RunManifest;

const THREADS_VAR: &str = "EDGEFORMER_THREADS";

#[derive(Parser, Debug)]
#[command(name = "edgeformer", version, about = "Point-cloud edge detection with projection-distance descriptors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Label mesh vertices from the sharp curves of an ABC feature file.
    GtExtract(GtExtractArgs),
    /// Compute the two descriptor matrices of a cloud.
    Descriptors(DescriptorArgs),
    /// Train a network on labeled clouds.
    Train(TrainArgs),
    /// Classify every point of a cloud.
    Predict(PredictArgs),
    /// Score predicted labels against ground truth.
    Eval(EvalArgs),
    /// Add Gaussian noise to a cloud and/or downsample it.
    Perturb(PerturbArgs),
    /// Sample a labeled synthetic CAD-like shape.
    Synth(SynthArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
struct Common {
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum NormalSource {
    /// Use normals from the file, estimating them when absent.
    Auto,
    /// Require normals in the file.
    File,
    /// Always re-estimate normals by PCA.
    Pca,
}

#[derive(Args, Debug, Serialize)]
struct NormalArgs {
    /// Where point normals come from.
    #[arg(long, value_enum, default_value = "auto")]
    normals: NormalSource,
    /// Neighbors used for PCA normal estimation.
    #[arg(long, default_value_t = 10)]
    normal_k: usize,
}

#[derive(Args, Debug, Serialize)]
struct GtExtractArgs {
    #[arg(long)]
    yaml: PathBuf,
    #[arg(long)]
    obj: PathBuf,
    /// Output `.xyz`; labels go to the `.labels` file beside it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct DescriptorArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    normals: NormalArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Labeled training clouds (labels from the `.labels` sidecar).
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Labeled validation clouds.
    #[arg(long, num_args = 1..)]
    val: Vec<PathBuf>,
    /// `key = value` training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small desk-scale preset instead of the full-size defaults.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(serialize_with = "display_opt")]
    ablation: Option<Ablation>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    input_scale: Option<f64>,
    #[arg(long)]
    share_encoder: Option<bool>,
    /// Checkpoint path for the final parameters.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint path for the lowest-validation-loss parameters.
    #[arg(long)]
    best_out: Option<PathBuf>,
    /// Per-epoch JSON lines log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    normals: NormalArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output `.labels` file with predicted edge indices.
    #[arg(long)]
    out: PathBuf,
    /// Optional file with one edge probability per line.
    #[arg(long)]
    probabilities: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[command(flatten)]
    normals: NormalArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum ProtocolArg {
    Label,
    Icp,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// The cloud both label sets refer to.
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth labels; defaults to the cloud's `.labels` sidecar.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "label")]
    protocol: ProtocolArg,
    /// ICP correspondence distance in normalized units.
    #[arg(long, default_value_t = 0.02)]
    tau: f64,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct PerturbArgs {
    #[arg(long)]
    input: PathBuf,
    /// Noise standard deviation as a multiple of the sampling density.
    #[arg(long)]
    noise: Option<f64>,
    /// Fraction of points to keep.
    #[arg(long)]
    downsample: Option<f64>,
    /// Carry the input normals instead of re-estimating them after noise.
    #[arg(long)]
    keep_normals: bool,
    #[arg(long, default_value_t = 10)]
    normal_k: usize,
    /// Output `.xyz`; labels go to the `.labels` file beside it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// cube, cylinder, fused_boxes, wedge or wedge:<degrees>.
    #[arg(long)]
    #[serde(serialize_with = "display")]
    kind: ShapeKind,
    /// Approximate point count.
    #[arg(long, conflicts_with = "density")]
    n: Option<usize>,
    /// Points per unit area.
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn display<T: fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn display_opt<T: fmt::Display, S: serde::Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.collect_str(v),
        None => s.serialize_none(),
    }
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<edgeformer::Error> for CliError {
    fn from(e: edgeformer::Error) -> Self {
        match e {
            edgeformer::Error::InvalidArgument(m) => CliError::usage(m),
            other => CliError::data(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Prefixes errors with the file they came from.
trait Context<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T> Context<T> for edgeformer::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| match e {
            edgeformer::Error::Io { .. } => CliError::data(e.to_string()),
            other => {
                let mut c = CliError::from(other);
                c.message = format!("{}: {}", path.display(), c.message);
                c
            }
        })
    }
}

fn format_of(path: &Path) -> CliResult<CloudFormat> {
    CloudFormat::from_path(path)
        .ok_or_else(|| CliError::usage(format!("{}: unknown cloud format (use .xyz, .ply or .obj)", path.display())))
}

fn read_cloud(path: &Path) -> CliResult<PointCloud> {
    load_cloud_with_labels(path, format_of(path)?).at(path)
}

fn resolve_normals(cloud: PointCloud, args: &NormalArgs, path: &Path) -> CliResult<PointCloud> {
    match (args.normals, cloud.normals().is_some()) {
        (NormalSource::File, false) => Err(CliError::data(format!("{}: cloud has no normals", path.display()))),
        (NormalSource::File, true) | (NormalSource::Auto, true) => Ok(cloud),
        _ => estimate_normals_pca(&cloud, args.normal_k).at(path),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::data(format!("I/O error on {}: {e}", path.display())))
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_VAR} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot size thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| run(cli.command));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> CliResult<ExitCode> {
    match command {
        Command::GtExtract(a) => gt_extract(a),
        Command::Descriptors(a) => descriptors(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Perturb(a) => perturb_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn gt_extract(a: GtExtractArgs) -> CliResult<ExitCode> {
    let mut m = RunManifest::new("gt-extract", &a, a.common.seed.unwrap_or(0));
    let t = Instant::now();
    let mesh = load_obj_mesh(&a.obj).at(&a.obj)?;
    let cloud = mesh_vertex_normals_from(&mesh).at(&a.obj)?;
    m.timing("mesh_s", t);
    let t = Instant::now();
    let labels = parse_abc_features(&a.yaml, cloud.len()).at(&a.yaml)?;
    m.timing("features_s", t);
    if labels.is_empty() {
        eprintln!("warning: {} has no sharp curves; the label file is empty", a.yaml.display());
    }
    let cloud = cloud.with_labels(labels.to_mask())?;
    save_cloud(&cloud, &a.out, CloudFormat::Xyz).at(&a.out)?;
    m.inputs([&a.yaml, &a.obj]);
    m.outputs([a.out.clone(), labels_sidecar_path(&a.out)]);
    m.result(json!({ "vertices": cloud.len(), "edge_points": labels.len() }));
    m.write_beside(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn descriptors(a: DescriptorArgs) -> CliResult<ExitCode> {
    let mut m = RunManifest::new("descriptors", &a, a.common.seed.unwrap_or(0));
    let cloud = resolve_normals(read_cloud(&a.input)?, &a.normals, &a.input)?;
    let t = Instant::now();
    let d = normalized_descriptors(&cloud, a.k).at(&a.input)?;
    m.timing("local_patch_encoding_s", t);
    d.write(&a.out).at(&a.out)?;
    m.inputs([&a.input]);
    m.outputs([a.out.clone()]);
    m.result(json!({ "n": d.n, "k": d.k }));
    m.write_beside(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => {
            let src = std::fs::read_to_string(p).map_err(|e| CliError::data(format!("I/O error on {}: {e}", p.display())))?;
            TrainConfig::parse(&src).at(p)?
        }
        None if a.desk => TrainConfig::desk(),
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.schedule.base_lr = v;
    }
    if let Some(v) = a.ablation {
        c.model.ablation = v;
    }
    if let Some(v) = a.k {
        c.model.k = v;
    }
    if let Some(v) = a.d_model {
        c.model.d_model = v;
    }
    if let Some(v) = a.heads {
        c.model.heads = v;
    }
    if let Some(v) = a.encoder_layers {
        c.model.encoder_layers = v;
    }
    if let Some(v) = a.dropout {
        c.model.dropout_p = v;
    }
    if let Some(v) = a.input_scale {
        c.model.input_scale = v;
    }
    if let Some(v) = a.share_encoder {
        c.model.share_encoder = v;
    }
    if let Some(v) = a.common.seed {
        c.seed = v;
    }
    c.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(c)
}

fn patch_sets(paths: &[PathBuf], normals: &NormalArgs, k: usize, first_id: u32) -> CliResult<Vec<LabeledPatchSet>> {
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let cloud = read_cloud(p)?;
            if cloud.labels().is_none() {
                return Err(CliError::data(format!("{}: no .labels sidecar", p.display())));
            }
            let cloud = resolve_normals(cloud, normals, p)?;
            LabeledPatchSet::from_cloud(&cloud, k, first_id + i as u32).at(p)
        })
        .collect()
}

fn train_cmd(a: TrainArgs) -> CliResult<ExitCode> {
    let config = train_config(&a)?;
    let mut m = RunManifest::new("train", &a, config.seed);
    let t = Instant::now();
    let data = patch_sets(&a.data, &a.normals, config.model.k, 0)?;
    let val = if a.val.is_empty() {
        None
    } else {
        let sets = patch_sets(&a.val, &a.normals, config.model.k, a.data.len() as u32)?;
        Some(LabeledPatchSet::concat(&sets)?)
    };
    m.timing("local_patch_encoding_s", t);
    let t = Instant::now();
    let mut log_lines = String::new();
    let outcome = train(&data, &config, val.as_ref(), |e| {
        let line = e.to_json();
        eprintln!("{line}");
        log_lines.push_str(&line);
        log_lines.push('\n');
    })?;
    m.timing("training_s", t);
    outcome.params.save(&a.out).at(&a.out)?;
    m.inputs(a.data.iter().chain(&a.val));
    m.outputs([a.out.clone()]);
    if let Some(p) = &a.log {
        write_text(p, &log_lines)?;
        m.outputs([p.clone()]);
    }
    let best_epoch = outcome.best.as_ref().map(|b| b.0);
    if let (Some(p), Some((_, best))) = (&a.best_out, &outcome.best) {
        best.save(p).at(p)?;
        m.outputs([p.clone()]);
    }
    let last = outcome.log.last();
    m.result(json!({
        "config": config.to_text(),
        "parameters": outcome.params.parameter_count(),
        "samples": data.iter().map(LabeledPatchSet::len).sum::<usize>(),
        "final_train_loss": last.map(|l| l.train_loss),
        "final_train_acc": last.map(|l| l.train_acc),
        "best_epoch": best_epoch,
    }));
    m.write_beside(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn predict_cmd(a: PredictArgs) -> CliResult<ExitCode> {
    let mut m = RunManifest::new("predict", &a, a.common.seed.unwrap_or(0));
    let t = Instant::now();
    let params = EdgeFormerParams::load(&a.model).at(&a.model)?;
    let cloud = resolve_normals(read_cloud(&a.input)?, &a.normals, &a.input)?;
    m.timing("load_s", t);
    if a.batch_size == 0 {
        return Err(CliError::usage("--batch-size must be positive"));
    }
    let p = predict(&cloud, &params, a.batch_size).at(&a.input)?;
    m.timings.insert("local_patch_encoding_s".into(), p.timings.normalize_and_descriptors_s);
    m.timings.insert("network_s".into(), p.timings.inference_s);
    eprintln!(
        "local patch encoding {:.3} s, network {:.3} s",
        p.timings.normalize_and_descriptors_s, p.timings.inference_s
    );
    let edges = EdgeLabelSet::from_mask(&p.labels);
    edges.write(&a.out).at(&a.out)?;
    m.inputs([&a.model, &a.input]);
    m.outputs([a.out.clone()]);
    if let Some(path) = &a.probabilities {
        let text: String = p.probabilities.iter().map(|v| format!("{v:.6}\n")).collect();
        write_text(path, &text)?;
        m.outputs([path.clone()]);
    }
    m.result(json!({ "points": cloud.len(), "edge_points": edges.len() }));
    m.write_beside(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(a: EvalArgs) -> CliResult<ExitCode> {
    let mut m = RunManifest::new("eval", &a, a.common.seed.unwrap_or(0));
    let cloud = load_cloud(&a.cloud, format_of(&a.cloud)?).at(&a.cloud)?;
    let gt_path = a.gt.clone().unwrap_or_else(|| labels_sidecar_path(&a.cloud));
    let gt = EdgeLabelSet::read(&gt_path, cloud.len()).at(&gt_path)?;
    let pred = EdgeLabelSet::read(&a.pred, cloud.len()).at(&a.pred)?;
    let protocol = match a.protocol {
        ProtocolArg::Label => Protocol::LabelDirect,
        ProtocolArg::Icp => Protocol::IcpMatched,
    };
    let icp = IcpParams {
        max_iter: a.max_iter,
        match_threshold: a.tau,
        ..IcpParams::default()
    };
    let t = Instant::now();
    let report = evaluate(&pred, &gt, &cloud, protocol, &icp)?;
    m.timing("evaluation_s", t);
    write_text(&a.out, &report.to_json())?;
    m.inputs([&a.cloud, &gt_path, &a.pred]);
    m.outputs([a.out.clone()]);
    m.result(serde_json::to_value(&report).expect("report serializes"));
    m.write_beside(&a.out)?;
    println!("{}", report.to_json());
    Ok(ExitCode::SUCCESS)
}

fn perturb_cmd(a: PerturbArgs) -> CliResult<ExitCode> {
    let seed = a.common.seed.unwrap_or(0);
    let mut m = RunManifest::new("perturb", &a, seed);
    if a.noise.is_none() && a.downsample.is_none() {
        return Err(CliError::usage("give --noise and/or --downsample"));
    }
    let mut cloud = read_cloud(&a.input)?;
    let input_n = cloud.len();
    let t = Instant::now();
    let mut s_density = None;
    if let Some(scale) = a.noise {
        let d = sampling_density(&cloud, seed).at(&a.input)?;
        s_density = Some(d.s_density);
        cloud = add_gaussian_noise(&cloud, scale, d.s_density, seed.wrapping_add(1))?;
        if scale > 0.0 && !a.keep_normals {
            cloud = estimate_normals_pca(&cloud, a.normal_k).at(&a.input)?;
        }
    }
    let mut kept = None;
    if let Some(ratio) = a.downsample {
        let (c, idx) = random_downsample(&cloud, ratio, seed.wrapping_add(2))?;
        cloud = c;
        kept = Some(idx);
    }
    m.timing("perturb_s", t);
    save_cloud(&cloud, &a.out, CloudFormat::Xyz).at(&a.out)?;
    m.inputs([&a.input]);
    m.outputs([a.out.clone()]);
    if cloud.labels().is_some() {
        m.outputs([labels_sidecar_path(&a.out)]);
    }
    if let Some(idx) = &kept {
        let path = a.out.with_extension("index");
        let text: String = idx.iter().map(|i| format!("{i}\n")).collect();
        write_text(&path, &text)?;
        m.outputs([path]);
    }
    m.result(json!({
        "scale": a.noise,
        "s_density": s_density,
        "ratio": a.downsample,
        "seed": seed,
        "input_points": input_n,
        "output_points": cloud.len(),
        "normals_reestimated": a.noise.is_some_and(|s| s > 0.0) && !a.keep_normals,
    }));
    m.write_beside(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn synth_cmd(a: SynthArgs) -> CliResult<ExitCode> {
    let seed = a.common.seed.unwrap_or(0);
    let mut m = RunManifest::new("synth", &a, seed);
    let t = Instant::now();
    let shape = match (a.n, a.density) {
        (Some(n), _) => synth_shape_with_points(a.kind, n, seed)?,
        (None, Some(d)) => synth_shape(a.kind, d, seed)?,
        (None, None) => synth_shape_with_points(a.kind, 2000, seed)?,
    };
    m.timing("sampling_s", t);
    save_cloud(&shape.cloud, &a.out, CloudFormat::Xyz).at(&a.out)?;
    m.outputs([a.out.clone(), labels_sidecar_path(&a.out)]);
    m.result(json!({
        "kind": a.kind.to_string(),
        "points": shape.cloud.len(),
        "edge_points": shape.edge_count(),
        "density": shape.density,
        "band": shape.band,
    }));
    m.write_beside(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult<ExitCode> {
    let seed = a.common.seed.unwrap_or(0);
    let mut m = RunManifest::new("gradcheck", &a, seed);
    let t = Instant::now();
    let entries = run_suite(seed)?;
    m.timing("gradcheck_s", t);
    let mut failed = 0;
    for e in &entries {
        let status = if e.passed { "ok" } else { "FAIL" };
        println!("{status:4} {:28} {:.3e} (tolerance {:.0e})", e.name, e.max_relative_error, e.tolerance);
        failed += usize::from(!e.passed);
    }
    println!("{} checks, {failed} failed", entries.len());
    let report: Value = serde_json::to_value(&entries).expect("entries serialize");
    m.result(json!({ "checks": entries.len(), "failed": failed }));
    match &a.out {
        Some(path) => {
            write_text(path, &serde_json::to_string_pretty(&report).expect("json"))?;
            m.outputs([path.clone()]);
            m.write_beside(path)?;
        }
        None => eprintln!("{}", m.to_json()),
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
