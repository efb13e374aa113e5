//! Command-line driver. Every command writes into `--out` and finishes with a
//! `run_manifest.json` describing the run.
//!
//! Exit codes: 0 success, 1 runtime or validation failure, 2 usage error
//! (bad flags, missing input files).

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::classify::{ClassifierModel, ModelKind, TrainConfig};
use crate::csi::{amplitude, load_frame, phase, sanitize_phase, CsiFrame, SlopeFit};
use crate::error::Error;
use crate::features::{stft, StftConfig, Window};
use crate::hdfm::{fit_factor_count, pca_compress, top_principal_components, HdfmConfig, Reference, Sigma2Mode};
use crate::io::{load_matrix_csv, save_json, save_matrix_csv, sha256_file};
use crate::pipeline::{default_subcarrier_index, evaluate_samples, load_samples, run_pipeline, FeatureMethod, PipelineConfig, Streams};
use crate::rng::derive_seed;
use crate::spectral::{
    ks_to_cdf, mp_cdf, mp_edges, mp_pdf, spectral_distance, spectrum_of, spiked_limit, write_mp_reference_csv, Ecdf,
    Metric, MpParams, MpQuantiles,
};
use crate::synth::{gen_labeled_dataset, gen_noise, gen_spiked, to_csi_frame, ClassTemplate, SpikedModelSpec, SyntheticDatasetSpec};
use crate::RealMatrix;

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "csi-hdfm", version, about = "Factor-model feature extraction for CSI matrices")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalArgs {
    /// Output directory.
    #[arg(long, global = true, env = "CSIF_OUT", default_value = "csif_out")]
    pub out: PathBuf,
    /// Master seed; stage seeds derive from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (outputs do not depend on this).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a labelled synthetic dataset of CSIF files.
    Synth(SynthArgs),
    /// Amplitude and sanitized phase of one frame.
    Clean(CleanArgs),
    /// Select the factor count and extract temporal factors.
    Hdfm(HdfmArgs),
    /// Fixed-count principal components.
    Pca(PcaArgs),
    /// Spectrogram of one row.
    Stft(StftArgs),
    /// Train and evaluate a classifier on a dataset directory.
    Pipeline(PipelineArgs),
    /// Compare simulated noise spectra with the Marčenko–Pastur law.
    MpCheck(MpCheckArgs),
    /// Score a saved model on a dataset directory.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Frames per class.
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, default_value_t = 90)]
    pub n: usize,
    #[arg(long, default_value_t = 1000)]
    pub t: usize,
    /// Comma-separated descending factor strengths, once per class. A single
    /// list is reused with class `k` scaled by `1 + k`.
    #[arg(long, num_args = 1)]
    pub strengths: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 1)]
    pub n_tx: u16,
    #[arg(long, default_value_t = 1)]
    pub n_rx: u16,
    #[arg(long, default_value_t = 1000.0)]
    pub sample_rate: f64,
    /// Comma-separated class labels (default class0, class1, ...).
    #[arg(long)]
    pub labels: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CleanArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "least_squares", value_parser = parse_slope_fit)]
    pub slope_fit: SlopeFit,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MatrixInput {
    /// CSIF frame or numeric CSV matrix.
    #[arg(long)]
    pub input: PathBuf,
    /// Stream analysed for CSIF input.
    #[arg(long, default_value = "amplitude", value_parser = parse_stream)]
    pub stream: Streams,
    /// Keep row means instead of centring each row.
    #[arg(long)]
    pub no_center: bool,
    #[arg(long, default_value = "least_squares", value_parser = parse_slope_fit)]
    pub slope_fit: SlopeFit,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HdfmFlags {
    /// Largest level scanned (default min(15, N - 1)).
    #[arg(long)]
    pub p_max: Option<usize>,
    #[arg(long, default_value = "wasserstein1", value_parser = parse_metric)]
    pub metric: Metric,
    #[arg(long, default_value = "analytic_mp", value_parser = parse_reference)]
    pub reference: Reference,
    #[arg(long, default_value_t = 10)]
    pub mc_trials: usize,
    /// `fit` (distance fit), `median`, or a fixed positive value.
    #[arg(long, default_value = "fit", value_parser = parse_sigma2)]
    pub sigma2: Sigma2Mode,
    #[arg(long, default_value_t = 0.35)]
    pub parsimony: f64,
}

impl HdfmFlags {
    fn config(&self, n: usize, seed: u64) -> HdfmConfig {
        HdfmConfig {
            p_max: self.p_max.unwrap_or(15.min(n.saturating_sub(1))),
            metric: self.metric,
            reference: self.reference,
            mc_trials: self.mc_trials,
            seed,
            sigma2_mode: self.sigma2,
            parsimony_tolerance: self.parsimony,
            ..HdfmConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HdfmArgs {
    #[command(flatten)]
    pub input: MatrixInput,
    #[command(flatten)]
    pub hdfm: HdfmFlags,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PcaArgs {
    #[command(flatten)]
    pub input: MatrixInput,
    #[arg(long)]
    pub p: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct StftArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Zero-based row of the N x T matrix.
    #[arg(long, default_value_t = 0)]
    pub row: usize,
    #[arg(long, default_value = "amplitude", value_parser = parse_stream)]
    pub stream: Streams,
    #[arg(long, default_value_t = 256)]
    pub window_len: usize,
    #[arg(long, default_value_t = 64)]
    pub hop_len: usize,
    #[arg(long, default_value_t = 256)]
    pub nfft: usize,
    /// `hann` or `rectangular`.
    #[arg(long, default_value = "hann", value_parser = parse_window)]
    pub window: Window,
    #[arg(long)]
    pub no_detrend: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PipelineArgs {
    /// Dataset root laid out as `<label>/<id>.csif`.
    #[arg(long)]
    pub data: PathBuf,
    /// `hdfm` or `pca`.
    #[arg(long, default_value = "hdfm", value_parser = parse_method)]
    pub baseline: FeatureMethod,
    /// Fixed factor count (required for PCA).
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long, default_value = "fused", value_parser = parse_stream)]
    pub streams: Streams,
    #[arg(long, default_value = "multinomial_logistic", value_parser = parse_kind)]
    pub classifier: ModelKind,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value = "least_squares", value_parser = parse_slope_fit)]
    pub slope_fit: SlopeFit,
    #[arg(long)]
    pub no_center: bool,
    #[command(flatten)]
    pub hdfm: HdfmFlags,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MpCheckArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 2000)]
    pub t: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    /// Planted spike strength (repeatable).
    #[arg(long)]
    pub spike: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

fn parse_with<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    parse_with(s)
}

fn parse_reference(s: &str) -> Result<Reference, String> {
    parse_with(s)
}

fn parse_stream(s: &str) -> Result<Streams, String> {
    parse_with(s)
}

fn parse_method(s: &str) -> Result<FeatureMethod, String> {
    parse_with(s)
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    parse_with(s)
}

fn parse_slope_fit(s: &str) -> Result<SlopeFit, String> {
    match s {
        "least_squares" | "ls" => Ok(SlopeFit::LeastSquares),
        "end_points" | "endpoints" | "two_point" => Ok(SlopeFit::EndPoints),
        other => Err(format!("unknown slope fit {other:?} (least_squares | end_points)")),
    }
}

fn parse_window(s: &str) -> Result<Window, String> {
    match s {
        "hann" => Ok(Window::Hann),
        "rectangular" | "rect" => Ok(Window::Rectangular),
        other => Err(format!("unknown window {other:?} (hann | rectangular)")),
    }
}

fn parse_sigma2(s: &str) -> Result<Sigma2Mode, String> {
    match s {
        "fit" => Ok(Sigma2Mode::FitDistance),
        "median" => Ok(Sigma2Mode::FitMedian),
        v => match v.parse::<f64>() {
            Ok(x) if x > 0.0 && x.is_finite() => Ok(Sigma2Mode::Fixed(x)),
            _ => Err(format!("expected fit, median or a positive number, got {v:?}")),
        },
    }
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("input file not found: {}", path.display())))
    }
}

fn require_dir(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("input directory not found: {}", path.display())))
    }
}

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    pub seeds: serde_json::Value,
    pub version: String,
    /// Paths relative to the output directory, sorted.
    pub outputs: Vec<String>,
    pub duration_s: f64,
}

/// Collects output paths while a command runs.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> CliResult<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.files.push(rel.to_string());
        Ok(p)
    }

    fn json<T: Serialize>(&mut self, rel: &str, v: &T) -> CliResult<()> {
        let p = self.path(rel)?;
        Ok(save_json(&p, v)?)
    }

    fn matrix(&mut self, rel: &str, m: &RealMatrix, header: Option<&[String]>) -> CliResult<()> {
        let p = self.path(rel)?;
        Ok(save_matrix_csv(&p, m, header)?)
    }

    fn text(&mut self, rel: &str, body: &str) -> CliResult<()> {
        let p = self.path(rel)?;
        fs::write(&p, body).map_err(|e| CliError::Runtime(Error::io(&p, e)))
    }

    fn writer(&mut self, rel: &str) -> CliResult<(PathBuf, BufWriter<File>)> {
        let p = self.path(rel)?;
        let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
        Ok((p, BufWriter::new(f)))
    }
}

struct RunRecord {
    inputs: Vec<PathBuf>,
    seeds: serde_json::Value,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, argv: Vec<String>) -> CliResult<()> {
    if cli.global.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build()
        .map_err(|e| usage(format!("cannot start {} threads: {e}", cli.global.threads)))?;
    let start = Instant::now();
    let mut out = Outputs::new(&cli.global.out)?;
    let g = &cli.global;
    let record = pool.install(|| match &cli.command {
        Command::Synth(a) => cmd_synth(g, a, &mut out),
        Command::Clean(a) => cmd_clean(g, a, &mut out),
        Command::Hdfm(a) => cmd_hdfm(g, a, &mut out),
        Command::Pca(a) => cmd_pca(g, a, &mut out),
        Command::Stft(a) => cmd_stft(g, a, &mut out),
        Command::Pipeline(a) => cmd_pipeline(g, a, &mut out),
        Command::MpCheck(a) => cmd_mp_check(g, a, &mut out),
        Command::Eval(a) => cmd_eval(g, a, &mut out),
    })?;
    let inputs = record
        .inputs
        .iter()
        .map(|p| {
            Ok(InputHash {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let command = serde_json::to_value(&cli.command).map_err(Error::from)?;
    let (name, config) = match command {
        serde_json::Value::Object(m) => m.into_iter().next().expect("one subcommand"),
        other => ("unknown".into(), other),
    };
    let mut outputs = out.files.clone();
    outputs.push(MANIFEST_NAME.into());
    outputs.sort();
    let manifest = RunManifest {
        command: name,
        argv,
        config: json!({ "global": g, "command": config }),
        inputs,
        seeds: record.seeds,
        version: env!("CARGO_PKG_VERSION").into(),
        outputs,
        duration_s: start.elapsed().as_secs_f64(),
    };
    save_json(&cli.global.out.join(MANIFEST_NAME), &manifest)?;
    Ok(())
}

fn parse_strengths(s: &str) -> CliResult<Vec<f64>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("--strengths: {v:?} is not a number")))
        })
        .collect()
}

fn cmd_synth(g: &GlobalArgs, a: &SynthArgs, out: &mut Outputs) -> CliResult<RunRecord> {
    if a.classes == 0 || a.frames == 0 {
        return Err(usage("--classes and --frames must be at least 1"));
    }
    let labels: Vec<String> = match &a.labels {
        Some(l) => l.split(',').map(|s| s.trim().to_string()).collect(),
        None => (0..a.classes).map(|k| format!("class{k}")).collect(),
    };
    if labels.len() != a.classes {
        return Err(usage(format!("{} labels given for {} classes", labels.len(), a.classes)));
    }
    if labels.iter().any(|l| l.is_empty() || l.contains(['/', '\\']) || l == "." || l == "..") {
        return Err(usage("labels must be nonempty directory names"));
    }
    let lists: Vec<Vec<f64>> = a.strengths.iter().map(|s| parse_strengths(s)).collect::<CliResult<_>>()?;
    let per_class: Vec<Vec<f64>> = match lists.len() {
        0 => vec![Vec::new(); a.classes],
        1 => (0..a.classes).map(|k| lists[0].iter().map(|v| v * (1 + k) as f64).collect()).collect(),
        n if n == a.classes => lists,
        n => return Err(usage(format!("{n} --strengths lists for {} classes", a.classes))),
    };
    let per_pair = a.n_tx as usize * a.n_rx as usize;
    if per_pair == 0 || !a.n.is_multiple_of(per_pair) {
        return Err(usage(format!("--n {} is not a multiple of n_tx * n_rx = {per_pair}", a.n)));
    }
    if a.t < 2 || !(a.sample_rate > 0.0 && a.sample_rate.is_finite()) {
        return Err(usage("--t must be at least 2 and --sample-rate positive"));
    }
    let spec = SyntheticDatasetSpec {
        classes: labels
            .iter()
            .zip(per_class)
            .map(|(label, strengths)| ClassTemplate {
                label: label.clone(),
                model: SpikedModelSpec {
                    n: a.n,
                    t: a.t,
                    strengths,
                    sigma2: a.sigma2,
                    seed: 0,
                },
            })
            .collect(),
        frames_per_class: a.frames,
        seed: g.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let data = gen_labeled_dataset(&spec)?;
    let width = a.frames.saturating_sub(1).to_string().len().max(3);
    let mut records = Vec::with_capacity(data.len());
    for d in &data {
        let (frame, offset) = to_csi_frame(&d.matrix, a.n_tx, a.n_rx, a.sample_rate)?;
        let rel = format!("{}/{:0width$}.csif", d.label, d.frame_index);
        let path = out.path(&rel)?;
        crate::csi::store_frame(&path, &frame)?;
        records.push(json!({
            "path": rel,
            "label": d.label,
            "class_index": d.class_index,
            "frame_index": d.frame_index,
            "seed": d.seed,
            "amplitude_offset": offset,
        }));
    }
    let truth = json!({
        "spec": spec,
        "p": spec.classes.iter().map(|c| c.model.p()).collect::<Vec<_>>(),
        "layout": { "n_tx": a.n_tx, "n_rx": a.n_rx, "n_sc": a.n / per_pair },
        "channels": "amplitude = offset + generated matrix, phase = 0",
        "frames": records,
    });
    out.json("ground_truth.json", &truth)?;
    Ok(RunRecord {
        inputs: Vec::new(),
        seeds: json!({ "master": g.seed, "frames": data.iter().map(|d| d.seed).collect::<Vec<_>>() }),
    })
}

fn cmd_clean(g: &GlobalArgs, a: &CleanArgs, out: &mut Outputs) -> CliResult<RunRecord> {
    require_file(&a.input)?;
    let frame = load_frame(&a.input)?;
    let (raw, quality) = phase(&frame);
    let index = default_subcarrier_index(frame.n_sc() as usize);
    let clean = sanitize_phase(&raw, &index, a.slope_fit)?;
    out.matrix("amplitude.csv", &amplitude(&frame), None)?;
    out.matrix("phase_raw.csv", &raw, None)?;
    out.matrix("phase_sanitized.csv", &clean, None)?;
    out.json(
        "phase_quality.json",
        &json!({
            "zero_magnitude_count": quality.zero_magnitude.len(),
            "zero_magnitude": quality.zero_magnitude,
            "subcarrier_index": index,
        }),
    )?;
    Ok(RunRecord {
        inputs: vec![a.input.clone()],
        seeds: json!({ "master": g.seed }),
    })
}

fn is_csif(path: &Path) -> CliResult<bool> {
    let mut head = [0u8; 4];
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    use std::io::Read;
    Ok(f.read(&mut head).map_err(|e| Error::io(path, e))? == 4 && &head == crate::csi::CSIF_MAGIC)
}

fn load_matrix(input: &MatrixInput) -> CliResult<(RealMatrix, Option<CsiFrame>)> {
    require_file(&input.input)?;
    let (mut m, frame) = if is_csif(&input.input)? {
        let frame = load_frame(&input.input)?;
        let m = match input.stream {
            Streams::Amplitude => amplitude(&frame),
            Streams::Phase => {
                let index = default_subcarrier_index(frame.n_sc() as usize);
                sanitize_phase(&phase(&frame).0, &index, input.slope_fit)?
            }
            Streams::Fused => return Err(usage("--stream must be amplitude or phase for a single matrix")),
        };
        (m, Some(frame))
    } else {
        (load_matrix_csv(&input.input)?, None)
    };
    if !input.no_center {
        for mut row in m.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
    }
    Ok((m, frame))
}

fn cmd_hdfm(g: &GlobalArgs, a: &HdfmArgs, out: &mut Outputs) -> CliResult<RunRecord> {
    let (m, _) = load_matrix(&a.input)?;
    let config = a.hdfm.config(m.nrows(), derive_seed(g.seed, &[0x4844]));
    if config.p_max >= m.nrows() {
        return Err(usage(format!("--p-max {} must be below N = {}", config.p_max, m.nrows())));
    }
    let res = fit_factor_count(&m, &config)?;
    out.matrix("features.csv", &res.features, None)?;
    let curve = RealMatrix::from_fn(res.distance_curve.len(), 3, |i, j| {
        let s = res.distance_curve[i];
        [s.p as f64, s.distance, s.sigma2][j]
    });
    out.matrix("distance_curve.csv", &curve, Some(&["p".into(), "distance".into(), "sigma2".into()]))?;
    let spectrum = spectrum_of(&res.decomposition.residual)?;
    let nonzero = &spectrum.values()[..m.nrows() - res.p_hat];
    let params = MpParams::for_shape(res.sigma2_hat, nonzero.len(), m.ncols())?;
    let table = MpQuantiles::new(params.c());
    let mut ascending = nonzero.to_vec();
    ascending.reverse();
    let k = ascending.len() as f64;
    let esd = RealMatrix::from_fn(ascending.len(), 4, |i, j| {
        let x = ascending[i];
        match j {
            0 => x,
            1 => (i + 1) as f64 / k,
            2 => table.cdf(x / params.sigma2()),
            _ => mp_pdf(x, params),
        }
    });
    out.matrix(
        "residual_esd.csv",
        &esd,
        Some(&["eigenvalue".into(), "ecdf".into(), "mp_cdf".into(), "mp_pdf".into()]),
    )?;
    out.json(
        "hdfm_result.json",
        &json!({
            "p_hat": res.p_hat,
            "sigma2_hat": res.sigma2_hat,
            "n": m.nrows(),
            "t": m.ncols(),
            "distance_curve": res.distance_curve,
            "features_shape": [res.features.nrows(), res.features.ncols()],
            "config": config,
        }),
    )?;
    Ok(RunRecord {
        inputs: vec![a.input.input.clone()],
        seeds: json!({ "master": g.seed, "hdfm": config.seed }),
    })
}

fn cmd_pca(g: &GlobalArgs, a: &PcaArgs, out: &mut Outputs) -> CliResult<RunRecord> {
    let (m, _) = load_matrix(&a.input)?;
    if a.p == 0 || a.p > m.nrows().min(m.ncols()) {
        return Err(usage(format!("--p must be in 1..={}", m.nrows().min(m.ncols()))));
    }
    let features = pca_compress(&m, a.p)?;
    let (loadings, _) = top_principal_components(&m, a.p)?;
    out.matrix("features.csv", &features, None)?;
    out.matrix("loadings.csv", &loadings, None)?;
    Ok(RunRecord {
        inputs: vec![a.input.input.clone()],
        seeds: json!({ "master": g.seed }),
    })
}

fn cmd_stft(g: &GlobalArgs, a: &StftArgs, out: &mut Outputs) -> CliResult<RunRecord> {
    require_file(&a.input)?;
    let frame = load_frame(&a.input)?;
    if a.row >= frame.n() {
        return Err(CliError::Runtime(Error::InvalidArgument(format!(
            "--row {} out of range: frame has rows 0..{}",
            a.row,
            frame.n() - 1
        ))));
    }
    let m = match a.stream {
        Streams::Amplitude => amplitude(&frame),
        Streams::Phase => {
            let index = default_subcarrier_index(frame.n_sc() as usize);
            sanitize_phase(&phase(&frame).0, &index, SlopeFit::LeastSquares)?
        }
        Streams::Fused => return Err(usage("--stream must be amplitude or phase")),
    };
    let signal: Vec<f64> = m.row(a.row).iter().copied().collect();
    let config = StftConfig {
        window_len: a.window_len,
        hop_len: a.hop_len,
        nfft: a.nfft,
        sample_rate_hz: frame.sample_rate_hz(),
        window: a.window,
        detrend: !a.no_detrend,
    };
    let spec = stft(&signal, &config)?;
    let (p, w) = out.writer("spectrogram.csv")?;
    spec.write_csv(w).map_err(|e| Error::io(&p, e))?;
    let (p, w) = out.writer("spectrogram.pgm")?;
    spec.write_pgm(w).map_err(|e| Error::io(&p, e))?;
    out.json(
        "spectrogram.json",
        &json!({
            "freq_bins": spec.freq_bins,
            "time_frames": spec.time_frames,
            "config": config,
            "row": a.row,
            "peak_bins": spec.peak_bins(),
        }),
    )?;
    Ok(RunRecord {
        inputs: vec![a.input.clone()],
        seeds: json!({ "master": g.seed }),
    })
}

fn cmd_pipeline(g: &GlobalArgs, a: &PipelineArgs, out: &mut Outputs) -> CliResult<RunRecord> {
    require_dir(&a.data)?;
    let samples = load_samples(&a.data).map_err(|e| match e {
        Error::InvalidArgument(m) => usage(m),
        other => CliError::Runtime(other),
    })?;
    if a.baseline == FeatureMethod::Pca && a.p.is_none() {
        return Err(usage("--baseline pca needs --p"));
    }
    let n = samples[0].frame.n();
    let config = PipelineConfig {
        streams: a.streams,
        method: a.baseline,
        p: a.p,
        hdfm: a.hdfm.config(n, 0),
        slope_fit: a.slope_fit,
        center_rows: !a.no_center,
        classifier: a.classifier,
        train: TrainConfig {
            learning_rate: a.lr,
            epochs: a.epochs,
            l2: a.l2,
            ..TrainConfig::default()
        },
        train_fraction: a.train_fraction,
        seed: g.seed,
    };
    let report = run_pipeline(&samples, &config)?;
    out.json(
        "metrics.json",
        &json!({
            "metrics": report.metrics,
            "labels": report.model.labels,
            "recipe": report.recipe,
            "n_train": report.train_ids.len(),
            "n_test": report.test_ids.len(),
        }),
    )?;
    let (p, w) = out.writer("confusion.csv")?;
    report.confusion.write_csv(w, &report.model.labels).map_err(|e| Error::io(&p, e))?;
    let mut per_class = String::from("label,precision,recall,f1\n");
    for (l, m) in report.model.labels.iter().zip(&report.metrics.per_class) {
        per_class.push_str(&format!("{l},{},{},{}\n", m.precision, m.recall, m.f1));
    }
    out.text("per_class.csv", &per_class)?;
    let mut sel = String::from("label,id,stream,p_hat,sigma2_hat\n");
    for s in &report.selections {
        for (k, (p, s2)) in s.p_hat.iter().zip(&s.sigma2_hat).enumerate() {
            sel.push_str(&format!("{},{},{k},{p},{s2}\n", s.label, s.id));
        }
    }
    out.text("selections.csv", &sel)?;
    let (p, w) = out.writer("model.bin")?;
    report.model.write_blob(w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(&p, source),
        other => other,
    })?;
    let split: Vec<_> = report
        .test_ids
        .iter()
        .map(|&i| format!("{}/{}", samples[i].label, samples[i].id))
        .collect();
    out.json("split.json", &json!({ "test": split }))?;
    Ok(RunRecord {
        inputs: samples_paths(&a.data, &samples),
        seeds: json!({ "master": g.seed, "split": derive_seed(g.seed, &[0x5350]) }),
    })
}

fn samples_paths(root: &Path, samples: &[crate::pipeline::Sample]) -> Vec<PathBuf> {
    samples.iter().map(|s| root.join(&s.label).join(format!("{}.csif", s.id))).collect()
}

fn cmd_mp_check(g: &GlobalArgs, a: &MpCheckArgs, out: &mut Outputs) -> CliResult<RunRecord> {
    if a.n == 0 || a.t == 0 || a.n > a.t {
        return Err(usage(format!("need 1 <= --n <= --t, got n={} t={}", a.n, a.t)));
    }
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let params = MpParams::for_shape(a.sigma2, a.n, a.t).map_err(|e| usage(e.to_string()))?;
    let mut spikes = a.spike.clone();
    if spikes.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(usage("--spike values must be positive"));
    }
    spikes.sort_by(|x, y| y.total_cmp(x));
    if spikes.windows(2).any(|w| w[0] == w[1]) || spikes.len() >= a.n {
        return Err(usage("--spike values must be distinct and fewer than --n"));
    }
    let (lo, hi) = mp_edges(params);
    let table = MpQuantiles::new(params.c());
    let reference: Vec<f64> = table.midpoint_quantiles(a.n).iter().map(|q| q * a.sigma2).collect();
    let reference = Ecdf::from_samples(&reference)?;
    let trial_seeds: Vec<u64> = (0..a.trials).map(|k| derive_seed(g.seed, &[0x4d50, k as u64])).collect();
    let spectra = {
        use rayon::prelude::*;
        trial_seeds
            .par_iter()
            .map(|&seed| {
                let r = if spikes.is_empty() {
                    gen_noise(a.n, a.t, a.sigma2, seed)?
                } else {
                    gen_spiked(&SpikedModelSpec {
                        n: a.n,
                        t: a.t,
                        strengths: spikes.clone(),
                        sigma2: a.sigma2,
                        seed,
                    })?
                    .r
                };
                spectrum_of(&r)
            })
            .collect::<crate::Result<Vec<_>>>()?
    };
    let mut trials = Vec::new();
    let mut spike_rows = String::from("trial,j,strength,observed,predicted,ratio\n");
    for (k, s) in spectra.iter().enumerate() {
        let e = Ecdf::from_samples(s.values())?;
        let ks = ks_to_cdf(&e, |x| mp_cdf(x, params));
        let w1 = spectral_distance(&e, &reference, Metric::Wasserstein1)?;
        let mut observed = Vec::new();
        for (j, &lambda) in spikes.iter().enumerate() {
            let obs = s.values()[j];
            let pred = spiked_limit(lambda, params);
            spike_rows.push_str(&format!("{k},{j},{lambda},{obs},{pred},{}\n", obs / pred));
            observed.push(json!({
                "strength": lambda,
                "observed": obs,
                "predicted": pred,
                "ratio": obs / pred,
                "supercritical": lambda > a.sigma2 * params.c().sqrt(),
            }));
        }
        trials.push(json!({
            "seed": trial_seeds[k],
            "ks": ks,
            "wasserstein1": w1,
            "top_eigenvalue": s.top(),
            "top_over_upper_edge": s.top().unwrap_or(0.0) / hi,
            "spikes": observed,
        }));
    }
    let max_ks = trials.iter().filter_map(|t| t["ks"].as_f64()).fold(0.0, f64::max);
    out.json(
        "mp_check.json",
        &json!({
            "n": a.n,
            "t": a.t,
            "c": params.c(),
            "sigma2": a.sigma2,
            "edges": [lo, hi],
            "bbp_threshold": a.sigma2 * params.c().sqrt(),
            "max_ks": max_ks,
            "trials": trials,
        }),
    )?;
    let first = &spectra[0];
    let mut asc = first.values().to_vec();
    asc.reverse();
    let kk = asc.len() as f64;
    let esd = RealMatrix::from_fn(asc.len(), 3, |i, j| match j {
        0 => asc[i],
        1 => (i + 1) as f64 / kk,
        _ => mp_cdf(asc[i], params),
    });
    out.matrix("esd.csv", &esd, Some(&["eigenvalue".into(), "ecdf".into(), "mp_cdf".into()]))?;
    let (p, w) = out.writer("mp_reference.csv")?;
    write_mp_reference_csv(w, params, 400).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(&p, source),
        other => other,
    })?;
    if !spikes.is_empty() {
        out.text("spikes.csv", &spike_rows)?;
    }
    Ok(RunRecord {
        inputs: Vec::new(),
        seeds: json!({ "master": g.seed, "trials": trial_seeds }),
    })
}

fn cmd_eval(g: &GlobalArgs, a: &EvalArgs, out: &mut Outputs) -> CliResult<RunRecord> {
    require_file(&a.model)?;
    require_dir(&a.data)?;
    let f = File::open(&a.model).map_err(|e| Error::io(&a.model, e))?;
    let model = ClassifierModel::read_blob(std::io::BufReader::new(f))?;
    let samples = load_samples(&a.data).map_err(|e| match e {
        Error::InvalidArgument(m) => usage(m),
        other => CliError::Runtime(other),
    })?;
    let (metrics, cm) = evaluate_samples(&model, &samples)?;
    out.json("metrics.json", &json!({ "metrics": metrics, "labels": model.labels }))?;
    let (p, w) = out.writer("confusion.csv")?;
    cm.write_csv(w, &model.labels).map_err(|e| Error::io(&p, e))?;
    let mut inputs = vec![a.model.clone()];
    inputs.extend(samples_paths(&a.data, &samples));
    Ok(RunRecord {
        inputs,
        seeds: json!({ "master": g.seed }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma2_flag_forms() {
        assert_eq!(parse_sigma2("fit").unwrap(), Sigma2Mode::FitDistance);
        assert_eq!(parse_sigma2("median").unwrap(), Sigma2Mode::FitMedian);
        assert_eq!(parse_sigma2("2.5").unwrap(), Sigma2Mode::Fixed(2.5));
        assert!(parse_sigma2("-1").is_err());
    }

    #[test]
    fn strengths_parse() {
        assert_eq!(parse_strengths("3, 2,1").unwrap(), vec![3.0, 2.0, 1.0]);
        assert_eq!(parse_strengths("").unwrap(), Vec::<f64>::new());
        assert!(parse_strengths("3,x").is_err());
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_from(["csi-hdfm", "bogus"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let missing = dir.path().join("missing.csif");
        assert_eq!(
            run_from(["csi-hdfm", "--out", out, "hdfm", "--input", missing.to_str().unwrap()]),
            2
        );
    }
}
