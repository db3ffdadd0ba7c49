//! Command-line front end for the masking toolkit: mixing, loss evaluation,
//! gradient validation, direct mask optimization, model training, and
//! instrumental metrics.
//!
//! All audio I/O is 16 kHz mono PCM16 WAV. Human-readable summaries go to
//! stdout; `--json` switches each command to a single machine-readable
//! document. Errors print to stderr and exit nonzero.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use maskloss::components::{apply_mask, read_mask_csv, write_mask_csv};
use maskloss::gradcheck::{check_gradients, standard_fixture, GradCheckReport, DEFAULT_FD_STEP};
use maskloss::losses::{LossContext, LossKind, LossWeights};
use maskloss::metrics::{evaluate_mask, MetricReport};
use maskloss::signal::{mix_at_snr, read_mix_manifest, SignalBuffer};
use maskloss::stft::{self, StftConfig};
use maskloss::trainer::{
    mixture_features, mlp_train, optimize_mask, MlpMaskModel, OptimizeConfig, TrainConfig,
    Utterance,
};
use maskloss::{Error, Matrix, Result};

#[derive(Parser)]
#[command(
    name = "maskloss",
    version,
    about = "Component-wise losses, mask optimization and metrics for masking-based speech enhancement",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mix speech and noise at a target active-speech SNR
    Mix(MixArgs),
    /// Evaluate one or all losses for a speech/noise pair under a mask
    Loss(LossArgs),
    /// Validate the analytic loss gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Optimize a mask directly against a chosen loss
    Optimize(OptimizeArgs),
    /// Train the MLP mask estimator on a mixing manifest
    Train(TrainArgs),
    /// Instrumental metrics for a mask, a trained model, or the closed form
    Evaluate(EvaluateArgs),
}

/// Shared analysis settings, loadable from a JSON file. Fields left out of
/// the file keep their defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PipelineConfig {
    stft: StftConfig,
    weights: LossWeights,
    optimize: OptimizeConfig,
}

/// Train-command settings, loadable from a JSON file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFileConfig {
    stft: StftConfig,
    train: TrainConfig,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        TrainFileConfig { stft: StftConfig::default(), train: TrainConfig::default() }
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => load_json(p),
        None => Ok(T::default()),
    }
}

fn parse_kind(s: &str) -> Result<LossKind> {
    LossKind::from_str(s)
}

fn read_pair(speech: &Path, noise: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = SignalBuffer::from_wav(speech)?;
    let d = SignalBuffer::from_wav(noise)?;
    if s.samples.len() != d.samples.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("noise as long as the speech ({} samples)", s.samples.len()),
            got: format!("{} samples — align the pair with `maskloss mix` first", d.samples.len()),
        });
    }
    Ok((s.samples, d.samples))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// mix
// ---------------------------------------------------------------------------

#[derive(Args)]
struct MixArgs {
    /// Clean speech WAV (16 kHz mono PCM16)
    #[arg(long, requires = "noise", conflicts_with = "manifest")]
    speech: Option<PathBuf>,
    /// Noise WAV, at least as long as the speech
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Target active-speech-to-noise ratio in dB
    #[arg(long, default_value_t = 5.0)]
    snr: f64,
    /// Seed for the noise excerpt position
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON manifest of mixing jobs, instead of a single --speech/--noise pair
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output WAV (single pair) or output directory (manifest)
    #[arg(long)]
    out: PathBuf,
    /// Peak headroom in dB: the mixture is scaled down if its peak would
    /// come closer to full scale than this
    #[arg(long, default_value_t = 3.0)]
    headroom: f64,
    /// Also write the exact speech and noise components next to each mixture
    #[arg(long)]
    components: bool,
    /// Machine-readable output
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct MixSummary {
    mixture: PathBuf,
    snr_db: f64,
    seed: u64,
    speech_level_db: f64,
    noise_gain: f64,
    noise_offset: usize,
    /// Post-mix scale applied to keep the requested headroom (1.0 = none).
    peak_scale: f64,
    clipped_samples: usize,
}

fn write_mix(
    result: &maskloss::signal::MixResult,
    out: &Path,
    headroom_db: f64,
    components: bool,
    snr_db: f64,
    seed: u64,
) -> Result<MixSummary> {
    let limit = 10f64.powf(-headroom_db / 20.0);
    let peak = result.mixture.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = if peak > limit { limit / peak } else { 1.0 };
    let scaled = |x: &[f64]| SignalBuffer {
        samples: x.iter().map(|v| v * scale).collect(),
        sample_rate: maskloss::signal::SAMPLE_RATE,
    };
    let clipped = scaled(&result.mixture).to_wav(out)?;
    if components {
        scaled(&result.speech).to_wav(sibling(out, "speech"))?;
        scaled(&result.noise).to_wav(sibling(out, "noise"))?;
    }
    Ok(MixSummary {
        mixture: out.to_path_buf(),
        snr_db,
        seed,
        speech_level_db: result.speech_level_db,
        noise_gain: result.gain,
        noise_offset: result.offset,
        peak_scale: scale,
        clipped_samples: clipped,
    })
}

/// `mix.wav` -> `mix.speech.wav` and friends.
fn sibling(path: &Path, tag: &str) -> PathBuf {
    path.with_extension(format!("{tag}.wav"))
}

fn run_mix(args: MixArgs) -> Result<()> {
    let mut summaries = Vec::new();
    match (&args.manifest, &args.speech, &args.noise) {
        (Some(manifest), None, None) => {
            std::fs::create_dir_all(&args.out)?;
            for (i, spec) in read_mix_manifest(manifest)?.iter().enumerate() {
                let speech = SignalBuffer::from_wav(&spec.speech)?;
                let noise = SignalBuffer::from_wav(&spec.noise)?;
                let result = mix_at_snr(&speech.samples, &noise.samples, spec.snr_db, spec.seed)?;
                let out = args.out.join(format!("{i:03}.mix.wav"));
                summaries.push(write_mix(
                    &result,
                    &out,
                    args.headroom,
                    args.components,
                    spec.snr_db,
                    spec.seed,
                )?);
            }
        }
        (None, Some(speech), Some(noise)) => {
            let s = SignalBuffer::from_wav(speech)?;
            let d = SignalBuffer::from_wav(noise)?;
            let result = mix_at_snr(&s.samples, &d.samples, args.snr, args.seed)?;
            summaries.push(write_mix(
                &result,
                &args.out,
                args.headroom,
                args.components,
                args.snr,
                args.seed,
            )?);
        }
        _ => {
            return Err(Error::InvalidConfig(
                "pass either --manifest or both --speech and --noise".into(),
            ))
        }
    }
    if args.json {
        print_json(&summaries)?;
    } else {
        for m in &summaries {
            println!(
                "{}: snr {:+.1} dB, speech level {:.1} dB, noise gain {:.4e}, offset {}, peak scale {:.3}, clipped {}",
                m.mixture.display(),
                m.snr_db,
                m.speech_level_db,
                m.noise_gain,
                m.noise_offset,
                m.peak_scale,
                m.clipped_samples
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

#[derive(Args)]
struct LossArgs {
    /// Clean speech WAV
    #[arg(long)]
    speech: PathBuf,
    /// Noise WAV, sample-aligned with the speech
    #[arg(long)]
    noise: PathBuf,
    /// Mask CSV (frames x bins); defaults to the all-ones passthrough mask
    #[arg(long, conflicts_with = "closed_form")]
    mask: Option<PathBuf>,
    /// Grade the closed-form two-component mask instead of --mask
    #[arg(long)]
    closed_form: bool,
    /// Loss to evaluate (mse, 2cl, 3cl, pw-filt, pw-pesq, pw-stoi); all six
    /// when omitted
    #[arg(long)]
    kind: Option<String>,
    /// Weight preset: "2cl" (default) or "3cl"
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// JSON file with {stft, weights, optimize} overrides
    #[arg(long)]
    config: Option<PathBuf>,
    /// Machine-readable output
    #[arg(long)]
    json: bool,
}

fn weights_preset(name: &str) -> Result<LossWeights> {
    match name {
        "2cl" => Ok(LossWeights::for_2cl()),
        "3cl" => Ok(LossWeights::for_3cl()),
        other => Err(Error::InvalidConfig(format!(
            "unknown weight preset '{other}' (expected 2cl or 3cl)"
        ))),
    }
}

#[derive(Serialize)]
struct LossReport {
    frames: usize,
    bins: usize,
    weights: LossWeights,
    losses: Vec<LossLine>,
}

#[derive(Serialize)]
struct LossLine {
    kind: LossKind,
    total: f64,
    graded_frames: usize,
}

fn run_loss(args: LossArgs) -> Result<()> {
    let mut cfg: PipelineConfig = load_or_default(&args.config)?;
    if let Some(preset) = &args.preset {
        cfg.weights = weights_preset(preset)?;
    }
    let (s_time, d_time) = read_pair(&args.speech, &args.noise)?;
    let s = stft::analyze(&s_time, &cfg.stft)?;
    let d = stft::analyze(&d_time, &cfg.stft)?;
    let ctx = LossContext::new(&s_time, &s, &d, cfg.weights)?;
    let mask = match (&args.mask, args.closed_form) {
        (Some(path), _) => read_mask_csv(path)?,
        (None, true) => ctx.closed_form_2cl(),
        (None, false) => Matrix::filled(ctx.frames(), ctx.half_bins(), 1.0),
    };
    let kinds: Vec<LossKind> = match &args.kind {
        Some(k) => vec![parse_kind(k)?],
        None => LossKind::ALL.to_vec(),
    };
    let mut report = LossReport {
        frames: ctx.frames(),
        bins: ctx.half_bins(),
        weights: *ctx.weights(),
        losses: Vec::new(),
    };
    for kind in kinds {
        let res = ctx.evaluate(kind, &mask)?;
        report.losses.push(LossLine { kind, total: res.total, graded_frames: res.per_frame.len() });
    }
    if args.json {
        print_json(&report)?;
    } else {
        let w = &report.weights;
        println!(
            "frames {}, bins {} | alpha {}, beta {}, lambda ({}, {}), theta ({}, {})",
            report.frames, report.bins, w.alpha, w.beta, w.lambda1, w.lambda2, w.theta1, w.theta2
        );
        for line in &report.losses {
            println!(
                "{:8} {:>14.8}  over {} frames",
                line.kind.name(),
                line.total,
                line.graded_frames
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    /// Fixture seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Finite-difference step
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    step: f64,
    /// Check a single loss instead of all six
    #[arg(long)]
    kind: Option<String>,
    /// Machine-readable output
    #[arg(long)]
    json: bool,
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let kinds: Vec<LossKind> = match &args.kind {
        Some(k) => vec![parse_kind(k)?],
        None => LossKind::ALL.to_vec(),
    };
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for kind in kinds {
        let weights = match kind {
            LossKind::Cl3 => LossWeights::for_3cl(),
            _ => LossWeights::for_2cl(),
        };
        let (ctx, mask) = standard_fixture(weights, args.seed)?;
        reports.push(check_gradients(kind, &ctx, &mask, args.step)?);
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if args.json {
        print_json(&reports)?;
    } else {
        for r in &reports {
            println!("{r}");
        }
        println!("{}/{} losses passed", reports.len() - failed, reports.len());
    }
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// optimize
// ---------------------------------------------------------------------------

#[derive(Args)]
struct OptimizeArgs {
    /// Clean speech WAV
    #[arg(long)]
    speech: PathBuf,
    /// Noise WAV, sample-aligned with the speech
    #[arg(long)]
    noise: PathBuf,
    /// Loss to minimize (mse, 2cl, 3cl, pw-filt, pw-pesq, pw-stoi)
    #[arg(long)]
    kind: String,
    /// Where to write the optimized mask CSV
    #[arg(long)]
    out: PathBuf,
    /// Weight preset: "2cl" (default) or "3cl"
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// JSON file with {stft, weights, optimize} overrides
    #[arg(long)]
    config: Option<PathBuf>,
    /// Iteration budget (overrides the config file)
    #[arg(long)]
    iters: Option<usize>,
    /// Initial step size (overrides the config file)
    #[arg(long)]
    step: Option<f64>,
    /// Also run the instrumental metrics on the optimized mask
    #[arg(long)]
    metrics: bool,
    /// Machine-readable output
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct OptimizeReport {
    kind: LossKind,
    initial_objective: f64,
    final_objective: f64,
    iterations: usize,
    converged: bool,
    mask_path: PathBuf,
    metrics: Option<MetricReport>,
}

fn run_optimize(args: OptimizeArgs) -> Result<()> {
    let mut cfg: PipelineConfig = load_or_default(&args.config)?;
    if let Some(preset) = &args.preset {
        cfg.weights = weights_preset(preset)?;
    }
    if let Some(iters) = args.iters {
        cfg.optimize.max_iters = iters;
    }
    if let Some(step) = args.step {
        cfg.optimize.step = step;
    }
    let kind = parse_kind(&args.kind)?;
    let (s_time, d_time) = read_pair(&args.speech, &args.noise)?;
    let s = stft::analyze(&s_time, &cfg.stft)?;
    let d = stft::analyze(&d_time, &cfg.stft)?;
    let ctx = LossContext::new(&s_time, &s, &d, cfg.weights)?;
    let (mask, trace) = optimize_mask(kind, &ctx, &cfg.optimize)?;
    write_mask_csv(&args.out, &mask)?;
    let metrics =
        if args.metrics { Some(evaluate_mask(&s_time, &d_time, &mask, &cfg.stft)?) } else { None };
    let report = OptimizeReport {
        kind,
        initial_objective: *trace.objective.first().unwrap(),
        final_objective: *trace.objective.last().unwrap(),
        iterations: trace.iterations,
        converged: trace.converged,
        mask_path: args.out.clone(),
        metrics,
    };
    if args.json {
        print_json(&report)?;
    } else {
        println!(
            "{}: objective {:.6e} -> {:.6e} in {} iterations ({})",
            report.kind.name(),
            report.initial_objective,
            report.final_objective,
            report.iterations,
            if report.converged { "converged" } else { "budget exhausted" }
        );
        println!("mask written to {}", report.mask_path.display());
        if let Some(m) = &report.metrics {
            print_metrics(m);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// JSON manifest of {speech, noise, snr_db, seed} mixing jobs; each job
    /// becomes one training utterance
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the trained model checkpoint (JSON)
    #[arg(long)]
    out: PathBuf,
    /// JSON file with {stft, train} overrides
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss to train against (overrides the config file; also selects the
    /// matching weight preset when no config file is given)
    #[arg(long)]
    kind: Option<String>,
    /// Epochs (overrides the config file)
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate (overrides the config file)
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for weights and batch order (overrides the config file)
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-epoch history as JSON
    #[arg(long)]
    history: Option<PathBuf>,
    /// Machine-readable output
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct TrainReport {
    utterances: usize,
    kind: LossKind,
    epochs: usize,
    final_train_loss: f64,
    final_val_loss: f64,
    model_path: PathBuf,
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainFileConfig = load_or_default(&args.config)?;
    if let Some(kind) = &args.kind {
        cfg.train.kind = parse_kind(kind)?;
        if args.config.is_none() {
            cfg.train.weights = match cfg.train.kind {
                LossKind::Cl3 => LossWeights::for_3cl(),
                _ => LossWeights::for_2cl(),
            };
        }
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let mut utterances = Vec::new();
    for spec in read_mix_manifest(&args.manifest)? {
        let speech = SignalBuffer::from_wav(&spec.speech)?;
        let noise = SignalBuffer::from_wav(&spec.noise)?;
        let mixed = mix_at_snr(&speech.samples, &noise.samples, spec.snr_db, spec.seed)?;
        utterances.push(Utterance { speech: mixed.speech, noise: mixed.noise });
    }
    let outcome = mlp_train(&utterances, &cfg.stft, &cfg.train)?;
    outcome.model.save_checkpoint(&args.out)?;
    if let Some(path) = &args.history {
        std::fs::write(path, serde_json::to_string_pretty(&outcome.history)?)?;
    }
    let last = outcome.history.last().expect("at least one epoch");
    let report = TrainReport {
        utterances: utterances.len(),
        kind: cfg.train.kind,
        epochs: outcome.history.len(),
        final_train_loss: last.train_loss,
        final_val_loss: last.val_loss,
        model_path: args.out.clone(),
    };
    if args.json {
        print_json(&report)?;
    } else {
        for e in &outcome.history {
            println!(
                "epoch {:3}  train {:.6e}  val {:.6e}  lr {:.2e}",
                e.epoch, e.train_loss, e.val_loss, e.lr
            );
        }
        println!(
            "trained {} on {} utterances; model written to {}",
            report.kind.name(),
            report.utterances,
            report.model_path.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvaluateArgs {
    /// Clean speech WAV
    #[arg(long)]
    speech: PathBuf,
    /// Noise WAV, sample-aligned with the speech
    #[arg(long)]
    noise: PathBuf,
    /// Mask CSV to grade
    #[arg(long, conflicts_with_all = ["model", "closed_form"])]
    mask: Option<PathBuf>,
    /// Trained model checkpoint; the mask is predicted from the mixture
    #[arg(long, conflicts_with = "closed_form")]
    model: Option<PathBuf>,
    /// Grade the closed-form two-component mask
    #[arg(long)]
    closed_form: bool,
    /// Weight preset: "2cl" (default) or "3cl"
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// JSON file with {stft, weights, optimize} overrides
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the enhanced speech estimate as WAV
    #[arg(long)]
    out_wav: Option<PathBuf>,
    /// Write the mask that was graded (useful with --model/--closed-form)
    #[arg(long)]
    out_mask: Option<PathBuf>,
    /// Machine-readable output
    #[arg(long)]
    json: bool,
}

fn print_metrics(m: &MetricReport) {
    println!("delta-snr   {:>9.3} dB", m.delta_snr_db);
    println!("ssdr        {:>9.3} dB", m.ssdr_db);
    println!("noise-atten {:>9.3} dB", m.noise_attenuation_db);
    println!("wlakr       {:>9.4}", m.wlakr);
    println!("stoi-proxy  {:>9.4}", m.stoi_proxy);
    println!("align-lag   {:>6} samples", m.align_lag);
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut cfg: PipelineConfig = load_or_default(&args.config)?;
    if let Some(preset) = &args.preset {
        cfg.weights = weights_preset(preset)?;
    }
    let (s_time, d_time) = read_pair(&args.speech, &args.noise)?;
    let s = stft::analyze(&s_time, &cfg.stft)?;
    let d = stft::analyze(&d_time, &cfg.stft)?;
    let mask = match (&args.mask, &args.model, args.closed_form) {
        (Some(path), None, false) => read_mask_csv(path)?,
        (None, Some(path), false) => {
            let model = MlpMaskModel::load_checkpoint(path)?;
            if model.config().input_bins != cfg.stft.extended_bins
                || model.output_bins() != cfg.stft.half_bins()
            {
                return Err(Error::InvalidConfig(format!(
                    "model expects {} feature bins / {} mask bins but the analysis yields {} / {}",
                    model.config().input_bins,
                    model.output_bins(),
                    cfg.stft.extended_bins,
                    cfg.stft.half_bins()
                )));
            }
            let mixture = stft::add_frames(&s, &d)?;
            model.predict_mask(&mixture_features(&mixture))?
        }
        (None, None, true) => {
            let ctx = LossContext::new(&s_time, &s, &d, cfg.weights)?;
            ctx.closed_form_2cl()
        }
        _ => {
            return Err(Error::InvalidConfig(
                "pass exactly one of --mask, --model, or --closed-form".into(),
            ))
        }
    };
    let report = evaluate_mask(&s_time, &d_time, &mask, &cfg.stft)?;
    if let Some(path) = &args.out_mask {
        write_mask_csv(path, &mask)?;
    }
    if let Some(path) = &args.out_wav {
        let bundle = apply_mask(&s, &d, None, &mask)?;
        let (s_hat, _, _) = bundle.to_time()?;
        let clipped = SignalBuffer {
            samples: s_hat,
            sample_rate: maskloss::signal::SAMPLE_RATE,
        }
        .to_wav(path)?;
        if clipped > 0 {
            eprintln!("warning: {clipped} samples clipped writing {}", path.display());
        }
    }
    if args.json {
        print_json(&report)?;
    } else {
        print_metrics(&report);
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mix(args) => run_mix(args),
        Command::Loss(args) => run_loss(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::Optimize(args) => run_optimize(args),
        Command::Train(args) => run_train(args),
        Command::Evaluate(args) => run_evaluate(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
