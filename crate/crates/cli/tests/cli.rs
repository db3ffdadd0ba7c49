//! End-to-end tests of the `maskloss` binary: every subcommand is driven
//! through real WAV files in a temp directory and checked on its stdout,
//! exit status, and written artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskloss::components::read_mask_csv;
use maskloss::metrics::active_speech_level;
use maskloss::signal::{SignalBuffer, SAMPLE_RATE};
use maskloss::synth;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_maskloss"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary should launch");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_of(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout should be one JSON document")
}

fn write_wav(path: &Path, samples: Vec<f64>) {
    SignalBuffer { samples, sample_rate: SAMPLE_RATE }.to_wav(path).unwrap();
}

/// A sample-aligned 1 s speech/noise pair, written as WAVs.
fn aligned_pair(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let speech = dir.join("speech.wav");
    let noise = dir.join("noise.wav");
    write_wav(&speech, synth::speech_like(16_000, seed));
    write_wav(&noise, synth::white_noise(16_000, seed + 1, 0.02));
    (speech, noise)
}

fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[test]
fn mix_hits_the_requested_snr_and_writes_components() {
    let dir = tempfile::tempdir().unwrap();
    let speech = dir.path().join("s.wav");
    let noise = dir.path().join("n.wav");
    write_wav(&speech, synth::speech_like(32_000, 5));
    write_wav(&noise, synth::white_noise(48_000, 6, 0.1));
    let mix = dir.path().join("mix.wav");

    let out = run_ok(bin().args([
        "mix",
        "--speech",
        speech.to_str().unwrap(),
        "--noise",
        noise.to_str().unwrap(),
        "--snr",
        "4.0",
        "--seed",
        "3",
        "--out",
        mix.to_str().unwrap(),
        "--components",
        "--json",
    ]));
    let summary = json_of(&out);
    assert_eq!(summary[0]["snr_db"], 4.0);
    assert_eq!(summary[0]["clipped_samples"], 0);

    let mixture = SignalBuffer::from_wav(&mix).unwrap().samples;
    let s = SignalBuffer::from_wav(dir.path().join("mix.speech.wav")).unwrap().samples;
    let d = SignalBuffer::from_wav(dir.path().join("mix.noise.wav")).unwrap().samples;
    assert_eq!(mixture.len(), 32_000);

    // Components written by the tool must sum to the mixture up to PCM
    // quantization of the three files.
    let worst = mixture
        .iter()
        .zip(s.iter().zip(&d))
        .map(|(m, (a, b))| (m - a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(worst <= 1.5 / 32768.0, "additivity broken by {worst}");

    // And the achieved SNR (active speech level over mean noise power) must
    // match the request to well under a dB.
    let asl = active_speech_level(&s).unwrap();
    let snr = asl - 10.0 * mean_power(&d).log10();
    assert!((snr - 4.0).abs() < 0.1, "achieved snr {snr}");
}

#[test]
fn mix_manifest_produces_one_mixture_per_job() {
    let dir = tempfile::tempdir().unwrap();
    let speech = dir.path().join("s.wav");
    let noise = dir.path().join("n.wav");
    write_wav(&speech, synth::speech_like(16_000, 7));
    write_wav(&noise, synth::white_noise(32_000, 8, 0.05));
    let manifest = dir.path().join("jobs.json");
    std::fs::write(
        &manifest,
        serde_json::json!([
            {"speech": speech, "noise": noise, "snr_db": 10.0, "seed": 1},
            {"speech": speech, "noise": noise, "snr_db": 0.0, "seed": 2},
        ])
        .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("mixes");

    let out = run_ok(bin().args([
        "mix",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--json",
    ]));
    let summary = json_of(&out);
    assert_eq!(summary.as_array().unwrap().len(), 2);
    assert!(out_dir.join("000.mix.wav").is_file());
    assert!(out_dir.join("001.mix.wav").is_file());
    // Lower SNR means more noise gain for the same pair.
    let g0 = summary[0]["noise_gain"].as_f64().unwrap();
    let g1 = summary[1]["noise_gain"].as_f64().unwrap();
    assert!(g1 > g0, "0 dB job should use more noise than 10 dB job: {g1} vs {g0}");
}

#[test]
fn gradcheck_passes_and_reports_json() {
    let out = run_ok(bin().args(["gradcheck", "--seed", "2", "--json"]));
    let reports = json_of(&out);
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 6);
    for r in reports {
        assert_eq!(r["passed"], true, "{r}");
        assert_eq!(r["failures"], 0, "{r}");
    }
}

#[test]
fn loss_grades_closed_form_better_than_passthrough() {
    let dir = tempfile::tempdir().unwrap();
    let (speech, noise) = aligned_pair(dir.path(), 20);

    let unit = json_of(&run_ok(bin().args([
        "loss",
        "--speech",
        speech.to_str().unwrap(),
        "--noise",
        noise.to_str().unwrap(),
        "--json",
    ])));
    let closed = json_of(&run_ok(bin().args([
        "loss",
        "--speech",
        speech.to_str().unwrap(),
        "--noise",
        noise.to_str().unwrap(),
        "--closed-form",
        "--json",
    ])));
    let total = |doc: &serde_json::Value, kind: &str| -> f64 {
        doc["losses"]
            .as_array()
            .unwrap()
            .iter()
            .find(|l| l["kind"] == kind)
            .unwrap_or_else(|| panic!("kind {kind} missing"))["total"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(unit["losses"].as_array().unwrap().len(), 6);
    for kind in ["mse", "2cl", "3cl", "pw-filt", "pw-pesq", "pw-stoi"] {
        assert!(total(&unit, kind).is_finite());
    }
    assert!(
        total(&closed, "2cl") < total(&unit, "2cl"),
        "closed form must beat passthrough on its own objective"
    );

    // Single-kind selection works too.
    let single = json_of(&run_ok(bin().args([
        "loss",
        "--speech",
        speech.to_str().unwrap(),
        "--noise",
        noise.to_str().unwrap(),
        "--kind",
        "pw-stoi",
        "--json",
    ])));
    assert_eq!(single["losses"].as_array().unwrap().len(), 1);
    assert_eq!(single["losses"][0]["kind"], "pw-stoi");
}

#[test]
fn optimize_then_evaluate_improves_the_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let (speech, noise) = aligned_pair(dir.path(), 30);
    let mask_csv = dir.path().join("mask.csv");

    let opt = json_of(&run_ok(bin().args([
        "optimize",
        "--speech",
        speech.to_str().unwrap(),
        "--noise",
        noise.to_str().unwrap(),
        "--kind",
        "2cl",
        "--iters",
        "300",
        "--out",
        mask_csv.to_str().unwrap(),
        "--json",
    ])));
    let initial = opt["initial_objective"].as_f64().unwrap();
    let final_ = opt["final_objective"].as_f64().unwrap();
    assert!(final_ < initial, "optimization must descend: {initial} -> {final_}");
    assert!(mask_csv.is_file());

    let enhanced = dir.path().join("enhanced.wav");
    let eval = json_of(&run_ok(bin().args([
        "evaluate",
        "--speech",
        speech.to_str().unwrap(),
        "--noise",
        noise.to_str().unwrap(),
        "--mask",
        mask_csv.to_str().unwrap(),
        "--out-wav",
        enhanced.to_str().unwrap(),
        "--json",
    ])));
    assert!(eval["delta_snr_db"].as_f64().unwrap() > 0.0, "{eval}");
    assert!(eval["stoi_proxy"].as_f64().unwrap() > 0.5, "{eval}");
    let wav = SignalBuffer::from_wav(&enhanced).unwrap();
    assert_eq!(wav.samples.len(), 16_000);
}

#[test]
fn train_writes_a_model_the_evaluator_can_use() {
    let dir = tempfile::tempdir().unwrap();
    let speech_a = dir.path().join("sa.wav");
    let speech_b = dir.path().join("sb.wav");
    let noise = dir.path().join("n.wav");
    write_wav(&speech_a, synth::speech_like(16_000, 40));
    write_wav(&speech_b, synth::speech_like(16_000, 41));
    write_wav(&noise, synth::white_noise(24_000, 42, 0.05));
    let manifest = dir.path().join("train.json");
    std::fs::write(
        &manifest,
        serde_json::json!([
            {"speech": speech_a, "noise": noise, "snr_db": 5.0, "seed": 1},
            {"speech": speech_b, "noise": noise, "snr_db": 0.0, "seed": 2},
        ])
        .to_string(),
    )
    .unwrap();
    let config = dir.path().join("train-config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "train": {"mlp": {"hidden": [32], "context": 3}, "lr": 0.005, "minibatch": 64}
        })
        .to_string(),
    )
    .unwrap();
    let model = dir.path().join("model.json");
    let history = dir.path().join("history.json");

    let report = json_of(&run_ok(bin().args([
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--kind",
        "2cl",
        "--epochs",
        "3",
        "--out",
        model.to_str().unwrap(),
        "--history",
        history.to_str().unwrap(),
        "--json",
    ])));
    assert_eq!(report["epochs"], 3);
    assert_eq!(report["kind"], "2cl");
    assert!(report["final_train_loss"].as_f64().unwrap().is_finite());
    let hist: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&history).unwrap()).unwrap();
    assert_eq!(hist.as_array().unwrap().len(), 3);

    // The checkpoint drives the evaluator, and its predicted mask is a
    // proper soft mask.
    let (speech, noise_aligned) = aligned_pair(dir.path(), 50);
    let out_mask = dir.path().join("model-mask.csv");
    let eval = json_of(&run_ok(bin().args([
        "evaluate",
        "--speech",
        speech.to_str().unwrap(),
        "--noise",
        noise_aligned.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out-mask",
        out_mask.to_str().unwrap(),
        "--json",
    ])));
    for key in ["delta_snr_db", "ssdr_db", "noise_attenuation_db", "wlakr", "stoi_proxy"] {
        assert!(eval[key].as_f64().unwrap().is_finite(), "{key} not finite: {eval}");
    }
    let mask = read_mask_csv(&out_mask).unwrap();
    assert_eq!(mask.cols(), 129);
    for &m in mask.data() {
        assert!(m > 0.0 && m < 1.0, "model mask entry {m} outside (0, 1)");
    }
}

#[test]
fn evaluate_supports_the_closed_form_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (speech, noise) = aligned_pair(dir.path(), 60);
    let eval = json_of(&run_ok(bin().args([
        "evaluate",
        "--speech",
        speech.to_str().unwrap(),
        "--noise",
        noise.to_str().unwrap(),
        "--closed-form",
        "--json",
    ])));
    assert!(eval["delta_snr_db"].as_f64().unwrap() > 0.0, "{eval}");
}

#[test]
fn errors_surface_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let speech = dir.path().join("s.wav");
    let short = dir.path().join("short.wav");
    write_wav(&speech, synth::speech_like(16_000, 70));
    write_wav(&short, synth::white_noise(8_000, 71, 0.05));

    // Mismatched lengths are refused with a hint.
    let out = bin()
        .args([
            "loss",
            "--speech",
            speech.to_str().unwrap(),
            "--noise",
            short.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("maskloss mix"), "unhelpful error: {stderr}");

    // Missing files are refused.
    let out = bin()
        .args([
            "evaluate",
            "--speech",
            dir.path().join("nope.wav").to_str().unwrap(),
            "--noise",
            speech.to_str().unwrap(),
            "--closed-form",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Unknown loss names are refused.
    let out = bin()
        .args([
            "loss",
            "--speech",
            speech.to_str().unwrap(),
            "--noise",
            speech.to_str().unwrap(),
            "--kind",
            "4cl",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Clap usage errors keep its conventional exit code.
    let out = bin().args(["mix", "--snr", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
