//! Full-path integration: mixture construction, loss-driven mask search,
//! white-box resynthesis with instrumental grading, and model training with
//! a checkpoint round trip — all through the public API.

use maskloss::components::apply_mask;
use maskloss::losses::{LossContext, LossKind, LossWeights};
use maskloss::metrics::evaluate_mask;
use maskloss::signal::mix_at_snr;
use maskloss::stft::{analyze, StftConfig};
use maskloss::trainer::{
    mixture_features, mlp_train, optimize_mask, MlpMaskModel, OptimizeConfig, TrainConfig,
    Utterance,
};
use maskloss::{synth, Matrix};

#[test]
fn optimizer_pipeline_cleans_a_mixture_and_keeps_components_additive() {
    let cfg = StftConfig::default();
    let speech = synth::speech_like(12000, 1);
    let noise = synth::white_noise(30000, 2, 0.3);
    let mixed = mix_at_snr(&speech, &noise, 5.0, 3).unwrap();

    let s = analyze(&mixed.speech, &cfg).unwrap();
    let d = analyze(&mixed.noise, &cfg).unwrap();
    let y = analyze(&mixed.mixture, &cfg).unwrap();
    let ctx =
        LossContext::new(&mixed.speech, &s, &d, LossWeights::for_3cl()).unwrap();

    let opt_cfg = OptimizeConfig { max_iters: 300, ..Default::default() };
    let (mask, trace) = optimize_mask(LossKind::Cl3, &ctx, &opt_cfg).unwrap();
    assert!(
        trace.objective.last().unwrap() < &trace.objective[0],
        "optimizer made no progress: {:?}",
        &trace.objective[..2.min(trace.objective.len())]
    );

    // The mixture passes the additivity check and splits exactly.
    let bundle = apply_mask(&s, &d, Some(&y), &mask).unwrap();
    for l in [0, bundle.mask.rows() / 2] {
        for k in 0..cfg.dft_size {
            let sum = bundle.s_tilde.row(l)[k] + bundle.d_tilde.row(l)[k];
            assert_eq!(bundle.s_hat.row(l)[k], sum, "spectral split broken at ({l},{k})");
        }
    }
    let (s_hat, s_tilde, d_tilde) = bundle.to_time().unwrap();
    let mut worst = 0.0f64;
    for n in 0..s_hat.len() {
        worst = worst.max((s_hat[n] - (s_tilde[n] + d_tilde[n])).abs());
    }
    assert!(worst < 1e-10, "time-domain additivity off by {worst:.3e}");

    // The searched mask must beat a passthrough on the instrumental report.
    let frames = s.num_frames();
    let unit = Matrix::filled(frames, cfg.half_bins(), 1.0);
    let graded = evaluate_mask(&mixed.speech, &mixed.noise, &mask, &cfg).unwrap();
    let passthrough = evaluate_mask(&mixed.speech, &mixed.noise, &unit, &cfg).unwrap();
    assert!(
        graded.delta_snr_db > passthrough.delta_snr_db + 1.0,
        "expected a clear SNR win: {} vs {}",
        graded.delta_snr_db,
        passthrough.delta_snr_db
    );
    assert!(graded.noise_attenuation_db > 1.0, "{}", graded.noise_attenuation_db);
    assert!(graded.ssdr_db > 0.0, "{}", graded.ssdr_db);
}

#[test]
fn training_pipeline_roundtrips_checkpoints_bit_exactly() {
    let cfg = StftConfig::default();
    let utterances: Vec<Utterance> = (0..4)
        .map(|i| Utterance {
            speech: synth::speech_like(8000, 40 + i),
            noise: synth::white_noise(8000, 50 + i, 0.06),
        })
        .collect();
    let train_cfg = TrainConfig { epochs: 12, seed: 5, ..Default::default() };
    let outcome = mlp_train(&utterances, &cfg, &train_cfg).unwrap();
    assert_eq!(outcome.history.len(), 12);
    assert!(
        outcome.history.last().unwrap().val_loss < outcome.history[0].val_loss,
        "validation loss should drop over a dozen epochs"
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    outcome.model.save_checkpoint(&path).unwrap();
    let restored = MlpMaskModel::load_checkpoint(&path).unwrap();

    let s = synth::speech_like(9000, 60);
    let d = synth::white_noise(9000, 61, 0.06);
    let y: Vec<f64> = s.iter().zip(&d).map(|(a, b)| a + b).collect();
    let features = mixture_features(&analyze(&y, &cfg).unwrap());
    let before = outcome.model.predict_mask(&features).unwrap();
    let after = restored.predict_mask(&features).unwrap();
    assert_eq!(before.rows(), after.rows());
    for l in 0..before.rows() {
        for k in 0..before.cols() {
            let (a, b) = (before.get(l, k), after.get(l, k));
            assert_eq!(a.to_bits(), b.to_bits(), "restored model differs at ({l},{k})");
            assert!(a > 0.0 && a < 1.0, "mask out of range at ({l},{k}): {a}");
        }
    }

    // The restored model's mask feeds straight into the grading path.
    let report = evaluate_mask(&s, &d, &after, &cfg).unwrap();
    assert!(report.ssdr_db.is_finite() && report.wlakr.is_finite());
}
