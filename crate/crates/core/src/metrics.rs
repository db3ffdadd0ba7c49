//! Instrumental metrics for graded masks: SNR improvement, segmental speech
//! distortion, noise attenuation, residual-noise kurtosis shift, and an
//! envelope-correlation intelligibility proxy.
//!
//! Time-domain metrics frame the signals with 256-sample windows hopped by
//! 128, rectangular and fully inside the signal (no padding). Levels are
//! referenced to the active speech level, measured with a two-stage envelope
//! smoother, a ladder of 15 halving thresholds with a 200 ms hangover, and a
//! 15.9 dB margin between the level and the threshold that gates it.

use serde::{Deserialize, Serialize};

use crate::components::apply_mask;
use crate::error::{Error, Result};
use crate::losses::{ENVELOPE_SEGMENT_FRAMES, OCTAVE_BANDS};
use crate::matrix::Matrix;
use crate::perceptual::one_third_octave_bands;
use crate::signal::SAMPLE_RATE;
use crate::stft::{analyze, StftConfig};

/// Rectangular analysis frame of the time-domain metrics, samples.
pub const METRIC_FRAME: usize = 256;
/// Hop between metric frames, samples.
pub const METRIC_SHIFT: usize = 128;
/// Largest alignment shift searched, samples either way.
pub const MAX_ALIGN_LAG: isize = 64;
/// Margin between active level and gating threshold, dB.
const ACTIVITY_MARGIN_DB: f64 = 15.9;
/// How far below the active speech level a frame may sit and still count as
/// speech-active, dB.
const ACTIVE_FRAME_RANGE_DB: f64 = 35.0;
/// Hangover that keeps activity alive across short dips, seconds.
const HANGOVER_SECS: f64 = 0.2;
/// Number of halving thresholds in the activity ladder.
const NUM_THRESHOLDS: usize = 15;
/// Caps (and floors, negated) the per-frame speech distortion ratio, dB.
const SSDR_CAP_DB: f64 = 30.0;
const SSDR_FLOOR_DB: f64 = -10.0;
/// Caps the per-frame noise attenuation power ratio.
const NA_RATIO_CAP: f64 = 1e12;
/// Frames whose noise energy falls this far below the loudest frame are
/// excluded from the kurtosis statistic.
const KURTOSIS_ENERGY_FLOOR: f64 = 1e-4;

/// Active speech level in dB (of mean-square amplitude, full scale = 0 dB).
///
/// A two-stage exponential envelope (30 ms time constant) is compared
/// against thresholds `2^-(j+1)`; each threshold keeps a sample active for
/// 200 ms after the envelope drops below it. The level is read off where the
/// gap between the active level and the threshold crosses 15.9 dB, linearly
/// interpolated between neighboring thresholds.
pub fn active_speech_level(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::SilentSpeech);
    }
    let g = (-1.0 / (SAMPLE_RATE as f64 * 0.03)).exp();
    let hangover = (HANGOVER_SECS * SAMPLE_RATE as f64).round() as u64;
    let thresholds: Vec<f64> = (0..NUM_THRESHOLDS).map(|j| 2f64.powi(-(j as i32) - 1)).collect();
    let mut activity = [0u64; NUM_THRESHOLDS];
    let mut hang = [u64::MAX; NUM_THRESHOLDS];
    let mut p = 0.0f64;
    let mut q = 0.0f64;
    let mut sq = 0.0f64;
    for &v in x {
        sq += v * v;
        p = g * p + (1.0 - g) * v.abs();
        q = g * q + (1.0 - g) * p;
        for (j, &c) in thresholds.iter().enumerate() {
            if q >= c {
                activity[j] += 1;
                hang[j] = 0;
            } else if hang[j] < hangover {
                activity[j] += 1;
                hang[j] += 1;
            }
        }
    }
    if sq <= 0.0 {
        return Err(Error::SilentSpeech);
    }
    let mut prev: Option<(f64, f64)> = None; // (delta, level) below the margin
    for j in 0..NUM_THRESHOLDS {
        if activity[j] == 0 {
            continue;
        }
        let level = 10.0 * (sq / activity[j] as f64).log10();
        let delta = level - 20.0 * thresholds[j].log10();
        if delta >= ACTIVITY_MARGIN_DB {
            return Ok(match prev {
                Some((d0, l0)) if delta > d0 => {
                    l0 + (level - l0) * (ACTIVITY_MARGIN_DB - d0) / (delta - d0)
                }
                _ => level,
            });
        }
        prev = Some((delta, level));
    }
    Err(Error::SilentSpeech)
}

fn metric_frame_count(len: usize) -> Result<usize> {
    if len < METRIC_FRAME {
        return Err(Error::TooShort { needed: METRIC_FRAME, got: len });
    }
    Ok((len - METRIC_FRAME) / METRIC_SHIFT + 1)
}

fn sample_shifted(x: &[f64], idx: isize) -> f64 {
    if idx >= 0 && (idx as usize) < x.len() {
        x[idx as usize]
    } else {
        0.0
    }
}

/// Lag (in `-64..=64`) that maximizes the cross-correlation of `shifted`
/// against `reference`; positive means `shifted` lags behind. Ties resolve
/// to the most negative candidate.
pub fn align_lag(reference: &[f64], shifted: &[f64]) -> isize {
    let mut best = f64::NEG_INFINITY;
    let mut best_lag = -MAX_ALIGN_LAG;
    for lag in -MAX_ALIGN_LAG..=MAX_ALIGN_LAG {
        let mut acc = 0.0;
        for (n, &r) in reference.iter().enumerate() {
            acc += r * sample_shifted(shifted, n as isize + lag);
        }
        if acc > best {
            best = acc;
            best_lag = lag;
        }
    }
    best_lag
}

/// SNR improvement in dB: active-speech-to-mean-noise ratio after masking
/// minus the same ratio before.
pub fn delta_snr(s: &[f64], d: &[f64], s_tilde: &[f64], d_tilde: &[f64]) -> Result<f64> {
    let mean_pow = |x: &[f64]| -> Result<f64> {
        if x.is_empty() {
            return Err(Error::SilentNoise);
        }
        let p = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        if p <= 0.0 {
            Err(Error::SilentNoise)
        } else {
            Ok(p)
        }
    };
    let before = active_speech_level(s)? - 10.0 * mean_pow(d)?.log10();
    let after = active_speech_level(s_tilde)? - 10.0 * mean_pow(d_tilde)?.log10();
    Ok(after - before)
}

/// Segmental speech distortion ratio in dB over speech-active frames:
/// `10·log10(Σs² / Σ(s̃(n+Δ) - s(n))²)` per frame, clamped to
/// `[-10 dB, +30 dB]` and capped at 30 for a vanishing error, averaged over
/// frames within 35 dB of the active speech level.
pub fn ssdr(s: &[f64], s_tilde: &[f64]) -> Result<f64> {
    let level = active_speech_level(s)?;
    let frames = metric_frame_count(s.len())?;
    let lag = align_lag(s, s_tilde);
    let mut acc = 0.0;
    let mut active = 0usize;
    for f in 0..frames {
        let start = f * METRIC_SHIFT;
        let frame = &s[start..start + METRIC_FRAME];
        let energy: f64 = frame.iter().map(|v| v * v).sum();
        if energy <= 0.0
            || 10.0 * (energy / METRIC_FRAME as f64).log10() < level - ACTIVE_FRAME_RANGE_DB
        {
            continue;
        }
        let mut err = 0.0;
        for (n, &sv) in frame.iter().enumerate() {
            let e = sample_shifted(s_tilde, (start + n) as isize + lag) - sv;
            err += e * e;
        }
        let frame_db = if err > 0.0 {
            (10.0 * (energy / err).log10()).clamp(SSDR_FLOOR_DB, SSDR_CAP_DB)
        } else {
            SSDR_CAP_DB
        };
        acc += frame_db;
        active += 1;
    }
    if active == 0 {
        return Err(Error::NoActiveFrames);
    }
    Ok(acc / active as f64)
}

/// Segmental noise attenuation in dB: `10·log10` of the mean per-frame power
/// ratio between the original and the residual noise (aligned by `lag`,
/// taken from the speech alignment). A silent frame that stays silent is
/// neutral (ratio 1); attenuation of a silent residual is capped at `1e12`.
pub fn na_seg(d: &[f64], d_tilde: &[f64], lag: isize) -> Result<f64> {
    let frames = metric_frame_count(d.len())?;
    let mut acc = 0.0;
    for f in 0..frames {
        let start = f * METRIC_SHIFT;
        let mut num = 0.0;
        let mut den = 0.0;
        for n in 0..METRIC_FRAME {
            let dv = d[start + n];
            num += dv * dv;
            let rv = sample_shifted(d_tilde, (start + n) as isize + lag);
            den += rv * rv;
        }
        let ratio = if den <= 0.0 {
            if num <= 0.0 {
                1.0
            } else {
                NA_RATIO_CAP
            }
        } else {
            (num / den).min(NA_RATIO_CAP)
        };
        acc += ratio;
    }
    Ok(10.0 * (acc / frames as f64).log10())
}

fn central_moments(frame: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = frame.clone().sum::<f64>() / nf;
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for v in frame {
        let c = v - mean;
        let c2 = c * c;
        m2 += c2;
        m4 += c2 * c2;
    }
    (m2 / nf, m4 / nf)
}

/// Energy-weighted log kurtosis ratio between residual and original noise,
/// reported as a magnitude. Frames more than 40 dB below the loudest noise
/// frame are skipped; a flat frame or vanishing kurtosis is an error, since
/// the log ratio is undefined there.
pub fn wlakr(d: &[f64], d_tilde: &[f64], lag: isize) -> Result<f64> {
    let frames = metric_frame_count(d.len())?;
    let energies: Vec<f64> = (0..frames)
        .map(|f| {
            let start = f * METRIC_SHIFT;
            d[start..start + METRIC_FRAME].iter().map(|v| v * v).sum()
        })
        .collect();
    let max_e = energies.iter().cloned().fold(0.0f64, f64::max);
    let eligible: Vec<usize> =
        (0..frames).filter(|&f| energies[f] >= max_e * KURTOSIS_ENERGY_FLOOR).collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleFrames);
    }
    let total_e: f64 = eligible.iter().map(|&f| energies[f]).sum();
    if total_e <= 0.0 {
        return Err(Error::DegenerateKurtosis { which: "noise", frame: eligible[0] });
    }
    let mut value = 0.0;
    for &f in &eligible {
        let start = f * METRIC_SHIFT;
        let (m2, m4) = central_moments(d[start..start + METRIC_FRAME].iter().copied(), METRIC_FRAME);
        if m2 <= 0.0 {
            return Err(Error::DegenerateKurtosis { which: "noise", frame: f });
        }
        let kurt = m4 / (m2 * m2);
        if kurt < 1e-6 {
            return Err(Error::DegenerateKurtosis { which: "noise", frame: f });
        }
        let shifted = (0..METRIC_FRAME)
            .map(|n| sample_shifted(d_tilde, (start + n) as isize + lag));
        let (r2, r4) = central_moments(shifted, METRIC_FRAME);
        if r2 <= 0.0 {
            return Err(Error::DegenerateKurtosis { which: "residual", frame: f });
        }
        let kurt_r = r4 / (r2 * r2);
        value += energies[f] / total_e * (kurt_r / kurt).ln();
    }
    Ok(value.abs())
}

/// Mean short-time envelope correlation between clean speech and the
/// enhanced signal over one-third-octave bands, clamped to `[0, 1]` per
/// segment and band. Segment/band pairs where either envelope has no
/// variance are skipped; if nothing remains the proxy is 0.
pub fn stoi_proxy(s: &[f64], s_hat: &[f64]) -> Result<f64> {
    let cfg = StftConfig::default();
    let sf = analyze(s, &cfg)?;
    let hf = analyze(s_hat, &cfg)?;
    if !sf.compatible_with(&hf) {
        return Err(Error::ShapeMismatch {
            expected: format!("{} samples", s.len()),
            got: format!("{} samples", s_hat.len()),
        });
    }
    let frames = sf.num_frames();
    let n = ENVELOPE_SEGMENT_FRAMES;
    if frames < n {
        return Err(Error::TooShort { needed: n, got: frames });
    }
    let map = one_third_octave_bands(SAMPLE_RATE as f64, cfg.dft_size, OCTAVE_BANDS)?;
    let ex = map.envelopes(&sf.magnitudes());
    let eh = map.envelopes(&hf.magnitudes());
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for o in 0..frames - n + 1 {
        for b in 0..map.num_bands() {
            let mut mx = 0.0;
            let mut mh = 0.0;
            for i in 0..n {
                mx += ex.get(o + i, b);
                mh += eh.get(o + i, b);
            }
            mx /= n as f64;
            mh /= n as f64;
            let mut xx = 0.0;
            let mut hh = 0.0;
            let mut xh = 0.0;
            for i in 0..n {
                let xc = ex.get(o + i, b) - mx;
                let hc = eh.get(o + i, b) - mh;
                xx += xc * xc;
                hh += hc * hc;
                xh += xc * hc;
            }
            if xx == 0.0 || hh == 0.0 {
                continue;
            }
            acc += (xh / (xx.sqrt() * hh.sqrt())).clamp(0.0, 1.0);
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Ok(0.0);
    }
    Ok(acc / pairs as f64)
}

/// All instrumental metrics for one masked utterance. The optional fields
/// are reserved for scores produced by external evaluation tools and stay
/// `None` here.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub delta_snr_db: f64,
    pub ssdr_db: f64,
    pub noise_attenuation_db: f64,
    pub wlakr: f64,
    pub stoi_proxy: f64,
    pub align_lag: isize,
    /// Reserved: listening-quality score from an external tool.
    pub pesq_mos: Option<f64>,
    /// Reserved: intelligibility score from an external tool.
    pub estoi: Option<f64>,
}

/// Applies `mask` to the components, resynthesizes, and computes the full
/// metric suite. The speech/residual alignment found for the distortion
/// metric is reused for the noise metrics.
pub fn evaluate_mask(
    s: &[f64],
    d: &[f64],
    mask: &Matrix,
    config: &StftConfig,
) -> Result<MetricReport> {
    if s.len() != d.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} speech samples", s.len()),
            got: format!("{} noise samples", d.len()),
        });
    }
    let sf = analyze(s, config)?;
    let df = analyze(d, config)?;
    let bundle = apply_mask(&sf, &df, None, mask)?;
    let (s_hat, s_tilde, d_tilde) = bundle.to_time()?;
    let lag = align_lag(s, &s_tilde);
    Ok(MetricReport {
        delta_snr_db: delta_snr(s, d, &s_tilde, &d_tilde)?,
        ssdr_db: ssdr(s, &s_tilde)?,
        noise_attenuation_db: na_seg(d, &d_tilde, lag)?,
        wlakr: wlakr(d, &d_tilde, lag)?,
        stoi_proxy: stoi_proxy(s, &s_hat)?,
        align_lag: lag,
        pesq_mos: None,
        estoi: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn active_level_of_steady_tone_matches_mean_square() {
        let a = 0.3f64;
        let x: Vec<f64> = (0..32000)
            .map(|n| a * (std::f64::consts::TAU * 1000.0 * n as f64 / 16000.0).sin())
            .collect();
        let level = active_speech_level(&x).unwrap();
        let expected = 10.0 * (a * a / 2.0).log10();
        assert!((level - expected).abs() < 0.15, "{level} vs {expected}");
    }

    #[test]
    fn active_level_ignores_long_silence() {
        let mut speech = synth::speech_like(128_000, 17); // 8 s
        let active_only = active_speech_level(&speech).unwrap();
        speech.extend(std::iter::repeat(0.0).take(128_000)); // + 8 s silence
        let padded = active_speech_level(&speech).unwrap();
        assert!(
            (active_only - padded).abs() < 0.3,
            "active {active_only} dB vs half-silence {padded} dB"
        );
    }

    #[test]
    fn active_level_tracks_gain() {
        let x = synth::speech_like(64_000, 18);
        let x2: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
        let l1 = active_speech_level(&x).unwrap();
        let l2 = active_speech_level(&x2).unwrap();
        assert!((l2 - l1 - 6.0206).abs() < 0.1, "{l1} -> {l2}");
    }

    #[test]
    fn active_level_errors_on_silence() {
        assert!(matches!(active_speech_level(&[0.0; 16000]), Err(Error::SilentSpeech)));
        assert!(matches!(active_speech_level(&[]), Err(Error::SilentSpeech)));
        let faint = vec![1e-7; 16000];
        assert!(matches!(active_speech_level(&faint), Err(Error::SilentSpeech)));
    }

    #[test]
    fn alignment_recovers_integer_shifts() {
        let x = synth::white_noise(8000, 23, 0.2);
        assert_eq!(align_lag(&x, &x), 0);
        for shift in [17isize, -25, 64, -64] {
            let delayed: Vec<f64> = (0..x.len())
                .map(|n| sample_shifted(&x, n as isize - shift))
                .collect();
            assert_eq!(align_lag(&x, &delayed), shift, "shift {shift}");
        }
    }

    #[test]
    fn delta_snr_reflects_noise_scaling() {
        let s = synth::speech_like(32000, 30);
        let d = synth::white_noise(32000, 31, 0.05);
        let d_half: Vec<f64> = d.iter().map(|v| v * 0.5).collect();
        let gain = delta_snr(&s, &d, &s, &d_half).unwrap();
        // Halving the residual noise is a power-of-two scaling, so the level
        // drops by exactly 20 log10(2) up to log rounding.
        assert!((gain - 20.0 * 2.0f64.log10()).abs() < 1e-9, "{gain}");
        let unchanged = delta_snr(&s, &d, &s, &d).unwrap();
        assert_eq!(unchanged, 0.0);
    }

    #[test]
    fn ssdr_perfect_reconstruction_hits_the_cap() {
        let s = synth::speech_like(32000, 32);
        assert_eq!(ssdr(&s, &s).unwrap(), SSDR_CAP_DB);
    }

    #[test]
    fn ssdr_survives_alignment_shifts() {
        let s = synth::speech_like(32000, 33);
        let delayed: Vec<f64> =
            (0..s.len()).map(|n| sample_shifted(&s, n as isize - 40)).collect();
        let v = ssdr(&s, &delayed).unwrap();
        assert!(v > 25.0, "delayed copy should still score high, got {v}");
    }

    #[test]
    fn ssdr_floor_clamps_heavy_distortion() {
        let s = synth::speech_like(32000, 38);
        let garbage: Vec<f64> =
            synth::white_noise(32000, 39, 1.0).iter().map(|v| v * 100.0).collect();
        // Every active frame lands far below the floor, so the per-frame
        // clamp pins the mean at exactly the floor.
        assert_eq!(ssdr(&s, &garbage).unwrap(), SSDR_FLOOR_DB);
    }

    #[test]
    fn ssdr_decreases_with_distortion() {
        let s = synth::speech_like(32000, 34);
        let noise = synth::white_noise(32000, 35, 0.02);
        let light: Vec<f64> = s.iter().zip(&noise).map(|(a, b)| a + 0.2 * b).collect();
        let heavy: Vec<f64> = s.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let v_light = ssdr(&s, &light).unwrap();
        let v_heavy = ssdr(&s, &heavy).unwrap();
        assert!(v_light > v_heavy, "{v_light} vs {v_heavy}");
        assert!(v_heavy > -10.0 && v_light < 30.0);
    }

    #[test]
    fn noise_attenuation_tracks_uniform_scaling() {
        let d = synth::white_noise(32000, 36, 0.1);
        let quarter: Vec<f64> = d.iter().map(|v| v * 0.25).collect();
        let na = na_seg(&d, &quarter, 0).unwrap();
        assert!((na - 12.0412).abs() < 1e-6, "{na}");
        assert!((na_seg(&d, &d, 0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn noise_attenuation_edge_ratios() {
        let d = synth::white_noise(4096, 37, 0.1);
        let zero = vec![0.0; 4096];
        let na = na_seg(&d, &zero, 0).unwrap();
        assert!((na - 120.0).abs() < 1e-9, "silent residual caps at 120 dB, got {na}");
        let both = na_seg(&zero, &zero, 0).unwrap();
        assert_eq!(both, 0.0, "silence staying silent is neutral");
    }

    #[test]
    fn wlakr_zero_for_untouched_noise() {
        let d = synth::white_noise(32000, 38, 0.1);
        assert_eq!(wlakr(&d, &d, 0).unwrap(), 0.0);
    }

    #[test]
    fn wlakr_detects_kurtosis_change() {
        let d = synth::white_noise(32000, 39, 0.1);
        // Strong in-frame on/off gating makes the residual spiky, raising
        // its kurtosis well above the uniform-noise baseline.
        let gated: Vec<f64> =
            d.iter().enumerate().map(|(n, &v)| if n % 8 == 0 { 3.0 * v } else { 0.01 * v }).collect();
        let v = wlakr(&d, &gated, 0).unwrap();
        assert!(v > 0.5, "gating should shift kurtosis clearly, got {v}");
    }

    #[test]
    fn wlakr_rejects_flat_noise() {
        let flat = vec![0.5; 16000];
        let d = synth::white_noise(16000, 40, 0.1);
        match wlakr(&flat, &d, 0) {
            Err(Error::DegenerateKurtosis { which: "noise", .. }) => {}
            other => panic!("expected DegenerateKurtosis, got {other:?}"),
        }
        match wlakr(&d, &flat, 0) {
            Err(Error::DegenerateKurtosis { which: "residual", .. }) => {}
            other => panic!("expected DegenerateKurtosis, got {other:?}"),
        }
    }

    #[test]
    fn stoi_proxy_identity_is_one() {
        let s = synth::speech_like(16000, 41);
        let v = stoi_proxy(&s, &s).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn stoi_proxy_degrades_with_noise() {
        let s = synth::speech_like(16000, 42);
        let noisy: Vec<f64> = s
            .iter()
            .zip(synth::white_noise(16000, 43, 0.2))
            .map(|(a, b)| a + b)
            .collect();
        let v = stoi_proxy(&s, &noisy).unwrap();
        assert!(v < 0.95 && v > 0.0, "{v}");
    }

    #[test]
    fn stoi_proxy_needs_thirty_frames() {
        let s = synth::speech_like(2048, 44);
        assert!(matches!(stoi_proxy(&s, &s), Err(Error::TooShort { needed: 30, .. })));
    }

    #[test]
    fn evaluate_mask_produces_consistent_report() {
        // A unit mask keeps the spectra untouched, so the report must come
        // out near-neutral. Synthesis tapers the single-covered edge samples
        // (first/last half window), which shifts each measure by a hair —
        // the bounds here leave room for exactly that and nothing more.
        let s = synth::speech_like(16000, 45);
        let d = synth::white_noise(16000, 46, 0.03);
        let cfg = StftConfig::default();
        let frames = analyze(&s, &cfg).unwrap().num_frames();
        let mask = Matrix::filled(frames, cfg.half_bins(), 1.0);
        let report = evaluate_mask(&s, &d, &mask, &cfg).unwrap();
        assert!(report.delta_snr_db.abs() < 0.1, "unit mask: {}", report.delta_snr_db);
        assert!(report.ssdr_db > 29.0 && report.ssdr_db <= SSDR_CAP_DB, "{}", report.ssdr_db);
        assert!(report.noise_attenuation_db.abs() < 0.1, "{}", report.noise_attenuation_db);
        assert!(report.wlakr < 0.01, "{}", report.wlakr);
        assert!(report.stoi_proxy < 1.0, "noisy mixture is not perfectly intelligible");
        assert!(report.stoi_proxy > 0.8, "{}", report.stoi_proxy);
        assert_eq!(report.align_lag, 0);
        assert!(report.pesq_mos.is_none() && report.estoi.is_none());
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"align_lag\":0"));
    }
}
