//! Finite-difference validation of the analytic mask gradients.
//!
//! Every loss ships with a hand-derived gradient; this module checks each
//! entry of that gradient against a central finite difference of the summed
//! per-frame objective on a small, seeded fixture. The comparison is
//! two-tier: entries with meaningful magnitude must agree in relative terms,
//! vanishing entries in absolute terms.
//!
//! The perceptually weighted quality loss is piecewise smooth — its loudness
//! compression, masking hinge, and capped asymmetry ratio all have switch
//! points. A finite difference that straddles such a switch measures the
//! average slope of two different pieces and disagrees with the (one-sided)
//! analytic gradient by design, not by error. The harness therefore computes
//! the margin of every switch condition at both probe points and skips the
//! handful of entries whose margins change sign, loosening the tolerance for
//! entries that sit close to a switch without crossing it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{LossContext, LossKind, LossWeights};
use crate::matrix::Matrix;
use crate::perceptual::{bark_loudness_map, LoudnessMap, DEFAULT_LOUDNESS_BANDS};
use crate::signal::SAMPLE_RATE;
use crate::stft::{self, StftConfig};
use crate::synth;

/// Central-difference step on the mask entries.
pub const DEFAULT_FD_STEP: f64 = 1e-6;
/// Relative tolerance for entries of meaningful size.
pub const REL_TOL: f64 = 1e-5;
/// Absolute tolerance for near-zero entries.
pub const ABS_TOL: f64 = 1e-9;
/// Entries below this magnitude (both analytic and numeric) are compared
/// absolutely instead of relatively.
pub const SMALL_SCALE: f64 = 1e-4;
/// Tolerance relaxation for entries close to (but not straddling) a switch
/// point of a piecewise-smooth loss.
const LOOSE_FACTOR: f64 = 10.0;

/// Outcome of checking one loss on one fixture.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub kind: LossKind,
    /// Mask entries in the fixture.
    pub entries: usize,
    /// Entries actually compared.
    pub checked: usize,
    /// Entries excluded because the probe straddled a switch point.
    pub skipped: usize,
    /// Compared entries that used the relaxed near-switch tolerance.
    pub loose: usize,
    /// Compared entries outside tolerance.
    pub failures: usize,
    /// Worst relative error among relatively compared entries.
    pub worst_rel: f64,
    /// Worst absolute error among absolutely compared entries.
    pub worst_abs: f64,
    /// Location of the worst offender (frame, bin), if anything failed.
    pub worst_entry: Option<(usize, usize)>,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:8} {:4} entries, {:4} checked, {:2} skipped, {:2} loose | rel {:.3e} abs {:.3e} | {}",
            self.kind.name(),
            self.entries,
            self.checked,
            self.skipped,
            self.loose,
            self.worst_rel,
            self.worst_abs,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EntryClass {
    /// Far from every switch point: full tolerance.
    Strict,
    /// Near a switch point: relaxed tolerance.
    Loose,
    /// The probe straddles a switch point: not comparable.
    Skip,
}

/// Classifies an entry from the switch-condition margins at the two probe
/// points. `NaN` marks a condition that is inactive on that side; a sign
/// change (or an exact zero) in any active pair means the probe straddles a
/// switch.
fn classify(margins_lo: &[f64], margins_hi: &[f64]) -> EntryClass {
    let mut class = EntryClass::Strict;
    for (&a, &b) in margins_lo.iter().zip(margins_hi) {
        if a.is_nan() || b.is_nan() {
            continue;
        }
        if a == 0.0 || b == 0.0 || a.signum() != b.signum() {
            return EntryClass::Skip;
        }
        let delta = (a - b).abs();
        if a.abs().min(b.abs()) < LOOSE_FACTOR * delta {
            class = EntryClass::Loose;
        }
    }
    class
}

/// Margins of all switch conditions of the quality loss for one band, as a
/// function of the masked band power `p_hat` (the reference loudness `ls` is
/// fixed). Conditions, in order: loudness activation (`p_hat` vs threshold),
/// the masking hinge, the sign of the loudness difference, and the floor and
/// cap of the asymmetry ratio (active only while the estimate is louder).
fn pesq_margins(map: &LoudnessMap, band: usize, p_hat: f64, ls: f64) -> [f64; 5] {
    let lh = map.loudness(band, p_hat);
    let diff = lh - ls;
    let hinge = diff.abs() - map.masking_fraction * lh.min(ls);
    let (floor, cap) = if lh > ls {
        let q = (lh + map.asym_offset) / (ls + map.asym_offset);
        let raw = q.powf(map.asym_exponent);
        (raw - map.asym_floor, raw - map.asym_cap)
    } else {
        (f64::NAN, f64::NAN)
    };
    [p_hat - map.threshold(band), hinge, diff, floor, cap]
}

/// Band power of the masked mixture in `band`, with the mask entry at `bin`
/// overridden to `value`.
fn perturbed_band_power(
    map: &LoudnessMap,
    band: usize,
    mask_row: &[f64],
    y_row: &[f64],
    bin: usize,
    value: f64,
) -> f64 {
    let mut p = 0.0;
    for k in map.band(band) {
        let m = if k == bin { value } else { mask_row[k] };
        let v = m * y_row[k];
        p += v * v;
    }
    p
}

fn pesq_entry_class(
    map: &LoudnessMap,
    ctx: &LossContext,
    mask: &Matrix,
    frame: usize,
    bin: usize,
    step: f64,
) -> EntryClass {
    let band = match (0..map.num_bands()).find(|&b| map.band(b).contains(&bin)) {
        Some(b) => b,
        None => return EntryClass::Strict, // bin feeds only the smooth term
    };
    let (m, y, s) = (mask.row(frame), ctx.y_mag().row(frame), ctx.s_mag().row(frame));
    let p_ref = map.band_power(s, band);
    let ls = map.loudness(band, p_ref);
    let lo = perturbed_band_power(map, band, m, y, bin, m[bin] - step);
    let hi = perturbed_band_power(map, band, m, y, bin, m[bin] + step);
    classify(&pesq_margins(map, band, lo, ls), &pesq_margins(map, band, hi, ls))
}

/// `(passed, rel_err, abs_err)` for one entry under the two-tier rule. The
/// unused tier reports 0 so maxima can be tracked independently. `noise` is
/// the rounding-error floor of the finite difference itself — a function of
/// the objective's magnitude, not of the gradient — below which no agreement
/// can be demanded.
fn compare_entry(
    analytic: f64,
    fd: f64,
    rel_tol: f64,
    abs_tol: f64,
    noise: f64,
) -> (bool, f64, f64) {
    let scale = analytic.abs().max(fd.abs());
    let err = (analytic - fd).abs();
    let floor = abs_tol.max(noise);
    if scale >= SMALL_SCALE {
        let rel = err / scale;
        (err <= rel_tol * scale + floor, rel, 0.0)
    } else {
        (err <= floor, 0.0, err)
    }
}

/// Checks the analytic gradient of `kind` against central finite differences
/// of `sum(per_frame)` at every mask entry.
pub fn check_gradients(
    kind: LossKind,
    ctx: &LossContext,
    mask: &Matrix,
    step: f64,
) -> Result<GradCheckReport> {
    let analytic = ctx.evaluate(kind, mask)?;
    let dft_size = (ctx.half_bins() - 1) * 2;
    let map = match kind {
        LossKind::PwPesq => {
            Some(bark_loudness_map(SAMPLE_RATE as f64, dft_size, DEFAULT_LOUDNESS_BANDS))
        }
        _ => None,
    };

    let objective = |m: &Matrix| -> Result<f64> {
        Ok(ctx.evaluate(kind, m)?.per_frame.iter().sum())
    };

    let mut report = GradCheckReport {
        kind,
        entries: mask.rows() * mask.cols(),
        checked: 0,
        skipped: 0,
        loose: 0,
        failures: 0,
        worst_rel: 0.0,
        worst_abs: 0.0,
        worst_entry: None,
        passed: true,
    };
    let mut probe = mask.clone();
    for l in 0..mask.rows() {
        for k in 0..mask.cols() {
            let class = match &map {
                Some(map) => pesq_entry_class(map, ctx, mask, l, k, step),
                None => EntryClass::Strict,
            };
            if class == EntryClass::Skip {
                report.skipped += 1;
                continue;
            }
            let center = mask.get(l, k);
            probe.set(l, k, center + step);
            let f_hi = objective(&probe)?;
            probe.set(l, k, center - step);
            let f_lo = objective(&probe)?;
            probe.set(l, k, center);
            let fd = (f_hi - f_lo) / (2.0 * step);
            // The difference of two O(|f|) values loses about |f|·eps to
            // rounding before the division by 2h amplifies it.
            let noise =
                16.0 * f64::EPSILON * f_hi.abs().max(f_lo.abs()) / (2.0 * step);

            let (rel_tol, abs_tol) = match class {
                EntryClass::Loose => (REL_TOL * LOOSE_FACTOR, ABS_TOL * LOOSE_FACTOR),
                _ => (REL_TOL, ABS_TOL),
            };
            if class == EntryClass::Loose {
                report.loose += 1;
            }
            report.checked += 1;
            let (ok, rel, abs) =
                compare_entry(analytic.grad.get(l, k), fd, rel_tol, abs_tol, noise);
            if rel > report.worst_rel {
                report.worst_rel = rel;
                if !ok {
                    report.worst_entry = Some((l, k));
                }
            }
            if abs > report.worst_abs {
                report.worst_abs = abs;
                if !ok {
                    report.worst_entry = Some((l, k));
                }
            }
            if !ok {
                report.failures += 1;
                report.passed = false;
            }
        }
    }
    Ok(report)
}

/// A small seeded fixture: speech-like signal plus white noise, analyzed
/// with a 16-point transform (9 non-redundant bins, 40 frames), and a mask
/// drawn uniformly from `[0.1, 1.2)` — away from 0 and above 1 so nothing is
/// silenced and amplification is exercised too.
pub fn standard_fixture(weights: LossWeights, seed: u64) -> Result<(LossContext, Matrix)> {
    let cfg = StftConfig::new(16, 8, 16)?;
    let frames = 40;
    let len = cfg.dft_size + cfg.hop * (frames - 1);
    let s_time = synth::speech_like(len, seed);
    let d_time = synth::white_noise(len, seed ^ 0x9e37_79b9_7f4a_7c15, 0.12);
    let s = stft::analyze(&s_time, &cfg)?;
    let d = stft::analyze(&d_time, &cfg)?;
    let ctx = LossContext::new(&s_time, &s, &d, weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(7));
    let mask = Matrix::from_fn(ctx.frames(), ctx.half_bins(), |_, _| rng.gen_range(0.1..1.2));
    Ok((ctx, mask))
}

/// Runs the standard fixture through every loss. The three-component loss
/// gets its reference weighting (nonzero norm coupling); everything else
/// runs with the two-component defaults.
pub fn check_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    LossKind::ALL
        .iter()
        .map(|&kind| {
            let weights = match kind {
                LossKind::Cl3 => LossWeights::for_3cl(),
                _ => LossWeights::for_2cl(),
            };
            let (ctx, mask) = standard_fixture(weights, seed)?;
            check_gradients(kind, &ctx, &mask, DEFAULT_FD_STEP)
        })
        .collect()
}
