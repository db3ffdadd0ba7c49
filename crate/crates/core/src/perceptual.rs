//! Perceptual front ends: LPC spectral weighting, one-third-octave band
//! grouping for envelope correlation, and a Bark-band loudness transform.
//!
//! The loudness transform is a deliberately simplified power-law model —
//! band power referenced to an absolute threshold, compressed with a 0.23
//! exponent — with every constant exposed on [`LoudnessMap`] rather than
//! hard-coded, so it can be recalibrated without touching the loss code.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::matrix::Matrix;
use crate::stft::StftConfig;

/// White-noise correction applied to the zero lag before Levinson recursion;
/// keeps the autocorrelation strictly positive definite.
const LAG_ZERO_CORRECTION: f64 = 1.0 + 1e-9;

/// Predictor coefficients `a(1..=order)` of the frame, minimizing the forward
/// prediction error of the Hann-windowed samples. A zero frame yields zero
/// coefficients (flat spectral envelope).
pub fn lpc_from_frame(frame: &[f64], order: usize) -> Result<Vec<f64>> {
    if order == 0 {
        return Err(Error::InvalidConfig("LPC order must be at least 1".into()));
    }
    let n = frame.len();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    let k = n as f64;
    let windowed: Vec<f64> = frame
        .iter()
        .enumerate()
        .map(|(i, &x)| x * 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / k).cos()))
        .collect();

    let mut r = vec![0.0; order + 1];
    for (tau, rt) in r.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..n.saturating_sub(tau) {
            acc += windowed[i] * windowed[i + tau];
        }
        *rt = acc;
    }
    if r[0] <= 0.0 {
        return Ok(vec![0.0; order]);
    }
    r[0] *= LAG_ZERO_CORRECTION;
    Ok(levinson(&r, order).0)
}

/// Levinson-Durbin recursion on autocorrelation lags `r[0..=order]`.
/// Returns predictor coefficients and the reflection coefficients, whose
/// magnitudes stay below 1 for positive-definite input (minimum phase).
pub(crate) fn levinson(r: &[f64], order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![0.0; order + 1];
    let mut refl = Vec::with_capacity(order);
    let mut e = r[0];
    for i in 1..=order {
        let mut acc = r[i];
        for j in 1..i {
            acc -= a[j] * r[i - j];
        }
        let k = acc / e;
        debug_assert!(k.abs() < 1.0, "reflection {k} escaped the unit interval");
        refl.push(k);
        let prev = a.clone();
        a[i] = k;
        for j in 1..i {
            a[j] = prev[j] - k * prev[i - j];
        }
        e *= 1.0 - k * k;
    }
    (a[1..].to_vec(), refl)
}

/// Squared magnitude response `|W(k)|²` on the K/2+1 DFT frequencies of the
/// pole-zero weighting `W(z) = (1 - A(z/γ1)) / (1 - A(z/γ2))` built from
/// predictor coefficients `a`, where `A(z/γ) = Σ_i a_i γ^i z^-i`.
pub fn weighting_response(a: &[f64], gamma1: f64, gamma2: f64, dft_size: usize) -> Vec<f64> {
    let half = dft_size / 2 + 1;
    let mut num_coef = Vec::with_capacity(a.len());
    let mut den_coef = Vec::with_capacity(a.len());
    let (mut g1, mut g2) = (1.0, 1.0);
    for &ai in a {
        g1 *= gamma1;
        g2 *= gamma2;
        num_coef.push(ai * g1);
        den_coef.push(ai * g2);
    }
    (0..half)
        .map(|k| {
            let theta = -std::f64::consts::TAU * k as f64 / dft_size as f64;
            let z = Complex64::from_polar(1.0, theta);
            let mut zp = Complex64::new(1.0, 0.0);
            let mut num = Complex64::new(1.0, 0.0);
            let mut den = Complex64::new(1.0, 0.0);
            for i in 0..a.len() {
                zp *= z;
                num -= num_coef[i] * zp;
                den -= den_coef[i] * zp;
            }
            num.norm_sqr() / den.norm_sqr()
        })
        .collect()
}

/// Per-frame weighting matrix `L × (K/2+1)` from the clean speech signal,
/// framed exactly like [`stft::analyze`](crate::stft::analyze). The weighting
/// depends only on the clean speech, never on the mask.
pub fn weighting_from_clean(
    s: &[f64],
    config: &StftConfig,
    gamma1: f64,
    gamma2: f64,
    order: usize,
) -> Result<Matrix> {
    config.validate()?;
    let k = config.dft_size;
    if s.len() < k {
        return Err(Error::TooShort { needed: k, got: s.len() });
    }
    if !(0.0 < gamma2 && gamma2 <= gamma1 && gamma1 <= 1.0) {
        return Err(Error::InvalidWeights(format!(
            "need 0 < gamma2 <= gamma1 <= 1, got gamma1 = {gamma1}, gamma2 = {gamma2}"
        )));
    }
    let frames = if s.len() <= k { 1 } else { (s.len() - k).div_ceil(config.hop) + 1 };
    let rows = exec::map_indexed(frames, |l| {
        let start = l * config.hop;
        let mut frame = vec![0.0; k];
        for n in 0..k {
            if start + n < s.len() {
                frame[n] = s[start + n];
            }
        }
        let a = lpc_from_frame(&frame, order)?;
        Ok(weighting_response(&a, gamma1, gamma2, k))
    });
    Matrix::from_rows(rows.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Contiguous, disjoint bin ranges approximating one-third-octave bands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OctaveBandMap {
    sample_rate: f64,
    dft_size: usize,
    bands: Vec<(usize, usize)>,
    centers_hz: Vec<f64>,
}

/// Builds `num_bands` one-third-octave bands with centers `150·2^(b/3)` Hz,
/// edges a sixth of an octave out, rounded to the nearest bin. Bands are kept
/// non-empty and disjoint by a greedy allocation that widens a band by one bin
/// when the rounded edges collapse, and clipped to bins `[1, K/2]` (so very
/// small DFT sizes may leave trailing bands empty).
pub fn one_third_octave_bands(
    sample_rate: f64,
    dft_size: usize,
    num_bands: usize,
) -> Result<OctaveBandMap> {
    let bin_hz = sample_rate / dft_size as f64;
    let limit = dft_size / 2 + 1; // exclusive end: bins 1..=K/2 are usable
    let mut bands = Vec::with_capacity(num_bands);
    let mut centers_hz = Vec::with_capacity(num_bands);
    let mut next_free = 1usize;
    for b in 0..num_bands {
        let center = 150.0 * 2f64.powf(b as f64 / 3.0);
        if center >= sample_rate / 2.0 {
            return Err(Error::InvalidConfig(format!(
                "band center {center:.0} Hz reaches the Nyquist frequency"
            )));
        }
        let lo = (center * 2f64.powf(-1.0 / 6.0) / bin_hz).round() as usize;
        let hi = (center * 2f64.powf(1.0 / 6.0) / bin_hz).round() as usize;
        let start = lo.max(next_free).min(limit);
        let end = hi.max(start + 1).min(limit).max(start);
        next_free = end;
        bands.push((start, end));
        centers_hz.push(center);
    }
    Ok(OctaveBandMap { sample_rate, dft_size, bands, centers_hz })
}

impl OctaveBandMap {
    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn band(&self, b: usize) -> std::ops::Range<usize> {
        self.bands[b].0..self.bands[b].1
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn dft_size(&self) -> usize {
        self.dft_size
    }

    /// Octave-compressed envelopes: `env(l, b) = sqrt(Σ_{k∈band b} mag(l,k)²)`.
    pub fn envelopes(&self, mags: &Matrix) -> Matrix {
        Matrix::from_fn(mags.rows(), self.num_bands(), |l, b| {
            let row = mags.row(l);
            self.band(b).map(|k| row[k] * row[k]).sum::<f64>().sqrt()
        })
    }
}

/// Bark-spaced loudness bands with threshold-referenced power-law compression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoudnessMap {
    bands: Vec<(usize, usize)>,
    /// Absolute threshold power per band; loudness is 0 at or below it.
    thresholds: Vec<f64>,
    scales: Vec<f64>,
    pub exponent: f64,
    pub masking_fraction: f64,
    pub asym_offset: f64,
    pub asym_exponent: f64,
    pub asym_floor: f64,
    pub asym_cap: f64,
}

pub const DEFAULT_LOUDNESS_BANDS: usize = 42;
const LOUDNESS_EXPONENT: f64 = 0.23;
/// Power corresponding to 0 dB of the threshold-in-quiet curve for signals in
/// the unit amplitude range.
const THRESHOLD_REF_POWER: f64 = 1e-6;

fn bark(f: f64) -> f64 {
    13.0 * (0.00076 * f).atan() + 3.5 * ((f / 7500.0) * (f / 7500.0)).atan()
}

fn bark_inverse(z: f64, f_max: f64) -> f64 {
    // bark() is strictly increasing; bisect on [0, f_max].
    let (mut lo, mut hi) = (0.0, f_max);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if bark(mid) < z {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Threshold in quiet, dB, with the usual three-term approximation; clamped so
/// the DC band gets a large but finite threshold.
fn threshold_quiet_db(f: f64) -> f64 {
    let khz = (f / 1000.0).max(0.02);
    let t = 3.64 * khz.powf(-0.8) - 6.5 * (-0.6 * (khz - 3.3) * (khz - 3.3)).exp()
        + 1e-3 * khz.powi(4);
    t.clamp(-10.0, 60.0)
}

/// Partitions bins `[1, K/2]` into `num_bands` equal-width Bark bands.
pub fn bark_loudness_map(sample_rate: f64, dft_size: usize, num_bands: usize) -> LoudnessMap {
    let half = dft_size / 2;
    let step = bark(sample_rate / 2.0) / num_bands as f64;
    let band_of = |k: usize| -> usize {
        let z = bark(k as f64 * sample_rate / dft_size as f64);
        ((z / step) as usize).min(num_bands - 1)
    };
    let mut bands = Vec::with_capacity(num_bands);
    let mut k = 1usize;
    for b in 0..num_bands {
        let start = k;
        while k <= half && band_of(k) == b {
            k += 1;
        }
        bands.push((start, k));
    }
    let thresholds: Vec<f64> = (0..num_bands)
        .map(|b| {
            let fc = bark_inverse((b as f64 + 0.5) * step, sample_rate / 2.0);
            THRESHOLD_REF_POWER * 10f64.powf(threshold_quiet_db(fc) / 10.0)
        })
        .collect();
    let scales = thresholds.iter().map(|p0| (p0 / 0.5).powf(LOUDNESS_EXPONENT)).collect();
    LoudnessMap {
        bands,
        thresholds,
        scales,
        exponent: LOUDNESS_EXPONENT,
        masking_fraction: 0.25,
        asym_offset: 1.0,
        asym_exponent: 1.2,
        asym_floor: 3.0,
        asym_cap: 12.0,
    }
}

impl LoudnessMap {
    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn band(&self, b: usize) -> std::ops::Range<usize> {
        self.bands[b].0..self.bands[b].1
    }

    pub fn threshold(&self, b: usize) -> f64 {
        self.thresholds[b]
    }

    /// Band power of a magnitude row: `Σ_{k∈band} mag(k)²`.
    pub fn band_power(&self, mag_row: &[f64], b: usize) -> f64 {
        self.band(b).map(|k| mag_row[k] * mag_row[k]).sum()
    }

    /// Loudness of band power `p`: zero at or below the absolute threshold,
    /// then `(P0/0.5)^e·((0.5 + 0.5·p/P0)^e - 1)`, monotone in `p`.
    pub fn loudness(&self, b: usize, p: f64) -> f64 {
        let p0 = self.thresholds[b];
        let raw = (0.5 + 0.5 * p / p0).powf(self.exponent) - 1.0;
        if raw > 0.0 {
            self.scales[b] * raw
        } else {
            0.0
        }
    }

    /// d loudness / d power; zero below the threshold.
    pub fn loudness_deriv(&self, b: usize, p: f64) -> f64 {
        let p0 = self.thresholds[b];
        let base = 0.5 + 0.5 * p / p0;
        if base.powf(self.exponent) - 1.0 > 0.0 {
            self.scales[b] * self.exponent * base.powf(self.exponent - 1.0) * 0.5 / p0
        } else {
            0.0
        }
    }
}
