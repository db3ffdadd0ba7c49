//! Short-time spectral analysis and synthesis.
//!
//! Analysis applies a periodic Hann window at 50% overlap and a K-point DFT.
//! Synthesis uses the matching least-squares window `w(n) / Σ_l w²(n - l·hop)`
//! whose overlapped product with the analysis window sums to exactly 1 across
//! interior samples, so an unmodified round trip reconstructs the input to
//! machine precision everywhere the window sum is nonzero (all samples except
//! the very first, where the periodic Hann itself is zero).

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec;
use crate::matrix::Matrix;

pub const DEFAULT_DFT_SIZE: usize = 256;
pub const DEFAULT_HOP: usize = 128;
/// Default mask-estimator input width; the three bins past K/2 replicate the
/// mirrored magnitudes so the width is divisible by 4.
pub const DEFAULT_EXTENDED_BINS: usize = 132;

/// Frame geometry shared by every spectral object in a pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub dft_size: usize,
    pub hop: usize,
    pub extended_bins: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { dft_size: DEFAULT_DFT_SIZE, hop: DEFAULT_HOP, extended_bins: DEFAULT_EXTENDED_BINS }
    }
}

impl StftConfig {
    pub fn new(dft_size: usize, hop: usize, extended_bins: usize) -> Result<Self> {
        let cfg = Self { dft_size, hop, extended_bins };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dft_size < 8 || self.dft_size % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "dft_size must be even and at least 8, got {}",
                self.dft_size
            )));
        }
        if self.hop != self.dft_size / 2 {
            return Err(Error::InvalidConfig(format!(
                "hop must be dft_size/2 = {}, got {}",
                self.dft_size / 2,
                self.hop
            )));
        }
        if self.extended_bins < self.half_bins() || self.extended_bins > self.dft_size {
            return Err(Error::InvalidConfig(format!(
                "extended_bins must lie in [{}, {}], got {}",
                self.half_bins(),
                self.dft_size,
                self.extended_bins
            )));
        }
        if self.extended_bins % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "extended_bins must be divisible by 4, got {}",
                self.extended_bins
            )));
        }
        Ok(())
    }

    /// Number of non-redundant bins K/2+1.
    pub fn half_bins(&self) -> usize {
        self.dft_size / 2 + 1
    }

    /// Periodic Hann window `0.5·(1 - cos(2πn/K))`, n = 0..K-1.
    pub fn window(&self) -> Vec<f64> {
        let k = self.dft_size as f64;
        (0..self.dft_size)
            .map(|n| 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / k).cos()))
            .collect()
    }

    /// Least-squares synthesis window paired with [`window`](Self::window).
    ///
    /// The denominator `w²(n) + w²((n+hop) mod K)` is the overlapped square
    /// sum, strictly positive for a Hann at 50% overlap except at n = 0.
    pub fn synthesis_window(&self) -> Vec<f64> {
        let w = self.window();
        (0..self.dft_size)
            .map(|n| {
                let d = w[n] * w[n] + {
                    let m = (n + self.hop) % self.dft_size;
                    w[m] * w[m]
                };
                if d > 0.0 {
                    w[n] / d
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn num_frames(&self, len: usize) -> usize {
        if len <= self.dft_size {
            1
        } else {
            (len - self.dft_size).div_ceil(self.hop) + 1
        }
    }
}

/// Complex spectra, one full-K row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFrames {
    config: StftConfig,
    origin_length: usize,
    frames: usize,
    data: Vec<Complex64>,
}

impl SpectralFrames {
    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Sample count of the signal the frames were computed from.
    pub fn origin_length(&self) -> usize {
        self.origin_length
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn row(&self, l: usize) -> &[Complex64] {
        let k = self.config.dft_size;
        &self.data[l * k..(l + 1) * k]
    }

    pub fn row_mut(&mut self, l: usize) -> &mut [Complex64] {
        let k = self.config.dft_size;
        &mut self.data[l * k..(l + 1) * k]
    }

    /// Magnitudes of the K/2+1 non-redundant bins, L × (K/2+1).
    pub fn magnitudes(&self) -> Matrix {
        let half = self.config.half_bins();
        Matrix::from_fn(self.frames, half, |l, k| self.row(l)[k].norm())
    }

    /// True when two spectra share geometry and source length, i.e. were
    /// produced by compatible analyses.
    pub fn compatible_with(&self, other: &SpectralFrames) -> bool {
        self.config == other.config
            && self.origin_length == other.origin_length
            && self.frames == other.frames
    }

    /// Dumps `(frame, bin, re, im)` rows for external inspection.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "frame,bin,re,im")?;
        for l in 0..self.frames {
            for (k, c) in self.row(l).iter().enumerate() {
                writeln!(out, "{l},{k},{},{}", c.re, c.im)?;
            }
        }
        Ok(())
    }
}

/// Frames, windows and transforms `x`; the tail is zero-padded to fill the
/// last frame and the original length is kept for synthesis.
pub fn analyze(x: &[f64], config: &StftConfig) -> Result<SpectralFrames> {
    config.validate()?;
    let k = config.dft_size;
    if x.len() < k {
        return Err(Error::TooShort { needed: k, got: x.len() });
    }
    let frames = config.num_frames(x.len());
    let window = config.window();
    let fft = FftPlanner::new().plan_fft_forward(k);

    let rows = exec::map_indexed(frames, |l| {
        let start = l * config.hop;
        let mut buf = vec![Complex64::new(0.0, 0.0); k];
        for n in 0..k {
            let s = if start + n < x.len() { x[start + n] } else { 0.0 };
            buf[n] = Complex64::new(s * window[n], 0.0);
        }
        fft.process(&mut buf);
        buf
    });

    let mut data = Vec::with_capacity(frames * k);
    for row in rows {
        data.extend_from_slice(&row);
    }
    Ok(SpectralFrames { config: *config, origin_length: x.len(), frames, data })
}

/// Overlap-adds the inverse transforms back to a time signal of the original
/// length.
///
/// Interior samples — those covered by two overlapping frames — reconstruct
/// exactly: the least-squares synthesis window makes the overlapped
/// analysis·synthesis product sum to 1 there. The first and last half-window
/// see only a single frame and come back tapered by the deficient overlap
/// (sample 0 has zero window weight and is always 0). No per-sample
/// renormalization is applied to undo that taper: it would divide by window
/// values that vanish toward the signal edges, which is harmless for an
/// untouched round trip but amplifies the edge content of modified (masked)
/// spectra without bound.
pub fn synthesize(frames: &SpectralFrames) -> Result<Vec<f64>> {
    let cfg = &frames.config;
    let k = cfg.dft_size;
    let hop = cfg.hop;
    let ifft = FftPlanner::new().plan_fft_inverse(k);
    let syn = cfg.synthesis_window();

    let time_frames = exec::map_indexed(frames.frames, |l| {
        let mut buf = frames.row(l).to_vec();
        ifft.process(&mut buf);
        // rustfft's inverse is unnormalized; fold 1/K into the synthesis window pass.
        let scale = 1.0 / k as f64;
        let mut out = vec![0.0; k];
        for n in 0..k {
            out[n] = buf[n].re * scale * syn[n];
        }
        out
    });

    let padded = (frames.frames - 1) * hop + k;
    let mut acc = vec![0.0; padded];
    for (l, tf) in time_frames.iter().enumerate() {
        let start = l * hop;
        for n in 0..k {
            acc[start + n] += tf[n];
        }
    }
    // The padded span always covers the original length (the tail was
    // zero-filled to complete the last frame), so trimming is enough.
    acc.truncate(frames.origin_length);
    Ok(acc)
}

/// Magnitude matrix widened from K/2+1 to `extended_bins` columns by
/// replicating mirrored bins: column K/2+1+i copies |X(K/2-1-i)|.
pub fn extend_bins(frames: &SpectralFrames) -> Matrix {
    let cfg = &frames.config;
    let half = cfg.half_bins();
    Matrix::from_fn(frames.frames, cfg.extended_bins, |l, c| {
        let k = if c < half { c } else { cfg.dft_size / 2 - 1 - (c - half) };
        frames.row(l)[k].norm()
    })
}

/// Bin-wise sum of two compatible frame sets (e.g. speech + noise frames
/// giving the mixture frames).
pub fn add_frames(a: &SpectralFrames, b: &SpectralFrames) -> Result<SpectralFrames> {
    if !a.compatible_with(b) {
        return Err(Error::ShapeMismatch {
            expected: format!("{} frames of size {}", a.num_frames(), a.config.dft_size),
            got: format!("{} frames of size {}", b.num_frames(), b.config.dft_size),
        });
    }
    let mut out = a.clone();
    for l in 0..out.num_frames() {
        let br = b.row(l);
        for (ov, bv) in out.row_mut(l).iter_mut().zip(br) {
            *ov += bv;
        }
    }
    Ok(out)
}

/// Drops the replicated columns again, keeping the K/2+1 non-redundant bins.
pub fn truncate_bins(extended: &Matrix, config: &StftConfig) -> Result<Matrix> {
    if extended.cols() != config.extended_bins {
        return Err(Error::ShapeMismatch {
            expected: format!("{} columns", config.extended_bins),
            got: format!("{}", extended.cols()),
        });
    }
    extended.truncate_cols(config.half_bins())
}

/// Mirrors a half-spectrum mask row onto all K bins by conjugate symmetry.
pub(crate) fn mirror_row(half_row: &[f64], dft_size: usize) -> Vec<f64> {
    let mut full = vec![0.0; dft_size];
    full[..half_row.len()].copy_from_slice(half_row);
    for k in half_row.len()..dft_size {
        full[k] = half_row[dft_size - k];
    }
    full
}
