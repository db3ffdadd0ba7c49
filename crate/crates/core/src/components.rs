//! White-box decomposition of a masked mixture.
//!
//! The mixture model is `Y = S + D` in the STFT domain. Applying a real,
//! non-negative mask `M` to `Y` is linear, so the masked estimate splits
//! exactly into a filtered-speech part and a residual-noise part:
//!
//! ```text
//! Ŝ = M∘Y = M∘S + M∘D = S̃ + D̃
//! ```
//!
//! [`apply_mask`] builds all three from the separately known components and
//! stores them in a [`WhiteBoxBundle`], defining `Ŝ := S̃ + D̃` so the identity
//! holds bit for bit. Losses that only see `Ŝ` and losses that grade `S̃` and
//! `D̃` separately therefore describe the same estimate.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::stft::{self, SpectralFrames};

/// How far `Y` may drift from `S + D` (relative to peak magnitude) before
/// [`apply_mask`] rejects the inputs as inconsistent.
pub const ADDITIVITY_TOL: f64 = 1e-10;

/// Masked mixture together with its exact speech/noise split.
#[derive(Clone, Debug)]
pub struct WhiteBoxBundle {
    /// The mask that was applied, `L × (K/2+1)`.
    pub mask: Matrix,
    /// Mixture magnitudes `|S + D|` on the non-redundant bins, `L × (K/2+1)`.
    /// Gradients of magnitude-domain losses scale with these.
    pub y_mag: Matrix,
    /// Filtered speech `S̃ = M∘S`.
    pub s_tilde: SpectralFrames,
    /// Residual noise `D̃ = M∘D`.
    pub d_tilde: SpectralFrames,
    /// Masked mixture `Ŝ = S̃ + D̃` (exact sum of the two fields above).
    pub s_hat: SpectralFrames,
}

/// Applies mask `M` (real, `L × (K/2+1)`, entries in `[0, ∞)`) to the mixture
/// whose components are `s` and `d`. The mask is mirrored onto the redundant
/// bins so the masked frames stay conjugate-symmetric.
///
/// Fails with [`Error::ShapeMismatch`] when the component geometries differ,
/// [`Error::InvalidMask`] on a negative or non-finite entry, and
/// [`Error::AdditivityViolated`] when the caller also passes a mixture `y`
/// that is not `s + d` within [`ADDITIVITY_TOL`].
pub fn apply_mask(
    s: &SpectralFrames,
    d: &SpectralFrames,
    y: Option<&SpectralFrames>,
    mask: &Matrix,
) -> Result<WhiteBoxBundle> {
    if !s.compatible_with(d) {
        return Err(Error::ShapeMismatch {
            expected: format!("{} frames of size {}", s.num_frames(), s.config().dft_size),
            got: format!("{} frames of size {}", d.num_frames(), d.config().dft_size),
        });
    }
    let half = s.config().half_bins();
    let frames = s.num_frames();
    if mask.rows() != frames || mask.cols() != half {
        return Err(Error::ShapeMismatch {
            expected: format!("{frames} x {half} mask"),
            got: format!("{} x {}", mask.rows(), mask.cols()),
        });
    }
    for l in 0..frames {
        for (k, &m) in mask.row(l).iter().enumerate() {
            if !m.is_finite() || m < 0.0 {
                return Err(Error::InvalidMask { frame: l, bin: k, value: m });
            }
        }
    }
    if let Some(y) = y {
        if !y.compatible_with(s) {
            return Err(Error::ShapeMismatch {
                expected: format!("{frames} mixture frames of size {}", s.config().dft_size),
                got: format!("{} frames of size {}", y.num_frames(), y.config().dft_size),
            });
        }
        let mut peak = 0.0f64;
        let mut max_dev = 0.0f64;
        for l in 0..frames {
            for (ys, (ss, ds)) in y.row(l).iter().zip(s.row(l).iter().zip(d.row(l))) {
                peak = peak.max(ys.norm());
                max_dev = max_dev.max((ys - (ss + ds)).norm());
            }
        }
        if max_dev > ADDITIVITY_TOL * (1.0 + peak) {
            return Err(Error::AdditivityViolated { max_dev });
        }
    }

    let dft = s.config().dft_size;
    let mut s_tilde = s.clone();
    let mut d_tilde = d.clone();
    let mut s_hat = s.clone();
    let mut y_mag = Matrix::zeros(frames, half);
    for l in 0..frames {
        let full_mask = stft::mirror_row(mask.row(l), dft);
        let st = s_tilde.row_mut(l);
        let dt = d_tilde.row_mut(l);
        for k in 0..dft {
            st[k] *= full_mask[k];
            dt[k] *= full_mask[k];
        }
        let (st, dt) = (s_tilde.row(l), d_tilde.row(l));
        let sh = s_hat.row_mut(l);
        for k in 0..dft {
            sh[k] = st[k] + dt[k];
        }
        let (sr, dr) = (s.row(l), d.row(l));
        for k in 0..half {
            y_mag.set(l, k, (sr[k] + dr[k]).norm());
        }
    }
    Ok(WhiteBoxBundle { mask: mask.clone(), y_mag, s_tilde, d_tilde, s_hat })
}

impl WhiteBoxBundle {
    /// Resynthesizes all three components to the time domain:
    /// `(ŝ, s̃, d̃)`, each trimmed to the original signal length.
    pub fn to_time(&self) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        Ok((
            stft::synthesize(&self.s_hat)?,
            stft::synthesize(&self.s_tilde)?,
            stft::synthesize(&self.d_tilde)?,
        ))
    }
}

/// Writes a mask to a small CSV: a `frames,bins` header, a dimension line,
/// then one row of comma-separated mask values per frame.
pub fn write_mask_csv<P: AsRef<Path>>(path: P, mask: &Matrix) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "frames,bins")?;
    writeln!(w, "{},{}", mask.rows(), mask.cols())?;
    for l in 0..mask.rows() {
        let row: Vec<String> = mask.row(l).iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a mask written by [`write_mask_csv`].
pub fn read_mask_csv<P: AsRef<Path>>(path: P) -> Result<Matrix> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines.next().ok_or_else(|| Error::MaskCsv("empty file".into()))??;
    if header.trim() != "frames,bins" {
        return Err(Error::MaskCsv(format!("unexpected header line {header:?}")));
    }
    let dims = lines.next().ok_or_else(|| Error::MaskCsv("missing dimension line".into()))??;
    let mut it = dims.trim().split(',');
    let parse = |tok: Option<&str>| -> Result<usize> {
        tok.ok_or_else(|| Error::MaskCsv("short dimension line".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::MaskCsv(format!("bad dimension: {e}")))
    };
    let rows = parse(it.next())?;
    let cols = parse(it.next())?;
    let mut mask = Matrix::zeros(rows, cols);
    for l in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| Error::MaskCsv(format!("expected {rows} rows, found {l}")))??;
        let mut count = 0;
        for (k, tok) in line.trim().split(',').enumerate() {
            if k >= cols {
                return Err(Error::MaskCsv(format!("row {l} has more than {cols} values")));
            }
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|e| Error::MaskCsv(format!("row {l}, bin {k}: {e}")))?;
            mask.set(l, k, v);
            count += 1;
        }
        if count != cols {
            return Err(Error::MaskCsv(format!("row {l} has {count} values, expected {cols}")));
        }
    }
    Ok(mask)
}
