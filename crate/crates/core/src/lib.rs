//! Component-wise training losses and instrumental metrics for time-frequency
//! masking speech enhancement.
//!
//! The crate revolves around a white-box decomposition of a masked noisy
//! spectrum: with `Y = S + D` and a real-valued mask `M`, the filtered speech
//! `S~ = S ∘ M` and filtered noise `D~ = D ∘ M` components are tracked
//! separately so that losses and metrics can trade speech distortion against
//! residual noise explicitly. On top of that sit:
//!
//! * [`stft`] — periodic-Hann analysis/synthesis at 50% overlap,
//! * [`components`] — mask application and the component bundle,
//! * [`losses`] — six training losses with analytic mask gradients,
//! * [`perceptual`] — LPC weighting, one-third-octave and loudness front ends,
//! * [`metrics`] — active speech level, ΔSNR, SSDR, noise attenuation,
//!   kurtosis ratio and an intelligibility proxy,
//! * [`trainer`] — projected gradient descent on masks and a small MLP mask
//!   estimator trained by backpropagating the analytic loss gradients,
//! * [`signal`] — PCM WAV I/O and SNR-calibrated mixing,
//! * [`gradcheck`] — finite-difference verification of every loss gradient.
//!
//! All frame loops run data-parallel under the default `parallel` feature and
//! fall back to sequential iteration without it; results are bit-identical in
//! both modes because every reduction uses a fixed summation order.

pub mod components;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod perceptual;
pub mod signal;
pub mod stft;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
