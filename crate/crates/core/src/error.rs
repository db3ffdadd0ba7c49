//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed WAV: {0}")]
    MalformedWav(String),
    #[error("unsupported WAV encoding (format tag {format}, {bits} bits); expected 16-bit PCM")]
    UnsupportedWavFormat { format: u16, bits: u16 },
    #[error("unsupported channel count {0}; expected mono")]
    UnsupportedChannels(u16),
    #[error("unsupported sample rate {0} Hz; expected 16000 Hz")]
    UnsupportedSampleRate(u32),

    #[error("signal too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("speech signal has no measurable active level")]
    SilentSpeech,
    #[error("noise signal is silent")]
    SilentNoise,
    #[error("noise shorter than speech: need {needed} samples, got {got}")]
    NoiseTooShort { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("mask entry at frame {frame}, bin {bin} is {value}; masks must be finite and non-negative")]
    InvalidMask { frame: usize, bin: usize, value: f64 },
    #[error("mixture is not the sum of the components: max |Y - (S + D)| = {max_dev:.3e}")]
    AdditivityViolated { max_dev: f64 },

    #[error("no speech-active frames above the level threshold")]
    NoActiveFrames,
    #[error("no noise frames above the energy threshold")]
    NoEligibleFrames,
    #[error("degenerate kurtosis in {which} noise frame {frame}")]
    DegenerateKurtosis { which: &'static str, frame: usize },

    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("mask file: {0}")]
    MaskCsv(String),
    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
