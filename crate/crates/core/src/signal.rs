//! Time-domain signal I/O and SNR-controlled mixing.
//!
//! The toolkit works at a fixed 16 kHz sample rate on mono PCM16 WAV files.
//! Samples are mapped to `[-1, 1)` by dividing by 32768. Mixing places a
//! seeded random excerpt of the noise under the speech, scaled so the active
//! speech level sits the requested number of dB above the mean noise power.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::active_speech_level;

/// The fixed sample rate of the toolkit, Hz.
pub const SAMPLE_RATE: u32 = 16000;

/// A mono signal with its sample rate, as loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl SignalBuffer {
    pub fn from_wav<P: AsRef<Path>>(path: P) -> Result<Self> {
        Ok(SignalBuffer { samples: read_wav(path)?, sample_rate: SAMPLE_RATE })
    }

    /// Writes the buffer as PCM16; returns the number of clipped samples.
    pub fn to_wav<P: AsRef<Path>>(&self, path: P) -> Result<usize> {
        write_wav(path, &self.samples)
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let chunk: [u8; 4] = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::MalformedWav(format!("truncated at byte {at}")))?
        .try_into()
        .unwrap();
    Ok(u32::from_le_bytes(chunk))
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16> {
    let chunk: [u8; 2] = bytes
        .get(at..at + 2)
        .ok_or_else(|| Error::MalformedWav(format!("truncated at byte {at}")))?
        .try_into()
        .unwrap();
    Ok(u16::from_le_bytes(chunk))
}

/// Reads a mono 16-bit PCM WAV at the toolkit sample rate into `[-1, 1)`
/// floats. Unknown chunks are skipped (with RIFF word alignment).
pub fn read_wav<P: AsRef<Path>>(path: P) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedWav("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt_seen = false;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(&bytes, pos + 4)? as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::MalformedWav(format!(
                "chunk {:?} overruns the file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::MalformedWav("fmt chunk too small".into()));
                }
                let format = read_u16(&bytes, body)?;
                let channels = read_u16(&bytes, body + 2)?;
                let rate = read_u32(&bytes, body + 4)?;
                let bits = read_u16(&bytes, body + 14)?;
                if format != 1 || bits != 16 {
                    return Err(Error::UnsupportedWavFormat { format, bits });
                }
                if channels != 1 {
                    return Err(Error::UnsupportedChannels(channels));
                }
                if rate != SAMPLE_RATE {
                    return Err(Error::UnsupportedSampleRate(rate));
                }
                fmt_seen = true;
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        pos = body + size + (size & 1); // chunks are word-aligned
    }
    if !fmt_seen {
        return Err(Error::MalformedWav("no fmt chunk".into()));
    }
    let data = data.ok_or_else(|| Error::MalformedWav("no data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(Error::MalformedWav("odd data chunk length".into()));
    }
    Ok(data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect())
}

/// Writes samples as mono 16-bit PCM, rounding to the nearest code and
/// clamping out-of-range values. Returns how many samples exceeded full
/// scale (`|x| > 1`) before clamping.
pub fn write_wav<P: AsRef<Path>>(path: P, samples: &[f64]) -> Result<usize> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    let mut clipped = 0usize;
    for &x in samples {
        if x.abs() > 1.0 {
            clipped += 1;
        }
        let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(clipped)
}

/// One mixing job: which speech and noise files to combine, at what SNR,
/// and the seed that picks the noise excerpt.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixSpec {
    pub speech: PathBuf,
    pub noise: PathBuf,
    pub snr_db: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Reads a JSON array of [`MixSpec`] entries.
pub fn read_mix_manifest<P: AsRef<Path>>(path: P) -> Result<Vec<MixSpec>> {
    let text = std::fs::read_to_string(path)?;
    let specs: Vec<MixSpec> =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{e}")))?;
    if specs.is_empty() {
        return Err(Error::Manifest("manifest lists no mixing jobs".into()));
    }
    Ok(specs)
}

/// Output of [`mix_at_snr`]: the mixture and the exact components that sum
/// to it, plus the bookkeeping needed to reproduce the mix.
#[derive(Clone, Debug)]
pub struct MixResult {
    /// `speech + noise`, sample for sample.
    pub mixture: Vec<f64>,
    /// The speech component (unchanged input).
    pub speech: Vec<f64>,
    /// The scaled noise excerpt, same length as the speech.
    pub noise: Vec<f64>,
    /// Gain applied to the raw noise excerpt.
    pub gain: f64,
    /// Start of the excerpt within the noise recording.
    pub offset: usize,
    /// Active speech level of the input speech, dB.
    pub speech_level_db: f64,
}

/// Mixes a seeded random excerpt of `noise` under `speech` so that the
/// active speech level exceeds the mean noise power by `snr_db` dB.
/// The noise must be at least as long as the speech.
pub fn mix_at_snr(speech: &[f64], noise: &[f64], snr_db: f64, seed: u64) -> Result<MixResult> {
    let speech_level_db = active_speech_level(speech)?;
    if noise.len() < speech.len() {
        return Err(Error::NoiseTooShort { needed: speech.len(), got: noise.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen_range(0..=noise.len() - speech.len());
    let seg = &noise[offset..offset + speech.len()];
    let mean_pow = seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64;
    if mean_pow <= 0.0 {
        return Err(Error::SilentNoise);
    }
    let noise_level_db = 10.0 * mean_pow.log10();
    let gain = 10f64.powf((speech_level_db - snr_db - noise_level_db) / 20.0);
    let scaled: Vec<f64> = seg.iter().map(|&v| gain * v).collect();
    let mixture: Vec<f64> = speech.iter().zip(&scaled).map(|(s, n)| s + n).collect();
    Ok(MixResult {
        mixture,
        speech: speech.to_vec(),
        noise: scaled,
        gain,
        offset,
        speech_level_db,
    })
}
