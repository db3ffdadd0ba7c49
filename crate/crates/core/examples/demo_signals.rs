//! Writes a pair of demo WAV files (a speech-like signal and a noise bed)
//! so the `maskloss` CLI can be tried without any recordings at hand:
//!
//! ```sh
//! cargo run -p maskloss --example demo_signals -- /tmp/demo
//! target/release/maskloss mix --speech /tmp/demo/speech.wav \
//!     --noise /tmp/demo/noise.wav --snr 5 --out /tmp/demo/mix.wav --components
//! ```

use maskloss::signal::write_wav;
use maskloss::synth::{speech_like, white_noise};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "demo".into());
    std::fs::create_dir_all(&dir)?;

    let len = 4 * 16000; // four seconds at 16 kHz
    let speech = speech_like(len, 7);
    let noise = white_noise(len, 11, 0.05);

    let speech_path = format!("{dir}/speech.wav");
    let noise_path = format!("{dir}/noise.wav");
    write_wav(&speech_path, &speech)?;
    write_wav(&noise_path, &noise)?;
    println!("wrote {speech_path} and {noise_path}");
    Ok(())
}
