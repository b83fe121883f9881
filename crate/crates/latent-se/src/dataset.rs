//! Synthetic paired speech data: seeded harmonic-complex "utterances",
//! filtered noise, exact-SNR mixing, and dataset directory I/O.

use crate::audio::{read_wav, write_wav, Waveform};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub snr_db_low: f64,
    pub snr_db_high: f64,
    pub segment_seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db_low > self.snr_db_high {
            return Err(Error::Config(format!(
                "snr_db_low {} > snr_db_high {}",
                self.snr_db_low, self.snr_db_high
            )));
        }
        let samples = self.segment_seconds * self.sample_rate as f64;
        if (samples - samples.round()).abs() > 1e-9 || samples < 1.0 {
            return Err(Error::Config(format!(
                "segment_seconds * sample_rate must be a positive integer, got {samples}"
            )));
        }
        Ok(())
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_seconds * self.sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseKind {
    White,
    Pink,
    /// Sum of random sinusoids confined to [low_hz, high_hz].
    Bandpass { low_hz: f64, high_hz: f64 },
}

impl Default for NoiseKind {
    fn default() -> Self {
        NoiseKind::Bandpass {
            low_hz: 2000.0,
            high_hz: 3600.0,
        }
    }
}

/// One noisy/clean pair; `clean` already carries the mixture's peak gain.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub clean: Waveform,
    pub noisy: Waveform,
    pub snr_db: f64,
}

/// Mix `clean + α·noise` with α chosen so the clean-to-scaled-noise energy
/// ratio equals `snr_db` exactly, then apply a common peak gain so neither
/// stored signal exceeds 0.99.
pub fn synth_mixture(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Utterance> {
    if clean.len() != noise.len() {
        return Err(Error::ShapeMismatch {
            context: "synth_mixture".into(),
            expected: format!("{} samples", clean.len()),
            got: format!("{}", noise.len()),
        });
    }
    let clean_energy = clean.energy();
    let noise_energy = noise.energy();
    if clean_energy <= 0.0 {
        return Err(Error::InvalidArgument("clean signal has zero energy".into()));
    }
    if noise_energy <= 0.0 {
        return Err(Error::InvalidArgument("noise signal has zero energy".into()));
    }
    let alpha = if snr_db.is_infinite() && snr_db > 0.0 {
        0.0
    } else {
        (clean_energy / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt()
    };
    let mixture: Vec<f64> = clean
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(c, n)| c + alpha * n)
        .collect();
    let peak = mixture
        .iter()
        .chain(&clean.samples)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.99 { 0.99 / peak } else { 1.0 };
    Ok(Utterance {
        clean: Waveform::new(
            clean.samples.iter().map(|c| c * gain).collect(),
            clean.sample_rate,
        )?,
        noisy: Waveform::new(mixture.iter().map(|m| m * gain).collect(), clean.sample_rate)?,
        snr_db,
    })
}

/// SNR implied by a stored pair: clean energy over (noisy − clean) energy.
pub fn measured_snr_db(clean: &Waveform, noisy: &Waveform) -> f64 {
    let noise_energy: f64 = clean
        .samples
        .iter()
        .zip(&noisy.samples)
        .map(|(c, m)| (m - c) * (m - c))
        .sum();
    10.0 * (clean.energy() / noise_energy).log10()
}

/// Harmonic complex with a slow amplitude envelope and onset/offset ramps.
pub fn synth_clean(rng: &mut ChaCha8Rng, num_samples: usize, sample_rate: u32) -> Waveform {
    let sr = sample_rate as f64;
    let f0 = rng.gen_range(80.0..300.0);
    let max_harmonics = ((0.45 * sr / f0).floor() as usize).clamp(1, 6);
    let harmonics: Vec<(f64, f64, f64)> = (1..=max_harmonics)
        .map(|h| {
            let amp = rng.gen_range(0.7..1.0) / (h as f64).powf(1.8);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (h as f64 * f0, amp, phase)
        })
        .collect();
    let env_rate = rng.gen_range(0.5..2.0);
    let env_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let ramp = (0.01 * sr) as usize; // 10 ms onset/offset
    let mut samples: Vec<f64> = (0..num_samples)
        .map(|i| {
            let t = i as f64 / sr;
            let mut v = 0.0;
            for &(freq, amp, phase) in &harmonics {
                v += amp * (std::f64::consts::TAU * freq * t + phase).sin();
            }
            let env = 0.6 + 0.4 * (std::f64::consts::TAU * env_rate * t + env_phase).sin();
            let edge = ((i + 1).min(ramp) as f64 / ramp as f64)
                .min((num_samples - i).min(ramp) as f64 / ramp as f64);
            v * env * edge
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target = rng.gen_range(0.3..0.6);
    let scale = if peak > 0.0 { target / peak } else { 0.0 };
    samples.iter_mut().for_each(|v| *v *= scale);
    Waveform::new(samples, sample_rate).expect("synthesized clean signal is valid")
}

pub fn synth_noise(
    rng: &mut ChaCha8Rng,
    num_samples: usize,
    sample_rate: u32,
    kind: &NoiseKind,
) -> Waveform {
    let sr = sample_rate as f64;
    let samples: Vec<f64> = match kind {
        NoiseKind::White => (0..num_samples).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        NoiseKind::Pink => {
            // One-pole lowpass over white noise.
            let mut state = 0.0;
            (0..num_samples)
                .map(|_| {
                    let white: f64 = rng.gen_range(-1.0..1.0);
                    state = 0.95 * state + 0.05 * white;
                    state * 10.0
                })
                .collect()
        }
        NoiseKind::Bandpass { low_hz, high_hz } => {
            let partials: Vec<(f64, f64, f64)> = (0..40)
                .map(|_| {
                    (
                        rng.gen_range(*low_hz..*high_hz),
                        rng.gen_range(0.5..1.0),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            (0..num_samples)
                .map(|i| {
                    let t = i as f64 / sr;
                    partials
                        .iter()
                        .map(|&(f, a, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                        .sum::<f64>()
                        / 6.0
                })
                .collect()
        }
    };
    Waveform::new(samples, sample_rate).expect("synthesized noise is valid")
}

/// Deterministic paired dataset: `count` utterances with SNRs drawn
/// uniformly from the spec range.
pub fn make_toy_dataset(
    spec: &MixtureSpec,
    count: usize,
    noise_kind: &NoiseKind,
) -> Result<Vec<Utterance>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("dataset count must be >= 1".into()));
    }
    let len = spec.segment_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let clean = synth_clean(&mut rng, len, spec.sample_rate);
        let noise = synth_noise(&mut rng, len, spec.sample_rate, noise_kind);
        let snr = rng.gen_range(spec.snr_db_low..=spec.snr_db_high);
        out.push(synth_mixture(&clean, &noise, snr)?);
    }
    Ok(out)
}

/// Deterministic train/validation split: the trailing fraction validates.
pub fn split_dataset(utterances: Vec<Utterance>, valid_fraction: f64) -> (Vec<Utterance>, Vec<Utterance>) {
    let n_valid = ((utterances.len() as f64 * valid_fraction).round() as usize)
        .clamp(1, utterances.len().saturating_sub(1).max(1));
    let split = utterances.len() - n_valid.min(utterances.len());
    let mut train = utterances;
    let valid = train.split_off(split);
    (train, valid)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    clean: String,
    noisy: String,
    snr_db: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    sample_rate: u32,
    entries: Vec<ManifestEntry>,
}

/// Write wav pairs plus a manifest.json into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    let mut entries = Vec::with_capacity(utterances.len());
    for (i, utt) in utterances.iter().enumerate() {
        let clean_name = format!("clean_{i:04}.wav");
        let noisy_name = format!("noisy_{i:04}.wav");
        write_wav(dir.join(&clean_name), &utt.clean)?;
        write_wav(dir.join(&noisy_name), &utt.noisy)?;
        entries.push(ManifestEntry {
            clean: clean_name,
            noisy: noisy_name,
            snr_db: utt.snr_db,
        });
    }
    let manifest = Manifest {
        version: 1,
        sample_rate: utterances
            .first()
            .map(|u| u.clean.sample_rate)
            .unwrap_or(8000),
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)
        .map_err(|e| Error::io(format!("write {}/manifest.json", dir.display()), e))?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let json = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(format!("read {}", manifest_path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Config(format!("manifest parse: {e}")))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        out.push(Utterance {
            clean: read_wav(dir.join(&entry.clean))?,
            noisy: read_wav(dir.join(&entry.noisy))?,
            snr_db: entry.snr_db,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> MixtureSpec {
        MixtureSpec {
            snr_db_low: -6.0,
            snr_db_high: 3.0,
            segment_seconds: 0.5,
            sample_rate: 8000,
            seed,
        }
    }

    #[test]
    fn zero_snr_means_equal_energies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clean = synth_clean(&mut rng, 4000, 8000);
        let noise = synth_noise(&mut rng, 4000, 8000, &NoiseKind::default());
        let pair = synth_mixture(&clean, &noise, 0.0).unwrap();
        let noise_energy: f64 = pair
            .noisy
            .samples
            .iter()
            .zip(&pair.clean.samples)
            .map(|(m, c)| (m - c) * (m - c))
            .sum();
        let rel = (noise_energy - pair.clean.energy()).abs() / pair.clean.energy();
        assert!(rel < 1e-9, "relative energy gap {rel}");
    }

    #[test]
    fn snr_exact_across_the_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clean = synth_clean(&mut rng, 4000, 8000);
        let noise = synth_noise(&mut rng, 4000, 8000, &NoiseKind::White);
        for snr in [-6.0, -3.0, 0.0, 1.5, 3.0] {
            let pair = synth_mixture(&clean, &noise, snr).unwrap();
            let measured = measured_snr_db(&pair.clean, &pair.noisy);
            assert!(
                (measured - snr).abs() < 1e-9,
                "snr {snr}: measured {measured}"
            );
        }
    }

    #[test]
    fn infinite_snr_returns_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clean = synth_clean(&mut rng, 2000, 8000);
        let noise = synth_noise(&mut rng, 2000, 8000, &NoiseKind::White);
        let pair = synth_mixture(&clean, &noise, f64::INFINITY).unwrap();
        assert_eq!(pair.noisy.samples, pair.clean.samples);
    }

    #[test]
    fn zero_energy_inputs_rejected() {
        let silent = Waveform {
            samples: vec![0.0; 100],
            sample_rate: 8000,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tone = synth_clean(&mut rng, 100, 8000);
        assert!(synth_mixture(&silent, &tone, 0.0).is_err());
        assert!(synth_mixture(&tone, &silent, 0.0).is_err());
    }

    #[test]
    fn same_seed_bit_identical_dataset() {
        let a = make_toy_dataset(&spec(42), 5, &NoiseKind::default()).unwrap();
        let b = make_toy_dataset(&spec(42), 5, &NoiseKind::default()).unwrap();
        assert_eq!(a, b);
        let c = make_toy_dataset(&spec(43), 5, &NoiseKind::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn drawn_snrs_within_range() {
        let data = make_toy_dataset(&spec(7), 32, &NoiseKind::default()).unwrap();
        for utt in &data {
            assert!(utt.snr_db >= -6.0 && utt.snr_db <= 3.0, "snr {}", utt.snr_db);
        }
    }

    #[test]
    fn stored_pair_peaks_bounded() {
        let data = make_toy_dataset(&spec(8), 16, &NoiseKind::White).unwrap();
        for utt in &data {
            assert!(utt.noisy.peak() <= 0.99 + 1e-12);
            assert!(utt.clean.peak() <= 0.99 + 1e-12);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = spec(1);
        s.snr_db_low = 5.0; // above high
        assert!(s.validate().is_err());
        let mut s2 = spec(1);
        s2.segment_seconds = 0.1234567; // non-integral sample count at 8 kHz
        assert!(s2.validate().is_err());
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = make_toy_dataset(&spec(9), 3, &NoiseKind::default()).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (orig, loaded) in data.iter().zip(&back) {
            assert_eq!(orig.clean.len(), loaded.clean.len());
            assert!((orig.snr_db - loaded.snr_db).abs() < 1e-12);
            for (a, b) in orig.clean.samples.iter().zip(&loaded.clean.samples) {
                assert!((a - b).abs() < 1.0 / 32768.0);
            }
        }
    }

    #[test]
    fn split_is_deterministic_and_proportional() {
        let data = make_toy_dataset(&spec(10), 20, &NoiseKind::default()).unwrap();
        let (train, valid) = split_dataset(data, 0.1);
        assert_eq!(train.len(), 18);
        assert_eq!(valid.len(), 2);
    }
}
