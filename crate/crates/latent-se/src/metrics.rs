//! Intrusive evaluation metrics: scale-invariant SDR, log-spectral
//! distance, token accuracy, the per-utterance report, and the
//! codec-fidelity-degradation probe for fine-tuned encoders.

use crate::audio::Waveform;
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::rvq::TokenGrid;
use serde::Serialize;

pub const SI_SDR_CLAMP_DB: f64 = 60.0;

/// Scale-invariant SDR in dB: project `est` onto `reference`, then
/// 10·log10(‖target‖²/‖residual‖²), clamped to ±60 dB.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::ShapeMismatch {
            context: "si_sdr".into(),
            expected: format!("{} samples", reference.len()),
            got: format!("{}", est.len()),
        });
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    if ref_energy <= 0.0 {
        return Err(Error::InvalidArgument("si_sdr reference has zero energy".into()));
    }
    let dot: f64 = est.iter().zip(reference).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let residual_energy: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let d = e - alpha * r;
            d * d
        })
        .sum();
    if residual_energy <= 0.0 {
        return Ok(SI_SDR_CLAMP_DB);
    }
    if target_energy <= 0.0 {
        return Ok(-SI_SDR_CLAMP_DB);
    }
    Ok((10.0 * (target_energy / residual_energy).log10())
        .clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}

/// SI-SDR over the overlapping prefix of two waveforms.
pub fn si_sdr_prefix(est: &Waveform, reference: &Waveform) -> Result<f64> {
    let n = est.len().min(reference.len());
    si_sdr(&est.samples[..n], &reference.samples[..n])
}

const LSD_MAG_FLOOR: f64 = 1e-8;

fn magnitude_frames(samples: &[f64], fft: usize, hop: usize) -> Vec<Vec<f64>> {
    assert!(samples.len() >= fft, "signal shorter than fft size");
    let n = 1 + (samples.len() - fft) / hop;
    let bins = fft / 2 + 1;
    let window: Vec<f64> = (0..fft)
        .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / fft as f64).cos()))
        .collect();
    let mut out = Vec::with_capacity(n);
    for f in 0..n {
        let mut mags = Vec::with_capacity(bins);
        for b in 0..bins {
            let mut re = 0.0;
            let mut im = 0.0;
            for j in 0..fft {
                let v = samples[f * hop + j] * window[j];
                let phase = std::f64::consts::TAU * j as f64 * b as f64 / fft as f64;
                re += v * phase.cos();
                im -= v * phase.sin();
            }
            mags.push((re * re + im * im).sqrt().max(LSD_MAG_FLOOR));
        }
        out.push(mags);
    }
    out
}

/// RMS over frames and bins of 20·(log10|S_est| − log10|S_ref|), in dB.
pub fn log_spectral_distance(
    est: &[f64],
    reference: &[f64],
    fft: usize,
    hop: usize,
) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::ShapeMismatch {
            context: "log_spectral_distance".into(),
            expected: format!("{} samples", reference.len()),
            got: format!("{}", est.len()),
        });
    }
    let se = magnitude_frames(est, fft, hop);
    let sr = magnitude_frames(reference, fft, hop);
    let mut total = 0.0;
    let mut count = 0usize;
    for (fe, fr) in se.iter().zip(&sr) {
        for (me, mr) in fe.iter().zip(fr) {
            let d = 20.0 * (me.log10() - mr.log10());
            total += d * d;
            count += 1;
        }
    }
    Ok((total / count as f64).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct TokenAccuracy {
    pub per_stage: Vec<f64>,
    pub overall: f64,
}

/// Fraction of exactly matching indices, per stage and overall.
pub fn token_accuracy(pred: &TokenGrid, reference: &TokenGrid) -> Result<TokenAccuracy> {
    if pred.num_stages() != reference.num_stages() || pred.num_frames() != reference.num_frames()
    {
        return Err(Error::ShapeMismatch {
            context: "token_accuracy".into(),
            expected: format!("{}×{}", reference.num_stages(), reference.num_frames()),
            got: format!("{}×{}", pred.num_stages(), pred.num_frames()),
        });
    }
    let frames = pred.num_frames().max(1);
    let mut per_stage = Vec::with_capacity(pred.num_stages());
    let mut matches_total = 0usize;
    for (ps, rs) in pred.stages.iter().zip(&reference.stages) {
        let matches = ps.iter().zip(rs).filter(|(a, b)| a == b).count();
        matches_total += matches;
        per_stage.push(matches as f64 / frames as f64);
    }
    let overall = matches_total as f64 / (frames * pred.num_stages().max(1)) as f64;
    Ok(TokenAccuracy { per_stage, overall })
}

/// Per-utterance evaluation row.
#[derive(Debug, Clone, Serialize)]
pub struct UtteranceMetrics {
    pub utterance: usize,
    pub si_sdr_db: f64,
    pub noisy_si_sdr_db: f64,
    pub si_sdr_improvement_db: f64,
    pub log_spectral_distance_db: f64,
    pub latent_mse: f64,
    pub token_accuracy_per_stage: Vec<f64>,
    pub token_accuracy_overall: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub per_utterance: Vec<UtteranceMetrics>,
    pub flops_per_second_of_audio: f64,
}

impl MetricReport {
    fn mean(&self, f: impl Fn(&UtteranceMetrics) -> f64) -> f64 {
        if self.per_utterance.is_empty() {
            return f64::NAN;
        }
        self.per_utterance.iter().map(&f).sum::<f64>() / self.per_utterance.len() as f64
    }

    pub fn mean_si_sdr_db(&self) -> f64 {
        self.mean(|u| u.si_sdr_db)
    }

    pub fn mean_improvement_db(&self) -> f64 {
        self.mean(|u| u.si_sdr_improvement_db)
    }

    pub fn mean_lsd_db(&self) -> f64 {
        self.mean(|u| u.log_spectral_distance_db)
    }

    pub fn mean_latent_mse(&self) -> f64 {
        self.mean(|u| u.latent_mse)
    }

    pub fn mean_token_accuracy(&self) -> f64 {
        self.mean(|u| u.token_accuracy_overall)
    }

    /// CSV with a header row; one row per utterance plus an aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "utterance,si_sdr_db,noisy_si_sdr_db,si_sdr_improvement_db,log_spectral_distance_db,latent_mse,token_accuracy_overall,flops_per_second_of_audio\n",
        );
        for u in &self.per_utterance {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.3e}\n",
                u.utterance,
                u.si_sdr_db,
                u.noisy_si_sdr_db,
                u.si_sdr_improvement_db,
                u.log_spectral_distance_db,
                u.latent_mse,
                u.token_accuracy_overall,
                self.flops_per_second_of_audio,
            ));
        }
        out.push_str(&format!(
            "mean,{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.3e}\n",
            self.mean_si_sdr_db(),
            self.mean(|u| u.noisy_si_sdr_db),
            self.mean_improvement_db(),
            self.mean_lsd_db(),
            self.mean_latent_mse(),
            self.mean_token_accuracy(),
            self.flops_per_second_of_audio,
        ));
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>9} {:>12} {:>12} {:>10} {:>12} {:>10}\n",
            "utterance", "si_sdr_db", "si_sdri_db", "lsd_db", "latent_mse", "tok_acc"
        ));
        for u in &self.per_utterance {
            out.push_str(&format!(
                "{:>9} {:>12.3} {:>12.3} {:>10.3} {:>12.5} {:>10.3}\n",
                u.utterance,
                u.si_sdr_db,
                u.si_sdr_improvement_db,
                u.log_spectral_distance_db,
                u.latent_mse,
                u.token_accuracy_overall
            ));
        }
        out.push_str(&format!(
            "{:>9} {:>12.3} {:>12.3} {:>10.3} {:>12.5} {:>10.3}\n",
            "mean",
            self.mean_si_sdr_db(),
            self.mean_improvement_db(),
            self.mean_lsd_db(),
            self.mean_latent_mse(),
            self.mean_token_accuracy()
        ));
        out.push_str(&format!(
            "flops_per_second_of_audio: {:.3e}\n",
            self.flops_per_second_of_audio
        ));
        out
    }
}

/// Clean-speech reconstruction deltas of a tuned codec against the frozen
/// reference: Δ SI-SDR and Δ LSD, per utterance and averaged.
#[derive(Debug, Clone, Serialize)]
pub struct FidelityDelta {
    pub per_utterance_si_sdr_delta_db: Vec<f64>,
    pub per_utterance_lsd_delta_db: Vec<f64>,
    pub si_sdr_delta_db: f64,
    pub lsd_delta_db: f64,
    pub reference_si_sdr_db: f64,
    pub tuned_si_sdr_db: f64,
}

/// Feed clean waveforms through the tuned encoder + frozen quantizer and
/// decoder, and through the reference codec, and report the differences.
pub fn codec_fidelity_delta(
    tuned: &Codec,
    reference: &Codec,
    clean_set: &[Waveform],
    fft: usize,
    hop: usize,
) -> Result<FidelityDelta> {
    if clean_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut si_deltas = Vec::with_capacity(clean_set.len());
    let mut lsd_deltas = Vec::with_capacity(clean_set.len());
    let mut ref_total = 0.0;
    let mut tuned_total = 0.0;
    for clean in clean_set {
        let rec_ref = reference.reconstruct(clean)?;
        let rec_tuned = tuned.reconstruct(clean)?;
        let prefix = rec_ref.len().min(rec_tuned.len()).min(clean.len());
        let si_ref = si_sdr(&rec_ref.samples[..prefix], &clean.samples[..prefix])?;
        let si_tuned = si_sdr(&rec_tuned.samples[..prefix], &clean.samples[..prefix])?;
        let lsd_ref =
            log_spectral_distance(&rec_ref.samples[..prefix], &clean.samples[..prefix], fft, hop)?;
        let lsd_tuned = log_spectral_distance(
            &rec_tuned.samples[..prefix],
            &clean.samples[..prefix],
            fft,
            hop,
        )?;
        ref_total += si_ref;
        tuned_total += si_tuned;
        si_deltas.push(si_tuned - si_ref);
        lsd_deltas.push(lsd_tuned - lsd_ref);
    }
    let n = clean_set.len() as f64;
    Ok(FidelityDelta {
        si_sdr_delta_db: si_deltas.iter().sum::<f64>() / n,
        lsd_delta_db: lsd_deltas.iter().sum::<f64>() / n,
        per_utterance_si_sdr_delta_db: si_deltas,
        per_utterance_lsd_delta_db: lsd_deltas,
        reference_si_sdr_db: ref_total / n,
        tuned_si_sdr_db: tuned_total / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn si_sdr_worked_instance() {
        // ref=(1,0,0,0), est=(1,1,0,0): target=(1,0,0,0), residual=(0,1,0,0)
        // → 10·log10(1/1) = 0 dB.
        let v = si_sdr(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(v.abs() < 1e-12, "expected 0 dB, got {v}");
    }

    #[test]
    fn si_sdr_scaled_estimate_clamps_high() {
        let reference = [0.3, -0.2, 0.7, 0.1];
        let est: Vec<f64> = reference.iter().map(|v| v * 2.0).collect();
        assert_eq!(si_sdr(&est, &reference).unwrap(), SI_SDR_CLAMP_DB);
    }

    #[test]
    fn si_sdr_orthogonal_clamps_low() {
        let v = si_sdr(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_eq!(v, -SI_SDR_CLAMP_DB);
    }

    #[test]
    fn si_sdr_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reference: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let est: Vec<f64> = reference
            .iter()
            .map(|v| v + rng.gen_range(-0.3..0.3))
            .collect();
        let base = si_sdr(&est, &reference).unwrap();
        for alpha in [0.1, 2.0, 17.5] {
            let scaled: Vec<f64> = est.iter().map(|v| v * alpha).collect();
            let s = si_sdr(&scaled, &reference).unwrap();
            assert!((s - base).abs() < 1e-9, "alpha {alpha}: {s} vs {base}");
        }
    }

    #[test]
    fn si_sdr_rejects_zero_reference() {
        assert!(si_sdr(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(si_sdr(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn lsd_zero_for_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sig: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = log_spectral_distance(&sig, &sig, 128, 32).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn lsd_uniform_gain_is_exact_offset() {
        // est = 10·ref → every bin differs by 20·log10(10) = 20 dB exactly,
        // provided no magnitude hits the floor.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reference: Vec<f64> = (0..512).map(|_| rng.gen_range(0.2..1.0)).collect();
        let est: Vec<f64> = reference.iter().map(|v| v * 10.0).collect();
        let d = log_spectral_distance(&est, &reference, 128, 32).unwrap();
        assert!((d - 20.0).abs() < 1e-9, "got {d}");
    }

    #[test]
    fn lsd_matches_independent_dft_oracle() {
        // Straightforward O(n²) DFT oracle with the same Hann window.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fft = 64;
        let hop = 16;
        let oracle = |x: &[f64], f: usize, b_: usize| -> f64 {
            let mut re = 0.0;
            let mut im = 0.0;
            for j in 0..fft {
                let w = 0.5 * (1.0 - (std::f64::consts::TAU * j as f64 / fft as f64).cos());
                let v = x[f * hop + j] * w;
                re += v * (std::f64::consts::TAU * (j * b_) as f64 / fft as f64).cos();
                im -= v * (std::f64::consts::TAU * (j * b_) as f64 / fft as f64).sin();
            }
            (re * re + im * im).sqrt().max(1e-8)
        };
        let frames = 1 + (a.len() - fft) / hop;
        let bins = fft / 2 + 1;
        let mut total = 0.0;
        for f in 0..frames {
            for bin in 0..bins {
                let d = 20.0 * (oracle(&a, f, bin).log10() - oracle(&b, f, bin).log10());
                total += d * d;
            }
        }
        let expected = (total / (frames * bins) as f64).sqrt();
        let got = log_spectral_distance(&a, &b, fft, hop).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn token_accuracy_exact_match_and_single_flip() {
        let reference = TokenGrid::new(vec![(0..10).collect(), vec![3; 10]], 16).unwrap();
        let acc = token_accuracy(&reference, &reference).unwrap();
        assert!(acc.per_stage.iter().all(|&a| a == 1.0));
        assert_eq!(acc.overall, 1.0);

        let mut flipped = reference.clone();
        flipped.stages[0][4] = 15;
        let acc = token_accuracy(&flipped, &reference).unwrap();
        assert!((acc.per_stage[0] - 0.9).abs() < 1e-12);
        assert_eq!(acc.per_stage[1], 1.0);
        assert!((acc.overall - 0.95).abs() < 1e-12);
    }

    #[test]
    fn token_accuracy_random_vs_random_near_one_over_k() {
        // ≥ 10⁴ tokens, K = 64: expect mean 1/64 within 3σ binomial.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n_tokens = 20_000usize;
        let k = 64usize;
        let a = TokenGrid::new(
            vec![(0..n_tokens).map(|_| rng.gen_range(0..k)).collect()],
            k,
        )
        .unwrap();
        let b = TokenGrid::new(
            vec![(0..n_tokens).map(|_| rng.gen_range(0..k)).collect()],
            k,
        )
        .unwrap();
        let acc = token_accuracy(&a, &b).unwrap().overall;
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n_tokens as f64).sqrt();
        assert!(
            (acc - p).abs() < 3.0 * sigma,
            "accuracy {acc} vs expected {p} ± {}",
            3.0 * sigma
        );
    }

    #[test]
    fn token_accuracy_invariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = 8usize;
        let pred = TokenGrid::new(vec![(0..50).map(|_| rng.gen_range(0..k)).collect()], k).unwrap();
        let reference =
            TokenGrid::new(vec![(0..50).map(|_| rng.gen_range(0..k)).collect()], k).unwrap();
        let base = token_accuracy(&pred, &reference).unwrap().overall;
        // Apply the same permutation to both grids.
        let perm: Vec<usize> = vec![3, 0, 7, 1, 5, 2, 6, 4];
        let relabel = |g: &TokenGrid| {
            TokenGrid::new(
                g.stages
                    .iter()
                    .map(|s| s.iter().map(|&i| perm[i]).collect())
                    .collect(),
                k,
            )
            .unwrap()
        };
        let after = token_accuracy(&relabel(&pred), &relabel(&reference))
            .unwrap()
            .overall;
        assert_eq!(base, after);
    }

    #[test]
    fn token_accuracy_shape_mismatch_rejected() {
        let a = TokenGrid::new(vec![vec![0; 5]], 4).unwrap();
        let b = TokenGrid::new(vec![vec![0; 6]], 4).unwrap();
        assert!(token_accuracy(&a, &b).is_err());
    }

    #[test]
    fn report_aggregates_are_means() {
        let report = MetricReport {
            per_utterance: vec![
                UtteranceMetrics {
                    utterance: 0,
                    si_sdr_db: 10.0,
                    noisy_si_sdr_db: 0.0,
                    si_sdr_improvement_db: 10.0,
                    log_spectral_distance_db: 2.0,
                    latent_mse: 0.5,
                    token_accuracy_per_stage: vec![1.0],
                    token_accuracy_overall: 1.0,
                },
                UtteranceMetrics {
                    utterance: 1,
                    si_sdr_db: 20.0,
                    noisy_si_sdr_db: 0.0,
                    si_sdr_improvement_db: 20.0,
                    log_spectral_distance_db: 4.0,
                    latent_mse: 1.5,
                    token_accuracy_per_stage: vec![0.0],
                    token_accuracy_overall: 0.0,
                },
            ],
            flops_per_second_of_audio: 1e6,
        };
        assert!((report.mean_si_sdr_db() - 15.0).abs() < 1e-12);
        assert!((report.mean_lsd_db() - 3.0).abs() < 1e-12);
        let csv = report.to_csv();
        assert!(csv.starts_with("utterance,si_sdr_db"));
        assert_eq!(csv.lines().count(), 4); // header + 2 rows + mean
    }
}
