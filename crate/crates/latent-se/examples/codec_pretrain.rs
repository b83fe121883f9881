//! Pretrain the desk-scale toy codec on synthetic clean speech and report
//! held-out reconstruction SI-SDR per epoch.
//!
//! ```bash
//! cargo run --release -p latent-se --example codec_pretrain
//! ```

use latent_se::audio::Waveform;
use latent_se::codec::{pretrain_codec, CodecConfig, CodecPretrainConfig};
use latent_se::dataset::{make_toy_dataset, MixtureSpec, NoiseKind};

fn main() {
    let spec = MixtureSpec {
        snr_db_low: -6.0,
        snr_db_high: 3.0,
        segment_seconds: 0.5,
        sample_rate: 8000,
        seed: 11,
    };
    let count = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200usize);
    let epochs = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(CodecPretrainConfig::desk().epochs);
    let clean: Vec<Waveform> = make_toy_dataset(&spec, count, &NoiseKind::default())
        .unwrap()
        .into_iter()
        .map(|u| u.clean)
        .collect();

    let cfg = CodecPretrainConfig {
        epochs,
        ..CodecPretrainConfig::desk()
    };
    let start = std::time::Instant::now();
    let (codec, logs) = pretrain_codec(&clean, &CodecConfig::desk(), &cfg).expect("pretraining");
    for log in &logs {
        println!(
            "epoch {:>3}  loss {:>9.5}  si_sdr(q) {:>7.2} dB  si_sdr(ae) {:>7.2} dB  train(ae) {:>7.2} dB  usage {:?}",
            log.epoch,
            log.train_loss,
            log.valid_si_sdr_db,
            log.valid_si_sdr_unquantized_db,
            log.train_si_sdr_unquantized_db,
            log.codebook_usage
                .iter()
                .map(|u| (u * 100.0).round() / 100.0)
                .collect::<Vec<_>>()
        );
    }
    println!(
        "done in {:.1} s; codebooks frozen: {}",
        start.elapsed().as_secs_f64(),
        codec.codebooks.frozen
    );
}
