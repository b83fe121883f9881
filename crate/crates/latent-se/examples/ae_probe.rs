//! Minimal autoencoder fitting probe: no quantization, pure L2, one or a
//! few utterances. Used to sanity-check that the codec architecture can be
//! optimized at all.

use latent_se::autodiff::Tape;
use latent_se::codec::{decoder_forward_tape, encoder_forward_tape, Codec, CodecConfig};
use latent_se::dataset::{make_toy_dataset, MixtureSpec, NoiseKind};
use latent_se::mat::Mat;
use latent_se::metrics::si_sdr;
use latent_se::optim::AdamW;

fn main() {
    let n_utts: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(400);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(3e-3);

    let spec = MixtureSpec {
        snr_db_low: 0.0,
        snr_db_high: 0.0,
        segment_seconds: 0.5,
        sample_rate: 8000,
        seed: 5,
    };
    let data = make_toy_dataset(&spec, n_utts, &NoiseKind::White).unwrap();
    let waves: Vec<Vec<f64>> = data
        .iter()
        .map(|u| u.clean.samples[..u.clean.len() - u.clean.len() % 64].to_vec())
        .collect();

    let mut codec = Codec::init(CodecConfig::desk(), 1).unwrap();
    let mut opt = AdamW::new(&codec.params, 0.9, 0.95, 0.0);
    for step in 0..steps {
        let mut tape = Tape::new();
        let mut loss_acc = None;
        for w in &waves {
            let wav = tape.constant(Mat::column(w.clone()));
            let lat = encoder_forward_tape(&mut tape, &codec.params, "enc.", &codec.config, wav);
            let out = decoder_forward_tape(&mut tape, &codec.params, &codec.config, lat);
            let d = tape.sub(out, wav);
            let l = if std::env::var("L1").is_ok() {
                let ab = tape.abs(d);
                tape.mean_all(ab)
            } else {
                let sq = tape.sqr(d);
                tape.mean_all(sq)
            };
            loss_acc = Some(match loss_acc {
                None => l,
                Some(acc) => tape.add(acc, l),
            });
        }
        let loss = loss_acc.unwrap();
        let grads = tape.backward(loss, &codec.params).unwrap();
        opt.step(&mut codec.params, &grads, lr);
        if step % 50 == 0 || step + 1 == steps {
            let mut total = 0.0;
            for w in &waves {
                let lat = codec.encode_samples(w);
                let rec = codec.decode(&lat).unwrap();
                total += si_sdr(&rec.samples, w).unwrap();
            }
            println!(
                "step {:>5}  loss {:>12.6e}  train si_sdr {:>7.2} dB",
                step,
                tape.value(loss).at(0, 0),
                total / waves.len() as f64
            );
        }
    }
}
