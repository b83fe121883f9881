//! Trainable toy neural audio codec: strided 1-D convolution encoder,
//! transposed-convolution decoder, and multi-stage RVQ over the latents.
//!
//! Pretraining minimizes time-domain L1 plus multi-resolution log-spectral
//! L1, with codebooks learned by EMA updates behind a straight-through
//! commitment loss. Epoch 0 runs without quantization to fill a latent
//! buffer; codebooks are then seeded by k-means++ on that buffer.

use crate::audio::Waveform;
use crate::autodiff::{ConvSpec, ConvTSpec, NodeId, Tape};
use crate::dataset::split_dataset;
use crate::dataset::Utterance;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::metrics::si_sdr;
use crate::optim::{clip_global_norm, lr_schedule, AdamW};
use crate::params::{load_checkpoint, save_checkpoint, DType, ParamStore};
use crate::rvq::{
    kmeans_pp, rvq_dequantize, rvq_quantize, squared_distance, CodebookSet, CodebookTrainer,
    LatentSeq, SoftLabelExponent, TokenGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub latent_dim: usize,
    pub num_stages: usize,
    pub codebook_size: usize,
    pub strides: Vec<usize>,
    pub enc_channels: Vec<usize>,
    pub enc_kernels: Vec<usize>,
    pub reserve_zero_codeword: bool,
    pub soft_label_exponent: SoftLabelExponent,
    pub soft_label_temperature: f64,
}

impl CodecConfig {
    /// Desk-scale configuration used throughout the test suite.
    pub fn desk() -> Self {
        Self {
            sample_rate: 8000,
            latent_dim: 16,
            num_stages: 4,
            codebook_size: 64,
            strides: vec![64],
            enc_channels: vec![32],
            enc_kernels: vec![383],
            reserve_zero_codeword: true,
            soft_label_exponent: SoftLabelExponent::SquaredDistance,
            soft_label_temperature: 1.0,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty()
            || self.strides.len() != self.enc_channels.len()
            || self.strides.len() != self.enc_kernels.len()
        {
            return Err(Error::Config(
                "strides, enc_channels and enc_kernels must have equal nonzero length".into(),
            ));
        }
        for &k in &self.enc_kernels {
            if k % 2 == 0 {
                return Err(Error::Config(format!("encoder kernels must be odd, got {k}")));
            }
        }
        for &s in &self.strides {
            if s < 2 || s % 2 != 0 {
                return Err(Error::Config(format!("strides must be even and >= 2, got {s}")));
            }
        }
        if self.latent_dim == 0 || self.num_stages == 0 || self.codebook_size < 2 {
            return Err(Error::Config("latent_dim, num_stages, codebook_size too small".into()));
        }
        Ok(())
    }
}

/// Encoder, decoder, and codebooks. Parameters are immutable after
/// pretraining; encode/decode/quantize are pure functions.
#[derive(Debug, Clone)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamStore,
    pub codebooks: CodebookSet,
}

fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

/// Add encoder parameters under `prefix` ("enc." inside the codec; FT
/// variants register a trainable copy under their own prefix).
pub fn add_encoder_params(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &CodecConfig,
    rng: &mut ChaCha8Rng,
) {
    let mut in_ch = 1;
    for (i, ((&out_ch, &kernel), _)) in cfg
        .enc_channels
        .iter()
        .zip(&cfg.enc_kernels)
        .zip(&cfg.strides)
        .enumerate()
    {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        store.add(
            format!("{prefix}conv{i}.w"),
            uniform_mat(rng, out_ch, in_ch * kernel, bound),
        );
        store.add(format!("{prefix}conv{i}.b"), Mat::zeros(1, out_ch));
        in_ch = out_ch;
    }
    let bound = 1.0 / (in_ch as f64).sqrt();
    store.add(
        format!("{prefix}proj.w"),
        uniform_mat(rng, in_ch, cfg.latent_dim, bound),
    );
    store.add(format!("{prefix}proj.b"), Mat::zeros(1, cfg.latent_dim));
}

fn add_decoder_params(store: &mut ParamStore, cfg: &CodecConfig, rng: &mut ChaCha8Rng) {
    let mut in_ch = cfg.latent_dim;
    let n = cfg.strides.len();
    for i in 0..n {
        let enc_layer = n - 1 - i;
        let out_ch = if enc_layer == 0 {
            1
        } else {
            cfg.enc_channels[enc_layer - 1]
        };
        let kernel = 4 * cfg.strides[enc_layer];
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        store.add(
            format!("dec.conv{i}.w"),
            uniform_mat(rng, in_ch, out_ch * kernel, bound),
        );
        store.add(format!("dec.conv{i}.b"), Mat::zeros(1, out_ch));
        in_ch = out_ch;
    }
}

/// Encoder forward on the tape: (samples × 1) node → (frames × latent_dim).
/// Input length must already be a multiple of the downsample factor.
pub fn encoder_forward_tape(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &CodecConfig,
    wav: NodeId,
) -> NodeId {
    let mut x = wav;
    let mut in_ch = 1;
    for (i, ((&out_ch, &kernel), &stride)) in cfg
        .enc_channels
        .iter()
        .zip(&cfg.enc_kernels)
        .zip(&cfg.strides)
        .enumerate()
    {
        let w = tape.param(store, store.id(&format!("{prefix}conv{i}.w")).unwrap());
        let b = tape.param(store, store.id(&format!("{prefix}conv{i}.b")).unwrap());
        let pad = (kernel - 1) / 2;
        x = tape.conv1d(
            x,
            w,
            ConvSpec {
                stride,
                pad_left: pad,
                pad_right: pad,
                kernel,
                in_ch,
                out_ch,
            },
        );
        x = tape.add(x, b);
        x = tape.tanh(x);
        in_ch = out_ch;
    }
    let w = tape.param(store, store.id(&format!("{prefix}proj.w")).unwrap());
    let b = tape.param(store, store.id(&format!("{prefix}proj.b")).unwrap());
    x = tape.matmul(x, w);
    tape.add(x, b)
}

/// Decoder forward on the tape: (frames × latent_dim) → (samples × 1).
pub fn decoder_forward_tape(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &CodecConfig,
    latent: NodeId,
) -> NodeId {
    let mut x = latent;
    let mut in_ch = cfg.latent_dim;
    let n = cfg.strides.len();
    for i in 0..n {
        let enc_layer = n - 1 - i;
        let out_ch = if enc_layer == 0 {
            1
        } else {
            cfg.enc_channels[enc_layer - 1]
        };
        let stride = cfg.strides[enc_layer];
        let kernel = 4 * stride;
        let w = tape.param(store, store.id(&format!("dec.conv{i}.w")).unwrap());
        let b = tape.param(store, store.id(&format!("dec.conv{i}.b")).unwrap());
        x = tape.conv_transpose1d(
            x,
            w,
            ConvTSpec {
                stride,
                pad: 3 * stride / 2,
                kernel,
                in_ch,
                out_ch,
            },
        );
        x = tape.add(x, b);
        if i + 1 < n {
            x = tape.tanh(x);
        }
        in_ch = out_ch;
    }
    x
}

impl Codec {
    /// Fresh codec with seeded random weights and zero codebooks.
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        add_encoder_params(&mut params, "enc.", &config, &mut rng);
        add_decoder_params(&mut params, &config, &mut rng);
        let stages = (0..config.num_stages)
            .map(|_| {
                let mut m = Mat::from_fn(config.codebook_size, config.latent_dim, |_, _| {
                    rng.gen_range(-0.5..0.5)
                });
                if config.reserve_zero_codeword {
                    m.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
                }
                m
            })
            .collect();
        let codebooks = CodebookSet::new(stages, config.reserve_zero_codeword)?;
        Ok(Self {
            config,
            params,
            codebooks,
        })
    }

    pub fn downsample_factor(&self) -> usize {
        self.config.downsample_factor()
    }

    fn check_input(&self, wav: &Waveform) -> Result<usize> {
        if wav.sample_rate != self.config.sample_rate {
            return Err(Error::SampleRateMismatch {
                got: wav.sample_rate,
                expected: self.config.sample_rate,
            });
        }
        let ds = self.downsample_factor();
        if wav.len() < ds {
            return Err(Error::InputTooShort {
                got: wav.len(),
                need: ds,
            });
        }
        if !wav.samples.iter().all(|s| s.is_finite()) {
            return Err(Error::NonFinite("encode input".into()));
        }
        Ok(wav.len() - wav.len() % ds)
    }

    /// Waveform → latent sequence. The trailing partial frame is truncated:
    /// T = ⌊len / downsample_factor⌋.
    pub fn encode(&self, wav: &Waveform) -> Result<LatentSeq> {
        let usable = self.check_input(wav)?;
        Ok(self.encode_samples(&wav.samples[..usable]))
    }

    /// Encode an already-truncated sample slice (length must be a multiple
    /// of the downsample factor).
    pub fn encode_samples(&self, samples: &[f64]) -> LatentSeq {
        let mut tape = Tape::new();
        let wav_node = tape.constant(Mat::column(samples.to_vec()));
        let latent = encoder_forward_tape(&mut tape, &self.params, "enc.", &self.config, wav_node);
        LatentSeq {
            frames: tape.value(latent).clone(),
        }
    }

    /// Latent sequence → waveform of exactly T·downsample_factor samples.
    pub fn decode(&self, latent: &LatentSeq) -> Result<Waveform> {
        if latent.latent_dim() != self.config.latent_dim {
            return Err(Error::ShapeMismatch {
                context: "decode".into(),
                expected: format!("latent dim {}", self.config.latent_dim),
                got: format!("{}", latent.latent_dim()),
            });
        }
        let mut tape = Tape::new();
        let latent_node = tape.constant(latent.frames.clone());
        let out = decoder_forward_tape(&mut tape, &self.params, &self.config, latent_node);
        Waveform::new(tape.value(out).data.clone(), self.config.sample_rate)
    }

    pub fn quantize(&self, latent: &LatentSeq) -> Result<(TokenGrid, LatentSeq)> {
        rvq_quantize(latent, &self.codebooks)
    }

    pub fn dequantize(&self, tokens: &TokenGrid) -> Result<LatentSeq> {
        rvq_dequantize(tokens, &self.codebooks)
    }

    /// Quantize then dequantize: the codeword-sum approximation of `latent`.
    pub fn quantize_roundtrip(&self, latent: &LatentSeq) -> Result<LatentSeq> {
        Ok(self.quantize(latent)?.1)
    }

    /// Waveform → token grid (with the pre-quantization latents).
    pub fn tokenize(&self, wav: &Waveform) -> Result<(TokenGrid, LatentSeq)> {
        let latent = self.encode(wav)?;
        let (tokens, _) = self.quantize(&latent)?;
        Ok((tokens, latent))
    }

    /// Full reconstruction through the quantizer.
    pub fn reconstruct(&self, wav: &Waveform) -> Result<Waveform> {
        let latent = self.encode(wav)?;
        let recon = self.quantize_roundtrip(&latent)?;
        self.decode(&recon)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| Error::Config(format!("codec config serialization: {e}")))?;
        let mut tensors = self.params.tensors();
        for (n, stage) in self.codebooks.stages.iter().enumerate() {
            tensors.push((format!("codebook.{n}"), stage.clone()));
        }
        save_checkpoint(path, &config_json, &tensors, DType::F32)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config_json, tensors) = load_checkpoint(path)?;
        let config: CodecConfig = serde_json::from_str(&config_json)
            .map_err(|e| Error::MalformedCheckpoint(format!("codec config parse: {e}")))?;
        Self::from_tensors(config, &tensors, "")
    }

    /// Rebuild a codec from checkpoint tensors with an optional name prefix
    /// (model checkpoints embed the codec under "codec.").
    pub fn from_tensors(
        config: CodecConfig,
        tensors: &[(String, Mat)],
        prefix: &str,
    ) -> Result<Self> {
        let mut codec = Self::init(config, 0)?;
        let stripped: Vec<(String, Mat)> = tensors
            .iter()
            .filter_map(|(n, m)| {
                n.strip_prefix(prefix).map(|s| (s.to_string(), m.clone()))
            })
            .collect();
        codec.params.load_values(&stripped)?;
        for n in 0..codec.config.num_stages {
            let name = format!("codebook.{n}");
            let found = stripped
                .iter()
                .find(|(t, _)| *t == name)
                .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor {name}")))?;
            codec.codebooks.stages[n] = found.1.clone();
        }
        codec.codebooks.frozen = true;
        Ok(codec)
    }

    /// Tensor list for embedding into another checkpoint under `prefix`.
    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Mat)> {
        let mut tensors: Vec<(String, Mat)> = self
            .params
            .tensors()
            .into_iter()
            .map(|(n, m)| (format!("{prefix}{n}"), m))
            .collect();
        for (n, stage) in self.codebooks.stages.iter().enumerate() {
            tensors.push((format!("{prefix}codebook.{n}"), stage.clone()));
        }
        tensors
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CodecPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub commitment_weight: f64,
    pub time_l1_weight: f64,
    pub time_l2_weight: f64,
    pub spectral_weight: f64,
    pub stft_sizes: Vec<usize>,
    pub ema_decay: f64,
    pub kmeans_lloyd_iters: usize,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl CodecPretrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            max_lr: 3e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            grad_clip: 1.0,
            commitment_weight: 0.25,
            time_l1_weight: 10.0,
            time_l2_weight: 20.0,
            spectral_weight: 0.03,
            stft_sizes: vec![64, 128, 256],
            ema_decay: 0.99,
            kmeans_lloyd_iters: 8,
            valid_fraction: 0.1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_si_sdr_db: f64,
    pub valid_si_sdr_unquantized_db: f64,
    pub train_si_sdr_unquantized_db: f64,
    pub codebook_usage: Vec<f64>,
}

struct StftBasis {
    window: Mat,
    dft_re: Mat,
    dft_im: Mat,
    hop: usize,
}

fn stft_basis(fft: usize) -> StftBasis {
    let bins = fft / 2 + 1;
    let window = Mat::from_fn(1, fft, |_, n| {
        0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / fft as f64).cos())
    });
    let dft_re = Mat::from_fn(fft, bins, |n, b| {
        (std::f64::consts::TAU * n as f64 * b as f64 / fft as f64).cos()
    });
    let dft_im = Mat::from_fn(fft, bins, |n, b| {
        -(std::f64::consts::TAU * n as f64 * b as f64 / fft as f64).sin()
    });
    StftBasis {
        window,
        dft_re,
        dft_im,
        hop: fft / 4,
    }
}

const LOG_POWER_FLOOR: f64 = 1e-6;

/// Log power spectrogram computed outside the tape (for cached targets).
fn log_power_frames(samples: &[f64], basis: &StftBasis) -> Mat {
    let fft = basis.window.cols;
    let n = 1 + (samples.len() - fft) / basis.hop;
    let bins = basis.dft_re.cols;
    let mut out = Mat::zeros(n, bins);
    for f in 0..n {
        for b in 0..bins {
            let mut re = 0.0;
            let mut im = 0.0;
            for j in 0..fft {
                let v = samples[f * basis.hop + j] * basis.window.at(0, j);
                re += v * basis.dft_re.at(j, b);
                im += v * basis.dft_im.at(j, b);
            }
            *out.at_mut(f, b) = (re * re + im * im + LOG_POWER_FLOOR).ln();
        }
    }
    out
}

/// Same computation as [`log_power_frames`] but on the tape.
fn log_power_tape(tape: &mut Tape, wav: NodeId, basis: &StftBasis) -> NodeId {
    let frames = tape.frame_signal(wav, basis.window.cols, basis.hop);
    let window = tape.constant(basis.window.clone());
    let windowed = tape.mul(frames, window);
    let re_mat = tape.constant(basis.dft_re.clone());
    let im_mat = tape.constant(basis.dft_im.clone());
    let re = tape.matmul(windowed, re_mat);
    let im = tape.matmul(windowed, im_mat);
    let re2 = tape.sqr(re);
    let im2 = tape.sqr(im);
    let power = tape.add(re2, im2);
    let floored = tape.add_scalar(power, LOG_POWER_FLOOR);
    tape.ln(floored)
}

/// Train a toy codec on clean waveforms. Returns the frozen codec and
/// per-epoch logs.
pub fn pretrain_codec(
    dataset: &[Waveform],
    codec_cfg: &CodecConfig,
    cfg: &CodecPretrainConfig,
) -> Result<(Codec, Vec<PretrainEpochLog>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut codec = Codec::init(codec_cfg.clone(), cfg.seed)?;
    let ds = codec.downsample_factor();
    let usable: Vec<Vec<f64>> = dataset
        .iter()
        .map(|w| {
            let n = w.len() - w.len() % ds;
            w.samples[..n].to_vec()
        })
        .collect();
    if usable.iter().any(|w| w.is_empty()) {
        return Err(Error::InputTooShort {
            got: dataset.iter().map(|w| w.len()).min().unwrap_or(0),
            need: ds,
        });
    }
    let wrapped: Vec<Utterance> = usable
        .iter()
        .map(|s| {
            let wav = Waveform::new(s.clone(), codec_cfg.sample_rate).unwrap();
            Utterance {
                clean: wav.clone(),
                noisy: wav,
                snr_db: f64::INFINITY,
            }
        })
        .collect();
    let (train, valid) = split_dataset(wrapped, cfg.valid_fraction);

    let bases: Vec<StftBasis> = cfg.stft_sizes.iter().map(|&s| stft_basis(s)).collect();
    // Cached spectral targets per (utterance, resolution).
    let targets: Vec<Vec<Mat>> = train
        .iter()
        .map(|u| bases.iter().map(|b| log_power_frames(&u.clean.samples, b)).collect())
        .collect();

    let mut opt = AdamW::new(&codec.params, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = (total_steps as f64 * cfg.warmup_fraction).round() as usize;
    let mut step = 0usize;

    let mut trainer: Option<CodebookTrainer> = None;
    let mut buffer: Vec<Vec<f64>> = Vec::new(); // latent frames for k-means / reinit
    const BUFFER_CAP: usize = 6000;
    let mut logs = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15));
        use rand::seq::SliceRandom;
        order.shuffle(&mut epoch_rng);

        let mut epoch_loss = 0.0;
        for (batch_id, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut batch_loss: Option<NodeId> = None;
            let mut batch_frames: Vec<Vec<f64>> = Vec::new();
            for &idx in chunk {
                let utt = &train[idx];
                let wav_node = tape.constant(Mat::column(utt.clean.samples.clone()));
                let latent =
                    encoder_forward_tape(&mut tape, &codec.params, "enc.", &codec.config, wav_node);
                let t_frames = tape.value(latent).rows;

                let (dec_in, commit) = if epoch == 0 {
                    (latent, None)
                } else {
                    let latent_seq = LatentSeq {
                        frames: tape.value(latent).clone(),
                    };
                    let (_, recon) = rvq_quantize(&latent_seq, &codec.codebooks)?;
                    let mut delta = recon.frames.clone();
                    for (d, l) in delta.data.iter_mut().zip(&latent_seq.frames.data) {
                        *d -= l;
                    }
                    let delta_node = tape.constant(delta);
                    let st = tape.add(latent, delta_node);
                    let recon_node = tape.constant(recon.frames.clone());
                    let diff = tape.sub(latent, recon_node);
                    let sq = tape.sqr(diff);
                    let commit_sum = tape.sum_all(sq);
                    let commit =
                        tape.scale(commit_sum, cfg.commitment_weight / t_frames as f64);
                    (st, Some(commit))
                };

                let wav_hat =
                    decoder_forward_tape(&mut tape, &codec.params, &codec.config, dec_in);
                let diff = tape.sub(wav_hat, wav_node);
                let l1 = tape.abs(diff);
                let time_term = tape.mean_all(l1);
                let mut utt_loss = tape.scale(time_term, cfg.time_l1_weight);
                let sq = tape.sqr(diff);
                let l2_term = tape.mean_all(sq);
                let l2_term = tape.scale(l2_term, cfg.time_l2_weight);
                utt_loss = tape.add(utt_loss, l2_term);
                for (res, basis) in bases.iter().enumerate() {
                    let lp_hat = log_power_tape(&mut tape, wav_hat, basis);
                    let lp_ref = tape.constant(targets[idx][res].clone());
                    let sdiff = tape.sub(lp_hat, lp_ref);
                    let sabs = tape.abs(sdiff);
                    let sterm = tape.mean_all(sabs);
                    let sterm = tape.scale(sterm, cfg.spectral_weight / bases.len() as f64);
                    utt_loss = tape.add(utt_loss, sterm);
                }
                if let Some(c) = commit {
                    utt_loss = tape.add(utt_loss, c);
                }
                batch_loss = Some(match batch_loss {
                    Some(acc) => tape.add(acc, utt_loss),
                    None => utt_loss,
                });

                // Collect latent frames for codebook learning.
                let latent_mat = tape.value(latent);
                for t in 0..latent_mat.rows {
                    batch_frames.push(latent_mat.row(t).to_vec());
                }
            }
            let loss_node = tape.scale(batch_loss.unwrap(), 1.0 / chunk.len() as f64);
            let loss_val = tape.value(loss_node).at(0, 0);
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    context: format!("codec pretrain epoch {epoch} batch {batch_id}"),
                });
            }
            epoch_loss += loss_val * chunk.len() as f64;
            let mut grads = tape.backward(loss_node, &codec.params)?;
            clip_global_norm(&mut grads, cfg.grad_clip);
            let lr = lr_schedule(step, total_steps, warmup_steps, cfg.max_lr)?;
            opt.step(&mut codec.params, &grads, lr);
            step += 1;

            if epoch >= 1 {
                if let Some(tr) = trainer.as_mut() {
                    let refs: Vec<&[f64]> = batch_frames.iter().map(|f| f.as_slice()).collect();
                    tr.update_batch(&mut codec.codebooks, &refs)?;
                }
            }
            for f in batch_frames {
                if buffer.len() < BUFFER_CAP {
                    buffer.push(f);
                } else {
                    let slot = epoch_rng.gen_range(0..BUFFER_CAP);
                    buffer[slot] = f;
                }
            }
        }

        let usage = trainer
            .as_ref()
            .map(|t| t.epoch_usage_fraction(&codec.codebooks))
            .unwrap_or_default();
        if epoch == 0 {
            let mut kmeans_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0DE_B00C);
            init_codebooks_kmeans(
                &mut codec.codebooks,
                &buffer,
                cfg.kmeans_lloyd_iters,
                &mut kmeans_rng,
            )?;
            trainer = Some(CodebookTrainer::new(&codec.codebooks, cfg.ema_decay));
        } else if let Some(tr) = trainer.as_mut() {
            tr.end_epoch(&mut codec.codebooks, &buffer, &mut epoch_rng);
        }
        let valid_si_sdr = mean_reconstruction_si_sdr(&codec, &valid)?;
        let valid_unquantized = mean_unquantized_si_sdr(&codec, &valid)?;
        let train_probe = &train[..train.len().min(8)];
        let train_unquantized = mean_unquantized_si_sdr(&codec, train_probe)?;
        logs.push(PretrainEpochLog {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            valid_si_sdr_db: valid_si_sdr,
            valid_si_sdr_unquantized_db: valid_unquantized,
            train_si_sdr_unquantized_db: train_unquantized,
            codebook_usage: usage,
        });
    }

    codec.codebooks.frozen = true;
    Ok((codec, logs))
}

/// k-means++ initialization of every stage from buffered latent frames,
/// chaining residuals stage to stage.
fn init_codebooks_kmeans(
    cb: &mut CodebookSet,
    frames: &[Vec<f64>],
    lloyd_iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = cb.latent_dim();
    let k = cb.codebook_size();
    let mut residuals: Vec<Vec<f64>> = frames.to_vec();
    for stage in 0..cb.num_stages() {
        let start = if cb.reserve_zero { 1 } else { 0 };
        let centers = kmeans_pp(&residuals, k - start, dim, lloyd_iters, rng);
        if cb.reserve_zero {
            cb.stages[stage].row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        }
        for (i, center) in centers.iter().enumerate() {
            cb.stages[stage].row_mut(start + i).copy_from_slice(center);
        }
        crate::rvq::ensure_distinct_stage(&mut cb.stages[stage], rng);
        // Subtract the nearest codeword to produce next-stage residuals.
        for r in residuals.iter_mut() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for idx in 0..k {
                let d = squared_distance(r, cb.stages[stage].row(idx));
                if d < best_d {
                    best_d = d;
                    best = idx;
                }
            }
            let row = cb.stages[stage].row(best).to_vec();
            for (rv, cv) in r.iter_mut().zip(row) {
                *rv -= cv;
            }
        }
    }
    Ok(())
}

/// Mean SI-SDR of the quantized reconstruction over a set.
pub fn mean_reconstruction_si_sdr(codec: &Codec, set: &[Utterance]) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for utt in set {
        let recon = codec.reconstruct(&utt.clean)?;
        total += si_sdr(&recon.samples, &utt.clean.samples[..recon.len()])?;
    }
    Ok(total / set.len() as f64)
}

/// Mean SI-SDR of decode(encode(w)) without quantization.
pub fn mean_unquantized_si_sdr(codec: &Codec, set: &[Utterance]) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for utt in set {
        let latent = codec.encode(&utt.clean)?;
        let recon = codec.decode(&latent)?;
        total += si_sdr(&recon.samples, &utt.clean.samples[..recon.len()])?;
    }
    Ok(total / set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_codec(seed: u64) -> Codec {
        Codec::init(CodecConfig::desk(), seed).unwrap()
    }

    #[test]
    fn zero_waveform_zero_bias_encoder_gives_zero_latents() {
        let mut codec = desk_codec(3);
        // Biases are zero-initialized; zero input through tanh stays zero.
        let wav = Waveform::new(vec![0.0; 640], 8000).unwrap();
        let latent = codec.encode(&wav).unwrap();
        assert!(latent.frames.data.iter().all(|&v| v == 0.0));
        // And stays zero regardless of the weights.
        for (_, name, _) in codec.params.clone().iter() {
            if name.ends_with(".w") {
                let id = codec.params.id(name).unwrap();
                codec.params.value_mut(id).data.iter_mut().for_each(|v| *v *= 2.0);
            }
        }
        let latent = codec.encode(&wav).unwrap();
        assert!(latent.frames.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_latent_zero_bias_decoder_gives_zero_waveform() {
        let codec = desk_codec(4);
        let latent = LatentSeq::zeros(5, 16);
        let wav = codec.decode(&latent).unwrap();
        assert_eq!(wav.len(), 5 * 64);
        assert!(wav.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sixteen_khz_one_second_gives_50_frames() {
        // 1 s at 16 kHz with downsample factor 320 → T = 50.
        let cfg = CodecConfig {
            sample_rate: 16000,
            latent_dim: 8,
            num_stages: 2,
            codebook_size: 8,
            strides: vec![4, 8, 10],
            enc_channels: vec![8, 8, 8],
            enc_kernels: vec![9, 9, 9],
            reserve_zero_codeword: true,
            soft_label_exponent: SoftLabelExponent::SquaredDistance,
            soft_label_temperature: 1.0,
        };
        assert_eq!(cfg.downsample_factor(), 320);
        let codec = Codec::init(cfg, 0).unwrap();
        let wav = Waveform::new(vec![0.01; 16000], 16000).unwrap();
        let latent = codec.encode(&wav).unwrap();
        assert_eq!(latent.num_frames(), 50);
    }

    #[test]
    fn trailing_partial_frame_truncated() {
        let codec = desk_codec(5);
        let wav = Waveform::new(vec![0.01; 64 * 7 + 63], 8000).unwrap();
        let latent = codec.encode(&wav).unwrap();
        assert_eq!(latent.num_frames(), 7);
    }

    #[test]
    fn decode_length_is_frames_times_downsample() {
        let codec = desk_codec(6);
        for t in [1, 3, 11] {
            let latent = LatentSeq::zeros(t, 16);
            let wav = codec.decode(&latent).unwrap();
            assert_eq!(wav.len(), t * 64);
        }
    }

    #[test]
    fn encode_rejects_bad_input() {
        let codec = desk_codec(7);
        let short = Waveform::new(vec![0.1; 63], 8000).unwrap();
        assert!(matches!(codec.encode(&short), Err(Error::InputTooShort { .. })));
        let wrong_rate = Waveform::new(vec![0.1; 640], 16000).unwrap();
        assert!(matches!(
            codec.encode(&wrong_rate),
            Err(Error::SampleRateMismatch { .. })
        ));
        let mut nonfinite = Waveform::new(vec![0.1; 640], 8000).unwrap();
        nonfinite.samples[10] = f64::NAN;
        assert!(codec.encode(&nonfinite).is_err());
    }

    #[test]
    fn decode_rejects_dimension_mismatch() {
        let codec = desk_codec(8);
        let latent = LatentSeq::zeros(4, 12);
        assert!(matches!(codec.decode(&latent), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn encode_decode_deterministic() {
        let codec = desk_codec(9);
        let wav = Waveform::new(
            (0..640).map(|i| (i as f64 * 0.05).sin() * 0.5).collect(),
            8000,
        )
        .unwrap();
        let a = codec.encode(&wav).unwrap();
        let b = codec.encode(&wav).unwrap();
        assert_eq!(a.frames.data, b.frames.data);
        let da = codec.decode(&a).unwrap();
        let db = codec.decode(&b).unwrap();
        assert_eq!(da.samples, db.samples);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.lse");
        let mut codec = desk_codec(10);
        codec.codebooks.frozen = true;
        codec.save(&path).unwrap();
        let loaded = Codec::load(&path).unwrap();
        assert_eq!(loaded.config, codec.config);
        let wav = Waveform::new(
            (0..640).map(|i| (i as f64 * 0.031).sin() * 0.4).collect(),
            8000,
        )
        .unwrap();
        // f32 storage rounds the parameters; behavior must match the rounded
        // codec exactly, and the original closely.
        let a = codec.encode(&wav).unwrap();
        let b = loaded.encode(&wav).unwrap();
        assert!(a.frames.max_abs_diff(&b.frames) < 1e-5);
        let b2 = loaded.encode(&wav).unwrap();
        assert_eq!(b.frames.data, b2.frames.data);
    }

    #[test]
    fn one_training_step_changes_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clean: Vec<Waveform> = (0..4)
            .map(|_| crate::dataset::synth_clean(&mut rng, 640, 8000))
            .collect();
        let cfg = CodecPretrainConfig {
            epochs: 1,
            batch_size: 2,
            warmup_fraction: 0.0,
            ..CodecPretrainConfig::desk()
        };
        let before = Codec::init(CodecConfig::desk(), cfg.seed).unwrap();
        let (after, _) = pretrain_codec(&clean, &CodecConfig::desk(), &cfg).unwrap();
        let mut changed = false;
        for (pid, _, value) in after.params.iter() {
            if value.data != before.params.value(pid).data {
                changed = true;
                break;
            }
        }
        assert!(changed, "training must move parameters");
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        let cfg = CodecPretrainConfig::desk();
        assert!(matches!(
            pretrain_codec(&[], &CodecConfig::desk(), &cfg),
            Err(Error::EmptyDataset)
        ));
    }
}
