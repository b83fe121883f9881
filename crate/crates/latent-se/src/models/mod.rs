//! The enhancement model family: discrete/continuous targets crossed with
//! autoregressive/non-autoregressive prediction, plus encoder fine-tuning
//! baselines. Every variant exposes a teacher-forced training forward, a
//! negative-log-likelihood loss, and a deterministic argmax inference path.

pub mod continuous;
pub mod discrete;

use crate::audio::Waveform;
use crate::autodiff::{NodeId, Tape};
use crate::codec::{encoder_forward_tape, Codec, CodecConfig};
use crate::conformer::{
    add_conformer_params, add_transformer_params, resolve_conformer_ids, resolve_transformer_ids,
    ConformerConfig, StackIds,
};
use crate::error::{Error, Result};
use crate::mat::{Mat, MacMeter};
use crate::params::{load_checkpoint, save_checkpoint, DType, ParamId, ParamStore};
use crate::rvq::{LatentSeq, TokenGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    DAr,
    DNar,
    DNarStar,
    CAr,
    CNar,
    CFt,
    DFt,
    CNarFt,
}

impl Variant {
    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::DAr => "d-ar",
            Variant::DNar => "d-nar",
            Variant::DNarStar => "d-nar-star",
            Variant::CAr => "c-ar",
            Variant::CNar => "c-nar",
            Variant::CFt => "c-ft",
            Variant::DFt => "d-ft",
            Variant::CNarFt => "c-nar-ft",
        }
    }

    pub fn from_cli(name: &str) -> Result<Self> {
        Self::all()
            .iter()
            .copied()
            .find(|v| v.cli_name() == name)
            .ok_or_else(|| Error::Config(format!("unknown variant `{name}`")))
    }

    pub fn all() -> [Variant; 8] {
        [
            Variant::DAr,
            Variant::DNar,
            Variant::DNarStar,
            Variant::CAr,
            Variant::CNar,
            Variant::CFt,
            Variant::DFt,
            Variant::CNarFt,
        ]
    }

    /// Discrete-token prediction (cross-entropy training)?
    pub fn is_discrete(self) -> bool {
        matches!(self, Variant::DAr | Variant::DNar | Variant::DNarStar | Variant::DFt)
    }

    /// Holds a trainable copy of the codec encoder?
    pub fn has_ft_encoder(self) -> bool {
        matches!(self, Variant::CFt | Variant::DFt | Variant::CNarFt)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.cli_name())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub codec: CodecConfig,
    /// Bidirectional trunk (noisy-context encoder / NAR trunk).
    pub bidi: ConformerConfig,
    /// Causal temporal stack (AR variants).
    pub causal: ConformerConfig,
    /// Causal depth transformer (D-AR only).
    pub depth: ConformerConfig,
    /// Quantize predicted frames before feeding them back during C-AR
    /// inference.
    pub quantize_feedback: bool,
    /// Stage the joint C-NAR-FT run: train the enhancer with a frozen
    /// encoder for the first half of the steps, then unfreeze.
    pub staged_ft: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk(variant: Variant, codec: CodecConfig) -> Self {
        Self {
            variant,
            codec,
            bidi: ConformerConfig::desk(false),
            causal: ConformerConfig::desk(true),
            depth: ConformerConfig {
                causal: true,
                ..ConformerConfig::desk(true)
            },
            quantize_feedback: true,
            staged_ft: false,
            seed: 7,
        }
    }

    pub fn tiny(variant: Variant, codec: CodecConfig) -> Self {
        Self {
            variant,
            codec,
            bidi: ConformerConfig::tiny(false),
            causal: ConformerConfig::tiny(true),
            depth: ConformerConfig::tiny(true),
            quantize_feedback: true,
            staged_ft: false,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        match self.variant {
            Variant::DAr => {
                self.bidi.validate()?;
                self.causal.validate()?;
                self.depth.validate()?;
                if !self.causal.causal || !self.depth.causal {
                    return Err(Error::Config(
                        "d-ar temporal and depth stacks must be causal".into(),
                    ));
                }
                if self.bidi.causal {
                    return Err(Error::Config("d-ar noisy-context stack must be bidirectional".into()));
                }
                if self.bidi.hidden_dim != self.causal.hidden_dim
                    || self.bidi.hidden_dim != self.depth.hidden_dim
                {
                    return Err(Error::Config("d-ar stacks must share hidden_dim".into()));
                }
            }
            Variant::DNar | Variant::DNarStar | Variant::CNar | Variant::CNarFt => {
                self.bidi.validate()?;
                if self.bidi.causal {
                    return Err(Error::Config(format!(
                        "{} trunk must be bidirectional",
                        self.variant
                    )));
                }
            }
            Variant::CAr => {
                self.causal.validate()?;
                if !self.causal.causal {
                    return Err(Error::Config("c-ar stack must be causal".into()));
                }
                if self.causal.hidden_dim % 2 != 0 {
                    return Err(Error::Config(
                        "c-ar needs an even hidden_dim for the feature concatenation".into(),
                    ));
                }
            }
            Variant::CFt | Variant::DFt => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// Resolved parameter handles per variant.
#[derive(Debug, Clone, Default)]
pub(crate) struct ModelIds {
    pub enc: Option<StackIds>,
    pub tmp: Option<StackIds>,
    pub dep: Option<StackIds>,
    pub emb_noisy: Vec<ParamId>,
    pub emb_clean: Vec<ParamId>,
    pub bos_time: Option<ParamId>,
    pub bos_depth: Option<ParamId>,
    pub heads: Vec<Linear>,
    pub head: Option<Linear>,
    pub proj_in: Option<Linear>,
    pub proj_noisy: Option<Linear>,
    pub proj_clean: Option<Linear>,
    pub start_clean: Option<ParamId>,
    pub pad_prefix: Option<ParamId>,
}

/// A model plus the frozen codec it enhances against. FT variants hold a
/// trainable copy of the codec encoder inside `params` under "ft_enc.".
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub codec: Codec,
    pub(crate) ids: ModelIds,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

fn add_zero_head(store: &mut ParamStore, name: &str, h: usize, out: usize) -> Linear {
    let w = store.add(format!("{name}.w"), Mat::zeros(h, out));
    let b = store.add(format!("{name}.b"), Mat::zeros(1, out));
    Linear { w, b }
}

fn add_linear_init(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Linear {
    let w = store.add(format!("{name}.w"), uniform(rng, rows, cols, rows));
    let b = store.add(format!("{name}.b"), Mat::zeros(1, cols));
    Linear { w, b }
}

impl Model {
    pub fn init(config: ModelConfig, codec: Codec) -> Result<Self> {
        config.validate()?;
        if config.codec != codec.config {
            return Err(Error::Config(
                "model codec config does not match the provided codec".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut ids = ModelIds::default();
        let k = config.codec.codebook_size;
        let l = config.codec.latent_dim;
        let n = config.codec.num_stages;

        match config.variant {
            Variant::DAr => {
                let h = config.bidi.hidden_dim;
                for stage in 0..n {
                    ids.emb_noisy
                        .push(params.add(format!("emb.noisy.{stage}"), uniform(&mut rng, k, h, h)));
                }
                for stage in 0..n {
                    ids.emb_clean
                        .push(params.add(format!("emb.clean.{stage}"), uniform(&mut rng, k, h, h)));
                }
                ids.bos_time = Some(params.add("bos.time", Mat::zeros(1, h)));
                ids.bos_depth = Some(params.add("bos.depth", Mat::zeros(1, h)));
                add_conformer_params(&mut params, "enc.", &config.bidi, &mut rng);
                add_conformer_params(&mut params, "tmp.", &config.causal, &mut rng);
                add_transformer_params(&mut params, "dep.", &config.depth, &mut rng);
                for stage in 0..n {
                    ids.heads
                        .push(add_zero_head(&mut params, &format!("head.{stage}"), h, k));
                }
                ids.enc = Some(resolve_conformer_ids(&params, "enc.", &config.bidi));
                ids.tmp = Some(resolve_conformer_ids(&params, "tmp.", &config.causal));
                ids.dep = Some(resolve_transformer_ids(&params, "dep.", &config.depth));
            }
            Variant::DNar => {
                let h = config.bidi.hidden_dim;
                for stage in 0..n {
                    ids.emb_noisy
                        .push(params.add(format!("emb.noisy.{stage}"), uniform(&mut rng, k, h, h)));
                }
                add_conformer_params(&mut params, "enc.", &config.bidi, &mut rng);
                for stage in 0..n {
                    ids.heads
                        .push(add_zero_head(&mut params, &format!("head.{stage}"), h, k));
                }
                ids.enc = Some(resolve_conformer_ids(&params, "enc.", &config.bidi));
            }
            Variant::DNarStar => {
                let h = config.bidi.hidden_dim;
                ids.proj_in = Some(add_linear_init(&mut params, "proj_in", l, h, &mut rng));
                add_conformer_params(&mut params, "enc.", &config.bidi, &mut rng);
                for stage in 0..n {
                    ids.heads
                        .push(add_zero_head(&mut params, &format!("head.{stage}"), h, k));
                }
                ids.enc = Some(resolve_conformer_ids(&params, "enc.", &config.bidi));
            }
            Variant::CAr => {
                let h = config.causal.hidden_dim;
                ids.proj_noisy = Some(add_linear_init(&mut params, "proj_noisy", l, h / 2, &mut rng));
                ids.proj_clean = Some(add_linear_init(&mut params, "proj_clean", l, h / 2, &mut rng));
                ids.start_clean = Some(params.add("start.clean", Mat::zeros(1, h / 2)));
                ids.pad_prefix = Some(params.add("pad.prefix", Mat::zeros(1, h / 2)));
                add_conformer_params(&mut params, "tmp.", &config.causal, &mut rng);
                ids.head = Some(add_zero_head(&mut params, "head", h, l));
                ids.tmp = Some(resolve_conformer_ids(&params, "tmp.", &config.causal));
            }
            Variant::CNar => {
                let h = config.bidi.hidden_dim;
                ids.proj_in = Some(add_linear_init(&mut params, "proj_in", l, h, &mut rng));
                add_conformer_params(&mut params, "enc.", &config.bidi, &mut rng);
                ids.head = Some(add_zero_head(&mut params, "head", h, l));
                ids.enc = Some(resolve_conformer_ids(&params, "enc.", &config.bidi));
            }
            Variant::CFt | Variant::DFt => {
                copy_encoder_params(&mut params, &codec);
            }
            Variant::CNarFt => {
                copy_encoder_params(&mut params, &codec);
                let h = config.bidi.hidden_dim;
                ids.proj_in = Some(add_linear_init(&mut params, "proj_in", l, h, &mut rng));
                add_conformer_params(&mut params, "enc.", &config.bidi, &mut rng);
                ids.head = Some(add_zero_head(&mut params, "head", h, l));
                ids.enc = Some(resolve_conformer_ids(&params, "enc.", &config.bidi));
            }
        }
        Ok(Self {
            config,
            params,
            codec,
            ids,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub(crate) fn expect_variant(&self, expected: Variant) -> Result<()> {
        if self.config.variant != expected {
            return Err(Error::VariantMismatch {
                expected: expected.cli_name().into(),
                got: self.config.variant.cli_name().into(),
            });
        }
        Ok(())
    }

    /// Encode a waveform with the model's trainable encoder copy.
    pub fn ft_encode(&self, wav: &Waveform) -> Result<LatentSeq> {
        if !self.config.variant.has_ft_encoder() {
            return Err(Error::VariantMismatch {
                expected: "a fine-tuning variant".into(),
                got: self.config.variant.cli_name().into(),
            });
        }
        if wav.sample_rate != self.codec.config.sample_rate {
            return Err(Error::SampleRateMismatch {
                got: wav.sample_rate,
                expected: self.codec.config.sample_rate,
            });
        }
        let ds = self.codec.downsample_factor();
        if wav.len() < ds {
            return Err(Error::InputTooShort { got: wav.len(), need: ds });
        }
        let usable = wav.len() - wav.len() % ds;
        let mut tape = Tape::new();
        let node = tape.constant(Mat::column(wav.samples[..usable].to_vec()));
        let latent = encoder_forward_tape(
            &mut tape,
            &self.params,
            "ft_enc.",
            &self.codec.config,
            node,
        );
        LatentSeq::new(tape.value(latent).clone())
    }

    /// View of this model's tuned encoder as a full codec (frozen quantizer
    /// and decoder from the reference), for the fidelity-degradation probe.
    pub fn tuned_codec(&self) -> Result<Codec> {
        if !self.config.variant.has_ft_encoder() {
            return Err(Error::VariantMismatch {
                expected: "a fine-tuning variant".into(),
                got: self.config.variant.cli_name().into(),
            });
        }
        let mut tuned = self.codec.clone();
        for (_, name, value) in self.params.iter() {
            if let Some(enc_name) = name.strip_prefix("ft_enc.") {
                let id = tuned
                    .params
                    .id(&format!("enc.{enc_name}"))
                    .expect("encoder parameter sets match");
                *tuned.params.value_mut(id) = value.clone();
            }
        }
        Ok(tuned)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| Error::Config(format!("model config serialization: {e}")))?;
        let mut tensors: Vec<(String, Mat)> = self
            .params
            .tensors()
            .into_iter()
            .map(|(n, m)| (format!("model.{n}"), m))
            .collect();
        tensors.extend(self.codec.to_tensors("codec."));
        save_checkpoint(path, &config_json, &tensors, DType::F32)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config_json, tensors) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_str(&config_json)
            .map_err(|e| Error::MalformedCheckpoint(format!("model config parse: {e}")))?;
        let codec = Codec::from_tensors(config.codec.clone(), &tensors, "codec.")?;
        let mut model = Model::init(config, codec)?;
        let model_tensors: Vec<(String, Mat)> = tensors
            .iter()
            .filter_map(|(n, m)| n.strip_prefix("model.").map(|s| (s.to_string(), m.clone())))
            .collect();
        model.params.load_values(&model_tensors)?;
        Ok(model)
    }
}

fn copy_encoder_params(params: &mut ParamStore, codec: &Codec) {
    for (_, name, value) in codec.params.iter() {
        if let Some(enc_name) = name.strip_prefix("enc.") {
            params.add(format!("ft_enc.{enc_name}"), value.clone());
        }
    }
}

/// Unnormalized per-stage logits, each stage a (frames × codebook_size)
/// matrix.
#[derive(Debug, Clone)]
pub struct DiscreteLogits {
    pub stages: Vec<Mat>,
}

impl DiscreteLogits {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_frames(&self) -> usize {
        self.stages.first().map(|s| s.rows).unwrap_or(0)
    }

    pub fn codebook_size(&self) -> usize {
        self.stages.first().map(|s| s.cols).unwrap_or(0)
    }

    /// Greedy tokens: per (stage, frame) the argmax index, ties to lowest.
    pub fn argmax_grid(&self) -> TokenGrid {
        let stages = self
            .stages
            .iter()
            .map(|s| (0..s.rows).map(|t| argmax(s.row(t))).collect())
            .collect();
        TokenGrid { stages }
    }

    /// Normalized probabilities at (stage, frame).
    pub fn probabilities(&self, stage: usize, frame: usize) -> Vec<f64> {
        let mut row = self.stages[stage].row(frame).to_vec();
        crate::mat::softmax_in_place(&mut row);
        row
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Predicted Gaussian means over clean latents (frames × latent_dim).
#[derive(Debug, Clone)]
pub struct ContinuousPrediction {
    pub means: Mat,
}

impl ContinuousPrediction {
    pub fn to_latent(&self) -> Result<LatentSeq> {
        LatentSeq::new(self.means.clone())
    }
}

/// NLL split into the data-dependent term and the analytic constant.
/// For discrete models the data term is the mean cross-entropy in nats and
/// the constant is zero; for continuous models the data term is
/// ½·(per-frame squared error summed over dims, averaged over frames) and
/// the constant is (L/2)·ln 2π per frame.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossTerms {
    pub nll: f64,
    pub data_term: f64,
    pub constant: f64,
}

/// Mean cross-entropy over all (frame, stage) positions.
pub fn nll_loss_discrete(logits: &DiscreteLogits, target: &TokenGrid) -> Result<LossTerms> {
    if logits.num_stages() != target.num_stages() || logits.num_frames() != target.num_frames() {
        return Err(Error::ShapeMismatch {
            context: "nll_loss_discrete".into(),
            expected: format!("{}×{}", target.num_stages(), target.num_frames()),
            got: format!("{}×{}", logits.num_stages(), logits.num_frames()),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (stage_logits, stage_tokens) in logits.stages.iter().zip(&target.stages) {
        for (t, &tok) in stage_tokens.iter().enumerate() {
            let row = stage_logits.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[tok];
            count += 1;
        }
    }
    let ce = total / count as f64;
    Ok(LossTerms {
        nll: ce,
        data_term: ce,
        constant: 0.0,
    })
}

/// Gaussian NLL with identity covariance: ½‖x−m‖² per frame plus the
/// normalization constant, averaged over frames.
pub fn nll_loss_continuous(pred: &ContinuousPrediction, target: &LatentSeq) -> Result<LossTerms> {
    if pred.means.shape() != target.frames.shape() {
        return Err(Error::ShapeMismatch {
            context: "nll_loss_continuous".into(),
            expected: format!("{:?}", target.frames.shape()),
            got: format!("{:?}", pred.means.shape()),
        });
    }
    let t_len = target.num_frames() as f64;
    let l = target.latent_dim() as f64;
    let mut sq = 0.0;
    for (a, b) in pred.means.data.iter().zip(&target.frames.data) {
        sq += (a - b) * (a - b);
    }
    let data_term = 0.5 * sq / t_len;
    let constant = 0.5 * l * (std::f64::consts::TAU).ln();
    Ok(LossTerms {
        nll: data_term + constant,
        data_term,
        constant,
    })
}

/// Inputs for one utterance precomputed with the frozen codec.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub noisy_samples: Vec<f64>,
    pub clean_samples: Vec<f64>,
    pub noisy_latents: LatentSeq,
    pub clean_latents: LatentSeq,
    pub noisy_tokens: TokenGrid,
    pub clean_tokens: TokenGrid,
}

impl Prepared {
    pub fn from_utterance(codec: &Codec, utt: &crate::dataset::Utterance) -> Result<Self> {
        let ds = codec.downsample_factor();
        let usable = utt.noisy.len().min(utt.clean.len());
        let usable = usable - usable % ds;
        if usable == 0 {
            return Err(Error::InputTooShort {
                got: utt.noisy.len(),
                need: ds,
            });
        }
        let noisy_samples = utt.noisy.samples[..usable].to_vec();
        let clean_samples = utt.clean.samples[..usable].to_vec();
        let noisy_latents = codec.encode_samples(&noisy_samples);
        let clean_latents = codec.encode_samples(&clean_samples);
        let (noisy_tokens, _) = codec.quantize(&noisy_latents)?;
        let (clean_tokens, _) = codec.quantize(&clean_latents)?;
        Ok(Self {
            noisy_samples,
            clean_samples,
            noisy_latents,
            clean_latents,
            noisy_tokens,
            clean_tokens,
        })
    }
}

/// Teacher-forced training loss on the tape. Returns the scalar loss node
/// (the data term; constants are analytic) plus the constant term value.
pub fn training_loss_tape(
    tape: &mut Tape,
    model: &Model,
    prepared: &Prepared,
) -> Result<(NodeId, f64)> {
    let l = model.codec.config.latent_dim as f64;
    let gaussian_constant = 0.5 * l * (std::f64::consts::TAU).ln();
    match model.config.variant {
        Variant::DAr => {
            let logits = discrete::d_ar_forward_tape(
                tape,
                model,
                &prepared.noisy_tokens,
                &prepared.clean_tokens,
            )?;
            Ok((
                discrete::cross_entropy_stages_tape(tape, &logits, &prepared.clean_tokens),
                0.0,
            ))
        }
        Variant::DNar => {
            let logits = discrete::d_nar_forward_tape(
                tape,
                model,
                discrete::DiscreteInput::Tokens(&prepared.noisy_tokens),
            )?;
            Ok((
                discrete::cross_entropy_stages_tape(tape, &logits, &prepared.clean_tokens),
                0.0,
            ))
        }
        Variant::DNarStar => {
            let logits = discrete::d_nar_forward_tape(
                tape,
                model,
                discrete::DiscreteInput::Latents(&prepared.noisy_latents),
            )?;
            Ok((
                discrete::cross_entropy_stages_tape(tape, &logits, &prepared.clean_tokens),
                0.0,
            ))
        }
        Variant::CAr => {
            let means = continuous::c_ar_forward_tape(
                tape,
                model,
                &prepared.noisy_latents,
                &prepared.clean_latents,
            )?;
            Ok((
                continuous::gaussian_data_term_tape(tape, means, &prepared.clean_latents),
                gaussian_constant,
            ))
        }
        Variant::CNar => {
            let means = continuous::c_nar_forward_tape(tape, model, &prepared.noisy_latents)?;
            Ok((
                continuous::gaussian_data_term_tape(tape, means, &prepared.clean_latents),
                gaussian_constant,
            ))
        }
        Variant::CFt => {
            let means = continuous::c_ft_forward_tape(tape, model, &prepared.noisy_samples)?;
            Ok((
                continuous::gaussian_data_term_tape(tape, means, &prepared.clean_latents),
                gaussian_constant,
            ))
        }
        Variant::DFt => {
            let loss =
                discrete::d_ft_loss_tape(tape, model, &prepared.noisy_samples, &prepared.clean_tokens)?;
            Ok((loss, 0.0))
        }
        Variant::CNarFt => {
            let means = continuous::c_nar_ft_forward_tape(tape, model, &prepared.noisy_samples)?;
            Ok((
                continuous::gaussian_data_term_tape(tape, means, &prepared.clean_latents),
                gaussian_constant,
            ))
        }
    }
}

/// How autoregressive decoding executes: with cached keys/values and conv
/// tails, or by recomputing the full prefix every emitted token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Cached,
    Recompute,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeStats {
    pub temporal_steps: u64,
    pub depth_steps: u64,
    pub macs: u64,
}

/// What `enhance` did: which route ran, the decode counters, and the
/// intermediate estimates needed by the evaluation metrics.
#[derive(Debug, Clone)]
pub struct EnhanceTrace {
    pub variant: Variant,
    pub route: &'static str,
    pub stats: DecodeStats,
    /// Latent estimate actually passed to the codec decoder.
    pub decoded_latents: LatentSeq,
    /// Predicted clean tokens (post-quantization for continuous variants).
    pub predicted_tokens: TokenGrid,
    /// Raw model prediction in the latent domain, before final quantization.
    pub raw_latents: LatentSeq,
}

/// Full enhancement pipeline: encode/tokenize the noisy input per variant,
/// run argmax inference, quantize continuous estimates, and decode.
/// Discrete routes detokenize their predicted grid directly.
pub fn enhance(model: &Model, noisy: &Waveform, mode: DecodeMode) -> Result<(Waveform, EnhanceTrace)> {
    let codec = &model.codec;
    let mut meter = MacMeter::new();
    // Discrete routes carry their decoded token grid; continuous routes
    // carry raw means that still need quantization.
    enum RouteOut {
        Tokens(TokenGrid),
        Means(LatentSeq),
    }
    let (route, out, stats): (&'static str, RouteOut, DecodeStats) = match model.config.variant {
        Variant::DAr => {
            let (tokens, _) = codec.tokenize(noisy)?;
            let (decoded, stats) = discrete::d_ar_decode(model, &tokens, mode)?;
            ("tokenize>d-ar-decode>detokenize", RouteOut::Tokens(decoded), stats)
        }
        Variant::DNar => {
            let (tokens, _) = codec.tokenize(noisy)?;
            let logits =
                discrete::d_nar_forward_pure(model, discrete::DiscreteInput::Tokens(&tokens), &mut meter)?;
            (
                "tokenize>d-nar-argmax>detokenize",
                RouteOut::Tokens(logits.argmax_grid()),
                DecodeStats {
                    macs: meter.macs,
                    ..Default::default()
                },
            )
        }
        Variant::DNarStar => {
            let latents_in = codec.encode(noisy)?;
            let logits = discrete::d_nar_forward_pure(
                model,
                discrete::DiscreteInput::Latents(&latents_in),
                &mut meter,
            )?;
            (
                "encode>d-nar-star-argmax>detokenize",
                RouteOut::Tokens(logits.argmax_grid()),
                DecodeStats {
                    macs: meter.macs,
                    ..Default::default()
                },
            )
        }
        Variant::CAr => {
            let noisy_latents = codec.encode(noisy)?;
            let (means, stats) = continuous::c_ar_decode(model, &noisy_latents, mode)?;
            ("encode>c-ar-decode>quantize", RouteOut::Means(means), stats)
        }
        Variant::CNar => {
            let noisy_latents = codec.encode(noisy)?;
            let pred = continuous::c_nar_forward_pure(model, &noisy_latents, &mut meter)?;
            (
                "encode>c-nar-mean>quantize",
                RouteOut::Means(LatentSeq::new(pred.means)?),
                DecodeStats {
                    macs: meter.macs,
                    ..Default::default()
                },
            )
        }
        Variant::CFt => {
            let means = model.ft_encode(noisy)?;
            ("ft-encode>mean>quantize", RouteOut::Means(means), DecodeStats::default())
        }
        Variant::DFt => {
            let e = model.ft_encode(noisy)?;
            let logits = discrete::d_ft_logits(model, &e)?;
            (
                "ft-encode>soft-label-argmax>detokenize",
                RouteOut::Tokens(logits.argmax_grid()),
                DecodeStats::default(),
            )
        }
        Variant::CNarFt => {
            let e = model.ft_encode(noisy)?;
            let pred = continuous::c_nar_forward_pure(model, &e, &mut meter)?;
            (
                "ft-encode>c-nar-mean>quantize",
                RouteOut::Means(LatentSeq::new(pred.means)?),
                DecodeStats {
                    macs: meter.macs,
                    ..Default::default()
                },
            )
        }
    };
    let (raw_latents, predicted_tokens, decoded_latents) = match out {
        RouteOut::Tokens(grid) => {
            let latents = codec.dequantize(&grid)?;
            (latents.clone(), grid, latents)
        }
        RouteOut::Means(means) => {
            let (tokens, recon) = codec.quantize(&means)?;
            (means, tokens, recon)
        }
    };
    let wav = codec.decode(&decoded_latents)?;
    Ok((
        wav,
        EnhanceTrace {
            variant: model.config.variant,
            route,
            stats,
            decoded_latents,
            predicted_tokens,
            raw_latents,
        },
    ))
}
