//! Analytic inference-cost model: closed-form multiply-accumulate counts
//! per variant, mirroring exactly what the instrumented inference paths
//! execute. One MAC counts as two FLOPs. Normalization and activation
//! costs are ignored (sub-percent at these shapes); codec encoder, decoder
//! and quantizer are excluded throughout, so fine-tuning variants report
//! zero.

use crate::conformer::ConformerConfig;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, Variant};
use serde::Serialize;

/// Whether autoregressive decoding is costed with cached keys/values
/// (incremental step cost) or as one full forward pass per emitted token.
/// The full-recompute convention reproduces the reported cost ordering of
/// AR vs NAR systems and is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostConvention {
    KvReuse,
    #[default]
    FullRecompute,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostTerm {
    pub name: String,
    pub macs: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostBreakdown {
    pub variant: Variant,
    pub convention: CostConvention,
    pub frames: usize,
    pub terms: Vec<CostTerm>,
}

impl CostBreakdown {
    pub fn total_macs(&self) -> u64 {
        self.terms.iter().map(|t| t.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    fn push(&mut self, name: impl Into<String>, macs: u64) {
        self.terms.push(CostTerm {
            name: name.into(),
            macs,
        });
    }
}

/// Frame-local MACs of one Conformer layer (everything except the
/// attention score/value aggregation): two half feed-forwards, the q/k/v/o
/// projections, and the convolution module.
fn conformer_layer_frame_macs(cfg: &ConformerConfig) -> u64 {
    let h = cfg.hidden_dim as u64;
    let e = cfg.ff_expansion as u64;
    let k = cfg.conv_kernel as u64;
    let ffn = 2 * e * h * h; // fc1 + fc2
    let attn_proj = 4 * h * h;
    let conv = 2 * h * h + k * h + h * h; // pw1 (H→2H), depthwise, pw2
    2 * ffn + attn_proj + conv
}

/// Frame-local MACs of one transformer layer (single feed-forward).
fn transformer_layer_frame_macs(cfg: &ConformerConfig) -> u64 {
    let h = cfg.hidden_dim as u64;
    let e = cfg.ff_expansion as u64;
    2 * e * h * h + 4 * h * h
}

/// Attention score + value MACs for one layer given the attended window
/// length of every row: 2·Σ len·H.
fn attention_macs(window_sum: u64, hidden: usize) -> u64 {
    2 * window_sum * hidden as u64
}

/// Σ of window lengths for a full bidirectional pass over `t` rows.
fn windows_bidirectional(t: u64) -> u64 {
    t * t
}

/// Σ of window lengths for a causal pass over `t` rows (batched or with
/// cached keys — identical).
fn windows_causal(t: u64) -> u64 {
    t * (t + 1) / 2
}

fn stack_macs(cfg: &ConformerConfig, rows: u64, window_sum: u64, transformer: bool) -> u64 {
    let frame = if transformer {
        transformer_layer_frame_macs(cfg)
    } else {
        conformer_layer_frame_macs(cfg)
    };
    cfg.num_layers as u64 * (frame * rows + attention_macs(window_sum, cfg.hidden_dim))
}

/// Cost of one teacher-forced d-ar forward pass over `t` frames.
fn d_ar_full_pass_macs(config: &ModelConfig, t: u64) -> u64 {
    let n = config.codec.num_stages as u64;
    let k = config.codec.codebook_size as u64;
    let h = config.bidi.hidden_dim as u64;
    let bidi = stack_macs(&config.bidi, t, windows_bidirectional(t), false);
    let causal = stack_macs(&config.causal, t, windows_causal(t), false);
    // Depth transformer: T blocks of N rows each with block-causal windows.
    let depth_windows = t * windows_causal(n);
    let depth = stack_macs(&config.depth, t * n, depth_windows, true);
    let heads = n * t * h * k;
    bidi + causal + depth + heads
}

/// Cost of one teacher-forced c-ar forward pass over `t` frames (a causal
/// pass over 2t positions plus projections and the prediction head).
fn c_ar_full_pass_macs(config: &ModelConfig, t: u64) -> u64 {
    let l = config.codec.latent_dim as u64;
    let h = config.causal.hidden_dim as u64;
    let stack = stack_macs(&config.causal, 2 * t, windows_causal(2 * t), false);
    let proj_noisy = t * l * (h / 2);
    let proj_clean = t.saturating_sub(1) * l * (h / 2);
    let head = t * h * l;
    stack + proj_noisy + proj_clean + head
}

/// Analytic MAC breakdown of the variant's full inference procedure for
/// `seconds` of audio.
pub fn flops_count(
    config: &ModelConfig,
    seconds: f64,
    convention: CostConvention,
) -> Result<CostBreakdown> {
    if seconds <= 0.0 {
        return Err(Error::InvalidArgument("seconds must be positive".into()));
    }
    let fs = config.codec.sample_rate as f64;
    let ds = config.codec.downsample_factor() as f64;
    let t = (seconds * fs / ds).floor().max(1.0) as u64;
    let n = config.codec.num_stages as u64;
    let k = config.codec.codebook_size as u64;
    let l = config.codec.latent_dim as u64;
    let mut out = CostBreakdown {
        variant: config.variant,
        convention,
        frames: t as usize,
        terms: Vec::new(),
    };
    match config.variant {
        Variant::DAr => match convention {
            CostConvention::KvReuse => {
                let h = config.bidi.hidden_dim as u64;
                out.push(
                    "noisy_context_stack",
                    stack_macs(&config.bidi, t, windows_bidirectional(t), false),
                );
                out.push(
                    "temporal_stack_cached",
                    stack_macs(&config.causal, t, windows_causal(t), false),
                );
                out.push(
                    "depth_transformer_cached",
                    stack_macs(&config.depth, t * n, t * windows_causal(n), true),
                );
                out.push("classification_heads", n * t * h * k);
            }
            CostConvention::FullRecompute => {
                out.push(
                    "full_forward_per_token",
                    t * n * d_ar_full_pass_macs(config, t),
                );
            }
        },
        Variant::DNar | Variant::DNarStar => {
            let h = config.bidi.hidden_dim as u64;
            if config.variant == Variant::DNarStar {
                out.push("latent_projection", t * l * h);
            }
            out.push(
                "trunk_stack",
                stack_macs(&config.bidi, t, windows_bidirectional(t), false),
            );
            out.push("classification_heads", n * t * h * k);
        }
        Variant::CAr => match convention {
            CostConvention::KvReuse => {
                let h = config.causal.hidden_dim as u64;
                out.push("noisy_projection", t * l * (h / 2));
                out.push("clean_projection", t.saturating_sub(1) * l * (h / 2));
                out.push(
                    "temporal_stack_cached",
                    stack_macs(&config.causal, 2 * t, windows_causal(2 * t), false),
                );
                out.push("prediction_head", t * h * l);
            }
            CostConvention::FullRecompute => {
                out.push(
                    "full_forward_per_frame",
                    t * c_ar_full_pass_macs(config, t),
                );
            }
        },
        Variant::CNar | Variant::CNarFt => {
            let h = config.bidi.hidden_dim as u64;
            out.push("latent_projection", t * l * h);
            out.push(
                "trunk_stack",
                stack_macs(&config.bidi, t, windows_bidirectional(t), false),
            );
            out.push("prediction_head", t * h * l);
        }
        Variant::CFt | Variant::DFt => {
            // Encoder-only variants: the codec encoder (and quantizer) are
            // excluded by convention, so the model itself costs nothing.
            out.push("excluded_codec_encoder", 0);
        }
    }
    Ok(out)
}

/// MACs per second of audio.
pub fn flops_per_second(config: &ModelConfig, convention: CostConvention) -> Result<f64> {
    Ok(flops_count(config, 1.0, convention)?.total_flops() as f64)
}

/// Render a table of all variants for a shared desk configuration.
pub fn bench_table(
    base: &ModelConfig,
    seconds: f64,
    convention: CostConvention,
) -> Result<String> {
    let mut out = String::new();
    out.push_str(&format!(
        "# inference cost for {seconds} s of audio, 1 MAC = 2 FLOPs, convention: {convention:?}\n"
    ));
    out.push_str(&format!(
        "{:<12} {:>16} {:>16}  terms\n",
        "variant", "total_macs", "total_flops"
    ));
    for variant in Variant::all() {
        let cfg = ModelConfig {
            variant,
            ..base.clone()
        };
        let breakdown = flops_count(&cfg, seconds, convention)?;
        let terms: Vec<String> = breakdown
            .terms
            .iter()
            .map(|t| format!("{}={}", t.name, t.macs))
            .collect();
        out.push_str(&format!(
            "{:<12} {:>16} {:>16}  {}\n",
            variant.cli_name(),
            breakdown.total_macs(),
            breakdown.total_flops(),
            terms.join(" ")
        ));
    }
    Ok(out)
}

pub fn bench_csv(base: &ModelConfig, seconds: f64, convention: CostConvention) -> Result<String> {
    let mut out = String::from("variant,convention,frames,total_macs,total_flops,terms\n");
    for variant in Variant::all() {
        let cfg = ModelConfig {
            variant,
            ..base.clone()
        };
        let b = flops_count(&cfg, seconds, convention)?;
        let terms: Vec<String> = b.terms.iter().map(|t| format!("{}={}", t.name, t.macs)).collect();
        out.push_str(&format!(
            "{},{:?},{},{},{},{}\n",
            variant.cli_name(),
            convention,
            b.frames,
            b.total_macs(),
            b.total_flops(),
            terms.join(";")
        ));
    }
    Ok(out)
}
