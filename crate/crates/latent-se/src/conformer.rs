//! Conformer and transformer building blocks: token embedding, latent
//! projection, causal masking, sinusoidal positions, the tape forward used
//! for training, and an incremental cached forward for autoregressive
//! decoding.
//!
//! Layer layout per Conformer block (pre-norm):
//! half feed-forward, self-attention, convolution module (pointwise →
//! GLU → depthwise → layer norm → swish → pointwise), half feed-forward,
//! then a final layer norm after the last block. Transformer blocks drop
//! the convolution module and use a single full feed-forward.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::mat::{affine_row, layer_norm_row, sigmoid, silu, Mat, MacMeter};
use crate::params::{ParamId, ParamStore};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub conv_kernel: usize,
    pub ff_expansion: usize,
    pub causal: bool,
    pub max_seq_len: usize,
}

impl ConformerConfig {
    pub fn desk(causal: bool) -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 4,
            conv_kernel: 7,
            ff_expansion: 2,
            causal,
            max_seq_len: 512,
        }
    }

    pub fn tiny(causal: bool) -> Self {
        Self {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 1,
            conv_kernel: 3,
            ff_expansion: 2,
            causal,
            max_seq_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("conformer dims must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        Ok(())
    }
}

/// T×T boolean causality mask: entry (t, s) is true iff s ≤ t.
pub fn causal_mask(t: usize) -> Vec<Vec<bool>> {
    (0..t).map(|row| (0..t).map(|col| col <= row).collect()).collect()
}

/// Sinusoidal absolute positional encodings, T×H.
pub fn sinusoidal_pe(t_len: usize, hidden: usize) -> Mat {
    Mat::from_fn(t_len, hidden, |t, i| {
        let pair = (i / 2) as f64;
        let rate = 1.0 / 10000f64.powf(2.0 * pair / hidden as f64);
        let angle = t as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Sum the per-stage embeddings of a token grid into H-vectors per frame.
/// `tables` holds one K×H embedding table node per stage.
pub fn embed_tokens_tape(
    tape: &mut Tape,
    tables: &[NodeId],
    tokens: &crate::rvq::TokenGrid,
) -> Result<NodeId> {
    if tables.len() != tokens.num_stages() {
        return Err(Error::ShapeMismatch {
            context: "embed_tokens".into(),
            expected: format!("{} embedding tables", tokens.num_stages()),
            got: format!("{}", tables.len()),
        });
    }
    let mut acc: Option<NodeId> = None;
    for (stage, &table) in tables.iter().enumerate() {
        let rows = tape.value(table).rows;
        for &index in &tokens.stages[stage] {
            if index >= rows {
                return Err(Error::IndexOutOfRange {
                    index,
                    size: rows,
                    stage,
                });
            }
        }
        let gathered = tape.gather_rows(table, tokens.stages[stage].clone());
        acc = Some(match acc {
            None => gathered,
            Some(a) => tape.add(a, gathered),
        });
    }
    Ok(acc.expect("at least one stage"))
}

/// Affine projection of latent frames (T×L) to the hidden dim (T×H).
pub fn project_latent_tape(tape: &mut Tape, latent: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let x = tape.matmul(latent, w);
    tape.add(x, b)
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

fn add_ln(store: &mut ParamStore, name: String, h: usize) {
    store.add(format!("{name}.g"), Mat::from_fn(1, h, |_, _| 1.0));
    store.add(format!("{name}.b"), Mat::zeros(1, h));
}

fn add_linear(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
    store.add(format!("{name}.w"), uniform(rng, rows, cols, rows));
    store.add(format!("{name}.b"), Mat::zeros(1, cols));
}

/// Register all parameters of a Conformer stack under `prefix`.
pub fn add_conformer_params(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ConformerConfig,
    rng: &mut ChaCha8Rng,
) {
    let h = cfg.hidden_dim;
    let e = cfg.ff_expansion * h;
    for l in 0..cfg.num_layers {
        let p = format!("{prefix}l{l}");
        add_ln(store, format!("{p}.ffn1.ln"), h);
        add_linear(store, format!("{p}.ffn1.fc1"), h, e, rng);
        add_linear(store, format!("{p}.ffn1.fc2"), e, h, rng);
        add_ln(store, format!("{p}.attn.ln"), h);
        add_linear(store, format!("{p}.attn.q"), h, h, rng);
        add_linear(store, format!("{p}.attn.k"), h, h, rng);
        add_linear(store, format!("{p}.attn.v"), h, h, rng);
        add_linear(store, format!("{p}.attn.o"), h, h, rng);
        add_ln(store, format!("{p}.conv.ln"), h);
        add_linear(store, format!("{p}.conv.pw1"), h, 2 * h, rng);
        store.add(
            format!("{p}.conv.dw.w"),
            uniform(rng, h, cfg.conv_kernel, cfg.conv_kernel),
        );
        store.add(format!("{p}.conv.dw.b"), Mat::zeros(1, h));
        add_ln(store, format!("{p}.conv.mid_ln"), h);
        add_linear(store, format!("{p}.conv.pw2"), h, h, rng);
        add_ln(store, format!("{p}.ffn2.ln"), h);
        add_linear(store, format!("{p}.ffn2.fc1"), h, e, rng);
        add_linear(store, format!("{p}.ffn2.fc2"), e, h, rng);
    }
    add_ln(store, format!("{prefix}final_ln"), h);
}

/// Register parameters of a plain transformer stack (no convolution module).
pub fn add_transformer_params(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ConformerConfig,
    rng: &mut ChaCha8Rng,
) {
    let h = cfg.hidden_dim;
    let e = cfg.ff_expansion * h;
    for l in 0..cfg.num_layers {
        let p = format!("{prefix}l{l}");
        add_ln(store, format!("{p}.attn.ln"), h);
        add_linear(store, format!("{p}.attn.q"), h, h, rng);
        add_linear(store, format!("{p}.attn.k"), h, h, rng);
        add_linear(store, format!("{p}.attn.v"), h, h, rng);
        add_linear(store, format!("{p}.attn.o"), h, h, rng);
        add_ln(store, format!("{p}.ffn.ln"), h);
        add_linear(store, format!("{p}.ffn.fc1"), h, e, rng);
        add_linear(store, format!("{p}.ffn.fc2"), e, h, rng);
    }
    add_ln(store, format!("{prefix}final_ln"), h);
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LnIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ConformerLayerIds {
    ffn1_ln: LnIds,
    ffn1_fc1: LinearIds,
    ffn1_fc2: LinearIds,
    attn_ln: LnIds,
    attn_q: LinearIds,
    attn_k: LinearIds,
    attn_v: LinearIds,
    attn_o: LinearIds,
    conv_ln: Option<LnIds>,
    conv_pw1: Option<LinearIds>,
    conv_dw: Option<LinearIds>,
    conv_mid_ln: Option<LnIds>,
    conv_pw2: Option<LinearIds>,
    ffn2_ln: Option<LnIds>,
    ffn2_fc1: Option<LinearIds>,
    ffn2_fc2: Option<LinearIds>,
}

/// Resolved parameter ids of one stack; `transformer` stacks have no conv
/// module and a single feed-forward per layer.
#[derive(Debug, Clone)]
pub struct StackIds {
    layers: Vec<ConformerLayerIds>,
    final_ln: LnIds,
    transformer: bool,
}

fn lookup(store: &ParamStore, name: &str) -> ParamId {
    store
        .id(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
}

fn ln_ids(store: &ParamStore, name: &str) -> LnIds {
    LnIds {
        g: lookup(store, &format!("{name}.g")),
        b: lookup(store, &format!("{name}.b")),
    }
}

fn linear_ids(store: &ParamStore, name: &str) -> LinearIds {
    LinearIds {
        w: lookup(store, &format!("{name}.w")),
        b: lookup(store, &format!("{name}.b")),
    }
}

pub fn resolve_conformer_ids(store: &ParamStore, prefix: &str, cfg: &ConformerConfig) -> StackIds {
    let layers = (0..cfg.num_layers)
        .map(|l| {
            let p = format!("{prefix}l{l}");
            ConformerLayerIds {
                ffn1_ln: ln_ids(store, &format!("{p}.ffn1.ln")),
                ffn1_fc1: linear_ids(store, &format!("{p}.ffn1.fc1")),
                ffn1_fc2: linear_ids(store, &format!("{p}.ffn1.fc2")),
                attn_ln: ln_ids(store, &format!("{p}.attn.ln")),
                attn_q: linear_ids(store, &format!("{p}.attn.q")),
                attn_k: linear_ids(store, &format!("{p}.attn.k")),
                attn_v: linear_ids(store, &format!("{p}.attn.v")),
                attn_o: linear_ids(store, &format!("{p}.attn.o")),
                conv_ln: Some(ln_ids(store, &format!("{p}.conv.ln"))),
                conv_pw1: Some(linear_ids(store, &format!("{p}.conv.pw1"))),
                conv_dw: Some(linear_ids(store, &format!("{p}.conv.dw"))),
                conv_mid_ln: Some(ln_ids(store, &format!("{p}.conv.mid_ln"))),
                conv_pw2: Some(linear_ids(store, &format!("{p}.conv.pw2"))),
                ffn2_ln: Some(ln_ids(store, &format!("{p}.ffn2.ln"))),
                ffn2_fc1: Some(linear_ids(store, &format!("{p}.ffn2.fc1"))),
                ffn2_fc2: Some(linear_ids(store, &format!("{p}.ffn2.fc2"))),
            }
        })
        .collect();
    StackIds {
        layers,
        final_ln: ln_ids(store, &format!("{prefix}final_ln")),
        transformer: false,
    }
}

pub fn resolve_transformer_ids(store: &ParamStore, prefix: &str, cfg: &ConformerConfig) -> StackIds {
    let layers = (0..cfg.num_layers)
        .map(|l| {
            let p = format!("{prefix}l{l}");
            ConformerLayerIds {
                // The single feed-forward of a transformer layer reuses the
                // ffn1 slots; conv and ffn2 slots stay empty.
                ffn1_ln: ln_ids(store, &format!("{p}.ffn.ln")),
                ffn1_fc1: linear_ids(store, &format!("{p}.ffn.fc1")),
                ffn1_fc2: linear_ids(store, &format!("{p}.ffn.fc2")),
                attn_ln: ln_ids(store, &format!("{p}.attn.ln")),
                attn_q: linear_ids(store, &format!("{p}.attn.q")),
                attn_k: linear_ids(store, &format!("{p}.attn.k")),
                attn_v: linear_ids(store, &format!("{p}.attn.v")),
                attn_o: linear_ids(store, &format!("{p}.attn.o")),
                conv_ln: None,
                conv_pw1: None,
                conv_dw: None,
                conv_mid_ln: None,
                conv_pw2: None,
                ffn2_ln: None,
                ffn2_fc1: None,
                ffn2_fc2: None,
            }
        })
        .collect();
    StackIds {
        layers,
        final_ln: ln_ids(store, &format!("{prefix}final_ln")),
        transformer: true,
    }
}

fn ln_tape(tape: &mut Tape, store: &ParamStore, ids: LnIds, x: NodeId) -> NodeId {
    let g = tape.param(store, ids.g);
    let b = tape.param(store, ids.b);
    let n = tape.layer_norm_rows(x, LN_EPS);
    let s = tape.mul(n, g);
    tape.add(s, b)
}

fn linear_tape(tape: &mut Tape, store: &ParamStore, ids: LinearIds, x: NodeId) -> NodeId {
    let w = tape.param(store, ids.w);
    let b = tape.param(store, ids.b);
    let y = tape.matmul(x, w);
    tape.add(y, b)
}

fn ffn_tape(
    tape: &mut Tape,
    store: &ParamStore,
    ln: LnIds,
    fc1: LinearIds,
    fc2: LinearIds,
    x: NodeId,
    half: bool,
) -> NodeId {
    let n = ln_tape(tape, store, ln, x);
    let a = linear_tape(tape, store, fc1, n);
    let act = tape.silu_node(a);
    let out = linear_tape(tape, store, fc2, act);
    let out = if half { tape.scale(out, 0.5) } else { out };
    tape.add(x, out)
}

fn attention_tape(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &ConformerLayerIds,
    cfg: &ConformerConfig,
    x: NodeId,
    from: &[usize],
    to: &[usize],
) -> NodeId {
    let n = ln_tape(tape, store, layer.attn_ln, x);
    let q = linear_tape(tape, store, layer.attn_q, n);
    let k = linear_tape(tape, store, layer.attn_k, n);
    let v = linear_tape(tape, store, layer.attn_v, n);
    let att = tape.attention(q, k, v, cfg.num_heads, from.to_vec(), to.to_vec());
    let o = linear_tape(tape, store, layer.attn_o, att);
    tape.add(x, o)
}

fn conv_module_tape(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &ConformerLayerIds,
    cfg: &ConformerConfig,
    x: NodeId,
) -> NodeId {
    let h = cfg.hidden_dim;
    let n = ln_tape(tape, store, layer.conv_ln.unwrap(), x);
    let pw1 = linear_tape(tape, store, layer.conv_pw1.unwrap(), n);
    let a = tape.slice_cols(pw1, 0, h);
    let gate_in = tape.slice_cols(pw1, h, 2 * h);
    let gate = tape.sigmoid_node(gate_in);
    let glu = tape.mul(a, gate);
    let dw_ids = layer.conv_dw.unwrap();
    let dw_w = tape.param(store, dw_ids.w);
    let dw_b = tape.param(store, dw_ids.b);
    let (pad_left, pad_right) = if cfg.causal {
        (cfg.conv_kernel - 1, 0)
    } else {
        ((cfg.conv_kernel - 1) / 2, (cfg.conv_kernel - 1) / 2)
    };
    let dw = tape.depthwise_conv1d(glu, dw_w, pad_left, pad_right);
    let dw = tape.add(dw, dw_b);
    let mid = ln_tape(tape, store, layer.conv_mid_ln.unwrap(), dw);
    let act = tape.silu_node(mid);
    let pw2 = linear_tape(tape, store, layer.conv_pw2.unwrap(), act);
    tape.add(x, pw2)
}

/// How positional encodings index into the sinusoidal table.
#[derive(Debug, Clone, Copy)]
pub enum PositionSpec {
    /// Absolute positions offset..offset+T.
    Offset(usize),
    /// Positions repeat with this period (row i gets position i % period),
    /// used by the depth transformer so every frame block looks alike.
    Periodic(usize),
}

fn pe_matrix(spec: PositionSpec, t_len: usize, hidden: usize) -> Mat {
    match spec {
        PositionSpec::Offset(off) => {
            let full = sinusoidal_pe(off + t_len, hidden);
            Mat::from_vec(t_len, hidden, full.data[off * hidden..].to_vec())
        }
        PositionSpec::Periodic(period) => {
            let base = sinusoidal_pe(period, hidden);
            Mat::from_fn(t_len, hidden, |r, c| base.at(r % period, c))
        }
    }
}

/// Full-stack tape forward. `windows` overrides the attention ranges
/// (row i attends to columns from[i]..to[i]); by default they derive from
/// `cfg.causal`.
pub fn stack_forward_tape(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &StackIds,
    cfg: &ConformerConfig,
    input: NodeId,
    windows: Option<(Vec<usize>, Vec<usize>)>,
    pos: PositionSpec,
) -> Result<NodeId> {
    cfg.validate()?;
    let t_len = tape.value(input).rows;
    if t_len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            got: t_len,
            max: cfg.max_seq_len,
        });
    }
    if !tape.value(input).is_finite() {
        return Err(Error::NonFinite("stack input".into()));
    }
    let (from, to) = windows.unwrap_or_else(|| {
        if cfg.causal {
            ((0..t_len).map(|_| 0).collect(), (1..=t_len).collect())
        } else {
            (vec![0; t_len], vec![t_len; t_len])
        }
    });
    let pe_node = tape.constant(pe_matrix(pos, t_len, cfg.hidden_dim));
    let mut x = tape.add(input, pe_node);
    for (li, layer) in ids.layers.iter().enumerate() {
        if ids.transformer {
            x = attention_tape(tape, store, layer, cfg, x, &from, &to);
            x = ffn_tape(
                tape, store, layer.ffn1_ln, layer.ffn1_fc1, layer.ffn1_fc2, x, false,
            );
        } else {
            x = ffn_tape(
                tape, store, layer.ffn1_ln, layer.ffn1_fc1, layer.ffn1_fc2, x, true,
            );
            x = attention_tape(tape, store, layer, cfg, x, &from, &to);
            x = conv_module_tape(tape, store, layer, cfg, x);
            x = ffn_tape(
                tape,
                store,
                layer.ffn2_ln.unwrap(),
                layer.ffn2_fc1.unwrap(),
                layer.ffn2_fc2.unwrap(),
                x,
                true,
            );
        }
        if !tape.value(x).is_finite() {
            return Err(Error::NonFinite(format!("stack layer {li} output")));
        }
    }
    Ok(ln_tape(tape, store, ids.final_ln, x))
}

/// Batched no-tape forward with MAC metering, numerically identical to
/// [`stack_forward_tape`]. Used by inference paths whose executed work is
/// compared against the analytic cost model.
pub fn stack_forward_pure(
    store: &ParamStore,
    ids: &StackIds,
    cfg: &ConformerConfig,
    input: &Mat,
    windows: Option<(Vec<usize>, Vec<usize>)>,
    pos: PositionSpec,
    meter: &mut MacMeter,
) -> Result<Mat> {
    cfg.validate()?;
    let t_len = input.rows;
    if t_len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            got: t_len,
            max: cfg.max_seq_len,
        });
    }
    if !input.is_finite() {
        return Err(Error::NonFinite("stack input".into()));
    }
    let h = cfg.hidden_dim;
    let heads = cfg.num_heads;
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (from, to) = windows.unwrap_or_else(|| {
        if cfg.causal {
            ((0..t_len).map(|_| 0).collect(), (1..=t_len).collect())
        } else {
            (vec![0; t_len], vec![t_len; t_len])
        }
    });
    let pe = pe_matrix(pos, t_len, h);
    let mut x = input.clone();
    for (r, b) in x.data.iter_mut().zip(&pe.data) {
        *r += b;
    }

    let ffn_rows = |x: &mut Mat,
                    ln: LnIds,
                    fc1: LinearIds,
                    fc2: LinearIds,
                    half: bool,
                    store: &ParamStore,
                    meter: &mut MacMeter| {
        for r in 0..x.rows {
            let n = ln_row(store, ln, x.row(r));
            let a = linear_row(store, fc1, &n, meter);
            let act: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
            let out = linear_row(store, fc2, &act, meter);
            let w = if half { 0.5 } else { 1.0 };
            for (xv, ov) in x.row_mut(r).iter_mut().zip(&out) {
                *xv += w * ov;
            }
        }
    };

    for (li, layer) in ids.layers.iter().enumerate() {
        if !ids.transformer {
            ffn_rows(&mut x, layer.ffn1_ln, layer.ffn1_fc1, layer.ffn1_fc2, true, store, meter);
        }
        // Attention.
        {
            let mut q = Mat::zeros(t_len, h);
            let mut k = Mat::zeros(t_len, h);
            let mut v = Mat::zeros(t_len, h);
            for r in 0..t_len {
                let n = ln_row(store, layer.attn_ln, x.row(r));
                q.row_mut(r).copy_from_slice(&linear_row(store, layer.attn_q, &n, meter));
                k.row_mut(r).copy_from_slice(&linear_row(store, layer.attn_k, &n, meter));
                v.row_mut(r).copy_from_slice(&linear_row(store, layer.attn_v, &n, meter));
            }
            for r in 0..t_len {
                let (lo, hi) = (from[r], to[r]);
                let mut att = vec![0.0; h];
                for head in 0..heads {
                    let off = head * dh;
                    let qrow = &q.row(r)[off..off + dh];
                    let mut scores: Vec<f64> = (lo..hi)
                        .map(|j| {
                            let krow = &k.row(j)[off..off + dh];
                            let mut s = 0.0;
                            for d in 0..dh {
                                s += qrow[d] * krow[d];
                            }
                            s * scale
                        })
                        .collect();
                    crate::mat::softmax_in_place(&mut scores);
                    for (idx, j) in (lo..hi).enumerate() {
                        let vrow = &v.row(j)[off..off + dh];
                        for d in 0..dh {
                            att[off + d] += scores[idx] * vrow[d];
                        }
                    }
                }
                meter.add(2 * ((hi - lo) * h) as u64);
                let o = linear_row(store, layer.attn_o, &att, meter);
                for (xv, ov) in x.row_mut(r).iter_mut().zip(&o) {
                    *xv += ov;
                }
            }
        }
        if !ids.transformer {
            // Convolution module.
            let kernel = cfg.conv_kernel;
            let (pad_left, _pad_right) = if cfg.causal {
                (kernel - 1, 0)
            } else {
                ((kernel - 1) / 2, (kernel - 1) / 2)
            };
            let mut glu = Mat::zeros(t_len, h);
            for r in 0..t_len {
                let n = ln_row(store, layer.conv_ln.unwrap(), x.row(r));
                let p = linear_row(store, layer.conv_pw1.unwrap(), &n, meter);
                for c in 0..h {
                    *glu.at_mut(r, c) = p[c] * sigmoid(p[h + c]);
                }
            }
            let dw_ids = layer.conv_dw.unwrap();
            let dw_w = store.value(dw_ids.w);
            let dw_b = store.value(dw_ids.b);
            for r in 0..t_len {
                let mut dw = vec![0.0; h];
                for dk in 0..kernel {
                    let src = r as isize + dk as isize - pad_left as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let grow = glu.row(src as usize);
                    for c in 0..h {
                        dw[c] += grow[c] * dw_w.at(c, dk);
                    }
                }
                meter.add((kernel * h) as u64);
                for (d, b) in dw.iter_mut().zip(&dw_b.data) {
                    *d += b;
                }
                let mid = ln_row(store, layer.conv_mid_ln.unwrap(), &dw);
                let act: Vec<f64> = mid.iter().map(|&v| silu(v)).collect();
                let o = linear_row(store, layer.conv_pw2.unwrap(), &act, meter);
                for (xv, ov) in x.row_mut(r).iter_mut().zip(&o) {
                    *xv += ov;
                }
            }
            ffn_rows(&mut x, layer.ffn2_ln.unwrap(), layer.ffn2_fc1.unwrap(), layer.ffn2_fc2.unwrap(), true, store, meter);
        } else {
            ffn_rows(&mut x, layer.ffn1_ln, layer.ffn1_fc1, layer.ffn1_fc2, false, store, meter);
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("stack layer {li} output")));
        }
    }
    let mut out = Mat::zeros(t_len, h);
    for r in 0..t_len {
        out.row_mut(r)
            .copy_from_slice(&ln_row(store, ids.final_ln, x.row(r)));
    }
    Ok(out)
}

/// Per-layer cache for incremental causal decoding: attention keys/values
/// and the depthwise-conv tail (post-GLU frames).
#[derive(Debug, Clone, Default)]
struct LayerState {
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
    conv_tail: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct StackState {
    layers: Vec<LayerState>,
    pub pos: usize,
}

impl StackState {
    pub fn new(cfg: &ConformerConfig) -> Self {
        Self {
            layers: (0..cfg.num_layers).map(|_| LayerState::default()).collect(),
            pos: 0,
        }
    }
}

fn ln_row(store: &ParamStore, ids: LnIds, x: &[f64]) -> Vec<f64> {
    layer_norm_row(
        x,
        &store.value(ids.g).data,
        &store.value(ids.b).data,
        LN_EPS,
    )
}

fn linear_row(store: &ParamStore, ids: LinearIds, x: &[f64], meter: &mut MacMeter) -> Vec<f64> {
    affine_row(x, store.value(ids.w), &store.value(ids.b).data, meter)
}

/// One incremental step of a causal stack: consumes one input frame,
/// returns one output frame, and advances the cached state. Matches
/// [`stack_forward_tape`] frame-for-frame on causal configs.
pub fn stack_step(
    store: &ParamStore,
    ids: &StackIds,
    cfg: &ConformerConfig,
    state: &mut StackState,
    input: &[f64],
    meter: &mut MacMeter,
) -> Result<Vec<f64>> {
    assert!(cfg.causal, "incremental decoding requires a causal stack");
    if state.pos >= cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            got: state.pos + 1,
            max: cfg.max_seq_len,
        });
    }
    let h = cfg.hidden_dim;
    let heads = cfg.num_heads;
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let pe = sinusoidal_pe(state.pos + 1, h);
    let mut x: Vec<f64> = input
        .iter()
        .zip(pe.row(state.pos))
        .map(|(a, b)| a + b)
        .collect();

    for (layer, lstate) in ids.layers.iter().zip(state.layers.iter_mut()) {
        if !ids.transformer {
            // Half feed-forward 1.
            let n = ln_row(store, layer.ffn1_ln, &x);
            let a = linear_row(store, layer.ffn1_fc1, &n, meter);
            let act: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
            let out = linear_row(store, layer.ffn1_fc2, &act, meter);
            for (xv, ov) in x.iter_mut().zip(&out) {
                *xv += 0.5 * ov;
            }
        }

        // Self-attention over the cached prefix plus this frame.
        {
            let n = ln_row(store, layer.attn_ln, &x);
            let q = linear_row(store, layer.attn_q, &n, meter);
            let k = linear_row(store, layer.attn_k, &n, meter);
            let v = linear_row(store, layer.attn_v, &n, meter);
            lstate.k_cache.push(k);
            lstate.v_cache.push(v);
            let t_cached = lstate.k_cache.len();
            let mut att = vec![0.0; h];
            for head in 0..heads {
                let off = head * dh;
                let mut scores: Vec<f64> = (0..t_cached)
                    .map(|j| {
                        let krow = &lstate.k_cache[j][off..off + dh];
                        let qrow = &q[off..off + dh];
                        let mut s = 0.0;
                        for d in 0..dh {
                            s += qrow[d] * krow[d];
                        }
                        s * scale
                    })
                    .collect();
                crate::mat::softmax_in_place(&mut scores);
                for (j, &p) in scores.iter().enumerate() {
                    let vrow = &lstate.v_cache[j][off..off + dh];
                    for d in 0..dh {
                        att[off + d] += p * vrow[d];
                    }
                }
            }
            meter.add(2 * (t_cached * h) as u64);
            let o = linear_row(store, layer.attn_o, &att, meter);
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }
        }

        if !ids.transformer {
            // Convolution module with a causal ring of post-GLU frames.
            let n = ln_row(store, layer.conv_ln.unwrap(), &x);
            let pw1 = linear_row(store, layer.conv_pw1.unwrap(), &n, meter);
            let glu: Vec<f64> = (0..h).map(|i| pw1[i] * sigmoid(pw1[h + i])).collect();
            let kernel = cfg.conv_kernel;
            let dw_ids = layer.conv_dw.unwrap();
            let dw_w = store.value(dw_ids.w);
            let dw_b = store.value(dw_ids.b);
            let mut dw = vec![0.0; h];
            // Window covers positions pos-kernel+1 .. pos; missing = zeros.
            for dk in 0..kernel {
                let back = kernel - 1 - dk;
                let frame: Option<&Vec<f64>> = if back == 0 {
                    None // current frame handled below
                } else if lstate.conv_tail.len() >= back {
                    Some(&lstate.conv_tail[lstate.conv_tail.len() - back])
                } else {
                    continue;
                };
                let src: &[f64] = match frame {
                    Some(f) => f,
                    None => &glu,
                };
                for c in 0..h {
                    dw[c] += src[c] * dw_w.at(c, dk);
                }
            }
            meter.add((kernel * h) as u64);
            for (d, b) in dw.iter_mut().zip(&dw_b.data) {
                *d += b;
            }
            lstate.conv_tail.push(glu);
            if lstate.conv_tail.len() > kernel - 1 {
                lstate.conv_tail.remove(0);
            }
            let mid = ln_row(store, layer.conv_mid_ln.unwrap(), &dw);
            let act: Vec<f64> = mid.iter().map(|&v| silu(v)).collect();
            let pw2 = linear_row(store, layer.conv_pw2.unwrap(), &act, meter);
            for (xv, ov) in x.iter_mut().zip(&pw2) {
                *xv += ov;
            }

            // Half feed-forward 2.
            let n = ln_row(store, layer.ffn2_ln.unwrap(), &x);
            let a = linear_row(store, layer.ffn2_fc1.unwrap(), &n, meter);
            let act: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
            let out = linear_row(store, layer.ffn2_fc2.unwrap(), &act, meter);
            for (xv, ov) in x.iter_mut().zip(&out) {
                *xv += 0.5 * ov;
            }
        } else {
            // Transformer layer: full feed-forward after attention.
            let n = ln_row(store, layer.ffn1_ln, &x);
            let a = linear_row(store, layer.ffn1_fc1, &n, meter);
            let act: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
            let out = linear_row(store, layer.ffn1_fc2, &act, meter);
            for (xv, ov) in x.iter_mut().zip(&out) {
                *xv += ov;
            }
        }
    }
    state.pos += 1;
    Ok(ln_row(store, ids.final_ln, &x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rvq::TokenGrid;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_input(r: &mut ChaCha8Rng, t: usize, h: usize) -> Mat {
        Mat::from_fn(t, h, |_, _| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn causal_mask_shapes_and_counts() {
        let m1 = causal_mask(1);
        assert_eq!(m1, vec![vec![true]]);
        let m3 = causal_mask(3);
        let allowed: usize = m3.iter().flatten().filter(|&&b| b).count();
        assert_eq!(allowed, 6);
        for t in [1, 2, 5, 17] {
            let m = causal_mask(t);
            let count: usize = m.iter().flatten().filter(|&&b| b).count();
            assert_eq!(count, t * (t + 1) / 2);
            for (r, row) in m.iter().enumerate() {
                for (c, &ok) in row.iter().enumerate() {
                    assert_eq!(ok, c <= r);
                }
            }
        }
    }

    #[test]
    fn embed_tokens_zero_tables_give_zero() {
        let mut store = ParamStore::new();
        store.add("t0", Mat::zeros(4, 6));
        store.add("t1", Mat::zeros(4, 6));
        let tokens = TokenGrid::new(vec![vec![1, 3, 0], vec![2, 2, 1]], 4).unwrap();
        let mut tape = Tape::new();
        let t0 = tape.param(&store, 0);
        let t1 = tape.param(&store, 1);
        let out = embed_tokens_tape(&mut tape, &[t0, t1], &tokens).unwrap();
        assert!(tape.value(out).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_tokens_single_stage_is_lookup() {
        let mut store = ParamStore::new();
        let table = Mat::from_fn(3, 4, |r, c| (r * 10 + c) as f64);
        store.add("t0", table.clone());
        let tokens = TokenGrid::new(vec![vec![2, 0]], 3).unwrap();
        let mut tape = Tape::new();
        let t0 = tape.param(&store, 0);
        let out = embed_tokens_tape(&mut tape, &[t0], &tokens).unwrap();
        assert_eq!(tape.value(out).row(0), table.row(2));
        assert_eq!(tape.value(out).row(1), table.row(0));
    }

    #[test]
    fn embed_tokens_two_hot_sum() {
        // Stage 0 embeds one-hot in dims 0..K, stage 1 in dims K..2K:
        // the summed embedding is the two-hot indicator of both tokens.
        let k = 3;
        let h = 6;
        let mut store = ParamStore::new();
        store.add("t0", Mat::from_fn(k, h, |r, c| if c == r { 1.0 } else { 0.0 }));
        store.add("t1", Mat::from_fn(k, h, |r, c| if c == k + r { 1.0 } else { 0.0 }));
        let tokens = TokenGrid::new(vec![vec![1], vec![2]], k).unwrap();
        let mut tape = Tape::new();
        let t0 = tape.param(&store, 0);
        let t1 = tape.param(&store, 1);
        let out = embed_tokens_tape(&mut tape, &[t0, t1], &tokens).unwrap();
        assert_eq!(tape.value(out).row(0), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn embed_tokens_rejects_out_of_range() {
        let mut store = ParamStore::new();
        store.add("t0", Mat::zeros(3, 4));
        let tokens = TokenGrid { stages: vec![vec![3]] };
        let mut tape = Tape::new();
        let t0 = tape.param(&store, 0);
        assert!(embed_tokens_tape(&mut tape, &[t0], &tokens).is_err());
    }

    #[test]
    fn project_latent_identity_and_bias() {
        let h = 4;
        let mut store = ParamStore::new();
        store.add("w", Mat::from_fn(h, h, |r, c| if r == c { 1.0 } else { 0.0 }));
        store.add("b", Mat::zeros(1, h));
        store.add("w0", Mat::zeros(h, h));
        store.add("b1", Mat::from_vec(1, h, vec![1.0, 2.0, 3.0, 4.0]));
        let mut r = rng(3);
        let x = rand_input(&mut r, 3, h);
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let w = tape.param(&store, 0);
        let b = tape.param(&store, 1);
        let out = project_latent_tape(&mut tape, xn, w, b);
        assert_eq!(tape.value(out).data, x.data);

        let w0 = tape.param(&store, 2);
        let b1 = tape.param(&store, 3);
        let out = project_latent_tape(&mut tape, xn, w0, b1);
        for t in 0..3 {
            assert_eq!(tape.value(out).row(t), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn project_latent_matches_matmul_oracle() {
        let mut r = rng(4);
        let (t, l, h) = (5, 3, 7);
        let x = rand_input(&mut r, t, l);
        let w = rand_input(&mut r, l, h);
        let b = rand_input(&mut r, 1, h);
        let mut store = ParamStore::new();
        store.add("w", w.clone());
        store.add("b", b.clone());
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let wn = tape.param(&store, 0);
        let bn = tape.param(&store, 1);
        let out = project_latent_tape(&mut tape, xn, wn, bn);
        // Independent dense matmul oracle.
        for i in 0..t {
            for j in 0..h {
                let mut acc = b.at(0, j);
                for p in 0..l {
                    acc += x.at(i, p) * w.at(p, j);
                }
                assert!((tape.value(out).at(i, j) - acc).abs() < 1e-6);
            }
        }
    }

    fn build_stack(cfg: &ConformerConfig, seed: u64) -> (ParamStore, StackIds) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        add_conformer_params(&mut store, "s.", cfg, &mut r);
        let ids = resolve_conformer_ids(&store, "s.", cfg);
        (store, ids)
    }

    #[test]
    fn causal_stack_ignores_future_frames() {
        let cfg = ConformerConfig::desk(true);
        let (store, ids) = build_stack(&cfg, 10);
        let mut r = rng(11);
        let t = 9;
        let x = rand_input(&mut r, t, cfg.hidden_dim);
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let out = stack_forward_tape(&mut tape, &store, &ids, &cfg, xn, None, PositionSpec::Offset(0)).unwrap();
        let base = tape.value(out).clone();
        for t_pert in [3usize, 6, 8] {
            // Perturb a single dim: a uniform shift across all dims would be
            // removed by the layer norms.
            let mut xp = x.clone();
            *xp.at_mut(t_pert, 0) += 0.7;
            let mut tape2 = Tape::new();
            let xn2 = tape2.constant(xp);
            let out2 = stack_forward_tape(&mut tape2, &store, &ids, &cfg, xn2, None, PositionSpec::Offset(0)).unwrap();
            let pert = tape2.value(out2);
            for frame in 0..t_pert {
                for c in 0..cfg.hidden_dim {
                    assert!(
                        (base.at(frame, c) - pert.at(frame, c)).abs() <= 1e-6,
                        "future frame {t_pert} leaked into frame {frame}"
                    );
                }
            }
            // And the perturbed frame itself must change.
            let d: f64 = (0..cfg.hidden_dim)
                .map(|c| (base.at(t_pert, c) - pert.at(t_pert, c)).abs())
                .fold(0.0, f64::max);
            assert!(d > 1e-8);
        }
    }

    #[test]
    fn bidirectional_stack_mixes_all_frames() {
        let cfg = ConformerConfig::desk(false);
        let (store, ids) = build_stack(&cfg, 12);
        let mut r = rng(13);
        let t = 7;
        let x = rand_input(&mut r, t, cfg.hidden_dim);
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let out = stack_forward_tape(&mut tape, &store, &ids, &cfg, xn, None, PositionSpec::Offset(0)).unwrap();
        let base = tape.value(out).clone();
        let mut xp = x.clone();
        *xp.at_mut(4, 0) += 0.5;
        let mut tape2 = Tape::new();
        let xn2 = tape2.constant(xp);
        let out2 = stack_forward_tape(&mut tape2, &store, &ids, &cfg, xn2, None, PositionSpec::Offset(0)).unwrap();
        let pert = tape2.value(out2);
        for frame in 0..t {
            let d: f64 = (0..cfg.hidden_dim)
                .map(|c| (base.at(frame, c) - pert.at(frame, c)).abs())
                .fold(0.0, f64::max);
            assert!(d > 1e-8, "frame {frame} unaffected by perturbation");
        }
    }

    /// Straight-line single-layer reference: an independent reimplementation
    /// of the block with plain loops, no Tape and no shared helpers.
    fn reference_single_layer(
        store: &ParamStore,
        cfg: &ConformerConfig,
        x_in: &Mat,
    ) -> Mat {
        let h = cfg.hidden_dim;
        let t_len = x_in.rows;
        let get = |name: &str| store.by_name(&format!("s.{name}")).unwrap();
        let ln = |x: &[f64], g: &Mat, b: &Mat| -> Vec<f64> {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g.at(0, i) + b.at(0, i))
                .collect()
        };
        let lin = |x: &[f64], w: &Mat, b: &Mat| -> Vec<f64> {
            (0..w.cols)
                .map(|j| {
                    let mut acc = b.at(0, j);
                    for (i, &xv) in x.iter().enumerate() {
                        acc += xv * w.at(i, j);
                    }
                    acc
                })
                .collect()
        };
        let silu_v = |x: Vec<f64>| -> Vec<f64> {
            x.iter().map(|&v| v / (1.0 + (-v).exp()) * 1.0).collect()
        };
        // Positional encodings.
        let mut rows: Vec<Vec<f64>> = (0..t_len)
            .map(|t| {
                (0..h)
                    .map(|i| {
                        let pair = (i / 2) as f64;
                        let rate = 1.0 / 10000f64.powf(2.0 * pair / h as f64);
                        let ang = t as f64 * rate;
                        x_in.at(t, i) + if i % 2 == 0 { ang.sin() } else { ang.cos() }
                    })
                    .collect()
            })
            .collect();
        // ffn1 half.
        for row in rows.iter_mut() {
            let n = ln(row, get("l0.ffn1.ln.g"), get("l0.ffn1.ln.b"));
            let a = silu_v(lin(&n, get("l0.ffn1.fc1.w"), get("l0.ffn1.fc1.b")));
            let o = lin(&a, get("l0.ffn1.fc2.w"), get("l0.ffn1.fc2.b"));
            for (rv, ov) in row.iter_mut().zip(o) {
                *rv += 0.5 * ov;
            }
        }
        // attention (single head assumed in the tiny config).
        assert_eq!(cfg.num_heads, 1);
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| ln(row, get("l0.attn.ln.g"), get("l0.attn.ln.b")))
            .collect();
        let qs: Vec<Vec<f64>> = normed
            .iter()
            .map(|n| lin(n, get("l0.attn.q.w"), get("l0.attn.q.b")))
            .collect();
        let ks: Vec<Vec<f64>> = normed
            .iter()
            .map(|n| lin(n, get("l0.attn.k.w"), get("l0.attn.k.b")))
            .collect();
        let vs: Vec<Vec<f64>> = normed
            .iter()
            .map(|n| lin(n, get("l0.attn.v.w"), get("l0.attn.v.b")))
            .collect();
        let scale = 1.0 / (h as f64).sqrt();
        for (i, row) in rows.iter_mut().enumerate() {
            let hi = if cfg.causal { i + 1 } else { t_len };
            let mut scores: Vec<f64> = (0..hi)
                .map(|j| {
                    qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>() * scale
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in scores.iter_mut() {
                *s /= sum;
            }
            let mut att = vec![0.0; h];
            for (j, &p) in scores.iter().enumerate() {
                for d in 0..h {
                    att[d] += p * vs[j][d];
                }
            }
            let o = lin(&att, get("l0.attn.o.w"), get("l0.attn.o.b"));
            for (rv, ov) in row.iter_mut().zip(o) {
                *rv += ov;
            }
        }
        // conv module.
        let glu: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| {
                let n = ln(row, get("l0.conv.ln.g"), get("l0.conv.ln.b"));
                let p = lin(&n, get("l0.conv.pw1.w"), get("l0.conv.pw1.b"));
                (0..h)
                    .map(|c| p[c] * (1.0 / (1.0 + (-p[h + c]).exp())))
                    .collect()
            })
            .collect();
        let kernel = cfg.conv_kernel;
        let dw_w = get("l0.conv.dw.w");
        let dw_b = get("l0.conv.dw.b");
        for (t_pos, row) in rows.iter_mut().enumerate() {
            let mut dwv = vec![0.0; h];
            for dk in 0..kernel {
                let src = if cfg.causal {
                    t_pos as isize - (kernel as isize - 1) + dk as isize
                } else {
                    t_pos as isize - ((kernel - 1) / 2) as isize + dk as isize
                };
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                for c in 0..h {
                    dwv[c] += glu[src as usize][c] * dw_w.at(c, dk);
                }
            }
            for c in 0..h {
                dwv[c] += dw_b.at(0, c);
            }
            let mid = ln(&dwv, get("l0.conv.mid_ln.g"), get("l0.conv.mid_ln.b"));
            let act = silu_v(mid);
            let o = lin(&act, get("l0.conv.pw2.w"), get("l0.conv.pw2.b"));
            for (rv, ov) in row.iter_mut().zip(o) {
                *rv += ov;
            }
        }
        // ffn2 half.
        for row in rows.iter_mut() {
            let n = ln(row, get("l0.ffn2.ln.g"), get("l0.ffn2.ln.b"));
            let a = silu_v(lin(&n, get("l0.ffn2.fc1.w"), get("l0.ffn2.fc1.b")));
            let o = lin(&a, get("l0.ffn2.fc2.w"), get("l0.ffn2.fc2.b"));
            for (rv, ov) in row.iter_mut().zip(o) {
                *rv += 0.5 * ov;
            }
        }
        // final ln.
        let mut out = Mat::zeros(t_len, h);
        for (t_pos, row) in rows.iter().enumerate() {
            let n = ln(row, get("final_ln.g"), get("final_ln.b"));
            out.row_mut(t_pos).copy_from_slice(&n);
        }
        out
    }

    #[test]
    fn single_layer_matches_straight_line_reference() {
        for causal in [false, true] {
            let cfg = ConformerConfig::tiny(causal);
            let (store, ids) = build_stack(&cfg, 20 + causal as u64);
            let mut r = rng(21);
            let x = rand_input(&mut r, 3, cfg.hidden_dim);
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let out = stack_forward_tape(&mut tape, &store, &ids, &cfg, xn, None, PositionSpec::Offset(0)).unwrap();
            let reference = reference_single_layer(&store, &cfg, &x);
            assert!(
                tape.value(out).max_abs_diff(&reference) < 1e-6,
                "tape forward deviates from straight-line reference (causal={causal})"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_tiny_stack() {
        let cfg = ConformerConfig::tiny(true);
        let (mut store, ids) = build_stack(&cfg, 30);
        let mut r = rng(31);
        let x = rand_input(&mut r, 3, cfg.hidden_dim);
        let weights = rand_input(&mut r, 3, cfg.hidden_dim);

        let build = |tape: &mut Tape, store: &ParamStore| -> NodeId {
            let xn = tape.constant(x.clone());
            let out = stack_forward_tape(tape, store, &ids, &cfg, xn, None, PositionSpec::Offset(0)).unwrap();
            let wn = tape.constant(weights.clone());
            let prod = tape.mul(out, wn);
            tape.sum_all(prod)
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &store);
        let grads = tape.backward(loss, &store).unwrap();
        // Step 5e-4: the 1e-3 truncation error exceeds the tolerance on a
        // few third-derivative-heavy coordinates; f64 roundoff stays ~1e-12.
        let h_step = 5e-4;
        let mut max_rel: f64 = 0.0;
        for pid in 0..store.len() {
            for i in 0..store.value(pid).len() {
                let orig = store.value(pid).data[i];
                store.value_mut(pid).data[i] = orig + h_step;
                let mut tp = Tape::new();
                let lp = build(&mut tp, &store);
                let fp = tp.value(lp).at(0, 0);
                store.value_mut(pid).data[i] = orig - h_step;
                let mut tm = Tape::new();
                let lm = build(&mut tm, &store);
                let fm = tm.value(lm).at(0, 0);
                store.value_mut(pid).data[i] = orig;
                let fd = (fp - fm) / (2.0 * h_step);
                let an = grads.get(pid).map(|g| g.data[i]).unwrap_or(0.0);
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel <= 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_param_gradients() {
        let cfg = ConformerConfig::tiny(false);
        let (store, ids) = build_stack(&cfg, 40);
        let mut r = rng(41);
        let x = rand_input(&mut r, 2, cfg.hidden_dim);
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let out = stack_forward_tape(&mut tape, &store, &ids, &cfg, xn, None, PositionSpec::Offset(0)).unwrap();
        let s = tape.sum_all(out);
        let loss = tape.scale(s, 0.0);
        let grads = tape.backward(loss, &store).unwrap();
        for pid in 0..store.len() {
            if let Some(g) = grads.get(pid) {
                assert!(g.data.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn sequence_too_long_rejected() {
        let mut cfg = ConformerConfig::tiny(false);
        cfg.max_seq_len = 4;
        let (store, ids) = build_stack(&cfg, 50);
        let mut r = rng(51);
        let x = rand_input(&mut r, 5, cfg.hidden_dim);
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        assert!(matches!(
            stack_forward_tape(&mut tape, &store, &ids, &cfg, xn, None, PositionSpec::Offset(0)),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = ConformerConfig::desk(true);
        let (store_a, ids_a) = build_stack(&cfg, 60);
        let (store_b, ids_b) = build_stack(&cfg, 60);
        let mut r = rng(61);
        let x = rand_input(&mut r, 6, cfg.hidden_dim);
        let mut ta = Tape::new();
        let xa = ta.constant(x.clone());
        let oa = stack_forward_tape(&mut ta, &store_a, &ids_a, &cfg, xa, None, PositionSpec::Offset(0)).unwrap();
        let mut tb = Tape::new();
        let xb = tb.constant(x);
        let ob = stack_forward_tape(&mut tb, &store_b, &ids_b, &cfg, xb, None, PositionSpec::Offset(0)).unwrap();
        assert_eq!(ta.value(oa).data, tb.value(ob).data);
    }

    #[test]
    fn pure_forward_matches_tape_forward() {
        for transformer in [false, true] {
            for causal in [false, true] {
                let cfg = ConformerConfig {
                    num_layers: 2,
                    hidden_dim: 12,
                    num_heads: 2,
                    conv_kernel: 5,
                    ff_expansion: 2,
                    causal,
                    max_seq_len: 64,
                };
                let mut store = ParamStore::new();
                let mut r = rng(80 + transformer as u64 * 2 + causal as u64);
                let ids = if transformer {
                    add_transformer_params(&mut store, "s.", &cfg, &mut r);
                    resolve_transformer_ids(&store, "s.", &cfg)
                } else {
                    add_conformer_params(&mut store, "s.", &cfg, &mut r);
                    resolve_conformer_ids(&store, "s.", &cfg)
                };
                let mut rr = rng(81);
                let x = rand_input(&mut rr, 7, cfg.hidden_dim);
                let mut tape = Tape::new();
                let xn = tape.constant(x.clone());
                let on_tape =
                    stack_forward_tape(&mut tape, &store, &ids, &cfg, xn, None, PositionSpec::Offset(0))
                        .unwrap();
                let mut meter = MacMeter::new();
                let pure = stack_forward_pure(
                    &store,
                    &ids,
                    &cfg,
                    &x,
                    None,
                    PositionSpec::Offset(0),
                    &mut meter,
                )
                .unwrap();
                assert!(
                    tape.value(on_tape).max_abs_diff(&pure) < 1e-9,
                    "pure forward deviates (transformer={transformer}, causal={causal})"
                );
                assert!(meter.macs > 0);
            }
        }
    }

    #[test]
    fn periodic_positions_repeat_per_block() {
        let pe = pe_matrix(PositionSpec::Periodic(3), 9, 8);
        for r in 0..9 {
            for c in 0..8 {
                assert_eq!(pe.at(r, c), pe.at(r % 3, c));
            }
        }
    }

    #[test]
    fn incremental_step_matches_batched_causal_forward() {
        for (name, transformer) in [("conformer", false), ("transformer", true)] {
            let cfg = ConformerConfig {
                num_layers: 2,
                hidden_dim: 16,
                num_heads: 2,
                conv_kernel: 5,
                ff_expansion: 2,
                causal: true,
                max_seq_len: 64,
            };
            let mut store = ParamStore::new();
            let mut r = rng(70);
            let ids = if transformer {
                add_transformer_params(&mut store, "s.", &cfg, &mut r);
                resolve_transformer_ids(&store, "s.", &cfg)
            } else {
                add_conformer_params(&mut store, "s.", &cfg, &mut r);
                resolve_conformer_ids(&store, "s.", &cfg)
            };
            let mut rr = rng(71);
            let t = 10;
            let x = rand_input(&mut rr, t, cfg.hidden_dim);
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let batched = stack_forward_tape(&mut tape, &store, &ids, &cfg, xn, None, PositionSpec::Offset(0)).unwrap();
            let full = tape.value(batched);

            let mut state = StackState::new(&cfg);
            let mut meter = MacMeter::new();
            for frame in 0..t {
                let out = stack_step(&store, &ids, &cfg, &mut state, x.row(frame), &mut meter)
                    .unwrap();
                for c in 0..cfg.hidden_dim {
                    assert!(
                        (out[c] - full.at(frame, c)).abs() < 1e-9,
                        "{name}: incremental step diverges at frame {frame} dim {c}: {} vs {}",
                        out[c],
                        full.at(frame, c)
                    );
                }
            }
            assert!(meter.macs > 0);
        }
    }
}
