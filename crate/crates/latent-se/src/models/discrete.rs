//! Discrete-token models: the time-and-depth autoregressive RQ-Conformer,
//! the one-pass bidirectional token predictor (with a continuous-input
//! variant), and the soft-label encoder fine-tuning baseline.

use super::{argmax, DecodeMode, DecodeStats, DiscreteLogits, Model, Variant};
use crate::autodiff::{NodeId, Tape};
use crate::codec::encoder_forward_tape;
use crate::conformer::{
    embed_tokens_tape, stack_forward_pure, stack_forward_tape, stack_step, PositionSpec,
    StackState,
};
use crate::error::{Error, Result};
use crate::mat::{affine_row, matmul, Mat, MacMeter};
use crate::params::ParamStore;
use crate::rvq::{nearest_codeword, squared_distance, LatentSeq, TokenGrid};

/// Input to the bidirectional token predictor: noisy tokens for d-nar,
/// noisy latents for d-nar-star.
#[derive(Debug, Clone, Copy)]
pub enum DiscreteInput<'a> {
    Tokens(&'a TokenGrid),
    Latents(&'a LatentSeq),
}

fn check_grid(model: &Model, grid: &TokenGrid) -> Result<()> {
    let k = model.codec.config.codebook_size;
    let n = model.codec.config.num_stages;
    if grid.num_stages() != n {
        return Err(Error::ShapeMismatch {
            context: "token grid".into(),
            expected: format!("{n} stages"),
            got: format!("{}", grid.num_stages()),
        });
    }
    for (stage, tokens) in grid.stages.iter().enumerate() {
        for &tok in tokens {
            if tok >= k {
                return Err(Error::IndexOutOfRange {
                    index: tok,
                    size: k,
                    stage,
                });
            }
        }
    }
    Ok(())
}

/// Sum of per-stage embedding rows, computed without the tape.
fn embed_grid_pure(store: &ParamStore, tables: &[crate::params::ParamId], grid: &TokenGrid) -> Mat {
    let h = store.value(tables[0]).cols;
    let t_len = grid.num_frames();
    let mut out = Mat::zeros(t_len, h);
    for (stage, &table) in tables.iter().enumerate() {
        let tab = store.value(table);
        for (t, &tok) in grid.stages[stage].iter().enumerate() {
            let row = out.row_mut(t);
            for (o, v) in row.iter_mut().zip(tab.row(tok)) {
                *o += v;
            }
        }
    }
    out
}

/// Depth-attention windows: row i = t·N + n attends within its frame block,
/// positions t·N .. i.
fn depth_windows(t_len: usize, n_stages: usize) -> (Vec<usize>, Vec<usize>) {
    let total = t_len * n_stages;
    let from = (0..total).map(|i| (i / n_stages) * n_stages).collect();
    let to = (0..total).map(|i| i + 1).collect();
    (from, to)
}

/// Teacher-forced RQ-Conformer forward: per-stage logits nodes (T×K each).
/// Logits at (t, n) are conditioned on all noisy tokens, clean frames
/// 1..t−1 at all stages, and clean stages 1..n−1 at frame t.
pub fn d_ar_forward_tape(
    tape: &mut Tape,
    model: &Model,
    noisy: &TokenGrid,
    teacher: &TokenGrid,
) -> Result<Vec<NodeId>> {
    model.expect_variant(Variant::DAr)?;
    check_grid(model, noisy)?;
    check_grid(model, teacher)?;
    if noisy.num_frames() != teacher.num_frames() {
        return Err(Error::ShapeMismatch {
            context: "d_ar_forward".into(),
            expected: format!("{} frames", noisy.num_frames()),
            got: format!("{}", teacher.num_frames()),
        });
    }
    let store = &model.params;
    let ids = &model.ids;
    let t_len = noisy.num_frames();
    let n_stages = model.codec.config.num_stages;

    // (i) bidirectional context over noisy tokens.
    let noisy_tables: Vec<NodeId> = ids.emb_noisy.iter().map(|&p| tape.param(store, p)).collect();
    let noisy_emb = embed_tokens_tape(tape, &noisy_tables, noisy)?;
    let ctx = stack_forward_tape(
        tape,
        store,
        ids.enc.as_ref().unwrap(),
        &model.config.bidi,
        noisy_emb,
        None,
        PositionSpec::Offset(0),
    )?;

    // (ii) causal stack over shifted clean-token embeddings.
    let clean_tables: Vec<NodeId> = ids.emb_clean.iter().map(|&p| tape.param(store, p)).collect();
    let clean_emb = embed_tokens_tape(tape, &clean_tables, teacher)?;
    let bos_time = tape.param(store, ids.bos_time.unwrap());
    let shifted = if t_len == 1 {
        tape.gather_rows(bos_time, vec![0])
    } else {
        let head = tape.gather_rows(bos_time, vec![0]);
        let body = tape.slice_rows(clean_emb, 0, t_len - 1);
        tape.concat_rows(head, body)
    };
    let temporal = stack_forward_tape(
        tape,
        store,
        ids.tmp.as_ref().unwrap(),
        &model.config.causal,
        shifted,
        None,
        PositionSpec::Offset(0),
    )?;

    // (iii) depth transformer per frame over the stage dimension.
    let base = tape.add(ctx, temporal);
    let expand_idx: Vec<usize> = (0..t_len * n_stages).map(|i| i / n_stages).collect();
    let base_expand = tape.gather_rows(base, expand_idx);
    let bos_depth = tape.param(store, ids.bos_depth.unwrap());
    let mut blocks: Vec<NodeId> = Vec::with_capacity(n_stages);
    blocks.push(tape.gather_rows(bos_depth, vec![0; t_len]));
    for n in 1..n_stages {
        let table = tape.param(store, ids.emb_clean[n - 1]);
        blocks.push(tape.gather_rows(table, teacher.stages[n - 1].clone()));
    }
    let mut stacked = blocks[0];
    for &b in &blocks[1..] {
        stacked = tape.concat_rows(stacked, b);
    }
    // Reorder from stage-major to frame-major rows.
    let perm: Vec<usize> = (0..t_len * n_stages)
        .map(|i| {
            let (t, n) = (i / n_stages, i % n_stages);
            n * t_len + t
        })
        .collect();
    let tok_part = tape.gather_rows(stacked, perm);
    let depth_in = tape.add(base_expand, tok_part);
    let (from, to) = depth_windows(t_len, n_stages);
    let depth_out = stack_forward_tape(
        tape,
        store,
        ids.dep.as_ref().unwrap(),
        &model.config.depth,
        depth_in,
        Some((from, to)),
        PositionSpec::Periodic(n_stages),
    )?;

    let mut logits = Vec::with_capacity(n_stages);
    for (n, head) in ids.heads.iter().enumerate() {
        let rows: Vec<usize> = (0..t_len).map(|t| t * n_stages + n).collect();
        let gathered = tape.gather_rows(depth_out, rows);
        let w = tape.param(store, head.w);
        let b = tape.param(store, head.b);
        let lin = tape.matmul(gathered, w);
        logits.push(tape.add(lin, b));
    }
    Ok(logits)
}

/// No-tape twin of [`d_ar_forward_tape`], with MAC metering.
pub fn d_ar_forward_pure(
    model: &Model,
    noisy: &TokenGrid,
    teacher: &TokenGrid,
    meter: &mut MacMeter,
) -> Result<DiscreteLogits> {
    model.expect_variant(Variant::DAr)?;
    check_grid(model, noisy)?;
    check_grid(model, teacher)?;
    let store = &model.params;
    let ids = &model.ids;
    let t_len = noisy.num_frames();
    let n_stages = model.codec.config.num_stages;
    let h = model.config.bidi.hidden_dim;

    let noisy_emb = embed_grid_pure(store, &ids.emb_noisy, noisy);
    let ctx = stack_forward_pure(
        store,
        ids.enc.as_ref().unwrap(),
        &model.config.bidi,
        &noisy_emb,
        None,
        PositionSpec::Offset(0),
        meter,
    )?;

    let clean_emb = embed_grid_pure(store, &ids.emb_clean, teacher);
    let mut shifted = Mat::zeros(t_len, h);
    shifted
        .row_mut(0)
        .copy_from_slice(&store.value(ids.bos_time.unwrap()).data);
    for t in 1..t_len {
        let src = clean_emb.row(t - 1).to_vec();
        shifted.row_mut(t).copy_from_slice(&src);
    }
    let temporal = stack_forward_pure(
        store,
        ids.tmp.as_ref().unwrap(),
        &model.config.causal,
        &shifted,
        None,
        PositionSpec::Offset(0),
        meter,
    )?;

    let mut depth_in = Mat::zeros(t_len * n_stages, h);
    for t in 0..t_len {
        for n in 0..n_stages {
            let row = depth_in.row_mut(t * n_stages + n);
            for (r, (c, tm)) in row.iter_mut().zip(ctx.row(t).iter().zip(temporal.row(t))) {
                *r = c + tm;
            }
            if n == 0 {
                for (r, v) in row.iter_mut().zip(&store.value(ids.bos_depth.unwrap()).data) {
                    *r += v;
                }
            } else {
                let table = store.value(ids.emb_clean[n - 1]);
                for (r, v) in row.iter_mut().zip(table.row(teacher.stages[n - 1][t])) {
                    *r += v;
                }
            }
        }
    }
    let (from, to) = depth_windows(t_len, n_stages);
    let depth_out = stack_forward_pure(
        store,
        ids.dep.as_ref().unwrap(),
        &model.config.depth,
        &depth_in,
        Some((from, to)),
        PositionSpec::Periodic(n_stages),
        meter,
    )?;

    let mut stages = Vec::with_capacity(n_stages);
    for (n, head) in ids.heads.iter().enumerate() {
        let mut gathered = Mat::zeros(t_len, h);
        for t in 0..t_len {
            let src = depth_out.row(t * n_stages + n).to_vec();
            gathered.row_mut(t).copy_from_slice(&src);
        }
        let mut lin = matmul(&gathered, store.value(head.w), meter);
        for t in 0..t_len {
            for (v, b) in lin.row_mut(t).iter_mut().zip(&store.value(head.b).data) {
                *v += b;
            }
        }
        stages.push(lin);
    }
    Ok(DiscreteLogits { stages })
}

/// Greedy decode over time then depth. `Cached` reuses attention keys and
/// conv tails; `Recompute` reruns a full teacher-forced forward per token.
pub fn d_ar_decode(
    model: &Model,
    noisy: &TokenGrid,
    mode: DecodeMode,
) -> Result<(TokenGrid, DecodeStats)> {
    model.expect_variant(Variant::DAr)?;
    check_grid(model, noisy)?;
    let t_len = noisy.num_frames();
    let n_stages = model.codec.config.num_stages;
    let mut stats = DecodeStats::default();
    let mut decoded: Vec<Vec<usize>> = vec![vec![0; t_len]; n_stages];

    match mode {
        DecodeMode::Recompute => {
            let mut meter = MacMeter::new();
            for t in 0..t_len {
                stats.temporal_steps += 1;
                for n in 0..n_stages {
                    stats.depth_steps += 1;
                    // Teacher grid filled with the decoded prefix; positions
                    // outside the conditioning set cannot influence (t, n).
                    let grid = TokenGrid {
                        stages: decoded.clone(),
                    };
                    let logits = d_ar_forward_pure(model, noisy, &grid, &mut meter)?;
                    decoded[n][t] = argmax(logits.stages[n].row(t));
                }
            }
            stats.macs = meter.macs;
        }
        DecodeMode::Cached => {
            let store = &model.params;
            let ids = &model.ids;
            let mut meter = MacMeter::new();
            let noisy_emb = embed_grid_pure(store, &ids.emb_noisy, noisy);
            let ctx = stack_forward_pure(
                store,
                ids.enc.as_ref().unwrap(),
                &model.config.bidi,
                &noisy_emb,
                None,
                PositionSpec::Offset(0),
                &mut meter,
            )?;
            let mut tmp_state = StackState::new(&model.config.causal);
            for t in 0..t_len {
                let input: Vec<f64> = if t == 0 {
                    store.value(ids.bos_time.unwrap()).data.clone()
                } else {
                    let mut acc = vec![0.0; model.config.bidi.hidden_dim];
                    for (n, &table) in ids.emb_clean.iter().enumerate() {
                        let tab = store.value(table);
                        for (a, v) in acc.iter_mut().zip(tab.row(decoded[n][t - 1])) {
                            *a += v;
                        }
                    }
                    acc
                };
                let temporal = stack_step(
                    store,
                    ids.tmp.as_ref().unwrap(),
                    &model.config.causal,
                    &mut tmp_state,
                    &input,
                    &mut meter,
                )?;
                stats.temporal_steps += 1;
                let base: Vec<f64> = ctx
                    .row(t)
                    .iter()
                    .zip(&temporal)
                    .map(|(a, b)| a + b)
                    .collect();
                let mut dep_state = StackState::new(&model.config.depth);
                for n in 0..n_stages {
                    let mut u = base.clone();
                    if n == 0 {
                        for (uv, v) in u.iter_mut().zip(&store.value(ids.bos_depth.unwrap()).data) {
                            *uv += v;
                        }
                    } else {
                        let table = store.value(ids.emb_clean[n - 1]);
                        for (uv, v) in u.iter_mut().zip(table.row(decoded[n - 1][t])) {
                            *uv += v;
                        }
                    }
                    let d = stack_step(
                        store,
                        ids.dep.as_ref().unwrap(),
                        &model.config.depth,
                        &mut dep_state,
                        &u,
                        &mut meter,
                    )?;
                    stats.depth_steps += 1;
                    let logits = affine_row(
                        &d,
                        store.value(ids.heads[n].w),
                        &store.value(ids.heads[n].b).data,
                        &mut meter,
                    );
                    decoded[n][t] = argmax(&logits);
                }
            }
            stats.macs = meter.macs;
        }
    }
    Ok((
        TokenGrid::new(decoded, model.codec.config.codebook_size)?,
        stats,
    ))
}

/// One-pass bidirectional token prediction (d-nar takes noisy tokens,
/// d-nar-star takes continuous noisy latents).
pub fn d_nar_forward_tape(
    tape: &mut Tape,
    model: &Model,
    input: DiscreteInput<'_>,
) -> Result<Vec<NodeId>> {
    let store = &model.params;
    let ids = &model.ids;
    let trunk_in = match (model.config.variant, input) {
        (Variant::DNar, DiscreteInput::Tokens(tokens)) => {
            check_grid(model, tokens)?;
            let tables: Vec<NodeId> = ids.emb_noisy.iter().map(|&p| tape.param(store, p)).collect();
            embed_tokens_tape(tape, &tables, tokens)?
        }
        (Variant::DNarStar, DiscreteInput::Latents(latents)) => {
            let proj = ids.proj_in.unwrap();
            let x = tape.constant(latents.frames.clone());
            let w = tape.param(store, proj.w);
            let b = tape.param(store, proj.b);
            let lin = tape.matmul(x, w);
            tape.add(lin, b)
        }
        (Variant::DNar, DiscreteInput::Latents(_)) => {
            return Err(Error::WrongInputKind {
                variant: "d-nar".into(),
                expected: "noisy tokens".into(),
            })
        }
        (Variant::DNarStar, DiscreteInput::Tokens(_)) => {
            return Err(Error::WrongInputKind {
                variant: "d-nar-star".into(),
                expected: "noisy latents".into(),
            })
        }
        (other, _) => {
            return Err(Error::VariantMismatch {
                expected: "d-nar or d-nar-star".into(),
                got: other.cli_name().into(),
            })
        }
    };
    let trunk = stack_forward_tape(
        tape,
        store,
        ids.enc.as_ref().unwrap(),
        &model.config.bidi,
        trunk_in,
        None,
        PositionSpec::Offset(0),
    )?;
    let mut logits = Vec::with_capacity(ids.heads.len());
    for head in &ids.heads {
        let w = tape.param(store, head.w);
        let b = tape.param(store, head.b);
        let lin = tape.matmul(trunk, w);
        logits.push(tape.add(lin, b));
    }
    Ok(logits)
}

/// No-tape twin of [`d_nar_forward_tape`], with MAC metering.
pub fn d_nar_forward_pure(
    model: &Model,
    input: DiscreteInput<'_>,
    meter: &mut MacMeter,
) -> Result<DiscreteLogits> {
    let store = &model.params;
    let ids = &model.ids;
    let trunk_in = match (model.config.variant, input) {
        (Variant::DNar, DiscreteInput::Tokens(tokens)) => {
            check_grid(model, tokens)?;
            embed_grid_pure(store, &ids.emb_noisy, tokens)
        }
        (Variant::DNarStar, DiscreteInput::Latents(latents)) => {
            let proj = ids.proj_in.unwrap();
            let mut lin = matmul(&latents.frames, store.value(proj.w), meter);
            for t in 0..lin.rows {
                for (v, b) in lin.row_mut(t).iter_mut().zip(&store.value(proj.b).data) {
                    *v += b;
                }
            }
            lin
        }
        (Variant::DNar, DiscreteInput::Latents(_)) => {
            return Err(Error::WrongInputKind {
                variant: "d-nar".into(),
                expected: "noisy tokens".into(),
            })
        }
        (Variant::DNarStar, DiscreteInput::Tokens(_)) => {
            return Err(Error::WrongInputKind {
                variant: "d-nar-star".into(),
                expected: "noisy latents".into(),
            })
        }
        (other, _) => {
            return Err(Error::VariantMismatch {
                expected: "d-nar or d-nar-star".into(),
                got: other.cli_name().into(),
            })
        }
    };
    let trunk = stack_forward_pure(
        store,
        ids.enc.as_ref().unwrap(),
        &model.config.bidi,
        &trunk_in,
        None,
        PositionSpec::Offset(0),
        meter,
    )?;
    let mut stages = Vec::with_capacity(ids.heads.len());
    for head in &ids.heads {
        let mut lin = matmul(&trunk, store.value(head.w), meter);
        for t in 0..lin.rows {
            for (v, b) in lin.row_mut(t).iter_mut().zip(&store.value(head.b).data) {
                *v += b;
            }
        }
        stages.push(lin);
    }
    Ok(DiscreteLogits { stages })
}

/// Mean cross-entropy over all stages of per-stage logits nodes.
pub fn cross_entropy_stages_tape(
    tape: &mut Tape,
    logits: &[NodeId],
    target: &TokenGrid,
) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for (n, &node) in logits.iter().enumerate() {
        let ce = tape.cross_entropy_rows(node, target.stages[n].clone());
        acc = Some(match acc {
            None => ce,
            Some(a) => tape.add(a, ce),
        });
    }
    let total = acc.expect("at least one stage");
    tape.scale(total, 1.0 / logits.len() as f64)
}

/// Soft-label logits of the fine-tuned encoder output: at stage n,
/// −‖r_{n−1} − c_k‖²/τ with the running residual following hard choices.
pub fn d_ft_logits(model: &Model, latents: &LatentSeq) -> Result<DiscreteLogits> {
    model.expect_variant(Variant::DFt)?;
    let cb = &model.codec.codebooks;
    let tau = model.codec.config.soft_label_temperature;
    let t_len = latents.num_frames();
    let k = cb.codebook_size();
    let mut stages = Vec::with_capacity(cb.num_stages());
    let mut residuals: Vec<Vec<f64>> = (0..t_len).map(|t| latents.frame(t).to_vec()).collect();
    for stage_cb in &cb.stages {
        let mut logits = Mat::zeros(t_len, k);
        for (t, residual) in residuals.iter_mut().enumerate() {
            for idx in 0..k {
                *logits.at_mut(t, idx) = -squared_distance(residual, stage_cb.row(idx)) / tau;
            }
            let (_, codeword) = nearest_codeword(residual, stage_cb)?;
            let codeword = codeword.to_vec();
            for (r, c) in residual.iter_mut().zip(codeword) {
                *r -= c;
            }
        }
        stages.push(logits);
    }
    Ok(DiscreteLogits { stages })
}

/// Training loss for d-ft: per-stage cross-entropy between soft-label
/// logits and clean tokens. The hard residual path is treated as constant
/// (straight-through): gradients flow through the residual subtraction
/// unchanged. When `frozen_choices` is given, those codeword selections are
/// used instead of recomputing them (the finite-difference oracle freezes
/// the hard path).
pub fn d_ft_loss_tape_with(
    tape: &mut Tape,
    model: &Model,
    noisy_samples: &[f64],
    target: &TokenGrid,
    frozen_choices: Option<&[Mat]>,
) -> Result<(NodeId, Vec<Mat>)> {
    model.expect_variant(Variant::DFt)?;
    let cb = &model.codec.codebooks;
    let tau = model.codec.config.soft_label_temperature;
    let wav = tape.constant(Mat::column(noisy_samples.to_vec()));
    let mut r = encoder_forward_tape(tape, &model.params, "ft_enc.", &model.codec.config, wav);
    let t_len = tape.value(r).rows;
    if target.num_frames() != t_len {
        return Err(Error::ShapeMismatch {
            context: "d_ft_loss".into(),
            expected: format!("{t_len} frames"),
            got: format!("{}", target.num_frames()),
        });
    }
    let k = cb.codebook_size();
    let mut acc: Option<NodeId> = None;
    let mut choices = Vec::with_capacity(cb.num_stages());
    for (n, stage_cb) in cb.stages.iter().enumerate() {
        // Cross-entropy is invariant to per-row additive shifts, so the
        // −‖r‖²/τ term common to all k is dropped: logits' = (2·r·cᵀ − ‖c‖²)/τ.
        let cb_t = tape.constant(stage_cb.transpose());
        let dots = tape.matmul(r, cb_t);
        let scaled = tape.scale(dots, 2.0 / tau);
        let norms = Mat::from_vec(
            1,
            k,
            (0..k)
                .map(|idx| {
                    stage_cb.row(idx).iter().map(|v| v * v).sum::<f64>() / tau
                })
                .collect(),
        );
        let norms_node = tape.constant(norms);
        let logits = tape.sub(scaled, norms_node);
        let ce = tape.cross_entropy_rows(logits, target.stages[n].clone());
        acc = Some(match acc {
            None => ce,
            Some(a) => tape.add(a, ce),
        });
        // Hard residual update with detached codewords.
        let chosen = match frozen_choices {
            Some(f) => f[n].clone(),
            None => {
                let values = tape.value(r);
                let mut chosen = Mat::zeros(t_len, cb.latent_dim());
                for t in 0..t_len {
                    let (_, codeword) = nearest_codeword(values.row(t), stage_cb)?;
                    chosen.row_mut(t).copy_from_slice(codeword);
                }
                chosen
            }
        };
        choices.push(chosen.clone());
        let chosen_node = tape.constant(chosen);
        r = tape.sub(r, chosen_node);
    }
    let total = acc.expect("at least one stage");
    let loss = tape.scale(total, 1.0 / cb.num_stages() as f64);
    Ok((loss, choices))
}

pub fn d_ft_loss_tape(
    tape: &mut Tape,
    model: &Model,
    noisy_samples: &[f64],
    target: &TokenGrid,
) -> Result<NodeId> {
    Ok(d_ft_loss_tape_with(tape, model, noisy_samples, target, None)?.0)
}
