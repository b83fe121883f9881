//! Continuous-latent models: the causal autoregressive predictor with
//! quantize-feedback inference, the one-pass bidirectional predictor, and
//! the encoder fine-tuning baselines.
//!
//! The autoregressive model runs one causal stack over a 2T sequence: the
//! first T positions carry the projected noisy latents (so every step can
//! attend to the whole noisy signal), and positions T..2T carry the
//! frame-aligned feature concatenation of the projected noisy frame and
//! the projected previous clean frame. Predictions read from the second
//! half.

use super::{ContinuousPrediction, DecodeMode, DecodeStats, Linear, Model, Variant};
use crate::autodiff::{NodeId, Tape};
use crate::codec::encoder_forward_tape;
use crate::conformer::{stack_forward_pure, stack_forward_tape, stack_step, PositionSpec, StackState};
use crate::error::{Error, Result};
use crate::mat::{affine_row, matmul, Mat, MacMeter};
use crate::params::ParamStore;
use crate::rvq::LatentSeq;

fn affine_tape(tape: &mut Tape, store: &ParamStore, lin: Linear, x: NodeId) -> NodeId {
    let w = tape.param(store, lin.w);
    let b = tape.param(store, lin.b);
    let y = tape.matmul(x, w);
    tape.add(y, b)
}

fn affine_pure(store: &ParamStore, lin: Linear, x: &Mat, meter: &mut MacMeter) -> Mat {
    let mut y = matmul(x, store.value(lin.w), meter);
    let b = store.value(lin.b);
    for r in 0..y.rows {
        for (v, bv) in y.row_mut(r).iter_mut().zip(&b.data) {
            *v += bv;
        }
    }
    y
}

fn check_latents(model: &Model, latents: &LatentSeq, what: &str) -> Result<()> {
    if latents.latent_dim() != model.codec.config.latent_dim {
        return Err(Error::ShapeMismatch {
            context: what.into(),
            expected: format!("latent dim {}", model.codec.config.latent_dim),
            got: format!("{}", latents.latent_dim()),
        });
    }
    Ok(())
}

/// Teacher-forced c-ar forward: mean at frame t conditions on all noisy
/// frames (through the prefix) and clean frames 1..t−1 only.
pub fn c_ar_forward_tape(
    tape: &mut Tape,
    model: &Model,
    noisy: &LatentSeq,
    teacher: &LatentSeq,
) -> Result<NodeId> {
    model.expect_variant(Variant::CAr)?;
    check_latents(model, noisy, "c_ar noisy latents")?;
    check_latents(model, teacher, "c_ar teacher latents")?;
    if noisy.num_frames() != teacher.num_frames() {
        return Err(Error::ShapeMismatch {
            context: "c_ar_forward".into(),
            expected: format!("{} frames", noisy.num_frames()),
            got: format!("{}", teacher.num_frames()),
        });
    }
    let store = &model.params;
    let ids = &model.ids;
    let t_len = noisy.num_frames();

    let noisy_node = tape.constant(noisy.frames.clone());
    let noisy_proj = affine_tape(tape, store, ids.proj_noisy.unwrap(), noisy_node);
    let pad = tape.param(store, ids.pad_prefix.unwrap());
    let pad_rows = tape.gather_rows(pad, vec![0; t_len]);
    let prefix = tape.concat_cols(noisy_proj, pad_rows);

    let start = tape.param(store, ids.start_clean.unwrap());
    let start_row = tape.gather_rows(start, vec![0]);
    let clean_shift = if t_len == 1 {
        start_row
    } else {
        let teacher_node = tape.constant(Mat::from_vec(
            t_len - 1,
            teacher.latent_dim(),
            teacher.frames.data[..(t_len - 1) * teacher.latent_dim()].to_vec(),
        ));
        let teacher_proj = affine_tape(tape, store, ids.proj_clean.unwrap(), teacher_node);
        tape.concat_rows(start_row, teacher_proj)
    };
    let clean_in = tape.concat_cols(noisy_proj, clean_shift);

    let seq = tape.concat_rows(prefix, clean_in);
    let out = stack_forward_tape(
        tape,
        store,
        ids.tmp.as_ref().unwrap(),
        &model.config.causal,
        seq,
        None,
        PositionSpec::Offset(0),
    )?;
    let pred_rows = tape.slice_rows(out, t_len, 2 * t_len);
    Ok(affine_tape(tape, store, ids.head.unwrap(), pred_rows))
}

/// No-tape twin of [`c_ar_forward_tape`], with MAC metering.
pub fn c_ar_forward_pure(
    model: &Model,
    noisy: &LatentSeq,
    teacher: &LatentSeq,
    meter: &mut MacMeter,
) -> Result<ContinuousPrediction> {
    model.expect_variant(Variant::CAr)?;
    check_latents(model, noisy, "c_ar noisy latents")?;
    check_latents(model, teacher, "c_ar teacher latents")?;
    let store = &model.params;
    let ids = &model.ids;
    let t_len = noisy.num_frames();
    let half = model.config.causal.hidden_dim / 2;

    let noisy_proj = affine_pure(store, ids.proj_noisy.unwrap(), &noisy.frames, meter);
    let mut seq = Mat::zeros(2 * t_len, 2 * half);
    let pad = store.value(ids.pad_prefix.unwrap());
    for t in 0..t_len {
        seq.row_mut(t)[..half].copy_from_slice(noisy_proj.row(t));
        seq.row_mut(t)[half..].copy_from_slice(&pad.data);
    }
    let start = store.value(ids.start_clean.unwrap());
    for t in 0..t_len {
        let second: Vec<f64> = if t == 0 {
            start.data.clone()
        } else {
            affine_row(
                teacher.frame(t - 1),
                store.value(ids.proj_clean.unwrap().w),
                &store.value(ids.proj_clean.unwrap().b).data,
                meter,
            )
        };
        seq.row_mut(t_len + t)[..half].copy_from_slice(noisy_proj.row(t));
        seq.row_mut(t_len + t)[half..].copy_from_slice(&second);
    }
    let out = stack_forward_pure(
        store,
        ids.tmp.as_ref().unwrap(),
        &model.config.causal,
        &seq,
        None,
        PositionSpec::Offset(0),
        meter,
    )?;
    let pred = Mat::from_vec(
        t_len,
        out.cols,
        out.data[t_len * out.cols..].to_vec(),
    );
    let means = affine_pure(store, ids.head.unwrap(), &pred, meter);
    Ok(ContinuousPrediction { means })
}

/// Sequential c-ar decode. Previously predicted frames pass through the
/// codec quantizer before being fed back (inference only) when
/// `quantize_feedback` is set; the returned sequence is the raw means.
pub fn c_ar_decode(
    model: &Model,
    noisy: &LatentSeq,
    mode: DecodeMode,
) -> Result<(LatentSeq, DecodeStats)> {
    model.expect_variant(Variant::CAr)?;
    check_latents(model, noisy, "c_ar noisy latents")?;
    let store = &model.params;
    let ids = &model.ids;
    let t_len = noisy.num_frames();
    let l = model.codec.config.latent_dim;
    let half = model.config.causal.hidden_dim / 2;
    let mut stats = DecodeStats::default();
    let mut means = Mat::zeros(t_len, l);

    let feedback = |frame: &[f64]| -> Result<Vec<f64>> {
        if model.config.quantize_feedback {
            let single = LatentSeq::new(Mat::from_vec(1, l, frame.to_vec()))?;
            let (_, recon) = model.codec.quantize(&single)?;
            Ok(recon.frame(0).to_vec())
        } else {
            Ok(frame.to_vec())
        }
    };

    match mode {
        DecodeMode::Recompute => {
            let mut meter = MacMeter::new();
            let mut fed = Mat::zeros(t_len, l);
            for t in 0..t_len {
                stats.temporal_steps += 1;
                let teacher = LatentSeq::new(fed.clone())?;
                let pred = c_ar_forward_pure(model, noisy, &teacher, &mut meter)?;
                let row = pred.means.row(t).to_vec();
                means.row_mut(t).copy_from_slice(&row);
                if t + 1 < t_len {
                    let fb = feedback(&row)?;
                    fed.row_mut(t).copy_from_slice(&fb);
                }
            }
            stats.macs = meter.macs;
        }
        DecodeMode::Cached => {
            let mut meter = MacMeter::new();
            let noisy_proj = affine_pure(store, ids.proj_noisy.unwrap(), &noisy.frames, &mut meter);
            let mut state = StackState::new(&model.config.causal);
            let pad = store.value(ids.pad_prefix.unwrap());
            // Prefill: the noisy prefix positions (batched-equivalent, no
            // sequential dependency; not counted as decode steps).
            for t in 0..t_len {
                let mut input = vec![0.0; 2 * half];
                input[..half].copy_from_slice(noisy_proj.row(t));
                input[half..].copy_from_slice(&pad.data);
                stack_step(
                    store,
                    ids.tmp.as_ref().unwrap(),
                    &model.config.causal,
                    &mut state,
                    &input,
                    &mut meter,
                )?;
            }
            let mut prev: Option<Vec<f64>> = None;
            for t in 0..t_len {
                stats.temporal_steps += 1;
                let second: Vec<f64> = match &prev {
                    None => store.value(ids.start_clean.unwrap()).data.clone(),
                    Some(p) => affine_row(
                        p,
                        store.value(ids.proj_clean.unwrap().w),
                        &store.value(ids.proj_clean.unwrap().b).data,
                        &mut meter,
                    ),
                };
                let mut input = vec![0.0; 2 * half];
                input[..half].copy_from_slice(noisy_proj.row(t));
                input[half..].copy_from_slice(&second);
                let out = stack_step(
                    store,
                    ids.tmp.as_ref().unwrap(),
                    &model.config.causal,
                    &mut state,
                    &input,
                    &mut meter,
                )?;
                let mean = affine_row(
                    &out,
                    store.value(ids.head.unwrap().w),
                    &store.value(ids.head.unwrap().b).data,
                    &mut meter,
                );
                means.row_mut(t).copy_from_slice(&mean);
                prev = Some(feedback(&mean)?);
            }
            stats.macs = meter.macs;
        }
    }
    Ok((LatentSeq::new(means)?, stats))
}

/// One-pass bidirectional mean prediction.
pub fn c_nar_forward_tape(tape: &mut Tape, model: &Model, noisy: &LatentSeq) -> Result<NodeId> {
    if !matches!(model.config.variant, Variant::CNar | Variant::CNarFt) {
        return Err(Error::VariantMismatch {
            expected: "c-nar or c-nar-ft".into(),
            got: model.config.variant.cli_name().into(),
        });
    }
    check_latents(model, noisy, "c_nar input latents")?;
    let store = &model.params;
    let ids = &model.ids;
    let x = tape.constant(noisy.frames.clone());
    let proj = affine_tape(tape, store, ids.proj_in.unwrap(), x);
    let trunk = stack_forward_tape(
        tape,
        store,
        ids.enc.as_ref().unwrap(),
        &model.config.bidi,
        proj,
        None,
        PositionSpec::Offset(0),
    )?;
    Ok(affine_tape(tape, store, ids.head.unwrap(), trunk))
}

/// No-tape twin of [`c_nar_forward_tape`]; also serves c-nar-ft after the
/// tuned encoder has produced `noisy`.
pub fn c_nar_forward_pure(
    model: &Model,
    noisy: &LatentSeq,
    meter: &mut MacMeter,
) -> Result<ContinuousPrediction> {
    if !matches!(model.config.variant, Variant::CNar | Variant::CNarFt) {
        return Err(Error::VariantMismatch {
            expected: "c-nar or c-nar-ft".into(),
            got: model.config.variant.cli_name().into(),
        });
    }
    check_latents(model, noisy, "c_nar input latents")?;
    let store = &model.params;
    let ids = &model.ids;
    let proj = affine_pure(store, ids.proj_in.unwrap(), &noisy.frames, meter);
    let trunk = stack_forward_pure(
        store,
        ids.enc.as_ref().unwrap(),
        &model.config.bidi,
        &proj,
        None,
        PositionSpec::Offset(0),
        meter,
    )?;
    let means = affine_pure(store, ids.head.unwrap(), &trunk, meter);
    Ok(ContinuousPrediction { means })
}

/// c-ft forward: the tuned encoder output is the Gaussian mean directly.
pub fn c_ft_forward_tape(tape: &mut Tape, model: &Model, noisy_samples: &[f64]) -> Result<NodeId> {
    model.expect_variant(Variant::CFt)?;
    let wav = tape.constant(Mat::column(noisy_samples.to_vec()));
    Ok(encoder_forward_tape(
        tape,
        &model.params,
        "ft_enc.",
        &model.codec.config,
        wav,
    ))
}

/// c-nar-ft forward: tuned encoder feeding the bidirectional enhancer.
pub fn c_nar_ft_forward_tape(
    tape: &mut Tape,
    model: &Model,
    noisy_samples: &[f64],
) -> Result<NodeId> {
    model.expect_variant(Variant::CNarFt)?;
    let store = &model.params;
    let ids = &model.ids;
    let wav = tape.constant(Mat::column(noisy_samples.to_vec()));
    let latents = encoder_forward_tape(tape, store, "ft_enc.", &model.codec.config, wav);
    let proj = affine_tape(tape, store, ids.proj_in.unwrap(), latents);
    let trunk = stack_forward_tape(
        tape,
        store,
        ids.enc.as_ref().unwrap(),
        &model.config.bidi,
        proj,
        None,
        PositionSpec::Offset(0),
    )?;
    Ok(affine_tape(tape, store, ids.head.unwrap(), trunk))
}

/// ½·Σ_t‖x_t − m_t‖² / T on the tape (the Gaussian NLL data term).
pub fn gaussian_data_term_tape(tape: &mut Tape, means: NodeId, target: &LatentSeq) -> NodeId {
    let t_len = target.num_frames();
    let target_node = tape.constant(target.frames.clone());
    let diff = tape.sub(means, target_node);
    let sq = tape.sqr(diff);
    let total = tape.sum_all(sq);
    tape.scale(total, 0.5 / t_len as f64)
}
