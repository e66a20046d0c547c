//! Per-unit reconstruction of quantizer parameters.

use serde::{Deserialize, Serialize};

use super::CalibConfig;
use crate::autograd::{Tape, Var};
use crate::clip::{LayerInfo, LayerKind, ENCODE_CHUNK};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::quant::{adaround_weight, AdaRoundState};
use crate::quant::{omse_init, Granularity, QuantParams, MIN_SCALE};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// Learning rate for the rounding variables; they live on a logit scale.
const ADAROUND_LR: f32 = 1e-2;
const ADAROUND_LAMBDA: f32 = 0.01;
const ADAROUND_WARMUP: f32 = 0.2;
const BETA_START: f32 = 20.0;
const BETA_END: f32 = 2.0;

pub struct UnitData<'a> {
    pub info: &'a LayerInfo,
    pub weight: &'a Tensor,
    pub bias: Option<&'a Tensor>,
    /// Unit inputs with every earlier unit quantized, `[N, ...]`.
    pub inputs: &'a Tensor,
    /// Full-precision unit outputs on full-precision inputs, `[N, ...]`.
    pub target: &'a Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct UnitResult {
    pub weight: Option<QuantParams>,
    pub act: Option<QuantParams>,
    /// Weights with learned rounding baked in (already on the grid).
    pub rounded_weight: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub id: String,
    pub layer: String,
    pub weight_bits: u8,
    pub act_bits: u8,
    /// Held-out output MSE with OMSE-initialized params.
    pub init_mse: f64,
    /// Held-out output MSE with the params that were kept.
    pub final_mse: f64,
    /// Tuned params did worse on held-out data and were discarded.
    pub reverted: bool,
    /// `‖Ô - O‖ / ‖O‖` against the full-precision target.
    pub rel_error: f64,
    /// Same, against the full-precision unit on the same (quantized-prefix) inputs.
    pub rel_error_isolated: f64,
    /// Loss still not decreasing over the second half of optimization.
    pub stalled: bool,
    pub trace: Vec<f32>,
}

/// Layer computation of a unit: conv + ReLU for a CNN stage (batch norm
/// already folded), a plain affine map otherwise.
pub fn unit_apply(tape: &mut Tape, info: &LayerInfo, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    match info.kind {
        LayerKind::Conv { stride, pad } => {
            let y = tape.conv2d(x, w, b, stride, pad)?;
            tape.relu(y)
        }
        LayerKind::Linear => tape.linear(x, w, b),
    }
}

pub(crate) fn unit_output_fp(info: &LayerInfo, w: &Tensor, b: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
    run_chunked(info, w, b, x, None, None, None)
}

fn run_chunked(
    info: &LayerInfo,
    w: &Tensor,
    b: Option<&Tensor>,
    x: &Tensor,
    rows: Option<&[usize]>,
    wq: Option<&QuantParams>,
    aq: Option<&QuantParams>,
) -> Result<Tensor> {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..x.shape()[0]).collect();
            &all
        }
    };
    let mut parts = Vec::new();
    for chunk in rows.chunks(ENCODE_CHUNK) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.select_rows(chunk)?);
        let wv = tape.constant(w.clone());
        let bv = b.map(|b| tape.constant(b.clone()));
        let xv = match aq {
            Some(p) => tape.fake_quant(xv, p)?,
            None => xv,
        };
        let wv = match wq {
            Some(p) => tape.fake_quant(wv, p)?,
            None => wv,
        };
        let y = unit_apply(&mut tape, info, xv, wv, bv)?;
        parts.push(tape.value(y).clone());
    }
    Tensor::cat_rows(&parts.iter().collect::<Vec<_>>())
}

fn sq_err(a: &Tensor, b: &Tensor) -> (f64, f64) {
    let e = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    let n = b.data().iter().map(|y| (*y as f64).powi(2)).sum();
    (e, n)
}

/// Activation granularity: per-channel along the feature axis when the input
/// comes out of a layer norm (large inter-channel spread), per-tensor otherwise.
pub fn act_granularity(info: &LayerInfo, input_rank: usize) -> Granularity {
    if info.follows_layernorm {
        Granularity::PerChannel { axis: input_rank - 1 }
    } else {
        Granularity::PerTensor
    }
}

fn rebuild(p: &QuantParams, scale: &[f32], clip_min: &[f32]) -> Result<QuantParams> {
    let qm = p.qmax();
    let z = scale
        .iter()
        .zip(clip_min)
        .map(|(&s, &m)| crate::quant::zero_point_for(m, s, qm))
        .collect();
    QuantParams::new(scale.to_vec(), z, p.bits(), p.granularity())
}

/// Tunes weight and input quantizers of one unit. `weight_bits` /
/// `act_bits` of 32 leave that side in floating point.
pub fn reconstruct(
    id: &str,
    d: &UnitData<'_>,
    weight_bits: u8,
    act_bits: u8,
    cfg: &CalibConfig,
    lr: f32,
    stream: SeedStream,
) -> Result<(UnitResult, UnitReport)> {
    let n = d.inputs.shape()[0];
    if d.target.shape()[0] != n {
        return Err(Error::shape("reconstruct", format!("{n} inputs, {} targets", d.target.shape()[0])));
    }
    if n < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "unit {id}: {n} calibration samples, batch needs {}",
            cfg.batch_size
        )));
    }
    let mut rng = stream.rng();
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let n_hold = ((n as f32 * cfg.holdout_frac).round() as usize).min(n - cfg.batch_size);
    let (hold, train) = if n_hold == 0 {
        (perm.clone(), perm.clone())
    } else {
        (perm[..n_hold].to_vec(), perm[n_hold..].to_vec())
    };

    let w_init = (weight_bits < 32)
        .then(|| omse_init(d.weight, weight_bits, Granularity::PerChannel { axis: 0 }))
        .transpose()?
        .map(|r| r.params);
    let a_init = (act_bits < 32)
        .then(|| omse_init(d.inputs, act_bits, act_granularity(d.info, d.inputs.rank())))
        .transpose()?
        .map(|r| r.params);

    let hold_target = d.target.select_rows(&hold)?;
    let mse_with = |wq: Option<&QuantParams>, aq: Option<&QuantParams>, w: &Tensor| -> Result<(Tensor, f64)> {
        let y = run_chunked(d.info, w, d.bias, d.inputs, Some(&hold), wq, aq)?;
        let (e, _) = sq_err(&y, &hold_target);
        Ok((y, e / hold_target.numel() as f64))
    };
    let (_, init_mse) = mse_with(w_init.as_ref(), a_init.as_ref(), d.weight)?;

    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut w_scale = w_init.as_ref().map(|p| Tensor::from_parts(vec![p.channels()], p.scale().to_vec()));
    let mut a_scale = a_init.as_ref().map(|p| Tensor::from_parts(vec![p.channels()], p.scale().to_vec()));
    let w_min = w_init.as_ref().map(|p| p.clip_min());
    let a_min = a_init.as_ref().map(|p| p.clip_min());
    let mut ada = match (&w_init, cfg.adaround) {
        (Some(p), true) => Some(AdaRoundState::new(d.weight, p)?),
        _ => None,
    };
    let mut opt = Adam::new(lr);
    let mut opt_v = Adam::new(ADAROUND_LR);

    if w_init.is_some() || a_init.is_some() {
        let mut order = train.clone();
        let mut cursor = order.len();
        let warm = (cfg.iterations as f32 * ADAROUND_WARMUP) as usize;
        for it in 0..cfg.iterations {
            if cursor + cfg.batch_size > order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let rows = &order[cursor..cursor + cfg.batch_size];
            cursor += cfg.batch_size;

            let mut tape = Tape::new();
            let mut x = tape.constant(d.inputs.select_rows(rows)?);
            let target = tape.constant(d.target.select_rows(rows)?);
            let bias = d.bias.map(|b| tape.constant(b.clone()));
            let a_leaf = a_scale.as_ref().map(|s| tape.leaf(s.clone()));
            if let (Some(s), Some(p)) = (a_leaf, &a_init) {
                x = tape.fake_quant_learnable(x, s, a_min.as_deref().unwrap(), p.bits(), p.granularity())?;
            }
            let mut w_leaf = None;
            let mut v_leaf = None;
            let mut reg = None;
            let w = match (&ada, &w_init) {
                (Some(st), _) => {
                    let v = tape.leaf(st.v.clone());
                    let t = if it < warm {
                        0.0
                    } else {
                        (it - warm) as f32 / (cfg.iterations - warm).max(1) as f32
                    };
                    let beta = BETA_START + (BETA_END - BETA_START) * t;
                    let (w, r) = adaround_weight(&mut tape, st, v, beta)?;
                    v_leaf = Some(v);
                    if it >= warm {
                        reg = Some(r);
                    }
                    w
                }
                (None, Some(p)) => {
                    let s = tape.leaf(w_scale.clone().unwrap());
                    w_leaf = Some(s);
                    let w = tape.constant(d.weight.clone());
                    tape.fake_quant_learnable(w, s, w_min.as_deref().unwrap(), p.bits(), p.granularity())?
                }
                (None, None) => tape.constant(d.weight.clone()),
            };
            let y = unit_apply(&mut tape, d.info, x, w, bias)?;
            let rec = tape.mse(y, target)?;
            let rec_value = tape.value(rec).item();
            if !rec_value.is_finite() {
                return Err(Error::NonFinite { op: format!("reconstruction of {id}") });
            }
            trace.push(rec_value);
            let loss = match reg {
                Some(r) => {
                    let r = tape.scale(r, ADAROUND_LAMBDA)?;
                    tape.add(rec, r)?
                }
                None => rec,
            };
            let mut g = tape.backward(loss)?;
            let mut params: Vec<&mut Tensor> = Vec::new();
            let mut grads = Vec::new();
            for (leaf, val) in [(w_leaf, w_scale.as_mut()), (a_leaf, a_scale.as_mut())] {
                if let (Some(l), Some(v)) = (leaf, val) {
                    grads.push(g.take(l).unwrap_or_else(|| Tensor::zeros(v.shape().to_vec())));
                    params.push(v);
                }
            }
            if !params.is_empty() {
                let gr: Vec<&Tensor> = grads.iter().collect();
                opt.step(&mut params, &gr)?;
                for p in params {
                    for v in p.data_mut() {
                        *v = v.max(MIN_SCALE);
                    }
                }
            }
            if let (Some(l), Some(st)) = (v_leaf, ada.as_mut()) {
                let gv = g.take(l).unwrap_or_else(|| Tensor::zeros(st.v.shape().to_vec()));
                opt_v.step(&mut [&mut st.v], &[&gv])?;
            }
        }
    } else {
        // nothing to quantize: a single evaluation fills the trace
        let (_, e) = mse_with(None, None, d.weight)?;
        trace = vec![e as f32; cfg.iterations.max(1)];
    }

    let w_final = match (&w_init, &w_scale) {
        (Some(p), Some(s)) if ada.is_none() => Some(rebuild(p, s.data(), w_min.as_deref().unwrap())?),
        (Some(p), _) => Some(p.clone()),
        _ => None,
    };
    let a_final = match (&a_init, &a_scale) {
        (Some(p), Some(s)) => Some(rebuild(p, s.data(), a_min.as_deref().unwrap())?),
        _ => None,
    };
    let rounded = ada.as_ref().map(|st| st.hard_weight());
    let w_eval = rounded.as_ref().unwrap_or(d.weight);
    let (_, final_mse) = mse_with(w_final.as_ref(), a_final.as_ref(), w_eval)?;

    let reverted = final_mse > init_mse;
    let result = if reverted {
        log::info!("unit {id}: tuned params worse on held-out data ({final_mse:.3e} > {init_mse:.3e}), keeping OMSE init");
        UnitResult {
            weight: w_init,
            act: a_init,
            rounded_weight: None,
        }
    } else {
        UnitResult {
            weight: w_final,
            act: a_final,
            rounded_weight: rounded,
        }
    };
    let w_kept = result.rounded_weight.as_ref().unwrap_or(d.weight);
    let (y_hold, kept_mse) = mse_with(result.weight.as_ref(), result.act.as_ref(), w_kept)?;
    let (e, norm) = sq_err(&y_hold, &hold_target);
    let fp_same_in = run_chunked(d.info, d.weight, d.bias, d.inputs, Some(&hold), None, None)?;
    let (ei, ni) = sq_err(&y_hold, &fp_same_in);

    let stalled = is_stalled(&trace);
    if stalled {
        log::warn!("unit {id}: reconstruction loss did not decrease over the second half of optimization");
    }
    let report = UnitReport {
        id: id.to_string(),
        layer: d.info.name.clone(),
        weight_bits,
        act_bits,
        init_mse,
        final_mse: kept_mse,
        reverted,
        rel_error: (e / norm.max(1e-30)).sqrt(),
        rel_error_isolated: (ei / ni.max(1e-30)).sqrt(),
        stalled,
        trace,
    };
    Ok((result, report))
}

/// Loss over the last quarter is no lower than over the quarter before it.
pub(crate) fn is_stalled(trace: &[f32]) -> bool {
    let n = trace.len();
    if n < 8 || trace.iter().all(|&v| v == 0.0) {
        return false;
    }
    let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
    mean(&trace[3 * n / 4..]) >= mean(&trace[n / 2..3 * n / 4])
}
