//! OMSE initialization: pick the clipping range that minimizes the mean
//! squared quantization error over a linear shrink grid.

use super::{fake_quant_scalar, qmax, range_to_params, Granularity, QuantParams, MIN_SCALE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of candidate clipping ranges, `alpha = 1, 0.99, ..., 0.01`.
pub const OMSE_CANDIDATES: usize = 100;

#[derive(Debug, Clone)]
pub struct OmseResult {
    pub params: QuantParams,
    /// Achieved MSE per channel.
    pub mse: Vec<f64>,
    /// Channels whose values were all equal; they get the fallback params.
    pub degenerate_channels: Vec<usize>,
}

/// `(s, z, mse)` for the range `[lo, hi]` applied to `values`.
pub fn omse_mse_for_range(values: &[f32], lo: f32, hi: f32, bits: u8) -> (f32, i32, f64) {
    let qm = qmax(bits);
    let (s, z) = range_to_params(lo, hi, qm);
    let mse = values
        .iter()
        .map(|&v| ((v - fake_quant_scalar(v, s, z, qm)) as f64).powi(2))
        .sum::<f64>()
        / values.len() as f64;
    (s, z, mse)
}

fn channel_values(x: &Tensor, g: Granularity) -> Result<Vec<Vec<f32>>> {
    let c = g.channels(x.shape())?;
    let map = g.channel_of(x.shape())?;
    let mut out = vec![Vec::with_capacity(x.numel() / c); c];
    for (i, &v) in x.data().iter().enumerate() {
        out[map.get(i)].push(v);
    }
    Ok(out)
}

pub fn omse_init(x: &Tensor, bits: u8, granularity: Granularity) -> Result<OmseResult> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "omse_init".into() });
    }
    let qm = qmax(bits);
    let mut scale = Vec::new();
    let mut zp = Vec::new();
    let mut mse = Vec::new();
    let mut degenerate = Vec::new();
    for (c, vals) in channel_values(x, granularity)?.iter().enumerate() {
        let (mn, mx) = vals
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if mn == mx {
            degenerate.push(c);
            let z = (qm + 1) / 2;
            let e = vals
                .iter()
                .map(|&v| ((v - fake_quant_scalar(v, MIN_SCALE, z, qm)) as f64).powi(2))
                .sum::<f64>()
                / vals.len() as f64;
            scale.push(MIN_SCALE);
            zp.push(z);
            mse.push(e);
            continue;
        }
        let mut best = (f32::NAN, 0, f64::INFINITY);
        for i in 0..OMSE_CANDIDATES {
            let alpha = 1.0 - i as f32 / OMSE_CANDIDATES as f32;
            let cand = omse_mse_for_range(vals, alpha * mn, alpha * mx, bits);
            // strict: ties keep the earlier (larger) scale
            if cand.2 < best.2 {
                best = cand;
            }
        }
        scale.push(best.0);
        zp.push(best.1);
        mse.push(best.2);
    }
    if !degenerate.is_empty() {
        log::warn!("omse_init: constant channels {degenerate:?} use fallback parameters");
    }
    Ok(OmseResult {
        params: QuantParams::new(scale, zp, bits, granularity)?,
        mse,
        degenerate_channels: degenerate,
    })
}
