//! Uniform affine quantization.
//!
//! `q = clamp(round(x / s) + z, 0, 2^k - 1)` and `x̂ = s · (q - z)`, with
//! round-half-away-from-zero. Parameters are either one `(s, z)` pair for the
//! whole tensor or one per slice along a channel axis.

mod fake;
mod omse;

pub use fake::{adaround_weight, AdaRoundState};
pub use omse::{omse_init, omse_mse_for_range, OmseResult, OMSE_CANDIDATES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest admissible scale.
pub const MIN_SCALE: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

impl Granularity {
    /// Number of parameter slots for a tensor of `shape`.
    pub fn channels(&self, shape: &[usize]) -> Result<usize> {
        match *self {
            Granularity::PerTensor => Ok(1),
            Granularity::PerChannel { axis } => shape
                .get(axis)
                .copied()
                .ok_or_else(|| Error::shape("granularity", format!("axis {axis} for {shape:?}"))),
        }
    }

    /// Parameter slot of every flat element of a tensor of `shape`.
    pub fn channel_of(&self, shape: &[usize]) -> Result<ChannelMap> {
        match *self {
            Granularity::PerTensor => Ok(ChannelMap { inner: usize::MAX, extent: 1 }),
            Granularity::PerChannel { axis } => {
                let extent = self.channels(shape)?;
                Ok(ChannelMap {
                    inner: shape[axis + 1..].iter().product(),
                    extent,
                })
            }
        }
    }
}

/// Maps flat indices to channel slots.
#[derive(Debug, Clone, Copy)]
pub struct ChannelMap {
    inner: usize,
    extent: usize,
}

impl ChannelMap {
    #[inline]
    pub fn get(&self, flat: usize) -> usize {
        if self.extent == 1 {
            0
        } else {
            (flat / self.inner) % self.extent
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scale: Vec<f32>,
    zero_point: Vec<i32>,
    bits: u8,
    granularity: Granularity,
}

pub fn qmax(bits: u8) -> i32 {
    (1i32 << bits) - 1
}

/// Rounds half away from zero.
#[inline]
pub fn round_half_away(x: f32) -> f32 {
    x.round()
}

impl QuantParams {
    pub fn new(scale: Vec<f32>, zero_point: Vec<i32>, bits: u8, granularity: Granularity) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::InvalidArgument(format!("bit-width {bits} outside 2..=8")));
        }
        if scale.is_empty() || scale.len() != zero_point.len() {
            return Err(Error::InvalidArgument("scale / zero-point length mismatch".into()));
        }
        if granularity == Granularity::PerTensor && scale.len() != 1 {
            return Err(Error::InvalidArgument("per-tensor params need one scale".into()));
        }
        if let Some(s) = scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidArgument(format!("scale {s} must be positive")));
        }
        let qm = qmax(bits);
        if let Some(z) = zero_point.iter().find(|z| !(0..=qm).contains(*z)) {
            return Err(Error::InvalidArgument(format!("zero-point {z} outside [0, {qm}]")));
        }
        Ok(Self {
            scale,
            zero_point,
            bits,
            granularity,
        })
    }

    /// Per-tensor params from a single `(s, z)`.
    pub fn per_tensor(scale: f32, zero_point: i32, bits: u8) -> Result<Self> {
        Self::new(vec![scale], vec![zero_point], bits, Granularity::PerTensor)
    }

    /// Params covering `[lo, hi]` (widened to include zero) per channel.
    pub fn from_ranges(lo: &[f32], hi: &[f32], bits: u8, granularity: Granularity) -> Result<Self> {
        let qm = qmax(bits);
        let (scale, zp): (Vec<f32>, Vec<i32>) = lo
            .iter()
            .zip(hi)
            .map(|(&l, &h)| range_to_params(l, h, qm))
            .unzip();
        Self::new(scale, zp, bits, granularity)
    }

    pub fn scale(&self) -> &[f32] {
        &self.scale
    }

    pub fn zero_point(&self) -> &[i32] {
        &self.zero_point
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Lower end of the representable range per channel, `-s·z`.
    pub fn clip_min(&self) -> Vec<f32> {
        self.scale
            .iter()
            .zip(&self.zero_point)
            .map(|(&s, &z)| -s * z as f32)
            .collect()
    }

    pub(crate) fn check_shape(&self, shape: &[usize]) -> Result<ChannelMap> {
        let c = self.granularity.channels(shape)?;
        if c != self.scale.len() {
            return Err(Error::shape(
                "quant params",
                format!("{} channels for shape {shape:?}", self.scale.len()),
            ));
        }
        self.granularity.channel_of(shape)
    }
}

/// `(s, z)` for the range `[min(lo,0), max(hi,0)]`; a zero-width range falls
/// back to the minimum scale with a centred zero-point.
pub(crate) fn range_to_params(lo: f32, hi: f32, qm: i32) -> (f32, i32) {
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let s = (hi - lo) / qm as f32;
    if s <= MIN_SCALE || !s.is_finite() {
        return (MIN_SCALE, (qm + 1) / 2);
    }
    (s, zero_point_for(lo, s, qm))
}

/// Zero-point that places `clip_min` on the integer grid of step `s`.
pub fn zero_point_for(clip_min: f32, s: f32, qm: i32) -> i32 {
    (round_half_away(-clip_min / s) as i32).clamp(0, qm)
}

#[inline]
pub(crate) fn quantize_scalar(x: f32, s: f32, z: i32, qm: i32) -> i32 {
    let q = round_half_away(x / s) + z as f32;
    q.clamp(0.0, qm as f32) as i32
}

#[inline]
pub(crate) fn fake_quant_scalar(x: f32, s: f32, z: i32, qm: i32) -> f32 {
    s * (quantize_scalar(x, s, z, qm) - z) as f32
}

/// Integer codes plus the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<u8>,
    shape: Vec<usize>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }
}

pub fn quantize(x: &Tensor, p: &QuantParams) -> Result<QuantizedTensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "quantize".into() });
    }
    let map = p.check_shape(x.shape())?;
    let qm = p.qmax();
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = map.get(i);
            quantize_scalar(v, p.scale[c], p.zero_point[c], qm) as u8
        })
        .collect();
    Ok(QuantizedTensor {
        codes,
        shape: x.shape().to_vec(),
        params: p.clone(),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let p = &q.params;
    let map = p
        .check_shape(&q.shape)
        .expect("quantized tensor built with matching params");
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            let c = map.get(i);
            p.scale[c] * (code as i32 - p.zero_point[c]) as f32
        })
        .collect();
    Tensor::from_parts(q.shape.clone(), data)
}

/// `dequantize(quantize(x))` without materializing codes.
pub fn fake_quant_tensor(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    let map = p.check_shape(x.shape())?;
    let qm = p.qmax();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = map.get(i);
            fake_quant_scalar(v, p.scale[c], p.zero_point[c], qm)
        })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Mean squared quantization error.
pub fn quant_mse(x: &Tensor, p: &QuantParams) -> Result<f64> {
    let fq = fake_quant_tensor(x, p)?;
    Ok(x
        .data()
        .iter()
        .zip(fq.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / x.numel() as f64)
}
