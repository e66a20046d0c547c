//! Post-training quantization of both towers by sequential per-unit
//! output reconstruction.
//!
//! Each unit (a CNN stage, or one projection layer of a transformer) gets
//! OMSE-initialized weight and input quantizers, then its scales are tuned by
//! Adam to match the full-precision unit output. Unit inputs come from the
//! model with every earlier unit already quantized; targets come from the
//! full-precision model on the same samples.

mod qmodel;
mod recon;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use qmodel::{QuantizedClip, CHECKPOINT_KIND};
pub use recon::{reconstruct, unit_apply, UnitData, UnitReport};

use crate::autograd::Tape;
use crate::clip::{BnMode, ClipModel, Encoder, LayerHook, LayerInfo, ENCODE_CHUNK};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// `(weight bits, activation bits)`; 32 means "leave in floating point".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitConfig {
    pub weight: u8,
    pub act: u8,
}

impl BitConfig {
    pub const W4A8: BitConfig = BitConfig { weight: 4, act: 8 };
    pub const W6A6: BitConfig = BitConfig { weight: 6, act: 6 };
    pub const W8A8: BitConfig = BitConfig { weight: 8, act: 8 };
    pub const FP: BitConfig = BitConfig { weight: 32, act: 32 };

    pub fn label(&self) -> String {
        format!("W{}A{}", self.weight, self.act)
    }

    fn validate(&self) -> Result<()> {
        for b in [self.weight, self.act] {
            if !((2..=8).contains(&b) || b == 32) {
                return Err(Error::InvalidArgument(format!("bit-width {b} not in 2..=8 or 32")));
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for BitConfig {
    type Err = Error;
    /// `"4,8"` or `"W4A8"`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        let (w, a) = if let Some(rest) = t.strip_prefix('W') {
            rest.split_once('A').ok_or_else(|| Error::InvalidArgument(format!("bad bit spec `{s}`")))?
        } else {
            t.split_once(',').ok_or_else(|| Error::InvalidArgument(format!("bad bit spec `{s}`")))?
        };
        let p = |v: &str| v.trim().parse::<u8>().map_err(|_| Error::InvalidArgument(format!("bad bit spec `{s}`")));
        let b = BitConfig { weight: p(w)?, act: p(a)? };
        b.validate()?;
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    pub n_images: usize,
    pub n_text: usize,
    pub iterations: usize,
    pub lr_image: f32,
    pub lr_text: f32,
    pub bits: BitConfig,
    /// Bits for text-encoder MLP weights and inputs, regardless of `bits`.
    pub text_mlp_bits: u8,
    pub batch_size: usize,
    /// Fraction of calibration samples held out to validate the tuned params; 0 disables.
    pub holdout_frac: f32,
    /// Learn per-weight rounding instead of weight scales.
    pub adaround: bool,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            n_images: 128,
            n_text: 512,
            iterations: 20_000,
            lr_image: 4e-5,
            lr_text: 4e-6,
            bits: BitConfig::W4A8,
            text_mlp_bits: 8,
            batch_size: 16,
            holdout_frac: 0.25,
            adaround: false,
            seed: 0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        self.bits.validate()?;
        if !(2..=8).contains(&self.text_mlp_bits) {
            return Err(Error::InvalidArgument("text_mlp_bits must be in 2..=8".into()));
        }
        if !(self.lr_image > 0.0 && self.lr_text > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(0.0..0.9).contains(&self.holdout_frac) {
            return Err(Error::InvalidArgument("holdout_frac must be in [0, 0.9)".into()));
        }
        Ok(())
    }

    /// `(weight bits, act bits)` for one layer after exclusions.
    pub fn layer_bits(&self, info: &LayerInfo) -> Option<(u8, u8)> {
        if info.first_layer {
            None
        } else if info.text_mlp {
            Some((self.text_mlp_bits, self.text_mlp_bits))
        } else {
            Some((self.bits.weight, self.bits.act))
        }
    }
}

/// How many layers a reconstruction unit spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Block,
    Layer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSpec {
    pub id: String,
    pub encoder: Encoder,
    pub kind: UnitKind,
    pub layers: Vec<String>,
    /// Left in full precision (first convolution / patch embedding).
    pub excluded: bool,
}

/// Reconstruction units in topological order: one per CNN stage (block
/// granularity) and one per transformer projection (layer granularity),
/// plus the projection heads.
pub fn partition(model: &ClipModel) -> Result<Vec<UnitSpec>> {
    let mut out = Vec::new();
    for l in model.layers() {
        if l.name.is_empty() {
            return Err(Error::InvalidArgument("unnamed layer".into()));
        }
        let (id, kind) = match l.name.strip_suffix(".conv") {
            Some(stage) if l.name.contains(".stage") => (stage.to_string(), UnitKind::Block),
            _ => (l.name.clone(), UnitKind::Layer),
        };
        out.push(UnitSpec {
            id,
            encoder: l.encoder,
            kind,
            layers: vec![l.name.clone()],
            excluded: l.first_layer,
        });
    }
    Ok(out)
}

/// Calibration inputs for one tower.
#[derive(Debug, Clone, Copy)]
pub enum CalibData<'a> {
    /// Normalized images `[N, 3, 64, 64]`.
    Images(&'a Tensor),
    Tokens(&'a [Vec<u32>]),
}

impl CalibData<'_> {
    pub fn len(&self) -> usize {
        match self {
            Self::Images(t) => t.shape()[0],
            Self::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Captures the inputs of `layers` while running `hook` on every layer.
struct Tap<'a> {
    inner: &'a mut dyn LayerHook,
    layers: Vec<String>,
    got: BTreeMap<String, Tensor>,
}

impl LayerHook for Tap<'_> {
    fn apply(&mut self, tape: &mut Tape, layer: &str, x: crate::autograd::Var, w: crate::autograd::Var) -> Result<(crate::autograd::Var, crate::autograd::Var)> {
        if self.layers.iter().any(|l| l == layer) {
            self.got.insert(layer.to_string(), tape.value(x).clone());
        }
        self.inner.apply(tape, layer, x, w)
    }
}

/// Inputs of `layers` over the whole calibration set, run through `model` with `hook`.
pub fn capture_inputs(
    model: &ClipModel,
    data: CalibData<'_>,
    layers: &[String],
    hook: &mut dyn LayerHook,
) -> Result<BTreeMap<String, Tensor>> {
    let mut chunks: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    let n = data.len();
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let len = ENCODE_CHUNK.min(n - start);
        let mut tap = Tap {
            inner: &mut *hook,
            layers: layers.to_vec(),
            got: BTreeMap::new(),
        };
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        match data {
            CalibData::Images(x) => {
                let xv = tape.constant(x.slice_rows(start, len)?);
                model.image_forward(&mut tape, &b, xv, BnMode::Eval, &mut tap)?;
            }
            CalibData::Tokens(t) => {
                model.text_forward(&mut tape, &b, &t[start..start + len], &mut tap)?;
            }
        }
        for (k, v) in tap.got {
            chunks.entry(k).or_default().push(v);
        }
    }
    chunks
        .into_iter()
        .map(|(k, v)| Ok((k, Tensor::cat_rows(&v.iter().collect::<Vec<_>>())?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub bits: BitConfig,
    pub units: Vec<UnitReport>,
}

impl CalibReport {
    /// `unit,iteration,loss` rows.
    pub fn traces_csv(&self) -> String {
        let mut s = String::from("unit,iteration,loss\n");
        for u in &self.units {
            for (i, l) in u.trace.iter().enumerate() {
                s.push_str(&format!("{},{},{}\n", u.id, i, l));
            }
        }
        s
    }
}

/// Quantizes both towers of `model`. Images are normalized synthetic
/// calibration images; `texts` are tokenized calibration prompts.
pub fn quantize_clip(
    model: &ClipModel,
    images: &Tensor,
    texts: &[Vec<u32>],
    cfg: &CalibConfig,
) -> Result<(QuantizedClip, CalibReport)> {
    cfg.validate()?;
    for (what, n) in [("images", images.shape()[0]), ("texts", texts.len())] {
        if n < cfg.batch_size {
            return Err(Error::InvalidArgument(format!(
                "need at least {} calibration {what}, got {n}",
                cfg.batch_size
            )));
        }
    }
    let fp = model.fold_bn(2)?;
    let mut q = QuantizedClip::new(fp.clone(), cfg.bits);
    let infos: BTreeMap<String, LayerInfo> = fp.layers().into_iter().map(|l| (l.name.clone(), l)).collect();
    let units = partition(&fp)?;
    let stream = SeedStream::new(cfg.seed).fork("calibration");

    let mut fp_inputs = BTreeMap::new();
    for (enc, data) in [(Encoder::Image, CalibData::Images(images)), (Encoder::Text, CalibData::Tokens(texts))] {
        let names: Vec<String> = infos.values().filter(|l| l.encoder == enc).map(|l| l.name.clone()).collect();
        fp_inputs.extend(capture_inputs(&fp, data, &names, &mut crate::clip::Fp)?);
    }

    let mut reports = Vec::new();
    for (ui, unit) in units.iter().enumerate() {
        if unit.excluded {
            log::info!("unit {} excluded from quantization", unit.id);
            continue;
        }
        let layer = &unit.layers[0];
        let info = &infos[layer];
        let Some((wb, ab)) = cfg.layer_bits(info) else { continue };
        let data = match unit.encoder {
            Encoder::Image => CalibData::Images(images),
            Encoder::Text => CalibData::Tokens(texts),
        };
        let q_model = q.model.clone();
        let q_in = capture_inputs(&q_model, data, std::slice::from_ref(layer), &mut q)?
            .remove(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} not reached")))?;
        let w = fp.param(&format!("{layer}.weight"))?;
        let bias = fp.params.get(&format!("{layer}.bias"));
        let target = recon::unit_output_fp(info, w, bias, &fp_inputs[layer])?;
        let lr = match unit.encoder {
            Encoder::Image => cfg.lr_image,
            Encoder::Text => cfg.lr_text,
        };
        let ud = UnitData {
            info,
            weight: w,
            bias,
            inputs: &q_in,
            target: &target,
        };
        let (res, report) = reconstruct(&unit.id, &ud, wb, ab, cfg, lr, stream.fork_index("unit", ui as u64))?;
        if let Some(p) = res.weight {
            q.weights.insert(layer.clone(), p);
        }
        if let Some(p) = res.act {
            q.acts.insert(layer.clone(), p);
        }
        if let Some(w) = res.rounded_weight {
            q.model.params.insert(format!("{layer}.weight"), w);
        }
        reports.push(report);
    }
    Ok((q, CalibReport { bits: cfg.bits, units: reports }))
}

#[cfg(test)]
mod tests;
