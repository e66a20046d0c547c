//! A calibrated model: folded full-precision weights plus the quantizer
//! parameters of every non-excluded layer.

use std::collections::BTreeMap;
use std::path::Path;

use super::BitConfig;
use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::clip::{ClipModel, LayerHook};
use crate::error::{Error, Result};
use crate::quant::QuantParams;

/// `meta.kind` of a quantized checkpoint.
pub const CHECKPOINT_KIND: &str = "quantized";

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedClip {
    pub model: ClipModel,
    pub bits: BitConfig,
    /// Weight quantizers keyed by layer name.
    pub weights: BTreeMap<String, QuantParams>,
    /// Input-activation quantizers keyed by layer name.
    pub acts: BTreeMap<String, QuantParams>,
}

impl QuantizedClip {
    pub fn new(model: ClipModel, bits: BitConfig) -> Self {
        Self {
            model,
            bits,
            weights: BTreeMap::new(),
            acts: BTreeMap::new(),
        }
    }

    /// Layers left in full precision on both sides.
    pub fn excluded_layers(&self) -> Vec<String> {
        self.model
            .layers()
            .into_iter()
            .filter(|l| !self.weights.contains_key(&l.name) && !self.acts.contains_key(&l.name))
            .map(|l| l.name)
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint()?;
        for (l, p) in &self.weights {
            ck.quant.insert(format!("{l}.weight"), p.clone());
        }
        for (l, p) in &self.acts {
            ck.quant.insert(format!("{l}.input"), p.clone());
        }
        ck.meta["kind"] = CHECKPOINT_KIND.into();
        ck.meta["bits"] = serde_json::to_value(self.bits)?;
        ck.meta["excluded"] = serde_json::to_value(self.excluded_layers())?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint("not a quantized checkpoint".into()));
        }
        let bits: BitConfig = serde_json::from_value(
            ck.meta.get("bits").cloned().ok_or_else(|| Error::Checkpoint("missing bits".into()))?,
        )?;
        let model = ClipModel::from_checkpoint(ck)?;
        let mut q = Self::new(model, bits);
        for (k, p) in &ck.quant {
            if let Some(l) = k.strip_suffix(".weight") {
                q.weights.insert(l.to_string(), p.clone());
            } else if let Some(l) = k.strip_suffix(".input") {
                q.acts.insert(l.to_string(), p.clone());
            } else {
                return Err(Error::Checkpoint(format!("unknown quant entry `{k}`")));
            }
        }
        Ok(q)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Simulated-quantization forward: fake-quantize every registered input and weight.
impl LayerHook for QuantizedClip {
    fn apply(&mut self, tape: &mut Tape, layer: &str, x: Var, w: Var) -> Result<(Var, Var)> {
        let x = match self.acts.get(layer) {
            Some(p) => tape.fake_quant(x, p)?,
            None => x,
        };
        let w = match self.weights.get(layer) {
            Some(p) => tape.fake_quant(w, p)?,
            None => w,
        };
        Ok((x, w))
    }
}
