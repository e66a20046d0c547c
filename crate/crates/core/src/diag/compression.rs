//! Storage and bit-operation accounting for a quantized model.
//!
//! Sizes are kept in bits so that sub-byte weights add up exactly; bytes are
//! reported as `bits / 8`.

use serde::{Deserialize, Serialize};

use crate::calib::{BitConfig, QuantizedClip};
use crate::clip::{is_buffer, ClipModel, LayerInfo};

/// How one layer is stored and executed. Bit-widths of 32 mean full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub weight_bits: u8,
    pub act_bits: u8,
    /// Quantizer slots; each costs an FP32 scale and an FP32 zero-point.
    pub weight_channels: usize,
    pub act_channels: usize,
}

impl LayerPlan {
    pub const FP: LayerPlan = LayerPlan {
        weight_bits: 32,
        act_bits: 32,
        weight_channels: 0,
        act_channels: 0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionOptions {
    /// Count quantizer scales and zero-points.
    pub overhead: bool,
    /// Count only layer weight tensors; otherwise biases and every other
    /// parameter are included at 32 bits.
    pub weights_only: bool,
}

impl Default for CompressionOptions {
    fn default() -> Self {
        Self {
            overhead: true,
            weights_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub weights: u64,
    pub biases: u64,
    pub macs: u64,
    pub plan: LayerPlan,
    pub fp_bits: u64,
    pub quant_bits: u64,
    pub overhead_bits: u64,
}

impl LayerCost {
    pub fn fp_bytes(&self) -> f64 {
        self.fp_bits as f64 / 8.0
    }

    /// Quantized size including quantizer overhead.
    pub fn quant_bytes(&self) -> f64 {
        (self.quant_bits + self.overhead_bits) as f64 / 8.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub options: CompressionOptions,
    pub layers: Vec<LayerCost>,
    /// Non-layer parameters (norms, embeddings, logit scale) kept at 32 bits.
    pub other_params: u64,
    pub fp_bytes: f64,
    pub quant_bytes: f64,
    pub storage_ratio: f64,
    /// Σ MACs · 32 · 32 per image-text pair.
    pub fp_bitops: u128,
    /// Σ MACs · w_bits · a_bits.
    pub quant_bitops: u128,
    pub speedup: f64,
}

/// Builds the ledger from per-layer plans.
pub fn compression_report(
    model: &ClipModel,
    plan: &dyn Fn(&LayerInfo) -> LayerPlan,
    options: CompressionOptions,
) -> CompressionReport {
    let layers_info = model.layers();
    let mut layers = Vec::new();
    let (mut fp_bits, mut q_bits) = (0u64, 0u64);
    let (mut fp_ops, mut q_ops) = (0u128, 0u128);
    let mut layer_params = 0u64;
    for info in &layers_info {
        let p = plan(info);
        let weights = info.weight_count();
        let biases = info.bias_count();
        layer_params += weights + biases;
        let bias_bits = if options.weights_only { 0 } else { biases * 32 };
        let fp = weights * 32 + bias_bits;
        let quant = weights * p.weight_bits as u64 + bias_bits;
        let overhead = if options.overhead {
            let slots = if p.weight_bits < 32 { p.weight_channels } else { 0 }
                + if p.act_bits < 32 { p.act_channels } else { 0 };
            slots as u64 * 64
        } else {
            0
        };
        fp_bits += fp;
        q_bits += quant + overhead;
        fp_ops += info.macs as u128 * 32 * 32;
        q_ops += info.macs as u128 * p.weight_bits as u128 * p.act_bits as u128;
        layers.push(LayerCost {
            name: info.name.clone(),
            weights,
            biases,
            macs: info.macs,
            plan: p,
            fp_bits: fp,
            quant_bits: quant,
            overhead_bits: overhead,
        });
    }
    let all_params: u64 = model
        .params
        .iter()
        .filter(|(k, _)| !is_buffer(k))
        .map(|(_, v)| v.numel() as u64)
        .sum();
    let other_params = all_params.saturating_sub(layer_params);
    if !options.weights_only {
        fp_bits += other_params * 32;
        q_bits += other_params * 32;
    }
    CompressionReport {
        options,
        layers,
        other_params,
        fp_bytes: fp_bits as f64 / 8.0,
        quant_bytes: q_bits as f64 / 8.0,
        storage_ratio: fp_bits as f64 / q_bits.max(1) as f64,
        fp_bitops: fp_ops,
        quant_bitops: q_ops,
        speedup: fp_ops as f64 / q_ops.max(1) as f64,
    }
}

impl CompressionReport {
    /// Ledger of a calibrated model, honoring its exclusions and per-layer bits.
    pub fn for_quantized(q: &QuantizedClip, options: CompressionOptions) -> Self {
        compression_report(
            &q.model,
            &|l| {
                let w = q.weights.get(&l.name);
                let a = q.acts.get(&l.name);
                LayerPlan {
                    weight_bits: w.map_or(32, |p| p.bits()),
                    act_bits: a.map_or(32, |p| p.bits()),
                    weight_channels: w.map_or(0, |p| p.channels()),
                    act_channels: a.map_or(0, |p| p.channels()),
                }
            },
            options,
        )
    }

    /// Every layer at `bits` with per-tensor quantizers and no exclusions.
    pub fn uniform(model: &ClipModel, bits: BitConfig, options: CompressionOptions) -> Self {
        compression_report(
            model,
            &|_| LayerPlan {
                weight_bits: bits.weight,
                act_bits: bits.act,
                weight_channels: 1,
                act_channels: 1,
            },
            options,
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,weights,biases,macs,weight_bits,act_bits,fp_bytes,quant_bytes\n");
        for l in &self.layers {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                l.name,
                l.weights,
                l.biases,
                l.macs,
                l.plan.weight_bits,
                l.plan.act_bits,
                l.fp_bytes(),
                l.quant_bytes()
            ));
        }
        s
    }
}
