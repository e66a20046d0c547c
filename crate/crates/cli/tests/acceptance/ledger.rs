//! Criterion 9: the CNN W4A8 compression report against a hand-written ledger.

use clipq_cli::commands::dirs;
use clipq_cli::CliError;
use clipq_core::calib::{BitConfig, QuantizedClip};
use clipq_core::clip::Variant;
use clipq_core::diag::{CompressionOptions, CompressionReport};
use clipq_core::synth::Method;

use super::pipeline::Harness;
use crate::Verdict;

/// `(name, weights, biases, macs, w_bits, a_bits, fp_bits, quant_bits, overhead_bits)`.
/// Biases stay at 32 bits; each quantizer channel carries a 32-bit scale and
/// a 32-bit zero-point. The first convolution is left in full precision and
/// the text MLP runs at 8 bits.
#[rustfmt::skip]
const LEDGER: [(&str, u64, u64, u64, u8, u8, u64, u64, u64); 14] = [
    ("image.stage1.conv",         432,  0,  442368, 32, 32,  13824,  13824,     0),
    ("image.stage2.conv",        4608, 32, 1179648,  4,  8, 148480,  19456,  2112),
    ("image.stage3.conv",       13824, 48,  884736,  4,  8, 443904,  56832,  3136),
    ("image.stage4.conv",       27648, 64,  442368,  4,  8, 886784, 112640,  4160),
    ("image.head",               4096, 64,    4096,  4,  8, 133120,  18432,  4160),
    ("text.blocks.0.attn.qkv",   3072, 96,   49152,  4,  8, 101376,  15360,  8192),
    ("text.blocks.0.attn.proj",  1024, 32,   16384,  4,  8,  33792,   5120,  2112),
    ("text.blocks.0.mlp.fc1",    4096,128,   65536,  8,  8, 135168,  36864, 10240),
    ("text.blocks.0.mlp.fc2",    4096, 32,   65536,  8,  8, 132096,  33792,  2112),
    ("text.blocks.1.attn.qkv",   3072, 96,   49152,  4,  8, 101376,  15360,  8192),
    ("text.blocks.1.attn.proj",  1024, 32,   16384,  4,  8,  33792,   5120,  2112),
    ("text.blocks.1.mlp.fc1",    4096,128,   65536,  8,  8, 135168,  36864, 10240),
    ("text.blocks.1.mlp.fc2",    4096, 32,   65536,  8,  8, 132096,  33792,  2112),
    ("text.head",                2048, 64,    2048,  4,  8,  67584,  10240,  4160),
];

/// Norm affines (32 + 2·128 + 64), logit scale (1), positions (512), token table (2048).
const OTHER_PARAMS: u64 = 2913;
const FP_BYTES: f64 = 323_972.0;
const QUANT_BYTES: f64 = 71_244.0;
const FP_BITOPS: u128 = 3_428_843_520;
const QUANT_BITOPS: u128 = 554_369_024;

pub fn criterion_9(h: &mut Harness) -> Verdict {
    let r = (|| -> clipq_cli::Result<Verdict> {
        let cfg = h.config(Variant::Cnn, Method::D4c, 0);
        h.accuracy(&cfg)?;
        let q = QuantizedClip::load(dirs(&cfg).quant.join("model.ckpt")).map_err(CliError::from)?;
        let rep = CompressionReport::for_quantized(&q, CompressionOptions::default());
        let mut mismatches = Vec::new();
        if rep.layers.len() != LEDGER.len() {
            mismatches.push(format!("{} layers", rep.layers.len()));
        }
        for (l, e) in rep.layers.iter().zip(LEDGER) {
            let got = (
                l.name.as_str(),
                l.weights,
                l.biases,
                l.macs,
                l.plan.weight_bits,
                l.plan.act_bits,
                l.fp_bits,
                l.quant_bits,
                l.overhead_bits,
            );
            if got != e {
                mismatches.push(format!("{got:?} != {e:?}"));
            }
        }
        let totals = (rep.other_params, rep.fp_bytes, rep.quant_bytes, rep.fp_bitops, rep.quant_bitops);
        let want = (OTHER_PARAMS, FP_BYTES, QUANT_BYTES, FP_BITOPS, QUANT_BITOPS);
        if totals != want {
            mismatches.push(format!("totals {totals:?} != {want:?}"));
        }
        if rep.storage_ratio != FP_BYTES / QUANT_BYTES || rep.speedup != FP_BITOPS as f64 / QUANT_BITOPS as f64 {
            mismatches.push(format!("ratios {} {}", rep.storage_ratio, rep.speedup));
        }
        let bare = CompressionOptions {
            overhead: false,
            weights_only: true,
        };
        let w8 = CompressionReport::uniform(&q.model, BitConfig::W8A8, bare).storage_ratio;
        let w4 = CompressionReport::uniform(&q.model, BitConfig::W4A8, bare).storage_ratio;
        if w8 != 4.0 || w4 != 8.0 {
            mismatches.push(format!("uniform ratios {w8} {w4}"));
        }
        Ok(Verdict::new(
            mismatches.is_empty(),
            format!(
                "14 layers + {OTHER_PARAMS} other params: {FP_BYTES} -> {QUANT_BYTES} bytes (x{:.3}), bit-op speedup x{:.3}; uniform W8 {w8}, W4 weights-only {w4}{}",
                rep.storage_ratio,
                rep.speedup,
                if mismatches.is_empty() { String::new() } else { format!("; mismatches: {mismatches:?}") }
            ),
        ))
    })();
    r.unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")))
}
