//! Dual encoder: CNN or ViT image tower plus a causal transformer text tower.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::data::IMAGE_SIZE;
use super::text::{Tokenizer, MAX_LEN};
use crate::autograd::{BatchStats, BlockWeights, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{Prng, SeedStream};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;
/// Upper bound on the learned logit scale, `ln 100`.
pub const MAX_LOGIT_SCALE: f32 = 4.605_17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cnn,
    Vit,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Self::Cnn),
            "vit" => Ok(Self::Vit),
            _ => Err(Error::InvalidArgument(format!("unknown model variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    pub cnn_channels: [usize; 4],
    pub vit_width: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub vit_mlp: usize,
    pub patch: usize,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub text_mlp: usize,
    pub vocab: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            embed_dim: 64,
            cnn_channels: [16, 32, 48, 64],
            vit_width: 32,
            vit_depth: 4,
            vit_heads: 4,
            vit_mlp: 128,
            patch: 8,
            text_width: 32,
            text_depth: 2,
            text_heads: 4,
            text_mlp: 128,
            vocab: Tokenizer::default().vocab_size(),
        }
    }

    pub fn tokens(&self) -> usize {
        (IMAGE_SIZE / self.patch).pow(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Convolution followed by (optional) batch norm and ReLU.
    Conv { stride: usize, pad: usize },
    Linear,
}

/// A weight-bearing layer as seen by quantization and cost accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub encoder: Encoder,
    pub kind: LayerKind,
    pub weight_shape: Vec<usize>,
    pub has_bias: bool,
    /// Multiply-accumulates per input sample.
    pub macs: u64,
    /// First convolution / patch embedding: never quantized.
    pub first_layer: bool,
    /// Text-encoder MLP projection.
    pub text_mlp: bool,
    /// Input comes straight out of a layer norm (QKV or first MLP projection).
    pub follows_layernorm: bool,
}

impl LayerInfo {
    pub fn weight_count(&self) -> u64 {
        self.weight_shape.iter().product::<usize>() as u64
    }

    pub fn bias_count(&self) -> u64 {
        if self.has_bias {
            self.weight_shape[0] as u64
        } else {
            0
        }
    }
}

/// Intercepts every weight-bearing layer with its input activation and weight.
pub trait LayerHook {
    fn apply(&mut self, tape: &mut Tape, layer: &str, x: Var, w: Var) -> Result<(Var, Var)>;
}

/// Full-precision pass-through.
#[derive(Debug, Default, Clone, Copy)]
pub struct Fp;

impl LayerHook for Fp {
    fn apply(&mut self, _: &mut Tape, _: &str, x: Var, w: Var) -> Result<(Var, Var)> {
        Ok((x, w))
    }
}

/// Records the input activation of every layer it sees.
#[derive(Debug, Default)]
pub struct Capture {
    pub inputs: BTreeMap<String, Tensor>,
}

impl LayerHook for Capture {
    fn apply(&mut self, tape: &mut Tape, layer: &str, x: Var, w: Var) -> Result<(Var, Var)> {
        self.inputs.insert(layer.to_string(), tape.value(x).clone());
        Ok((x, w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with stored running statistics.
    Eval,
    /// Normalize with batch statistics and report them.
    Train,
}

#[derive(Debug, Clone)]
pub struct ImageOutput {
    /// L2-normalized embeddings `[B, D]`.
    pub embed: Var,
    /// Per batch-norm layer: name and batch statistics (train mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
    /// Attention probabilities per block (ViT).
    pub attn: Vec<Var>,
    /// Tokens entering the last attention block (ViT).
    pub last_block_input: Option<Var>,
}

/// Parameter handles bound onto one tape.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipModel {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

fn normal(shape: Vec<usize>, std: f32, rng: &mut Prng) -> Tensor {
    Tensor::randn(shape, rng).map(|v| v * std)
}

impl ClipModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = SeedStream::new(seed).fork("model-init").rng();
        let mut p = BTreeMap::new();
        let d = config.embed_dim;
        let linear = |p: &mut BTreeMap<String, Tensor>, name: &str, o: usize, i: usize, rng: &mut Prng| {
            p.insert(format!("{name}.weight"), normal(vec![o, i], (1.0 / i as f32).sqrt(), rng));
            p.insert(format!("{name}.bias"), Tensor::zeros([o]));
        };
        let ln = |p: &mut BTreeMap<String, Tensor>, name: &str, w: usize| {
            p.insert(format!("{name}.gamma"), Tensor::ones([w]));
            p.insert(format!("{name}.beta"), Tensor::zeros([w]));
        };
        let block = |p: &mut BTreeMap<String, Tensor>, name: &str, w: usize, mlp: usize, rng: &mut Prng| {
            ln(p, &format!("{name}.ln1"), w);
            linear(p, &format!("{name}.attn.qkv"), 3 * w, w, rng);
            linear(p, &format!("{name}.attn.proj"), w, w, rng);
            ln(p, &format!("{name}.ln2"), w);
            linear(p, &format!("{name}.mlp.fc1"), mlp, w, rng);
            linear(p, &format!("{name}.mlp.fc2"), w, mlp, rng);
        };
        match config.variant {
            Variant::Cnn => {
                let mut c_in = 3;
                for (k, &c) in config.cnn_channels.iter().enumerate() {
                    let s = format!("image.stage{}", k + 1);
                    let fan = (c_in * 9) as f32;
                    p.insert(format!("{s}.conv.weight"), normal(vec![c, c_in, 3, 3], (2.0 / fan).sqrt(), &mut rng));
                    ln(&mut p, &format!("{s}.bn"), c);
                    p.insert(format!("{s}.bn.running_mean"), Tensor::zeros([c]));
                    p.insert(format!("{s}.bn.running_var"), Tensor::ones([c]));
                    c_in = c;
                }
                linear(&mut p, "image.head", d, c_in, &mut rng);
            }
            Variant::Vit => {
                let (w, pt) = (config.vit_width, config.patch);
                p.insert(
                    "image.embed.weight".into(),
                    normal(vec![w, 3, pt, pt], (1.0 / (3 * pt * pt) as f32).sqrt(), &mut rng),
                );
                p.insert("image.embed.bias".into(), Tensor::zeros([w]));
                p.insert("image.pos".into(), normal(vec![config.tokens(), w], 0.1, &mut rng));
                for i in 0..config.vit_depth {
                    block(&mut p, &format!("image.blocks.{i}"), w, config.vit_mlp, &mut rng);
                }
                ln(&mut p, "image.ln_final", w);
                linear(&mut p, "image.head", d, w, &mut rng);
            }
        }
        let w = config.text_width;
        p.insert("text.token_embed".into(), normal(vec![config.vocab, w], 0.5, &mut rng));
        p.insert("text.pos".into(), normal(vec![MAX_LEN, w], 0.1, &mut rng));
        for i in 0..config.text_depth {
            block(&mut p, &format!("text.blocks.{i}"), w, config.text_mlp, &mut rng);
        }
        ln(&mut p, "text.ln_final", w);
        linear(&mut p, "text.head", d, w, &mut rng);
        p.insert("logit_scale".into(), Tensor::scalar((1.0f32 / 0.07).ln()));
        Self { config, params: p }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// Puts every non-buffer parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .filter(|(k, _)| !is_buffer(k))
            .map(|(k, v)| {
                let var = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Weight-bearing layers in forward order, image tower first.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let c = &self.config;
        let mut out = Vec::new();
        let lin = |name: String, enc: Encoder, o: usize, i: usize, tokens: usize| LayerInfo {
            text_mlp: enc == Encoder::Text && name.contains(".mlp."),
            follows_layernorm: name.ends_with("attn.qkv") || name.ends_with("mlp.fc1"),
            name,
            encoder: enc,
            kind: LayerKind::Linear,
            weight_shape: vec![o, i],
            has_bias: true,
            macs: (tokens * o * i) as u64,
            first_layer: false,
        };
        let blocks = |out: &mut Vec<LayerInfo>, enc: Encoder, prefix: &str, depth: usize, w: usize, mlp: usize, t: usize| {
            for b in 0..depth {
                let n = |s: &str| format!("{prefix}.blocks.{b}.{s}");
                out.push(lin(n("attn.qkv"), enc, 3 * w, w, t));
                out.push(lin(n("attn.proj"), enc, w, w, t));
                out.push(lin(n("mlp.fc1"), enc, mlp, w, t));
                out.push(lin(n("mlp.fc2"), enc, w, mlp, t));
            }
        };
        match c.variant {
            Variant::Cnn => {
                let (mut c_in, mut side) = (3, IMAGE_SIZE);
                for (k, &ch) in c.cnn_channels.iter().enumerate() {
                    side /= 2;
                    let name = format!("image.stage{}.conv", k + 1);
                    out.push(LayerInfo {
                        has_bias: self.params.contains_key(&format!("{name}.bias")),
                        name,
                        encoder: Encoder::Image,
                        kind: LayerKind::Conv { stride: 2, pad: 1 },
                        weight_shape: vec![ch, c_in, 3, 3],
                        macs: (side * side * ch * c_in * 9) as u64,
                        first_layer: k == 0,
                        text_mlp: false,
                        follows_layernorm: false,
                    });
                    c_in = ch;
                }
                out.push(lin("image.head".into(), Encoder::Image, c.embed_dim, c_in, 1));
            }
            Variant::Vit => {
                let (w, p, t) = (c.vit_width, c.patch, c.tokens());
                out.push(LayerInfo {
                    name: "image.embed".into(),
                    encoder: Encoder::Image,
                    kind: LayerKind::Conv { stride: p, pad: 0 },
                    weight_shape: vec![w, 3, p, p],
                    has_bias: true,
                    macs: (t * w * 3 * p * p) as u64,
                    first_layer: true,
                    text_mlp: false,
                    follows_layernorm: false,
                });
                blocks(&mut out, Encoder::Image, "image", c.vit_depth, w, c.vit_mlp, t);
                out.push(lin("image.head".into(), Encoder::Image, c.embed_dim, w, 1));
            }
        }
        blocks(&mut out, Encoder::Text, "text", c.text_depth, c.text_width, c.text_mlp, MAX_LEN);
        out.push(lin("text.head".into(), Encoder::Text, c.embed_dim, c.text_width, 1));
        out
    }

    fn block_weights(&self, b: &Bound, prefix: &str) -> Result<BlockWeights> {
        let pair = |a: &str, c: &str| -> Result<(Var, Var)> {
            Ok((b.get(&format!("{prefix}.{a}"))?, b.get(&format!("{prefix}.{c}"))?))
        };
        Ok(BlockWeights {
            ln1: pair("ln1.gamma", "ln1.beta")?,
            qkv: pair("attn.qkv.weight", "attn.qkv.bias")?,
            proj: pair("attn.proj.weight", "attn.proj.bias")?,
            ln2: pair("ln2.gamma", "ln2.beta")?,
            fc1: pair("mlp.fc1.weight", "mlp.fc1.bias")?,
            fc2: pair("mlp.fc2.weight", "mlp.fc2.bias")?,
        })
    }

    fn hooked_linear(
        &self,
        tape: &mut Tape,
        b: &Bound,
        hook: &mut dyn LayerHook,
        name: &str,
        x: Var,
    ) -> Result<Var> {
        let w = b.get(&format!("{name}.weight"))?;
        let bias = b.get(&format!("{name}.bias"))?;
        let (x, w) = hook.apply(tape, name, x, w)?;
        tape.linear(x, w, Some(bias))
    }

    /// One CNN stage: conv, batch norm (unless folded into the conv), ReLU.
    pub fn cnn_stage(
        &self,
        tape: &mut Tape,
        b: &Bound,
        k: usize,
        x: Var,
        bn: BnMode,
        hook: &mut dyn LayerHook,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let s = format!("image.stage{k}");
        let conv = format!("{s}.conv");
        let w = b.get(&format!("{conv}.weight"))?;
        let bias = self
            .params
            .contains_key(&format!("{conv}.bias"))
            .then(|| b.get(&format!("{conv}.bias")))
            .transpose()?;
        let (x, w) = hook.apply(tape, &conv, x, w)?;
        let mut h = tape.conv2d(x, w, bias, 2, 1)?;
        if self.params.contains_key(&format!("{s}.bn.gamma")) {
            let g = b.get(&format!("{s}.bn.gamma"))?;
            let be = b.get(&format!("{s}.bn.beta"))?;
            h = match bn {
                BnMode::Eval => tape.batch_norm_eval(
                    h,
                    g,
                    be,
                    self.param(&format!("{s}.bn.running_mean"))?.data(),
                    self.param(&format!("{s}.bn.running_var"))?.data(),
                    BN_EPS,
                )?,
                BnMode::Train => {
                    let (y, st) = tape.batch_norm_train(h, g, be, BN_EPS)?;
                    stats.push((format!("{s}.bn"), st));
                    y
                }
            };
        }
        tape.relu(h)
    }

    /// Image tower on normalized pixels `[B, 3, 64, 64]`.
    pub fn image_forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        bn: BnMode,
        hook: &mut dyn LayerHook,
    ) -> Result<ImageOutput> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1..] != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::shape("image_forward", format!("input {s:?}")));
        }
        let batch = s[0];
        let mut out = ImageOutput {
            embed: x,
            bn_stats: Vec::new(),
            attn: Vec::new(),
            last_block_input: None,
        };
        let feat = match self.config.variant {
            Variant::Cnn => {
                let mut h = x;
                for k in 1..=4 {
                    h = self.cnn_stage(tape, b, k, h, bn, hook, &mut out.bn_stats)?;
                }
                let c = tape.shape(h)[1];
                let pooled = tape.mean_axes(h, &[2, 3])?;
                tape.reshape(pooled, &[batch, c])?
            }
            Variant::Vit => {
                let c = &self.config;
                let w = b.get("image.embed.weight")?;
                let (xq, w) = hook.apply(tape, "image.embed", x, w)?;
                let bias = b.get("image.embed.bias")?;
                let h = tape.conv2d(xq, w, Some(bias), c.patch, 0)?;
                let t = c.tokens();
                let h = tape.reshape(h, &[batch, c.vit_width, t])?;
                let h = tape.permute(h, &[0, 2, 1])?;
                let pos = b.get("image.pos")?;
                let mut h = tape.add(h, pos)?;
                for i in 0..c.vit_depth {
                    if i + 1 == c.vit_depth {
                        out.last_block_input = Some(h);
                    }
                    let (o, attn) = self.run_block(tape, b, &format!("image.blocks.{i}"), h, c.vit_heads, false, hook)?;
                    out.attn.push(attn);
                    h = o;
                }
                let g = b.get("image.ln_final.gamma")?;
                let be = b.get("image.ln_final.beta")?;
                let h = tape.layer_norm(h, g, be, crate::autograd::LN_EPS)?;
                let pooled = tape.mean_axes(h, &[1])?;
                tape.reshape(pooled, &[batch, c.vit_width])?
            }
        };
        let e = self.hooked_linear(tape, b, hook, "image.head", feat)?;
        out.embed = tape.l2_normalize(e)?;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_block(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prefix: &str,
        x: Var,
        heads: usize,
        causal: bool,
        hook: &mut dyn LayerHook,
    ) -> Result<(Var, Var)> {
        let w = self.block_weights(b, prefix)?;
        let o = tape.attention_block_with(x, &w, heads, causal, &mut |t, which, x, w, bias| {
            let (x, w) = hook.apply(t, &format!("{prefix}.{}", which.name()), x, w)?;
            t.linear(x, w, Some(bias))
        })?;
        Ok((o.out, o.attn))
    }

    /// Text tower on padded token sequences.
    pub fn text_forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        tokens: &[Vec<u32>],
        hook: &mut dyn LayerHook,
    ) -> Result<Var> {
        if tokens.is_empty() || tokens.iter().any(|t| t.len() != MAX_LEN) {
            return Err(Error::shape("text_forward", format!("need sequences of length {MAX_LEN}")));
        }
        let c = &self.config;
        if tokens.iter().flatten().any(|&t| t as usize >= c.vocab) {
            return Err(Error::InvalidArgument("token id outside vocabulary".into()));
        }
        let n = tokens.len();
        let ids: Vec<usize> = tokens.iter().flatten().map(|&t| t as usize).collect();
        let table = b.get("text.token_embed")?;
        let e = tape.index_select(table, 0, &ids)?;
        let e = tape.reshape(e, &[n, MAX_LEN, c.text_width])?;
        let pos = b.get("text.pos")?;
        let mut h = tape.add(e, pos)?;
        for i in 0..c.text_depth {
            h = self.run_block(tape, b, &format!("text.blocks.{i}"), h, c.text_heads, true, hook)?.0;
        }
        let g = b.get("text.ln_final.gamma")?;
        let be = b.get("text.ln_final.beta")?;
        let h = tape.layer_norm(h, g, be, crate::autograd::LN_EPS)?;
        let ends: Vec<usize> = tokens.iter().map(|t| Tokenizer::end_position(t)).collect();
        let pooled = tape.gather_tokens(h, &ends)?;
        let e = self.hooked_linear(tape, b, hook, "text.head", pooled)?;
        tape.l2_normalize(e)
    }

    /// Folds eval-mode batch norm into the preceding convolution for CNN
    /// stages `from..=4`. Stage outputs are unchanged up to rounding.
    pub fn fold_bn(&self, from: usize) -> Result<ClipModel> {
        let mut m = self.clone();
        if self.config.variant != Variant::Cnn {
            return Ok(m);
        }
        for k in from..=4 {
            let s = format!("image.stage{k}");
            if !m.params.contains_key(&format!("{s}.bn.gamma")) {
                continue;
            }
            let take = |m: &mut ClipModel, n: &str| m.params.remove(&format!("{s}.bn.{n}")).unwrap();
            let (g, be, mu, var) = (take(&mut m, "gamma"), take(&mut m, "beta"), take(&mut m, "running_mean"), take(&mut m, "running_var"));
            let wname = format!("{s}.conv.weight");
            let w = m.params.get_mut(&wname).unwrap();
            let o = w.shape()[0];
            let per = w.numel() / o;
            let mut bias = vec![0.0; o];
            for c in 0..o {
                let inv = g.data()[c] / (var.data()[c] + BN_EPS).sqrt();
                for v in &mut w.data_mut()[c * per..(c + 1) * per] {
                    *v *= inv;
                }
                bias[c] = be.data()[c] - mu.data()[c] * inv;
            }
            m.params.insert(format!("{s}.conv.bias"), Tensor::new([o], bias)?);
        }
        Ok(m)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        for (k, v) in &self.params {
            ck.insert(k.clone(), v.clone());
        }
        ck.meta = serde_json::json!({ "model": serde_json::to_value(&self.config)? });
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            ck.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing model config".into()))?,
        )?;
        let expected = ClipModel::new(config.clone(), 0);
        let params: BTreeMap<String, Tensor> = ck
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("quant/"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (k, v) in &expected.params {
            // folded checkpoints drop batch-norm entries
            if k.contains(".bn.") && !params.contains_key(k) {
                continue;
            }
            let got = params
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{k}`")))?;
            if got.shape() != v.shape() {
                return Err(Error::Checkpoint(format!("parameter `{k}` has shape {:?}", got.shape())));
            }
        }
        Ok(Self { config, params })
    }

    /// Exponential moving update of batch-norm running statistics.
    pub fn update_running_stats(&mut self, tape: &Tape, stats: &[(String, BatchStats)]) {
        for (name, st) in stats {
            let m = tape.value(st.mean).data().to_vec();
            let v = tape.value(st.var).data().to_vec();
            let rm = self.params.get_mut(&format!("{name}.running_mean")).unwrap();
            for (r, x) in rm.data_mut().iter_mut().zip(&m) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * x;
            }
            let rv = self.params.get_mut(&format!("{name}.running_var")).unwrap();
            for (r, x) in rv.data_mut().iter_mut().zip(&v) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * x;
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().filter(|(k, _)| !is_buffer(k)).map(|(_, v)| v.numel()).sum()
    }
}
