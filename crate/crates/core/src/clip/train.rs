//! Contrastive pretraining, batched encoding and zero-shot classification.

use serde::{Deserialize, Serialize};

use super::data::{caption, class_balanced_batches, normalize_pixels, ShapesSplit, NUM_CLASSES};
use super::model::{is_buffer, BnMode, ClipModel, Fp, LayerHook, MAX_LOGIT_SCALE};
use super::text::Tokenizer;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// Rows per forward pass when encoding large inputs.
pub const ENCODE_CHUNK: usize = 64;

/// Image embeddings `[N, D]` for normalized pixels, batch norm in eval mode.
pub fn encode_image(model: &ClipModel, images: &Tensor, hook: &mut dyn LayerHook) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let len = ENCODE_CHUNK.min(n - start);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let x = tape.constant(images.slice_rows(start, len)?);
        let out = model.image_forward(&mut tape, &b, x, BnMode::Eval, hook)?;
        parts.push(tape.value(out.embed).clone());
    }
    Tensor::cat_rows(&parts.iter().collect::<Vec<_>>())
}

pub fn encode_text(model: &ClipModel, tokens: &[Vec<u32>], hook: &mut dyn LayerHook) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in tokens.chunks(ENCODE_CHUNK) {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let e = model.text_forward(&mut tape, &b, chunk, hook)?;
        parts.push(tape.value(e).clone());
    }
    Tensor::cat_rows(&parts.iter().collect::<Vec<_>>())
}

pub fn tokenize_all(texts: &[String]) -> Vec<Vec<u32>> {
    let tok = Tokenizer::default();
    texts.iter().map(|t| tok.encode(t)).collect()
}

/// Argmax of cosine similarity between each image row and each class row.
pub fn classify_embeddings(images: &Tensor, classes: &Tensor) -> Result<Vec<usize>> {
    let (n, d) = (images.shape()[0], images.shape()[1]);
    let k = classes.shape()[0];
    if k == 0 {
        return Err(Error::InvalidArgument("zero-shot needs at least one class".into()));
    }
    if classes.shape()[1] != d {
        return Err(Error::shape("classify", "embedding widths differ"));
    }
    Ok((0..n)
        .map(|i| {
            let row = &images.data()[i * d..(i + 1) * d];
            let mut best = (0, f32::NEG_INFINITY);
            for c in 0..k {
                let s: f32 = row.iter().zip(&classes.data()[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum();
                if s > best.1 {
                    best = (c, s);
                }
            }
            best.0
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// Zero-shot accuracy of `images` (pixels in `[0, 1]`) against one prompt per class.
pub fn zero_shot_classify(
    model: &ClipModel,
    images: &Tensor,
    labels: &[usize],
    prompts: &[String],
    hook: &mut dyn LayerHook,
) -> Result<ZeroShotResult> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("zero-shot needs at least one class".into()));
    }
    let t = encode_text(model, &tokenize_all(prompts), hook)?;
    let i = encode_image(model, &normalize_pixels(images), hook)?;
    let predictions = classify_embeddings(&i, &t)?;
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(ZeroShotResult {
        accuracy: correct as f64 / labels.len().max(1) as f64,
        predictions,
    })
}

/// Symmetric contrastive loss on `scale·I·Tᵀ` with matched rows as positives.
pub fn clip_loss(tape: &mut Tape, img: Var, txt: Var, logit_scale: Var) -> Result<Var> {
    let n = tape.shape(img)[0];
    let tt = tape.transpose_last(txt)?;
    let sim = tape.matmul(img, tt)?;
    let s = tape.exp(logit_scale)?;
    let logits = tape.mul(sim, s)?;
    let diag: Vec<usize> = (0..n).collect();
    let a = tape.cross_entropy(logits, &diag)?;
    let lt = tape.transpose_last(logits)?;
    let b = tape.cross_entropy(lt, &diag)?;
    let sum = tape.add(a, b)?;
    tape.scale(sum, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f32>,
    pub steps: usize,
}

/// Linear warmup over the first 5% of steps, then cosine decay to zero.
pub fn lr_at(base: f32, step: usize, total: usize) -> f32 {
    let warm = (total / 20).max(1);
    if step < warm {
        return base * (step + 1) as f32 / warm as f32;
    }
    let t = (step - warm) as f32 / (total - warm).max(1) as f32;
    base * 0.5 * (1.0 + (std::f32::consts::PI * t.min(1.0)).cos())
}

/// Trains both towers with the symmetric contrastive loss on batches holding
/// one image per class.
pub fn pretrain_clip(model: &mut ClipModel, data: &ShapesSplit, cfg: &PretrainConfig) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("pretraining data is empty".into()));
    }
    let stream = SeedStream::new(cfg.seed).fork("pretrain");
    let captions = tokenize_all(&(0..NUM_CLASSES).map(caption).collect::<Vec<_>>());
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::new();
    let mut step = 0;
    let total = cfg.epochs * data.len().div_ceil(NUM_CLASSES);
    for epoch in 0..cfg.epochs {
        let mut rng = stream.fork_index("epoch", epoch as u64).rng();
        for batch in class_balanced_batches(&data.labels, &mut rng) {
            let images = normalize_pixels(&data.images.select_rows(&batch)?);
            let tokens: Vec<Vec<u32>> = batch.iter().map(|&i| captions[data.labels[i]].clone()).collect();
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, true);
            let x = tape.constant(images);
            let out = model.image_forward(&mut tape, &b, x, BnMode::Train, &mut Fp)?;
            let t = model.text_forward(&mut tape, &b, &tokens, &mut Fp)?;
            let loss = clip_loss(&mut tape, out.embed, t, b.get("logit_scale")?)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            losses.push(value);
            model.update_running_stats(&tape, &out.bn_stats);
            let vars: Vec<(String, Var)> = b.iter().map(|(k, v)| (k.clone(), *v)).collect();
            let mut grads = tape.backward(loss)?;
            let gs: Vec<Tensor> = vars
                .iter()
                .map(|(k, v)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(model.params[k].shape().to_vec())))
                .collect();
            let mut params: Vec<&mut Tensor> = model
                .params
                .iter_mut()
                .filter(|(k, _)| !is_buffer(k))
                .map(|(_, v)| v)
                .collect();
            adam.lr = lr_at(cfg.lr, step, total);
            adam.step(&mut params, &gs.iter().collect::<Vec<_>>())?;
            let ls = model.params.get_mut("logit_scale").unwrap();
            ls.data_mut()[0] = ls.data()[0].min(MAX_LOGIT_SCALE);
            if step % 50 == 0 {
                log::info!("pretrain epoch {epoch} step {step} loss {value:.4}");
            }
            step += 1;
        }
    }
    Ok(PretrainReport { losses, steps: step })
}
