//! Calibration image synthesis from a frozen dual encoder.
//!
//! Images start as Gaussian noise in the encoder's normalized input space and
//! are optimized with Adam. Prompt-guided methods pull each image toward the
//! text embedding of its assigned class; the structural variant contrasts a
//! cropped foreground against a background whose box is refilled with fresh
//! noise every iteration. Baselines match batch-norm statistics (CNN) or
//! maximize patch-similarity entropy (ViT).

mod entropy;
mod losses;
mod pae;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use entropy::silverman_bandwidth;
pub use losses::{infonce_loss, scg_logits, scg_loss, tv_loss};
pub use pae::{apply_pae, random_erase_mask, PaeFlags};

use crate::autograd::{SpatialMap, Tape, Var};
use crate::clip::{BnMode, ClipModel, Fp, Variant, IMAGE_SIZE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::{Prng, SeedStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub iterations: usize,
    pub temperature: f32,
    pub tv_weight: f32,
    pub pae: PaeFlags,
    /// Per-image probability of each enabled perturbation.
    pub pae_prob: f32,
    /// Box side length as a fraction of the image side, `[min, max]`.
    pub bbox_frac: [f32; 2],
    /// Similarity pairs sampled per image for the entropy baseline.
    pub kde_pairs: usize,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 0.01,
            iterations: 3000,
            temperature: 0.1,
            tv_weight: 0.1,
            pae: PaeFlags::all(),
            pae_prob: 0.5,
            bbox_frac: [0.25, 0.6],
            kde_pairs: 512,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.tv_weight >= 0.0) {
            return bad("tv_weight must be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        let [lo, hi] = self.bbox_frac;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("bbox_frac must satisfy 0 < min <= max <= 1");
        }
        if !(0.0..=1.0).contains(&self.pae_prob) {
            return bad("pae_prob must be in [0, 1]");
        }
        if self.kde_pairs < 2 {
            return bad("kde_pairs must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    D4c,
    PgsiOnly,
    PgsiScg,
    PgsiPae,
    Gaussian,
    Bns,
    Pse,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Self::D4c,
        Self::PgsiOnly,
        Self::PgsiScg,
        Self::PgsiPae,
        Self::Gaussian,
        Self::Bns,
        Self::Pse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::D4c => "d4c",
            Self::PgsiOnly => "pgsi_only",
            Self::PgsiScg => "pgsi_scg",
            Self::PgsiPae => "pgsi_pae",
            Self::Gaussian => "gaussian",
            Self::Bns => "bns",
            Self::Pse => "pse",
        }
    }

    /// The prompt-guided component switches of this method, if it is prompt-guided.
    pub fn components(self) -> Option<Components> {
        let c = |scg, pae| Some(Components { pgsi: true, scg, pae });
        match self {
            Self::D4c => c(true, true),
            Self::PgsiOnly => c(false, false),
            Self::PgsiScg => c(true, false),
            Self::PgsiPae => c(false, true),
            Self::Gaussian => Some(Components { pgsi: false, scg: false, pae: false }),
            Self::Bns | Self::Pse => None,
        }
    }

    /// The baseline prior that fits `variant`.
    pub fn prior_baseline(variant: Variant) -> Method {
        match variant {
            Variant::Cnn => Self::Bns,
            Variant::Vit => Self::Pse,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown synthesis method `{s}`")))
    }
}

/// Which prompt-guided pieces are active. `scg` and `pae` only act when `pgsi` is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Components {
    pub pgsi: bool,
    pub scg: bool,
    pub pae: bool,
}

/// Box `(x0, y0, x1, y1)` with exclusive ends, in pixels.
pub type BBox = [usize; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    /// `[N, 3, 64, 64]`, normalized input space.
    pub images: Tensor,
    pub bboxes: Vec<BBox>,
    /// Class index of the prompt assigned to each image.
    pub assignment: Vec<usize>,
}

fn batch_stream(cfg: &SynthesisConfig, batch: usize) -> SeedStream {
    SeedStream::new(cfg.seed).fork("synthesis").fork_index("batch", batch as u64)
}

pub fn sample_bbox(cfg: &SynthesisConfig, rng: &mut Prng) -> BBox {
    let n = IMAGE_SIZE as f32;
    let side = |rng: &mut Prng| {
        let f = rng.uniform_range(cfg.bbox_frac[0], cfg.bbox_frac[1]);
        ((f * n).round() as usize).clamp(1, IMAGE_SIZE)
    };
    let (w, h) = (side(rng), side(rng));
    let x0 = rng.int_range(0, IMAGE_SIZE - w);
    let y0 = rng.int_range(0, IMAGE_SIZE - h);
    [x0, y0, x0 + w, y0 + h]
}

/// Gaussian-noise images, one box each, classes assigned round-robin.
/// `batch` selects an independent random stream.
pub fn init_batch(cfg: &SynthesisConfig, batch: usize) -> Result<SampleBatch> {
    cfg.validate()?;
    let stream = batch_stream(cfg, batch);
    let n = cfg.batch_size;
    let images = Tensor::randn([n, 3, IMAGE_SIZE, IMAGE_SIZE], &mut stream.fork("pixels").rng());
    let mut rng = stream.fork("boxes").rng();
    let bboxes = (0..n).map(|_| sample_bbox(cfg, &mut rng)).collect();
    Ok(SampleBatch {
        images,
        bboxes,
        assignment: (0..n).map(|i| i % NUM_CLASSES).collect(),
    })
}

fn check_boxes(bboxes: &[BBox], n: usize) -> Result<()> {
    if bboxes.len() != n {
        return Err(Error::shape("bboxes", format!("{} boxes for {n} images", bboxes.len())));
    }
    for b in bboxes {
        if b[2] <= b[0] || b[3] <= b[1] || b[2] > IMAGE_SIZE || b[3] > IMAGE_SIZE {
            return Err(Error::InvalidArgument(format!("degenerate box {b:?}")));
        }
    }
    Ok(())
}

/// Crops each image's box and resizes it bilinearly back to full size.
pub fn extract_foreground(tape: &mut Tape, x: Var, bboxes: &[BBox]) -> Result<Var> {
    check_boxes(bboxes, tape.shape(x)[0])?;
    let maps = bboxes
        .iter()
        .map(|b| SpatialMap::crop_resize(IMAGE_SIZE, IMAGE_SIZE, (b[0], b[1], b[2], b[3]), IMAGE_SIZE, IMAGE_SIZE))
        .collect::<Result<Vec<_>>>()?;
    tape.spatial_map(x, Arc::new(maps))
}

/// [`extract_foreground`] on plain tensors.
pub fn crop_foreground(images: &Tensor, bboxes: &[BBox]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let f = extract_foreground(&mut tape, x, bboxes)?;
    Ok(tape.value(f).clone())
}

/// Box mask `[N, C, H, W]` with ones inside each box.
pub fn box_mask(bboxes: &[BBox], channels: usize) -> Tensor {
    let hw = IMAGE_SIZE * IMAGE_SIZE;
    let mut m = Tensor::zeros([bboxes.len(), channels, IMAGE_SIZE, IMAGE_SIZE]);
    for (i, b) in bboxes.iter().enumerate() {
        for c in 0..channels {
            let plane = &mut m.data_mut()[(i * channels + c) * hw..(i * channels + c + 1) * hw];
            for y in b[1]..b[3] {
                plane[y * IMAGE_SIZE + b[0]..y * IMAGE_SIZE + b[2]].fill(1.0);
            }
        }
    }
    m
}

/// Replaces each box interior with fresh `N(0, 1)` noise. The noise is a
/// constant; pixels outside the boxes pass gradient through unchanged.
pub fn mask_background(tape: &mut Tape, x: Var, bboxes: &[BBox], rng: &mut Prng) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    check_boxes(bboxes, s[0])?;
    let inside = box_mask(bboxes, s[1]);
    let keep = inside.map(|v| 1.0 - v);
    let noise: Vec<f32> = inside.data().iter().map(|&m| if m > 0.0 { rng.normal() } else { 0.0 }).collect();
    let kept = tape.mul_const(x, keep)?;
    tape.add_const(kept, Tensor::new(s, noise)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOutput {
    pub method: Method,
    /// `[N, 3, 64, 64]`, normalized input space.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub bboxes: Vec<BBox>,
    /// Loss per iteration, one trace per batch.
    pub loss_traces: Vec<Vec<f32>>,
}

/// Synthesizes `n_images` with `method`. `class_text` holds the frozen
/// class-prompt embeddings `[16, D]`.
pub fn synthesize(
    model: &ClipModel,
    class_text: &Tensor,
    cfg: &SynthesisConfig,
    method: Method,
    n_images: usize,
) -> Result<SynthesisOutput> {
    match (method, model.config.variant) {
        (Method::Bns, Variant::Vit) => {
            return Err(Error::InvalidArgument("bns needs batch-norm layers (cnn encoder)".into()))
        }
        (Method::Pse, Variant::Cnn) => {
            return Err(Error::InvalidArgument("pse needs attention blocks (vit encoder)".into()))
        }
        _ => {}
    }
    let objective = match method.components() {
        Some(c) => Objective::Prompt(c),
        None => Objective::Prior(method),
    };
    synthesize_with(model, class_text, cfg, objective, method, n_images)
}

/// Objective driving one synthesis run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Prompt(Components),
    Prior(Method),
}

/// Like [`synthesize`] with explicit component switches; `label` is recorded in the output.
pub fn synthesize_with(
    model: &ClipModel,
    class_text: &Tensor,
    cfg: &SynthesisConfig,
    objective: Objective,
    label: Method,
    n_images: usize,
) -> Result<SynthesisOutput> {
    cfg.validate()?;
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be positive".into()));
    }
    let mut out = SynthesisOutput {
        method: label,
        images: Tensor::zeros([0, 3, IMAGE_SIZE, IMAGE_SIZE]),
        labels: Vec::new(),
        bboxes: Vec::new(),
        loss_traces: Vec::new(),
    };
    let mut parts = Vec::new();
    let batches = n_images.div_ceil(cfg.batch_size);
    for bi in 0..batches {
        let mut batch = init_batch(cfg, bi)?;
        let trace = optimize_batch(model, class_text, cfg, objective, &mut batch, bi)?;
        log::info!(
            "synthesis {} batch {bi}: loss {:?} -> {:?}",
            label.name(),
            trace.first(),
            trace.last()
        );
        parts.push(batch.images);
        out.labels.extend(batch.assignment);
        out.bboxes.extend(batch.bboxes);
        out.loss_traces.push(trace);
    }
    let all = Tensor::cat_rows(&parts.iter().collect::<Vec<_>>())?;
    out.images = all.slice_rows(0, n_images)?;
    out.labels.truncate(n_images);
    out.bboxes.truncate(n_images);
    Ok(out)
}

fn optimize_batch(
    model: &ClipModel,
    class_text: &Tensor,
    cfg: &SynthesisConfig,
    objective: Objective,
    batch: &mut SampleBatch,
    bi: usize,
) -> Result<Vec<f32>> {
    let active = !matches!(objective, Objective::Prompt(Components { pgsi: false, .. }));
    if !active {
        return Ok(Vec::new());
    }
    let stream = batch_stream(cfg, bi);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let text = class_text.select_rows(&batch.assignment)?;
    for it in 0..cfg.iterations {
        let mut rng = stream.fork_index("iteration", it as u64).rng();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let x = tape.leaf(batch.images.clone());
        let loss = match objective {
            Objective::Prompt(c) => prompt_loss(model, &mut tape, &b, x, &text, batch, cfg, c, &mut rng)?,
            Objective::Prior(Method::Bns) => bns_loss(model, &mut tape, &b, x)?,
            Objective::Prior(Method::Pse) => pse_loss(model, &mut tape, &b, x, cfg, &mut rng)?,
            Objective::Prior(m) => return Err(Error::InvalidArgument(format!("{} is not a prior", m.name()))),
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step: it, loss: value });
        }
        trace.push(value);
        let grads = tape.backward(loss)?;
        let g = grads.get_or_zeros(x, batch.images.shape());
        adam.step(&mut [&mut batch.images], &[&g])?;
    }
    Ok(trace)
}

#[allow(clippy::too_many_arguments)]
fn prompt_loss(
    model: &ClipModel,
    tape: &mut Tape,
    b: &crate::clip::Bound,
    x: Var,
    text: &Tensor,
    batch: &SampleBatch,
    cfg: &SynthesisConfig,
    c: Components,
    rng: &mut Prng,
) -> Result<Var> {
    let n = batch.assignment.len();
    let t = tape.constant(text.clone());
    let flags = if c.pae { cfg.pae } else { PaeFlags::none() };
    let contrast = if c.scg {
        let fg = extract_foreground(tape, x, &batch.bboxes)?;
        let fg = apply_pae(tape, fg, flags, cfg.pae_prob, rng)?;
        let bg = mask_background(tape, x, &batch.bboxes, rng)?;
        let both = tape.concat(&[fg, bg], 0)?;
        let e = model.image_forward(tape, b, both, BnMode::Eval, &mut Fp)?.embed;
        let ef = tape.narrow(e, 0, 0, n)?;
        let eb = tape.narrow(e, 0, n, n)?;
        scg_loss(tape, ef, t, eb, cfg.temperature)?
    } else {
        let xi = apply_pae(tape, x, flags, cfg.pae_prob, rng)?;
        let e = model.image_forward(tape, b, xi, BnMode::Eval, &mut Fp)?.embed;
        infonce_loss(tape, e, t, cfg.temperature)?
    };
    let tv = tv_loss(tape, x)?;
    let tv = tape.scale(tv, cfg.tv_weight)?;
    tape.add(contrast, tv)
}

/// `Σ_l ‖μ_l(x) − μ_l‖² + ‖σ²_l(x) − σ²_l‖²` over batch-norm layers.
pub fn bns_loss(model: &ClipModel, tape: &mut Tape, b: &crate::clip::Bound, x: Var) -> Result<Var> {
    let out = model.image_forward(tape, b, x, BnMode::Train, &mut Fp)?;
    if out.bn_stats.is_empty() {
        return Err(Error::InvalidArgument("model has no batch-norm layers".into()));
    }
    let mut terms = Vec::new();
    for (name, st) in &out.bn_stats {
        for (stat, buf) in [(st.mean, "running_mean"), (st.var, "running_var")] {
            let r = model.param(&format!("{name}.{buf}"))?;
            let r = r.reshape(tape.shape(stat).to_vec())?;
            let neg = tape.constant(r.map(|v| -v));
            let d = tape.add(stat, neg)?;
            let sq = tape.square(d)?;
            terms.push(tape.sum(sq)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Negative mean patch-similarity entropy of the tokens entering the last
/// attention block, estimated on `kde_pairs` sampled upper-triangular pairs.
pub fn pse_loss(
    model: &ClipModel,
    tape: &mut Tape,
    b: &crate::clip::Bound,
    x: Var,
    cfg: &SynthesisConfig,
    rng: &mut Prng,
) -> Result<Var> {
    let out = model.image_forward(tape, b, x, BnMode::Eval, &mut Fp)?;
    let tokens = out
        .last_block_input
        .ok_or_else(|| Error::InvalidArgument("model has no attention blocks".into()))?;
    let s = tape.shape(tokens).to_vec();
    let (n, t) = (s[0], s[1]);
    let unit = tape.l2_normalize(tokens)?;
    let ut = tape.transpose_last(unit)?;
    let sim = tape.bmm(unit, ut)?;
    let flat = tape.reshape(sim, &[n, t * t])?;
    let upper: Vec<usize> = (0..t).flat_map(|i| (i + 1..t).map(move |j| i * t + j)).collect();
    let picked: Vec<usize> = if cfg.kde_pairs >= upper.len() {
        upper
    } else {
        (0..cfg.kde_pairs).map(|_| upper[rng.int_range(0, upper.len() - 1)]).collect()
    };
    let vals = tape.index_select(flat, 1, &picked)?;
    let h = tape.kde_entropy(vals)?;
    let m = tape.mean(h)?;
    tape.neg(m)
}
