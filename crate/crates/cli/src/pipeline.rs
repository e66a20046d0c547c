//! Stage computations without any file IO. Commands wrap these with
//! artifact handling; tests call them directly.

use clipq_core::calib::{quantize_clip, CalibReport, QuantizedClip};
use clipq_core::clip::{
    calibration_texts, class_prompts, encode_image, encode_text, generate_dataset, normalize_pixels, pretrain_clip,
    tokenize_all, zero_shot_classify, ClipModel, Fp, LayerHook, ModelConfig, PretrainReport, ShapesDataset,
    ShapesSplit, ZeroShotResult, IMAGE_SIZE, NUM_CLASSES,
};
use clipq_core::diag::{cluster_report, patch_similarity, silhouette, structure_score, ClusterReport};
use clipq_core::synth::{crop_foreground, synthesize, synthesize_with, Objective, SynthesisOutput};
use clipq_core::{SeedStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::artifacts::SynthImages;
use crate::config::RunConfig;
use crate::error::Result;

pub fn gen_data(cfg: &RunConfig) -> Result<ShapesDataset> {
    Ok(generate_dataset(cfg.data.seed, cfg.n_train(), cfg.data.n_test)?)
}

pub fn pretrain(cfg: &RunConfig, data: &ShapesDataset) -> Result<(ClipModel, PretrainReport)> {
    let p = cfg.pretrain_config();
    let mut model = ClipModel::new(ModelConfig::new(cfg.variant), p.seed);
    let report = pretrain_clip(&mut model, &data.train, &p)?;
    Ok((model, report))
}

/// Embeddings of the sixteen class prompts, `[16, D]`.
pub fn class_text(model: &ClipModel) -> Result<Tensor> {
    Ok(encode_text(model, &tokenize_all(&class_prompts()), &mut Fp)?)
}

/// Synthesizes the calibration set for the configured method (or ablation).
pub fn synthesize_images(cfg: &RunConfig, model: &ClipModel) -> Result<SynthesisOutput> {
    let text = class_text(model)?;
    let scfg = cfg.synthesis_config();
    let n = cfg.calibration.n_images;
    Ok(match cfg.ablation {
        Some(c) => synthesize_with(model, &text, &scfg, Objective::Prompt(c), cfg.method, n)?,
        None => synthesize(model, &text, &scfg, cfg.method, n)?,
    })
}

pub fn calibration_tokens(cfg: &RunConfig) -> Vec<Vec<u32>> {
    let mut rng = SeedStream::new(cfg.seed).fork("calibration-text").rng();
    tokenize_all(&calibration_texts(cfg.calibration.n_text, &mut rng))
}

pub fn quantize(cfg: &RunConfig, model: &ClipModel, images: &Tensor) -> Result<(QuantizedClip, CalibReport)> {
    Ok(quantize_clip(model, images, &calibration_tokens(cfg), &cfg.calibration_config())?)
}

pub fn evaluate(model: &ClipModel, hook: &mut dyn LayerHook, test: &ShapesSplit) -> Result<ZeroShotResult> {
    Ok(zero_shot_classify(model, &test.images, &test.labels, &class_prompts(), hook)?)
}

pub fn evaluate_quantized(q: &QuantizedClip, test: &ShapesSplit) -> Result<ZeroShotResult> {
    let mut hook = q.clone();
    evaluate(&q.model, &mut hook, test)
}

/// Gaussian-noise images in normalized input space.
pub fn gaussian_images(n: usize, seed: u64) -> Tensor {
    Tensor::randn([n, 3, IMAGE_SIZE, IMAGE_SIZE], &mut SeedStream::new(seed).fork("diag-gaussian").rng())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub std: f64,
    /// Standard error of the mean.
    pub sem: f64,
    pub values: Vec<f64>,
}

impl ScoreStats {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
            sem: (var / n).sqrt(),
            values,
        }
    }
}

/// Image sources compared by the diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDiagnostics {
    pub structure: ScoreStats,
    /// Embeddings of the foreground crops when the synthetic images carry
    /// boxes (Gaussian images are cropped with the same boxes), else of the
    /// full images.
    pub cluster: ClusterReport,
    pub full_image_silhouette: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub grid: usize,
    pub synthetic: SourceDiagnostics,
    pub gaussian: SourceDiagnostics,
    pub real: SourceDiagnostics,
}

/// Patch-structure scores (via the CNN `extractor`) and embedding clusters
/// (via `model`) of synthetic, Gaussian and real images. All image tensors
/// are in normalized input space; `samples` images of each source are used.
pub fn diagnose(
    extractor: &ClipModel,
    model: &ClipModel,
    synthetic: &SynthImages,
    real: (&Tensor, &[usize]),
    samples: usize,
    grid: usize,
    seed: u64,
) -> Result<DiagnosticsSummary> {
    let gauss = gaussian_images(samples, seed);
    let gauss_labels: Vec<usize> = (0..samples).map(|i| i % NUM_CLASSES).collect();
    let boxes = &synthetic.bboxes;
    let one = |images: &Tensor, labels: &[usize], crop: bool| -> Result<SourceDiagnostics> {
        let n = samples.min(images.shape()[0]);
        let images = images.slice_rows(0, n)?;
        let mut scores = Vec::with_capacity(n);
        for i in 0..n {
            let img = images.slice_rows(i, 1)?.reshape(vec![3, IMAGE_SIZE, IMAGE_SIZE])?;
            scores.push(structure_score(&patch_similarity(&img, grid, extractor)?));
        }
        let full = encode_image(model, &images, &mut Fp)?;
        let full_image_silhouette = silhouette(&full, &labels[..n])?;
        let emb = if crop && boxes.len() >= n {
            encode_image(model, &crop_foreground(&images, &boxes[..n])?, &mut Fp)?
        } else {
            full
        };
        Ok(SourceDiagnostics {
            structure: ScoreStats::from_values(scores),
            cluster: cluster_report(&emb, &labels[..n])?,
            full_image_silhouette,
        })
    };
    Ok(DiagnosticsSummary {
        grid,
        synthetic: one(&synthetic.images, &synthetic.labels, true)?,
        gaussian: one(&gauss, &gauss_labels, true)?,
        real: one(&normalize_pixels(real.0), real.1, false)?,
    })
}
