//! Subcommands: each reads its prerequisites from the run directory,
//! checks their hashes, computes, and writes artifacts plus a manifest.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use clipq_core::calib::QuantizedClip;
use clipq_core::checkpoint::Checkpoint;
use clipq_core::clip::{ClipModel, Fp, ShapesDataset, Variant};
use clipq_core::diag::{patch_similarity, CompressionOptions, CompressionReport};
use clipq_core::imageio::{image_grid, PixelMap};

use crate::artifacts::{
    dataset_checkpoint, dataset_from_checkpoint, ensure_dir, images_checkpoint, images_from_checkpoint, require,
    write_csv, SynthImages, write_text, Manifest,
};
use crate::config::{parse_method, RunConfig};
use crate::error::{CliError, Result};
use crate::pipeline;
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "clipq", about = "Data-free quantization of toy CLIP models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run config; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Synthesis method, or `baseline` for the encoder's prior-based baseline.
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// Weight and activation bits, e.g. `4,8`.
    #[arg(long, global = true)]
    pub bits: Option<String>,
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Accept prerequisites produced by a different config.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the shapes dataset.
    GenData,
    /// Contrastively pretrain the full-precision model.
    Pretrain,
    /// Synthesize calibration images.
    Synth,
    /// Calibrate and quantize both encoders.
    Quantize,
    /// Zero-shot accuracy of the quantized (or, with --fp, the full-precision) model.
    Eval {
        #[arg(long)]
        fp: bool,
    },
    /// Patch-similarity, cluster and compression diagnostics.
    Diagnose {
        /// CNN model checkpoint used as patch feature extractor (defaults to
        /// the run's own model for CNN runs).
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    /// Merge evaluation manifests of run directories into tables.
    Report {
        dirs: Vec<PathBuf>,
        /// Output directory for the tables (defaults to the first run dir).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Config from `--config` plus flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &cli.variant {
        cfg.variant = v.parse::<Variant>()?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(m) = &cli.method {
        cfg.method = parse_method(m, cfg.variant)?;
    }
    if let Some(b) = &cli.bits {
        cfg.calibration.bits = b.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Worker cap from `D4C_THREADS`. The kernels are single-threaded, so the
/// value is only validated and recorded.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("D4C_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Config(format!("D4C_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = thread_cap()? {
        log::info!("D4C_THREADS={n}");
    }
    if let Command::Report { dirs, output } = &cli.command {
        return report::cmd_report(dirs, output.as_deref());
    }
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Pretrain => cmd_pretrain(&cfg, cli.force),
        Command::Synth => cmd_synth(&cfg, cli.force),
        Command::Quantize => cmd_quantize(&cfg, cli.force),
        Command::Eval { fp } => cmd_eval(&cfg, *fp, cli.force),
        Command::Diagnose { extractor } => cmd_diagnose(&cfg, extractor.as_deref(), cli.force),
        Command::Report { .. } => unreachable!(),
    }
}

pub struct Dirs {
    pub data: PathBuf,
    pub pretrain: PathBuf,
    pub synth: PathBuf,
    pub quant: PathBuf,
    pub eval: PathBuf,
    pub eval_fp: PathBuf,
    pub diag: PathBuf,
}

pub fn dirs(cfg: &RunConfig) -> Dirs {
    let o = &cfg.out_dir;
    Dirs {
        data: o.join("data"),
        pretrain: o.join("pretrain"),
        synth: o.join("synth").join(cfg.synth_tag()),
        quant: o.join("quant").join(cfg.quant_tag()),
        eval: o.join("eval").join(cfg.quant_tag()),
        eval_fp: o.join("eval").join("fp"),
        diag: o.join("diag").join(cfg.synth_tag()),
    }
}

fn tagged(mut ck: Checkpoint, cfg: &RunConfig, stage_hash: &str) -> Checkpoint {
    if !ck.meta.is_object() {
        ck.meta = serde_json::json!({});
    }
    ck.meta["config_hash"] = cfg.config_hash().into();
    ck.meta["stage_hash"] = stage_hash.into();
    ck
}

fn load_dataset(cfg: &RunConfig, force: bool) -> Result<(ShapesDataset, Manifest)> {
    let d = dirs(cfg);
    let m = require(&d.data, "dataset", "gen-data", &cfg.data_hash(), force)?;
    let ds = dataset_from_checkpoint(&Checkpoint::load(d.data.join("dataset.ckpt"))?)?;
    Ok((ds, m))
}

fn load_model(cfg: &RunConfig, force: bool) -> Result<(ClipModel, Manifest)> {
    let d = dirs(cfg);
    let m = require(&d.pretrain, "pretrained model", "pretrain", &cfg.pretrain_hash(), force)?;
    Ok((ClipModel::from_checkpoint(&Checkpoint::load(d.pretrain.join("model.ckpt"))?)?, m))
}

fn load_synth(cfg: &RunConfig, force: bool) -> Result<(SynthImages, Manifest)> {
    let d = dirs(cfg);
    let m = require(&d.synth, "synthetic images", "synth", &cfg.synth_hash(), force)?;
    Ok((images_from_checkpoint(&Checkpoint::load(d.synth.join("images.ckpt"))?)?, m))
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = ensure_dir(&dirs(cfg).data)?;
    let ds = pipeline::gen_data(cfg)?;
    dataset_checkpoint(&ds, &cfg.config_hash())?.save(dir.join("dataset.ckpt"))?;
    let n = ds.train.len().min(32);
    image_grid(&ds.train.images.slice_rows(0, n)?, 8, PixelMap::Unit)?.save_png(dir.join("samples.png"))?;
    let mut m = Manifest::new("data", cfg.config_hash(), cfg.data_hash());
    m.outputs = vec!["dataset.ckpt".into(), "samples.png".into()];
    m.metrics = serde_json::json!({ "n_train": ds.train.len(), "n_test": ds.test.len() });
    m.write(&dir)?;
    log::info!("dataset written to {}", dir.display());
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, force: bool) -> Result<()> {
    let (ds, dm) = load_dataset(cfg, force)?;
    let dir = ensure_dir(&dirs(cfg).pretrain)?;
    let (model, rep) = pipeline::pretrain(cfg, &ds)?;
    let acc = pipeline::evaluate(&model, &mut Fp, &ds.test)?;
    tagged(model.to_checkpoint()?, cfg, &cfg.pretrain_hash()).save(dir.join("model.ckpt"))?;
    let body: String = std::iter::once("step,loss\n".to_string())
        .chain(rep.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
        .collect();
    write_csv(&dir.join("loss.csv"), &cfg.config_hash(), &body)?;
    let mut m = Manifest::new("pretrain", cfg.config_hash(), cfg.pretrain_hash());
    m.inputs.insert("data".into(), dm.stage_hash);
    m.outputs = vec!["model.ckpt".into(), "loss.csv".into()];
    m.metrics = serde_json::json!({
        "variant": cfg.variant,
        "steps": rep.steps,
        "final_loss": rep.losses.last().copied().unwrap_or(f32::NAN),
        "test_accuracy": acc.accuracy,
    });
    m.write(&dir)?;
    log::info!("pretrained {:?}: zero-shot accuracy {:.3}", cfg.variant, acc.accuracy);
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<()> {
    let (model, pm) = load_model(cfg, force)?;
    let dir = ensure_dir(&dirs(cfg).synth)?;
    let out = pipeline::synthesize_images(cfg, &model)?;
    let meta = serde_json::json!({ "kind": "synthetic", "method": cfg.method });
    let set = SynthImages {
        images: out.images,
        labels: out.labels,
        bboxes: out.bboxes,
    };
    tagged(images_checkpoint(&set, meta), cfg, &cfg.synth_hash()).save(dir.join("images.ckpt"))?;
    image_grid(&set.images, 8, PixelMap::MinMax)?.save_png(dir.join("grid.png"))?;
    let mut body = String::from("batch,iteration,loss\n");
    for (b, t) in out.loss_traces.iter().enumerate() {
        for (i, l) in t.iter().enumerate() {
            body.push_str(&format!("{b},{i},{l}\n"));
        }
    }
    write_csv(&dir.join("loss.csv"), &cfg.config_hash(), &body)?;
    let mut m = Manifest::new("synth", cfg.config_hash(), cfg.synth_hash());
    m.inputs.insert("pretrain".into(), pm.stage_hash);
    m.outputs = vec!["images.ckpt".into(), "grid.png".into(), "loss.csv".into()];
    m.metrics = serde_json::json!({
        "method": cfg.method,
        "components": cfg.components(),
        "seed": cfg.seed,
        "n_images": set.labels.len(),
        "final_losses": out.loss_traces.iter().map(|t| t.last().copied()).collect::<Vec<_>>(),
    });
    m.write(&dir)?;
    Ok(())
}

pub fn cmd_quantize(cfg: &RunConfig, force: bool) -> Result<()> {
    let (model, _) = load_model(cfg, force)?;
    let (set, sm) = load_synth(cfg, force)?;
    let dir = ensure_dir(&dirs(cfg).quant)?;
    let (q, rep) = pipeline::quantize(cfg, &model, &set.images)?;
    tagged(q.to_checkpoint()?, cfg, &cfg.quant_hash()).save(dir.join("model.ckpt"))?;
    write_csv(&dir.join("traces.csv"), &cfg.config_hash(), &rep.traces_csv())?;
    write_text(&dir.join("units.json"), &serde_json::to_string_pretty(&rep)?)?;
    let comp = CompressionReport::for_quantized(&q, CompressionOptions::default());
    write_text(&dir.join("compression.json"), &serde_json::to_string_pretty(&comp)?)?;
    write_csv(&dir.join("compression.csv"), &cfg.config_hash(), &comp.to_csv())?;
    let mut rel: Vec<f64> = rep.units.iter().map(|u| u.rel_error_isolated).collect();
    rel.sort_by(f64::total_cmp);
    let mut m = Manifest::new("quantize", cfg.config_hash(), cfg.quant_hash());
    m.inputs.insert("synth".into(), sm.stage_hash);
    m.outputs = ["model.ckpt", "traces.csv", "units.json", "compression.json", "compression.csv"]
        .map(String::from)
        .to_vec();
    m.metrics = serde_json::json!({
        "bits": cfg.bits().label(),
        "units": rep.units.len(),
        "reverted_units": rep.units.iter().filter(|u| u.reverted).count(),
        "median_unit_rel_error": rel.get(rel.len() / 2),
        "storage_ratio": comp.storage_ratio,
        "speedup": comp.speedup,
    });
    m.write(&dir)?;
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, fp: bool, force: bool) -> Result<()> {
    let (ds, _) = load_dataset(cfg, force)?;
    let d = dirs(cfg);
    let (dir, stage_hash, input, acc, method, bits) = if fp {
        let (model, pm) = load_model(cfg, force)?;
        let acc = pipeline::evaluate(&model, &mut Fp, &ds.test)?;
        (d.eval_fp, cfg.pretrain_hash(), ("pretrain", pm.stage_hash), acc, "fp".to_string(), "FP32".to_string())
    } else {
        let qm = require(&d.quant, "quantized model", "quantize", &cfg.quant_hash(), force)?;
        let q = QuantizedClip::load(d.quant.join("model.ckpt"))?;
        let acc = pipeline::evaluate_quantized(&q, &ds.test)?;
        let method = cfg.method_label();
        (d.eval, cfg.quant_hash(), ("quantize", qm.stage_hash), acc, method, cfg.bits().label())
    };
    let dir = ensure_dir(&dir)?;
    let mut m = Manifest::new("eval", cfg.config_hash(), stage_hash);
    m.inputs.insert(input.0.into(), input.1);
    m.metrics = serde_json::json!({
        "variant": cfg.variant,
        "method": method,
        "bits": bits,
        "seed": cfg.seed,
        "accuracy": acc.accuracy,
    });
    m.write(&dir)?;
    println!("{method} {bits} seed {}: zero-shot accuracy {:.4}", cfg.seed, acc.accuracy);
    Ok(())
}

pub fn cmd_diagnose(cfg: &RunConfig, extractor: Option<&Path>, force: bool) -> Result<()> {
    let (ds, _) = load_dataset(cfg, force)?;
    let (model, _) = load_model(cfg, force)?;
    let (set, _) = load_synth(cfg, force)?;
    let ext = match (extractor, cfg.variant) {
        (Some(p), _) => ClipModel::from_checkpoint(&Checkpoint::load(p)?)?,
        (None, Variant::Cnn) => model.clone(),
        (None, Variant::Vit) => {
            return Err(CliError::Config(
                "patch diagnostics need a CNN feature extractor; pass --extractor <cnn run>/pretrain/model.ckpt".into(),
            ))
        }
    };
    if ext.config.variant != Variant::Cnn {
        return Err(CliError::Config("the patch feature extractor must be a CNN model".into()));
    }
    let dir = ensure_dir(&dirs(cfg).diag)?;
    let dc = &cfg.diagnostics;
    let summary = pipeline::diagnose(
        &ext,
        &model,
        &set,
        (&ds.test.images, &ds.test.labels),
        dc.samples,
        dc.grid,
        cfg.seed,
    )?;
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    let real = clipq_core::clip::normalize_pixels(&ds.test.images.slice_rows(0, 1)?);
    let gauss = pipeline::gaussian_images(1, cfg.seed);
    for (name, img) in [("synthetic", set.images.slice_rows(0, 1)?), ("gaussian", gauss), ("real", real)] {
        let map = patch_similarity(&img.reshape(vec![3, 64, 64])?, dc.grid, &ext)?;
        map.save_png(dir.join(format!("patch_{name}.png")))?;
        write_csv(&dir.join(format!("patch_{name}.csv")), &cfg.config_hash(), &map.to_csv())?;
    }
    for (name, s) in [("synthetic", &summary.synthetic), ("gaussian", &summary.gaussian), ("real", &summary.real)] {
        s.cluster.save_png(dir.join(format!("cluster_{name}.png")))?;
    }
    let mut m = Manifest::new("diagnose", cfg.config_hash(), cfg.synth_hash());
    m.metrics = serde_json::json!({
        "statistics": "structure = variance of off-diagonal patch similarities; silhouette = Euclidean, full-dimensional embeddings of the foreground crops (real images whole)",
        "structure_scores": {
            "synthetic": summary.synthetic.structure.mean,
            "gaussian": summary.gaussian.structure.mean,
            "real": summary.real.structure.mean,
        },
        "silhouette": {
            "synthetic": summary.synthetic.cluster.silhouette,
            "gaussian": summary.gaussian.cluster.silhouette,
            "real": summary.real.cluster.silhouette,
        },
        "full_image_silhouette": {
            "synthetic": summary.synthetic.full_image_silhouette,
            "gaussian": summary.gaussian.full_image_silhouette,
            "real": summary.real.full_image_silhouette,
        },
    });
    m.outputs = vec!["summary.json".into()];
    m.write(&dir)?;
    Ok(())
}
