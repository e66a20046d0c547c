//! Criteria 4-8 and 10: the staged pipeline at acceptance budgets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clipq_cli::artifacts::Manifest;
use clipq_cli::commands::{self, dirs};
use clipq_cli::config::DataConfig;
use clipq_cli::pipeline::{self as stages, DiagnosticsSummary, ScoreStats};
use clipq_cli::{CliError, RunConfig};
use clipq_core::calib::BitConfig;
use clipq_core::checkpoint::Checkpoint;
use clipq_core::clip::{ClipModel, Fp, ModelConfig, Variant};
use clipq_core::synth::Method;

use crate::Verdict;

pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const VARIANTS: [Variant; 2] = [Variant::Cnn, Variant::Vit];

pub struct Harness {
    root: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    /// Wall-clock seconds per stage directory, kept next to the artifacts so
    /// cached runs still report their cost.
    timings: BTreeMap<String, f64>,
}

fn timings_path(root: &Path) -> PathBuf {
    root.join("timings.json")
}

impl Harness {
    pub fn new() -> Self {
        let (root, tmp) = match std::env::var_os("CLIPQ_ACCEPTANCE_CACHE") {
            Some(p) => (PathBuf::from(p), None),
            None => {
                let t = tempfile::tempdir().expect("tempdir");
                (t.path().to_path_buf(), Some(t))
            }
        };
        std::fs::create_dir_all(&root).expect("cache dir");
        let timings = std::fs::read_to_string(timings_path(&root))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        Self {
            root,
            _tmp: tmp,
            timings,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Acceptance-scale config for one run.
    pub fn config(&self, variant: Variant, method: Method, seed: u64) -> RunConfig {
        let mut cfg = budget_config(variant);
        cfg.method = method;
        cfg.seed = seed;
        cfg.out_dir = self.root.join(variant_name(variant));
        cfg
    }

    /// Runs `f` unless `dir` already holds a manifest with `hash`.
    fn ensure(&mut self, dir: &Path, hash: &str, f: impl FnOnce() -> clipq_cli::Result<()>) -> clipq_cli::Result<()> {
        if Manifest::read(dir).map(|m| m.stage_hash == hash).unwrap_or(false) {
            return Ok(());
        }
        let t = Instant::now();
        f()?;
        let key = dir.strip_prefix(&self.root).unwrap_or(dir).display().to_string();
        self.timings.insert(key, t.elapsed().as_secs_f64());
        let text = serde_json::to_string_pretty(&self.timings)?;
        std::fs::write(timings_path(&self.root), text).map_err(|e| CliError::io(&self.root, e))?;
        Ok(())
    }

    pub fn seconds(&self, dir: &Path) -> f64 {
        let key = dir.strip_prefix(&self.root).unwrap_or(dir).display().to_string();
        self.timings.get(&key).copied().unwrap_or(f64::NAN)
    }

    pub fn pretrained(&mut self, variant: Variant) -> clipq_cli::Result<RunConfig> {
        let cfg = self.config(variant, Method::D4c, 0);
        let d = dirs(&cfg);
        self.ensure(&d.data, &cfg.data_hash(), || commands::cmd_gen_data(&cfg))?;
        self.ensure(&d.pretrain, &cfg.pretrain_hash(), || commands::cmd_pretrain(&cfg, false))?;
        Ok(cfg)
    }

    pub fn model(&mut self, variant: Variant) -> clipq_cli::Result<ClipModel> {
        let cfg = self.pretrained(variant)?;
        Ok(ClipModel::from_checkpoint(&Checkpoint::load(dirs(&cfg).pretrain.join("model.ckpt"))?)?)
    }

    pub fn synthesized(&mut self, cfg: &RunConfig) -> clipq_cli::Result<()> {
        self.pretrained(cfg.variant)?;
        self.ensure(&dirs(cfg).synth, &cfg.synth_hash(), || commands::cmd_synth(cfg, false))
    }

    /// Zero-shot accuracy of the quantized model described by `cfg`.
    pub fn accuracy(&mut self, cfg: &RunConfig) -> clipq_cli::Result<f64> {
        self.synthesized(cfg)?;
        let d = dirs(cfg);
        self.ensure(&d.quant, &cfg.quant_hash(), || commands::cmd_quantize(cfg, false))?;
        self.ensure(&d.eval, &cfg.quant_hash(), || commands::cmd_eval(cfg, false, false))?;
        metric(&d.eval, "accuracy")
    }

    pub fn fp_accuracy(&mut self, variant: Variant) -> clipq_cli::Result<f64> {
        let cfg = self.pretrained(variant)?;
        let d = dirs(&cfg);
        self.ensure(&d.eval_fp, &cfg.pretrain_hash(), || commands::cmd_eval(&cfg, true, false))?;
        metric(&d.eval_fp, "accuracy")
    }

    /// Seconds spent on synthesis, quantization and evaluation of `cfg`.
    pub fn run_seconds(&self, cfg: &RunConfig) -> f64 {
        let d = dirs(cfg);
        self.seconds(&d.synth) + self.seconds(&d.quant) + self.seconds(&d.eval)
    }
}

fn metric(dir: &Path, key: &str) -> clipq_cli::Result<f64> {
    Manifest::read(dir)?
        .metrics
        .get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| CliError::Report(format!("{} has no metric {key}", dir.display())))
}

pub fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Cnn => "cnn",
        Variant::Vit => "vit",
    }
}

/// Desk-scale budgets. Synthesis and calibration run far fewer iterations
/// than the library defaults; everything else keeps its default.
pub fn budget_config(variant: Variant) -> RunConfig {
    let mut cfg = RunConfig {
        variant,
        ..RunConfig::default()
    };
    cfg.synthesis.iterations = 200;
    cfg.calibration.n_images = 32;
    cfg.calibration.n_text = 128;
    cfg.calibration.iterations = 200;
    cfg
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pts(acc: f64) -> f64 {
    acc * 100.0
}

fn guard(f: impl FnOnce() -> clipq_cli::Result<Verdict>) -> Verdict {
    f().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")))
}

pub fn criterion_4(h: &mut Harness) -> Verdict {
    guard(|| {
        let mut pass = true;
        let mut parts = Vec::new();
        for v in VARIANTS {
            let cfg = h.pretrained(v)?;
            let d = dirs(&cfg);
            let acc = metric(&d.pretrain, "test_accuracy")?;
            let ds = stages::gen_data(&cfg)?;
            let untrained = ClipModel::new(ModelConfig::new(v), cfg.pretrain_config().seed);
            let chance = stages::evaluate(&untrained, &mut Fp, &ds.test)?.accuracy as f64;
            let secs = h.seconds(&d.pretrain);
            let ok = acc >= 0.90 && (chance - 1.0 / 16.0).abs() <= 0.05 && !(secs >= 1200.0);
            pass &= ok;
            let p = cfg.pretrain_config();
            parts.push(format!(
                "{}: {:.1}% after {} epochs (>= 90), untrained {:.1}% (6.25 +- 5), {secs:.0}s (< 1200)",
                variant_name(v),
                pts(acc),
                p.epochs,
                pts(chance)
            ));
        }
        Ok(Verdict::new(pass, parts.join("; ")))
    })
}

struct Ordering {
    d4c: Vec<f64>,
    baseline: Vec<f64>,
    gaussian: Vec<f64>,
    d4c_w8: Vec<f64>,
    fp: f64,
    seconds: f64,
}

fn ordering(h: &mut Harness, v: Variant) -> clipq_cli::Result<Ordering> {
    let mut o = Ordering {
        d4c: vec![],
        baseline: vec![],
        gaussian: vec![],
        d4c_w8: vec![],
        fp: h.fp_accuracy(v)?,
        seconds: 0.0,
    };
    for seed in SEEDS {
        for (method, out) in [
            (Method::D4c, &mut o.d4c),
            (Method::prior_baseline(v), &mut o.baseline),
            (Method::Gaussian, &mut o.gaussian),
        ] {
            let cfg = h.config(v, method, seed);
            out.push(pts(h.accuracy(&cfg)?));
            o.seconds += h.run_seconds(&cfg);
        }
        let mut cfg = h.config(v, Method::D4c, seed);
        cfg.calibration.bits = BitConfig::W8A8;
        o.d4c_w8.push(pts(h.accuracy(&cfg)?));
        let d = dirs(&cfg);
        o.seconds += h.seconds(&d.quant) + h.seconds(&d.eval);
    }
    Ok(o)
}

pub fn criterion_5(h: &mut Harness) -> Verdict {
    guard(|| {
        let mut pass = true;
        let mut parts = Vec::new();
        for v in VARIANTS {
            let o = ordering(h, v)?;
            let (d, b, g, w8) = (mean(&o.d4c), mean(&o.baseline), mean(&o.gaussian), mean(&o.d4c_w8));
            let fp = pts(o.fp);
            let ok = d >= b + 3.0 && d >= g + 5.0 && (w8 - fp).abs() <= 2.0 && !(o.seconds >= 2700.0);
            pass &= ok;
            parts.push(format!(
                "{}: W4A8 d4c {d:.1} vs {} {b:.1} (+3) vs gaussian {g:.1} (+5); W8A8 d4c {w8:.1} vs fp {fp:.1} (+-2); {:.0}s (< 2700)",
                variant_name(v),
                Method::prior_baseline(v).name(),
                o.seconds
            ));
        }
        Ok(Verdict::new(pass, parts.join("; ")))
    })
}

pub fn criterion_6(h: &mut Harness) -> Verdict {
    guard(|| {
        let mut pass = true;
        let mut parts = Vec::new();
        // CNN only: the ViT synthesis budget triples the suite's runtime
        for v in [Variant::Cnn] {
            let mut m = BTreeMap::new();
            for method in [Method::Gaussian, Method::PgsiOnly, Method::PgsiScg, Method::PgsiPae, Method::D4c] {
                let mut accs = Vec::new();
                for seed in SEEDS {
                    accs.push(pts(h.accuracy(&h.config(v, method, seed))?));
                }
                m.insert(method.name(), mean(&accs));
            }
            let (none, pgsi, scg, pae, all) =
                (m["gaussian"], m["pgsi_only"], m["pgsi_scg"], m["pgsi_pae"], m["d4c"]);
            // the third step may go through either two-component variant
            let path = |mid: f64| none <= pgsi + 1.0 && pgsi <= mid + 1.0 && mid <= all + 1.0;
            let ok = path(scg) || path(pae);
            pass &= ok;
            parts.push(format!(
                "{}: none {none:.1} -> pgsi {pgsi:.1} -> pgsi+scg {scg:.1} | pgsi+pae {pae:.1} -> all {all:.1}",
                variant_name(v)
            ));
        }
        Ok(Verdict::new(pass, format!("{} (slack 1 point per step)", parts.join("; "))))
    })
}

/// Diagnostics of the seed-0 D4C images. The CNN model is the patch
/// feature extractor for both variants.
fn diagnostics(h: &mut Harness, v: Variant) -> clipq_cli::Result<DiagnosticsSummary> {
    let cfg = h.config(v, Method::D4c, 0);
    h.synthesized(&cfg)?;
    let extractor = h.model(Variant::Cnn)?;
    let model = h.model(v)?;
    let set = clipq_cli::artifacts::images_from_checkpoint(&Checkpoint::load(dirs(&cfg).synth.join("images.ckpt"))?)?;
    let ds = stages::gen_data(&cfg)?;
    let dc = &cfg.diagnostics;
    stages::diagnose(
        &extractor,
        &model,
        &set,
        (&ds.test.images, &ds.test.labels),
        dc.samples,
        dc.grid,
        cfg.seed,
    )
}

fn beats(a: &ScoreStats, b: &ScoreStats) -> (bool, f64) {
    let pooled = (a.sem.powi(2) + b.sem.powi(2)).sqrt();
    (a.mean - b.mean > pooled, pooled)
}

pub fn criterion_7(h: &mut Harness) -> Verdict {
    guard(|| {
        let mut pass = true;
        let mut parts = Vec::new();
        for v in VARIANTS {
            let s = diagnostics(h, v)?;
            let (syn, gau, real) = (&s.synthetic.structure, &s.gaussian.structure, &s.real.structure);
            let (a, se_a) = beats(syn, gau);
            let (b, se_b) = beats(real, gau);
            pass &= a && b;
            parts.push(format!(
                "{}: d4c {:.4e} vs gaussian {:.4e} (pooled SE {se_a:.1e}), real {:.4e} (pooled SE {se_b:.1e})",
                variant_name(v),
                syn.mean,
                gau.mean,
                real.mean
            ));
        }
        Ok(Verdict::new(pass, format!("{} samples; {}", budget_config(Variant::Cnn).diagnostics.samples, parts.join("; "))))
    })
}

pub fn criterion_8(h: &mut Harness) -> Verdict {
    guard(|| {
        let mut pass = true;
        let mut parts = Vec::new();
        for v in VARIANTS {
            let s = diagnostics(h, v)?;
            let (syn, gau, real) = (s.synthetic.cluster.silhouette, s.gaussian.cluster.silhouette, s.real.cluster.silhouette);
            pass &= syn > gau + 0.2 && (syn - real).abs() <= 0.3;
            parts.push(format!(
                "{}: silhouette d4c {syn:.3} vs gaussian {gau:.3} (+0.2), real {real:.3} (+-0.3); full images d4c {:.3}, gaussian {:.3}",
                variant_name(v),
                s.synthetic.full_image_silhouette,
                s.gaussian.full_image_silhouette
            ));
        }
        Ok(Verdict::new(pass, format!("foreground crops; {}", parts.join("; "))))
    })
}

/// A tiny configuration that exercises every stage in seconds.
pub fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        data: DataConfig {
            seed: 3,
            n_train: Some(64),
            n_test: 32,
        },
        pretrain: Some(clipq_core::clip::PretrainConfig {
            epochs: 1,
            lr: 1e-3,
            seed: 0,
        }),
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.synthesis.iterations = 3;
    cfg.calibration.n_images = 16;
    cfg.calibration.n_text = 16;
    cfg.calibration.iterations = 4;
    cfg.diagnostics.samples = 16;
    cfg
}

pub fn run_all_stages(cfg: &RunConfig) -> clipq_cli::Result<()> {
    commands::cmd_gen_data(cfg)?;
    commands::cmd_pretrain(cfg, false)?;
    commands::cmd_synth(cfg, false)?;
    commands::cmd_quantize(cfg, false)?;
    commands::cmd_eval(cfg, false, false)?;
    commands::cmd_eval(cfg, true, false)?;
    commands::cmd_diagnose(cfg, None, false)
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).expect("read_dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).expect("read"));
            }
        }
    }
    out
}

pub fn criterion_10(_h: &mut Harness) -> Verdict {
    guard(|| {
        let tmp = tempfile::tempdir().map_err(|e| CliError::io(Path::new("tempdir"), e))?;
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        run_all_stages(&tiny_config(&a))?;
        run_all_stages(&tiny_config(&b))?;
        let (fa, fb) = (files(&a), files(&b));
        let mut differing: Vec<String> = fa
            .iter()
            .filter(|(k, v)| fb.get(*k) != Some(*v))
            .map(|(k, _)| k.display().to_string())
            .collect();
        if fa.len() != fb.len() {
            differing.push(format!("file count {} vs {}", fa.len(), fb.len()));
        }
        // re-running one stage in place reproduces its own outputs
        let cfg = tiny_config(&a);
        let quant = dirs(&cfg).quant;
        let before = files(&quant);
        commands::cmd_quantize(&cfg, false)?;
        if files(&quant) != before {
            differing.push("quant re-run".into());
        }
        Ok(Verdict::new(
            differing.is_empty(),
            format!(
                "two runs of all stages, {} files compared byte-for-byte, plus an in-place quantize re-run{}",
                fa.len(),
                if differing.is_empty() { String::new() } else { format!("; differing: {differing:?}") }
            ),
        ))
    })
}
