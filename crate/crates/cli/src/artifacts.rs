//! Run-directory layout, manifests and dataset / image-set storage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clipq_core::checkpoint::Checkpoint;
use clipq_core::clip::{ShapesDataset, ShapesSplit};
use clipq_core::synth::BBox;
use clipq_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub stage_hash: String,
    /// Stage hashes of consumed artifacts.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub metrics: serde_json::Value,
}

impl Manifest {
    pub fn new(stage: &str, config_hash: String, stage_hash: String) -> Self {
        Self {
            stage: stage.into(),
            config_hash,
            stage_hash,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            metrics: serde_json::json!({}),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(MANIFEST), &serde_json::to_string_pretty(self)?)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Loads the manifest of a prerequisite stage and checks its hash.
pub fn require(dir: &Path, what: &'static str, hint: &'static str, expected: &str, force: bool) -> Result<Manifest> {
    if !dir.join(MANIFEST).exists() {
        return Err(CliError::Missing {
            what,
            path: dir.to_path_buf(),
            hint,
        });
    }
    let m = Manifest::read(dir)?;
    if m.stage_hash != expected {
        if !force {
            return Err(CliError::HashMismatch {
                what,
                path: dir.to_path_buf(),
                found: m.stage_hash,
                expected: expected.into(),
            });
        }
        log::warn!("using {what} from {} despite hash mismatch (--force)", dir.display());
    }
    Ok(m)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

fn labels_tensor(labels: &[usize]) -> Tensor {
    Tensor::new([labels.len()], labels.iter().map(|&l| l as f32).collect()).expect("1-d")
}

fn tensor_labels(t: &Tensor) -> Vec<usize> {
    t.data().iter().map(|&v| v as usize).collect()
}

fn masks_tensor(masks: &[u8]) -> Tensor {
    Tensor::new([masks.len()], masks.iter().map(|&m| m as f32).collect()).expect("1-d")
}

pub fn dataset_checkpoint(d: &ShapesDataset, config_hash: &str) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    for (name, split) in [("train", &d.train), ("test", &d.test)] {
        ck.insert(format!("{name}.images"), split.images.clone());
        ck.insert(format!("{name}.labels"), labels_tensor(&split.labels));
        ck.insert(format!("{name}.masks"), masks_tensor(&split.masks));
    }
    ck.meta = serde_json::json!({ "kind": "dataset", "config_hash": config_hash });
    Ok(ck)
}

pub fn dataset_from_checkpoint(ck: &Checkpoint) -> Result<ShapesDataset> {
    let split = |name: &str| -> Result<ShapesSplit> {
        Ok(ShapesSplit {
            images: ck.get(&format!("{name}.images"))?.clone(),
            labels: tensor_labels(ck.get(&format!("{name}.labels"))?),
            masks: ck.get(&format!("{name}.masks"))?.data().iter().map(|&v| v as u8).collect(),
        })
    };
    Ok(ShapesDataset {
        train: split("train")?,
        test: split("test")?,
    })
}

/// Synthetic calibration set: normalized images plus assigned classes.
/// Synthetic images with their prompt classes and foreground boxes.
/// `bboxes` is empty for methods that do not place boxes.
#[derive(Debug, Clone)]
pub struct SynthImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub bboxes: Vec<BBox>,
}

pub fn images_checkpoint(s: &SynthImages, meta: serde_json::Value) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.insert("images", s.images.clone());
    ck.insert("labels", labels_tensor(&s.labels));
    let flat = s.bboxes.iter().flatten().map(|&v| v as f32).collect();
    ck.insert("bboxes", Tensor::new([s.bboxes.len(), 4], flat).expect("4 coords per box"));
    ck.meta = meta;
    ck
}

pub fn images_from_checkpoint(ck: &Checkpoint) -> Result<SynthImages> {
    let b = ck.get("bboxes")?;
    let bboxes = b
        .data()
        .chunks_exact(4)
        .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize, c[3] as usize])
        .collect();
    Ok(SynthImages {
        images: ck.get("images")?.clone(),
        labels: tensor_labels(ck.get("labels")?),
        bboxes,
    })
}

/// `# config_hash=...` header followed by the CSV body.
pub fn write_csv(path: &Path, config_hash: &str, body: &str) -> Result<()> {
    write_text(path, &format!("# config_hash={config_hash}\n{body}"))
}
