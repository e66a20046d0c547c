//! Diagnostics: patch-similarity structure, embedding cluster geometry and
//! storage / bit-operation accounting.

mod compression;

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use compression::{compression_report, CompressionOptions, CompressionReport, LayerCost, LayerPlan};

use crate::autograd::Tape;
use crate::clip::{encode_image, ClipModel, Fp, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::imageio::{heatmap, scatter};
use crate::tensor::Tensor;

/// Default patch grid for 64×64 inputs (8-pixel patches).
pub const PATCH_GRID: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSimilarityMap {
    pub image_id: String,
    pub grid: usize,
    /// `[g², g²]` cosine similarities, row-major patch order.
    pub matrix: Tensor,
}

impl PatchSimilarityMap {
    pub fn to_csv(&self) -> String {
        let n = self.grid * self.grid;
        let mut s = String::new();
        for i in 0..n {
            let row: Vec<String> = self.matrix.data()[i * n..(i + 1) * n].iter().map(|v| format!("{v}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        heatmap(&self.matrix, 4)?.save_png(path)
    }
}

/// Splits a normalized image `[3, H, W]` into `g×g` patches, upsamples each to
/// the encoder resolution, embeds them with `extractor` and returns the
/// pairwise cosine matrix.
pub fn patch_similarity(image: &Tensor, g: usize, extractor: &ClipModel) -> Result<PatchSimilarityMap> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
        return Err(Error::shape("patch_similarity", format!("need a square [3, H, H] image, got {s:?}")));
    }
    if g == 0 || s[1] % g != 0 {
        return Err(Error::InvalidArgument(format!("grid {g} does not divide side {}", s[1])));
    }
    let (side, p) = (s[1], s[1] / g);
    let mut patches = Vec::with_capacity(g * g * 3 * p * p);
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for y in 0..p {
                    let row = c * side * side + (gy * p + y) * side + gx * p;
                    patches.extend_from_slice(&image.data()[row..row + p]);
                }
            }
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([g * g, 3, p, p], patches)?);
    let up = tape.bilinear_resize(x, IMAGE_SIZE, IMAGE_SIZE)?;
    let up = tape.value(up).clone();
    let e = encode_image(extractor, &up, &mut Fp)?;
    Ok(PatchSimilarityMap {
        image_id: String::new(),
        grid: g,
        matrix: cosine_matrix(&e),
    })
}

/// Pairwise cosine similarity of the rows of `[N, D]`.
pub fn cosine_matrix(e: &Tensor) -> Tensor {
    let (n, d) = (e.shape()[0], e.shape()[1]);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = &e.data()[i * d..(i + 1) * d];
            let norm = r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| *v as f64 / norm).collect()
        })
        .collect();
    let mut m = vec![0.0f32; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
        for j in i + 1..n {
            let c = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0) as f32;
            m[i * n + j] = c;
            m[j * n + i] = c;
        }
    }
    Tensor::from_parts(vec![n, n], m)
}

/// Variance of the off-diagonal similarities: 0 for a uniform map, larger
/// when regions of high and low similarity alternate.
pub fn structure_score(map: &PatchSimilarityMap) -> f64 {
    let n = map.matrix.shape()[0];
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| map.matrix.data()[i * n + j] as f64)
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    /// First two principal-component coordinates per sample.
    pub coords: Vec<[f32; 2]>,
    pub labels: Vec<usize>,
    /// Mean silhouette on the full-dimensional embeddings.
    pub silhouette: f64,
}

impl ClusterReport {
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        scatter(&self.coords, &self.labels, 320)?.save_png(path)
    }
}

pub fn cluster_report(embeddings: &Tensor, labels: &[usize]) -> Result<ClusterReport> {
    Ok(ClusterReport {
        coords: pca_2d(embeddings)?,
        labels: labels.to_vec(),
        silhouette: silhouette(embeddings, labels)?,
    })
}

/// Projection onto the top two principal axes. Eigenvector signs are fixed so
/// the largest-magnitude loading is positive.
pub fn pca_2d(x: &Tensor) -> Result<Vec<[f32; 2]>> {
    if x.rank() != 2 || x.shape()[0] == 0 {
        return Err(Error::shape("pca_2d", format!("{:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = DMatrix::from_row_iterator(n, d, x.data().iter().map(|&v| v as f64));
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let big = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            let sign = if big < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|c| c * sign).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let mut p = [0.0f32; 2];
            for (a, axis) in axes.iter().enumerate() {
                p[a] = (0..d).map(|j| centered[(i, j)] * axis[j]).sum::<f64>() as f32;
            }
            p
        })
        .collect())
}

/// Mean silhouette coefficient with Euclidean distance. Points alone in
/// their cluster contribute 0.
pub fn silhouette(x: &Tensor, labels: &[usize]) -> Result<f64> {
    if x.rank() != 2 || x.shape()[0] != labels.len() {
        return Err(Error::shape("silhouette", format!("{:?} vs {} labels", x.shape(), labels.len())));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("silhouette needs at least two classes".into()));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let row = |i: usize| &x.data()[i * d..(i + 1) * d];
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = row(i).iter().zip(row(j)).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
            dist[i * n + j] = v;
            dist[j * n + i] = v;
        }
    }
    let slot = |l: usize| classes.binary_search(&l).unwrap();
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0f64; classes.len()];
        let mut cnt = vec![0usize; classes.len()];
        for j in 0..n {
            if j != i {
                sum[slot(labels[j])] += dist[i * n + j];
                cnt[slot(labels[j])] += 1;
            }
        }
        let own = slot(labels[i]);
        if cnt[own] == 0 {
            continue;
        }
        let a = sum[own] / cnt[own] as f64;
        let b = (0..classes.len())
            .filter(|&k| k != own && cnt[k] > 0)
            .map(|k| sum[k] / cnt[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}
