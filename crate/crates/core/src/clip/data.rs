//! Procedural shapes-and-captions dataset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Prng, SeedStream};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const NUM_CLASSES: usize = 16;

const RGB: [[f32; 3]; 4] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.15, 0.25, 0.90],
    [0.92, 0.85, 0.15],
];

/// Class index `shape * 4 + color`.
pub fn class_index(shape: usize, color: usize) -> usize {
    shape * COLORS.len() + color
}

/// `(shape, color)` of a class.
pub fn class_parts(class: usize) -> (usize, usize) {
    (class / COLORS.len(), class % COLORS.len())
}

/// `"{color} {shape}"`.
pub fn class_name(class: usize) -> String {
    let (s, c) = class_parts(class);
    format!("{} {}", COLORS[c], SHAPES[s])
}

pub fn caption(class: usize) -> String {
    format!("a photo of a {}", class_name(class))
}

/// One split of the dataset. Pixels are in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesSplit {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Foreground masks, `N·H·W` bytes (1 = shape pixel).
    pub masks: Vec<u8>,
}

impl ShapesSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn captions(&self) -> Vec<String> {
        self.labels.iter().map(|&l| caption(l)).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let hw = IMAGE_SIZE * IMAGE_SIZE;
        Ok(Self {
            images: self.images.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            masks: idx.iter().flat_map(|&i| self.masks[i * hw..(i + 1) * hw].iter().copied()).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesDataset {
    pub train: ShapesSplit,
    pub test: ShapesSplit,
}

/// Maps `[0, 1]` pixels to the encoders' input range.
pub fn normalize_pixels(images: &Tensor) -> Tensor {
    images.map(|v| (v - 0.5) / 0.25)
}

pub fn generate_dataset(seed: u64, n_train: usize, n_test: usize) -> Result<ShapesDataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument("dataset splits must be non-empty".into()));
    }
    let root = SeedStream::new(seed).fork("shapes-dataset");
    Ok(ShapesDataset {
        train: generate_split(&root.fork("train"), n_train),
        test: generate_split(&root.fork("test"), n_test),
    })
}

fn generate_split(stream: &SeedStream, n: usize) -> ShapesSplit {
    let hw = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = Vec::with_capacity(n * 3 * hw);
    let mut masks = Vec::with_capacity(n * hw);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % NUM_CLASSES;
        let mut rng = stream.fork_index("image", i as u64).rng();
        let (img, mask) = render(label, &mut rng);
        data.extend(img);
        masks.extend(mask);
        labels.push(label);
    }
    ShapesSplit {
        images: Tensor::from_parts(vec![n, 3, IMAGE_SIZE, IMAGE_SIZE], data),
        labels,
        masks,
    }
}

/// Renders one image: textured gray background plus one colored shape.
pub fn render(class: usize, rng: &mut Prng) -> (Vec<f32>, Vec<u8>) {
    let n = IMAGE_SIZE;
    let (shape, color) = class_parts(class);

    // Background: gray base, two oriented gratings, faint tint and pixel noise.
    let base = rng.uniform_range(0.35, 0.65);
    let tint: Vec<f32> = (0..3).map(|_| rng.uniform_range(-0.04, 0.04)).collect();
    let gratings: Vec<(f32, f32, f32, f32)> = (0..2)
        .map(|_| {
            let theta = rng.uniform_range(0.0, std::f32::consts::PI);
            let freq = rng.uniform_range(0.15, 0.6);
            let phase = rng.uniform_range(0.0, std::f32::consts::TAU);
            let amp = rng.uniform_range(0.02, 0.08);
            (theta, freq, phase, amp)
        })
        .collect();
    let mut img = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let mut v = base;
            for &(th, f, ph, a) in &gratings {
                v += a * ((x as f32 * th.cos() + y as f32 * th.sin()) * f + ph).sin();
            }
            let noise = 0.03 * rng.normal();
            for c in 0..3 {
                img[c * n * n + y * n + x] = v + tint[c] + noise;
            }
        }
    }

    // Foreground shape.
    let r = rng.uniform_range(9.0, 18.0);
    let cx = rng.uniform_range(r + 2.0, n as f32 - r - 2.0);
    let cy = rng.uniform_range(r + 2.0, n as f32 - r - 2.0);
    let rot = if shape == 0 { 0.0 } else { rng.uniform_range(-0.35, 0.35) };
    let rgb: Vec<f32> = RGB[color]
        .iter()
        .map(|&c| (c + rng.uniform_range(-0.06, 0.06)).clamp(0.0, 1.0))
        .collect();
    let shade = rng.uniform_range(-0.1, 0.1);
    let mut mask = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            // 2×2 supersampled coverage
            let mut cov = 0.0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let (dx, dy) = (x as f32 + ox - cx, y as f32 + oy - cy);
                let (u, v) = (
                    (dx * rot.cos() + dy * rot.sin()) / r,
                    (-dx * rot.sin() + dy * rot.cos()) / r,
                );
                if inside(shape, u, v) {
                    cov += 0.25;
                }
            }
            if cov > 0.0 {
                let grad = 1.0 + shade * (y as f32 - cy) / r;
                for c in 0..3 {
                    let p = &mut img[c * n * n + y * n + x];
                    *p = (1.0 - cov) * *p + cov * (rgb[c] * grad);
                }
            }
            if cov >= 0.5 {
                mask[y * n + x] = 1;
            }
        }
    }
    for p in img.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    (img, mask)
}

/// Membership in the unit shape centred at the origin.
fn inside(shape: usize, u: f32, v: f32) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => {
            // upward triangle with vertices (0,-1), (±0.95, 0.7)
            let t = (v + 1.0) / 1.7;
            (0.0..=1.0).contains(&t) && u.abs() <= 0.95 * t
        }
        _ => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
    }
}

/// Per-image distance between mean foreground and mean background color.
pub fn mask_contrast(split: &ShapesSplit) -> Vec<f32> {
    let hw = IMAGE_SIZE * IMAGE_SIZE;
    (0..split.len())
        .map(|i| {
            let img = &split.images.data()[i * 3 * hw..(i + 1) * 3 * hw];
            let mask = &split.masks[i * hw..(i + 1) * hw];
            let nf = mask.iter().filter(|&&m| m == 1).count().max(1) as f32;
            let nb = (hw as f32 - nf).max(1.0);
            let mut d2 = 0.0;
            for c in 0..3 {
                let (mut f, mut b) = (0.0, 0.0);
                for (p, &m) in img[c * hw..(c + 1) * hw].iter().zip(mask) {
                    if m == 1 {
                        f += p;
                    } else {
                        b += p;
                    }
                }
                d2 += (f / nf - b / nb).powi(2);
            }
            d2.sqrt()
        })
        .collect()
}

/// Index batches with one example of each class per batch of 16; leftovers dropped.
pub fn class_balanced_batches(labels: &[usize], rng: &mut Prng) -> Vec<Vec<usize>> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    for v in per_class.iter_mut() {
        rng.shuffle(v);
    }
    let rounds = per_class.iter().map(Vec::len).min().unwrap_or(0);
    let mut batches: Vec<Vec<usize>> = (0..rounds)
        .map(|r| {
            let mut b: Vec<usize> = per_class.iter().map(|v| v[r]).collect();
            rng.shuffle(&mut b);
            b
        })
        .collect();
    rng.shuffle(&mut batches);
    batches
}
