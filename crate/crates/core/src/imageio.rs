//! PNG output for image grids, heatmaps and scatter plots.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: fill.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.data[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        w.write_image_data(&self.data).map_err(|e| Error::Png(e.to_string()))?;
        w.finish().map_err(|e| Error::Png(e.to_string()))
    }
}

/// How float pixels become bytes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PixelMap {
    /// Clamp `[0, 1]` to `[0, 255]`.
    Unit,
    /// Stretch each image's own `[min, max]` to `[0, 255]`.
    MinMax,
}

/// Lays out `images: [N, 3, H, W]` in a grid with `cols` columns and a 1px gap.
pub fn image_grid(images: &Tensor, cols: usize, map: PixelMap) -> Result<Rgb8> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || cols == 0 {
        return Err(Error::shape("image_grid", format!("{s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let rows = n.div_ceil(cols);
    let mut out = Rgb8::new(cols * (w + 1) + 1, rows * (h + 1) + 1, [32, 32, 32]);
    let plane = h * w;
    for (i, img) in images.data().chunks(3 * plane).enumerate() {
        let (lo, hi) = match map {
            PixelMap::Unit => (0.0, 1.0),
            PixelMap::MinMax => img
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))),
        };
        let span = (hi - lo).max(1e-12);
        let (ox, oy) = ((i % cols) * (w + 1) + 1, (i / cols) * (h + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                let px = |c: usize| (((img[c * plane + y * w + x] - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.put(ox + x, oy + y, [px(0), px(1), px(2)]);
            }
        }
    }
    Ok(out)
}

/// Diverging blue-white-red color for `v` in `[-1, 1]`.
pub fn diverging(v: f32) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    let t = (255.0 * (1.0 - v.abs())).round() as u8;
    if v >= 0.0 {
        [255, t, t]
    } else {
        [t, t, 255]
    }
}

/// Square matrix `[n, n]` as a heatmap with `cell`-pixel cells.
pub fn heatmap(m: &Tensor, cell: usize) -> Result<Rgb8> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] || cell == 0 {
        return Err(Error::shape("heatmap", format!("{s:?}")));
    }
    let n = s[0];
    let mut out = Rgb8::new(n * cell, n * cell, [0, 0, 0]);
    for i in 0..n {
        for j in 0..n {
            let c = diverging(m.data()[i * n + j]);
            for dy in 0..cell {
                for dx in 0..cell {
                    out.put(j * cell + dx, i * cell + dy, c);
                }
            }
        }
    }
    Ok(out)
}

const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [128, 128, 0],
    [0, 128, 128],
    [170, 110, 40],
    [128, 0, 0],
    [0, 0, 128],
    [128, 128, 128],
    [255, 215, 0],
    [0, 0, 0],
];

/// 2-D points colored by label, scaled to fit a `size`×`size` canvas.
pub fn scatter(points: &[[f32; 2]], labels: &[usize], size: usize) -> Result<Rgb8> {
    if points.len() != labels.len() || size < 16 {
        return Err(Error::InvalidArgument("scatter: labels must match points".into()));
    }
    let mut out = Rgb8::new(size, size, [255, 255, 255]);
    if points.is_empty() {
        return Ok(out);
    }
    let (mut lo, mut hi) = ([f32::INFINITY; 2], [f32::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let margin = 6.0;
    let span = (size as f32) - 2.0 * margin;
    for (p, &l) in points.iter().zip(labels) {
        let fx = |a: usize| margin + (p[a] - lo[a]) / (hi[a] - lo[a]).max(1e-12) * span;
        let (cx, cy) = (fx(0).round() as i64, (size as f32 - fx(1)).round() as i64);
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                if dx * dx + dy * dy <= 4 && cx + dx >= 0 && cy + dy >= 0 {
                    out.put((cx + dx) as usize, (cy + dy) as usize, PALETTE[l % PALETTE.len()]);
                }
            }
        }
    }
    Ok(out)
}
