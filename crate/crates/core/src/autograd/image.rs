//! Spatial resampling as sparse linear maps over image planes.
//!
//! Bilinear resize, crop-and-resize, flips, affine warps and blurs are all
//! linear in the pixels, so each is represented by a [`SpatialMap`] (a CSR
//! matrix from input-plane pixels to output-plane pixels) and applied by a
//! single differentiable op.

use std::sync::Arc;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    offsets: Vec<u32>,
    index: Vec<u32>,
    weight: Vec<f32>,
}

/// Source coordinate and 1-D interpolation taps, align-corners-false.
fn resize_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f32 / out_len as f32;
    let src = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
    (i0, i1, src - i0 as f32)
}

impl SpatialMap {
    fn build(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        mut taps: impl FnMut(usize, usize, &mut Vec<(u32, f32)>),
    ) -> Self {
        let mut offsets = Vec::with_capacity(out_h * out_w + 1);
        let mut index = Vec::new();
        let mut weight = Vec::new();
        let mut buf = Vec::new();
        offsets.push(0);
        for y in 0..out_h {
            for x in 0..out_w {
                buf.clear();
                taps(y, x, &mut buf);
                // merge duplicate taps so the map is canonical
                buf.sort_by_key(|t| t.0);
                let mut last: Option<u32> = None;
                for &(i, w) in &buf {
                    if w == 0.0 {
                        continue;
                    }
                    if last == Some(i) {
                        *weight.last_mut().unwrap() += w;
                    } else {
                        index.push(i);
                        weight.push(w);
                        last = Some(i);
                    }
                }
                offsets.push(index.len() as u32);
            }
        }
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            offsets,
            index,
            weight,
        }
    }

    pub fn identity(h: usize, w: usize) -> Self {
        Self::build(h, w, h, w, |y, x, t| t.push(((y * w + x) as u32, 1.0)))
    }

    /// Bilinear resize with the align-corners-false convention.
    pub fn bilinear_resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        Self::crop_resize(in_h, in_w, (0, 0, in_w, in_h), out_h, out_w)
    }

    /// Crop the box `(x0, y0, x1, y1)` (exclusive ends) and resize it bilinearly.
    pub fn crop_resize(
        in_h: usize,
        in_w: usize,
        bbox: (usize, usize, usize, usize),
        out_h: usize,
        out_w: usize,
    ) -> Result<Self> {
        let (x0, y0, x1, y1) = bbox;
        if out_h == 0 || out_w == 0 || x1 <= x0 || y1 <= y0 || x1 > in_w || y1 > in_h {
            return Err(Error::InvalidArgument(format!(
                "crop {bbox:?} of {in_h}x{in_w} to {out_h}x{out_w}"
            )));
        }
        let (ch, cw) = (y1 - y0, x1 - x0);
        Ok(Self::build(in_h, in_w, out_h, out_w, |y, x, t| {
            let (ya, yb, ly) = resize_taps(y, ch, out_h);
            let (xa, xb, lx) = resize_taps(x, cw, out_w);
            let at = |yy: usize, xx: usize| ((y0 + yy) * in_w + x0 + xx) as u32;
            t.push((at(ya, xa), (1.0 - ly) * (1.0 - lx)));
            t.push((at(ya, xb), (1.0 - ly) * lx));
            t.push((at(yb, xa), ly * (1.0 - lx)));
            t.push((at(yb, xb), ly * lx));
        }))
    }

    pub fn flip_horizontal(h: usize, w: usize) -> Self {
        Self::build(h, w, h, w, |y, x, t| t.push(((y * w + (w - 1 - x)) as u32, 1.0)))
    }

    /// Inverse-mapped affine warp. `theta` maps normalized output coordinates
    /// in `[-1, 1]` to normalized input coordinates (align-corners-false);
    /// samples outside the input read zero.
    pub fn affine(h: usize, w: usize, theta: [[f32; 3]; 2]) -> Self {
        Self::build(h, w, h, w, |y, x, t| {
            let xn = (2.0 * x as f32 + 1.0) / w as f32 - 1.0;
            let yn = (2.0 * y as f32 + 1.0) / h as f32 - 1.0;
            let sx = theta[0][0] * xn + theta[0][1] * yn + theta[0][2];
            let sy = theta[1][0] * xn + theta[1][1] * yn + theta[1][2];
            let px = ((sx + 1.0) * w as f32 - 1.0) / 2.0;
            let py = ((sy + 1.0) * h as f32 - 1.0) / 2.0;
            let (fx, fy) = (px.floor(), py.floor());
            let (lx, ly) = (px - fx, py - fy);
            for (dy, wy) in [(0, 1.0 - ly), (1, ly)] {
                for (dx, wx) in [(0, 1.0 - lx), (1, lx)] {
                    let (iy, ix) = (fy as i64 + dy, fx as i64 + dx);
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        t.push(((iy as usize * w + ix as usize) as u32, wy * wx));
                    }
                }
            }
        })
    }

    /// Separable normalized Gaussian blur with a `(2r+1)²` kernel and zero padding.
    pub fn gaussian_blur(h: usize, w: usize, sigma: f32, radius: usize) -> Self {
        let k: Vec<f32> = (0..=2 * radius)
            .map(|i| {
                let d = i as f32 - radius as f32;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f32 = k.iter().sum();
        let k: Vec<f32> = k.iter().map(|v| v / s).collect();
        let r = radius as i64;
        Self::build(h, w, h, w, |y, x, t| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (iy, ix) = (y as i64 + dy, x as i64 + dx);
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        let wgt = k[(dy + r) as usize] * k[(dx + r) as usize];
                        t.push(((iy as usize * w + ix as usize) as u32, wgt));
                    }
                }
            }
        })
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &SpatialMap) -> Result<Self> {
        if first.out_h != self.in_h || first.out_w != self.in_w {
            return Err(Error::InvalidArgument("spatial map composition extents".into()));
        }
        Ok(Self::build(first.in_h, first.in_w, self.out_h, self.out_w, |y, x, t| {
            let o = y * self.out_w + x;
            for k in self.offsets[o] as usize..self.offsets[o + 1] as usize {
                let mid = self.index[k] as usize;
                let wm = self.weight[k];
                for j in first.offsets[mid] as usize..first.offsets[mid + 1] as usize {
                    t.push((first.index[j], wm * first.weight[j]));
                }
            }
        }))
    }

    pub fn apply_plane(&self, src: &[f32], dst: &mut [f32]) {
        for (o, d) in dst.iter_mut().enumerate() {
            let (a, b) = (self.offsets[o] as usize, self.offsets[o + 1] as usize);
            let mut s = 0.0;
            for k in a..b {
                s += self.weight[k] * src[self.index[k] as usize];
            }
            *d = s;
        }
    }

    fn apply_plane_transposed(&self, g: &[f32], acc: &mut [f32]) {
        for (o, &gv) in g.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            for k in self.offsets[o] as usize..self.offsets[o + 1] as usize {
                acc[self.index[k] as usize] += self.weight[k] * gv;
            }
        }
    }

    /// Input pixels that contribute to any output pixel.
    pub fn support(&self) -> Vec<bool> {
        let mut s = vec![false; self.in_h * self.in_w];
        for (&i, &w) in self.index.iter().zip(&self.weight) {
            if w != 0.0 {
                s[i as usize] = true;
            }
        }
        s
    }
}

impl Tape {
    /// Applies one map per batch element (or one shared map) to every
    /// channel plane of `x: [B, C, H, W]`.
    pub fn spatial_map(&mut self, x: Var, maps: Arc<Vec<SpatialMap>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || maps.is_empty() || (maps.len() != 1 && maps.len() != s[0]) {
            return Err(Error::shape("spatial_map", format!("{s:?} with {} maps", maps.len())));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (maps[0].out_h, maps[0].out_w);
        if maps.iter().any(|m| m.in_h != h || m.in_w != w || m.out_h != oh || m.out_w != ow) {
            return Err(Error::shape("spatial_map", "map extents disagree with input"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for bi in 0..b {
            let m = &maps[if maps.len() == 1 { 0 } else { bi }];
            for ci in 0..c {
                let p = bi * c + ci;
                m.apply_plane(&src[p * h * w..(p + 1) * h * w], &mut out[p * oh * ow..(p + 1) * oh * ow]);
            }
        }
        self.push(
            "spatial_map",
            Tensor::from_parts(vec![b, c, oh, ow], out),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; b * c * h * w];
                for bi in 0..b {
                    let m = &maps[if maps.len() == 1 { 0 } else { bi }];
                    for ci in 0..c {
                        let p = bi * c + ci;
                        m.apply_plane_transposed(
                            &ctx.grad[p * oh * ow..(p + 1) * oh * ow],
                            &mut g[p * h * w..(p + 1) * h * w],
                        );
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Bilinear resize of `x: [B, C, H, W]` to `out_h × out_w`.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("bilinear_resize", format!("{s:?}")));
        }
        let map = SpatialMap::bilinear_resize(s[2], s[3], out_h, out_w)?;
        self.spatial_map(x, Arc::new(vec![map]))
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check_grad;
    use super::*;
    use crate::rng::SeedStream;

    fn run(x: &Tensor, map: SpatialMap) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.spatial_map(v, Arc::new(vec![map])).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn constant_image_stays_constant() {
        let x = Tensor::full([1, 2, 5, 7], 0.3);
        for (oh, ow) in [(1, 1), (3, 9), (16, 4)] {
            let y = run(&x, SpatialMap::bilinear_resize(5, 7, oh, ow).unwrap());
            assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::randn([2, 3, 6, 6], &mut SeedStream::new(4).rng());
        let y = run(&x, SpatialMap::bilinear_resize(6, 6, 6, 6).unwrap());
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn upsample_2x2_matches_hand_weights() {
        // align-corners-false: dst i maps to src (i + 0.5)/2 - 0.5, clamped at 0
        // -> taps: 0:(0,0,1.0) 1:(0,1,0.25) 2:(0,1,0.75) 3:(1,1,0)
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = run(&x, SpatialMap::bilinear_resize(2, 2, 4, 4).unwrap());
        let w1d = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        for oy in 0..4 {
            for ox in 0..4 {
                let mut e = 0.0;
                for iy in 0..2 {
                    for ix in 0..2 {
                        e += w1d[oy][iy] * w1d[ox][ix] * x.data()[iy * 2 + ix];
                    }
                }
                assert!((y.data()[oy * 4 + ox] - e).abs() < 1e-6, "({oy},{ox})");
            }
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = Tensor::randn([1, 3, 4, 5], &mut SeedStream::new(5).rng());
        let f = SpatialMap::flip_horizontal(4, 5);
        let y = run(&run(&x, f.clone()), f);
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn identity_affine_is_identity() {
        let x = Tensor::randn([1, 1, 6, 6], &mut SeedStream::new(6).rng());
        let y = run(&x, SpatialMap::affine(6, 6, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]));
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn blur_preserves_interior_constant() {
        let x = Tensor::full([1, 1, 5, 5], 2.0);
        let y = run(&x, SpatialMap::gaussian_blur(5, 5, 0.8, 1));
        assert!((y.data()[12] - 2.0).abs() < 1e-6);
        assert!(y.data()[0] < 2.0);
    }

    #[test]
    fn compose_matches_sequential() {
        let x = Tensor::randn([1, 2, 6, 6], &mut SeedStream::new(7).rng());
        let a = SpatialMap::flip_horizontal(6, 6);
        let b = SpatialMap::gaussian_blur(6, 6, 0.7, 1);
        let seq = run(&run(&x, a.clone()), b.clone());
        let once = run(&x, b.compose(&a).unwrap());
        assert!(seq.max_abs_diff(&once) < 1e-6);
    }

    #[test]
    fn grads() {
        for seed in 0..5 {
            let x = Tensor::randn([2, 2, 4, 5], &mut SeedStream::new(seed).rng());
            check_grad(&[x.clone()], |t, v| t.bilinear_resize(v[0], 7, 3));
            let maps = Arc::new(vec![
                SpatialMap::affine(4, 5, [[0.9, 0.2, 0.1], [-0.2, 1.1, 0.05]]),
                SpatialMap::gaussian_blur(4, 5, 0.6, 1),
            ]);
            check_grad(&[x], move |t, v| t.spatial_map(v[0], maps.clone()));
        }
    }
}
