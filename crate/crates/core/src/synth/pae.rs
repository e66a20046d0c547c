//! Random perturbations applied to foreground crops during synthesis.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{SpatialMap, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaeFlags {
    pub flip: bool,
    pub affine: bool,
    pub jitter: bool,
    pub blur: bool,
    pub erase: bool,
}

impl PaeFlags {
    pub fn all() -> Self {
        Self::from_letters("HACGR").unwrap()
    }

    pub fn none() -> Self {
        Self::from_letters("").unwrap()
    }

    /// Letters `H` flip, `A` affine, `C` color jitter, `G` blur, `R` erase.
    pub fn from_letters(s: &str) -> Result<Self> {
        let mut f = Self {
            flip: false,
            affine: false,
            jitter: false,
            blur: false,
            erase: false,
        };
        for ch in s.chars() {
            match ch.to_ascii_uppercase() {
                'H' => f.flip = true,
                'A' => f.affine = true,
                'C' => f.jitter = true,
                'G' => f.blur = true,
                'R' => f.erase = true,
                _ => return Err(Error::InvalidArgument(format!("unknown perturbation letter `{ch}`"))),
            }
        }
        Ok(f)
    }

    pub fn letters(&self) -> String {
        [(self.flip, 'H'), (self.affine, 'A'), (self.jitter, 'C'), (self.blur, 'G'), (self.erase, 'R')]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, c)| *c)
            .collect()
    }

    pub fn any(&self) -> bool {
        self.flip || self.affine || self.jitter || self.blur || self.erase
    }
}

/// Rectangle mask `[H, W]` covering at most `max_area` of the image, with aspect ratio in `[0.3, 3.3]`.
pub fn random_erase_mask(h: usize, w: usize, max_area: f32, rng: &mut Prng) -> Vec<bool> {
    let area = rng.uniform_range(0.02, max_area) * (h * w) as f32;
    let aspect = rng.uniform_range(0.3f32.ln(), 3.3f32.ln()).exp();
    let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
    let y0 = rng.int_range(0, h - eh);
    let x0 = rng.int_range(0, w - ew);
    let mut m = vec![false; h * w];
    for y in y0..y0 + eh {
        m[y * w + x0..y * w + x0 + ew].fill(true);
    }
    debug_assert!(m.iter().filter(|&&v| v).count() as f32 <= max_area * (h * w) as f32 + (h + w) as f32);
    m
}

/// Applies each enabled perturbation to each image independently with
/// probability `prob`, in the order flip, affine, jitter, blur, erase.
pub fn apply_pae(tape: &mut Tape, x: Var, flags: PaeFlags, prob: f32, rng: &mut Prng) -> Result<Var> {
    if !flags.any() {
        return Ok(x);
    }
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("apply_pae", format!("{s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut x = x;

    // Geometric part: flip then affine, fused into one map per image.
    if flags.flip || flags.affine {
        let maps: Vec<SpatialMap> = (0..n)
            .map(|_| {
                let mut m = SpatialMap::identity(h, w);
                if flags.flip && rng.bernoulli(prob) {
                    m = SpatialMap::flip_horizontal(h, w);
                }
                if flags.affine && rng.bernoulli(prob) {
                    let rot = rng.uniform_range(-15.0, 15.0).to_radians();
                    let sc = rng.uniform_range(0.9, 1.1);
                    let (tx, ty) = (rng.uniform_range(-0.2, 0.2), rng.uniform_range(-0.2, 0.2));
                    // inverse map: output coordinate -> input coordinate
                    let (cs, sn) = (rot.cos() / sc, rot.sin() / sc);
                    let a = SpatialMap::affine(h, w, [[cs, -sn, tx], [sn, cs, ty]]);
                    m = a.compose(&m)?;
                }
                Ok(m)
            })
            .collect::<Result<_>>()?;
        x = tape.spatial_map(x, Arc::new(maps))?;
    }

    if flags.jitter {
        let mut bright = vec![1.0f32; n];
        let mut contrast = vec![1.0f32; n];
        let mut sat = vec![1.0f32; n];
        for i in 0..n {
            if rng.bernoulli(prob) {
                bright[i] = rng.uniform_range(0.8, 1.2);
                contrast[i] = rng.uniform_range(0.8, 1.2);
                sat[i] = rng.uniform_range(0.8, 1.2);
            }
        }
        let per = |v: Vec<f32>| Tensor::new([n, 1, 1, 1], v);
        // brightness
        x = tape.mul_const(x, per(bright)?)?;
        // contrast around the per-image mean
        let mu = tape.mean_axes(x, &[1, 2, 3])?;
        let xc = tape.sub(x, mu)?;
        let xc = tape.mul_const(xc, per(contrast)?)?;
        x = tape.add(xc, mu)?;
        // saturation around the per-pixel channel mean
        if c > 1 {
            let gray = tape.mean_axes(x, &[1])?;
            let xc = tape.sub(x, gray)?;
            let xc = tape.mul_const(xc, per(sat)?)?;
            x = tape.add(xc, gray)?;
        }
    }

    if flags.blur {
        let maps: Vec<SpatialMap> = (0..n)
            .map(|_| {
                if rng.bernoulli(prob) {
                    SpatialMap::gaussian_blur(h, w, rng.uniform_range(0.1, 1.0), 1)
                } else {
                    SpatialMap::identity(h, w)
                }
            })
            .collect();
        x = tape.spatial_map(x, Arc::new(maps))?;
    }

    if flags.erase {
        let hw = h * w;
        let mut keep = vec![1.0f32; n * c * hw];
        let mut fill = vec![0.0f32; n * c * hw];
        for i in 0..n {
            if !rng.bernoulli(prob) {
                continue;
            }
            let m = random_erase_mask(h, w, 0.2, rng);
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for (p, &e) in m.iter().enumerate() {
                    if e {
                        keep[base + p] = 0.0;
                        fill[base + p] = rng.normal();
                    }
                }
            }
        }
        let kept = tape.mul_const(x, Tensor::new(s.clone(), keep)?)?;
        x = tape.add_const(kept, Tensor::new(s, fill)?)?;
    }
    Ok(x)
}
