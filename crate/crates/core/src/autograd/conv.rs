use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// `cols[(c,ki,kj), (oy,ox)]` for one image.
fn im2col(img: &[f32], g: &Geometry, cols: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Geometry, img: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            img[base + ix as usize] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// 2-D cross-correlation. `input: [B,C,H,W]`, `weight: [O,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv2d", format!("input {si:?} weight {sw:?}")));
        }
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.shape(bv))));
            }
        }
        let g = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let (patch, p) = (g.patch(), g.positions());
        let x = self.value(input).data();
        let wv = self.value(weight).data();
        let mut cols = vec![0.0; b * patch * p];
        let mut out = vec![0.0; b * o * p];
        for bi in 0..b {
            let cb = &mut cols[bi * patch * p..(bi + 1) * patch * p];
            im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], &g, cb);
            let ob = &mut out[bi * o * p..(bi + 1) * o * p];
            if let Some(bv) = bias {
                for (oc, &bias) in self.value(bv).data().iter().enumerate() {
                    ob[oc * p..(oc + 1) * p].fill(bias);
                }
            }
            gemm_nn(wv, cb, ob, o, patch, p);
        }
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push(
            "conv2d",
            Tensor::from_parts(vec![b, o, g.oh, g.ow], out),
            &parents,
            Box::new(move |ctx| {
                let wv = ctx.inputs[1].data();
                let gout = ctx.grad;
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![0.0; b * c * h * w];
                    let mut dcols = vec![0.0; patch * p];
                    for bi in 0..b {
                        dcols.fill(0.0);
                        gemm_tn(wv, &gout[bi * o * p..], &mut dcols, patch, o, p);
                        col2im(&dcols, &g, &mut gx[bi * c * h * w..(bi + 1) * c * h * w]);
                    }
                    gx
                });
                let gw = ctx.needs[1].then(|| {
                    let mut gw = vec![0.0; o * patch];
                    for bi in 0..b {
                        gemm_nt(&gout[bi * o * p..], &cols[bi * patch * p..], &mut gw, o, p, patch);
                    }
                    gw
                });
                let mut res = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    res.push(ctx.needs[2].then(|| {
                        let mut gb = vec![0.0; o];
                        for bi in 0..b {
                            for (oc, acc) in gb.iter_mut().enumerate() {
                                *acc += gout[(bi * o + oc) * p..(bi * o + oc + 1) * p].iter().sum::<f32>();
                            }
                        }
                        gb
                    }));
                }
                res
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check_grad;
    use super::*;
    use crate::rng::SeedStream;

    /// Direct six-loop cross-correlation.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0f32; b * o * oh * ow];
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0f64;
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize] as f64
                                            * w.data()[((oc * c + ic) * kh + ki) * kw + kj] as f64;
                                    }
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + oy) * ow + ox] = s as f32;
                    }
                }
            }
        }
        Tensor::new([b, o, oh, ow], out).unwrap()
    }

    #[test]
    fn unit_kernel_sums_channels() {
        let mut rng = SeedStream::new(1).rng();
        let x = Tensor::randn([1, 2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::ones([1, 2, 1, 1]));
        let y = tape.conv2d(xv, w, None, 1, 0).unwrap();
        for i in 0..9 {
            let expect = x.data()[i] + x.data()[9 + i];
            assert!((tape.value(y).data()[i] - expect).abs() < 1e-6);
        }
        let z = tape.constant(Tensor::zeros([3, 2, 3, 3]));
        let y = tape.conv2d(xv, z, None, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = SeedStream::new(2).rng();
        let x = Tensor::randn([1, 2, 5, 5], &mut rng);
        let w = Tensor::randn([3, 2, 3, 3], &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
            let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
            let expect = naive_conv(&x, &w, stride, pad);
            assert_eq!(tape.shape(y), expect.shape());
            assert!(tape.value(y).max_abs_diff(&expect) < 1e-6);
        }
    }

    #[test]
    fn oversized_kernel_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros([1, 1, 5, 5]));
        assert!(tape.conv2d(x, w, None, 1, 0).is_err());
    }

    #[test]
    fn grads() {
        for seed in 0..5 {
            let mut rng = SeedStream::new(seed).rng();
            let x = Tensor::randn([2, 2, 5, 5], &mut rng);
            let w = Tensor::randn([3, 2, 3, 3], &mut rng);
            let b = Tensor::randn([3], &mut rng);
            check_grad(&[x.clone(), w.clone(), b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1));
            check_grad(&[x, w], |t, v| t.conv2d(v[0], v[1], None, 1, 0));
        }
    }
}
