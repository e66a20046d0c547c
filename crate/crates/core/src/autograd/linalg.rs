use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tape {
    /// `[M×K] · [K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        self.bmm(a, b)
    }

    /// Batched matmul over identical leading dimensions: `[..., M, K] · [..., K, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm_nn(
                &av[i * m * k..],
                &bv[i * k * n..],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([m, n]);
        self.push(
            "bmm",
            Tensor::from_parts(out_shape, out),
            &[a, b],
            Box::new(move |ctx| {
                let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm_nt(&g[i * m * n..], &bv[i * k * n..], &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                    }
                    ga
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        gemm_tn(&av[i * m * k..], &g[i * m * n..], &mut gb[i * k * n..(i + 1) * k * n], k, m, n);
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// `x · wᵀ + bias` over the last axis of `x`; `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let d_in = *sx.last().unwrap();
        if sw.len() != 2 || sw[1] != d_in {
            return Err(Error::shape("linear", format!("x {sx:?} w {sw:?}")));
        }
        let d_out = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [d_out] {
                return Err(Error::shape("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / d_in;
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv);
            }
        }
        gemm_nt(self.value(x).data(), self.value(w).data(), &mut out, rows, d_in, d_out);
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(
            "linear",
            Tensor::from_parts(out_shape, out),
            &parents,
            Box::new(move |ctx| {
                let (xv, wv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![0.0; rows * d_in];
                    gemm_nn(g, wv, &mut gx, rows, d_out, d_in);
                    gx
                });
                let gw = ctx.needs[1].then(|| {
                    let mut gw = vec![0.0; d_out * d_in];
                    gemm_tn(g, xv, &mut gw, d_out, rows, d_in);
                    gw
                });
                let mut res = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    res.push(ctx.needs[2].then(|| {
                        let mut gb = vec![0.0; d_out];
                        for row in g.chunks(d_out) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        gb
                    }));
                }
                res
            }),
        )
    }
}
