use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Differentiable per-channel batch statistics, each shaped `[1, C, 1, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct BatchStats {
    pub mean: Var,
    pub var: Var,
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap();
    (shape.iter().product::<usize>() / d, d)
}

impl Tape {
    /// Softmax along the last axis (row-max stabilized).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, d) = last_axis(&shape);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(
            "softmax",
            Tensor::from_parts(shape, out),
            &[x],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), gin) in ctx.grad.chunks(d).zip(y.chunks(d)).zip(g.chunks_mut(d)) {
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gy), &yy) in gin.iter_mut().zip(gr).zip(yr) {
                        *o = yy * (gy - dot);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, d) = last_axis(&shape);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|v| ((v - m) as f64).exp()).sum::<f64>().ln() as f32;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(
            "log_softmax",
            Tensor::from_parts(shape, out),
            &[x],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), gin) in ctx.grad.chunks(d).zip(y.chunks(d)).zip(g.chunks_mut(d)) {
                    let s: f32 = gr.iter().sum();
                    for ((o, &gy), &ly) in gin.iter_mut().zip(gr).zip(yr) {
                        *o = gy - ly.exp() * s;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Rows scaled to unit L2 norm along the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        const EPS: f32 = 1e-12;
        let shape = self.shape(x).to_vec();
        let (_, d) = last_axis(&shape);
        let xs = self.value(x).data();
        let norms: Vec<f32> = xs
            .chunks(d)
            .map(|r| (r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32).max(EPS))
            .collect();
        let out: Vec<f32> = xs
            .chunks(d)
            .zip(&norms)
            .flat_map(|(r, &n)| r.iter().map(move |v| v / n))
            .collect();
        self.push(
            "l2_normalize",
            Tensor::from_parts(shape, out),
            &[x],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let mut g = vec![0.0; y.len()];
                for (((gr, yr), gin), &n) in ctx.grad.chunks(d).zip(y.chunks(d)).zip(g.chunks_mut(d)).zip(&norms) {
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gy), &yy) in gin.iter_mut().zip(gr).zip(yr) {
                        *o = (gy - yy * dot) / n;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let r = self.shape(x).len();
        let d = self.shape(x)[r - 1];
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("affine for D={d}")));
        }
        let mu = self.mean_axes(x, &[r - 1])?;
        let xc = self.sub(x, mu)?;
        let sq = self.square(xc)?;
        let var = self.mean_axes(sq, &[r - 1])?;
        let var = self.add_scalar(var, eps)?;
        let std = self.sqrt(var)?;
        let xn = self.div(xc, std)?;
        let y = self.mul(xn, gamma)?;
        self.add(y, beta)
    }

    /// Batch normalization using the statistics of the current batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, BatchStats)> {
        let c = self.check_bn(x, gamma, beta)?;
        let mean = self.mean_axes(x, &[0, 2, 3])?;
        let xc = self.sub(x, mean)?;
        let sq = self.square(xc)?;
        let var = self.mean_axes(sq, &[0, 2, 3])?;
        let ve = self.add_scalar(var, eps)?;
        let std = self.sqrt(ve)?;
        let xn = self.div(xc, std)?;
        let g = self.reshape(gamma, &[1, c, 1, 1])?;
        let b = self.reshape(beta, &[1, c, 1, 1])?;
        let y = self.mul(xn, g)?;
        let y = self.add(y, b)?;
        Ok((y, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let c = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm_eval", "running statistics length"));
        }
        let m = self.constant(Tensor::from_parts(vec![1, c, 1, 1], running_mean.to_vec()));
        let inv: Vec<f32> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let inv = self.constant(Tensor::from_parts(vec![1, c, 1, 1], inv));
        let xc = self.sub(x, m)?;
        let xn = self.mul(xc, inv)?;
        let g = self.reshape(gamma, &[1, c, 1, 1])?;
        let b = self.reshape(beta, &[1, c, 1, 1])?;
        let y = self.mul(xn, g)?;
        self.add(y, b)
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("batch_norm", format!("input {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", format!("affine for C={c}")));
        }
        Ok(c)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits: [N, C]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&t| t >= s[1]) {
            return Err(Error::shape("cross_entropy", format!("logits {s:?}")));
        }
        let mut onehot = Tensor::zeros(s.clone());
        for (i, &t) in targets.iter().enumerate() {
            onehot.data_mut()[i * s[1] + t] = -1.0 / s[0] as f32;
        }
        let lp = self.log_softmax(logits)?;
        let picked = self.mul_const(lp, onehot)?;
        self.sum(picked)
    }
}
