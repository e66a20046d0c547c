//! Differentiable Gaussian kernel density entropy estimate.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Silverman's rule-of-thumb bandwidth `1.06·σ·M^(-1/5)`, floored at 1e-3.
pub fn silverman_bandwidth(xs: &[f32]) -> f32 {
    let m = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / m;
    let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m;
    ((1.06 * var.sqrt() * m.powf(-0.2)) as f32).max(1e-3)
}

impl Tape {
    /// Resubstitution entropy `-(1/M) Σ_a log p̂(x_a)` of each row of `x: [N, M]`
    /// under a Gaussian KDE with per-row Silverman bandwidth (held constant
    /// for differentiation). Output `[N]`.
    pub fn kde_entropy(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] < 2 {
            return Err(Error::shape("kde_entropy", format!("{s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let data = self.value(x).data();
        let bw: Vec<f32> = data.chunks(m).map(silverman_bandwidth).collect();
        let norm = |h: f32| (m as f64 * h as f64 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        let mut out = Vec::with_capacity(n);
        for (row, &h) in data.chunks(m).zip(&bw) {
            let inv = 1.0 / (2.0 * h * h);
            let mut acc = 0.0f64;
            for &a in row {
                let p: f32 = row.iter().map(|&b| (-(a - b) * (a - b) * inv).exp()).sum();
                acc += (p as f64).ln() - norm(h);
            }
            out.push((-acc / m as f64) as f32);
        }
        self.push(
            "kde_entropy",
            Tensor::from_parts(vec![n], out),
            &[x],
            Box::new(move |ctx| {
                let data = ctx.inputs[0].data();
                let mut g = vec![0.0f32; n * m];
                for (r, (row, &h)) in data.chunks(m).zip(&bw).enumerate() {
                    let inv = 1.0 / (2.0 * h * h);
                    let h2 = h * h;
                    let inv_p: Vec<f32> = row
                        .iter()
                        .map(|&a| 1.0 / row.iter().map(|&b| (-(a - b) * (a - b) * inv).exp()).sum::<f32>())
                        .collect();
                    let up = ctx.grad[r] / m as f32;
                    for c in 0..m {
                        let sc = row[c];
                        let mut acc = 0.0f32;
                        for a in 0..m {
                            let d = row[a] - sc;
                            let k = (-d * d * inv).exp();
                            acc += (inv_p[c] + inv_p[a]) * k * d / h2;
                        }
                        g[r * m + c] = -up * acc;
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}
