use super::broadcast::broadcast_index_map;
use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tape {
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(
            "sum",
            Tensor::scalar(total),
            &[x],
            Box::new(|ctx| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f32;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axes`, keeping them as extent-1 dimensions.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut out_shape = shape.clone();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::shape("sum_axes", format!("axis {a} for {shape:?}")));
            }
            out_shape[a] = 1;
        }
        let map = broadcast_index_map(&out_shape, &shape);
        let mut acc = vec![0.0f64; out_shape.iter().product()];
        for (&v, &j) in self.value(x).data().iter().zip(&map) {
            acc[j] += v as f64;
        }
        let value = Tensor::from_parts(out_shape, acc.into_iter().map(|v| v as f32).collect());
        self.push(
            "sum_axes",
            value,
            &[x],
            Box::new(move |ctx| vec![Some(map.iter().map(|&j| ctx.grad[j]).collect())]),
        )
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let count: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        let s = self.sum_axes(x, axes)?;
        self.scale(s, 1.0 / count as f32)
    }

    /// Population variance over `axes` (kept as extent-1 dimensions).
    pub fn var_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let mu = self.mean_axes(x, axes)?;
        let centered = self.sub(x, mu)?;
        let sq = self.square(centered)?;
        self.mean_axes(sq, axes)
    }
}
