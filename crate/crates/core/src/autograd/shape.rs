use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};

/// Row-major gather: `out[i] = src[map[i]]` where `map` enumerates `src`
/// through permuted strides.
fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..data.len() {
        out.push(data[idx]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            idx += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            idx -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out_shape, out)
}

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.push(
            "reshape",
            value,
            &[x],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        )
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for {shape:?}")));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.push(
            "permute",
            Tensor::from_parts(out_shape.clone(), data),
            &[x],
            Box::new(move |ctx| vec![Some(permute_data(ctx.grad, &out_shape, &inverse).1)]),
        )
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose_last", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}+{len} for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.push(
            "narrow",
            Tensor::from_parts(out_shape, data),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut extents = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            extents.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &e) in xs.iter().zip(&extents) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(out_shape, data),
            xs,
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<f32>> =
                    extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &e) in grads.iter_mut().zip(&extents) {
                        g.extend_from_slice(&ctx.grad[pos..pos + e * inner]);
                        pos += e * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        )
    }

    /// Gather entries along `axis`; indices may repeat.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::shape(
                "index_select",
                format!("axis {axis} indices out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * extent + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let indices = indices.to_vec();
        self.push(
            "index_select",
            Tensor::from_parts(out_shape, data),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; outer * extent * inner];
                let mut pos = 0;
                for o in 0..outer {
                    for &i in &indices {
                        let base = (o * extent + i) * inner;
                        for (dst, src) in g[base..base + inner].iter_mut().zip(&ctx.grad[pos..pos + inner]) {
                            *dst += src;
                        }
                        pos += inner;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Picks one row per batch element: `x[b, idx[b], :]` for `x: [B, T, D]`.
    pub fn gather_tokens(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || idx.len() != shape[0] || idx.iter().any(|&i| i >= shape[1]) {
            return Err(Error::shape("gather_tokens", format!("{idx:?} for {shape:?}")));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * d);
        for (bi, &ti) in idx.iter().enumerate() {
            let base = (bi * t + ti) * d;
            data.extend_from_slice(&src[base..base + d]);
        }
        let idx = idx.to_vec();
        self.push(
            "gather_tokens",
            Tensor::from_parts(vec![b, d], data),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; b * t * d];
                for (bi, &ti) in idx.iter().enumerate() {
                    let base = (bi * t + ti) * d;
                    g[base..base + d].copy_from_slice(&ctx.grad[bi * d..(bi + 1) * d]);
                }
                vec![Some(g)]
            }),
        )
    }
}
