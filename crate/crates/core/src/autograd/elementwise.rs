use super::broadcast::{broadcast_index_map, broadcast_shape, reduce_to};
use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<f32> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| op.apply(x, y)).collect()
        } else if bv.len() == 1 && sa == out_shape {
            let y = bv[0];
            av.iter().map(|&x| op.apply(x, y)).collect()
        } else {
            let ia = broadcast_index_map(&sa, &out_shape);
            let ib = broadcast_index_map(&sb, &out_shape);
            ia.iter().zip(&ib).map(|(&i, &j)| op.apply(av[i], bv[j])).collect()
        };
        let value = Tensor::from_parts(out_shape.clone(), data);
        self.push(
            op.name(),
            value,
            &[a, b],
            Box::new(move |ctx| {
                let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
                let g = ctx.grad;
                let same = x.shape() == y.shape();
                let ia = (!same).then(|| broadcast_index_map(x.shape(), &out_shape));
                let ib = (!same).then(|| broadcast_index_map(y.shape(), &out_shape));
                let xa = |k: usize| match &ia {
                    Some(m) => x.data()[m[k]],
                    None => x.data()[k],
                };
                let yb = |k: usize| match &ib {
                    Some(m) => y.data()[m[k]],
                    None => y.data()[k],
                };
                let n = g.len();
                let (ga, gb): (Vec<f32>, Vec<f32>) = match op {
                    BinOp::Add => (g.to_vec(), g.to_vec()),
                    BinOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    BinOp::Mul => (
                        (0..n).map(|k| g[k] * yb(k)).collect(),
                        (0..n).map(|k| g[k] * xa(k)).collect(),
                    ),
                    BinOp::Div => (
                        (0..n).map(|k| g[k] / yb(k)).collect(),
                        (0..n)
                            .map(|k| {
                                let yy = yb(k);
                                -g[k] * xa(k) / (yy * yy)
                            })
                            .collect(),
                    ),
                };
                vec![
                    ctx.needs[0].then(|| reduce_to(&ga, &out_shape, x.shape())),
                    ctx.needs[1].then(|| reduce_to(&gb, &out_shape, y.shape())),
                ]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    /// Elementwise map with derivative expressed through input and output.
    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f32) -> f32,
        df: fn(f32, f32) -> f32,
    ) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(
            name,
            value,
            &[x],
            Box::new(move |ctx| {
                let xs = ctx.inputs[0].data();
                let ys = ctx.output.data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(xs.iter().zip(ys))
                        .map(|(g, (&xv, &yv))| g * df(xv, yv))
                        .collect(),
                )]
            }),
        )
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, |v| -v, |_, _| -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f32::exp, |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f32::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f32::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu_scalar, |x, _| gelu_grad(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            x,
            |v| 1.0 / (1.0 + (-v).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(
            "scale",
            value,
            &[x],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|g| g * c).collect())]),
        )
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push(
            "add_scalar",
            value,
            &[x],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        )
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(
            "clamp",
            value,
            &[x],
            Box::new(move |ctx| {
                let xs = ctx.inputs[0].data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(xs)
                        .map(|(g, &v)| if v >= lo && v <= hi { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    /// Multiply by a constant tensor (broadcast).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let c = self.constant(c);
        self.mul(x, c)
    }

    /// Add a constant tensor (broadcast).
    pub fn add_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let c = self.constant(c);
        self.add(x, c)
    }
}
