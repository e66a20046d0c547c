//! Differentiable fake quantization.
//!
//! The rounding step is treated as identity inside the clamp range
//! (straight-through), so `∂x̂/∂x` is 1 in range and 0 outside. When the
//! scale is a trainable node its gradient follows the usual learned-step-size
//! rule: `round(x/s) - x/s` in range, `q_clamped - z` outside.

use super::{qmax, round_half_away, zero_point_for, Granularity, QuantParams};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tape {
    /// Fake-quantize with fixed parameters.
    pub fn fake_quant(&mut self, x: Var, p: &QuantParams) -> Result<Var> {
        let s = self.constant(Tensor::from_parts(vec![p.channels()], p.scale().to_vec()));
        let clip_min = p.clip_min();
        self.fake_quant_zp(x, s, &clip_min, Some(p.zero_point()), p.bits(), p.granularity())
    }

    /// Fake-quantize with a (possibly trainable) scale node of shape `[C]`.
    /// The zero-point is re-derived from `clip_min` and the current scale.
    pub fn fake_quant_learnable(
        &mut self,
        x: Var,
        scale: Var,
        clip_min: &[f32],
        bits: u8,
        granularity: Granularity,
    ) -> Result<Var> {
        self.fake_quant_zp(x, scale, clip_min, None, bits, granularity)
    }

    fn fake_quant_zp(
        &mut self,
        x: Var,
        scale: Var,
        clip_min: &[f32],
        fixed_zp: Option<&[i32]>,
        bits: u8,
        granularity: Granularity,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let channels = granularity.channels(&shape)?;
        if self.shape(scale) != [channels] || clip_min.len() != channels {
            return Err(Error::shape(
                "fake_quant",
                format!("scale {:?} for {channels} channels", self.shape(scale)),
            ));
        }
        let map = granularity.channel_of(&shape)?;
        let qm = qmax(bits);
        let s: Vec<f32> = self.value(scale).data().to_vec();
        if s.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument("fake_quant: non-positive scale".into()));
        }
        let z: Vec<i32> = match fixed_zp {
            Some(z) => z.to_vec(),
            None => clip_min
                .iter()
                .zip(&s)
                .map(|(&m, &sc)| zero_point_for(m, sc, qm))
                .collect(),
        };
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(xs.len());
        for (i, &v) in xs.iter().enumerate() {
            let c = map.get(i);
            let q = (round_half_away(v / s[c]) + z[c] as f32).clamp(0.0, qm as f32);
            out.push(s[c] * (q - z[c] as f32));
        }
        self.push(
            "fake_quant",
            Tensor::from_parts(shape, out),
            &[x, scale],
            Box::new(move |ctx| {
                let xs = ctx.inputs[0].data();
                let g = ctx.grad;
                let mut gx = ctx.needs[0].then(|| vec![0.0f32; xs.len()]);
                let mut gs = ctx.needs[1].then(|| vec![0.0f64; s.len()]);
                for (i, &v) in xs.iter().enumerate() {
                    let c = map.get(i);
                    let r = round_half_away(v / s[c]);
                    let q = r + z[c] as f32;
                    let inside = q >= 0.0 && q <= qm as f32;
                    if let Some(gx) = gx.as_mut() {
                        if inside {
                            gx[i] = g[i];
                        }
                    }
                    if let Some(gs) = gs.as_mut() {
                        let d = if inside {
                            r - v / s[c]
                        } else {
                            q.clamp(0.0, qm as f32) - z[c] as f32
                        };
                        gs[c] += (g[i] * d) as f64;
                    }
                }
                vec![gx, gs.map(|v| v.into_iter().map(|x| x as f32).collect())]
            }),
        )
    }

    /// `|x|^p` with derivative `p·|x|^(p-1)·sign(x)`.
    pub fn abs_pow(&mut self, x: Var, p: f32) -> Result<Var> {
        let value = self.value(x).map(|v| v.abs().powf(p));
        self.push(
            "abs_pow",
            value,
            &[x],
            Box::new(move |ctx| {
                let xs = ctx.inputs[0].data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(xs)
                        .map(|(g, &v)| {
                            if v == 0.0 {
                                0.0
                            } else {
                                g * p * v.abs().powf(p - 1.0) * v.signum()
                            }
                        })
                        .collect(),
                )]
            }),
        )
    }
}

const ZETA: f32 = 1.1;
const GAMMA: f32 = -0.1;

/// Learned-rounding state for one weight tensor: the soft rounding offset
/// `h(V) = clamp(sigmoid(V)·(ζ-γ)+γ, 0, 1)` replaces round-to-nearest.
#[derive(Debug, Clone)]
pub struct AdaRoundState {
    pub v: Tensor,
    floor: Tensor,
    params: QuantParams,
}

impl AdaRoundState {
    /// Initializes `V` so that the soft offset reproduces round-to-nearest's residual.
    pub fn new(w: &Tensor, params: &QuantParams) -> Result<Self> {
        let map = params.check_shape(w.shape())?;
        let mut floor = Vec::with_capacity(w.numel());
        let mut v = Vec::with_capacity(w.numel());
        for (i, &x) in w.data().iter().enumerate() {
            let s = params.scale()[map.get(i)];
            let f = (x / s).floor();
            let rest = (x / s - f).clamp(0.01, 0.99);
            // invert the rectified sigmoid
            let sig = (rest - GAMMA) / (ZETA - GAMMA);
            floor.push(f);
            v.push((sig / (1.0 - sig)).ln());
        }
        Ok(Self {
            v: Tensor::from_parts(w.shape().to_vec(), v),
            floor: Tensor::from_parts(w.shape().to_vec(), floor),
            params: params.clone(),
        })
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    /// Weights with hard rounding decisions `h = [V ≥ 0]`.
    pub fn hard_weight(&self) -> Tensor {
        let map = self.params.channel_of_unchecked(self.v.shape());
        let qm = self.params.qmax() as f32;
        let data = self
            .v
            .data()
            .iter()
            .zip(self.floor.data())
            .enumerate()
            .map(|(i, (&v, &f))| {
                let c = map.get(i);
                let z = self.params.zero_point()[c] as f32;
                let h = if v >= 0.0 { 1.0 } else { 0.0 };
                self.params.scale()[c] * ((f + h + z).clamp(0.0, qm) - z)
            })
            .collect();
        Tensor::from_parts(self.v.shape().to_vec(), data)
    }
}

impl QuantParams {
    fn channel_of_unchecked(&self, shape: &[usize]) -> super::ChannelMap {
        self.granularity().channel_of(shape).expect("validated shape")
    }

    /// Scale and zero-point broadcast to a tensor of `shape`.
    pub fn broadcast(&self, shape: &[usize]) -> Result<(Tensor, Tensor)> {
        let map = self.check_shape(shape)?;
        let n: usize = shape.iter().product();
        let s = (0..n).map(|i| self.scale()[map.get(i)]).collect();
        let z = (0..n).map(|i| self.zero_point()[map.get(i)] as f32).collect();
        Ok((
            Tensor::from_parts(shape.to_vec(), s),
            Tensor::from_parts(shape.to_vec(), z),
        ))
    }
}

/// Soft-rounded weight `s·(clamp(⌊w/s⌋ + h(V) + z, 0, qmax) - z)` and the
/// rounding regularizer `Σ 1 - |2h - 1|^β`.
pub fn adaround_weight(tape: &mut Tape, state: &AdaRoundState, v: Var, beta: f32) -> Result<(Var, Var)> {
    let shape = state.v.shape().to_vec();
    let (s, z) = state.params.broadcast(&shape)?;
    let sig = tape.sigmoid(v)?;
    let h = tape.scale(sig, ZETA - GAMMA)?;
    let h = tape.add_scalar(h, GAMMA)?;
    let h = tape.clamp(h, 0.0, 1.0)?;
    let base = tape.constant(state.floor.clone());
    let zc = tape.constant(z);
    let q = tape.add(base, h)?;
    let q = tape.add(q, zc)?;
    let q = tape.clamp(q, 0.0, state.params.qmax() as f32)?;
    let q = tape.sub(q, zc)?;
    let sc = tape.constant(s);
    let w = tape.mul(q, sc)?;

    let two_h = tape.scale(h, 2.0)?;
    let centered = tape.add_scalar(two_h, -1.0)?;
    let p = tape.abs_pow(centered, beta)?;
    let one_minus = tape.neg(p)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let reg = tape.sum(one_minus)?;
    Ok((w, reg))
}

#[cfg(test)]
mod tests {
    use super::super::{fake_quant_tensor, omse_init};
    use super::*;
    use crate::autograd::gradcheck::{check_grad_masked, relative_error};
    use crate::rng::SeedStream;

    #[test]
    fn forward_matches_tensor_path() {
        let x = Tensor::randn([4, 6], &mut SeedStream::new(1).rng());
        let p = omse_init(&x, 4, Granularity::PerChannel { axis: 1 }).unwrap().params;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.fake_quant(xv, &p).unwrap();
        assert_eq!(tape.value(y), &fake_quant_tensor(&x, &p).unwrap());
    }

    #[test]
    fn ste_mask() {
        let p = QuantParams::per_tensor(0.1, 8, 4).unwrap(); // range [-0.8, 0.7]
        let x = Tensor::new([4], vec![0.33, -0.52, 5.0, -9.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = tape.fake_quant(xv, &p).unwrap();
        let g = tape.constant(Tensor::new([4], vec![2.0, -3.0, 4.0, 5.0]).unwrap());
        let prod = tape.mul(y, g).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap().data(), &[2.0, -3.0, 0.0, 0.0]);
    }

    #[test]
    fn ste_mask_agrees_with_finite_difference_sign() {
        // Away from grid boundaries the numeric derivative of the clamped
        // identity is 1 in range and 0 outside; the STE mask must agree.
        let p = QuantParams::per_tensor(0.1, 8, 4).unwrap();
        let mut rng = SeedStream::new(2).rng();
        let pts: Vec<f32> = (0..40).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new([40], pts.clone()).unwrap());
        let y = tape.fake_quant(xv, &p).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let (lo, hi) = (-0.8f32, 0.7f32);
        for (i, &x) in pts.iter().enumerate() {
            if (x - lo).abs() < 0.1 || (x - hi).abs() < 0.1 {
                continue;
            }
            // smooth surrogate: finite difference of clamp(x, lo, hi)
            let h = 1e-3;
            let fd = ((x + h).clamp(lo, hi) - (x - h).clamp(lo, hi)) / (2.0 * h);
            assert_eq!(grads.get(xv).unwrap().data()[i], fd.round(), "x = {x}");
        }
    }

    #[test]
    fn learnable_scale_gradient() {
        // Away from rounding jumps the LSQ gradient is the exact derivative
        // of s·(round(x/s)+z - z) with round held fixed: compare against
        // finite differences of that piecewise-linear function.
        let mut rng = SeedStream::new(3).rng();
        let x = Tensor::randn([5, 3], &mut rng);
        let s0 = vec![0.21f32, 0.13, 0.4];
        let clip_min = vec![-0.84f32, -0.65, -1.2];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let sv = tape.leaf(Tensor::new([3], s0.clone()).unwrap());
        let y = tape
            .fake_quant_learnable(xv, sv, &clip_min, 4, Granularity::PerChannel { axis: 1 })
            .unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let qm = 15.0f64;
        let mut numeric = vec![0.0f64; 3];
        for c in 0..3 {
            let z = zero_point_for(clip_min[c], s0[c], 15) as f64;
            let f = |s: f64| -> f64 {
                (0..5)
                    .map(|r| {
                        let v = x.data()[r * 3 + c] as f64;
                        let rq = (v / s0[c] as f64).round(); // rounding held fixed
                        let q = rq + z;
                        if (0.0..=qm).contains(&q) {
                            // straight-through surrogate: round(u) ≈ u with u = x/s
                            s * rq + v - s * v / s0[c] as f64
                        } else {
                            s * (q.clamp(0.0, qm) - z)
                        }
                    })
                    .sum()
            };
            let h = 1e-4;
            numeric[c] = (f(s0[c] as f64 + h) - f(s0[c] as f64 - h)) / (2.0 * h);
        }
        let analytic = grads.get(sv).unwrap();
        assert!(relative_error(analytic.data(), &numeric) < 1e-3);
    }

    #[test]
    fn abs_pow_grad() {
        let x = Tensor::new([4], vec![0.5, -0.7, 1.3, -0.2]).unwrap();
        check_grad_masked(&[x], &[true], |t, v| t.abs_pow(v[0], 2.5));
    }

    #[test]
    fn adaround_initial_soft_weight_close_to_nearest() {
        let w = Tensor::randn([4, 8], &mut SeedStream::new(4).rng()).map(|v| v * 0.3);
        let p = omse_init(&w, 4, Granularity::PerChannel { axis: 0 }).unwrap().params;
        let st = AdaRoundState::new(&w, &p).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(st.v.clone());
        let (soft, reg) = adaround_weight(&mut tape, &st, v, 20.0).unwrap();
        let nearest = fake_quant_tensor(&w, &p).unwrap();
        let hard = st.hard_weight();
        // soft weight reconstructs the clipped w (up to the residual clamp), and
        // hard rounding agrees with round-to-nearest for the initial V
        for (i, (&sv, &wv)) in tape.value(soft).data().iter().zip(w.data()).enumerate() {
            let c = i / 8;
            let (s, z) = (p.scale()[c], p.zero_point()[c] as f32);
            let clipped = wv.clamp(-z * s, (15.0 - z) * s);
            assert!((sv - clipped).abs() <= 0.01 * s + 1e-5, "{sv} vs {clipped}");
        }
        assert!(hard.max_abs_diff(&nearest) <= 1e-6);
        assert!(tape.value(reg).item() >= 0.0);
    }
}
