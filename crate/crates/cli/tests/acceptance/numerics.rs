//! Criteria 1-3: kernels, quantizer and contrastive-loss identities.

use clipq_core::autograd::gradcheck::{gradient_errors, FD_STEP, FD_TOL};
use clipq_core::autograd::{BlockWeights, LN_EPS};
use clipq_core::quant::{
    dequantize, fake_quant_tensor, omse_init, omse_mse_for_range, qmax, quant_mse, quantize, Granularity, QuantParams,
    OMSE_CANDIDATES,
};
use clipq_core::synth::{infonce_loss, scg_logits, scg_loss};
use clipq_core::{Prng, SeedStream, Tape, Tensor, Var};

use crate::Verdict;

type Op = Box<dyn Fn(&mut Tape, &[Var]) -> clipq_core::Result<Var>>;
type Oracle = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    /// Inputs drawn from `[0.5, 1.5]` (log, sqrt, div).
    positive: bool,
    op: Op,
    oracle: Oracle,
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

fn rows_softmax(x: &[f64], c: usize) -> Vec<f64> {
    x.chunks(c)
        .flat_map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = r.iter().map(|v| (v - m).exp()).sum();
            r.iter().map(move |v| (v - m).exp() / s).collect::<Vec<_>>()
        })
        .collect()
}

fn rows_layer_norm(x: &[f64], g: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    x.chunks(c)
        .flat_map(|r| {
            let mu = r.iter().sum::<f64>() / c as f64;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS as f64).sqrt();
            r.iter().enumerate().map(move |(i, v)| (v - mu) * inv * g[i] + b[i]).collect::<Vec<_>>()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn bilinear_taps(dst: usize, inn: usize, out: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(inn - 1);
    (i0, (i0 + 1).min(inn - 1), src - i0 as f64)
}

/// Multi-head self-attention block with pre-norm, GELU MLP and residuals.
fn attention_oracle(x: &[f64], w: &[Vec<f64>], t: usize, d: usize, heads: usize, causal: bool) -> Vec<f64> {
    let (ln1g, ln1b, wqkv, bqkv, wp, bp, ln2g, ln2b, w1, b1, w2, b2) =
        (&w[0], &w[1], &w[2], &w[3], &w[4], &w[5], &w[6], &w[7], &w[8], &w[9], &w[10], &w[11]);
    let hidden = b1.len();
    let lin = |x: &[f64], w: &[f64], b: &[f64], o: usize, i: usize| -> Vec<f64> {
        let mut y = matmul(x, &transpose(w, o, i), x.len() / i, i, o);
        for r in y.chunks_mut(o) {
            for (v, bb) in r.iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    };
    let b_count = x.len() / (t * d);
    let mut out = Vec::new();
    for bi in 0..b_count {
        let xb = &x[bi * t * d..(bi + 1) * t * d];
        let h = rows_layer_norm(xb, ln1g, ln1b, d);
        let qkv = lin(&h, wqkv, bqkv, 3 * d, d);
        let dh = d / heads;
        let mut ctx = vec![0.0; t * d];
        for hd in 0..heads {
            let col = |which: usize, tok: usize, k: usize| qkv[tok * 3 * d + which * d + hd * dh + k];
            for i in 0..t {
                let mut s: Vec<f64> = (0..t)
                    .map(|j| {
                        let dot: f64 = (0..dh).map(|k| col(0, i, k) * col(1, j, k)).sum();
                        let v = dot / (dh as f64).sqrt();
                        if causal && j > i {
                            v - 1e9
                        } else {
                            v
                        }
                    })
                    .collect();
                s = rows_softmax(&s, t);
                for k in 0..dh {
                    ctx[i * d + hd * dh + k] = (0..t).map(|j| s[j] * col(2, j, k)).sum();
                }
            }
        }
        let proj = lin(&ctx, wp, bp, d, d);
        let x1: Vec<f64> = xb.iter().zip(&proj).map(|(a, b)| a + b).collect();
        let h2 = rows_layer_norm(&x1, ln2g, ln2b, d);
        let m: Vec<f64> = lin(&h2, w1, b1, hidden, d).into_iter().map(gelu).collect();
        let m2 = lin(&m, w2, b2, d, hidden);
        out.extend(x1.iter().zip(&m2).map(|(a, b)| a + b));
    }
    out
}

fn cases() -> Vec<Case> {
    let mut v: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, $shapes:expr, $pos:expr, $op:expr, $oracle:expr) => {
            v.push(Case {
                name: $name,
                shapes: $shapes,
                positive: $pos,
                op: Box::new($op),
                oracle: Box::new($oracle),
            })
        };
    }
    let unary = |f: fn(f64) -> f64| move |x: &[Vec<f64>]| x[0].iter().map(|&v| f(v)).collect::<Vec<f64>>();
    case!("add", vec![vec![3, 4], vec![4]], false, |t, v| t.add(v[0], v[1]), |x| {
        x[0].iter().enumerate().map(|(i, a)| a + x[1][i % 4]).collect()
    });
    case!("sub", vec![vec![3, 4], vec![3, 1]], false, |t, v| t.sub(v[0], v[1]), |x| {
        x[0].iter().enumerate().map(|(i, a)| a - x[1][i / 4]).collect()
    });
    case!("mul", vec![vec![2, 3], vec![2, 3]], false, |t, v| t.mul(v[0], v[1]), |x| {
        x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()
    });
    case!("div", vec![vec![2, 3], vec![2, 3]], true, |t, v| t.div(v[0], v[1]), |x| {
        x[0].iter().zip(&x[1]).map(|(a, b)| a / b).collect()
    });
    case!("exp", vec![vec![7]], false, |t, v| t.exp(v[0]), unary(f64::exp));
    case!("log", vec![vec![7]], true, |t, v| t.log(v[0]), unary(f64::ln));
    case!("sqrt", vec![vec![7]], true, |t, v| t.sqrt(v[0]), unary(f64::sqrt));
    case!("square", vec![vec![7]], false, |t, v| t.square(v[0]), unary(|x| x * x));
    case!("tanh", vec![vec![7]], false, |t, v| t.tanh(v[0]), unary(f64::tanh));
    case!("sigmoid", vec![vec![7]], false, |t, v| t.sigmoid(v[0]), unary(|x| 1.0 / (1.0 + (-x).exp())));
    case!("gelu", vec![vec![7]], false, |t, v| t.gelu(v[0]), unary(gelu));
    case!("relu", vec![vec![7]], true, |t, v| t.relu(v[0]), unary(|x| x.max(0.0)));
    case!("matmul", vec![vec![3, 4], vec![4, 5]], false, |t, v| t.matmul(v[0], v[1]), |x| matmul(&x[0], &x[1], 3, 4, 5));
    case!("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], false, |t, v| t.bmm(v[0], v[1]), |x| {
        (0..2).flat_map(|b| matmul(&x[0][b * 12..(b + 1) * 12], &x[1][b * 8..(b + 1) * 8], 3, 4, 2)).collect()
    });
    case!(
        "linear",
        vec![vec![2, 3, 4], vec![5, 4], vec![5]],
        false,
        |t, v| t.linear(v[0], v[1], Some(v[2])),
        |x| {
            let y = matmul(&x[0], &transpose(&x[1], 5, 4), 6, 4, 5);
            y.iter().enumerate().map(|(i, a)| a + x[2][i % 5]).collect()
        }
    );
    case!(
        "conv2d",
        vec![vec![2, 3, 5, 5], vec![4, 3, 3, 3], vec![4]],
        false,
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        |x| {
            let (b, c, h, w, o, oh) = (2, 3, 5usize, 5usize, 4, 3);
            let mut out = vec![0.0; b * o * oh * oh];
            for bi in 0..b {
                for oc in 0..o {
                    for oy in 0..oh {
                        for ox in 0..oh {
                            let mut s = x[2][oc];
                            for ic in 0..c {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * 2 + ky) as i64 - 1;
                                        let ix = (ox * 2 + kx) as i64 - 1;
                                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                            s += x[0][((bi * c + ic) * h + iy as usize) * w + ix as usize]
                                                * x[1][((oc * c + ic) * 3 + ky) * 3 + kx];
                                        }
                                    }
                                }
                            }
                            out[((bi * o + oc) * oh + oy) * oh + ox] = s;
                        }
                    }
                }
            }
            out
        }
    );
    case!("softmax", vec![vec![3, 5]], false, |t, v| t.softmax(v[0]), |x| rows_softmax(&x[0], 5));
    case!("log_softmax", vec![vec![3, 5]], false, |t, v| t.log_softmax(v[0]), |x| {
        rows_softmax(&x[0], 5).into_iter().map(f64::ln).collect()
    });
    case!("l2_normalize", vec![vec![3, 4]], false, |t, v| t.l2_normalize(v[0]), |x| {
        x[0].chunks(4)
            .flat_map(|r| {
                let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
                r.iter().map(move |a| a / n).collect::<Vec<_>>()
            })
            .collect()
    });
    case!(
        "layer_norm",
        vec![vec![2, 3, 6], vec![6], vec![6]],
        false,
        |t, v| t.layer_norm(v[0], v[1], v[2], LN_EPS),
        |x| rows_layer_norm(&x[0], &x[1], &x[2], 6)
    );
    case!(
        "batch_norm_train",
        vec![vec![3, 2, 2, 2], vec![2], vec![2]],
        false,
        |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
        |x| {
            let mut out = vec![0.0; 24];
            for c in 0..2 {
                let idx: Vec<usize> = (0..3).flat_map(|b| (0..4).map(move |p| (b * 2 + c) * 4 + p)).collect();
                let mu = idx.iter().map(|&i| x[0][i]).sum::<f64>() / 12.0;
                let var = idx.iter().map(|&i| (x[0][i] - mu).powi(2)).sum::<f64>() / 12.0;
                for &i in &idx {
                    out[i] = (x[0][i] - mu) / (var + 1e-5).sqrt() * x[1][c] + x[2][c];
                }
            }
            out
        }
    );
    case!("mse", vec![vec![2, 3], vec![2, 3]], false, |t, v| t.mse(v[0], v[1]), |x| {
        vec![x[0].iter().zip(&x[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 6.0]
    });
    case!("cross_entropy", vec![vec![3, 4]], false, |t, v| t.cross_entropy(v[0], &[2, 0, 3]), |x| {
        let p = rows_softmax(&x[0], 4);
        vec![-(p[2].ln() + p[4].ln() + p[11].ln()) / 3.0]
    });
    case!("sum_axes", vec![vec![2, 3, 4]], false, |t, v| t.sum_axes(v[0], &[1]), |x| {
        (0..2).flat_map(|a| (0..4).map(move |c| (a, c))).map(|(a, c)| (0..3).map(|b| x[0][(a * 3 + b) * 4 + c]).sum()).collect()
    });
    case!("mean_axes", vec![vec![2, 3, 4]], false, |t, v| t.mean_axes(v[0], &[0, 2]), |x| {
        (0..3).map(|b| (0..2).flat_map(|a| (0..4).map(move |c| (a, c))).map(|(a, c)| x[0][(a * 3 + b) * 4 + c]).sum::<f64>() / 8.0).collect()
    });
    case!("var_axes", vec![vec![2, 5]], false, |t, v| t.var_axes(v[0], &[1]), |x| {
        x[0].chunks(5)
            .map(|r| {
                let m = r.iter().sum::<f64>() / 5.0;
                r.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 5.0
            })
            .collect()
    });
    case!("permute", vec![vec![2, 3, 4]], false, |t, v| t.permute(v[0], &[2, 0, 1]), |x| {
        let mut out = Vec::new();
        for c in 0..4 {
            for a in 0..2 {
                for b in 0..3 {
                    out.push(x[0][(a * 3 + b) * 4 + c]);
                }
            }
        }
        out
    });
    case!("narrow", vec![vec![2, 5]], false, |t, v| t.narrow(v[0], 1, 1, 3), |x| {
        x[0].chunks(5).flat_map(|r| r[1..4].to_vec()).collect()
    });
    case!("concat", vec![vec![2, 2], vec![2, 3]], false, |t, v| t.concat(&[v[0], v[1]], 1), |x| {
        (0..2).flat_map(|r| [&x[0][r * 2..r * 2 + 2], &x[1][r * 3..r * 3 + 3]].concat()).collect()
    });
    case!("index_select", vec![vec![4, 3]], false, |t, v| t.index_select(v[0], 0, &[3, 0, 3]), |x| {
        [3usize, 0, 3].iter().flat_map(|&r| x[0][r * 3..r * 3 + 3].to_vec()).collect()
    });
    case!("gather_tokens", vec![vec![2, 3, 4]], false, |t, v| t.gather_tokens(v[0], &[2, 0]), |x| {
        [x[0][8..12].to_vec(), x[0][12..16].to_vec()].concat()
    });
    case!("bilinear_resize", vec![vec![1, 2, 3, 4]], false, |t, v| t.bilinear_resize(v[0], 5, 3), |x| {
        let mut out = Vec::new();
        for c in 0..2 {
            for y in 0..5 {
                for xx in 0..3 {
                    let (y0, y1, ly) = bilinear_taps(y, 3, 5);
                    let (x0, x1, lx) = bilinear_taps(xx, 4, 3);
                    let p = |yy: usize, xq: usize| x[0][c * 12 + yy * 4 + xq];
                    out.push(
                        (1.0 - ly) * ((1.0 - lx) * p(y0, x0) + lx * p(y0, x1)) + ly * ((1.0 - lx) * p(y1, x0) + lx * p(y1, x1)),
                    );
                }
            }
        }
        out
    });
    for causal in [false, true] {
        let (t_len, d, hidden) = (3usize, 4usize, 6usize);
        case!(
            if causal { "attention_block_causal" } else { "attention_block" },
            vec![
                vec![2, t_len, d],
                vec![d],
                vec![d],
                vec![3 * d, d],
                vec![3 * d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![hidden, d],
                vec![hidden],
                vec![d, hidden],
                vec![d]
            ],
            false,
            move |t, v| {
                let w = BlockWeights {
                    ln1: (v[1], v[2]),
                    qkv: (v[3], v[4]),
                    proj: (v[5], v[6]),
                    ln2: (v[7], v[8]),
                    fc1: (v[9], v[10]),
                    fc2: (v[11], v[12]),
                };
                Ok(t.attention_block(v[0], &w, 2, causal)?.out)
            },
            move |x| attention_oracle(&x[0], &x[1..], t_len, d, 2, causal)
        );
    }
    v
}

fn draw(shape: &[usize], positive: bool, rng: &mut Prng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if positive {
                rng.uniform_range(0.5, 1.5)
            } else {
                // keep clear of the ReLU / rounding kinks
                let v = rng.normal();
                if v.abs() < 0.05 {
                    v + 0.1
                } else {
                    v
                }
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn criterion_1() -> Verdict {
    let mut worst_grad = 0.0f64;
    let mut worst_fwd = 0.0f64;
    let mut failures = Vec::new();
    let cases = cases();
    for c in &cases {
        for seed in 0..5u64 {
            let mut rng = SeedStream::new(seed).fork(c.name).rng();
            let inputs: Vec<Tensor> = c.shapes.iter().map(|s| draw(s, c.positive, &mut rng)).collect();
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let got = (c.op)(&mut tape, &vars).unwrap();
            let want = (c.oracle)(&inputs.iter().map(f64s).collect::<Vec<_>>());
            let got = tape.value(got);
            let fwd = if got.numel() != want.len() {
                f64::INFINITY
            } else {
                got.data().iter().zip(&want).map(|(a, b)| (*a as f64 - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max)
            };
            worst_fwd = worst_fwd.max(fwd);
            let grad = gradient_errors(&inputs, &vec![true; inputs.len()], |t, v| (c.op)(t, v))
                .unwrap()
                .into_iter()
                .fold(0.0, f64::max);
            worst_grad = worst_grad.max(grad);
            if std::env::var_os("CLIPQ_ACCEPTANCE_VERBOSE").is_some() {
                eprintln!("  {} seed {seed}: fwd {fwd:.1e} grad {grad:.1e}", c.name);
            }
            if fwd > 1e-5 || grad >= FD_TOL {
                failures.push(format!("{} seed {seed}: fwd {fwd:.1e} grad {grad:.1e}", c.name));
            }
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "{} ops x 5 seeds, max forward err {worst_fwd:.1e} (<= 1e-5, relative above 1), max FD rel err {worst_grad:.1e} (< {FD_TOL}, h = {FD_STEP}){}",
            cases.len(),
            if failures.is_empty() { String::new() } else { format!("; failures: {failures:?}") }
        ),
    )
}

fn eq1_oracle(x: f32, s: f32, z: i32, bits: u8) -> i32 {
    // round half away from zero, written out
    let r = x / s;
    let rounded = if r >= 0.0 { (r + 0.5).floor() } else { -((-r + 0.5).floor()) };
    ((rounded as i64 + z as i64).clamp(0, qmax(bits) as i64)) as i32
}

pub fn criterion_2() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |cond: bool, what: String| {
        if !cond {
            ok = false;
            notes.push(what);
        }
    };
    let mut minmax_margin = f64::INFINITY;
    for seed in 0..100u64 {
        let mut rng = SeedStream::new(seed).fork("quant-suite").rng();
        let bits = [2u8, 3, 4, 6, 8][seed as usize % 5];
        let shift = rng.uniform_range(-1.0, 1.0);
        let spread = rng.uniform_range(0.1, 3.0);
        let x = Tensor::new(
            [4, 16],
            (0..64).map(|i| (rng.normal() * spread * (1.0 + (i / 16) as f32)) + shift).collect::<Vec<f32>>(),
        )
        .unwrap();
        let lo = x.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = x.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let p = QuantParams::from_ranges(&[lo], &[hi], bits, Granularity::PerTensor).unwrap();
        let (s, z) = (p.scale()[0], p.zero_point()[0]);
        // quantize / dequantize elementwise
        let q = quantize(&x, &p).unwrap();
        let xh = dequantize(&q);
        for (i, &v) in x.data().iter().enumerate() {
            let code = eq1_oracle(v, s, z, bits);
            check(q.codes()[i] as i32 == code, format!("seed {seed}: code {i}"));
            check(xh.data()[i] == s * (code - z) as f32, format!("seed {seed}: dequant {i}"));
            let in_range = v >= -s * z as f32 && v <= s * (qmax(bits) - z) as f32;
            if in_range {
                check((xh.data()[i] - v).abs() <= s / 2.0 + 1e-6 + f32::EPSILON * v.abs(), format!("seed {seed}: roundtrip {i}"));
            }
        }
        // idempotence
        let once = fake_quant_tensor(&x, &p).unwrap();
        let twice = fake_quant_tensor(&once, &p).unwrap();
        check(once == twice, format!("seed {seed}: idempotence"));
        // OMSE vs min-max and exhaustive candidate grid
        let om = omse_init(&x, bits, Granularity::PerTensor).unwrap();
        let om_mse = quant_mse(&x, &om.params).unwrap();
        let mm_mse = quant_mse(&x, &p).unwrap();
        minmax_margin = minmax_margin.min(mm_mse - om_mse);
        check(om_mse <= mm_mse + 1e-12, format!("seed {seed}: omse {om_mse} > minmax {mm_mse}"));
        let best = (0..OMSE_CANDIDATES)
            .map(|i| {
                let a = 1.0 - i as f32 / OMSE_CANDIDATES as f32;
                omse_mse_for_range(x.data(), a * lo, a * hi, bits).2
            })
            .fold(f64::INFINITY, f64::min);
        check((om.mse[0] - best).abs() <= 1e-9, format!("seed {seed}: grid {} vs {best}", om.mse[0]));
        // per-channel never worse
        let pc = omse_init(&x, bits, Granularity::PerChannel { axis: 0 }).unwrap();
        let pc_mse = quant_mse(&x, &pc.params).unwrap();
        check(pc_mse <= om_mse + 1e-12, format!("seed {seed}: per-channel {pc_mse} > per-tensor {om_mse}"));
    }
    Verdict::new(
        ok,
        format!(
            "100 tensors: quantize/dequantize oracle, roundtrip <= s/2, idempotence, OMSE <= min-max (min margin {minmax_margin:.2e}), grid search within 1e-9, per-channel <= per-tensor{}",
            if notes.is_empty() { String::new() } else { format!("; failures: {:?}", &notes[..notes.len().min(5)]) }
        ),
    )
}

fn unit_rows(n: usize, d: usize, rng: &mut Prng) -> Tensor {
    let mut t = Tensor::randn([n, d], rng);
    for r in t.data_mut().chunks_mut(d) {
        let norm = r.iter().map(|v| v * v).sum::<f32>().sqrt();
        r.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn ce_oracle(logits: &[Vec<f64>]) -> f64 {
    logits
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - r[i]
        })
        .sum::<f64>()
        / logits.len() as f64
}

fn dots(a: &Tensor, b: &Tensor, tau: f64) -> Vec<Vec<f64>> {
    let d = a.shape()[1];
    a.data()
        .chunks(d)
        .map(|r| b.data().chunks(d).map(|c| r.iter().zip(c).map(|(x, y)| (x * y) as f64).sum::<f64>() / tau).collect())
        .collect()
}

fn eval_loss(f: impl Fn(&mut Tape, &[Var]) -> clipq_core::Result<Var>, xs: &[&Tensor]) -> f64 {
    let mut t = Tape::new();
    let v: Vec<Var> = xs.iter().map(|x| t.constant((*x).clone())).collect();
    let out = f(&mut t, &v).unwrap();
    t.value(out).item() as f64
}

pub fn criterion_3() -> Verdict {
    let tau = 0.1f32;
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = SeedStream::new(seed).fork("loss-identities").rng();
        let n = 2 + rng.int_range(0, 6);
        let (f, t, b) = (unit_rows(n, 12, &mut rng), unit_rows(n, 12, &mut rng), unit_rows(n, 12, &mut rng));
        let nce = eval_loss(|tp, v| infonce_loss(tp, v[0], v[1], tau), &[&f, &t]);
        let scg = eval_loss(|tp, v| scg_loss(tp, v[0], v[1], v[2], tau), &[&f, &t, &b]);
        let nce_o = ce_oracle(&dots(&f, &t, tau as f64));
        let mut joint = dots(&f, &t, tau as f64);
        for (row, extra) in joint.iter_mut().zip(dots(&f, &b, tau as f64)) {
            row.extend(extra);
        }
        let scg_o = ce_oracle(&joint);
        // background logits masked out of the denominator
        let mut mask = vec![0.0f32; n * 2 * n];
        for r in 0..n {
            mask[r * 2 * n + n..(r + 1) * 2 * n].fill(-1e30);
        }
        let mask = Tensor::new([n, 2 * n], mask).unwrap();
        let masked = eval_loss(
            |tp, v| {
                let l = scg_logits(tp, v[0], v[1], v[2], tau)?;
                let l = tp.add_const(l, mask.clone())?;
                tp.cross_entropy(l, &(0..n).collect::<Vec<_>>())
            },
            &[&f, &t, &b],
        );
        // uniform logits: identical rows everywhere
        let same = Tensor::full([n, 12], 1.0 / 12f32.sqrt());
        let u_nce = eval_loss(|tp, v| infonce_loss(tp, v[0], v[1], tau), &[&same, &same]);
        let u_scg = eval_loss(|tp, v| scg_loss(tp, v[0], v[1], v[2], tau), &[&same, &same, &same]);
        for e in [
            (nce - nce_o).abs(),
            (scg - scg_o).abs(),
            (masked - nce).abs(),
            (u_nce - (n as f64).ln()).abs(),
            (u_scg - (2.0 * n as f64).ln()).abs(),
        ] {
            worst = worst.max(e);
        }
    }
    Verdict::new(
        worst <= 1e-6,
        format!("100 instances: masked SCG = InfoNCE, uniform = ln N / ln 2N, CE oracles; max abs err {worst:.1e} (<= 1e-6)"),
    )
}
