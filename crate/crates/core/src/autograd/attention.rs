//! Pre-norm transformer block: `x + proj(attn(ln1(x)))`, then `+ fc2(gelu(fc1(ln2(x))))`.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter handles of one block. Linear weights are `[out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct BlockWeights {
    pub ln1: (Var, Var),
    pub qkv: (Var, Var),
    pub proj: (Var, Var),
    pub ln2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

/// The four projections of a block, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockLinear {
    Qkv,
    Proj,
    Fc1,
    Fc2,
}

impl BlockLinear {
    pub const ALL: [BlockLinear; 4] = [Self::Qkv, Self::Proj, Self::Fc1, Self::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            Self::Qkv => "attn.qkv",
            Self::Proj => "attn.proj",
            Self::Fc1 => "mlp.fc1",
            Self::Fc2 => "mlp.fc2",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub out: Var,
    /// Attention probabilities `[B, heads, T, T]`.
    pub attn: Var,
}

pub const LN_EPS: f32 = 1e-5;

/// Signature of the projection callback: `(tape, which, x, weight, bias)`.
pub type LinearFn<'a> = dyn FnMut(&mut Tape, BlockLinear, Var, Var, Var) -> Result<Var> + 'a;

impl Tape {
    pub fn attention_block(&mut self, x: Var, w: &BlockWeights, heads: usize, causal: bool) -> Result<BlockOutput> {
        self.attention_block_with(x, w, heads, causal, &mut |t, _, x, w, b| t.linear(x, w, Some(b)))
    }

    /// Like [`Tape::attention_block`] but routes every projection through `linear`.
    pub fn attention_block_with(
        &mut self,
        x: Var,
        w: &BlockWeights,
        heads: usize,
        causal: bool,
        linear: &mut LinearFn<'_>,
    ) -> Result<BlockOutput> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("attention_block", format!("input {s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention_block",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;

        let h = self.layer_norm(x, w.ln1.0, w.ln1.1, LN_EPS)?;
        let qkv = linear(self, BlockLinear::Qkv, h, w.qkv.0, w.qkv.1)?;
        let qkv = self.reshape(qkv, &[b, t, 3, heads, dh])?;
        let qkv = self.permute(qkv, &[2, 0, 3, 1, 4])?; // [3, B, H, T, dh]
        let mut parts = [x; 3];
        for (i, p) in parts.iter_mut().enumerate() {
            let n = self.narrow(qkv, 0, i, 1)?;
            *p = self.reshape(n, &[b, heads, t, dh])?;
        }
        let [q, k, v] = parts;
        let kt = self.transpose_last(k)?;
        let scores = self.bmm(q, kt)?;
        let mut scores = self.scale(scores, 1.0 / (dh as f32).sqrt())?;
        if causal {
            let mut mask = Tensor::zeros([t, t]);
            for i in 0..t {
                for j in i + 1..t {
                    mask.data_mut()[i * t + j] = -1e9;
                }
            }
            scores = self.add_const(scores, mask)?;
        }
        let attn = self.softmax(scores)?;
        let ctx = self.bmm(attn, v)?;
        let ctx = self.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.reshape(ctx, &[b, t, d])?;
        let o = linear(self, BlockLinear::Proj, ctx, w.proj.0, w.proj.1)?;
        let x = self.add(x, o)?;

        let h = self.layer_norm(x, w.ln2.0, w.ln2.1, LN_EPS)?;
        let h = linear(self, BlockLinear::Fc1, h, w.fc1.0, w.fc1.1)?;
        let h = self.gelu(h)?;
        let h = linear(self, BlockLinear::Fc2, h, w.fc2.0, w.fc2.1)?;
        let out = self.add(x, h)?;
        Ok(BlockOutput { out, attn })
    }
}
