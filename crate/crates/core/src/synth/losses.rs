//! Contrastive and smoothness objectives for image synthesis.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

fn check_tau(tau: f32) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature {tau} must be positive")))
    }
}

/// `-(1/N) Σ_i log softmax_j(I_i·T_j / τ)[i]` for row-normalized `I, T: [N, D]`.
pub fn infonce_loss(tape: &mut Tape, img: Var, txt: Var, tau: f32) -> Result<Var> {
    check_tau(tau)?;
    let n = tape.shape(img)[0];
    let tt = tape.transpose_last(txt)?;
    let sim = tape.matmul(img, tt)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    tape.cross_entropy(logits, &(0..n).collect::<Vec<_>>())
}

/// Foreground-text positives against a pooled 2N-term denominator of
/// foreground-text and foreground-background similarities.
pub fn scg_loss(tape: &mut Tape, fg: Var, txt: Var, bg: Var, tau: f32) -> Result<Var> {
    let n = tape.shape(fg)[0];
    let logits = scg_logits(tape, fg, txt, bg, tau)?;
    tape.cross_entropy(logits, &(0..n).collect::<Vec<_>>())
}

/// `[N, 2N]` logits of the structural loss: foreground-text columns first,
/// then foreground-background.
pub fn scg_logits(tape: &mut Tape, fg: Var, txt: Var, bg: Var, tau: f32) -> Result<Var> {
    check_tau(tau)?;
    let tt = tape.transpose_last(txt)?;
    let ft = tape.matmul(fg, tt)?;
    let bt = tape.transpose_last(bg)?;
    let fb = tape.matmul(fg, bt)?;
    let sim = tape.concat(&[ft, fb], 1)?;
    tape.scale(sim, 1.0 / tau)
}

/// Squared anisotropic total variation: mean squared horizontal forward
/// difference plus mean squared vertical forward difference.
pub fn tv_loss(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::shape("tv_loss", format!("{s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let right = tape.narrow(x, 3, 1, w - 1)?;
    let left = tape.narrow(x, 3, 0, w - 1)?;
    let dx = tape.sub(right, left)?;
    let dx = tape.square(dx)?;
    let dx = tape.mean(dx)?;
    let down = tape.narrow(x, 2, 1, h - 1)?;
    let up = tape.narrow(x, 2, 0, h - 1)?;
    let dy = tape.sub(down, up)?;
    let dy = tape.square(dy)?;
    let dy = tape.mean(dy)?;
    tape.add(dx, dy)
}
