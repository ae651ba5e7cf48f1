//! Fused Dice + cross-entropy training loss over two-channel logits.
//!
//! The two-channel softmax foreground probability collapses to
//! sigmoid(z1 - z0), so the kernel works on the logit difference with the
//! stable softplus form of cross-entropy. Dice is smoothed per item and
//! averaged over the batch; cross-entropy is averaged over all pixels.
//! One fused operator with a hand-derived backward avoids materializing
//! the intermediate probability graph on the tape.

use std::rc::Rc;

use crate::tensor::{CustomOp, Elem, SavedCtx, Tape, Tensor, TensorError, Var};

use super::MetricsError;

/// Smoothing added to Dice numerator and denominator, making the
/// empty-prediction/empty-target case a zero-loss term.
pub const DICE_EPS: f64 = 1e-5;

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn dims(logits: &[usize], target: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match (logits, target) {
        ([b, 2, h, w], [tb, th, tw]) if b == tb && h == th && w == tw => Ok((*b, *h, *w)),
        _ => Err(TensorError::ShapeMismatch(format!(
            "dice_ce_loss wants logits [B,2,H,W] with target [B,H,W], got {logits:?} and {target:?}"
        ))),
    }
}

/// Fused loss kernel. Inputs: `[logits, target]`; target receives no
/// gradient. Saved context: foreground probabilities plus per-item Dice
/// sums, so backward never re-derives the forward reductions.
pub struct DiceCeLoss;

impl<T: Elem> CustomOp<T> for DiceCeLoss {
    fn name(&self) -> &'static str {
        "dice_ce_loss"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, SavedCtx<T>), TensorError> {
        let [logits, target] = inputs else {
            return Err(TensorError::InvalidAttr(
                "dice_ce_loss takes exactly two inputs".into(),
            ));
        };
        let (b, h, w) = dims(logits.shape(), target.shape())?;
        let plane = h * w;
        let ld = logits.data();
        let td = target.data();

        let mut probs = vec![T::zero(); b * plane];
        let mut ce_sum = 0.0f64;
        // Per item: foreground-probability sum, overlap sum, target sum.
        let mut sums = Vec::with_capacity(3 * b);
        for bi in 0..b {
            let base = bi * 2 * plane;
            let (mut s_p, mut s_pg, mut s_g) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..plane {
                let z0 = ld[base + i].to_f64_lossy();
                let z1 = ld[base + plane + i].to_f64_lossy();
                let g = td[bi * plane + i].to_f64_lossy();
                let u = z1 - z0;
                let p = sigmoid(u);
                ce_sum += softplus(u) - g * u;
                s_p += p;
                s_pg += p * g;
                s_g += g;
                probs[bi * plane + i] = T::from_f64_lossy(p);
            }
            sums.push(s_pg);
            sums.push(s_p);
            sums.push(s_g);
        }

        let mut dice_sum = 0.0f64;
        for bi in 0..b {
            let (s_pg, s_p, s_g) = (sums[3 * bi], sums[3 * bi + 1], sums[3 * bi + 2]);
            dice_sum += 1.0 - (2.0 * s_pg + DICE_EPS) / (s_p + s_g + DICE_EPS);
        }
        let loss = ce_sum / (b * plane) as f64 + dice_sum / b as f64;

        let ctx = SavedCtx {
            tensors: vec![Tensor::from_vec(vec![b, h, w], probs)?],
            scalars: sums,
            ints: vec![b, h, w],
        };
        Ok((Tensor::scalar(T::from_f64_lossy(loss)), ctx))
    }

    fn backward(
        &self,
        ctx: &SavedCtx<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, TensorError> {
        let target = inputs[1];
        let probs = &ctx.tensors[0];
        let (b, h, w) = (ctx.ints[0], ctx.ints[1], ctx.ints[2]);
        let plane = h * w;
        let g0 = grad_out.data()[0].to_f64_lossy();
        let pixel_scale = 1.0 / (b * plane) as f64;
        let item_scale = 1.0 / b as f64;

        let mut grad = vec![T::zero(); b * 2 * plane];
        for bi in 0..b {
            let (s_pg, s_p, s_g) = (
                ctx.scalars[3 * bi],
                ctx.scalars[3 * bi + 1],
                ctx.scalars[3 * bi + 2],
            );
            let num = 2.0 * s_pg + DICE_EPS;
            let denom = s_p + s_g + DICE_EPS;
            let base = bi * 2 * plane;
            for i in 0..plane {
                let p = probs.data()[bi * plane + i].to_f64_lossy();
                let g = target.data()[bi * plane + i].to_f64_lossy();
                // d(1 - num/denom)/dp = -(2g*denom - num) / denom^2.
                let d_dice_dp = -(2.0 * g * denom - num) / (denom * denom);
                let du = g0 * ((p - g) * pixel_scale + item_scale * d_dice_dp * p * (1.0 - p));
                grad[base + plane + i] = T::from_f64_lossy(du);
                grad[base + i] = T::from_f64_lossy(-du);
            }
        }
        Ok(vec![Some(Tensor::from_vec(vec![b, 2, h, w], grad)?), None])
    }
}

/// Validates shapes and the binary target invariant, then records the
/// fused loss node. The target stays a constant; only logits flow
/// gradient.
pub fn dice_ce_loss<T: Elem>(
    tape: &mut Tape<T>,
    logits: Var,
    target: Var,
) -> Result<Var, MetricsError> {
    dims(tape.shape(logits), tape.shape(target))?;
    let binary = tape.value(target).data().iter().all(|v| {
        let f = v.to_f64_lossy();
        f == 0.0 || f == 1.0
    });
    if !binary {
        return Err(MetricsError::NonBinaryTarget);
    }
    Ok(tape.custom(Rc::new(DiceCeLoss), &[logits, target])?)
}
