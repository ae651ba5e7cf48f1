//! Finite-difference gradient checking.
//!
//! The harness scalarizes arbitrary-shaped outputs through a fixed
//! random projection, compares tape gradients against central
//! differences at sampled coordinates, and reports the worst relative
//! error. Inputs marked `requires_grad` are the ones probed; inputs
//! left unmarked (class targets, attention masks) are held fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

/// Result of one operator check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub op: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Central difference of a scalar function at one input coordinate,
/// with step size scaled to the coordinate's magnitude.
pub fn numerical_grad<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    input_idx: usize,
    elem_idx: usize,
) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let x = inputs[input_idx].data()[elem_idx];
    let h = 1e-5 * x.abs().max(1.0);
    let mut plus = inputs.to_vec();
    plus[input_idx].data_mut()[elem_idx] = x + h;
    let mut minus = inputs.to_vec();
    minus[input_idx].data_mut()[elem_idx] = x - h;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * h))
}

/// Compare tape gradients of `build` against finite differences at
/// `points` sampled coordinates of the grad-marked inputs.
pub fn check_gradients<F>(
    op: &str,
    inputs: &[Tensor<f64>],
    points: usize,
    seed: u64,
    tolerance: f64,
    build: F,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let checkable: Vec<usize> = inputs
        .iter()
        .enumerate()
        .filter(|(_, t)| t.requires_grad)
        .map(|(i, _)| i)
        .collect();
    if checkable.is_empty() {
        return Err(TensorError::InvalidAttr(format!(
            "gradient check of {op} has no grad-marked inputs"
        )));
    }

    // Analytic pass: project the output with fixed random weights so a
    // single scalar exercises every output element.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let numel: usize = out_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let proj_t = Tensor::from_vec(out_shape.clone(), proj.clone())?;
    let pv = tape.constant(proj_t);
    let weighted = tape.mul(out, pv)?;
    let mean = tape.mean_all(weighted)?;
    let loss = tape.scale(mean, numel as f64)?;
    let grads = tape.backward(loss)?;

    let scalar_fn = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs
            .iter()
            .map(|x| {
                let mut plain = x.clone();
                plain.requires_grad = false;
                t.leaf(plain)
            })
            .collect();
        let o = build(&mut t, &vs)?;
        let val = t.value(o);
        Ok(val
            .data()
            .iter()
            .zip(proj.iter())
            .map(|(&y, &w)| y * w)
            .sum())
    };

    let mut max_rel_err = 0.0f64;
    for _ in 0..points {
        let ii = checkable[rng.gen_range(0..checkable.len())];
        let ei = rng.gen_range(0..inputs[ii].numel());
        let numeric = numerical_grad(&scalar_fn, inputs, ii, ei)?;
        let analytic = grads.wrt(vars[ii]).map_or(0.0, |g| g.data()[ei]);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        if rel > max_rel_err {
            max_rel_err = rel;
        }
    }
    Ok(CheckOutcome {
        op: op.to_string(),
        points,
        max_rel_err,
        tolerance,
    })
}
