//! Central finite-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Precision, Tape, Var};

/// One-sided slopes further apart than this mark a probe that crosses a
/// non-differentiable point.
const KINK_THRESHOLD: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, 1e-6)`. The floor keeps near-zero gradients,
/// whose central differences are dominated by cancellation error at
/// `eps = 1e-5`, from reporting noise as relative error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Max relative error between backward() and central differences of a scalar
/// function of one tensor, over every element of `x`. Runs in 64-bit.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_many(|t, xs| f(t, xs[0]), std::slice::from_ref(x), eps)
}

/// [`gradcheck`] over several inputs at once.
pub fn gradcheck_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, xs, eps, None)
}

/// [`gradcheck_many`] restricted to at most `max_per_input` seeded element
/// positions per input; used for inputs too large to probe exhaustively.
pub fn gradcheck_sampled<F>(f: F, xs: &[Tensor], eps: f64, max_per_input: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, xs, eps, Some((max_per_input, seed)))
}

fn eval<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck: function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

fn check<F>(f: F, xs: &[Tensor], eps: f64, sampling: Option<(usize, u64)>) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);

    let base = eval(&f, xs)?;
    let mut rng = sampling.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (which, x) in xs.iter().enumerate() {
        let positions: Vec<usize> = match (&mut rng, sampling) {
            (Some(rng), Some((max, _))) if x.numel() > max => {
                let mut p = sample(rng, x.numel(), max).into_vec();
                p.sort_unstable();
                p
            }
            _ => (0..x.numel()).collect(),
        };
        for e in positions {
            let orig = x.data()[e];
            probe[which].data_mut()[e] = orig + eps;
            let plus = eval(&f, &probe)?;
            probe[which].data_mut()[e] = orig - eps;
            let minus = eval(&f, &probe)?;
            probe[which].data_mut()[e] = orig;
            let a = analytic[which].data()[e];
            let mut err = relative_error(a, (plus - minus) / (2.0 * eps));
            // The one-sided slopes disagree only when a relu or bilinear kink
            // lies inside [x − eps, x + eps]; the backward pass then has to
            // match the slope on the side of x.
            let (right, left) = ((plus - base) / eps, (base - minus) / eps);
            if relative_error(right, left) > KINK_THRESHOLD {
                err = err.min(relative_error(a, right)).min(relative_error(a, left));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
