use super::{Tape, Tensor, Var};
use crate::error::{dim_err, Result};

/// `|a - b| / max(1e-12, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-12)
}

/// How a derivative is estimated from function values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FiniteDiff {
    /// `(f(h) - f(-h)) / 2h`.
    Central(f64),
    /// Central differences at steps from `max` down to `min`, a factor
    /// `sqrt(10)` apart. Returns the smaller-step estimate of the adjacent
    /// pair that agrees most closely, so the step is large enough to clear
    /// roundoff and small enough to stay off kinks.
    Plateau { max: f64, min: f64 },
}

impl From<f64> for FiniteDiff {
    fn from(h: f64) -> Self {
        FiniteDiff::Central(h)
    }
}

impl FiniteDiff {
    /// Derivative at 0 of `f`, where `f(d)` is the function at offset `d`.
    pub fn derivative(self, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        let mut central = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
        match self {
            FiniteDiff::Central(h) => central(h),
            FiniteDiff::Plateau { max, min } => {
                let step = 10f64.sqrt();
                let mut h = max;
                let mut prev = central(h)?;
                let mut best = (f64::INFINITY, prev);
                while h / step >= min * (1.0 - 1e-9) {
                    h /= step;
                    let cur = central(h)?;
                    let gap = (cur - prev).abs();
                    if gap < best.0 {
                        best = (gap, cur);
                    }
                    prev = cur;
                }
                Ok(best.1)
            }
        }
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, coordinate by coordinate, over every input. Returns the
/// largest [`relative_error`].
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().numel() != 1 {
            return dim_err("grad_check needs a scalar-valued function");
        }
        Ok(out.scalar())
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone().with_requires_grad(true))).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").to_vec();
        for (j, &g_ad) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let g_fd = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(g_ad, g_fd));
        }
    }
    Ok(worst)
}

pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
