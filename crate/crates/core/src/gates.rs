//! Channel-wise gates for the carry between feature groups.
//!
//! All three squeeze their inputs by spatial averaging and end in a sigmoid:
//!
//! * SCG:  `a = sigmoid(W^T avg(y))`, `W: C x C`
//! * MCG:  `a = sigmoid(W^T [avg(y) ; avg(x)])`, `W: 2C x C`
//! * MLCG: `a = sigmoid(W3^T [relu(W1^T avg(y)) ; relu(W2^T avg(x))])`,
//!   `W1, W2: C x C/r`, `W3: 2C/r x C`
//!
//! `y` is the group being carried and `x` the group it is added to. The
//! concatenation order is always `[y-branch ; x-branch]`. Gate layers carry no bias.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::layers::{Dense, Mode, Module, Param, Session};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateKind {
    Scg,
    Mcg,
    Mlcg,
}

impl GateKind {
    pub const ALL: [GateKind; 3] = [GateKind::Scg, GateKind::Mcg, GateKind::Mlcg];

    pub fn name(self) -> &'static str {
        match self {
            GateKind::Scg => "scg",
            GateKind::Mcg => "mcg",
            GateKind::Mlcg => "mlcg",
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scg" => Ok(GateKind::Scg),
            "mcg" => Ok(GateKind::Mcg),
            "mlcg" => Ok(GateKind::Mlcg),
            other => Err(Error::Config(format!("unknown gate kind `{other}`"))),
        }
    }
}

/// Per-channel gate values, each strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector<T>(Vec<T>);

impl<T: Real> GateVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().all(|&v| v > T::zero() && v < T::one()) {
            Ok(Self(values))
        } else {
            Err(Error::Dimension("gate values must lie in (0, 1)".into()))
        }
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Learnable scalars in one gate over `channels` per group.
pub fn gate_param_count(kind: GateKind, channels: usize, reduction: usize) -> usize {
    let c = channels;
    match kind {
        GateKind::Scg => c * c,
        GateKind::Mcg => 2 * c * c,
        GateKind::Mlcg => {
            let latent = c / reduction.max(1);
            2 * c * latent + 2 * latent * c
        }
    }
}

/// Spatial average of a `[.., C, D, T]` map, giving `[.., C]`.
pub fn avg_pool_spatial<'t, T: Real>(y: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = y.shape();
    if shape.len() < 3 {
        return dim_err(format!("average pooling needs a C x D x T map, got {shape:?}"));
    }
    y.mean_over(&[shape.len() - 2, shape.len() - 1])
}

/// Plain-tensor spatial average.
pub fn avg_pool_tensor<T: Real>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    Ok(avg_pool_spatial(tape.constant(y.clone()))?.value())
}

#[derive(Clone, Debug)]
pub enum GateModule<T> {
    Scg { fc: Dense<T> },
    Mcg { fc: Dense<T> },
    Mlcg { fc1: Dense<T>, fc2: Dense<T>, fc3: Dense<T>, reduction: usize },
}

impl<T: Real> GateModule<T> {
    pub fn new(kind: GateKind, prefix: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let c = channels;
        Ok(match kind {
            GateKind::Scg => GateModule::Scg { fc: Dense::new(&format!("{prefix}.fc"), c, c, false, rng) },
            GateKind::Mcg => GateModule::Mcg { fc: Dense::new(&format!("{prefix}.fc"), 2 * c, c, false, rng) },
            GateKind::Mlcg => {
                if reduction == 0 || !c.is_multiple_of(reduction) {
                    return Err(Error::Config(format!(
                        "MLCG reduction ratio {reduction} must divide the group width {c}"
                    )));
                }
                let latent = c / reduction;
                GateModule::Mlcg {
                    fc1: Dense::new(&format!("{prefix}.fc1"), c, latent, false, rng),
                    fc2: Dense::new(&format!("{prefix}.fc2"), c, latent, false, rng),
                    fc3: Dense::new(&format!("{prefix}.fc3"), 2 * latent, c, false, rng),
                    reduction,
                }
            }
        })
    }

    pub fn kind(&self) -> GateKind {
        match self {
            GateModule::Scg { .. } => GateKind::Scg,
            GateModule::Mcg { .. } => GateKind::Mcg,
            GateModule::Mlcg { .. } => GateKind::Mlcg,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            GateModule::Scg { fc } | GateModule::Mcg { fc } => fc.outputs(),
            GateModule::Mlcg { fc3, .. } => fc3.outputs(),
        }
    }

    /// Gate for the carry of `y` (the previous group's output) into the group
    /// whose input is `x_next`. Both are `[.., C, D, T]`; the result is `[.., C]`.
    pub fn forward<'t>(&self, s: &mut Session<'t, T>, y: Var<'t, T>, x_next: Var<'t, T>) -> Result<Var<'t, T>> {
        let (ys, xs) = (y.shape(), x_next.shape());
        let c = self.channels();
        if ys.len() < 3 || ys[ys.len() - 3] != c {
            return dim_err(format!("gate over {c} channels got group {ys:?}"));
        }
        let pooled_y = avg_pool_spatial(y)?;
        let last = pooled_y.shape().len() - 1;
        let pooled_x = || -> Result<Var<'t, T>> {
            if xs.len() != ys.len() || xs[..xs.len() - 2] != ys[..ys.len() - 2] {
                return dim_err(format!("gate groups disagree: {ys:?} vs {xs:?}"));
            }
            avg_pool_spatial(x_next)
        };
        let logits = match self {
            GateModule::Scg { fc } => fc.forward(s, pooled_y)?,
            GateModule::Mcg { fc } => {
                let joint = Var::concat(&[pooled_y, pooled_x()?], last)?;
                fc.forward(s, joint)?
            }
            GateModule::Mlcg { fc1, fc2, fc3, .. } => {
                let l1 = fc1.forward(s, pooled_y)?.relu();
                let l2 = fc2.forward(s, pooled_x()?)?.relu();
                let joint = Var::concat(&[l1, l2], last)?;
                fc3.forward(s, joint)?
            }
        };
        Ok(logits.sigmoid())
    }

    /// Plain-tensor gate over `[.., C, D, T]` maps; returns `[.., C]`.
    pub fn evaluate(&self, y: &Tensor<T>, x_next: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let mut s = Session::new(&tape, Mode::Eval);
        let (y, x) = (tape.constant(y.clone()), tape.constant(x_next.clone()));
        Ok(self.forward(&mut s, y, x)?.value())
    }

    fn single(&self, kind: GateKind, y: &Tensor<T>, x_next: &Tensor<T>) -> Result<GateVector<T>> {
        if self.kind() != kind {
            return Err(Error::Config(format!("{} gate called on a {} module", kind, self.kind())));
        }
        if y.rank() != 3 {
            return dim_err(format!("expected one C x D x T group, got {:?}", y.shape()));
        }
        GateVector::new(self.evaluate(y, x_next)?.into_data())
    }

    pub fn scg_gate(&self, y: &Tensor<T>) -> Result<GateVector<T>> {
        self.single(GateKind::Scg, y, y)
    }

    pub fn mcg_gate(&self, y: &Tensor<T>, x_next: &Tensor<T>) -> Result<GateVector<T>> {
        self.single(GateKind::Mcg, y, x_next)
    }

    pub fn mlcg_gate(&self, y: &Tensor<T>, x_next: &Tensor<T>) -> Result<GateVector<T>> {
        self.single(GateKind::Mlcg, y, x_next)
    }
}

impl<T: Real> Module<T> for GateModule<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            GateModule::Scg { fc } | GateModule::Mcg { fc } => fc.visit(f),
            GateModule::Mlcg { fc1, fc2, fc3, .. } => {
                fc1.visit(f);
                fc2.visit(f);
                fc3.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            GateModule::Scg { fc } | GateModule::Mcg { fc } => fc.visit_mut(f),
            GateModule::Mlcg { fc1, fc2, fc3, .. } => {
                fc1.visit_mut(f);
                fc2.visit_mut(f);
                fc3.visit_mut(f);
            }
        }
    }
}
