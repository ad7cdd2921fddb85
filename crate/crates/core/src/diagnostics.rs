//! Finite-difference gradient checks over every tape primitive and over the
//! four block variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Arch, BlockConfig, Res2NetBlock};
use crate::error::Result;
use crate::layers::module_grad_check;
use crate::tensor::{grad_check_many, FiniteDiff, Tape, Tensor, Var};

/// Central-difference step for primitive ops.
pub const FD_STEP: f64 = 1e-6;
/// Derivative estimate for whole blocks. Some block coordinates have
/// gradients near `1e-7` on an O(1) loss, below what a single central
/// difference resolves to the tolerance.
pub const BLOCK_FD: FiniteDiff = FiniteDiff::Plateau { max: 1e-2, min: 1e-6 };
/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_TOLERANCE
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces `y` to a scalar through a fixed random projection.
fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = rand_tensor(&y.shape(), &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37));
    Ok(y.mul(tape.constant(w))?.sum())
}

type Primitive = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Primitive)> {
    vec![
        ("add", vec![vec![2, 3, 2], vec![2, 3, 2]], |_, v| v[0].add(v[1])),
        ("add_broadcast", vec![vec![2, 3, 2], vec![3, 2]], |_, v| v[0].add(v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |_, v| v[0].mul(v[1])),
        ("scale", vec![vec![5]], |_, v| Ok(v[0].scale(-1.7))),
        ("channel_mul", vec![vec![2, 3, 2, 2], vec![2, 3]], |_, v| v[0].channel_mul(v[1])),
        ("concat", vec![vec![2, 1, 2, 2], vec![2, 3, 2, 2]], |_, v| Var::concat(&[v[0], v[1]], 1)),
        ("slice", vec![vec![2, 4, 3]], |_, v| v[0].slice(1, 1, 2)),
        ("split_concat", vec![vec![1, 4, 2, 2]], |_, v| {
            let parts = v[0].split_channels(2)?;
            Var::concat_channels(&[parts[1], parts[0].mul(parts[0])?])
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |_, v| v[0].matmul(v[1])),
        ("conv2d_3x3", vec![vec![2, 2, 4, 3], vec![3, 2, 3, 3], vec![3]], |_, v| v[0].conv2d(v[1], Some(v[2]), 1, 1)),
        ("conv2d_strided", vec![vec![1, 2, 5, 5], vec![2, 2, 3, 3]], |_, v| v[0].conv2d(v[1], None, 2, 1)),
        ("conv2d_1x1", vec![vec![2, 3, 2, 2], vec![2, 3, 1, 1]], |_, v| v[0].conv2d(v[1], None, 1, 0)),
        ("relu", vec![vec![4, 3]], |_, v| Ok(v[0].relu())),
        ("sigmoid", vec![vec![4, 3]], |_, v| Ok(v[0].sigmoid())),
        ("mean_over", vec![vec![2, 3, 2, 2]], |_, v| v[0].mean_over(&[2, 3])),
        ("sum", vec![vec![3, 2]], |_, v| Ok(v[0].sum())),
        ("reshape", vec![vec![2, 6]], |_, v| v[0].reshape(&[3, 4])),
        ("batch_norm_train", vec![vec![3, 2, 2, 2], vec![2], vec![2]], |_, v| {
            Ok(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0)
        }),
        ("batch_norm_eval", vec![vec![2, 2, 2, 2], vec![2], vec![2]], |_, v| {
            v[0].batch_norm_eval(v[1], v[2], &[0.1, -0.2], &[0.5, 1.5], 1e-5)
        }),
        ("log_softmax", vec![vec![3, 4]], |_, v| Ok(v[0].log_softmax())),
        ("nll", vec![vec![3, 2]], |_, v| v[0].log_softmax().nll(&[0, 1, 1])),
    ]
}

/// Every tape primitive on random inputs drawn from `seed`.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitives()
        .into_iter()
        .map(|(name, shapes, op)| {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
            let err = grad_check_many(
                |tape, vars| {
                    let y = op(tape, vars)?;
                    if y.value().numel() == 1 {
                        Ok(y)
                    } else {
                        project(tape, y, seed)
                    }
                },
                &inputs,
                FD_STEP,
            )?;
            Ok(CheckResult { name: name.to_string(), max_rel_err: err })
        })
        .collect()
}

/// The block configuration used for gradient checks: `s = 4` groups of
/// `C = 2` channels, with squeeze-and-excitation and batch norm + ReLU.
pub fn check_block_config(arch: Arch) -> BlockConfig {
    BlockConfig {
        in_channels: 8,
        width: 8,
        scale: 4,
        gate: arch.gate(),
        reduction: 2,
        se: true,
        se_reduction: 2,
        stride: 1,
        norm_act: true,
    }
}

/// Gradient check of one full block (input and every weight) on a
/// `[2, 8, 3, 3]` input.
pub fn block_check(arch: Arch, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = Res2NetBlock::<f64>::new("block", check_block_config(arch), &mut rng)?;
    let x = rand_tensor(&[2, 8, 3, 3], &mut rng);
    let err = module_grad_check(&block, &x, BLOCK_FD, |b, s, x| {
        let y = b.forward(s, x)?;
        project(s.tape(), y, seed)
    })?;
    Ok(CheckResult { name: format!("block_{}", arch.name()), max_rel_err: err })
}

/// Primitive and block checks for one seed.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = primitive_checks(seed)?;
    for arch in Arch::ALL {
        out.push(block_check(arch, seed)?);
    }
    Ok(out)
}
