//! Random gradient-check cases, one per differentiable kernel.

use rand::Rng;

use crate::autodiff::{grad_check, GradCheckReport, Kernel, Tape, Var};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::Result;

/// Minimum distance to a kink accepted for a random evaluation point.
pub const KINK_MARGIN: f64 = 1e-3;

pub(super) const MAX_DRAWS: u64 = 64;

struct Case {
    inputs: Vec<Tensor>,
    projection: Tensor,
    labels: Vec<usize>,
}

fn case(kernel: Kernel, rng: &mut impl Rng) -> Case {
    let mut r = |shape: &[usize], std: f64| Tensor::randn(shape.to_vec(), std, rng);
    let inputs = match kernel {
        Kernel::Matmul => vec![r(&[2, 3, 4], 1.0), r(&[4, 3], 1.0)],
        Kernel::Add => vec![r(&[3, 4], 1.0), r(&[4], 1.0)],
        Kernel::Mul => vec![r(&[2, 3], 1.0), r(&[2, 1], 1.0)],
        Kernel::Scale | Kernel::Relu | Kernel::Tanh | Kernel::Sum => vec![r(&[6], 1.0)],
        Kernel::Softmax => vec![r(&[3, 4], 1.5)],
        Kernel::Sparsemax => vec![r(&[3, 5], 1.0)],
        Kernel::LayerNorm => vec![r(&[3, 5], 1.0), r(&[5], 1.0), r(&[5], 1.0)],
        Kernel::Concat => vec![r(&[2, 2], 1.0), r(&[2, 3], 1.0)],
        Kernel::Mean => vec![r(&[3, 4, 2], 1.0)],
        Kernel::Permute => vec![r(&[2, 3, 4], 1.0)],
        Kernel::Reshape => vec![r(&[2, 6], 1.0)],
        Kernel::CrossEntropy => vec![r(&[3, 4], 1.0)],
        Kernel::L2Normalize => vec![r(&[3, 4], 1.0)],
        Kernel::Leaf => Vec::new(),
    };
    let out_shape: Vec<usize> = match kernel {
        Kernel::Matmul => vec![2, 3, 3],
        Kernel::Add => vec![3, 4],
        Kernel::Mul => vec![2, 3],
        Kernel::Concat => vec![2, 5],
        Kernel::Mean => vec![3, 2],
        Kernel::Permute => vec![4, 2, 3],
        Kernel::Reshape => vec![3, 4],
        Kernel::Sum | Kernel::CrossEntropy | Kernel::Leaf => vec![],
        _ => inputs[0].shape().to_vec(),
    };
    let projection = Tensor::randn(out_shape, 1.0, rng);
    let labels = (0..3).map(|_| rng.random_range(0..4)).collect();
    Case {
        inputs,
        projection,
        labels,
    }
}

fn apply(kernel: Kernel, tape: &mut Tape, v: &[Var], labels: &[usize]) -> Result<Var> {
    match kernel {
        Kernel::Matmul => tape.matmul(v[0], v[1]),
        Kernel::Add => tape.add(v[0], v[1]),
        Kernel::Mul => tape.mul(v[0], v[1]),
        Kernel::Scale => tape.scale(v[0], -1.7),
        Kernel::Relu => tape.relu(v[0]),
        Kernel::Tanh => tape.tanh(v[0]),
        Kernel::Softmax => tape.softmax(v[0]),
        Kernel::Sparsemax => tape.sparsemax(v[0]),
        Kernel::LayerNorm => tape.layer_norm(v[0], v[1], v[2], 1e-5),
        Kernel::Concat => tape.concat_last(&[v[0], v[1]]),
        Kernel::Mean => tape.mean_axis(v[0], 1),
        Kernel::Permute => tape.permute(v[0], &[2, 0, 1]),
        Kernel::Reshape => tape.reshape(v[0], &[3, 4]),
        Kernel::Sum => tape.sum(v[0]),
        Kernel::CrossEntropy => tape.cross_entropy(v[0], labels),
        Kernel::L2Normalize => tape.l2_normalize(v[0]),
        Kernel::Leaf => Ok(v[0]),
    }
}

/// Distance to the nearest kink of `f` at `inputs`, from one forward pass.
pub(super) fn kink_margin_at(f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    f(&mut tape, &vars)?;
    Ok(tape.kink_margin())
}

/// Gradient check of `kernel` at a random point drawn from `seed`, composed
/// with a random linear read-out so every output entry contributes.
///
/// Points closer than [`KINK_MARGIN`] to a kink are redrawn.
pub fn kernel_gradcheck(kernel: Kernel, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut last = None;
    for draw in 0..MAX_DRAWS {
        let mut rng = substream(seed, kernel.name(), draw);
        let c = case(kernel, &mut rng);
        let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let y = apply(kernel, tape, v, &c.labels)?;
            let w = tape.constant(c.projection.clone());
            let weighted = tape.mul(y, w)?;
            tape.sum(weighted)
        };
        let near_kink = kink_margin_at(&f, &c.inputs)? < KINK_MARGIN;
        if near_kink && draw + 1 < MAX_DRAWS {
            continue;
        }
        last = Some(grad_check(f, &c.inputs, eps, tol)?);
        if !near_kink {
            break;
        }
    }
    Ok(last.expect("at least one draw"))
}
