//! Gradient check of the whole model through classify and cross-entropy.

use rand::Rng;

use super::kernels::{kink_margin_at, KINK_MARGIN, MAX_DRAWS};
use crate::autodiff::{grad_check, GradCheckReport, Tape, Var};
use crate::model::{StbConfig, StbModel};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::Result;

/// Checks every parameter coordinate of a randomly drawn model on random
/// features `[train_channels, frames, input_dim]`.
///
/// Points closer than [`KINK_MARGIN`] to a kink are redrawn.
pub fn model_gradcheck(config: &StbConfig, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut last = None;
    for draw in 0..MAX_DRAWS {
        let mut rng = substream(seed, "model-gradcheck", draw);
        let model = StbModel::new(config.clone(), &mut rng)?;
        let features = Tensor::randn([config.train_channels, config.frames, config.input_dim], 1.0, &mut rng);
        let label = rng.random_range(0..config.num_speakers);
        let loss = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let p = model.params.bind_vars(vars)?;
            let x = tape.constant(features.clone());
            let fwd = model.forward(tape, &p, x)?;
            let logits = model.classify(tape, &p, fwd.embedding)?;
            tape.cross_entropy(logits, &[label])
        };
        let params = model.params.tensors();
        let near_kink = kink_margin_at(&loss, &params)? < KINK_MARGIN;
        if near_kink && draw + 1 < MAX_DRAWS {
            continue;
        }
        last = Some(grad_check(loss, &params, eps, tol)?);
        if !near_kink {
            break;
        }
    }
    Ok(last.expect("at least one draw"))
}
