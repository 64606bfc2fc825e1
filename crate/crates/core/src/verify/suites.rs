//! The suites `stb-asv verify` runs, each reduced to a count, a worst
//! observed error and the names of failing cases.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{kernel_gradcheck, model_gradcheck};
use crate::attention::Normalizer;
use crate::autodiff::{with_flipped_gradient, Kernel, Tape};
use crate::eval::compute_eer;
use crate::model::{StbConfig, StbModel};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::Result;

pub const GRADCHECK_POINTS: usize = 100;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const SPARSEMAX_ROWS: usize = 1000;
pub const SPARSEMAX_TOL: f64 = 1e-9;
pub const SIMPLEX_SUM_TOL: f64 = 1e-12;
pub const PERMUTATION_TOL: f64 = 1e-10;
pub const EER_SETS: usize = 100;
pub const EER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
    /// Distinct names of failing cases, in first-seen order.
    pub failing: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }
}

struct Tally {
    result: SuiteResult,
    start: Instant,
}

impl Tally {
    fn new(name: &str, tolerance: f64) -> Self {
        Tally {
            result: SuiteResult {
                name: name.into(),
                cases: 0,
                failures: 0,
                max_error: 0.0,
                tolerance,
                seconds: 0.0,
                failing: Vec::new(),
            },
            start: Instant::now(),
        }
    }

    /// Records one case; NaN errors count as failures.
    fn record(&mut self, case: &str, error: f64, ok: bool) {
        let r = &mut self.result;
        r.cases += 1;
        r.max_error = if error.is_nan() || r.max_error.is_nan() { f64::NAN } else { r.max_error.max(error) };
        let ok = ok && error.is_finite();
        if !ok {
            r.failures += 1;
            if !r.failing.iter().any(|f| f == case) {
                r.failing.push(case.to_string());
            }
        }
    }

    fn check(&mut self, case: &str, error: f64) {
        let tol = self.result.tolerance;
        self.record(case, error, error < tol);
    }

    fn finish(mut self) -> SuiteResult {
        self.result.seconds = self.start.elapsed().as_secs_f64();
        self.result
    }
}

fn point_seed(seed: u64, stream: &str, point: usize) -> u64 {
    substream(seed, stream, point as u64).random()
}

/// Central-difference checks of every differentiable kernel.
pub fn gradcheck_kernels(seed: u64, points: usize) -> Result<SuiteResult> {
    let mut tally = Tally::new("gradcheck-kernels", GRADCHECK_TOL);
    for kernel in Kernel::DIFFERENTIABLE {
        for point in 0..points {
            let report = kernel_gradcheck(kernel, point_seed(seed, "verify.kernel", point), GRADCHECK_EPS, GRADCHECK_TOL)?;
            tally.record(kernel.name(), report.max_rel_error, report.passed);
        }
    }
    Ok(tally.finish())
}

/// The small model the full-model gradient check runs on. Weights are drawn
/// wider than the fine-tuning init so the blocks visibly shape the loss.
pub fn gradcheck_model_config(normalizer: Normalizer) -> StbConfig {
    StbConfig {
        num_blocks: 2,
        heads: 2,
        feature_dim: 8,
        input_dim: 8,
        frames: 4,
        train_channels: 3,
        sap_dim: 8,
        ffn_dim: 16,
        num_speakers: 4,
        normalizer,
        init_std: 0.3,
        out_scale: 1.0,
        ..StbConfig::default()
    }
}

/// Full-model checks, `points` split evenly over both normalizers.
pub fn gradcheck_model(seed: u64, points: usize) -> Result<SuiteResult> {
    let mut tally = Tally::new("gradcheck-model", GRADCHECK_TOL);
    let normalizers = [Normalizer::Softmax, Normalizer::Sparsemax];
    for point in 0..points {
        let normalizer = normalizers[point % 2];
        let config = gradcheck_model_config(normalizer);
        let report = model_gradcheck(&config, point_seed(seed, "verify.model", point), GRADCHECK_EPS, GRADCHECK_TOL)?;
        tally.record(&format!("model/{}", normalizer.name()), report.max_rel_error, report.passed);
    }
    Ok(tally.finish())
}

/// Simplex projection by bisection on the threshold, used as an oracle.
pub fn simplex_projection_oracle(z: &[f64]) -> Vec<f64> {
    let mass = |tau: f64| z.iter().map(|&v| (v - tau).max(0.0)).sum::<f64>();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // mass(max - 1) >= 1 and mass(max) = 0
    let (mut lo, mut hi) = (max - 1.0, max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    z.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// Sparsemax against the bisection oracle, plus the simplex-sum check.
pub fn sparsemax_oracle(seed: u64, rows: usize) -> Result<(SuiteResult, SuiteResult)> {
    let mut proj = Tally::new("sparsemax-oracle", SPARSEMAX_TOL);
    let mut sums = Tally::new("sparsemax-sum", SIMPLEX_SUM_TOL);
    let mut rng = substream(seed, "verify.sparsemax", 0);
    for row in 0..rows {
        let k = rng.random_range(2..=16);
        let scale = [0.1, 1.0, 10.0][row % 3];
        let z: Vec<f64> = Tensor::randn([k], scale, &mut rng).data().to_vec();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, k], z.clone())?);
        let y = tape.sparsemax(x)?;
        let got = tape.value(y).data();
        let want = simplex_projection_oracle(&z);
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        proj.check(&format!("row {row} (K={k})"), err);
        sums.check(&format!("row {row} (K={k})"), (got.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((proj.finish(), sums.finish()))
}

/// Cosine distance between embeddings of features and a channel permutation
/// of them, for every channel count in `1..=max_channels`.
pub fn permutation_invariance(seed: u64, max_channels: usize) -> Result<SuiteResult> {
    let mut tally = Tally::new("permutation-invariance", PERMUTATION_TOL);
    for normalizer in [Normalizer::Softmax, Normalizer::Sparsemax] {
        let config = StbConfig {
            frames: 10,
            init_std: 0.3,
            out_scale: 1.0,
            normalizer,
            ..StbConfig::default()
        };
        let mut rng = substream(seed, "verify.permutation", normalizer as u64);
        let model = StbModel::new(config.clone(), &mut rng)?;
        for c in 1..=max_channels {
            let x = Tensor::randn([c, config.frames, config.input_dim], 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..c).collect();
            perm.shuffle(&mut rng);
            let a = model.embed(&x)?;
            let b = model.embed(&x.index_select(0, &perm)?)?;
            let cos: f64 = a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>()
                / (a.l2_norm() * b.l2_norm());
            tally.check(&format!("{}/C={c}", normalizer.name()), (1.0 - cos).abs());
        }
    }
    Ok(tally.finish())
}

/// EER by direct FAR/FRR counting at every candidate threshold, with linear
/// interpolation where the two curves cross.
pub fn brute_force_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut scores: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut cands = vec![scores[0] - 1.0];
    cands.extend(scores.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cands.push(scores[scores.len() - 1] + 1.0);
    let rates = |t: f64| {
        let far = nontargets.iter().filter(|&&s| s >= t).count() as f64 / nontargets.len() as f64;
        let frr = targets.iter().filter(|&&s| s < t).count() as f64 / targets.len() as f64;
        (far, frr)
    };
    let points: Vec<(f64, f64)> = cands.iter().map(|&t| rates(t)).collect();
    for w in points.windows(2) {
        let (d0, d1) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
        if d0 == 0.0 {
            return w[0].0;
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let a = d0 / (d0 - d1);
            return w[0].0 + a * (w[1].0 - w[0].0);
        }
    }
    f64::NAN
}

/// `compute_eer` against the brute-force sweep on random score sets, plus a
/// hand-worked case with EER 1/3.
pub fn eer_oracle(seed: u64, sets: usize) -> Result<SuiteResult> {
    let mut tally = Tally::new("eer-oracle", EER_TOL);
    let (eer, _) = compute_eer(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1])?;
    tally.check("hand case", (eer - 1.0 / 3.0).abs());
    let mut rng = substream(seed, "verify.eer", 0);
    for set in 0..sets {
        let coarse = rng.random_bool(0.5);
        let shift = rng.random_range(-1.0..2.0);
        let mut draw = |offset: f64| -> Vec<f64> {
            let n = rng.random_range(1..60);
            (0..n)
                .map(|_| {
                    let v: f64 = offset + rng.random_range(-1.0..1.0);
                    if coarse {
                        (v * 4.0).round() / 4.0
                    } else {
                        v
                    }
                })
                .collect()
        };
        let targets = draw(shift);
        let nontargets = draw(0.0);
        let (eer, _) = compute_eer(&targets, &nontargets)?;
        tally.check(&format!("set {set}"), (eer - brute_force_eer(&targets, &nontargets)).abs());
    }
    Ok(tally.finish())
}

/// Runs every suite, with `gradcheck_points` random points per kernel and for
/// the model. With `fault`, the gradient rule of that kernel is sign-flipped
/// for the whole run, which the gradient suites must catch.
pub fn run_suites(seed: u64, gradcheck_points: usize, fault: Option<Kernel>) -> Result<VerifyReport> {
    let run = || -> Result<VerifyReport> {
        let (proj, sums) = sparsemax_oracle(seed, SPARSEMAX_ROWS)?;
        Ok(VerifyReport {
            seed,
            suites: vec![
                gradcheck_kernels(seed, gradcheck_points)?,
                gradcheck_model(seed, gradcheck_points)?,
                proj,
                sums,
                permutation_invariance(seed, 8)?,
                eer_oracle(seed, EER_SETS)?,
            ],
        })
    };
    match fault {
        Some(kernel) => with_flipped_gradient(kernel, run),
        None => run(),
    }
}
