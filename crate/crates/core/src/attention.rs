//! Multi-head self-attention with residual raw-score pass-through.
//!
//! Attention runs over the second-to-last axis of `x: [.., A, N]`; leading axes
//! are independent sequences. Each head computes
//! `S = Q K^T / sqrt(d_k) + P_prev`, attends with `normalizer(S)`, and hands the
//! raw `S` to the next layer of the same kind. No positional encoding is added
//! anywhere, so the attention axis is order-free.
//!
//! Projections for all heads are stored concatenated: head `i` owns columns
//! `i*d_k..(i+1)*d_k` of `W_Q`, `W_K`, `W_V` and their biases, with `d_k = N / h`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    #[default]
    Softmax,
    Sparsemax,
}

impl Normalizer {
    pub fn name(self) -> &'static str {
        match self {
            Normalizer::Softmax => "softmax",
            Normalizer::Sparsemax => "sparsemax",
        }
    }

    pub fn apply(self, tape: &mut Tape, scores: Var) -> Result<Var> {
        match self {
            Normalizer::Softmax => tape.softmax(scores),
            Normalizer::Sparsemax => tape.sparsemax(scores),
        }
    }
}

/// Whether forwarded raw scores are kept per head or averaged into one matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSharing {
    #[default]
    PerHead,
    Shared,
}

/// Raw attention scores handed from one layer to the next of the same kind.
///
/// `scores` is `[.., h, A, A]` (or `[.., 1, A, A]` when shared); `None` is the
/// all-zero state a stack starts from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreState {
    scores: Option<Var>,
    heads: usize,
    layer: usize,
}

impl ScoreState {
    pub fn zero(heads: usize) -> Self {
        ScoreState {
            scores: None,
            heads,
            layer: 0,
        }
    }

    pub fn from_scores(scores: Var, heads: usize, layer: usize) -> Self {
        ScoreState {
            scores: Some(scores),
            heads,
            layer,
        }
    }

    pub fn scores(&self) -> Option<Var> {
        self.scores
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Number of layers that have contributed to this state.
    pub fn layer(&self) -> usize {
        self.layer
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[.., A, N]`
    pub output: Var,
    /// Normalized weights `[.., h, A, A]`.
    pub weights: Var,
    pub next: ScoreState,
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// One multi-head attention layer over axis `-2` of `x`.
pub fn mha_residual_scores(
    tape: &mut Tape,
    x: Var,
    params: &AttentionParams,
    prev: &ScoreState,
    normalizer: Normalizer,
    sharing: ScoreSharing,
) -> Result<AttentionOutput> {
    let shape = tape.shape(x).to_vec();
    let rank = shape.len();
    if rank < 2 {
        return Err(Error::InvalidShape {
            shape,
            reason: "attention input needs [.., A, N]".into(),
        });
    }
    let (a, n) = (shape[rank - 2], shape[rank - 1]);
    let h = params.heads;
    if h == 0 || n % h != 0 {
        return Err(Error::Config(format!("feature dim {n} not divisible by {h} heads")));
    }
    if prev.heads != h {
        return Err(Error::Config(format!(
            "score state carries {} heads, layer has {h}",
            prev.heads
        )));
    }
    let dk = n / h;
    let batch = &shape[..rank - 2];

    let mut split_shape = batch.to_vec();
    split_shape.extend([a, h, dk]);
    // [.., A, h, dk] -> [.., h, A, dk]
    let mut heads_first: Vec<usize> = (0..rank - 2).collect();
    heads_first.extend([rank - 1, rank - 2, rank]);
    // [.., A, h, dk] -> [.., h, dk, A]
    let mut keys_t: Vec<usize> = (0..rank - 2).collect();
    keys_t.extend([rank - 1, rank, rank - 2]);

    let split = |tape: &mut Tape, w: Var, b: Var, axes: &[usize]| -> Result<Var> {
        let proj = affine(tape, x, w, b)?;
        let r = tape.reshape(proj, &split_shape)?;
        tape.permute(r, axes)
    };
    let q = split(tape, params.wq, params.bq, &heads_first)?;
    let kt = split(tape, params.wk, params.bk, &keys_t)?;
    let v = split(tape, params.wv, params.bv, &heads_first)?;

    let qk = tape.matmul(q, kt)?;
    let mut scores = tape.scale(qk, 1.0 / (dk as f64).sqrt())?;
    if let Some(p) = prev.scores {
        let ps = tape.shape(p);
        let expected_heads = match sharing {
            ScoreSharing::PerHead => h,
            ScoreSharing::Shared => 1,
        };
        let pr = ps.len();
        if pr < 3 || ps[pr - 1] != a || ps[pr - 2] != a || ps[pr - 3] != expected_heads {
            return Err(Error::shape("residual scores", ps, tape.shape(scores)));
        }
        scores = tape.add(scores, p)?;
    }
    let weights = normalizer.apply(tape, scores)?;
    let mixed = tape.matmul(weights, v)?;
    let back = tape.permute(mixed, &heads_first)?;
    let concat = tape.reshape(back, &shape)?;
    let output = tape.matmul(concat, params.wo)?;

    let forwarded = match sharing {
        ScoreSharing::PerHead => scores,
        ScoreSharing::Shared => {
            let mean = tape.mean_axis(scores, rank - 2)?;
            let mut keep = batch.to_vec();
            keep.extend([1, a, a]);
            tape.reshape(mean, &keep)?
        }
    };
    Ok(AttentionOutput {
        output,
        weights,
        next: ScoreState::from_scores(forwarded, h, prev.layer + 1),
    })
}

/// `x + inner(layer_norm(x))`.
pub fn prenorm_sublayer<F>(tape: &mut Tape, x: Var, norm: &NormParams, inner: F) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let normed = tape.layer_norm(x, norm.gamma, norm.beta, LAYER_NORM_EPS)?;
    let y = inner(tape, normed)?;
    if tape.shape(y) != tape.shape(x) {
        return Err(Error::Contract(format!(
            "sublayer changed shape {:?} -> {:?}",
            tape.shape(x),
            tape.shape(y)
        )));
    }
    tape.add(x, y)
}

/// `relu(x W1 + b1) W2 + b2`
pub fn ffn(tape: &mut Tape, x: Var, params: &FfnParams) -> Result<Var> {
    let h = affine(tape, x, params.w1, params.b1)?;
    let h = tape.relu(h)?;
    affine(tape, h, params.w2, params.b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct RawAttention {
        wq: Tensor,
        bq: Tensor,
        wk: Tensor,
        bk: Tensor,
        wv: Tensor,
        bv: Tensor,
        wo: Tensor,
        heads: usize,
    }

    impl RawAttention {
        fn random(n: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
            RawAttention {
                wq: Tensor::randn([n, n], 0.5, rng),
                bq: Tensor::randn([n], 0.1, rng),
                wk: Tensor::randn([n, n], 0.5, rng),
                bk: Tensor::randn([n], 0.1, rng),
                wv: Tensor::randn([n, n], 0.5, rng),
                bv: Tensor::randn([n], 0.1, rng),
                wo: Tensor::randn([n, n], 0.5, rng),
                heads,
            }
        }

        fn tensors(&self) -> Vec<Tensor> {
            vec![
                self.wq.clone(),
                self.bq.clone(),
                self.wk.clone(),
                self.bk.clone(),
                self.wv.clone(),
                self.bv.clone(),
                self.wo.clone(),
            ]
        }

        fn bind(&self, tape: &mut Tape) -> AttentionParams {
            let v: Vec<Var> = self.tensors().into_iter().map(|t| tape.constant(t)).collect();
            Self::from_vars(&v, self.heads)
        }

        fn from_vars(v: &[Var], heads: usize) -> AttentionParams {
            AttentionParams {
                wq: v[0],
                bq: v[1],
                wk: v[2],
                bk: v[3],
                wv: v[4],
                bv: v[5],
                wo: v[6],
                heads,
            }
        }
    }

    fn row(m: &Tensor, r: usize) -> Vec<f64> {
        let n = m.shape()[1];
        m.data()[r * n..(r + 1) * n].to_vec()
    }

    /// Scalar-loop attention for one sequence `x: [A, N]`; returns (output, raw scores per head).
    fn scalar_attention(
        x: &Tensor,
        p: &RawAttention,
        prev: Option<&[Vec<Vec<f64>>]>,
        normalizer: Normalizer,
    ) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        let (a, n) = (x.shape()[0], x.shape()[1]);
        let dk = n / p.heads;
        let proj = |w: &Tensor, b: &Tensor, i: usize, col: usize| {
            let xi = row(x, i);
            (0..n).map(|k| xi[k] * w.data()[k * n + col]).sum::<f64>() + b.data()[col]
        };
        let mut concat = vec![vec![0.0; n]; a];
        let mut raw = Vec::new();
        for head in 0..p.heads {
            let cols = head * dk..(head + 1) * dk;
            let mut s = vec![vec![0.0; a]; a];
            for i in 0..a {
                for j in 0..a {
                    let mut dot = 0.0;
                    for c in cols.clone() {
                        dot += proj(&p.wq, &p.bq, i, c) * proj(&p.wk, &p.bk, j, c);
                    }
                    s[i][j] = dot / (dk as f64).sqrt() + prev.map_or(0.0, |pp| pp[head][i][j]);
                }
            }
            for i in 0..a {
                let mut w = vec![0.0; a];
                match normalizer {
                    Normalizer::Softmax => {
                        let m = s[i].iter().copied().fold(f64::MIN, f64::max);
                        let e: Vec<f64> = s[i].iter().map(|v| (v - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for j in 0..a {
                            w[j] = e[j] / z;
                        }
                    }
                    Normalizer::Sparsemax => {
                        crate::autodiff::sparsemax_row(&s[i], &mut w);
                    }
                }
                for c in cols.clone() {
                    concat[i][c] = (0..a).map(|j| w[j] * proj(&p.wv, &p.bv, j, c)).sum();
                }
            }
            raw.push(s);
        }
        let out = concat
            .iter()
            .map(|h| (0..n).map(|c| (0..n).map(|k| h[k] * p.wo.data()[k * n + c]).sum()).collect())
            .collect();
        (out, raw)
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = RawAttention::random(4, 2, &mut rng);
        let x = Tensor::randn([1, 4], 1.0, &mut rng);
        for normalizer in [Normalizer::Softmax, Normalizer::Sparsemax] {
            let mut tape = Tape::new();
            let params = p.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let out = mha_residual_scores(&mut tape, xv, &params, &ScoreState::zero(2), normalizer, ScoreSharing::PerHead)
                .unwrap();
            assert!(tape.value(out.weights).data().iter().all(|&w| w == 1.0));
            // (x W_V + b_V) W_O
            let xwv = tape.matmul(xv, params.wv).unwrap();
            let v = tape.add(xwv, params.bv).unwrap();
            let expected = tape.matmul(v, params.wo).unwrap();
            let diff = tape.value(out.output).max_abs_diff(tape.value(expected)).unwrap();
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn zero_queries_and_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = RawAttention::random(4, 2, &mut rng);
        p.wq = Tensor::zeros([4, 4]);
        p.wk = Tensor::zeros([4, 4]);
        p.wo = Tensor::eye(4);
        let x = Tensor::randn([3, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let params = p.bind(&mut tape);
        let xv = tape.constant(x);
        let out = mha_residual_scores(&mut tape, xv, &params, &ScoreState::zero(2), Normalizer::Softmax, ScoreSharing::PerHead)
            .unwrap();
        let xwv = tape.matmul(xv, params.wv).unwrap();
        let v = tape.add(xwv, params.bv).unwrap();
        let mean = tape.mean_axis(v, 0).unwrap();
        let mean = tape.value(mean).clone();
        let y = tape.value(out.output);
        for r in 0..3 {
            for c in 0..4 {
                assert!((y.get(&[r, c]).unwrap() - mean.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_scores_steer_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = RawAttention {
            wq: Tensor::eye(2),
            bq: Tensor::zeros([2]),
            wk: Tensor::eye(2),
            bk: Tensor::zeros([2]),
            wv: Tensor::eye(2),
            bv: Tensor::zeros([2]),
            wo: Tensor::eye(2),
            heads: 1,
        };
        let x = Tensor::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.4]]).unwrap();
        let prev_raw = vec![vec![vec![0.0, 10.0], vec![0.0, 0.0]]];
        let (oracle_out, oracle_raw) = scalar_attention(&x, &p, Some(&prev_raw), Normalizer::Softmax);

        let mut tape = Tape::new();
        let params = p.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let prev = tape.constant(Tensor::new([1, 2, 2], vec![0.0, 10.0, 0.0, 0.0]).unwrap());
        let out = mha_residual_scores(
            &mut tape,
            xv,
            &params,
            &ScoreState::from_scores(prev, 1, 1),
            Normalizer::Softmax,
            ScoreSharing::PerHead,
        )
        .unwrap();
        let w = tape.value(out.weights);
        assert!(w.get(&[0, 0, 1]).unwrap() > 0.999);
        let y = tape.value(out.output);
        for r in 0..2 {
            for c in 0..2 {
                assert!((y.get(&[r, c]).unwrap() - oracle_out[r][c]).abs() < 1e-12);
            }
        }
        let next = tape.value(out.next.scores().unwrap());
        for i in 0..2 {
            for j in 0..2 {
                assert!((next.get(&[0, i, j]).unwrap() - oracle_raw[0][i][j]).abs() < 1e-12);
            }
        }
        assert_eq!(out.next.layer(), 2);
        let _ = &mut rng;
    }

    #[test]
    fn matches_scalar_oracle_with_random_prev_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for normalizer in [Normalizer::Softmax, Normalizer::Sparsemax] {
            let p = RawAttention::random(6, 3, &mut rng);
            let x = Tensor::randn([4, 6], 1.0, &mut rng);
            let prev_t = Tensor::randn([3, 4, 4], 1.0, &mut rng);
            let prev_raw: Vec<Vec<Vec<f64>>> = (0..3)
                .map(|h| (0..4).map(|i| (0..4).map(|j| prev_t.get(&[h, i, j]).unwrap()).collect()).collect())
                .collect();
            let (oracle, _) = scalar_attention(&x, &p, Some(&prev_raw), normalizer);
            let mut tape = Tape::new();
            let params = p.bind(&mut tape);
            let xv = tape.constant(x);
            let pv = tape.constant(prev_t);
            let out = mha_residual_scores(&mut tape, xv, &params, &ScoreState::from_scores(pv, 3, 1), normalizer, ScoreSharing::PerHead)
                .unwrap();
            let y = tape.value(out.output);
            for r in 0..4 {
                for c in 0..6 {
                    assert!((y.get(&[r, c]).unwrap() - oracle[r][c]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn head_count_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = RawAttention::random(4, 2, &mut rng);
        let mut tape = Tape::new();
        let params = p.bind(&mut tape);
        let xv = tape.constant(Tensor::randn([3, 4], 1.0, &mut rng));
        let r = mha_residual_scores(&mut tape, xv, &params, &ScoreState::zero(4), Normalizer::Softmax, ScoreSharing::PerHead);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn shared_scores_forward_head_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = RawAttention::random(4, 2, &mut rng);
        let x = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let params = p.bind(&mut tape);
        let xv = tape.constant(x);
        let first = mha_residual_scores(&mut tape, xv, &params, &ScoreState::zero(2), Normalizer::Softmax, ScoreSharing::Shared)
            .unwrap();
        let shared = tape.value(first.next.scores().unwrap()).clone();
        assert_eq!(shared.shape(), &[2, 1, 3, 3]);
        let second = mha_residual_scores(&mut tape, xv, &params, &first.next, Normalizer::Softmax, ScoreSharing::Shared);
        assert!(second.is_ok());
        // per-head consumer rejects a shared state
        let r = mha_residual_scores(&mut tape, xv, &params, &first.next, Normalizer::Softmax, ScoreSharing::PerHead);
        assert!(r.is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let perm = [2usize, 0, 3, 1];
        for normalizer in [Normalizer::Softmax, Normalizer::Sparsemax] {
            let p = RawAttention::random(4, 2, &mut rng);
            let x = Tensor::randn([4, 4], 1.0, &mut rng);
            let prev = Tensor::randn([2, 4, 4], 1.0, &mut rng);
            let xp = x.index_select(0, &perm).unwrap();
            let prevp = prev.index_select(1, &perm).unwrap().index_select(2, &perm).unwrap();

            let run = |x: Tensor, prev: Tensor| {
                let mut tape = Tape::new();
                let params = p.bind(&mut tape);
                let xv = tape.constant(x);
                let pv = tape.constant(prev);
                let out = mha_residual_scores(&mut tape, xv, &params, &ScoreState::from_scores(pv, 2, 1), normalizer, ScoreSharing::PerHead)
                    .unwrap();
                (tape.value(out.output).clone(), tape.value(out.next.scores().unwrap()).clone())
            };
            let (y, next) = run(x, prev);
            let (yp, nextp) = run(xp, prevp);
            let y_perm = y.index_select(0, &perm).unwrap();
            let next_perm = next.index_select(1, &perm).unwrap().index_select(2, &perm).unwrap();
            assert!(yp.max_abs_diff(&y_perm).unwrap() <= 1e-10);
            assert!(nextp.max_abs_diff(&next_perm).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for normalizer in [Normalizer::Softmax, Normalizer::Sparsemax] {
            let p = RawAttention::random(8, 4, &mut rng);
            let mut tape = Tape::new();
            let params = p.bind(&mut tape);
            let xv = tape.constant(Tensor::randn([3, 5, 8], 2.0, &mut rng));
            let out = mha_residual_scores(&mut tape, xv, &params, &ScoreState::zero(4), normalizer, ScoreSharing::PerHead)
                .unwrap();
            for r in tape.value(out.weights).data().chunks(5) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(r.iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn prenorm_residual_wiring() {
        let x = Tensor::from_rows(&[vec![1.0, 3.0], vec![-2.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let norm = NormParams {
            gamma: tape.constant(Tensor::ones([2])),
            beta: tape.constant(Tensor::zeros([2])),
        };
        let zero = prenorm_sublayer(&mut tape, xv, &norm, |t, v| t.scale(v, 0.0)).unwrap();
        assert_eq!(tape.value(zero), &x);

        // Hand composition: each row has two entries at mean +- d, so layer_norm
        // gives [-1, 1] up to eps.
        let ident = prenorm_sublayer(&mut tape, xv, &norm, |_, v| Ok(v)).unwrap();
        let shrink = |d: f64| d / (d * d + LAYER_NORM_EPS).sqrt();
        let expected = [1.0 - shrink(1.0), 3.0 + shrink(1.0), -2.0 - shrink(1.0), 0.0 + shrink(1.0)];
        for (a, b) in tape.value(ident).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }

        let bad = prenorm_sublayer(&mut tape, xv, &norm, |t, v| t.mean_axis(v, 0));
        assert!(matches!(bad, Err(Error::Contract(_))));
    }

    #[test]
    fn sublayer_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = RawAttention::random(4, 2, &mut rng);
        let mut inputs = p.tensors();
        inputs.push(Tensor::randn([3, 4], 1.0, &mut rng)); // x
        inputs.push(Tensor::randn([4], 0.3, &mut rng).map(|v| v + 1.0)); // gamma
        inputs.push(Tensor::randn([4], 0.3, &mut rng)); // beta
        inputs.push(Tensor::randn([2, 3, 3], 0.5, &mut rng)); // prev
        let proj = Tensor::randn([3, 4], 1.0, &mut rng);
        for normalizer in [Normalizer::Softmax, Normalizer::Sparsemax] {
            let report = grad_check(
                |t, v| {
                    let params = RawAttention::from_vars(&v[..7], 2);
                    let norm = NormParams { gamma: v[8], beta: v[9] };
                    let prev = ScoreState::from_scores(v[10], 2, 1);
                    let y = prenorm_sublayer(t, v[7], &norm, |t, h| {
                        Ok(mha_residual_scores(t, h, &params, &prev, normalizer, ScoreSharing::PerHead)?.output)
                    })?;
                    let w = t.constant(proj.clone());
                    let m = t.mul(y, w)?;
                    t.sum(m)
                },
                &inputs,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{normalizer:?}: {report:?}");
        }
    }

    #[test]
    fn ffn_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::randn([3, 2], 1.0, &mut rng).map(f64::abs);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let zeros = FfnParams {
            w1: tape.constant(Tensor::zeros([2, 4])),
            b1: tape.constant(Tensor::zeros([4])),
            w2: tape.constant(Tensor::zeros([4, 2])),
            b2: tape.constant(Tensor::full([2], 1.5)),
        };
        let y = ffn(&mut tape, xv, &zeros).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));

        let ident = FfnParams {
            w1: tape.constant(Tensor::eye(2)),
            b1: tape.constant(Tensor::zeros([2])),
            w2: tape.constant(Tensor::eye(2)),
            b2: tape.constant(Tensor::zeros([2])),
        };
        let y = ffn(&mut tape, xv, &ident).unwrap();
        assert_eq!(tape.value(y), &x);

        let (w1, b1, w2, b2) = (
            Tensor::randn([2, 3], 1.0, &mut rng),
            Tensor::randn([3], 1.0, &mut rng),
            Tensor::randn([3, 2], 1.0, &mut rng),
            Tensor::randn([2], 1.0, &mut rng),
        );
        let params = FfnParams {
            w1: tape.constant(w1.clone()),
            b1: tape.constant(b1.clone()),
            w2: tape.constant(w2.clone()),
            b2: tape.constant(b2.clone()),
        };
        let y = ffn(&mut tape, xv, &params).unwrap();
        let y = tape.value(y);
        for r in 0..3 {
            let hidden: Vec<f64> = (0..3)
                .map(|j| ((0..2).map(|k| x.get(&[r, k]).unwrap() * w1.get(&[k, j]).unwrap()).sum::<f64>() + b1.data()[j]).max(0.0))
                .collect();
            for c in 0..2 {
                let o = (0..3).map(|j| hidden[j] * w2.get(&[j, c]).unwrap()).sum::<f64>() + b2.data()[c];
                assert!((y.get(&[r, c]).unwrap() - o).abs() < 1e-12);
            }
        }
    }
}
