//! The speaker-embedding model.
//!
//! `features [C, T, F_in]` flow through a per-frame front-end, `K` stacked
//! spatio-temporal blocks (cross-frame attention within each channel, then
//! cross-channel attention at each frame), a mean over channels, self-attentive
//! pooling over time and L2 normalization. A linear classifier on the
//! embedding provides the training signal.
//!
//! The single-channel model used for pretraining is the same pipeline with no
//! blocks. Every channel-axis operation is shape-polymorphic, so a model trained
//! with `k` channels evaluates on any channel count.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TrainingStage};
pub use params::{BoundParams, Param, ParamGroup, ParamStore};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    ffn, mha_residual_scores, prenorm_sublayer, AttentionParams, FfnParams, NormParams, Normalizer,
    ScoreSharing, ScoreState,
};
use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    #[default]
    CflFirst,
    CclFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Average block outputs over channels, then pool once.
    #[default]
    MeanFrames,
    /// Pool each channel, then average the pooled vectors.
    MeanEmbeddings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SingleChannel,
    MultiChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StbConfig {
    pub num_blocks: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub input_dim: usize,
    pub frames: usize,
    pub train_channels: usize,
    pub sap_dim: usize,
    pub ffn_dim: usize,
    pub num_speakers: usize,
    pub normalizer: Normalizer,
    pub block_order: BlockOrder,
    pub score_sharing: ScoreSharing,
    pub fusion: Fusion,
    /// Std of block attention and FFN weights at initialization.
    pub init_std: f64,
    /// Extra factor on the attention output projection at initialization.
    pub out_scale: f64,
}

impl Default for StbConfig {
    fn default() -> Self {
        StbConfig {
            num_blocks: 2,
            heads: 4,
            feature_dim: 32,
            input_dim: 24,
            frames: 50,
            train_channels: 4,
            sap_dim: 32,
            ffn_dim: 64,
            num_speakers: 20,
            normalizer: Normalizer::Softmax,
            block_order: BlockOrder::CflFirst,
            score_sharing: ScoreSharing::PerHead,
            fusion: Fusion::MeanFrames,
            init_std: 0.02,
            out_scale: 0.1,
        }
    }
}

impl StbConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("heads", self.heads),
            ("feature_dim", self.feature_dim),
            ("input_dim", self.input_dim),
            ("frames", self.frames),
            ("train_channels", self.train_channels),
            ("sap_dim", self.sap_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_speakers", self.num_speakers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if !self.feature_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.feature_dim {} not divisible by heads {}",
                self.feature_dim, self.heads
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) || !self.out_scale.is_finite() {
            return Err(Error::Config("model init scales must be finite and init_std > 0".into()));
        }
        Ok(())
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[C, T, N]` after the block stack.
    pub hidden: Var,
    /// L2-normalized `[N]`.
    pub embedding: Var,
    /// Cross-channel attention weights per block, `[T, h, C, C]`.
    pub ccl_weights: Vec<Var>,
    /// Cross-frame attention weights per block, `[C, h, T, T]`.
    pub cfl_weights: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StbModel {
    pub config: StbConfig,
    pub kind: ModelKind,
    pub params: ParamStore,
}

fn he(shape: [usize; 2], rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / shape[0] as f64).sqrt(), rng)
}

fn xavier(shape: [usize; 2], rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, (1.0 / shape[0] as f64).sqrt(), rng)
}

impl StbModel {
    /// Front-end, pooling and classifier only.
    pub fn single_channel(config: StbConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_frontend(&mut params, &config, rng);
        init_sap(&mut params, &config, rng);
        init_classifier(&mut params, &config, rng);
        Ok(StbModel {
            config,
            kind: ModelKind::SingleChannel,
            params,
        })
    }

    /// Fully random multi-channel model.
    pub fn new(config: StbConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut model = Self::single_channel(config, rng)?;
        init_blocks(&mut model.params, &model.config, rng);
        model.kind = ModelKind::MultiChannel;
        Ok(model)
    }

    /// Multi-channel model initialized from a pretrained single-channel model.
    ///
    /// Front-end and pooling are copied and frozen; blocks are freshly drawn and
    /// the classifier re-drawn for `config.num_speakers`.
    pub fn from_pretrained(pretrained: &StbModel, config: StbConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let src = &pretrained.config;
        let compatible = src.input_dim == config.input_dim
            && src.feature_dim == config.feature_dim
            && src.sap_dim == config.sap_dim;
        if !compatible {
            return Err(Error::Checkpoint(format!(
                "pretrained dims (input {}, feature {}, sap {}) do not match (input {}, feature {}, sap {})",
                src.input_dim, src.feature_dim, src.sap_dim, config.input_dim, config.feature_dim, config.sap_dim
            )));
        }
        let mut params = ParamStore::new();
        for (name, p) in pretrained.params.iter() {
            if matches!(ParamGroup::of(name), Some(ParamGroup::Frontend | ParamGroup::Sap)) {
                params.insert(name, p.value.clone());
            }
        }
        let mut expected = ParamStore::new();
        init_frontend(&mut expected, &config, rng);
        init_sap(&mut expected, &config, rng);
        for (name, p) in expected.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("pretrained model lacks {name}")))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        params.set_frozen(ParamGroup::Frontend, true);
        params.set_frozen(ParamGroup::Sap, true);
        init_blocks(&mut params, &config, rng);
        init_classifier(&mut params, &config, rng);
        Ok(StbModel {
            config,
            kind: ModelKind::MultiChannel,
            params,
        })
    }

    pub fn num_blocks(&self) -> usize {
        match self.kind {
            ModelKind::SingleChannel => 0,
            ModelKind::MultiChannel => self.config.num_blocks,
        }
    }

    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Self {
        self.config.normalizer = normalizer;
        self
    }

    /// Per-frame 2-layer MLP with ReLU: `[C, T, F_in] -> [C, T, N]`.
    pub fn frontend(&self, tape: &mut Tape, p: &BoundParams, features: Var) -> Result<Var> {
        let shape = tape.shape(features);
        if shape.len() != 3 || shape[2] != self.config.input_dim || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::Config(format!(
                "features shape {shape:?} does not match [C>=1, T>=1, {}]",
                self.config.input_dim
            )));
        }
        let h = tape.matmul(features, p.get("frontend.w1")?)?;
        let h = tape.add(h, p.get("frontend.b1")?)?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, p.get("frontend.w2")?)?;
        let h = tape.add(h, p.get("frontend.b2")?)?;
        tape.relu(h)
    }

    fn layer(&self, p: &BoundParams, prefix: &str) -> Result<(AttentionParams, NormParams, FfnParams, NormParams)> {
        let g = |s: &str| p.get(&format!("{prefix}.{s}"));
        Ok((
            AttentionParams {
                wq: g("attn.wq")?,
                bq: g("attn.bq")?,
                wk: g("attn.wk")?,
                bk: g("attn.bk")?,
                wv: g("attn.wv")?,
                bv: g("attn.bv")?,
                wo: g("attn.wo")?,
                heads: self.config.heads,
            },
            NormParams {
                gamma: g("norm1.gamma")?,
                beta: g("norm1.beta")?,
            },
            FfnParams {
                w1: g("ffn.w1")?,
                b1: g("ffn.b1")?,
                w2: g("ffn.w2")?,
                b2: g("ffn.b2")?,
            },
            NormParams {
                gamma: g("norm2.gamma")?,
                beta: g("norm2.beta")?,
            },
        ))
    }

    /// Pre-norm attention sublayer plus pre-norm FFN sublayer over axis `-2` of `x`.
    fn encoder_layer(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        prefix: &str,
        x: Var,
        prev: &ScoreState,
        normalizer: Normalizer,
    ) -> Result<(Var, ScoreState, Var)> {
        let (attn, norm1, ffn_params, norm2) = self.layer(p, prefix)?;
        let sharing = self.config.score_sharing;
        let mut side = None;
        let y = prenorm_sublayer(tape, x, &norm1, |t, h| {
            let out = mha_residual_scores(t, h, &attn, prev, normalizer, sharing)?;
            side = Some((out.next, out.weights));
            Ok(out.output)
        })?;
        let y = prenorm_sublayer(tape, y, &norm2, |t, h| ffn(t, h, &ffn_params))?;
        let (next, weights) = side.expect("attention ran");
        Ok((y, next, weights))
    }

    /// Cross-frame layer of block `block`: attention over `T` within each channel.
    pub fn cfl(&self, tape: &mut Tape, p: &BoundParams, block: usize, x: Var, prev: &ScoreState) -> Result<(Var, ScoreState, Var)> {
        self.encoder_layer(tape, p, &format!("blocks.{block}.cfl"), x, prev, Normalizer::Softmax)
    }

    /// Cross-channel layer of block `block`: attention over `C` at each frame.
    pub fn ccl(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        block: usize,
        x: Var,
        prev: &ScoreState,
        normalizer: Normalizer,
    ) -> Result<(Var, ScoreState, Var)> {
        let by_frame = tape.permute(x, &[1, 0, 2])?;
        let (y, next, weights) = self.encoder_layer(tape, p, &format!("blocks.{block}.ccl"), by_frame, prev, normalizer)?;
        Ok((tape.permute(y, &[1, 0, 2])?, next, weights))
    }

    /// All blocks with the two score chains threaded separately.
    pub fn stb_stack(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let heads = self.config.heads;
        let mut cfl_state = ScoreState::zero(heads);
        let mut ccl_state = ScoreState::zero(heads);
        let mut cfl_weights = Vec::new();
        let mut ccl_weights = Vec::new();
        let mut h = x;
        for block in 0..self.num_blocks() {
            let steps = match self.config.block_order {
                BlockOrder::CflFirst => [false, true],
                BlockOrder::CclFirst => [true, false],
            };
            for cross_channel in steps {
                if cross_channel {
                    let (y, s, w) = self.ccl(tape, p, block, h, &ccl_state, self.config.normalizer)?;
                    (h, ccl_state) = (y, s);
                    ccl_weights.push(w);
                } else {
                    let (y, s, w) = self.cfl(tape, p, block, h, &cfl_state)?;
                    (h, cfl_state) = (y, s);
                    cfl_weights.push(w);
                }
            }
        }
        Ok((h, cfl_weights, ccl_weights))
    }

    /// Self-attentive pooling over axis `-2`: `[.., T, N] -> [.., N]`.
    pub fn sap_pool(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let rank = shape.len();
        if rank < 2 || shape[rank - 2] == 0 {
            return Err(Error::InvalidShape {
                shape,
                reason: "pooling needs [.., T>=1, N]".into(),
            });
        }
        let (t, n) = (shape[rank - 2], shape[rank - 1]);
        let d = self.config.sap_dim;
        let h = tape.matmul(x, p.get("sap.w")?)?;
        let h = tape.add(h, p.get("sap.b")?)?;
        let h = tape.tanh(h)?;
        let u = tape.reshape(p.get("sap.u")?, &[d, 1])?;
        let e = tape.matmul(h, u)?;
        let mut row = shape[..rank - 2].to_vec();
        row.extend([1, t]);
        let e = tape.reshape(e, &row)?;
        let alpha = tape.softmax(e)?;
        let pooled = tape.matmul(alpha, x)?;
        let mut out = shape[..rank - 2].to_vec();
        out.push(n);
        tape.reshape(pooled, &out)
    }

    /// Mean over the channel axis: `[C, T, N] -> [T, N]`.
    pub fn fuse_channels(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.mean_axis(x, 0)
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, features: Var) -> Result<Forward> {
        let h = self.frontend(tape, p, features)?;
        let (hidden, cfl_weights, ccl_weights) = self.stb_stack(tape, p, h)?;
        let pooled = match self.config.fusion {
            Fusion::MeanFrames => {
                let fused = self.fuse_channels(tape, hidden)?;
                self.sap_pool(tape, p, fused)?
            }
            Fusion::MeanEmbeddings => {
                let per_channel = self.sap_pool(tape, p, hidden)?;
                tape.mean_axis(per_channel, 0)?
            }
        };
        let embedding = tape.l2_normalize(pooled)?;
        Ok(Forward {
            hidden,
            embedding,
            ccl_weights,
            cfl_weights,
        })
    }

    /// `embedding [N] -> logits [1, S]`.
    pub fn classify(&self, tape: &mut Tape, p: &BoundParams, embedding: Var) -> Result<Var> {
        let n = tape.shape(embedding).iter().product::<usize>();
        let row = tape.reshape(embedding, &[1, n])?;
        tape.matmul(row, p.get("classifier.w")?)
    }

    /// Runs the model on a fresh tape and returns the embedding.
    pub fn embed(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(features.clone());
        let f = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(f.embedding).clone())
    }
}

fn init_frontend(params: &mut ParamStore, c: &StbConfig, rng: &mut impl Rng) {
    params.insert("frontend.w1", he([c.input_dim, c.feature_dim], rng));
    params.insert("frontend.b1", Tensor::zeros([c.feature_dim]));
    params.insert("frontend.w2", he([c.feature_dim, c.feature_dim], rng));
    params.insert("frontend.b2", Tensor::full([c.feature_dim], 0.1));
}

fn init_sap(params: &mut ParamStore, c: &StbConfig, rng: &mut impl Rng) {
    params.insert("sap.w", xavier([c.feature_dim, c.sap_dim], rng));
    params.insert("sap.b", Tensor::zeros([c.sap_dim]));
    params.insert("sap.u", Tensor::randn([c.sap_dim], (1.0 / c.sap_dim as f64).sqrt(), rng));
}

fn init_classifier(params: &mut ParamStore, c: &StbConfig, rng: &mut impl Rng) {
    params.insert("classifier.w", xavier([c.feature_dim, c.num_speakers], rng));
}

fn init_blocks(params: &mut ParamStore, c: &StbConfig, rng: &mut impl Rng) {
    let n = c.feature_dim;
    for block in 0..c.num_blocks {
        for kind in ["cfl", "ccl"] {
            let prefix = format!("blocks.{block}.{kind}");
            for w in ["wq", "wk", "wv"] {
                params.insert(format!("{prefix}.attn.{w}"), Tensor::randn([n, n], c.init_std, rng));
            }
            for b in ["bq", "bk", "bv"] {
                params.insert(format!("{prefix}.attn.{b}"), Tensor::zeros([n]));
            }
            params.insert(format!("{prefix}.attn.wo"), Tensor::randn([n, n], c.init_std * c.out_scale, rng));
            params.insert(format!("{prefix}.ffn.w1"), Tensor::randn([n, c.ffn_dim], c.init_std, rng));
            params.insert(format!("{prefix}.ffn.b1"), Tensor::zeros([c.ffn_dim]));
            params.insert(format!("{prefix}.ffn.w2"), Tensor::randn([c.ffn_dim, n], c.init_std, rng));
            params.insert(format!("{prefix}.ffn.b2"), Tensor::zeros([n]));
            for norm in ["norm1", "norm2"] {
                params.insert(format!("{prefix}.{norm}.gamma"), Tensor::ones([n]));
                params.insert(format!("{prefix}.{norm}.beta"), Tensor::zeros([n]));
            }
        }
    }
}
