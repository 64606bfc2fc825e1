//! Synthetic ad-hoc array scenes rendered directly in feature space.
//!
//! A speaker is an AR(1) process around a latent mean. Each node sees the
//! clean frames through a causal moving-average smear (stronger in reverberant
//! rooms and far from the source), a spectral tilt, a distance-dependent gain
//! and white noise at a distance-dependent SNR.

mod dataset;

pub use dataset::{
    build_dataset, load_split, validate_disjoint, DatasetManifest, DatasetSummary, SimConfig, Split,
    UtteranceRecord, SCENES_FILE, SPLIT_MANIFEST,
};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Nodes and the source keep this distance from every wall.
pub const WALL_MARGIN_M: f64 = 0.1;
const MIN_SOURCE_DISTANCE_M: f64 = 0.05;

fn normal(rng: &mut impl Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneRanges {
    pub length_m: [f64; 2],
    pub width_m: [f64; 2],
    pub height_m: [f64; 2],
    pub t60_s: [f64; 2],
    /// SNR at zero distance before the `20 log10(1 + d)` loss.
    pub snr0_db: f64,
    pub snr_jitter_db: f64,
    pub gain0: f64,
    /// Node tilt slopes are drawn uniformly from `[-max, max]`.
    pub max_tilt_slope: f64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        SceneRanges {
            length_m: [5.0, 25.0],
            width_m: [5.0, 25.0],
            height_m: [2.7, 4.0],
            t60_s: [0.2, 0.4],
            snr0_db: 10.0,
            snr_jitter_db: 3.0,
            gain0: 1.0,
            max_tilt_slope: 0.5,
        }
    }
}

impl SceneRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("length_m", self.length_m),
            ("width_m", self.width_m),
            ("height_m", self.height_m),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo > 2.0 * WALL_MARGIN_M && lo <= hi) {
                return Err(Error::Config(format!(
                    "sim.scene.{name} [{lo}, {hi}] must satisfy {} < lo <= hi",
                    2.0 * WALL_MARGIN_M
                )));
            }
        }
        let [lo, hi] = self.t60_s;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
            return Err(Error::Config(format!("sim.scene.t60_s [{lo}, {hi}] must satisfy 0 <= lo <= hi")));
        }
        let finite = [self.snr0_db, self.snr_jitter_db, self.gain0, self.max_tilt_slope]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.snr_jitter_db < 0.0 || self.gain0 <= 0.0 || self.max_tilt_slope < 0.0 {
            return Err(Error::Config(
                "sim.scene: snr0_db finite, snr_jitter_db >= 0, gain0 > 0, max_tilt_slope >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub pos: [f64; 3],
    pub distance: f64,
    pub gain: f64,
    pub tilt: Vec<f64>,
    pub smear_t60: f64,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// `(length, width, height)` in metres.
    pub room: [f64; 3],
    pub t60: f64,
    pub source_pos: [f64; 3],
    pub nodes: Vec<Node>,
}

impl Scene {
    /// Index of the node physically closest to the source.
    pub fn oracle_channel(&self) -> usize {
        self.nodes
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.distance.total_cmp(&b.1.distance))
            .map_or(0, |(i, _)| i)
    }

    pub fn distances(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.distance).collect()
    }
}

fn inside(room: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    room.map(|extent| rng.random_range(WALL_MARGIN_M..extent - WALL_MARGIN_M))
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Gain law `g0 / (1 + d)`.
pub fn distance_gain(gain0: f64, distance: f64) -> f64 {
    gain0 / (1.0 + distance)
}

/// SNR law `snr0 - 20 log10(1 + d)`, before jitter.
pub fn distance_snr_db(snr0_db: f64, distance: f64) -> f64 {
    snr0_db - 20.0 * (1.0 + distance).log10()
}

/// Exponential tilt `exp(slope * (j / F - 1/2))` over feature index `j`.
pub fn tilt_curve(slope: f64, feature_dim: usize) -> Vec<f64> {
    (0..feature_dim)
        .map(|j| (slope * (j as f64 / feature_dim as f64 - 0.5)).exp())
        .collect()
}

/// Random room, source and `channels` nodes placed uniformly inside it.
pub fn sample_scene(rng: &mut impl Rng, channels: usize, feature_dim: usize, ranges: &SceneRanges) -> Result<Scene> {
    ranges.validate()?;
    if channels == 0 {
        return Err(Error::Config("a scene needs at least one node".into()));
    }
    let room = [
        uniform(rng, ranges.length_m),
        uniform(rng, ranges.width_m),
        uniform(rng, ranges.height_m),
    ];
    let t60 = uniform(rng, ranges.t60_s);
    let source_pos = inside(room, rng);
    let nodes = (0..channels)
        .map(|_| {
            let (pos, distance) = loop {
                let pos = inside(room, rng);
                let d = pos
                    .iter()
                    .zip(&source_pos)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if d >= MIN_SOURCE_DISTANCE_M {
                    break (pos, d);
                }
            };
            let slope = if ranges.max_tilt_slope > 0.0 {
                rng.random_range(-ranges.max_tilt_slope..=ranges.max_tilt_slope)
            } else {
                0.0
            };
            let jitter = ranges.snr_jitter_db * normal(rng);
            Node {
                pos,
                distance,
                gain: distance_gain(ranges.gain0, distance),
                tilt: tilt_curve(slope, feature_dim),
                smear_t60: t60 * distance / (distance + 1.0),
                snr_db: distance_snr_db(ranges.snr0_db, distance) + jitter,
            }
        })
        .collect();
    Ok(Scene {
        room,
        t60,
        source_pos,
        nodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeakerRanges {
    pub latent_std: f64,
    /// Speaker means lie in a random subspace of this dimension, shared by all
    /// speakers of a dataset. 0 or at least `feature_dim` means full rank.
    pub latent_rank: usize,
    /// Speakers whose latents are closer than this are redrawn.
    pub min_latent_distance: f64,
    /// Per-dimension frame std is drawn from this range.
    pub frame_std: [f64; 2],
    pub ar_coeff: [f64; 2],
    /// Std of the per-utterance offset of the speaker mean.
    pub session_std: f64,
}

impl Default for SpeakerRanges {
    fn default() -> Self {
        SpeakerRanges {
            latent_std: 1.0,
            latent_rank: 8,
            min_latent_distance: 1.0,
            frame_std: [0.5, 1.0],
            ar_coeff: [0.5, 0.9],
            session_std: 0.5,
        }
    }
}

impl SpeakerRanges {
    pub fn validate(&self) -> Result<()> {
        let [slo, shi] = self.frame_std;
        let [alo, ahi] = self.ar_coeff;
        let ok = self.latent_std > 0.0
            && self.min_latent_distance >= 0.0
            && self.session_std >= 0.0
            && slo > 0.0
            && slo <= shi
            && alo > 0.0
            && alo <= ahi
            && ahi < 1.0
            && [self.latent_std, self.min_latent_distance, self.session_std, shi]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "sim.speakers: latent_std > 0, frame_std 0 < lo <= hi, ar_coeff 0 < lo <= hi < 1, other stds >= 0".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub ar_coeff: f64,
    pub session_std: f64,
}

const MAX_PROFILE_DRAWS: usize = 10_000;

/// Draws `count` speakers with pairwise latent distance at least `min_latent_distance`.
pub fn sample_profiles(count: usize, feature_dim: usize, ranges: &SpeakerRanges, rng: &mut impl Rng) -> Result<Vec<SpeakerProfile>> {
    ranges.validate()?;
    let mut out: Vec<SpeakerProfile> = Vec::with_capacity(count);
    let rank = match ranges.latent_rank {
        r if r == 0 || r >= feature_dim => None,
        r => Some(r),
    };
    // columns scaled so every mean coordinate keeps variance latent_std^2
    let mixing: Option<Vec<f64>> = rank.map(|r| (0..feature_dim * r).map(|_| normal(rng) / (r as f64).sqrt()).collect());
    let mut draws = 0;
    while out.len() < count {
        draws += 1;
        if draws > MAX_PROFILE_DRAWS {
            return Err(Error::Config(format!(
                "could not place {count} speakers {} apart; lower sim.speakers.min_latent_distance",
                ranges.min_latent_distance
            )));
        }
        let mean: Vec<f64> = match (&mixing, rank) {
            (Some(a), Some(r)) => {
                let z: Vec<f64> = (0..r).map(|_| normal(rng)).collect();
                a.chunks(r)
                    .map(|row| ranges.latent_std * row.iter().zip(&z).map(|(w, v)| w * v).sum::<f64>())
                    .collect()
            }
            _ => (0..feature_dim).map(|_| ranges.latent_std * normal(rng)).collect(),
        };
        let far_enough = out.iter().all(|p| {
            let d2: f64 = p.mean.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() >= ranges.min_latent_distance
        });
        if !far_enough {
            continue;
        }
        let scale = (0..feature_dim).map(|_| uniform(rng, ranges.frame_std)).collect();
        out.push(SpeakerProfile {
            id: out.len(),
            mean,
            scale,
            ar_coeff: uniform(rng, ranges.ar_coeff),
            session_std: ranges.session_std,
        });
    }
    Ok(out)
}

/// Clean frames `[T, F]`: an AR(1) process around the speaker mean plus a
/// per-utterance session offset. Starts in the stationary distribution.
pub fn speaker_frames(profile: &SpeakerProfile, frames: usize, rng: &mut impl Rng) -> Tensor {
    let f = profile.mean.len();
    let rho = profile.ar_coeff;
    let innovation = (1.0 - rho * rho).sqrt();
    let centre: Vec<f64> = profile
        .mean
        .iter()
        .map(|m| m + profile.session_std * normal(rng))
        .collect();
    let mut state: Vec<f64> = profile.scale.iter().map(|s| s * normal(rng)).collect();
    let mut data = Vec::with_capacity(frames * f);
    for t in 0..frames {
        if t > 0 {
            for (s, sigma) in state.iter_mut().zip(&profile.scale) {
                *s = rho * *s + innovation * sigma * normal(rng);
            }
        }
        data.extend(centre.iter().zip(&state).map(|(c, s)| c + s));
    }
    Tensor::new([frames, f], data).expect("frames * feature_dim entries")
}

/// Smear decay per frame: the EMA falls by 60 dB after `t60` seconds.
pub fn smear_decay(t60: f64, hop_s: f64) -> f64 {
    if t60 <= 0.0 {
        0.0
    } else {
        10f64.powf(-3.0 * hop_s / t60)
    }
}

/// One node's view of clean frames `[T, F]`. Noise is always drawn, so the
/// random stream does not depend on the node's SNR.
pub fn render_channel(clean: &Tensor, node: &Node, hop_s: f64, rng: &mut impl Rng) -> Tensor {
    let (frames, f) = (clean.shape()[0], clean.shape()[1]);
    let a = smear_decay(node.smear_t60, hop_s);
    let mut smeared = clean.data()[..f].to_vec();
    let mut out = Vec::with_capacity(frames * f);
    for frame in clean.data().chunks(f) {
        for ((s, &x), &tilt) in smeared.iter_mut().zip(frame).zip(&node.tilt) {
            *s = a * *s + (1.0 - a) * x;
            out.push(node.gain * tilt * *s);
        }
    }
    let power = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
    let noise_std = (power / 10f64.powf(node.snr_db / 10.0)).sqrt();
    for v in &mut out {
        *v += noise_std * normal(rng);
    }
    Tensor::new([frames, f], out).expect("same shape as clean")
}

/// Renders every node of `scene`: features `[C, T, F]`.
pub fn render_utterance(
    profile: &SpeakerProfile,
    scene: &Scene,
    scene_id: usize,
    frames: usize,
    hop_s: f64,
    rng: &mut impl Rng,
) -> Result<Utterance> {
    if frames == 0 {
        return Err(Error::Config("utterances need at least one frame".into()));
    }
    let clean = speaker_frames(profile, frames, rng);
    let mut data = Vec::with_capacity(scene.nodes.len() * clean.numel());
    for node in &scene.nodes {
        if node.tilt.len() != profile.mean.len() {
            return Err(Error::shape("render_utterance", &[node.tilt.len()], &[profile.mean.len()]));
        }
        data.extend_from_slice(render_channel(&clean, node, hop_s, rng).data());
    }
    let features = Tensor::new([scene.nodes.len(), frames, profile.mean.len()], data)?;
    Ok(Utterance {
        speaker: profile.id,
        scene: scene_id,
        features,
        oracle_channel: scene.oracle_channel(),
        distances: scene.distances(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: usize,
    pub scene: usize,
    pub features: Tensor,
    pub oracle_channel: usize,
    pub distances: Vec<f64>,
}

/// Scales each channel of `[C, T, F]` to unit RMS.
pub fn normalize_level(features: &mut Tensor) {
    let c = features.shape()[0];
    if c == 0 {
        return;
    }
    let per_channel = features.numel() / c;
    for channel in features.data_mut().chunks_mut(per_channel.max(1)) {
        let rms = (channel.iter().map(|v| v * v).sum::<f64>() / channel.len() as f64).sqrt();
        if rms > 0.0 {
            channel.iter_mut().for_each(|v| *v /= rms);
        }
    }
}

/// `k` distinct channels of `[C, T, F]` in random order.
pub fn reselect_channels(features: &Tensor, k: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let c = features.shape().first().copied().unwrap_or(0);
    if k == 0 || k > c {
        return Err(Error::Index {
            index: k,
            extent: c,
            context: "reselect_channels needs 1 <= k <= C",
        });
    }
    let mut order: Vec<usize> = (0..c).collect();
    let (chosen, _) = order.partial_shuffle(rng, k);
    features.index_select(0, chosen)
}
