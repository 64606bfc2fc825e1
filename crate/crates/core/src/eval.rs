//! Verification trials, cosine scoring and equal error rate.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::StbModel;
use crate::rng::substream;
use crate::sim::DatasetManifest;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Closest-channel ranks reported by the one-best sweep.
pub const RANK_SWEEP: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Channel counts to evaluate; a count larger than the dataset's is an error.
    pub channel_counts: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            channel_counts: vec![2, 4, 8],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_counts.is_empty() || self.channel_counts.contains(&0) {
            return Err(Error::Config("eval.channel_counts must be a nonempty list of counts >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    /// Indices into the manifest's utterance list.
    pub enroll: usize,
    pub test: usize,
    pub enroll_id: String,
    pub test_id: String,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn num_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.is_target).count()
    }
}

/// Every same-speaker pair recorded in different scenes is a target trial;
/// as many random different-speaker pairs are drawn as nontargets.
pub fn build_trials(manifest: &DatasetManifest, seed: u64) -> Result<TrialSet> {
    let utts = &manifest.utterances;
    let n = utts.len();
    let mut trials = Vec::new();
    let pair = |i: usize, j: usize, is_target| Trial {
        enroll: i,
        test: j,
        enroll_id: utts[i].id.clone(),
        test_id: utts[j].id.clone(),
        is_target,
    };
    for i in 0..n {
        for j in i + 1..n {
            if utts[i].speaker == utts[j].speaker && utts[i].scene != utts[j].scene {
                trials.push(pair(i, j, true));
            }
        }
    }
    let mut impostor: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if utts[i].speaker != utts[j].speaker {
                impostor.push((i, j));
            }
        }
    }
    if trials.is_empty() || impostor.is_empty() {
        return Err(Error::Protocol(format!(
            "{} split yields {} target and {} nontarget candidate pairs; both must be nonempty",
            manifest.split,
            trials.len(),
            impostor.len()
        )));
    }
    let count = trials.len().min(impostor.len());
    let mut rng = substream(seed, "trials", 0);
    let mut picked: Vec<usize> = sample(&mut rng, impostor.len(), count).into_vec();
    picked.sort_unstable();
    trials.extend(picked.into_iter().map(|k| pair(impostor[k].0, impostor[k].1, false)));
    Ok(TrialSet { trials })
}

pub fn cosine_score(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (na, nb) = (a.l2_norm(), b.l2_norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric {
            op: "cosine_score",
            reason: "zero vector".into(),
        });
    }
    Ok((a.dot(b)? / (na * nb)).clamp(-1.0, 1.0))
}

/// Equal error rate and the threshold that attains it.
///
/// Candidate thresholds are the midpoints between adjacent distinct scores
/// plus one point below and above all of them. `FAR(t)` is the fraction of
/// nontargets scoring `>= t`, `FRR(t)` the fraction of targets below `t`. The
/// rate is interpolated linearly where `FAR - FRR` first reaches zero; the
/// returned threshold is the bracketing candidate with the smaller
/// `|FAR - FRR|`.
pub fn compute_eer(targets: &[f64], nontargets: &[f64]) -> Result<(f64, f64)> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Protocol(format!(
            "EER needs both classes ({} targets, {} nontargets)",
            targets.len(),
            nontargets.len()
        )));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(Error::Numeric {
            op: "compute_eer",
            reason: "non-finite score".into(),
        });
    }
    let mut tar = targets.to_vec();
    let mut non = nontargets.to_vec();
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = tar.iter().chain(&non).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut thresholds = Vec::with_capacity(all.len() + 1);
    thresholds.push(all[0] - 1.0);
    thresholds.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(all[all.len() - 1] + 1.0);

    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let (mut below_tar, mut below_non) = (0usize, 0usize);
    let mut previous: Option<(f64, f64, f64)> = None;
    for &t in &thresholds {
        while below_tar < tar.len() && tar[below_tar] < t {
            below_tar += 1;
        }
        while below_non < non.len() && non[below_non] < t {
            below_non += 1;
        }
        let far = (non.len() - below_non) as f64 / nn;
        let frr = below_tar as f64 / nt;
        let gap = far - frr;
        if gap <= 0.0 {
            return Ok(match previous {
                Some((pt, pfar, pfrr)) if gap < 0.0 => {
                    let pgap = pfar - pfrr;
                    let alpha = pgap / (pgap - gap);
                    let eer = pfar + alpha * (far - pfar);
                    let threshold = if pgap.abs() <= gap.abs() { pt } else { t };
                    (eer, threshold)
                }
                _ => (far, t),
            });
        }
        previous = Some((t, far, frr));
    }
    unreachable!("FAR - FRR is -1 at the last threshold")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreArrays {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub channels: usize,
    pub eer: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    /// 1 is the closest channel.
    pub rank: usize,
    pub eer: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSweep {
    pub ranks: Vec<RankResult>,
    /// Whether the EER never decreases as the channel gets farther.
    pub monotone: bool,
}

/// Shared schema of the model and baseline reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    /// EER of the headline condition (the largest channel count).
    pub eer: f64,
    pub threshold: f64,
    /// Scores of the headline condition, in trial order.
    pub scores: ScoreArrays,
    pub conditions: Vec<ConditionResult>,
    pub per_channel_rank: Option<RankSweep>,
    pub num_trials: usize,
}

impl EvalReport {
    pub fn condition(&self, channels: usize) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.channels == channels)
    }
}

fn embed_all(model: &StbModel, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    inputs.par_iter().map(|x| model.embed(x)).collect()
}

fn score(trials: &TrialSet, embeddings: &[Tensor]) -> Result<ScoreArrays> {
    let mut scores = ScoreArrays {
        target: Vec::new(),
        nontarget: Vec::new(),
    };
    for t in &trials.trials {
        let s = cosine_score(&embeddings[t.enroll], &embeddings[t.test])?;
        if t.is_target {
            scores.target.push(s);
        } else {
            scores.nontarget.push(s);
        }
    }
    Ok(scores)
}

fn check_inputs(manifest: &DatasetManifest, features: &[Tensor], trials: &TrialSet) -> Result<()> {
    if features.len() != manifest.utterances.len() {
        return Err(Error::Manifest(format!(
            "{} feature tensors for {} utterances",
            features.len(),
            manifest.utterances.len()
        )));
    }
    if let Some(t) = trials.trials.iter().find(|t| t.enroll >= features.len() || t.test >= features.len()) {
        return Err(Error::Protocol(format!("trial {} / {} outside the split", t.enroll_id, t.test_id)));
    }
    Ok(())
}

/// Sorted random subset of `k` of `c` channels; every channel when `k == c`.
pub fn channel_subset(c: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k == 0 || k > c {
        return Err(Error::Config(format!("cannot evaluate {k} channels of a {c}-channel dataset")));
    }
    let mut idx = sample(rng, c, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Scores `model` on random `k`-channel subsets for each requested `k`.
pub fn evaluate(
    model: &StbModel,
    system: &str,
    manifest: &DatasetManifest,
    features: &[Tensor],
    trials: &TrialSet,
    channel_counts: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    check_inputs(manifest, features, trials)?;
    if channel_counts.is_empty() {
        return Err(Error::Config("no channel counts to evaluate".into()));
    }
    let mut conditions = Vec::new();
    let mut headline: Option<(usize, f64, f64, ScoreArrays)> = None;
    for &k in channel_counts {
        let inputs = features
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut rng = substream(seed, &format!("eval.channels.{k}"), i as u64);
                x.index_select(0, &channel_subset(x.shape()[0], k, &mut rng)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = score(trials, &embed_all(model, &inputs)?)?;
        let (eer, threshold) = compute_eer(&scores.target, &scores.nontarget)?;
        conditions.push(ConditionResult {
            channels: k,
            eer,
            threshold,
        });
        if headline.as_ref().is_none_or(|h| k >= h.0) {
            headline = Some((k, eer, threshold, scores));
        }
    }
    let (_, eer, threshold, scores) = headline.expect("at least one condition");
    Ok(EvalReport {
        system: system.to_string(),
        eer,
        threshold,
        scores,
        conditions,
        per_channel_rank: None,
        num_trials: trials.trials.len(),
    })
}

/// Single-channel baseline on the channel closest to the source, read from
/// the manifest, plus the same model on the 1st..6th closest channels.
pub fn oracle_one_best_eval(
    single: &StbModel,
    manifest: &DatasetManifest,
    features: &[Tensor],
    trials: &TrialSet,
) -> Result<EvalReport> {
    check_inputs(manifest, features, trials)?;
    let mut by_distance = Vec::with_capacity(features.len());
    for u in &manifest.utterances {
        let oracle = u
            .oracle_channel
            .ok_or_else(|| Error::Manifest(format!("utterance {} has no oracle channel", u.id)))?;
        let mut order: Vec<usize> = (0..u.distances.len()).collect();
        order.sort_by(|&a, &b| u.distances[a].total_cmp(&u.distances[b]).then(a.cmp(&b)));
        if order.is_empty() {
            order.push(oracle);
        }
        order.retain(|&c| c != oracle);
        order.insert(0, oracle);
        by_distance.push(order);
    }
    let pick = |rank: usize| -> Result<Vec<Tensor>> {
        features
            .iter()
            .zip(&by_distance)
            .map(|(x, order)| x.index_select(0, &[order[rank]]))
            .collect()
    };
    let scores = score(trials, &embed_all(single, &pick(0)?)?)?;
    let (eer, threshold) = compute_eer(&scores.target, &scores.nontarget)?;

    let available = by_distance.iter().map(Vec::len).min().unwrap_or(1).min(RANK_SWEEP);
    let mut ranks = vec![RankResult { rank: 1, eer, threshold }];
    for rank in 1..available {
        let s = score(trials, &embed_all(single, &pick(rank)?)?)?;
        let (eer, threshold) = compute_eer(&s.target, &s.nontarget)?;
        ranks.push(RankResult {
            rank: rank + 1,
            eer,
            threshold,
        });
    }
    let monotone = ranks.windows(2).all(|w| w[1].eer >= w[0].eer);
    Ok(EvalReport {
        system: "oracle-one-best".into(),
        eer,
        threshold,
        scores,
        conditions: vec![ConditionResult {
            channels: 1,
            eer,
            threshold,
        }],
        per_channel_rank: Some(RankSweep { ranks, monotone }),
        num_trials: trials.trials.len(),
    })
}

#[cfg(test)]
mod tests;
