use super::*;
use crate::model::StbConfig;
use crate::sim::{build_dataset, load_split, SimConfig, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent EER reference: counts FAR/FRR directly at every candidate
/// threshold, then intersects the piecewise-linear (FAR, FRR) path with the
/// diagonal.
fn brute_force_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut scores: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut cands = vec![scores[0] - 1.0];
    for i in 1..scores.len() {
        cands.push((scores[i - 1] + scores[i]) / 2.0);
    }
    cands.push(scores[scores.len() - 1] + 1.0);
    let points: Vec<(f64, f64)> = cands
        .iter()
        .map(|&t| {
            let far = nontargets.iter().filter(|&&s| s >= t).count() as f64 / nontargets.len() as f64;
            let frr = targets.iter().filter(|&&s| s < t).count() as f64 / targets.len() as f64;
            (far, frr)
        })
        .collect();
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
    panic!("no crossing")
}

fn far_frr(targets: &[f64], nontargets: &[f64], t: f64) -> (f64, f64) {
    (
        nontargets.iter().filter(|&&s| s >= t).count() as f64 / nontargets.len() as f64,
        targets.iter().filter(|&&s| s < t).count() as f64 / targets.len() as f64,
    )
}

fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let nt = rng.random_range(1..40);
    let nn = rng.random_range(1..40);
    let shift = rng.random_range(-1.0..2.0);
    // coarse grid half the time to force ties
    let coarse = rng.random_bool(0.5);
    let mut draw = |offset: f64, n: usize| -> Vec<f64> {
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
    let t = draw(shift, nt);
    let n = draw(0.0, nn);
    (t, n)
}

#[test]
fn cosine_examples() {
    let a = Tensor::vector(vec![1.0, 1.0]);
    assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_score(&Tensor::vector(vec![1.0, 0.0]), &Tensor::vector(vec![0.0, 2.0])).unwrap(), 0.0);
    let s = cosine_score(&a, &Tensor::vector(vec![1.0, 0.0])).unwrap();
    assert!((s - 0.5f64.sqrt()).abs() < 1e-15);
    assert!(matches!(cosine_score(&a, &Tensor::zeros([2])), Err(Error::Numeric { .. })));
}

#[test]
fn eer_examples() {
    assert_eq!(compute_eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap().0, 0.0);
    let (eer, t) = compute_eer(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]).unwrap();
    assert!((eer - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(far_frr(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1], t), (1.0 / 3.0, 1.0 / 3.0));
    assert!((compute_eer(&[0.1, 0.2], &[0.9, 0.8]).unwrap().0 - 1.0).abs() < 1e-15);
    assert!(matches!(compute_eer(&[], &[0.1]), Err(Error::Protocol(_))));
    assert!(matches!(compute_eer(&[0.5], &[]), Err(Error::Protocol(_))));
}

#[test]
fn eer_matches_brute_force_and_swap_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (t, n) = random_scores(&mut rng);
        let (eer, threshold) = compute_eer(&t, &n).unwrap();
        assert!((eer - brute_force_eer(&t, &n)).abs() < 1e-9);
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let (swapped, _) = compute_eer(&neg(&n), &neg(&t)).unwrap();
        assert!((eer - swapped).abs() < 1e-12, "{eer} vs {swapped}");

        // the threshold is at least as balanced as every candidate
        let gap = |t0: f64| {
            let (far, frr) = far_frr(&t, &n, t0);
            (far - frr).abs()
        };
        let best = gap(threshold);
        let mut all: Vec<f64> = t.iter().chain(&n).copied().collect();
        all.sort_by(f64::total_cmp);
        for w in all.windows(2) {
            assert!(best <= gap(0.5 * (w[0] + w[1])) + 1e-15);
        }
    }
}

fn tiny_sim() -> SimConfig {
    SimConfig {
        train_speakers: 2,
        test_speakers: 3,
        channels: 4,
        frames: 6,
        feature_dim: 6,
        scenes_per_speaker: 2,
        utterances_per_scene: 2,
        pretrain_utterances_per_speaker: 1,
        ..SimConfig::default()
    }
}

fn tiny_model(kind_multi: bool) -> StbModel {
    let cfg = StbConfig {
        num_blocks: 1,
        heads: 2,
        feature_dim: 8,
        input_dim: 6,
        frames: 6,
        sap_dim: 8,
        ffn_dim: 16,
        num_speakers: 2,
        init_std: 0.2,
        out_scale: 1.0,
        ..StbConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    if kind_multi {
        StbModel::new(cfg, &mut rng).unwrap()
    } else {
        StbModel::single_channel(cfg, &mut rng).unwrap()
    }
}

fn test_split() -> (tempfile::TempDir, DatasetManifest, Vec<Tensor>) {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&tiny_sim(), dir.path(), 5).unwrap();
    let (m, f) = load_split(dir.path(), Split::Test).unwrap();
    (dir, m, f)
}

#[test]
fn trials_follow_the_protocol() {
    let (_dir, m, _) = test_split();
    let trials = build_trials(&m, 1).unwrap();
    // 3 speakers x (2 scenes x 2 utts): 4 cross-scene pairs each
    assert_eq!(trials.num_targets(), 12);
    assert_eq!(trials.trials.len(), 24);
    for t in &trials.trials {
        assert_ne!(t.enroll, t.test);
        let (a, b) = (&m.utterances[t.enroll], &m.utterances[t.test]);
        assert_eq!(t.is_target, a.speaker == b.speaker);
        if t.is_target {
            assert_ne!(a.scene, b.scene);
        }
    }
    assert_eq!(build_trials(&m, 1).unwrap(), trials);
    let mut one = m.clone();
    one.utterances.retain(|u| u.speaker == m.speakers[0]);
    assert!(matches!(build_trials(&one, 1), Err(Error::Protocol(_))));
}

#[test]
fn evaluation_is_deterministic_with_one_result_per_count() {
    let (_dir, m, f) = test_split();
    let trials = build_trials(&m, 2).unwrap();
    let model = tiny_model(true);
    let a = evaluate(&model, "stb", &m, &f, &trials, &[1, 2, 4], 9).unwrap();
    let b = evaluate(&model, "stb", &m, &f, &trials, &[1, 2, 4], 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.conditions.iter().map(|c| c.channels).collect::<Vec<_>>(), vec![1, 2, 4]);
    assert_eq!(a.eer, a.condition(4).unwrap().eer);
    assert_eq!(a.scores.target.len() + a.scores.nontarget.len(), trials.trials.len());
    assert!(a.conditions.iter().all(|c| (0.0..=1.0).contains(&c.eer)));
    assert!(evaluate(&model, "stb", &m, &f, &trials, &[5], 9).is_err());
}

#[test]
fn full_channel_condition_uses_every_channel() {
    let (_dir, m, f) = test_split();
    let trials = build_trials(&m, 3).unwrap();
    let model = tiny_model(true);
    let report = evaluate(&model, "stb", &m, &f, &trials, &[4], 10).unwrap();
    let embeddings: Vec<Tensor> = f.iter().map(|x| model.embed(x).unwrap()).collect();
    let plain: Vec<f64> = trials
        .trials
        .iter()
        .filter(|t| t.is_target)
        .map(|t| cosine_score(&embeddings[t.enroll], &embeddings[t.test]).unwrap())
        .collect();
    assert_eq!(report.scores.target, plain);
}

#[test]
fn oracle_uses_manifest_channel() {
    let (_dir, mut m, f) = test_split();
    let trials = build_trials(&m, 4).unwrap();
    let single = tiny_model(false);
    let report = oracle_one_best_eval(&single, &m, &f, &trials).unwrap();
    assert_eq!(report.system, "oracle-one-best");
    let sweep = report.per_channel_rank.as_ref().unwrap();
    assert_eq!(sweep.ranks.len(), 4);
    assert_eq!(sweep.ranks[0].eer, report.eer);

    // Relabel every oracle as channel 3: the baseline must follow the manifest.
    for u in &mut m.utterances {
        u.oracle_channel = Some(3);
    }
    let relabeled = oracle_one_best_eval(&single, &m, &f, &trials).unwrap();
    let chan3: Vec<Tensor> = f.iter().map(|x| single.embed(&x.index_select(0, &[3]).unwrap()).unwrap()).collect();
    let expect: Vec<f64> = trials
        .trials
        .iter()
        .filter(|t| !t.is_target)
        .map(|t| cosine_score(&chan3[t.enroll], &chan3[t.test]).unwrap())
        .collect();
    assert_eq!(relabeled.scores.nontarget, expect);

    m.utterances[0].oracle_channel = None;
    assert!(matches!(oracle_one_best_eval(&single, &m, &f, &trials), Err(Error::Manifest(_))));
}

#[test]
fn one_channel_oracle_equals_plain_single_channel_eval() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&SimConfig { channels: 1, ..tiny_sim() }, dir.path(), 6).unwrap();
    let (m, f) = load_split(dir.path(), Split::Test).unwrap();
    let trials = build_trials(&m, 5).unwrap();
    let single = tiny_model(false);
    let oracle = oracle_one_best_eval(&single, &m, &f, &trials).unwrap();
    let plain = evaluate(&single, "single", &m, &f, &trials, &[1], 0).unwrap();
    assert_eq!(oracle.scores, plain.scores);
    assert_eq!(oracle.eer, plain.eer);
    assert_eq!(oracle.conditions, plain.conditions);
}
