//! Speaker-disjoint dataset splits written as tensor shards plus JSON manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{normalize_level, render_utterance, sample_profiles, sample_scene, speaker_frames, Scene, SceneRanges, SpeakerRanges};
use crate::rng::substream;
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::{Error, Result};

pub const SPLIT_MANIFEST: &str = "manifest.json";
pub const SCENES_FILE: &str = "scenes.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Clean single-channel utterances of the training speakers.
    Pretrain,
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub train_speakers: usize,
    pub dev_speakers: usize,
    pub test_speakers: usize,
    pub channels: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub scenes_per_speaker: usize,
    pub utterances_per_scene: usize,
    pub pretrain_utterances_per_speaker: usize,
    /// Frame hop in seconds; sets the smear decay per frame.
    pub hop_s: f64,
    /// Scale every channel to unit RMS before it reaches the model.
    pub normalize_level: bool,
    pub scene: SceneRanges,
    pub speakers: SpeakerRanges,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            train_speakers: 20,
            dev_speakers: 0,
            test_speakers: 8,
            channels: 8,
            frames: 50,
            feature_dim: 24,
            scenes_per_speaker: 4,
            utterances_per_scene: 3,
            pretrain_utterances_per_speaker: 12,
            hop_s: 0.01,
            normalize_level: true,
            scene: SceneRanges::default(),
            speakers: SpeakerRanges::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train_speakers", self.train_speakers),
            ("test_speakers", self.test_speakers),
            ("channels", self.channels),
            ("frames", self.frames),
            ("feature_dim", self.feature_dim),
            ("scenes_per_speaker", self.scenes_per_speaker),
            ("utterances_per_scene", self.utterances_per_scene),
            ("pretrain_utterances_per_speaker", self.pretrain_utterances_per_speaker),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("sim.{name} must be >= 1")));
        }
        if !(self.hop_s > 0.0 && self.hop_s.is_finite()) {
            return Err(Error::Config("sim.hop_s must be > 0".into()));
        }
        self.scene.validate()?;
        self.speakers.validate()
    }

    fn speaker_ids(&self, split: Split) -> Vec<usize> {
        let (train, dev) = (self.train_speakers, self.dev_speakers);
        match split {
            Split::Pretrain | Split::Train => (0..train).collect(),
            Split::Dev => (train..train + dev).collect(),
            Split::Test => (train + dev..train + dev + self.test_speakers).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: usize,
    /// Index into `scenes.json`; `None` for clean utterances.
    pub scene: Option<usize>,
    /// Relative to the split directory.
    pub shard_file: String,
    pub oracle_channel: Option<usize>,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: Split,
    pub speakers: Vec<usize>,
    pub channels: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub utterances: Vec<UtteranceRecord>,
}

impl DatasetManifest {
    /// Class index of each utterance: position of its speaker in `speakers`.
    pub fn labels(&self) -> Result<Vec<usize>> {
        let index: BTreeMap<usize, usize> = self.speakers.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        self.utterances
            .iter()
            .map(|u| {
                index
                    .get(&u.speaker)
                    .copied()
                    .ok_or_else(|| Error::Manifest(format!("utterance {} has unlisted speaker {}", u.id, u.speaker)))
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Fails if any speaker appears in more than one of the given manifests.
pub fn validate_disjoint(manifests: &[&DatasetManifest]) -> Result<()> {
    let mut owner: BTreeMap<usize, Split> = BTreeMap::new();
    for m in manifests {
        for &s in &m.speakers {
            if let Some(prev) = owner.insert(s, m.split) {
                return Err(Error::Validation(format!("speaker {s} appears in both {prev} and {}", m.split)));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub speakers: usize,
    pub channels: usize,
    pub frames: usize,
    pub feature_dim: usize,
    /// Utterance count per written split.
    pub utterances: BTreeMap<String, usize>,
}

struct Job {
    record: UtteranceRecord,
    stream: u64,
}

/// Samples speakers and scenes from `seed` and writes every split under `out`.
///
/// Splits without speakers (an empty dev set) are skipped.
pub fn build_dataset(config: &SimConfig, out: &Path, seed: u64) -> Result<DatasetSummary> {
    config.validate()?;
    let total = config.train_speakers + config.dev_speakers + config.test_speakers;
    let profiles = sample_profiles(total, config.feature_dim, &config.speakers, &mut substream(seed, "sim.speakers", 0))?;

    let mut scenes: Vec<Scene> = Vec::new();
    let mut manifests = Vec::new();
    let mut jobs_by_split = Vec::new();
    let mut stream = 0u64;
    for split in Split::ALL {
        let speakers = config.speaker_ids(split);
        if speakers.is_empty() {
            continue;
        }
        let clean = split == Split::Pretrain;
        let mut jobs = Vec::new();
        for &speaker in &speakers {
            if clean {
                for u in 0..config.pretrain_utterances_per_speaker {
                    let id = format!("spk{speaker:03}-clean-u{u:02}");
                    jobs.push(Job {
                        record: UtteranceRecord {
                            shard_file: format!("shards/{id}.stbt"),
                            id,
                            speaker,
                            scene: None,
                            oracle_channel: None,
                            distances: Vec::new(),
                        },
                        stream,
                    });
                    stream += 1;
                }
                continue;
            }
            for _ in 0..config.scenes_per_speaker {
                let scene_id = scenes.len();
                let scene = sample_scene(
                    &mut substream(seed, "sim.scene", scene_id as u64),
                    config.channels,
                    config.feature_dim,
                    &config.scene,
                )?;
                for u in 0..config.utterances_per_scene {
                    let id = format!("spk{speaker:03}-scene{scene_id:04}-u{u:02}");
                    jobs.push(Job {
                        record: UtteranceRecord {
                            shard_file: format!("shards/{id}.stbt"),
                            id,
                            speaker,
                            scene: Some(scene_id),
                            oracle_channel: Some(scene.oracle_channel()),
                            distances: scene.distances(),
                        },
                        stream,
                    });
                    stream += 1;
                }
                scenes.push(scene);
            }
        }
        manifests.push(DatasetManifest {
            split,
            speakers,
            channels: if clean { 1 } else { config.channels },
            frames: config.frames,
            feature_dim: config.feature_dim,
            utterances: jobs.iter().map(|j| j.record.clone()).collect(),
        });
        jobs_by_split.push(jobs);
    }
    let disjoint: Vec<&DatasetManifest> = manifests.iter().filter(|m| m.split != Split::Pretrain).collect();
    validate_disjoint(&disjoint)?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let scenes_path = out.join(SCENES_FILE);
    let text = serde_json::to_string_pretty(&scenes).map_err(|e| Error::json(&scenes_path, e))?;
    fs::write(&scenes_path, text + "\n").map_err(|e| Error::io(&scenes_path, e))?;

    let mut summary = DatasetSummary {
        speakers: total,
        channels: config.channels,
        frames: config.frames,
        feature_dim: config.feature_dim,
        utterances: BTreeMap::new(),
    };
    for (manifest, jobs) in manifests.iter().zip(jobs_by_split) {
        let dir = out.join(manifest.split.name());
        let shard_dir = dir.join("shards");
        fs::create_dir_all(&shard_dir).map_err(|e| Error::io(&shard_dir, e))?;
        jobs.par_iter().try_for_each(|job| -> Result<()> {
            let mut rng = substream(seed, "sim.utterance", job.stream);
            let profile = &profiles[job.record.speaker];
            let mut features = match job.record.scene {
                None => {
                    let frames = speaker_frames(profile, config.frames, &mut rng);
                    frames.reshape([1, config.frames, config.feature_dim])?
                }
                Some(s) => render_utterance(profile, &scenes[s], s, config.frames, config.hop_s, &mut rng)?.features,
            };
            if config.normalize_level {
                normalize_level(&mut features);
            }
            write_tensor(dir.join(&job.record.shard_file), &features)
        })?;
        manifest.write(&dir.join(SPLIT_MANIFEST))?;
        summary.utterances.insert(manifest.split.name().to_string(), manifest.utterances.len());
    }
    Ok(summary)
}

/// Reads one split's manifest and all its shards, checking their shapes.
pub fn load_split(dataset: &Path, split: Split) -> Result<(DatasetManifest, Vec<Tensor>)> {
    let dir = dataset.join(split.name());
    let manifest = DatasetManifest::read(&dir.join(SPLIT_MANIFEST))?;
    if manifest.split != split {
        return Err(Error::Manifest(format!("{} lists split {}", dir.display(), manifest.split)));
    }
    let speakers: BTreeSet<usize> = manifest.speakers.iter().copied().collect();
    let expected = [manifest.channels, manifest.frames, manifest.feature_dim];
    let features = manifest
        .utterances
        .iter()
        .map(|u| {
            if !speakers.contains(&u.speaker) {
                return Err(Error::Manifest(format!("utterance {} has unlisted speaker {}", u.id, u.speaker)));
            }
            let path = dir.join(&u.shard_file);
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            let t = read_tensor(&path)?;
            if t.shape() != expected {
                return Err(Error::Manifest(format!(
                    "{}: shape {:?}, manifest says {expected:?}",
                    u.id,
                    t.shape()
                )));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, features))
}
