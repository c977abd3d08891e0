//! Dataset layout on disk.
//!
//! One directory per sequence: `frame_%04d.ppm`, `states.csv` (state +
//! pose per frame), `keypoints.csv` (10x6 floats per frame), `audio.wav`
//! (PCM16 mono 16 kHz), and `meta.txt`. The root holds `manifest.csv`
//! (sequence, identity, emotion, split, twin pairing) and `config.txt`.
//!
//! Emotional sequences get a neutral twin: same identity, audio envelope,
//! and pose trajectory with the emotion removed. The twin is the paired
//! supervision for displacement learning and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    smooth_envelope, smooth_pose_trajectory, synth_sequence, synth_speech, EmotionCategory,
    EmotionLabel, PoseVec, PuppetError, PuppetIdentity, PuppetState, FPS,
};
use crate::audiofeat::{read_wav, write_wav_pcm16};
use crate::motion::{Image, KeypointSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn from_name(s: &str) -> Result<Self, PuppetError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(PuppetError::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

/// Generation request for [`write_dataset`].
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub sequences: usize,
    pub frames: usize,
    pub seed: u64,
    pub emotions: Vec<EmotionCategory>,
    pub identities: usize,
    pub height: usize,
    pub width: usize,
    /// Scales the random pose motion; 0 freezes the head.
    pub pose_amplitude: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), PuppetError> {
        if self.sequences == 0 || self.frames == 0 || self.identities == 0 {
            return Err(PuppetError::Contract(
                "dataset needs sequences, frames, and identities".to_string(),
            ));
        }
        if self.emotions.is_empty() {
            return Err(PuppetError::Contract("empty emotion list".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub dir: String,
    pub identity_id: usize,
    pub emotion: EmotionCategory,
    pub intensity: f64,
    pub split: Split,
    /// Directory of the neutral twin (for emotional sequences) or of the
    /// emotional original (for twins).
    pub pair: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SequenceMeta {
    pub seed: u64,
    pub identity_id: usize,
    pub identity: PuppetIdentity,
    pub emotion: EmotionLabel,
    pub fps: usize,
    pub pair: Option<String>,
}

pub struct LoadedSequence {
    pub meta: SequenceMeta,
    pub frames: Vec<Image>,
    pub states: Vec<PuppetState>,
    pub keypoints: Vec<KeypointSet>,
    pub audio: Vec<f64>,
}

impl LoadedSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Audio envelope as recorded in the states (mouth_open column).
    pub fn envelope(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.mouth_open).collect()
    }

    pub fn poses(&self) -> Vec<PoseVec> {
        self.states.iter().map(|s| s.pose).collect()
    }
}

/// Derives an independent deterministic stream from the master seed.
pub fn sub_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag.wrapping_mul(0x2545_F491_4F6C_DD1D)),
    )
}

fn split_for_identity(identity: usize, identities: usize) -> Split {
    // 80/10/10 by identity index, with at least one identity per split
    // whenever there are three or more identities.
    if identities < 3 {
        return Split::Train;
    }
    let n_test = (identities / 10).max(1);
    let n_val = (identities / 10).max(1);
    let n_train = identities - n_val - n_test;
    if identity < n_train {
        Split::Train
    } else if identity < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

struct SequenceJob {
    dir: String,
    identity_id: usize,
    emotion: EmotionLabel,
    envelope: Vec<f64>,
    poses: Vec<PoseVec>,
    pair: Option<String>,
    seq_seed: u64,
}

/// Generates and writes a dataset. Byte-identical for equal specs.
pub fn write_dataset(root: &Path, spec: &DatasetSpec) -> Result<Vec<ManifestEntry>, PuppetError> {
    spec.validate()?;
    fs::create_dir_all(root)?;

    let identities: Vec<PuppetIdentity> = (0..spec.identities)
        .map(|i| PuppetIdentity::sample(&mut sub_rng(spec.seed, 1000 + i as u64)))
        .collect();

    // Enumerate jobs: one per requested sequence, plus a neutral twin for
    // every emotional sequence.
    let mut jobs: Vec<SequenceJob> = Vec::new();
    let mut dir_counter = 0usize;
    let mut next_dir = |counter: &mut usize| {
        let name = format!("seq_{:04}", *counter);
        *counter += 1;
        name
    };
    for i in 0..spec.sequences {
        let category = spec.emotions[i % spec.emotions.len()];
        let identity_id = (i / spec.emotions.len()) % spec.identities;
        let seq_seed = spec.seed ^ (0x5EED_0000 + i as u64);
        let intensity = if category == EmotionCategory::Neutral {
            0.0
        } else {
            sub_rng(seq_seed, 3).gen_range(0.55..1.0)
        };
        let emotion = EmotionLabel { category, intensity };
        let envelope = smooth_envelope(spec.frames, &mut sub_rng(seq_seed, 1));
        let poses =
            smooth_pose_trajectory(spec.frames, spec.pose_amplitude, &mut sub_rng(seq_seed, 2));

        let main_dir = next_dir(&mut dir_counter);
        if category == EmotionCategory::Neutral {
            jobs.push(SequenceJob {
                dir: main_dir,
                identity_id,
                emotion,
                envelope,
                poses,
                pair: None,
                seq_seed,
            });
        } else {
            let twin_dir = next_dir(&mut dir_counter);
            jobs.push(SequenceJob {
                dir: main_dir.clone(),
                identity_id,
                emotion,
                envelope: envelope.clone(),
                poses: poses.clone(),
                pair: Some(twin_dir.clone()),
                seq_seed,
            });
            jobs.push(SequenceJob {
                dir: twin_dir,
                identity_id,
                emotion: EmotionLabel::neutral(),
                envelope,
                poses,
                pair: Some(main_dir),
                seq_seed,
            });
        }
    }

    let mut manifest = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let id = &identities[job.identity_id];
        let frames = synth_sequence(
            id,
            job.emotion,
            &job.envelope,
            &job.poses,
            spec.height,
            spec.width,
        )?;
        let dir = root.join(&job.dir);
        fs::create_dir_all(&dir)?;

        for (t, frame) in frames.iter().enumerate() {
            let mut file = fs::File::create(dir.join(format!("frame_{t:04}.ppm")))?;
            frame.image.write_ppm(&mut file)?;
        }

        let mut states = String::from(
            "mouth_open,mouth_curl,brow_raise,brow_tilt,eye_open,roll,yaw_shear,pitch_shear,tx,ty,scale\n",
        );
        for f in &frames {
            let s = &f.state;
            let p = s.pose.to_array();
            states.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                s.mouth_open,
                s.mouth_curl,
                s.brow_raise,
                s.brow_tilt,
                s.eye_open,
                p[0],
                p[1],
                p[2],
                p[3],
                p[4],
                p[5]
            ));
        }
        fs::write(dir.join("states.csv"), states)?;

        let mut kp_csv = String::new();
        for k in 0..frames[0].keypoints.len() {
            if k > 0 {
                kp_csv.push(',');
            }
            kp_csv.push_str(&format!(
                "k{k}_x,k{k}_y,k{k}_j00,k{k}_j01,k{k}_j10,k{k}_j11"
            ));
        }
        kp_csv.push('\n');
        for f in &frames {
            let flat = f.keypoints.to_flat();
            let row: Vec<String> = flat.iter().map(|v| v.to_string()).collect();
            kp_csv.push_str(&row.join(","));
            kp_csv.push('\n');
        }
        fs::write(dir.join("keypoints.csv"), kp_csv)?;

        let speech = synth_speech(&job.envelope, id.base_freq);
        let mut wav = fs::File::create(dir.join("audio.wav"))?;
        write_wav_pcm16(&mut wav, &speech)?;

        let meta = format!(
            "seed={}\nidentity_id={}\nface_width={}\nface_height={}\neye_spacing={}\nfeature_scale={}\nskin_r={}\nskin_g={}\nskin_b={}\nfeat_r={}\nfeat_g={}\nfeat_b={}\nbase_freq={}\nemotion={}\nintensity={}\nfps={}\npair={}\n",
            job.seq_seed,
            job.identity_id,
            id.face_width,
            id.face_height,
            id.eye_spacing,
            id.feature_scale,
            id.skin_rgb[0],
            id.skin_rgb[1],
            id.skin_rgb[2],
            id.feature_rgb[0],
            id.feature_rgb[1],
            id.feature_rgb[2],
            id.base_freq,
            job.emotion.category.name(),
            job.emotion.intensity,
            FPS,
            job.pair.as_deref().unwrap_or("-"),
        );
        fs::write(dir.join("meta.txt"), meta)?;

        manifest.push(ManifestEntry {
            dir: job.dir.clone(),
            identity_id: job.identity_id,
            emotion: job.emotion.category,
            intensity: job.emotion.intensity,
            split: split_for_identity(job.identity_id, spec.identities),
            pair: job.pair.clone(),
        });
    }

    let mut csv = String::from("dir,identity_id,emotion,intensity,split,pair\n");
    for e in &manifest {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.dir,
            e.identity_id,
            e.emotion.name(),
            e.intensity,
            e.split.name(),
            e.pair.as_deref().unwrap_or("-"),
        ));
    }
    fs::write(root.join("manifest.csv"), csv)?;

    let config = format!(
        "version={}\nsequences={}\nframes={}\nseed={}\nidentities={}\nheight={}\nwidth={}\npose_amplitude={}\nemotions={}\n",
        crate::VERSION,
        spec.sequences,
        spec.frames,
        spec.seed,
        spec.identities,
        spec.height,
        spec.width,
        spec.pose_amplitude,
        spec.emotions
            .iter()
            .map(|e| e.name())
            .collect::<Vec<_>>()
            .join("+"),
    );
    fs::write(root.join("config.txt"), config)?;

    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<Vec<ManifestEntry>, PuppetError> {
    let text = fs::read_to_string(root.join("manifest.csv"))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(PuppetError::Dataset(format!("bad manifest row {line:?}")));
        }
        out.push(ManifestEntry {
            dir: f[0].to_string(),
            identity_id: parse_field(f[1], "identity_id")?,
            emotion: EmotionCategory::from_name(f[2])?,
            intensity: parse_field(f[3], "intensity")?,
            split: Split::from_name(f[4])?,
            pair: if f[5] == "-" { None } else { Some(f[5].to_string()) },
        });
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str) -> Result<T, PuppetError> {
    s.parse()
        .map_err(|_| PuppetError::Dataset(format!("bad {name} value {s:?}")))
}

fn meta_value<'a>(meta: &'a str, key: &str) -> Result<&'a str, PuppetError> {
    meta.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .ok_or_else(|| PuppetError::Dataset(format!("meta missing {key}")))
}

pub fn load_sequence(dir: &Path) -> Result<LoadedSequence, PuppetError> {
    let meta_text = fs::read_to_string(dir.join("meta.txt"))?;
    let identity = PuppetIdentity {
        face_width: parse_field(meta_value(&meta_text, "face_width")?, "face_width")?,
        face_height: parse_field(meta_value(&meta_text, "face_height")?, "face_height")?,
        eye_spacing: parse_field(meta_value(&meta_text, "eye_spacing")?, "eye_spacing")?,
        feature_scale: parse_field(meta_value(&meta_text, "feature_scale")?, "feature_scale")?,
        skin_rgb: [
            parse_field(meta_value(&meta_text, "skin_r")?, "skin_r")?,
            parse_field(meta_value(&meta_text, "skin_g")?, "skin_g")?,
            parse_field(meta_value(&meta_text, "skin_b")?, "skin_b")?,
        ],
        feature_rgb: [
            parse_field(meta_value(&meta_text, "feat_r")?, "feat_r")?,
            parse_field(meta_value(&meta_text, "feat_g")?, "feat_g")?,
            parse_field(meta_value(&meta_text, "feat_b")?, "feat_b")?,
        ],
        base_freq: parse_field(meta_value(&meta_text, "base_freq")?, "base_freq")?,
    };
    let pair = match meta_value(&meta_text, "pair")? {
        "-" => None,
        p => Some(p.to_string()),
    };
    let meta = SequenceMeta {
        seed: parse_field(meta_value(&meta_text, "seed")?, "seed")?,
        identity_id: parse_field(meta_value(&meta_text, "identity_id")?, "identity_id")?,
        identity,
        emotion: EmotionLabel {
            category: EmotionCategory::from_name(meta_value(&meta_text, "emotion")?)?,
            intensity: parse_field(meta_value(&meta_text, "intensity")?, "intensity")?,
        },
        fps: parse_field(meta_value(&meta_text, "fps")?, "fps")?,
        pair,
    };

    let states_text = fs::read_to_string(dir.join("states.csv"))?;
    let mut states = Vec::new();
    for line in states_text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|s| parse_field(s, "state"))
            .collect::<Result<_, _>>()?;
        if v.len() != 11 {
            return Err(PuppetError::Dataset(format!("bad states row {line:?}")));
        }
        states.push(PuppetState {
            mouth_open: v[0],
            mouth_curl: v[1],
            brow_raise: v[2],
            brow_tilt: v[3],
            eye_open: v[4],
            pose: PoseVec::from_array([v[5], v[6], v[7], v[8], v[9], v[10]]),
        });
    }

    let kp_text = fs::read_to_string(dir.join("keypoints.csv"))?;
    let mut keypoints = Vec::new();
    for line in kp_text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|s| parse_field(s, "keypoint"))
            .collect::<Result<_, _>>()?;
        keypoints.push(KeypointSet::from_flat(&v)?);
    }

    let mut frames = Vec::with_capacity(states.len());
    for t in 0..states.len() {
        let mut file = fs::File::open(dir.join(format!("frame_{t:04}.ppm")))?;
        frames.push(Image::read_ppm(&mut file)?);
    }

    let wav_bytes = fs::read(dir.join("audio.wav"))?;
    let audio = read_wav(&wav_bytes)
        .map_err(|e| PuppetError::Dataset(format!("audio.wav: {e}")))?
        .samples()
        .to_vec();

    if frames.len() != states.len() || keypoints.len() != states.len() {
        return Err(PuppetError::Dataset(format!(
            "sequence {dir:?} has inconsistent lengths: {} frames, {} states, {} keypoint rows",
            frames.len(),
            states.len(),
            keypoints.len()
        )));
    }

    Ok(LoadedSequence { meta, frames, states, keypoints, audio })
}

/// Convenience: load the sequence directory named by a manifest entry.
pub fn load_entry(root: &Path, entry: &ManifestEntry) -> Result<LoadedSequence, PuppetError> {
    load_sequence(&root.join(&entry.dir))
}

/// Root-relative path of a sequence's directory.
pub fn sequence_path(root: &Path, entry: &ManifestEntry) -> PathBuf {
    root.join(&entry.dir)
}
