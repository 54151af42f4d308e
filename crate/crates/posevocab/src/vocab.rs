//! Vocabulary construction.
//!
//! A vocabulary holds, per joint, key rotations sampled from the training
//! sequence by farthest-point sampling under the rotation distance, paired
//! with one feature-line embedding per key on every spatial scale. Key
//! rotations are sampled once per joint with the largest key budget and
//! shared across scales as a prefix: greedy farthest-point sampling is
//! prefix-stable, so a scale with a smaller budget simply takes the first
//! picks.
//!
//! Everything a build produces is quantized to f32 precision (the on-disk
//! representation), so a freshly built vocabulary survives a save/load round
//! trip bit for bit.

use crate::error::{Error, Result};
use crate::feature_lines::{FeatureLines, ScaleConfig};
use crate::rotation::{rotation_distance, AxisAngle, UnitQuat, DISTINCT_ROTATION_EPS};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// A training sequence: `T` frames of `J` axis-angle joint rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    joint_names: Vec<String>,
    frames: Vec<Vec<AxisAngle>>,
    timestamps: Option<Vec<f64>>,
}

impl PoseSequence {
    pub fn new(
        joint_names: Vec<String>,
        frames: Vec<Vec<AxisAngle>>,
        timestamps: Option<Vec<f64>>,
    ) -> Result<Self> {
        if joint_names.is_empty() {
            return Err(Error::invalid("pose sequence needs at least one joint"));
        }
        if frames.is_empty() {
            return Err(Error::invalid("pose sequence needs at least one frame"));
        }
        for name in &joint_names {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!(
                    "joint name {name:?} must be a non-empty whitespace-free token"
                )));
            }
        }
        let mut sorted = joint_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != joint_names.len() {
            return Err(Error::invalid("joint names must be unique"));
        }
        for (t, frame) in frames.iter().enumerate() {
            if frame.len() != joint_names.len() {
                return Err(Error::DimensionMismatch {
                    context: format!("frame {t}"),
                    expected: joint_names.len(),
                    got: frame.len(),
                });
            }
        }
        if let Some(ts) = &timestamps {
            if ts.len() != frames.len() {
                return Err(Error::DimensionMismatch {
                    context: "timestamps".to_string(),
                    expected: frames.len(),
                    got: ts.len(),
                });
            }
            if ts.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite("timestamps"));
            }
        }
        Ok(Self {
            joint_names,
            frames,
            timestamps,
        })
    }

    /// `joint00`, `joint01`, ... used when a source carries no names.
    pub fn default_joint_names(count: usize) -> Vec<String> {
        (0..count).map(|j| format!("joint{j:02}")).collect()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn frame(&self, t: usize) -> &[AxisAngle] {
        &self.frames[t]
    }

    pub fn rotation(&self, frame: usize, joint: usize) -> &AxisAngle {
        &self.frames[frame][joint]
    }

    pub fn timestamps(&self) -> Option<&[f64]> {
        self.timestamps.as_deref()
    }

    /// All rotations of one joint across frames, as canonical f32-quantized
    /// quaternions (the precision keys are stored at).
    pub fn joint_quats(&self, joint: usize) -> Vec<UnitQuat> {
        self.frames
            .iter()
            .map(|f| f[joint].to_quat().quantized_f32())
            .collect()
    }

    /// Drops the named joints (silently skipping names that do not occur).
    /// Root and hand joints are conventionally excluded from vocabularies.
    pub fn excluding(&self, names: &[&str]) -> Result<PoseSequence> {
        let keep: Vec<usize> = (0..self.joint_count())
            .filter(|&j| !names.contains(&self.joint_names[j].as_str()))
            .collect();
        if keep.is_empty() {
            return Err(Error::invalid("excluding every joint leaves an empty sequence"));
        }
        let joint_names = keep.iter().map(|&j| self.joint_names[j].clone()).collect();
        let frames = self
            .frames
            .iter()
            .map(|f| keep.iter().map(|&j| f[j]).collect())
            .collect();
        PoseSequence::new(joint_names, frames, self.timestamps.clone())
    }
}

/// Axis-aligned bounding box of the canonical space; query points normalize
/// into `[0, 1]^3` against it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for axis in 0..3 {
            if !min[axis].is_finite() || !max[axis].is_finite() {
                return Err(Error::non_finite("bounding box"));
            }
            if max[axis] - min[axis] <= 0.0 {
                return Err(Error::invalid(format!(
                    "bounding box extent on axis {axis} must be strictly positive"
                )));
            }
        }
        Ok(Self { min, max })
    }

    pub fn unit() -> Self {
        Self {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    /// Maps a canonical-space point into `[0, 1]^3`, clamping points that
    /// fall slightly outside the box (animation queries must not fail).
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for axis in 0..3 {
            out[axis] = ((p[axis] - self.min[axis]) / (self.max[axis] - self.min[axis]))
                .clamp(0.0, 1.0);
        }
        out
    }
}

/// How fresh embeddings are filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitPolicy {
    Zeros,
    /// Entries uniform in `[-amplitude, amplitude]` from the build seed.
    Uniform { amplitude: f64 },
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::Uniform { amplitude: 1e-2 }
    }
}

/// Key rotations and per-scale embeddings of one joint.
#[derive(Debug, Clone, PartialEq)]
pub struct JointVocab {
    key_rotations: Vec<UnitQuat>,
    embeddings: Vec<Vec<FeatureLines>>,
}

impl JointVocab {
    pub(crate) fn from_parts(
        key_rotations: Vec<UnitQuat>,
        embeddings: Vec<Vec<FeatureLines>>,
        scales: &[ScaleConfig],
    ) -> Result<Self> {
        if key_rotations.is_empty() {
            return Err(Error::invalid("a joint vocabulary needs at least one key"));
        }
        for (a, qa) in key_rotations.iter().enumerate() {
            for qb in key_rotations.iter().skip(a + 1) {
                if rotation_distance(qa, qb) <= DISTINCT_ROTATION_EPS {
                    return Err(Error::invalid(
                        "key rotations of one joint must be pairwise distinct",
                    ));
                }
            }
        }
        if embeddings.len() != scales.len() {
            return Err(Error::DimensionMismatch {
                context: "embedding scales".to_string(),
                expected: scales.len(),
                got: embeddings.len(),
            });
        }
        for (s, (per_key, cfg)) in embeddings.iter().zip(scales).enumerate() {
            let expected = cfg.key_count.min(key_rotations.len());
            if per_key.len() != expected {
                return Err(Error::DimensionMismatch {
                    context: format!("scale {s} embedding count"),
                    expected,
                    got: per_key.len(),
                });
            }
            for fl in per_key {
                if fl.resolution() != cfg.resolution || fl.channels() != cfg.channels {
                    return Err(Error::invalid(format!(
                        "scale {s} embedding shape does not match its scale config"
                    )));
                }
            }
        }
        Ok(Self {
            key_rotations,
            embeddings,
        })
    }

    /// All sampled keys, in farthest-point pick order.
    pub fn key_rotations(&self) -> &[UnitQuat] {
        &self.key_rotations
    }

    /// Keys visible to one scale (a prefix of the pick order).
    pub fn keys_for_scale(&self, scale: usize) -> &[UnitQuat] {
        &self.key_rotations[..self.embeddings[scale].len()]
    }

    pub fn key_count(&self, scale: usize) -> usize {
        self.embeddings[scale].len()
    }

    pub fn embedding(&self, scale: usize, key: usize) -> &FeatureLines {
        &self.embeddings[scale][key]
    }

    pub(crate) fn embedding_mut(&mut self, scale: usize, key: usize) -> &mut FeatureLines {
        &mut self.embeddings[scale][key]
    }
}

/// The vocabulary: per-joint keys and embeddings plus the scale list and the
/// canonical-space bounding box. Immutable once built; the fitting module
/// mutates embeddings through crate-internal accessors only.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseVocab {
    joint_names: Vec<String>,
    joints: Vec<JointVocab>,
    scales: Vec<ScaleConfig>,
    bbox: Aabb,
    seed: u64,
    source_hash: u64,
}

impl PoseVocab {
    pub(crate) fn from_parts(
        joint_names: Vec<String>,
        joints: Vec<JointVocab>,
        scales: Vec<ScaleConfig>,
        bbox: Aabb,
        seed: u64,
        source_hash: u64,
    ) -> Result<Self> {
        if joints.is_empty() || joint_names.len() != joints.len() {
            return Err(Error::invalid(
                "vocabulary needs one named entry per joint",
            ));
        }
        if scales.is_empty() {
            return Err(Error::invalid("vocabulary needs at least one scale"));
        }
        Ok(Self {
            joint_names,
            joints,
            scales,
            bbox,
            seed,
            source_hash,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn joint(&self, j: usize) -> &JointVocab {
        &self.joints[j]
    }

    pub(crate) fn joint_mut(&mut self, j: usize) -> &mut JointVocab {
        &mut self.joints[j]
    }

    pub fn scales(&self) -> &[ScaleConfig] {
        &self.scales
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source_hash(&self) -> u64 {
        self.source_hash
    }

    /// Trainable embedding entries across all joints, scales and keys.
    pub fn param_count(&self) -> usize {
        self.joints
            .iter()
            .map(|jv| {
                (0..self.scales.len())
                    .map(|s| jv.key_count(s) * self.scales[s].params_per_key())
                    .sum::<usize>()
            })
            .sum()
    }
}

/// Greedy farthest-point sampling over rotations, returning indices into the
/// input. The first frame's rotation seeds the walk; each following pick
/// maximizes the minimum distance to everything already picked, ties going to
/// the earlier index. Inputs closer than [`DISTINCT_ROTATION_EPS`] to an
/// already-kept rotation are duplicates, so fewer than `m` picks come back
/// when the input has fewer distinct rotations.
pub fn sample_key_rotation_indices(rotations: &[UnitQuat], m: usize) -> Result<Vec<usize>> {
    if rotations.is_empty() {
        return Err(Error::invalid("cannot sample keys from an empty rotation set"));
    }
    Ok(fps_indices(rotations, m, DISTINCT_ROTATION_EPS, |a, b| {
        rotation_distance(a, b)
    }))
}

/// Indices of the first occurrences in `items`, dropping anything within
/// `distinct_eps` of an earlier keeper.
pub(crate) fn distinct_indices<T>(
    items: &[T],
    distinct_eps: f64,
    dist: impl Fn(&T, &T) -> f64,
) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..items.len() {
        if kept.iter().all(|&k| dist(&items[k], &items[i]) > distinct_eps) {
            kept.push(i);
        }
    }
    kept
}

/// Greedy farthest-point sampling over any metric, seeded at the first
/// distinct item. Ties break toward the earlier candidate.
pub(crate) fn fps_indices<T>(
    items: &[T],
    m: usize,
    distinct_eps: f64,
    dist: impl Fn(&T, &T) -> f64,
) -> Vec<usize> {
    let distinct = distinct_indices(items, distinct_eps, &dist);
    let target = m.min(distinct.len());
    let mut picked: Vec<usize> = Vec::with_capacity(target);
    if target == 0 {
        return picked;
    }
    picked.push(distinct[0]);
    // min distance from each distinct candidate to the picked set
    let mut min_dist: Vec<f64> = distinct
        .iter()
        .map(|&c| dist(&items[distinct[0]], &items[c]))
        .collect();
    while picked.len() < target {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (slot, &d) in min_dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = slot;
            }
        }
        let chosen = distinct[best];
        picked.push(chosen);
        for (slot, &c) in distinct.iter().enumerate() {
            let d = dist(&items[chosen], &items[c]);
            if d < min_dist[slot] {
                min_dist[slot] = d;
            }
        }
    }
    picked
}

/// [`sample_key_rotation_indices`] resolved to the rotations themselves.
pub fn sample_key_rotations(rotations: &[UnitQuat], m: usize) -> Result<Vec<UnitQuat>> {
    Ok(sample_key_rotation_indices(rotations, m)?
        .into_iter()
        .map(|i| rotations[i])
        .collect())
}

/// Builds a vocabulary from a training sequence. Deterministic given
/// `(seq, scales, seed)`: embedding initialization streams from a per-joint
/// generator seeded by the build seed and the joint name, so permuting joints
/// in the input permutes the output and changes nothing else.
pub fn build_vocab(
    seq: &PoseSequence,
    scales: &[ScaleConfig],
    bbox: Aabb,
    init: InitPolicy,
    seed: u64,
) -> Result<PoseVocab> {
    if scales.is_empty() {
        return Err(Error::invalid("vocabulary needs at least one scale"));
    }
    if let InitPolicy::Uniform { amplitude } = init {
        if !(amplitude.is_finite() && amplitude > 0.0) {
            return Err(Error::invalid("init amplitude must be positive and finite"));
        }
    }
    let max_keys = scales.iter().map(|s| s.key_count).max().unwrap();
    let mut joints = Vec::with_capacity(seq.joint_count());
    for j in 0..seq.joint_count() {
        let quats = seq.joint_quats(j);
        let keys = sample_key_rotations(&quats, max_keys)?;
        let mut rng = ChaCha8Rng::seed_from_u64(joint_seed(seed, &seq.joint_names()[j]));
        let mut embeddings = Vec::with_capacity(scales.len());
        for cfg in scales {
            let count = cfg.key_count.min(keys.len());
            let mut per_key = Vec::with_capacity(count);
            for _ in 0..count {
                per_key.push(init_lines(cfg, init, &mut rng)?);
            }
            embeddings.push(per_key);
        }
        joints.push(JointVocab::from_parts(keys, embeddings, scales)?);
    }
    PoseVocab::from_parts(
        seq.joint_names().to_vec(),
        joints,
        scales.to_vec(),
        bbox,
        seed,
        sequence_hash(seq),
    )
}

fn init_lines(cfg: &ScaleConfig, init: InitPolicy, rng: &mut ChaCha8Rng) -> Result<FeatureLines> {
    match init {
        InitPolicy::Zeros => FeatureLines::zeros(cfg.resolution, cfg.channels),
        InitPolicy::Uniform { amplitude } => {
            let mut fill = |rows: usize| -> Vec<f64> {
                (0..rows * cfg.channels)
                    // f32 quantization keeps save/load lossless from the start
                    .map(|_| rng.gen_range(-amplitude..=amplitude) as f32 as f64)
                    .collect()
            };
            let lines = [
                fill(cfg.resolution[0]),
                fill(cfg.resolution[1]),
                fill(cfg.resolution[2]),
            ];
            FeatureLines::new(cfg.resolution, cfg.channels, lines)
        }
    }
}

pub(crate) fn joint_seed(seed: u64, joint_name: &str) -> u64 {
    let mut h = fnv1a64_init();
    h = fnv1a64_update(h, &seed.to_le_bytes());
    fnv1a64_update(h, joint_name.as_bytes())
}

/// FNV-1a over joint names and rotation bit patterns; recorded in build
/// metadata so a vocabulary can be matched back to its source sequence.
pub fn sequence_hash(seq: &PoseSequence) -> u64 {
    let mut h = fnv1a64_init();
    for name in seq.joint_names() {
        h = fnv1a64_update(h, name.as_bytes());
        h = fnv1a64_update(h, &[0]);
    }
    for t in 0..seq.frame_count() {
        for aa in seq.frame(t) {
            for c in aa.components() {
                h = fnv1a64_update(h, &c.to_bits().to_le_bytes());
            }
        }
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64_init() -> u64 {
    FNV_OFFSET
}

fn fnv1a64_update(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Per-joint, per-scale size and coverage report.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabStats {
    pub joints: Vec<JointStats>,
    pub total_params: usize,
    pub total_bytes_f32: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointStats {
    pub name: String,
    pub scales: Vec<ScaleStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleStats {
    pub key_count: usize,
    /// Max over training rotations of the distance to the nearest key;
    /// `None` when no training sequence was supplied.
    pub coverage_radius: Option<f64>,
    pub param_count: usize,
    pub bytes_f32: usize,
}

/// Key counts, embedding sizes and (when the training sequence is at hand)
/// coverage radii of a vocabulary.
pub fn vocab_stats(vocab: &PoseVocab, training: Option<&PoseSequence>) -> Result<VocabStats> {
    if let Some(seq) = training {
        if seq.joint_count() != vocab.joint_count() {
            return Err(Error::DimensionMismatch {
                context: "training sequence joints".to_string(),
                expected: vocab.joint_count(),
                got: seq.joint_count(),
            });
        }
    }
    let mut joints = Vec::with_capacity(vocab.joint_count());
    let mut total_params = 0usize;
    for j in 0..vocab.joint_count() {
        let jv = vocab.joint(j);
        let train_quats = training.map(|seq| seq.joint_quats(j));
        let mut scales = Vec::with_capacity(vocab.scales().len());
        for (s, cfg) in vocab.scales().iter().enumerate() {
            let keys = jv.keys_for_scale(s);
            let coverage_radius = train_quats.as_ref().map(|quats| {
                quats
                    .iter()
                    .map(|q| {
                        keys.iter()
                            .map(|k| rotation_distance(q, k))
                            .fold(f64::INFINITY, f64::min)
                    })
                    .fold(0.0, f64::max)
            });
            let param_count = jv.key_count(s) * cfg.params_per_key();
            total_params += param_count;
            scales.push(ScaleStats {
                key_count: jv.key_count(s),
                coverage_radius,
                param_count,
                bytes_f32: param_count * 4,
            });
        }
        joints.push(JointStats {
            name: vocab.joint_names()[j].clone(),
            scales,
        });
    }
    Ok(VocabStats {
        joints,
        total_params,
        total_bytes_f32: total_params * 4,
    })
}
