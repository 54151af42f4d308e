//! Hierarchical queries against a vocabulary.
//!
//! A query runs in three levels. Joint level: the pose vector splits into
//! per-joint rotations. Key-rotation level: each joint rotation finds its K
//! nearest key rotations and blends their embeddings with weights
//! `w = 1 - d`, normalized. Spatial level: the blended feature lines are
//! sampled at the query point, gated by the joint's influence weight, and
//! the per-joint blocks concatenate joint-major, then scale, then axis.
//!
//! Blending the lines and then sampling equals sampling and then blending
//! (both are linear); the query path blends first.
//!
//! All operations are pure reads on an immutable vocabulary and safe to run
//! concurrently.

use crate::error::{Error, Result};
use crate::feature_lines::{blend, FeatureLines};
use crate::rotation::{rotation_distance, AxisAngle, UnitQuat};
use crate::vocab::{JointVocab, PoseVocab};

/// A query pose: one axis-angle rotation per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    rotations: Vec<AxisAngle>,
}

impl Pose {
    pub fn new(rotations: Vec<AxisAngle>) -> Self {
        Self { rotations }
    }

    pub fn joint_count(&self) -> usize {
        self.rotations.len()
    }

    pub fn rotation(&self, joint: usize) -> &AxisAngle {
        &self.rotations[joint]
    }

    pub fn rotations(&self) -> &[AxisAngle] {
        &self.rotations
    }
}

/// Per-point, per-joint gate `w(point, joint)` in `[0, 1]`, the stand-in for
/// skinning-derived joint influence. Callers with real skinning weights use
/// [`InfluenceWeights::PerJoint`]; [`InfluenceWeights::Uniform`] is the
/// fallback.
#[derive(Debug, Clone, PartialEq)]
pub enum InfluenceWeights {
    /// Every joint fully influences every point.
    Uniform,
    /// One constant weight per joint, independent of the point.
    PerJoint(Vec<f64>),
    /// Smooth spatial falloff `exp(-|p - c_j|^2 / (2 sigma^2))` around one
    /// center per joint; strictly positive everywhere.
    Gaussian {
        centers: Vec<[f64; 3]>,
        sigma: f64,
    },
}

impl InfluenceWeights {
    pub fn per_joint(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("influence weights need at least one joint"));
        }
        for w in &weights {
            if !w.is_finite() || !(0.0..=1.0).contains(w) {
                return Err(Error::invalid(format!(
                    "influence weight {w} outside [0, 1]"
                )));
            }
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid(
                "at least one joint needs a positive influence weight",
            ));
        }
        Ok(Self::PerJoint(weights))
    }

    pub fn gaussian(centers: Vec<[f64; 3]>, sigma: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::invalid("influence weights need at least one joint"));
        }
        if centers.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::non_finite("influence weight centers"));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid("influence sigma must be positive"));
        }
        Ok(Self::Gaussian { centers, sigma })
    }

    pub fn weight(&self, point: [f64; 3], joint: usize) -> f64 {
        match self {
            Self::Uniform => 1.0,
            Self::PerJoint(ws) => ws[joint],
            Self::Gaussian { centers, sigma } => {
                let c = centers[joint];
                let d2 = (point[0] - c[0]).powi(2)
                    + (point[1] - c[1]).powi(2)
                    + (point[2] - c[2]).powi(2);
                (-d2 / (2.0 * sigma * sigma)).exp()
            }
        }
    }

    pub(crate) fn check_joints(&self, joint_count: usize) -> Result<()> {
        let got = match self {
            Self::Uniform => return Ok(()),
            Self::PerJoint(ws) => ws.len(),
            Self::Gaussian { centers, .. } => centers.len(),
        };
        if got != joint_count {
            return Err(Error::DimensionMismatch {
                context: "influence weights".to_string(),
                expected: joint_count,
                got,
            });
        }
        Ok(())
    }
}

/// Fixed layout of a pose feature: per joint, per scale, one block of
/// `3 * channels` values. A pure function of the vocabulary configuration,
/// never of the pose or point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    joints: usize,
    per_scale_dims: Vec<usize>,
}

impl FeatureLayout {
    pub fn of(vocab: &PoseVocab) -> Self {
        Self {
            joints: vocab.joint_count(),
            per_scale_dims: vocab.scales().iter().map(|s| 3 * s.channels).collect(),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn scale_count(&self) -> usize {
        self.per_scale_dims.len()
    }

    /// Length of the (joint, scale) block: three axes times the channel count.
    pub fn block_len(&self, scale: usize) -> usize {
        self.per_scale_dims[scale]
    }

    pub fn joint_stride(&self) -> usize {
        self.per_scale_dims.iter().sum()
    }

    pub fn block_offset(&self, joint: usize, scale: usize) -> usize {
        joint * self.joint_stride() + self.per_scale_dims[..scale].iter().sum::<usize>()
    }

    pub fn total_len(&self) -> usize {
        self.joints * self.joint_stride()
    }
}

/// The concatenated query output.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFeature {
    values: Vec<f64>,
}

impl PoseFeature {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// K nearest key rotations of one joint, ascending by distance, ties broken
/// by the smaller key index. Asking for more neighbors than keys returns all
/// keys.
pub fn knn_keys(jv: &JointVocab, theta: &AxisAngle, k: usize) -> Vec<(usize, f64)> {
    knn_over(jv.key_rotations(), &theta.to_quat(), k)
}

fn knn_over(keys: &[UnitQuat], query: &UnitQuat, k: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = keys
        .iter()
        .enumerate()
        .map(|(i, key)| (i, rotation_distance(query, key)))
        .collect();
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

/// KNN with blending weights `1 - d` already normalized, as used by both the
/// query path (through [`blend`]) and the fitting fast path.
pub(crate) fn knn_normalized(keys: &[UnitQuat], query: &UnitQuat, k: usize) -> Vec<(usize, f64)> {
    let neighbors = knn_over(keys, query, k);
    let raw: Vec<f64> = neighbors.iter().map(|&(_, d)| 1.0 - d).collect();
    let wn = crate::feature_lines::normalized_weights(&raw);
    neighbors
        .iter()
        .zip(wn)
        .map(|(&(i, _), w)| (i, w))
        .collect()
}

/// Key-rotation-level interpolation on one scale: KNN search, weights
/// `w = 1 - d`, normalized weighted sum of the neighbors' embeddings.
pub fn blend_embeddings(
    jv: &JointVocab,
    theta: &AxisAngle,
    scale: usize,
    k: usize,
) -> Result<FeatureLines> {
    let neighbors = knn_over(jv.keys_for_scale(scale), &theta.to_quat(), k);
    let parts: Vec<(f64, &FeatureLines)> = neighbors
        .iter()
        .map(|&(idx, d)| (1.0 - d, jv.embedding(scale, idx)))
        .collect();
    blend(&parts)
}

/// Per-joint, per-scale blended embeddings for one pose (the key-rotation
/// level of the hierarchy, before any spatial sampling).
pub fn blended_for_pose(vocab: &PoseVocab, pose: &Pose) -> Result<Vec<Vec<FeatureLines>>> {
    if pose.joint_count() != vocab.joint_count() {
        return Err(Error::DimensionMismatch {
            context: "query pose joints".to_string(),
            expected: vocab.joint_count(),
            got: pose.joint_count(),
        });
    }
    (0..vocab.joint_count())
        .map(|j| {
            vocab
                .scales()
                .iter()
                .enumerate()
                .map(|(s, cfg)| blend_embeddings(vocab.joint(j), pose.rotation(j), s, cfg.knn))
                .collect()
        })
        .collect()
}

/// Spatial level: samples per-joint blended embeddings at the point
/// (normalized into the vocabulary's bounding box), gates each joint block by
/// its influence weight and concatenates.
pub fn sample_blends(
    vocab: &PoseVocab,
    blends: &[Vec<FeatureLines>],
    point: [f64; 3],
    weights: &InfluenceWeights,
) -> Result<PoseFeature> {
    if point.iter().any(|c| !c.is_finite()) {
        return Err(Error::non_finite("query point"));
    }
    weights.check_joints(vocab.joint_count())?;
    let layout = FeatureLayout::of(vocab);
    let u = vocab.bbox().normalize(point);
    let mut values = vec![0.0; layout.total_len()];
    for (j, per_scale) in blends.iter().enumerate() {
        let gate = weights.weight(point, j);
        if gate == 0.0 {
            continue; // block stays exactly zero
        }
        for (s, lines) in per_scale.iter().enumerate() {
            let sampled = lines.sample(u);
            let offset = layout.block_offset(j, s);
            for (slot, v) in values[offset..offset + layout.block_len(s)]
                .iter_mut()
                .zip(&sampled)
            {
                *slot = gate * v;
            }
        }
    }
    Ok(PoseFeature { values })
}

/// The full hierarchical query for one pose and one canonical-space point.
pub fn query_pose_feature(
    vocab: &PoseVocab,
    pose: &Pose,
    point: [f64; 3],
    weights: &InfluenceWeights,
) -> Result<PoseFeature> {
    let blends = blended_for_pose(vocab, pose)?;
    sample_blends(vocab, &blends, point, weights)
}

/// Per-frame blended embeddings additionally averaged (uniform weights) over
/// a sliding window of adjacent frames, truncated at the sequence ends.
/// `window` must be odd; `window = 1` leaves the blends untouched.
pub fn smoothed_blends(
    vocab: &PoseVocab,
    poses: &[Pose],
    window: usize,
) -> Result<Vec<Vec<Vec<FeatureLines>>>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!(
            "smoothing window must be odd and >= 1, got {window}"
        )));
    }
    let per_frame: Vec<Vec<Vec<FeatureLines>>> = poses
        .iter()
        .map(|p| blended_for_pose(vocab, p))
        .collect::<Result<_>>()?;
    if window == 1 || per_frame.len() <= 1 {
        return Ok(per_frame);
    }
    let half = window / 2;
    let frames = per_frame.len();
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(frames - 1);
        let mut per_joint = Vec::with_capacity(vocab.joint_count());
        for j in 0..vocab.joint_count() {
            let mut per_scale = Vec::with_capacity(vocab.scales().len());
            for s in 0..vocab.scales().len() {
                let parts: Vec<(f64, &FeatureLines)> =
                    (lo..=hi).map(|f| (1.0, &per_frame[f][j][s])).collect();
                per_scale.push(blend(&parts)?);
            }
            per_joint.push(per_scale);
        }
        out.push(per_joint);
    }
    Ok(out)
}

/// Queries a pose sequence at one point with temporal smoothing of the
/// blended embeddings (window of 5 by default in the command-line tool).
pub fn query_sequence_smoothed(
    vocab: &PoseVocab,
    poses: &[Pose],
    point: [f64; 3],
    weights: &InfluenceWeights,
    window: usize,
) -> Result<Vec<PoseFeature>> {
    let smoothed = smoothed_blends(vocab, poses, window)?;
    smoothed
        .iter()
        .map(|blends| sample_blends(vocab, blends, point, weights))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_lines::ScaleConfig;
    use crate::vocab::{build_vocab, Aabb, InitPolicy, PoseSequence};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn aa(x: f64, y: f64, z: f64) -> AxisAngle {
        AxisAngle::new(x, y, z).unwrap()
    }

    fn random_sequence(seed: u64, frames: usize, joints: usize) -> PoseSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Vec<AxisAngle>> = (0..frames)
            .map(|_| {
                (0..joints)
                    .map(|_| {
                        aa(
                            rng.gen_range(-1.5..1.5),
                            rng.gen_range(-1.5..1.5),
                            rng.gen_range(-1.5..1.5),
                        )
                    })
                    .collect()
            })
            .collect();
        PoseSequence::new(PoseSequence::default_joint_names(joints), frames, None).unwrap()
    }

    fn small_vocab(seed: u64, joints: usize, knn: usize) -> PoseVocab {
        let seq = random_sequence(seed, 24, joints);
        let scales = vec![
            ScaleConfig::cubic(5, 2, 8, knn).unwrap(),
            ScaleConfig::cubic(3, 2, 4, knn.min(4)).unwrap(),
        ];
        build_vocab(&seq, &scales, Aabb::unit(), InitPolicy::default(), seed).unwrap()
    }

    #[test]
    fn knn_exact_hit_returns_distance_zero() {
        let vocab = small_vocab(1, 2, 2);
        let jv = vocab.joint(0);
        let key = jv.key_rotations()[2];
        let got = knn_keys(jv, &key.to_axis_angle(), 1);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, 2);
        assert!(got[0].1 < 1e-12);
    }

    #[test]
    fn knn_ties_break_toward_the_smaller_index() {
        // identity and a half turn are both 1 - cos(45°) from a quarter turn
        let seq = PoseSequence::new(
            vec!["j".into()],
            vec![vec![aa(0.0, 0.0, 0.0)], vec![aa(PI, 0.0, 0.0)]],
            None,
        )
        .unwrap();
        let scales = vec![ScaleConfig::cubic(2, 1, 2, 2).unwrap()];
        let vocab =
            build_vocab(&seq, &scales, Aabb::unit(), InitPolicy::Zeros, 0).unwrap();
        let got = knn_keys(vocab.joint(0), &aa(PI / 2.0, 0.0, 0.0), 2);
        assert_eq!(got[0].0, 0);
        assert_eq!(got[1].0, 1);
        assert!((got[0].1 - got[1].1).abs() < 1e-12);
    }

    #[test]
    fn knn_matches_a_full_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let seq = random_sequence(41, 64, 1);
        let scales = vec![ScaleConfig::cubic(2, 1, 64, 8).unwrap()];
        let vocab =
            build_vocab(&seq, &scales, Aabb::unit(), InitPolicy::Zeros, 0).unwrap();
        let jv = vocab.joint(0);
        for _ in 0..50 {
            let theta = aa(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let got = knn_keys(jv, &theta, 8);
            // independent full sort
            let q = theta.to_quat();
            let mut all: Vec<(usize, f64)> = jv
                .key_rotations()
                .iter()
                .enumerate()
                .map(|(i, key)| (i, crate::rotation::rotation_distance(&q, key)))
                .collect();
            all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            assert_eq!(got, all[..8].to_vec());
        }
    }

    #[test]
    fn knn_asking_for_too_many_returns_all() {
        let vocab = small_vocab(2, 1, 2);
        let got = knn_keys(vocab.joint(0), &aa(0.1, 0.2, 0.3), 100);
        assert_eq!(got.len(), vocab.joint(0).key_rotations().len());
    }

    #[test]
    fn knn_is_invariant_to_the_antipodal_pose_parameterization() {
        let vocab = small_vocab(3, 1, 4);
        let theta = aa(0.9, -0.4, 0.2);
        let angle = theta.angle();
        let s = -(2.0 * PI - angle) / angle;
        let [x, y, z] = theta.components();
        let antipodal = aa(x * s, y * s, z * s);
        let a = knn_keys(vocab.joint(0), &theta, 4);
        let b = knn_keys(vocab.joint(0), &antipodal, 4);
        for ((ia, da), (ib, db)) in a.iter().zip(&b) {
            assert_eq!(ia, ib);
            assert!((da - db).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_key_hit_with_k1_recalls_the_stored_embedding() {
        let seq = random_sequence(7, 16, 1);
        let scales = vec![ScaleConfig::cubic(4, 2, 8, 1).unwrap()];
        let vocab =
            build_vocab(&seq, &scales, Aabb::unit(), InitPolicy::default(), 7).unwrap();
        let jv = vocab.joint(0);
        for m in 0..jv.key_count(0) {
            let theta = jv.key_rotations()[m].to_axis_angle();
            let blended = blend_embeddings(jv, &theta, 0, 1).unwrap();
            assert_eq!(&blended, jv.embedding(0, m));
        }
    }

    #[test]
    fn blend_weights_follow_one_minus_distance() {
        // two keys at distances 0.2 and 0.6: weights 0.8, 0.4 -> 2/3, 1/3
        let d_to_angle = |d: f64| 2.0 * (1.0_f64 - d).acos();
        let seq = PoseSequence::new(
            vec!["j".into()],
            vec![
                vec![aa(d_to_angle(0.2), 0.0, 0.0)],
                vec![aa(d_to_angle(0.6), 0.0, 0.0)],
            ],
            None,
        )
        .unwrap();
        let scales = vec![ScaleConfig::cubic(2, 1, 2, 2).unwrap()];
        let vocab =
            build_vocab(&seq, &scales, Aabb::unit(), InitPolicy::default(), 1).unwrap();
        let jv = vocab.joint(0);
        let blended = blend_embeddings(jv, &aa(0.0, 0.0, 0.0), 0, 2).unwrap();
        for axis in 0..3 {
            for (i, v) in blended.line(axis).iter().enumerate() {
                let want = (2.0 * jv.embedding(0, 0).line(axis)[i]
                    + jv.embedding(0, 1).line(axis)[i])
                    / 3.0;
                assert!((v - want).abs() < 1e-9, "axis {axis} entry {i}");
            }
        }
    }

    #[test]
    fn equidistant_neighbors_blend_to_the_mean() {
        let seq = PoseSequence::new(
            vec!["j".into()],
            vec![vec![aa(0.8, 0.0, 0.0)], vec![aa(-0.8, 0.0, 0.0)]],
            None,
        )
        .unwrap();
        let scales = vec![ScaleConfig::cubic(2, 1, 2, 2).unwrap()];
        let vocab =
            build_vocab(&seq, &scales, Aabb::unit(), InitPolicy::default(), 3).unwrap();
        let jv = vocab.joint(0);
        let blended = blend_embeddings(jv, &aa(0.0, 0.0, 0.0), 0, 2).unwrap();
        for axis in 0..3 {
            for (i, v) in blended.line(axis).iter().enumerate() {
                let want =
                    0.5 * (jv.embedding(0, 0).line(axis)[i] + jv.embedding(0, 1).line(axis)[i]);
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_influence_zeroes_the_joint_block() {
        let vocab = small_vocab(9, 3, 2);
        let pose = Pose::new(vec![aa(0.3, 0.0, 0.1), aa(0.0, 0.5, 0.0), aa(0.2, 0.2, 0.2)]);
        let weights = InfluenceWeights::per_joint(vec![1.0, 0.0, 0.5]).unwrap();
        let feature = query_pose_feature(&vocab, &pose, [0.4, 0.5, 0.6], &weights).unwrap();
        let layout = FeatureLayout::of(&vocab);
        let start = layout.block_offset(1, 0);
        let end = start + layout.joint_stride();
        assert!(feature.values()[start..end].iter().all(|v| *v == 0.0));
        assert!(feature.values()[..start].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn changing_one_joint_leaves_other_blocks_bit_identical() {
        let vocab = small_vocab(10, 3, 3);
        let base = Pose::new(vec![aa(0.3, 0.0, 0.1), aa(0.0, 0.5, 0.0), aa(0.2, 0.2, 0.2)]);
        let moved = Pose::new(vec![aa(0.3, 0.0, 0.1), aa(0.9, -0.7, 0.3), aa(0.2, 0.2, 0.2)]);
        let point = [0.25, 0.5, 0.75];
        let a = query_pose_feature(&vocab, &base, point, &InfluenceWeights::Uniform).unwrap();
        let b = query_pose_feature(&vocab, &moved, point, &InfluenceWeights::Uniform).unwrap();
        let layout = FeatureLayout::of(&vocab);
        let stride = layout.joint_stride();
        for j in [0usize, 2] {
            let range = layout.block_offset(j, 0)..layout.block_offset(j, 0) + stride;
            assert_eq!(&a.values()[range.clone()], &b.values()[range]);
        }
        let mid = layout.block_offset(1, 0)..layout.block_offset(1, 0) + stride;
        assert_ne!(&a.values()[mid.clone()], &b.values()[mid]);
    }

    #[test]
    fn layout_is_a_pure_function_of_the_configuration() {
        let vocab = small_vocab(11, 2, 2);
        let layout = FeatureLayout::of(&vocab);
        assert_eq!(layout.total_len(), 2 * (3 * 2 + 3 * 2));
        assert_eq!(layout.block_offset(0, 0), 0);
        assert_eq!(layout.block_offset(0, 1), 6);
        assert_eq!(layout.block_offset(1, 0), 12);
        let feature =
            query_pose_feature(&vocab, &Pose::new(vec![aa(0.0, 0.0, 0.0); 2]), [0.5; 3], &InfluenceWeights::Uniform)
                .unwrap();
        assert_eq!(feature.values().len(), layout.total_len());
    }

    #[test]
    fn pose_joint_mismatch_is_rejected() {
        let vocab = small_vocab(12, 2, 2);
        let pose = Pose::new(vec![aa(0.0, 0.0, 0.0); 3]);
        assert!(query_pose_feature(&vocab, &pose, [0.5; 3], &InfluenceWeights::Uniform).is_err());
        let weights = InfluenceWeights::per_joint(vec![1.0; 5]).unwrap();
        let pose = Pose::new(vec![aa(0.0, 0.0, 0.0); 2]);
        assert!(query_pose_feature(&vocab, &pose, [0.5; 3], &weights).is_err());
    }

    #[test]
    fn window_one_equals_the_unsmoothed_query() {
        let vocab = small_vocab(13, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let poses: Vec<Pose> = (0..6)
            .map(|_| {
                Pose::new(
                    (0..2)
                        .map(|_| {
                            aa(
                                rng.gen_range(-1.0..1.0),
                                rng.gen_range(-1.0..1.0),
                                rng.gen_range(-1.0..1.0),
                            )
                        })
                        .collect(),
                )
            })
            .collect();
        let point = [0.3, 0.6, 0.9];
        let smoothed =
            query_sequence_smoothed(&vocab, &poses, point, &InfluenceWeights::Uniform, 1).unwrap();
        for (pose, got) in poses.iter().zip(&smoothed) {
            let want = query_pose_feature(&vocab, pose, point, &InfluenceWeights::Uniform).unwrap();
            assert_eq!(got, &want);
        }
    }

    #[test]
    fn constant_sequences_smooth_to_constant_features() {
        let vocab = small_vocab(14, 2, 2);
        let pose = Pose::new(vec![aa(0.4, -0.2, 0.1), aa(0.0, 0.3, -0.5)]);
        let poses = vec![pose; 7];
        let got =
            query_sequence_smoothed(&vocab, &poses, [0.5; 3], &InfluenceWeights::Uniform, 5)
                .unwrap();
        // truncated end windows average fewer copies of the same blend, so
        // agreement is to rounding, not bit-exact
        for f in &got[1..] {
            for (a, b) in f.values().iter().zip(got[0].values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn middle_frame_of_window_three_averages_three_blends() {
        let vocab = small_vocab(15, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let poses: Vec<Pose> = (0..3)
            .map(|_| {
                Pose::new(vec![aa(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )])
            })
            .collect();
        let smoothed = smoothed_blends(&vocab, &poses, 3).unwrap();
        for s in 0..vocab.scales().len() {
            let per_frame: Vec<FeatureLines> = poses
                .iter()
                .map(|p| {
                    blend_embeddings(vocab.joint(0), p.rotation(0), s, vocab.scales()[s].knn)
                        .unwrap()
                })
                .collect();
            for axis in 0..3 {
                for (i, v) in smoothed[1][0][s].line(axis).iter().enumerate() {
                    let want = (per_frame[0].line(axis)[i]
                        + per_frame[1].line(axis)[i]
                        + per_frame[2].line(axis)[i])
                        / 3.0;
                    assert!((v - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn even_windows_are_rejected() {
        let vocab = small_vocab(16, 1, 2);
        let poses = vec![Pose::new(vec![aa(0.0, 0.0, 0.0)])];
        assert!(query_sequence_smoothed(
            &vocab,
            &poses,
            [0.5; 3],
            &InfluenceWeights::Uniform,
            4
        )
        .is_err());
    }

    #[test]
    fn out_of_box_points_clamp_instead_of_failing() {
        let vocab = small_vocab(17, 1, 2);
        let pose = Pose::new(vec![aa(0.1, 0.1, 0.1)]);
        let inside =
            query_pose_feature(&vocab, &pose, [0.0, 1.0, 0.5], &InfluenceWeights::Uniform)
                .unwrap();
        let outside =
            query_pose_feature(&vocab, &pose, [-3.0, 7.5, 0.5], &InfluenceWeights::Uniform)
                .unwrap();
        assert_eq!(inside, outside);
        assert!(query_pose_feature(
            &vocab,
            &pose,
            [f64::NAN, 0.0, 0.0],
            &InfluenceWeights::Uniform
        )
        .is_err());
    }
}
