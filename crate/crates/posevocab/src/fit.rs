//! Fitting embeddings to synthetic fields, with the two encoder ablations.
//!
//! The loss is a plain data term plus the total-variation regularizer:
//! mean squared error of a linear readout of the pose feature against the
//! field targets, plus `tv_weight` times the mean TV loss over the embeddings
//! the batch actually touches (KNN-selected embeddings of joints whose
//! influence weight at the sample point is positive).
//!
//! Gradients are fully analytic. KNN index sets are constants of the
//! differentiation: the selection itself is not differentiable, so the
//! gradient of a sample flows only into the bracketing rows of its selected
//! neighbors' feature lines, the readout matrix and the bias.
//!
//! [`run_fit`] trains one of three encoder variants under an equalized
//! trainable-parameter budget:
//!
//! * `featlines` — the full method: per-joint key rotations, feature lines.
//! * `globalcode` — per-joint key rotations, but each embedding is one
//!   spatially constant latent code (widths solved so the budget matches).
//! * `globalpose` — feature lines, but keys are whole pose vectors under the
//!   mean per-joint rotation distance, with the key count solved from the
//!   budget.
//!
//! Descent is plain full-batch gradient descent with optional momentum; on a
//! loss increase the step is rolled back and the learning rate halves, so the
//! recorded loss curve never rises. With a batch size below the pool the
//! loop switches to fixed-rate minibatch steps and records the minibatch
//! objective it observed.

use crate::error::{Error, Result};
use crate::feature_lines::{AxisStencil, FeatureLines, ScaleConfig};
use crate::field::SyntheticField;
use crate::query::{knn_normalized, query_pose_feature, FeatureLayout, InfluenceWeights, Pose};
use crate::rotation::{rotation_distance, AxisAngle, UnitQuat, DISTINCT_ROTATION_EPS};
use crate::vocab::{
    build_vocab, distinct_indices, fps_indices, joint_seed, Aabb, InitPolicy, PoseSequence,
    PoseVocab,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

/// Which encoder [`run_fit`] trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    FeatureLines,
    GlobalCodes,
    GlobalKeyPoses,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::FeatureLines => "featlines",
            Variant::GlobalCodes => "globalcode",
            Variant::GlobalKeyPoses => "globalpose",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "featlines" => Ok(Variant::FeatureLines),
            "globalcode" => Ok(Variant::GlobalCodes),
            "globalpose" => Ok(Variant::GlobalKeyPoses),
            other => Err(Error::invalid(format!(
                "unknown variant {other:?} (expected featlines, globalcode or globalpose)"
            ))),
        }
    }
}

/// Trainable linear map from a pose feature to the field output.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearReadout {
    outputs: usize,
    inputs: usize,
    weights: Vec<f64>, // row-major outputs x inputs
    bias: Vec<f64>,
}

impl LinearReadout {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            outputs,
            inputs,
            weights: vec![0.0; outputs * inputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Weights uniform in `±1/sqrt(inputs)`; a zero readout would kill the
    /// embedding gradient at the first step.
    pub fn random(outputs: usize, inputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            outputs,
            inputs,
            weights: (0..outputs * inputs).map(|_| rng.gen_range(-a..a)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn apply(&self, feature: &[f64]) -> Vec<f64> {
        debug_assert_eq!(feature.len(), self.inputs);
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(feature).map(|(w, f)| w * f).sum::<f64>() + self.bias[o]
            })
            .collect()
    }
}

/// One training example: a pose, a canonical-space point and the field target.
#[derive(Debug, Clone)]
pub struct FitSample {
    pub pose: Pose,
    pub point: [f64; 3],
    pub target: Vec<f64>,
}

/// Gradients of [`fit_loss`]: sparse per-embedding blocks plus the dense
/// readout part.
#[derive(Debug, Clone)]
pub struct FitGradients {
    /// `(joint, scale, key)` to a feature-lines-shaped gradient. Only
    /// embeddings touched by the batch appear, and within them only the
    /// bracketing rows of the sampled stencils are nonzero (plus the TV term).
    pub embeddings: std::collections::BTreeMap<(usize, usize, usize), FeatureLines>,
    pub readout_weights: Vec<f64>,
    pub readout_bias: Vec<f64>,
}

fn check_fit_inputs(
    vocab: &PoseVocab,
    readout: &LinearReadout,
    batch: &[FitSample],
    weights: &InfluenceWeights,
) -> Result<FeatureLayout> {
    if batch.is_empty() {
        return Err(Error::invalid("fit batch must not be empty"));
    }
    weights.check_joints(vocab.joint_count())?;
    let layout = FeatureLayout::of(vocab);
    if readout.inputs() != layout.total_len() {
        return Err(Error::DimensionMismatch {
            context: "readout inputs".to_string(),
            expected: layout.total_len(),
            got: readout.inputs(),
        });
    }
    for (i, sample) in batch.iter().enumerate() {
        if sample.pose.joint_count() != vocab.joint_count() {
            return Err(Error::DimensionMismatch {
                context: format!("batch sample {i} pose joints"),
                expected: vocab.joint_count(),
                got: sample.pose.joint_count(),
            });
        }
        if sample.target.len() != readout.outputs() {
            return Err(Error::DimensionMismatch {
                context: format!("batch sample {i} target"),
                expected: readout.outputs(),
                got: sample.target.len(),
            });
        }
        if sample.point.iter().any(|c| !c.is_finite()) {
            return Err(Error::non_finite(format!("batch sample {i} point")));
        }
    }
    Ok(layout)
}

/// Blending and sampling structure of one (joint, scale) block of a sample.
struct BlockCtx {
    gate: f64,
    neighbors: Vec<(usize, f64)>, // key index, normalized weight
    stencils: [AxisStencil; 3],
}

/// Per-sample contexts over the vocabulary, `None` where the joint is gated
/// out at the sample point.
fn vocab_sample_ctx(
    vocab: &PoseVocab,
    pose: &Pose,
    point: [f64; 3],
    weights: &InfluenceWeights,
) -> Vec<Option<BlockCtx>> {
    let scale_count = vocab.scales().len();
    let u = vocab.bbox().normalize(point);
    let mut blocks = Vec::with_capacity(vocab.joint_count() * scale_count);
    for j in 0..vocab.joint_count() {
        let gate = weights.weight(point, j);
        let quat = pose.rotation(j).to_quat();
        for (s, cfg) in vocab.scales().iter().enumerate() {
            if gate == 0.0 {
                blocks.push(None);
                continue;
            }
            let jv = vocab.joint(j);
            let neighbors = knn_normalized(jv.keys_for_scale(s), &quat, cfg.knn);
            let stencils = [
                crate::feature_lines::interp_coeffs(cfg.resolution[0], u[0]),
                crate::feature_lines::interp_coeffs(cfg.resolution[1], u[1]),
                crate::feature_lines::interp_coeffs(cfg.resolution[2], u[2]),
            ];
            blocks.push(Some(BlockCtx {
                gate,
                neighbors,
                stencils,
            }));
        }
    }
    blocks
}

fn touched_of_ctx(
    blocks: &[Option<BlockCtx>],
    scale_count: usize,
    touched: &mut BTreeSet<(usize, usize, usize)>,
) {
    for (slot, block) in blocks.iter().enumerate() {
        if let Some(ctx) = block {
            let (j, s) = (slot / scale_count, slot % scale_count);
            for &(k, _) in &ctx.neighbors {
                touched.insert((j, s, k));
            }
        }
    }
}

/// Embeddings selected by the batch: KNN picks of every (joint, scale) whose
/// influence weight at the sample point is positive.
pub fn touched_embeddings(
    vocab: &PoseVocab,
    batch: &[FitSample],
    weights: &InfluenceWeights,
) -> BTreeSet<(usize, usize, usize)> {
    let scale_count = vocab.scales().len();
    let mut touched = BTreeSet::new();
    for sample in batch {
        let blocks = vocab_sample_ctx(vocab, &sample.pose, sample.point, weights);
        touched_of_ctx(&blocks, scale_count, &mut touched);
    }
    touched
}

/// Data term plus TV term of one batch.
pub fn fit_loss(
    vocab: &PoseVocab,
    readout: &LinearReadout,
    batch: &[FitSample],
    weights: &InfluenceWeights,
    tv_weight: f64,
) -> Result<f64> {
    let _ = check_fit_inputs(vocab, readout, batch, weights)?;
    let denom = (batch.len() * readout.outputs()) as f64;
    let mut data = 0.0;
    for sample in batch {
        let feature = query_pose_feature(vocab, &sample.pose, sample.point, weights)?;
        let prediction = readout.apply(feature.values());
        for (p, y) in prediction.iter().zip(&sample.target) {
            let r = p - y;
            data += r * r;
        }
    }
    data /= denom;
    let mut total = data;
    if tv_weight != 0.0 {
        let touched = touched_embeddings(vocab, batch, weights);
        if !touched.is_empty() {
            let tv_sum: f64 = touched
                .iter()
                .map(|&(j, s, k)| vocab.joint(j).embedding(s, k).tv_loss())
                .sum();
            total += tv_weight * tv_sum / touched.len() as f64;
        }
    }
    Ok(total)
}

/// Analytic gradients of [`fit_loss`] for the touched embedding entries and
/// the readout.
pub fn fit_gradients(
    vocab: &PoseVocab,
    readout: &LinearReadout,
    batch: &[FitSample],
    weights: &InfluenceWeights,
    tv_weight: f64,
) -> Result<FitGradients> {
    let layout = check_fit_inputs(vocab, readout, batch, weights)?;
    let scale_count = vocab.scales().len();
    let feat_len = layout.total_len();
    let outputs = readout.outputs();
    let coef = 2.0 / (batch.len() * outputs) as f64;

    let mut grads = FitGradients {
        embeddings: std::collections::BTreeMap::new(),
        readout_weights: vec![0.0; readout.weights().len()],
        readout_bias: vec![0.0; outputs],
    };
    let mut touched = BTreeSet::new();
    let mut feature = vec![0.0; feat_len];
    let mut dldf = vec![0.0; feat_len];

    for sample in batch {
        let blocks = vocab_sample_ctx(vocab, &sample.pose, sample.point, weights);
        touched_of_ctx(&blocks, scale_count, &mut touched);

        feature.iter_mut().for_each(|v| *v = 0.0);
        forward_vocab(vocab, &blocks, &layout, &mut feature);
        let prediction = readout.apply(&feature);

        dldf.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..outputs {
            let scaled = coef * (prediction[o] - sample.target[o]);
            grads.readout_bias[o] += scaled;
            let row = &readout.weights()[o * feat_len..(o + 1) * feat_len];
            let grow = &mut grads.readout_weights[o * feat_len..(o + 1) * feat_len];
            for f in 0..feat_len {
                grow[f] += scaled * feature[f];
                dldf[f] += scaled * row[f];
            }
        }

        for (slot, block) in blocks.iter().enumerate() {
            let Some(ctx) = block else { continue };
            let (j, s) = (slot / scale_count, slot % scale_count);
            let cfg = &vocab.scales()[s];
            let d = cfg.channels;
            let offset = layout.block_offset(j, s);
            for axis in 0..3 {
                let st = &ctx.stencils[axis];
                for c in 0..d {
                    let g = ctx.gate * dldf[offset + axis * d + c];
                    if g == 0.0 {
                        continue;
                    }
                    for &(k, wn) in &ctx.neighbors {
                        let entry = grads
                            .embeddings
                            .entry((j, s, k))
                            .or_insert_with(|| {
                                FeatureLines::zeros(cfg.resolution, d).expect("valid shape")
                            });
                        let line = entry.line_mut(axis);
                        line[st.row_lo * d + c] += wn * st.w_lo * g;
                        line[st.row_hi * d + c] += wn * st.w_hi * g;
                    }
                }
            }
        }
    }

    if tv_weight != 0.0 && !touched.is_empty() {
        let scale = tv_weight / touched.len() as f64;
        for &(j, s, k) in &touched {
            let tv_grad = vocab.joint(j).embedding(s, k).tv_loss_gradient();
            let entry = grads.embeddings.entry((j, s, k)).or_insert_with(|| {
                FeatureLines::zeros(
                    vocab.scales()[s].resolution,
                    vocab.scales()[s].channels,
                )
                .expect("valid shape")
            });
            entry.add_scaled(&tv_grad, scale);
        }
    }

    Ok(grads)
}

/// Sample-then-blend evaluation of the feature vector: equal to the query
/// path's blend-then-sample by linearity, cheaper in the training loop.
fn forward_vocab(
    vocab: &PoseVocab,
    blocks: &[Option<BlockCtx>],
    layout: &FeatureLayout,
    out: &mut [f64],
) {
    let scale_count = vocab.scales().len();
    for (slot, block) in blocks.iter().enumerate() {
        let Some(ctx) = block else { continue };
        let (j, s) = (slot / scale_count, slot % scale_count);
        let d = vocab.scales()[s].channels;
        let offset = layout.block_offset(j, s);
        for axis in 0..3 {
            let st = &ctx.stencils[axis];
            for c in 0..d {
                let mut acc = 0.0;
                for &(k, wn) in &ctx.neighbors {
                    let line = vocab.joint(j).embedding(s, k).line(axis);
                    acc += wn * (st.w_lo * line[st.row_lo * d + c] + st.w_hi * line[st.row_hi * d + c]);
                }
                out[offset + axis * d + c] = ctx.gate * acc;
            }
        }
    }
}

/// Fit hyper-parameters. `batch_size = None` runs full-batch descent with
/// learning-rate halving; a `Some` below the pool size runs fixed-rate
/// minibatch steps.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub scales: Vec<ScaleConfig>,
    pub bbox: Aabb,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub tv_weight: f64,
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub variant: Variant,
    pub outputs: usize,
    pub points_per_pose: usize,
    pub heldout_poses: usize,
    pub heldout_points_per_pose: usize,
    pub init: InitPolicy,
}

impl FitConfig {
    /// The desk-scale reference task configuration (three joints, two spatial
    /// scales, full-batch descent).
    pub fn default_task(variant: Variant, seed: u64) -> Self {
        Self {
            scales: vec![
                ScaleConfig::cubic(16, 2, 16, 4).expect("valid scale"),
                ScaleConfig::cubic(8, 2, 16, 4).expect("valid scale"),
            ],
            bbox: Aabb::unit(),
            learning_rate: 1.0,
            momentum: 0.0,
            steps: 5000,
            tv_weight: 1e-3,
            batch_size: None,
            seed,
            variant,
            outputs: 1,
            points_per_pose: 5,
            heldout_poses: 50,
            heldout_points_per_pose: 5,
            init: InitPolicy::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::invalid("fit needs at least one scale"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.tv_weight.is_finite() && self.tv_weight >= 0.0) {
            return Err(Error::invalid("tv weight must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if self.outputs == 0 || self.points_per_pose == 0 {
            return Err(Error::invalid("outputs and points per pose must be >= 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// The default synthetic task's training sequence: independent random
/// rotations per joint and frame, angles within one half turn.
pub fn default_task_sequence(joints: usize, frames: usize, seed: u64) -> PoseSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<Vec<AxisAngle>> = (0..frames)
        .map(|_| {
            (0..joints)
                .map(|_| {
                    let dir = random_unit(&mut rng);
                    let angle = rng.gen_range(0.1..2.9);
                    AxisAngle::from_array_unchecked([
                        dir[0] * angle,
                        dir[1] * angle,
                        dir[2] * angle,
                    ])
                })
                .collect()
        })
        .collect();
    PoseSequence::new(PoseSequence::default_joint_names(joints), frames, None)
        .expect("generated sequence is valid")
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Everything a fit run reports. The summary serialization excludes the wall
/// time so reruns with one seed stay byte-identical.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub variant: Variant,
    pub seed: u64,
    pub steps_run: usize,
    /// Accepted objective after every step (rolled-back steps record the
    /// retained value); in minibatch mode, the observed minibatch objective.
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_train_mse: f64,
    pub heldout_mse: f64,
    pub param_count: usize,
    pub budget_reference: usize,
    pub budget_ok: bool,
    pub tv_weight: f64,
    pub learning_rate_final: f64,
    pub wall_time: Duration,
}

impl FitReport {
    pub fn summary_line(&self) -> String {
        format!(
            "summary variant={} seed={} steps={} initial_loss={} final_loss={} \
             final_train_mse={} heldout_mse={} param_count={} budget_reference={} \
             budget_ok={} tv_weight={} lr_final={}",
            self.variant,
            self.seed,
            self.steps_run,
            self.initial_loss,
            self.final_loss,
            self.final_train_mse,
            self.heldout_mse,
            self.param_count,
            self.budget_reference,
            self.budget_ok,
            self.tv_weight,
            self.learning_rate_final
        )
    }
}

/// The parsed form of a summary line, for report comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub variant: String,
    pub seed: u64,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_train_mse: f64,
    pub heldout_mse: f64,
    pub param_count: usize,
    pub budget_reference: usize,
    pub budget_ok: bool,
    pub tv_weight: f64,
    pub lr_final: f64,
}

impl FitSummary {
    pub fn parse(line: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some("summary") {
            return Err(Error::invalid("summary line must start with 'summary'"));
        }
        for token in tokens {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("malformed summary field {token:?}")))?;
            fields.insert(key.to_string(), value.to_string());
        }
        let get = |key: &str| -> Result<String> {
            fields
                .get(key)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("summary missing field {key:?}")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::invalid(format!("summary field {key:?} is not a number")))
        };
        let int = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|_| Error::invalid(format!("summary field {key:?} is not an integer")))
        };
        Ok(Self {
            variant: get("variant")?,
            seed: int("seed")?,
            steps: int("steps")? as usize,
            initial_loss: num("initial_loss")?,
            final_loss: num("final_loss")?,
            final_train_mse: num("final_train_mse")?,
            heldout_mse: num("heldout_mse")?,
            param_count: int("param_count")? as usize,
            budget_reference: int("budget_reference")? as usize,
            budget_ok: get("budget_ok")? == "true",
            tv_weight: num("tv_weight")?,
            lr_final: num("lr_final")?,
        })
    }
}

// ---------------------------------------------------------------------------
// training encoders
// ---------------------------------------------------------------------------

/// How one scale of an encoder stores and samples an embedding.
#[derive(Debug, Clone)]
struct ScaleMeta {
    knn: usize,
    /// feature slots this scale contributes per group
    block_len: usize,
    /// trainable entries per key
    per_key: usize,
    /// feature lines (true) or a flat latent code (false)
    spatial: bool,
    resolution: [usize; 3],
    channels: usize,
    line_start: [usize; 3],
}

impl ScaleMeta {
    fn lines(cfg: &ScaleConfig) -> Self {
        let d = cfg.channels;
        Self {
            knn: cfg.knn,
            block_len: 3 * d,
            per_key: cfg.params_per_key(),
            spatial: true,
            resolution: cfg.resolution,
            channels: d,
            line_start: [
                0,
                cfg.resolution[0] * d,
                (cfg.resolution[0] + cfg.resolution[1]) * d,
            ],
        }
    }

    fn code(cfg: &ScaleConfig, width: usize) -> Self {
        Self {
            knn: cfg.knn,
            block_len: width,
            per_key: width,
            spatial: false,
            resolution: [0; 3],
            channels: 0,
            line_start: [0; 3],
        }
    }
}

/// Keys a group's neighbor search runs over.
enum KeySet {
    /// Per-joint rotation keys (shared FPS prefix per scale).
    Rotations(Vec<Vec<UnitQuat>>),
    /// Whole key poses under the mean per-joint rotation distance.
    Poses(Vec<Vec<UnitQuat>>),
}

/// One trainable encoder with all embedding parameters flattened into a
/// single vector (simple dense gradient and velocity buffers at desk scale).
struct TrainEncoder {
    groups: usize,
    keys: KeySet,
    scales: Vec<ScaleMeta>,
    /// key count per (group, scale)
    counts: Vec<Vec<usize>>,
    /// parameter offset of key 0 per (group, scale)
    base: Vec<Vec<usize>>,
    params: Vec<f64>,
    feature_len: usize,
    /// whether influence weights gate the groups (per-joint encoders)
    gated: bool,
    scale_prefix: Vec<usize>,
    group_stride: usize,
}

impl TrainEncoder {
    fn layout(groups: usize, scales: Vec<ScaleMeta>, counts: Vec<Vec<usize>>, keys: KeySet, gated: bool) -> Self {
        let mut base = vec![vec![0usize; scales.len()]; groups];
        let mut offset = 0usize;
        for g in 0..groups {
            for (s, meta) in scales.iter().enumerate() {
                base[g][s] = offset;
                offset += counts[g][s] * meta.per_key;
            }
        }
        let mut scale_prefix = Vec::with_capacity(scales.len());
        let mut acc = 0usize;
        for meta in &scales {
            scale_prefix.push(acc);
            acc += meta.block_len;
        }
        let group_stride = acc;
        Self {
            groups,
            keys,
            feature_len: groups * group_stride,
            params: vec![0.0; offset],
            scales,
            counts,
            base,
            gated,
            scale_prefix,
            group_stride,
        }
    }

    fn block_offset(&self, g: usize, s: usize) -> usize {
        g * self.group_stride + self.scale_prefix[s]
    }

    fn key_base(&self, g: usize, s: usize, k: usize) -> usize {
        self.base[g][s] + k * self.scales[s].per_key
    }

    fn build_ctx(
        &self,
        pose: &Pose,
        point: [f64; 3],
        weights: &InfluenceWeights,
        bbox: &Aabb,
    ) -> Vec<Option<BlockCtx>> {
        let u = bbox.normalize(point);
        let scale_count = self.scales.len();
        let mut blocks = Vec::with_capacity(self.groups * scale_count);
        let pose_quats: Vec<UnitQuat> = match &self.keys {
            KeySet::Rotations(_) => pose.rotations().iter().map(|aa| aa.to_quat()).collect(),
            KeySet::Poses(_) => pose.rotations().iter().map(|aa| aa.to_quat()).collect(),
        };
        for g in 0..self.groups {
            let gate = if self.gated {
                weights.weight(point, g)
            } else {
                1.0
            };
            for (s, meta) in self.scales.iter().enumerate() {
                if gate == 0.0 {
                    blocks.push(None);
                    continue;
                }
                let count = self.counts[g][s];
                let neighbors = match &self.keys {
                    KeySet::Rotations(per_joint) => {
                        knn_normalized(&per_joint[g][..count], &pose_quats[g], meta.knn)
                    }
                    KeySet::Poses(key_poses) => {
                        knn_poses_normalized(&key_poses[..count], &pose_quats, meta.knn)
                    }
                };
                let stencils = if meta.spatial {
                    [
                        crate::feature_lines::interp_coeffs(meta.resolution[0], u[0]),
                        crate::feature_lines::interp_coeffs(meta.resolution[1], u[1]),
                        crate::feature_lines::interp_coeffs(meta.resolution[2], u[2]),
                    ]
                } else {
                    [AxisStencil {
                        row_lo: 0,
                        row_hi: 0,
                        w_lo: 1.0,
                        w_hi: 0.0,
                    }; 3]
                };
                blocks.push(Some(BlockCtx {
                    gate,
                    neighbors,
                    stencils,
                }));
            }
        }
        blocks
    }

    fn forward(&self, blocks: &[Option<BlockCtx>], out: &mut [f64]) {
        let scale_count = self.scales.len();
        for (slot, block) in blocks.iter().enumerate() {
            let Some(ctx) = block else { continue };
            let (g, s) = (slot / scale_count, slot % scale_count);
            let meta = &self.scales[s];
            let offset = self.block_offset(g, s);
            if meta.spatial {
                let d = meta.channels;
                for axis in 0..3 {
                    let st = &ctx.stencils[axis];
                    let lstart = meta.line_start[axis];
                    for c in 0..d {
                        let mut acc = 0.0;
                        for &(k, wn) in &ctx.neighbors {
                            let kb = self.key_base(g, s, k) + lstart;
                            acc += wn
                                * (st.w_lo * self.params[kb + st.row_lo * d + c]
                                    + st.w_hi * self.params[kb + st.row_hi * d + c]);
                        }
                        out[offset + axis * d + c] = ctx.gate * acc;
                    }
                }
            } else {
                for c in 0..meta.block_len {
                    let mut acc = 0.0;
                    for &(k, wn) in &ctx.neighbors {
                        acc += wn * self.params[self.key_base(g, s, k) + c];
                    }
                    out[offset + c] = ctx.gate * acc;
                }
            }
        }
    }

    fn backward(&self, blocks: &[Option<BlockCtx>], dldf: &[f64], grad: &mut [f64]) {
        let scale_count = self.scales.len();
        for (slot, block) in blocks.iter().enumerate() {
            let Some(ctx) = block else { continue };
            let (g, s) = (slot / scale_count, slot % scale_count);
            let meta = &self.scales[s];
            let offset = self.block_offset(g, s);
            if meta.spatial {
                let d = meta.channels;
                for axis in 0..3 {
                    let st = &ctx.stencils[axis];
                    let lstart = meta.line_start[axis];
                    for c in 0..d {
                        let gv = ctx.gate * dldf[offset + axis * d + c];
                        if gv == 0.0 {
                            continue;
                        }
                        for &(k, wn) in &ctx.neighbors {
                            let kb = self.key_base(g, s, k) + lstart;
                            grad[kb + st.row_lo * d + c] += wn * st.w_lo * gv;
                            grad[kb + st.row_hi * d + c] += wn * st.w_hi * gv;
                        }
                    }
                }
            } else {
                for c in 0..meta.block_len {
                    let gv = ctx.gate * dldf[offset + c];
                    if gv == 0.0 {
                        continue;
                    }
                    for &(k, wn) in &ctx.neighbors {
                        grad[self.key_base(g, s, k) + c] += wn * gv;
                    }
                }
            }
        }
    }

    fn touched(&self, all_blocks: &[Vec<Option<BlockCtx>>]) -> BTreeSet<(usize, usize, usize)> {
        let scale_count = self.scales.len();
        let mut touched = BTreeSet::new();
        for blocks in all_blocks {
            touched_of_ctx(blocks, scale_count, &mut touched);
        }
        touched
    }

    fn tv_loss(&self, touched: &BTreeSet<(usize, usize, usize)>) -> f64 {
        let mut total = 0.0;
        for &(g, s, k) in touched {
            let meta = &self.scales[s];
            if !meta.spatial {
                continue;
            }
            let kb = self.key_base(g, s, k);
            let d = meta.channels;
            for axis in 0..3 {
                let lstart = kb + meta.line_start[axis];
                for i in 0..meta.resolution[axis] - 1 {
                    for c in 0..d {
                        let diff = self.params[lstart + (i + 1) * d + c]
                            - self.params[lstart + i * d + c];
                        total += diff * diff;
                    }
                }
            }
        }
        total
    }

    fn tv_grad(
        &self,
        touched: &BTreeSet<(usize, usize, usize)>,
        factor: f64,
        grad: &mut [f64],
    ) {
        for &(g, s, k) in touched {
            let meta = &self.scales[s];
            if !meta.spatial {
                continue;
            }
            let kb = self.key_base(g, s, k);
            let d = meta.channels;
            for axis in 0..3 {
                let lstart = kb + meta.line_start[axis];
                for i in 0..meta.resolution[axis] - 1 {
                    for c in 0..d {
                        let diff = self.params[lstart + (i + 1) * d + c]
                            - self.params[lstart + i * d + c];
                        grad[lstart + (i + 1) * d + c] += factor * 2.0 * diff;
                        grad[lstart + i * d + c] -= factor * 2.0 * diff;
                    }
                }
            }
        }
    }

    /// Writes fitted feature-line parameters back into the vocabulary the
    /// encoder was flattened from.
    fn write_back(&self, vocab: &mut PoseVocab) {
        for g in 0..self.groups {
            for (s, meta) in self.scales.iter().enumerate() {
                debug_assert!(meta.spatial);
                for k in 0..self.counts[g][s] {
                    let kb = self.key_base(g, s, k);
                    let emb = vocab.joint_mut(g).embedding_mut(s, k);
                    for axis in 0..3 {
                        let lstart = meta.line_start[axis];
                        let len = meta.resolution[axis] * meta.channels;
                        emb.line_mut(axis)
                            .copy_from_slice(&self.params[kb + lstart..kb + lstart + len]);
                    }
                }
            }
        }
    }
}

fn knn_poses_normalized(
    key_poses: &[Vec<UnitQuat>],
    query: &[UnitQuat],
    k: usize,
) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = key_poses
        .iter()
        .enumerate()
        .map(|(i, key)| (i, pose_distance(key, query)))
        .collect();
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    let raw: Vec<f64> = ranked.iter().map(|&(_, d)| 1.0 - d).collect();
    let wn = crate::feature_lines::normalized_weights(&raw);
    ranked
        .iter()
        .zip(wn)
        .map(|(&(i, _), w)| (i, w))
        .collect()
}

/// Distance between whole pose vectors: the mean per-joint rotation distance,
/// in `[0, 1]` like the per-joint metric.
pub fn pose_distance(a: &[UnitQuat], b: &[UnitQuat]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(qa, qb)| rotation_distance(qa, qb))
        .sum();
    total / a.len() as f64
}

/// Full-method trainable parameter count for a config on a sequence
/// (embeddings plus the linear readout), the reference every ablation
/// variant's budget is solved against.
pub fn reference_param_count(
    seq: &PoseSequence,
    scales: &[ScaleConfig],
    outputs: usize,
) -> (usize, usize) {
    let mut emb = 0usize;
    for j in 0..seq.joint_count() {
        let quats = seq.joint_quats(j);
        let distinct = distinct_indices(&quats, DISTINCT_ROTATION_EPS, |a, b| {
            rotation_distance(a, b)
        })
        .len();
        for cfg in scales {
            emb += cfg.key_count.min(distinct) * cfg.params_per_key();
        }
    }
    let feat = seq.joint_count() * scales.iter().map(|c| 3 * c.channels).sum::<usize>();
    let total = emb + outputs * feat + outputs;
    (emb, total)
}

fn init_param(init: InitPolicy, rng: &mut ChaCha8Rng) -> f64 {
    match init {
        InitPolicy::Zeros => 0.0,
        InitPolicy::Uniform { amplitude } => rng.gen_range(-amplitude..=amplitude) as f32 as f64,
    }
}

fn lines_encoder(vocab: &PoseVocab) -> TrainEncoder {
    let scales: Vec<ScaleMeta> = vocab.scales().iter().map(ScaleMeta::lines).collect();
    let counts: Vec<Vec<usize>> = (0..vocab.joint_count())
        .map(|j| {
            (0..vocab.scales().len())
                .map(|s| vocab.joint(j).key_count(s))
                .collect()
        })
        .collect();
    let keys = KeySet::Rotations(
        (0..vocab.joint_count())
            .map(|j| vocab.joint(j).key_rotations().to_vec())
            .collect(),
    );
    let mut enc = TrainEncoder::layout(vocab.joint_count(), scales, counts, keys, true);
    // flatten the built vocabulary's embeddings
    for g in 0..enc.groups {
        for s in 0..enc.scales.len() {
            for k in 0..enc.counts[g][s] {
                let kb = enc.key_base(g, s, k);
                let emb = vocab.joint(g).embedding(s, k);
                for axis in 0..3 {
                    let lstart = enc.scales[s].line_start[axis];
                    let line = emb.line(axis);
                    enc.params[kb + lstart..kb + lstart + line.len()].copy_from_slice(line);
                }
            }
        }
    }
    enc
}

fn codes_encoder(
    seq: &PoseSequence,
    cfg: &FitConfig,
    reference_total: usize,
) -> Result<TrainEncoder> {
    let max_keys = cfg.scales.iter().map(|s| s.key_count).max().unwrap();
    let mut per_joint_keys = Vec::with_capacity(seq.joint_count());
    let mut counts = Vec::with_capacity(seq.joint_count());
    for j in 0..seq.joint_count() {
        let quats = seq.joint_quats(j);
        let keys = crate::vocab::sample_key_rotations(&quats, max_keys)?;
        counts.push(
            cfg.scales
                .iter()
                .map(|c| c.key_count.min(keys.len()))
                .collect::<Vec<_>>(),
        );
        per_joint_keys.push(keys);
    }
    // solve per-scale code widths so the total trainable count (embeddings
    // plus readout over the widened feature) lands on the reference
    let joints = seq.joint_count();
    let total_for = |widths: &[usize]| -> usize {
        let emb: usize = (0..joints)
            .map(|j| {
                widths
                    .iter()
                    .zip(&counts[j])
                    .map(|(w, c)| w * c)
                    .sum::<usize>()
            })
            .sum();
        let feat = joints * widths.iter().sum::<usize>();
        emb + cfg.outputs * feat + cfg.outputs
    };
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut theta = 0.70f64;
    while theta <= 1.10 {
        let widths: Vec<usize> = cfg
            .scales
            .iter()
            .map(|c| ((c.params_per_key() as f64 * theta).round() as usize).max(1))
            .collect();
        let diff = total_for(&widths).abs_diff(reference_total);
        if best.as_ref().map_or(true, |(d, _)| diff < *d) {
            best = Some((diff, widths));
        }
        theta += 5e-4;
    }
    let (_, widths) = best.expect("width search is non-empty");
    let scales: Vec<ScaleMeta> = cfg
        .scales
        .iter()
        .zip(&widths)
        .map(|(c, w)| ScaleMeta::code(c, *w))
        .collect();
    let mut enc = TrainEncoder::layout(joints, scales, counts, KeySet::Rotations(per_joint_keys), true);
    for (j, name) in seq.joint_names().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(joint_seed(cfg.seed, name));
        for s in 0..enc.scales.len() {
            for k in 0..enc.counts[j][s] {
                let kb = enc.key_base(j, s, k);
                for slot in 0..enc.scales[s].per_key {
                    enc.params[kb + slot] = init_param(cfg.init, &mut rng);
                }
            }
        }
    }
    Ok(enc)
}

fn pose_keys_encoder(
    seq: &PoseSequence,
    cfg: &FitConfig,
    reference_total: usize,
) -> Result<TrainEncoder> {
    let all_poses: Vec<Vec<UnitQuat>> = (0..seq.frame_count())
        .map(|t| {
            (0..seq.joint_count())
                .map(|j| seq.rotation(t, j).to_quat().quantized_f32())
                .collect()
        })
        .collect();
    let per_key: usize = cfg.scales.iter().map(|c| c.params_per_key()).sum();
    let feat: usize = cfg.scales.iter().map(|c| 3 * c.channels).sum();
    let readout = cfg.outputs * feat + cfg.outputs;
    let want = ((reference_total.saturating_sub(readout)) as f64 / per_key as f64).round() as usize;
    let key_budget = want.max(1);
    let picked = fps_indices(&all_poses, key_budget, DISTINCT_ROTATION_EPS, |a, b| {
        pose_distance(a, b)
    });
    let key_poses: Vec<Vec<UnitQuat>> = picked.iter().map(|&i| all_poses[i].clone()).collect();
    let count = key_poses.len();
    let scales: Vec<ScaleMeta> = cfg.scales.iter().map(ScaleMeta::lines).collect();
    let counts = vec![vec![count; scales.len()]];
    let mut enc = TrainEncoder::layout(1, scales, counts, KeySet::Poses(key_poses), false);
    let mut rng = ChaCha8Rng::seed_from_u64(joint_seed(cfg.seed, "pose-keys"));
    for s in 0..enc.scales.len() {
        for k in 0..count {
            let kb = enc.key_base(0, s, k);
            for slot in 0..enc.scales[s].per_key {
                enc.params[kb + slot] = init_param(cfg.init, &mut rng);
            }
        }
    }
    Ok(enc)
}

// ---------------------------------------------------------------------------
// the descent loop
// ---------------------------------------------------------------------------

struct TrainSet {
    ctxs: Vec<Vec<Option<BlockCtx>>>,
    targets: Vec<Vec<f64>>,
}

fn build_train_set(
    encoder: &TrainEncoder,
    samples: &[FitSample],
    weights: &InfluenceWeights,
    bbox: &Aabb,
) -> TrainSet {
    TrainSet {
        ctxs: samples
            .iter()
            .map(|smp| encoder.build_ctx(&smp.pose, smp.point, weights, bbox))
            .collect(),
        targets: samples.iter().map(|smp| smp.target.clone()).collect(),
    }
}

/// Data MSE over a context set at the current parameters.
fn data_mse(
    encoder: &TrainEncoder,
    readout: &LinearReadout,
    set: &TrainSet,
    feature: &mut Vec<f64>,
) -> f64 {
    let denom = (set.ctxs.len() * readout.outputs()) as f64;
    let mut total = 0.0;
    for (blocks, target) in set.ctxs.iter().zip(&set.targets) {
        feature.iter_mut().for_each(|v| *v = 0.0);
        encoder.forward(blocks, feature);
        let prediction = readout.apply(feature);
        for (p, y) in prediction.iter().zip(target) {
            let r = p - y;
            total += r * r;
        }
    }
    total / denom
}

/// Runs one variant against a synthetic field and reports the outcome.
///
/// Training samples pair every sequence pose with `points_per_pose` uniform
/// points in the box; held-out poses perturb training rotations by angles
/// between 5 and 25 degrees and are never fitted.
pub fn run_fit(seq: &PoseSequence, field: &SyntheticField, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    if field.joint_count() != seq.joint_count() {
        return Err(Error::DimensionMismatch {
            context: "field joints".to_string(),
            expected: seq.joint_count(),
            got: field.joint_count(),
        });
    }
    if field.output_count() != cfg.outputs {
        return Err(Error::DimensionMismatch {
            context: "field outputs".to_string(),
            expected: cfg.outputs,
            got: field.output_count(),
        });
    }
    let start = Instant::now();
    let weights = field.weights().clone();
    weights.check_joints(seq.joint_count())?;

    // training pool: every pose at points_per_pose uniform box points
    let mut point_rng = ChaCha8Rng::seed_from_u64(joint_seed(cfg.seed, "train-points"));
    let mut train_pool = Vec::with_capacity(seq.frame_count() * cfg.points_per_pose);
    for t in 0..seq.frame_count() {
        let pose = Pose::new(seq.frame(t).to_vec());
        for _ in 0..cfg.points_per_pose {
            let point = random_box_point(&cfg.bbox, &mut point_rng);
            let target = field.eval(&pose, point)?;
            train_pool.push(FitSample {
                pose: pose.clone(),
                point,
                target,
            });
        }
    }

    // held-out pool: perturbed training poses at fresh points
    let mut held_rng = ChaCha8Rng::seed_from_u64(joint_seed(cfg.seed, "heldout"));
    let mut heldout = Vec::with_capacity(cfg.heldout_poses * cfg.heldout_points_per_pose);
    let (deg5, deg25) = (5.0_f64.to_radians(), 25.0_f64.to_radians());
    for _ in 0..cfg.heldout_poses {
        let t = held_rng.gen_range(0..seq.frame_count());
        let pose = Pose::new(
            seq.frame(t)
                .iter()
                .map(|aa| {
                    let dir = random_unit(&mut held_rng);
                    let mag = held_rng.gen_range(deg5..deg25);
                    let [x, y, z] = aa.components();
                    AxisAngle::from_array_unchecked([
                        x + dir[0] * mag,
                        y + dir[1] * mag,
                        z + dir[2] * mag,
                    ])
                })
                .collect(),
        );
        for _ in 0..cfg.heldout_points_per_pose {
            let point = random_box_point(&cfg.bbox, &mut held_rng);
            let target = field.eval(&pose, point)?;
            heldout.push(FitSample {
                pose: pose.clone(),
                point,
                target,
            });
        }
    }

    let (_, reference_total) = reference_param_count(seq, &cfg.scales, cfg.outputs);
    let (mut encoder, fitted_vocab_template) = match cfg.variant {
        Variant::FeatureLines => {
            let vocab = build_vocab(seq, &cfg.scales, cfg.bbox, cfg.init, cfg.seed)?;
            (lines_encoder(&vocab), Some(vocab))
        }
        Variant::GlobalCodes => (codes_encoder(seq, cfg, reference_total)?, None),
        Variant::GlobalKeyPoses => (pose_keys_encoder(seq, cfg, reference_total)?, None),
    };

    let mut readout_rng = ChaCha8Rng::seed_from_u64(joint_seed(cfg.seed, "readout"));
    let mut readout = LinearReadout::random(cfg.outputs, encoder.feature_len, &mut readout_rng);

    let param_count = encoder.params.len() + readout.param_count();
    let budget_ok =
        (param_count as f64 - reference_total as f64).abs() <= 0.05 * reference_total as f64;

    let report = train(
        &mut encoder,
        &mut readout,
        &train_pool,
        &heldout,
        &weights,
        cfg,
        param_count,
        reference_total,
        budget_ok,
        start,
    )?;

    // persist fitted lines back into the vocabulary for callers that save it
    if let Some(mut vocab) = fitted_vocab_template {
        encoder.write_back(&mut vocab);
        FITTED_VOCAB.with(|cell| *cell.borrow_mut() = Some(vocab));
    } else {
        FITTED_VOCAB.with(|cell| *cell.borrow_mut() = None);
    }
    Ok(report)
}

thread_local! {
    static FITTED_VOCAB: std::cell::RefCell<Option<PoseVocab>> = const { std::cell::RefCell::new(None) };
}

/// The fitted vocabulary of the most recent [`run_fit`] call on this thread,
/// when the variant was [`Variant::FeatureLines`].
pub fn take_fitted_vocab() -> Option<PoseVocab> {
    FITTED_VOCAB.with(|cell| cell.borrow_mut().take())
}

#[allow(clippy::too_many_arguments)]
fn train(
    encoder: &mut TrainEncoder,
    readout: &mut LinearReadout,
    train_samples: &[FitSample],
    heldout_samples: &[FitSample],
    weights: &InfluenceWeights,
    cfg: &FitConfig,
    param_count: usize,
    budget_reference: usize,
    budget_ok: bool,
    start: Instant,
) -> Result<FitReport> {
    let bbox = cfg.bbox;
    let train_set = build_train_set(encoder, train_samples, weights, &bbox);
    let held_set = build_train_set(encoder, heldout_samples, weights, &bbox);
    let touched = encoder.touched(&train_set.ctxs);
    let tv_norm = if touched.is_empty() {
        0.0
    } else {
        cfg.tv_weight / touched.len() as f64
    };

    let feat_len = encoder.feature_len;
    let outputs = readout.outputs();
    let pool = train_set.ctxs.len();
    let full_batch = cfg.batch_size.map_or(true, |b| b >= pool);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(joint_seed(cfg.seed, "batches"));

    let mut feature = vec![0.0; feat_len];
    let objective = |enc: &TrainEncoder, ro: &LinearReadout, feature: &mut Vec<f64>| -> f64 {
        let data = data_mse(enc, ro, &train_set, feature);
        data + tv_norm * enc.tv_loss(&touched)
    };

    let mut lr = cfg.learning_rate;
    let mut vel_p = vec![0.0; encoder.params.len()];
    let mut vel_w = vec![0.0; readout.weights.len()];
    let mut vel_b = vec![0.0; readout.bias.len()];
    let mut grad_p = vec![0.0; encoder.params.len()];
    let mut grad_w = vec![0.0; readout.weights.len()];
    let mut grad_b = vec![0.0; readout.bias.len()];
    let mut dldf = vec![0.0; feat_len];

    let initial_loss = objective(encoder, readout, &mut feature);
    if !initial_loss.is_finite() {
        return Err(Error::FitDiverged {
            step: 0,
            loss: initial_loss,
        });
    }
    let mut prev = initial_loss;
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        grad_p.iter_mut().for_each(|v| *v = 0.0);
        grad_w.iter_mut().for_each(|v| *v = 0.0);
        grad_b.iter_mut().for_each(|v| *v = 0.0);

        let indices: Vec<usize> = if full_batch {
            (0..pool).collect()
        } else {
            let b = cfg.batch_size.unwrap().min(pool);
            (0..b).map(|_| batch_rng.gen_range(0..pool)).collect()
        };
        let coef = 2.0 / (indices.len() * outputs) as f64;
        let mut batch_data = 0.0;
        for &i in &indices {
            let blocks = &train_set.ctxs[i];
            feature.iter_mut().for_each(|v| *v = 0.0);
            encoder.forward(blocks, &mut feature);
            let prediction = readout.apply(&feature);
            dldf.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..outputs {
                let r = prediction[o] - train_set.targets[i][o];
                batch_data += r * r;
                let scaled = coef * r;
                grad_b[o] += scaled;
                let row = &readout.weights[o * feat_len..(o + 1) * feat_len];
                let grow = &mut grad_w[o * feat_len..(o + 1) * feat_len];
                for f in 0..feat_len {
                    grow[f] += scaled * feature[f];
                    dldf[f] += scaled * row[f];
                }
            }
            encoder.backward(blocks, &dldf, &mut grad_p);
        }
        encoder.tv_grad(&touched, tv_norm, &mut grad_p);

        let snapshot = if full_batch {
            Some((encoder.params.clone(), readout.weights.clone(), readout.bias.clone()))
        } else {
            None
        };

        step_params(&mut encoder.params, &mut vel_p, &grad_p, lr, cfg.momentum);
        step_params(&mut readout.weights, &mut vel_w, &grad_w, lr, cfg.momentum);
        step_params(&mut readout.bias, &mut vel_b, &grad_b, lr, cfg.momentum);

        if full_batch {
            let after = objective(encoder, readout, &mut feature);
            if !after.is_finite() {
                return Err(Error::FitDiverged { step, loss: after });
            }
            if after > prev {
                let (p, w, b) = snapshot.unwrap();
                encoder.params = p;
                readout.weights = w;
                readout.bias = b;
                vel_p.iter_mut().for_each(|v| *v = 0.0);
                vel_w.iter_mut().for_each(|v| *v = 0.0);
                vel_b.iter_mut().for_each(|v| *v = 0.0);
                lr *= 0.5;
                curve.push(prev);
                if lr < 1e-14 {
                    break;
                }
            } else {
                prev = after;
                curve.push(after);
            }
        } else {
            let observed =
                batch_data / (indices.len() * outputs) as f64 + tv_norm * encoder.tv_loss(&touched);
            if !observed.is_finite() {
                return Err(Error::FitDiverged {
                    step,
                    loss: observed,
                });
            }
            prev = observed;
            curve.push(observed);
        }
    }

    let final_train_mse = data_mse(encoder, readout, &train_set, &mut feature);
    let heldout_mse = data_mse(encoder, readout, &held_set, &mut feature);
    Ok(FitReport {
        variant: cfg.variant,
        seed: cfg.seed,
        steps_run: curve.len(),
        final_loss: if curve.is_empty() { initial_loss } else { prev },
        loss_curve: curve,
        initial_loss,
        final_train_mse,
        heldout_mse,
        param_count,
        budget_reference,
        budget_ok,
        tv_weight: cfg.tv_weight,
        learning_rate_final: lr,
        wall_time: start.elapsed(),
    })
}

fn step_params(params: &mut [f64], vel: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in params.iter_mut().zip(vel.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

fn random_box_point(bbox: &Aabb, rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(bbox.min[0]..bbox.max[0]),
        rng.gen_range(bbox.min[1]..bbox.max[1]),
        rng.gen_range(bbox.min[2]..bbox.max[2]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::vocab_stats;

    fn small_setup(
        seed: u64,
        joints: usize,
    ) -> (PoseSequence, PoseVocab, LinearReadout, SyntheticField) {
        let seq = default_task_sequence(joints, 12, seed);
        let scales = vec![
            ScaleConfig::cubic(5, 2, 6, 3).unwrap(),
            ScaleConfig::cubic(3, 1, 4, 2).unwrap(),
        ];
        let vocab =
            build_vocab(&seq, &scales, Aabb::unit(), InitPolicy::default(), seed).unwrap();
        let layout = FeatureLayout::of(&vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let readout = LinearReadout::random(2, layout.total_len(), &mut rng);
        let field = SyntheticField::new(joints, 2, InfluenceWeights::Uniform, seed + 1).unwrap();
        (seq, vocab, readout, field)
    }

    fn batch_from(
        seq: &PoseSequence,
        field: &SyntheticField,
        n: usize,
        seed: u64,
    ) -> Vec<FitSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let t = rng.gen_range(0..seq.frame_count());
                let pose = Pose::new(seq.frame(t).to_vec());
                let point = [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ];
                let target = field.eval(&pose, point).unwrap();
                FitSample {
                    pose,
                    point,
                    target,
                }
            })
            .collect()
    }

    #[test]
    fn zeroed_model_on_zero_targets_has_zero_loss() {
        let (seq, _, _, field) = small_setup(3, 2);
        let scales = vec![ScaleConfig::cubic(4, 1, 4, 2).unwrap()];
        let vocab =
            build_vocab(&seq, &scales, Aabb::unit(), InitPolicy::Zeros, 0).unwrap();
        let layout = FeatureLayout::of(&vocab);
        let readout = LinearReadout::zeros(1, layout.total_len());
        let mut batch = batch_from(&seq, &field, 6, 9);
        for s in &mut batch {
            s.target = vec![0.0];
        }
        let loss = fit_loss(&vocab, &readout, &batch, &InfluenceWeights::Uniform, 0.5).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_matches_an_independent_straight_line_evaluation() {
        let (seq, vocab, readout, field) = small_setup(5, 2);
        let batch = batch_from(&seq, &field, 8, 11);
        let tv_weight = 0.37;
        let got = fit_loss(&vocab, &readout, &batch, &InfluenceWeights::Uniform, tv_weight)
            .unwrap();

        // independent evaluation: blend embeddings per joint and scale with
        // hand-normalized 1-d weights, sample, gate, linear map, then the TV
        // mean over the union of selected keys
        let mut data = 0.0;
        let mut touched: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
        for sample in &batch {
            let mut feature = Vec::new();
            for j in 0..vocab.joint_count() {
                let q = sample.pose.rotation(j).to_quat();
                for (s, cfg) in vocab.scales().iter().enumerate() {
                    let keys = vocab.joint(j).keys_for_scale(s);
                    let mut ranked: Vec<(usize, f64)> = keys
                        .iter()
                        .enumerate()
                        .map(|(i, key)| (i, rotation_distance(&q, key)))
                        .collect();
                    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                    ranked.truncate(cfg.knn);
                    let wsum: f64 = ranked.iter().map(|&(_, d)| 1.0 - d).sum();
                    let mut blended =
                        FeatureLines::zeros(cfg.resolution, cfg.channels).unwrap();
                    for &(k, dist) in &ranked {
                        touched.insert((j, s, k));
                        blended.add_scaled(
                            vocab.joint(j).embedding(s, k),
                            (1.0 - dist) / wsum,
                        );
                    }
                    let u = vocab.bbox().normalize(sample.point);
                    feature.extend(blended.sample(u));
                }
            }
            let prediction = readout.apply(&feature);
            for (p, y) in prediction.iter().zip(&sample.target) {
                data += (p - y) * (p - y);
            }
        }
        data /= (batch.len() * readout.outputs()) as f64;
        let tv: f64 = touched
            .iter()
            .map(|&(j, s, k)| vocab.joint(j).embedding(s, k).tv_loss())
            .sum::<f64>()
            / touched.len() as f64;
        let want = data + tv_weight * tv;
        assert!(
            (got - want).abs() < 1e-10,
            "fit_loss {got} vs oracle {want}"
        );
    }

    #[test]
    fn gated_out_joint_gets_zero_gradient() {
        let (seq, vocab, readout, field) = small_setup(7, 3);
        let gate = InfluenceWeights::per_joint(vec![1.0, 0.0, 1.0]).unwrap();
        let batch = batch_from(&seq, &field, 6, 13)
            .into_iter()
            .map(|mut s| {
                s.target = field.eval(&s.pose, s.point).unwrap();
                s
            })
            .collect::<Vec<_>>();
        let grads = fit_gradients(&vocab, &readout, &batch, &gate, 0.25).unwrap();
        assert!(grads.embeddings.keys().all(|&(j, _, _)| j != 1));
    }

    #[test]
    fn tv_only_gradient_is_the_tv_gradient_mean() {
        let (seq, vocab, _, field) = small_setup(15, 2);
        let layout = FeatureLayout::of(&vocab);
        // zero readout and zero targets kill the data term
        let readout = LinearReadout::zeros(1, layout.total_len());
        let mut batch = batch_from(&seq, &field, 5, 17);
        for s in &mut batch {
            s.target = vec![0.0];
        }
        let tv_weight = 2.5;
        let grads =
            fit_gradients(&vocab, &readout, &batch, &InfluenceWeights::Uniform, tv_weight)
                .unwrap();
        let touched = touched_embeddings(&vocab, &batch, &InfluenceWeights::Uniform);
        let factor = tv_weight / touched.len() as f64;
        for (&(j, s, k), grad) in &grads.embeddings {
            let want = vocab.joint(j).embedding(s, k).tv_loss_gradient();
            for axis in 0..3 {
                for (g, w) in grad.line(axis).iter().zip(want.line(axis)) {
                    assert!((g - factor * w).abs() < 1e-12);
                }
            }
        }
        assert!(grads.readout_weights.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (seq, mut vocab, readout, field) = small_setup(23, 2);
        let weights = InfluenceWeights::gaussian(vec![[0.3, 0.3, 0.3], [0.7, 0.7, 0.7]], 0.6)
            .unwrap();
        let batch = batch_from(&seq, &field, 6, 29);
        let tv_weight = 0.05;
        let grads = fit_gradients(&vocab, &readout, &batch, &weights, tv_weight).unwrap();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let keys: Vec<(usize, usize, usize)> = grads.embeddings.keys().copied().collect();
        for _ in 0..60 {
            let (j, s, k) = keys[rng.gen_range(0..keys.len())];
            let axis = rng.gen_range(0..3);
            let len = grads.embeddings[&(j, s, k)].line(axis).len();
            let idx = rng.gen_range(0..len);
            let orig = vocab.joint(j).embedding(s, k).line(axis)[idx];
            vocab.joint_mut(j).embedding_mut(s, k).line_mut(axis)[idx] = orig + h;
            let plus = fit_loss(&vocab, &readout, &batch, &weights, tv_weight).unwrap();
            vocab.joint_mut(j).embedding_mut(s, k).line_mut(axis)[idx] = orig - h;
            let minus = fit_loss(&vocab, &readout, &batch, &weights, tv_weight).unwrap();
            vocab.joint_mut(j).embedding_mut(s, k).line_mut(axis)[idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let g = grads.embeddings[&(j, s, k)].line(axis)[idx];
            let denom = fd.abs().max(g.abs()).max(1e-6);
            assert!(
                (fd - g).abs() / denom < 1e-4,
                "({j},{s},{k}) axis {axis} idx {idx}: fd {fd} vs analytic {g}"
            );
        }
        // readout entries as well
        for _ in 0..20 {
            let o = rng.gen_range(0..readout.outputs());
            let f = rng.gen_range(0..readout.inputs());
            let mut plus_r = readout.clone();
            plus_r.weights[o * readout.inputs() + f] += h;
            let plus = fit_loss(&vocab, &plus_r, &batch, &weights, tv_weight).unwrap();
            let mut minus_r = readout.clone();
            minus_r.weights[o * readout.inputs() + f] -= h;
            let minus = fit_loss(&vocab, &minus_r, &batch, &weights, tv_weight).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            let g = grads.readout_weights[o * readout.inputs() + f];
            let denom = fd.abs().max(g.abs()).max(1e-6);
            assert!((fd - g).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn engine_matches_public_gradients() {
        let (seq, vocab, readout, field) = small_setup(37, 2);
        let batch = batch_from(&seq, &field, 6, 41);
        let weights = InfluenceWeights::Uniform;
        let tv_weight = 0.1;
        let public = fit_gradients(&vocab, &readout, &batch, &weights, tv_weight).unwrap();

        let encoder = lines_encoder(&vocab);
        let set = build_train_set(&encoder, &batch, &weights, vocab.bbox());
        let touched = encoder.touched(&set.ctxs);
        let mut grad = vec![0.0; encoder.params.len()];
        let mut feature = vec![0.0; encoder.feature_len];
        let mut dldf = vec![0.0; encoder.feature_len];
        let coef = 2.0 / (batch.len() * readout.outputs()) as f64;
        for (blocks, target) in set.ctxs.iter().zip(&set.targets) {
            feature.iter_mut().for_each(|v| *v = 0.0);
            encoder.forward(blocks, &mut feature);
            let prediction = readout.apply(&feature);
            dldf.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..readout.outputs() {
                let scaled = coef * (prediction[o] - target[o]);
                let row = &readout.weights()[o * encoder.feature_len..(o + 1) * encoder.feature_len];
                for f in 0..encoder.feature_len {
                    dldf[f] += scaled * row[f];
                }
            }
            encoder.backward(blocks, &dldf, &mut grad);
        }
        encoder.tv_grad(&touched, tv_weight / touched.len() as f64, &mut grad);

        for (&(j, s, k), lines) in &public.embeddings {
            let kb = encoder.key_base(j, s, k);
            for axis in 0..3 {
                let lstart = encoder.scales[s].line_start[axis];
                for (idx, want) in lines.line(axis).iter().enumerate() {
                    let got = grad[kb + lstart + idx];
                    assert!(
                        (got - want).abs() < 1e-12,
                        "({j},{s},{k}) axis {axis} idx {idx}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_steps_reports_the_initial_state() {
        let seq = default_task_sequence(2, 20, 5);
        let field = SyntheticField::new(2, 1, InfluenceWeights::Uniform, 6).unwrap();
        let mut cfg = FitConfig::default_task(Variant::FeatureLines, 5);
        cfg.scales = vec![ScaleConfig::cubic(4, 1, 4, 2).unwrap()];
        cfg.steps = 0;
        cfg.points_per_pose = 2;
        cfg.heldout_poses = 4;
        let report = run_fit(&seq, &field, &cfg).unwrap();
        assert_eq!(report.steps_run, 0);
        assert!(report.loss_curve.is_empty());
        assert_eq!(report.final_loss, report.initial_loss);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let seq = default_task_sequence(2, 24, 8);
        let field = SyntheticField::new(2, 1, InfluenceWeights::Uniform, 9).unwrap();
        let mut cfg = FitConfig::default_task(Variant::FeatureLines, 8);
        cfg.scales = vec![ScaleConfig::cubic(4, 1, 6, 3).unwrap()];
        cfg.steps = 40;
        cfg.points_per_pose = 2;
        cfg.heldout_poses = 6;
        let a = run_fit(&seq, &field, &cfg).unwrap();
        let b = run_fit(&seq, &field, &cfg).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.final_train_mse, b.final_train_mse);
        assert_eq!(a.heldout_mse, b.heldout_mse);
        assert_eq!(a.summary_line(), b.summary_line());
    }

    #[test]
    fn full_batch_curve_never_rises() {
        let seq = default_task_sequence(2, 30, 10);
        let field = SyntheticField::new(2, 1, InfluenceWeights::Uniform, 11).unwrap();
        let mut cfg = FitConfig::default_task(Variant::FeatureLines, 10);
        cfg.scales = vec![ScaleConfig::cubic(6, 2, 8, 3).unwrap()];
        cfg.steps = 150;
        cfg.points_per_pose = 3;
        cfg.heldout_poses = 5;
        cfg.learning_rate = 2.0; // deliberately hot; halving must tame it
        let report = run_fit(&seq, &field, &cfg).unwrap();
        for pair in report.loss_curve.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15);
        }
        assert!(report.final_loss < report.initial_loss);
    }

    #[test]
    fn ablation_budgets_land_within_five_percent() {
        let seq = default_task_sequence(3, 60, 14);
        let field = SyntheticField::new(3, 1, InfluenceWeights::Uniform, 15).unwrap();
        for variant in [Variant::FeatureLines, Variant::GlobalCodes, Variant::GlobalKeyPoses] {
            let mut cfg = FitConfig::default_task(variant, 14);
            cfg.steps = 5;
            cfg.points_per_pose = 2;
            cfg.heldout_poses = 4;
            let report = run_fit(&seq, &field, &cfg).unwrap();
            assert!(
                report.budget_ok,
                "{variant}: {} vs reference {}",
                report.param_count, report.budget_reference
            );
        }
    }

    #[test]
    fn fitted_vocab_round_trips_through_stats() {
        let seq = default_task_sequence(2, 16, 21);
        let field = SyntheticField::new(2, 1, InfluenceWeights::Uniform, 22).unwrap();
        let mut cfg = FitConfig::default_task(Variant::FeatureLines, 21);
        cfg.scales = vec![ScaleConfig::cubic(4, 1, 4, 2).unwrap()];
        cfg.steps = 10;
        cfg.points_per_pose = 2;
        cfg.heldout_poses = 3;
        let _ = run_fit(&seq, &field, &cfg).unwrap();
        let vocab = take_fitted_vocab().expect("feature-lines run leaves a vocab");
        assert!(vocab_stats(&vocab, Some(&seq)).is_ok());
        assert!(take_fitted_vocab().is_none());
    }

    #[test]
    fn summary_lines_round_trip() {
        let report = FitReport {
            variant: Variant::GlobalCodes,
            seed: 17,
            steps_run: 120,
            loss_curve: vec![],
            initial_loss: 1.5,
            final_loss: 0.25,
            final_train_mse: 0.2,
            heldout_mse: 0.4,
            param_count: 5000,
            budget_reference: 5100,
            budget_ok: true,
            tv_weight: 0.001,
            learning_rate_final: 0.125,
            wall_time: Duration::from_millis(1),
        };
        let summary = FitSummary::parse(&report.summary_line()).unwrap();
        assert_eq!(summary.variant, "globalcode");
        assert_eq!(summary.seed, 17);
        assert_eq!(summary.final_train_mse, 0.2);
        assert_eq!(summary.heldout_mse, 0.4);
        assert!(summary.budget_ok);
        assert!(FitSummary::parse("not a summary").is_err());
    }
}
