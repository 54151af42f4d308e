//! PoseVocab: joint-structured pose encodings backed by feature lines.
//!
//! The crate builds a vocabulary of key rotations per skeletal joint from a
//! training pose sequence, pairs each key with a learnable embedding made of
//! three feature lines, answers hierarchical pose-feature queries for
//! arbitrary poses and 3D points, and fits the embeddings to synthetic
//! pose-conditioned fields with fully analytic gradients.
//!
//! Pipeline in one breath: [`vocab::build_vocab`] samples key rotations by
//! farthest-point sampling under the quaternion distance of
//! [`rotation::rotation_distance`]; [`query::query_pose_feature`] splits a
//! query pose by joint, blends the K nearest keys' embeddings, samples the
//! blended feature lines at a 3D point and concatenates the gated per-joint
//! blocks; [`fit::run_fit`] descends on those embeddings against a synthetic
//! target field.

pub mod error;
pub mod feature_lines;
pub mod field;
pub mod fit;
pub mod query;
pub mod rotation;
pub mod vocab;

pub use error::{Error, Result};
pub use feature_lines::{blend, interp_coeffs, lerp_1d, AxisStencil, FeatureLines, ScaleConfig};
pub use field::SyntheticField;
pub use fit::{
    default_task_sequence, fit_gradients, fit_loss, run_fit, FitConfig, FitGradients, FitReport,
    FitSample, FitSummary, LinearReadout, Variant,
};
pub use query::{
    blend_embeddings, knn_keys, query_pose_feature, query_sequence_smoothed, FeatureLayout,
    InfluenceWeights, Pose, PoseFeature,
};
pub use rotation::{axis_angle_to_quat, rotation_distance, AxisAngle, UnitQuat};
pub use vocab::{
    build_vocab, sample_key_rotation_indices, sample_key_rotations, vocab_stats, Aabb, InitPolicy,
    JointVocab, PoseSequence, PoseVocab, VocabStats,
};
