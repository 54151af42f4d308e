//! Synthetic pose-conditioned target fields for fitting experiments.
//!
//! A field mixes one oscillator per joint and output channel:
//!
//! ```text
//! g(Θ, p)[o] = Σ_j ω(p, j) · a_{o,j} · sin(b_{o,j} · angle(θ_j) + c_{o,j} · <p, u_{o,j}>)
//! ```
//!
//! so both the key-rotation axis (through the joint angle) and the spatial
//! axis (through the direction projection) of an encoding get exercised.
//! Amplitudes are scaled so outputs stay within `[-3, 3]`.

use crate::error::{Error, Result};
use crate::query::{InfluenceWeights, Pose};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SyntheticField {
    joints: usize,
    outputs: usize,
    weights: InfluenceWeights,
    // flattened [output][joint]
    amplitude: Vec<f64>,
    pose_freq: Vec<f64>,
    spatial_freq: Vec<f64>,
    spatial_dir: Vec<[f64; 3]>,
}

impl SyntheticField {
    /// Draws per-(output, joint) oscillator parameters from the seed.
    /// The influence weights are the same ones the query side will use.
    pub fn new(joints: usize, outputs: usize, weights: InfluenceWeights, seed: u64) -> Result<Self> {
        if joints == 0 || outputs == 0 {
            return Err(Error::invalid("field needs joints >= 1 and outputs >= 1"));
        }
        weights.check_joints(joints)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = joints * outputs;
        let mut amplitude = Vec::with_capacity(n);
        let mut pose_freq = Vec::with_capacity(n);
        let mut spatial_freq = Vec::with_capacity(n);
        let mut spatial_dir = Vec::with_capacity(n);
        for _ in 0..n {
            amplitude.push(rng.gen_range(0.5..1.0) * 3.0 / joints as f64);
            pose_freq.push(rng.gen_range(1.0..4.0));
            spatial_freq.push(rng.gen_range(2.0..8.0));
            spatial_dir.push(random_unit(&mut rng));
        }
        Ok(Self {
            joints,
            outputs,
            weights,
            amplitude,
            pose_freq,
            spatial_freq,
            spatial_dir,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn output_count(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &InfluenceWeights {
        &self.weights
    }

    pub fn eval(&self, pose: &Pose, point: [f64; 3]) -> Result<Vec<f64>> {
        if pose.joint_count() != self.joints {
            return Err(Error::DimensionMismatch {
                context: "field pose joints".to_string(),
                expected: self.joints,
                got: pose.joint_count(),
            });
        }
        let mut out = Vec::with_capacity(self.outputs);
        for o in 0..self.outputs {
            let mut acc = 0.0;
            for j in 0..self.joints {
                let idx = o * self.joints + j;
                let angle = pose.rotation(j).canonicalized().angle();
                let u = self.spatial_dir[idx];
                let proj = point[0] * u[0] + point[1] * u[1] + point[2] * u[2];
                acc += self.weights.weight(point, j)
                    * self.amplitude[idx]
                    * (self.pose_freq[idx] * angle + self.spatial_freq[idx] * proj).sin();
            }
            out.push(acc);
        }
        Ok(out)
    }
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::AxisAngle;

    fn pose(vals: &[[f64; 3]]) -> Pose {
        Pose::new(
            vals.iter()
                .map(|v| AxisAngle::from_array(*v).unwrap())
                .collect(),
        )
    }

    #[test]
    fn deterministic_given_seed() {
        let a = SyntheticField::new(3, 2, InfluenceWeights::Uniform, 11).unwrap();
        let b = SyntheticField::new(3, 2, InfluenceWeights::Uniform, 11).unwrap();
        let p = pose(&[[0.3, 0.0, 0.1], [0.0, 0.4, 0.0], [0.1, 0.1, 0.1]]);
        assert_eq!(
            a.eval(&p, [0.2, 0.5, 0.8]).unwrap(),
            b.eval(&p, [0.2, 0.5, 0.8]).unwrap()
        );
    }

    #[test]
    fn outputs_stay_bounded() {
        let field = SyntheticField::new(4, 2, InfluenceWeights::Uniform, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let p = pose(&[
                [rng.gen_range(-3.0..3.0), 0.0, rng.gen_range(-3.0..3.0)],
                [0.0, rng.gen_range(-3.0..3.0), 0.0],
                [rng.gen_range(-3.0..3.0), 0.0, 0.0],
                [0.0, 0.0, rng.gen_range(-3.0..3.0)],
            ]);
            let point = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ];
            for v in field.eval(&p, point).unwrap() {
                assert!(v.abs() <= 3.0);
            }
        }
    }

    #[test]
    fn gated_out_joints_do_not_contribute() {
        let gate = InfluenceWeights::per_joint(vec![1.0, 0.0]).unwrap();
        let field = SyntheticField::new(2, 1, gate, 5).unwrap();
        let base = pose(&[[0.3, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        let moved = pose(&[[0.3, 0.0, 0.0], [1.5, 0.2, -0.3]]);
        let p = [0.4, 0.4, 0.4];
        assert_eq!(field.eval(&base, p).unwrap(), field.eval(&moved, p).unwrap());
    }

    #[test]
    fn joint_mismatch_is_rejected() {
        let field = SyntheticField::new(2, 1, InfluenceWeights::Uniform, 5).unwrap();
        assert!(field.eval(&pose(&[[0.0; 3]]), [0.0; 3]).is_err());
    }
}
