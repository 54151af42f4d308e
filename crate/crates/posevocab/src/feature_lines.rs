//! Feature-line embeddings and their arithmetic.
//!
//! Each pose embedding is three 1-D feature grids ("lines") along the x, y
//! and z axes. The feature of a 3D point is the concatenation of linearly
//! interpolated rows from the three lines, in fixed (x, y, z) order. Blending
//! a set of embeddings and sampling the result commute because both are
//! linear; tests pin that down.
//!
//! Gradients of the sampling stencil and of the total-variation regularizer
//! are analytic so the fitting module never needs numeric differentiation.

use crate::error::{Error, Result};

/// Per-scale layout and query parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleConfig {
    pub resolution: [usize; 3],
    pub channels: usize,
    pub key_count: usize,
    pub knn: usize,
}

impl ScaleConfig {
    pub fn new(
        resolution: [usize; 3],
        channels: usize,
        key_count: usize,
        knn: usize,
    ) -> Result<Self> {
        if resolution.iter().any(|&r| r < 2) {
            return Err(Error::invalid("feature-line resolution must be >= 2"));
        }
        if channels == 0 {
            return Err(Error::invalid("channel count must be >= 1"));
        }
        if key_count == 0 {
            return Err(Error::invalid("key count must be >= 1"));
        }
        if knn == 0 || knn > key_count {
            return Err(Error::invalid(format!(
                "knn must be in 1..={key_count}, got {knn}"
            )));
        }
        Ok(Self {
            resolution,
            channels,
            key_count,
            knn,
        })
    }

    pub fn cubic(resolution: usize, channels: usize, key_count: usize, knn: usize) -> Result<Self> {
        Self::new([resolution; 3], channels, key_count, knn)
    }

    /// The four default spatial scales: resolutions 256/128/32/8 with 256
    /// keys, 4 channels and 8 nearest neighbors on every scale.
    pub fn paper_defaults() -> Vec<ScaleConfig> {
        [256usize, 128, 32, 8]
            .iter()
            .map(|&r| Self::cubic(r, 4, 256, 8).expect("defaults are valid"))
            .collect()
    }

    /// Entries of one embedding on this scale: (R_x + R_y + R_z) * D.
    pub fn params_per_key(&self) -> usize {
        (self.resolution[0] + self.resolution[1] + self.resolution[2]) * self.channels
    }
}

/// One pose embedding: three feature lines, row-major `R_a x D` each.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLines {
    resolution: [usize; 3],
    channels: usize,
    lines: [Vec<f64>; 3],
}

impl FeatureLines {
    pub fn new(resolution: [usize; 3], channels: usize, lines: [Vec<f64>; 3]) -> Result<Self> {
        if resolution.iter().any(|&r| r < 2) || channels == 0 {
            return Err(Error::invalid(
                "feature lines need resolution >= 2 and channels >= 1",
            ));
        }
        for axis in 0..3 {
            if lines[axis].len() != resolution[axis] * channels {
                return Err(Error::DimensionMismatch {
                    context: format!("feature line {}", AXIS_NAMES[axis]),
                    expected: resolution[axis] * channels,
                    got: lines[axis].len(),
                });
            }
            if lines[axis].iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!(
                    "feature line {}",
                    AXIS_NAMES[axis]
                )));
            }
        }
        Ok(Self {
            resolution,
            channels,
            lines,
        })
    }

    pub fn zeros(resolution: [usize; 3], channels: usize) -> Result<Self> {
        let lines = [
            vec![0.0; resolution[0] * channels],
            vec![0.0; resolution[1] * channels],
            vec![0.0; resolution[2] * channels],
        ];
        Self::new(resolution, channels, lines)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn line(&self, axis: usize) -> &[f64] {
        &self.lines[axis]
    }

    pub(crate) fn line_mut(&mut self, axis: usize) -> &mut [f64] {
        &mut self.lines[axis]
    }

    pub fn row(&self, axis: usize, index: usize) -> &[f64] {
        let d = self.channels;
        &self.lines[axis][index * d..(index + 1) * d]
    }

    pub fn same_shape(&self, other: &FeatureLines) -> bool {
        self.resolution == other.resolution && self.channels == other.channels
    }

    /// Total entry count across the three lines.
    pub fn param_count(&self) -> usize {
        (self.resolution[0] + self.resolution[1] + self.resolution[2]) * self.channels
    }

    /// Feature of a normalized point: interpolated x-row, then y-row, then
    /// z-row concatenated (length `3 * channels`). Out-of-range coordinates
    /// clamp to the box.
    pub fn sample(&self, p: [f64; 3]) -> Vec<f64> {
        let d = self.channels;
        let mut out = Vec::with_capacity(3 * d);
        for axis in 0..3 {
            let stencil = interp_coeffs(self.resolution[axis], p[axis]);
            let lo = self.row(axis, stencil.row_lo);
            let hi = self.row(axis, stencil.row_hi);
            if stencil.w_hi == 0.0 {
                out.extend_from_slice(lo);
            } else if stencil.w_lo == 0.0 {
                out.extend_from_slice(hi);
            } else {
                for c in 0..d {
                    out.push(stencil.w_lo * lo[c] + stencil.w_hi * hi[c]);
                }
            }
        }
        out
    }

    /// Sum over the three lines of squared L2 differences between
    /// consecutive rows. Zero exactly when every line is row-constant.
    pub fn tv_loss(&self) -> f64 {
        let d = self.channels;
        let mut total = 0.0;
        for axis in 0..3 {
            let line = &self.lines[axis];
            for i in 0..self.resolution[axis] - 1 {
                for c in 0..d {
                    let diff = line[(i + 1) * d + c] - line[i * d + c];
                    total += diff * diff;
                }
            }
        }
        total
    }

    /// Exact gradient of [`FeatureLines::tv_loss`] with respect to every entry.
    pub fn tv_loss_gradient(&self) -> FeatureLines {
        let d = self.channels;
        let mut grad = FeatureLines::zeros(self.resolution, d).expect("shape already valid");
        for axis in 0..3 {
            let line = &self.lines[axis];
            let g = grad.line_mut(axis);
            for i in 0..self.resolution[axis] - 1 {
                for c in 0..d {
                    let diff = line[(i + 1) * d + c] - line[i * d + c];
                    g[(i + 1) * d + c] += 2.0 * diff;
                    g[i * d + c] -= 2.0 * diff;
                }
            }
        }
        grad
    }

    pub(crate) fn scale_in_place(&mut self, factor: f64) {
        for axis in 0..3 {
            for v in self.lines[axis].iter_mut() {
                *v *= factor;
            }
        }
    }

    pub(crate) fn add_scaled(&mut self, other: &FeatureLines, factor: f64) {
        debug_assert!(self.same_shape(other));
        for axis in 0..3 {
            let src = &other.lines[axis];
            for (dst, s) in self.lines[axis].iter_mut().zip(src) {
                *dst += factor * s;
            }
        }
    }

    /// Round every entry to f32 precision (the on-disk representation).
    pub(crate) fn quantize_f32(&mut self) {
        for axis in 0..3 {
            for v in self.lines[axis].iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

const AXIS_NAMES: [&str; 3] = ["x", "y", "z"];

/// Interpolation stencil of a feature line with `rows` rows at normalized
/// coordinate `u` (clamped to `[0, 1]`): the two bracketing row indices and
/// their coefficients. At an exact grid index one coefficient is exactly 1
/// and the other exactly 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisStencil {
    pub row_lo: usize,
    pub row_hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

pub fn interp_coeffs(rows: usize, u: f64) -> AxisStencil {
    debug_assert!(rows >= 1);
    if rows == 1 {
        return AxisStencil {
            row_lo: 0,
            row_hi: 0,
            w_lo: 1.0,
            w_hi: 0.0,
        };
    }
    let u = u.clamp(0.0, 1.0);
    let t = u * (rows - 1) as f64;
    let mut lo = t.floor() as usize;
    if lo > rows - 2 {
        lo = rows - 2;
    }
    let frac = t - lo as f64;
    AxisStencil {
        row_lo: lo,
        row_hi: lo + 1,
        w_lo: 1.0 - frac,
        w_hi: frac,
    }
}

/// Linear interpolation on a row-major `R x D` feature line at `u` in
/// `[0, 1]`; continuous index is `u * (R - 1)` so both endpoints return
/// grid rows exactly.
pub fn lerp_1d(line: &[f64], channels: usize, u: f64) -> Vec<f64> {
    assert!(channels > 0 && line.len() % channels == 0);
    let rows = line.len() / channels;
    let stencil = interp_coeffs(rows, u);
    let lo = &line[stencil.row_lo * channels..(stencil.row_lo + 1) * channels];
    let hi = &line[stencil.row_hi * channels..(stencil.row_hi + 1) * channels];
    if stencil.w_hi == 0.0 {
        lo.to_vec()
    } else if stencil.w_lo == 0.0 {
        hi.to_vec()
    } else {
        (0..channels)
            .map(|c| stencil.w_lo * lo[c] + stencil.w_hi * hi[c])
            .collect()
    }
}

/// Normalized weighted sum of embeddings: `sum(w_k F_k) / sum(w_k)`.
///
/// Weights are normalized before accumulation, so a single entry comes back
/// unchanged bit for bit. An all-zero weight sum (every neighbor at distance
/// exactly one) falls back to the unweighted mean and logs a warning.
pub fn blend(parts: &[(f64, &FeatureLines)]) -> Result<FeatureLines> {
    let first = match parts.first() {
        Some((_, f)) => *f,
        None => return Err(Error::invalid("blend of an empty embedding set")),
    };
    for (w, f) in parts {
        if !w.is_finite() || *w < 0.0 {
            return Err(Error::invalid(format!("blend weight {w} must be >= 0")));
        }
        if !f.same_shape(first) {
            return Err(Error::invalid(
                "blend inputs must share one feature-line shape",
            ));
        }
    }
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let raw: Vec<f64> = parts.iter().map(|(w, _)| *w).collect();
    let normalized = normalized_weights(&raw);
    let mut out = FeatureLines::zeros(first.resolution, first.channels)?;
    for ((_, f), wn) in parts.iter().zip(&normalized) {
        out.add_scaled(f, *wn);
    }
    Ok(out)
}

/// Weights scaled to sum to one. An all-zero sum (every neighbor at distance
/// exactly one) falls back to the unweighted mean and logs a warning.
pub(crate) fn normalized_weights(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        log::warn!(
            "blend weights sum to zero ({} entries); falling back to the unweighted mean",
            raw.len()
        );
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}
