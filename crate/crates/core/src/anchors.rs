//! Learnable anchor grid over yaw/pitch and the three interpolation schemes
//! that turn a gaze direction into a gaze-token embedding.
//!
//! Anchors are stored row-major with pitch as the row: anchor
//! `(yaw_values[c], pitch_values[r])` has index `r * n_yaw + c`. The default
//! grid (30° steps) carries both yaw = −180 and yaw = +180, giving 13 × 7 = 91
//! anchors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{
    dot3, norm3, slerp_coefficients, slerp_weights, vec_to_yawpitch, yawpitch_to_vec, GazeVector,
    YawPitch, DEGENERATE_ARC,
};
use std::f64::consts::PI;
use crate::linalg::{self, Matrix};

/// Standard deviation of the Gaussian used to initialize anchor embeddings.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

/// Fixed geometry of the anchor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    yaw_step: f64,
    pitch_step: f64,
    yaw_values: Vec<f64>,
    pitch_values: Vec<f64>,
    positions: Vec<YawPitch>,
    gazes: Vec<GazeVector>,
}

fn grid_values(lo: f64, hi: f64, step: f64, key: &str) -> Result<Vec<f64>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::config(key, format!("step must be positive, got {step}")));
    }
    let cells = (hi - lo) / step;
    let n = cells.round();
    if (cells - n).abs() > 1e-9 || n < 1.0 {
        return Err(Error::config(
            key,
            format!("step {step} does not divide [{lo}, {hi}] evenly"),
        ));
    }
    let n = n as usize;
    Ok((0..=n)
        .map(|i| if i == n { hi } else { lo + i as f64 * step })
        .collect())
}

impl AnchorGrid {
    pub fn new(yaw_step: f64, pitch_step: f64) -> Result<Self> {
        let yaw_values = grid_values(-180.0, 180.0, yaw_step, "yaw_step")?;
        let pitch_values = grid_values(-90.0, 90.0, pitch_step, "pitch_step")?;
        let mut positions = Vec::with_capacity(yaw_values.len() * pitch_values.len());
        let mut gazes = Vec::with_capacity(positions.capacity());
        for &pitch in &pitch_values {
            for &yaw in &yaw_values {
                let yp = YawPitch { yaw, pitch };
                gazes.push(yawpitch_to_vec(yp)?);
                positions.push(yp);
            }
        }
        Ok(AnchorGrid {
            yaw_step,
            pitch_step,
            yaw_values,
            pitch_values,
            positions,
            gazes,
        })
    }

    pub fn yaw_step(&self) -> f64 {
        self.yaw_step
    }

    pub fn pitch_step(&self) -> f64 {
        self.pitch_step
    }

    pub fn yaw_values(&self) -> &[f64] {
        &self.yaw_values
    }

    pub fn pitch_values(&self) -> &[f64] {
        &self.pitch_values
    }

    pub fn len(&self) -> usize {
        self.gazes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gazes.is_empty()
    }

    pub fn gazes(&self) -> &[GazeVector] {
        &self.gazes
    }

    pub fn positions(&self) -> &[YawPitch] {
        &self.positions
    }

    pub fn index(&self, yaw_idx: usize, pitch_idx: usize) -> usize {
        pitch_idx * self.yaw_values.len() + yaw_idx
    }

    /// Index of the anchor sitting exactly at `(yaw, pitch)`, if any.
    pub fn index_of(&self, yaw: f64, pitch: f64) -> Option<usize> {
        let c = self.yaw_values.iter().position(|&y| y == yaw)?;
        let r = self.pitch_values.iter().position(|&p| p == pitch)?;
        Some(self.index(c, r))
    }
}

/// The four corners of the grid cell bracketing a target, with the target's
/// fractional position inside the cell.
///
/// Corner order: `A1 = (yaw_lo, pitch_lo)`, `A2 = (yaw_hi, pitch_lo)`,
/// `A3 = (yaw_lo, pitch_hi)`, `A4 = (yaw_hi, pitch_hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub corners: [usize; 4],
    pub yaw_lo: f64,
    pub yaw_hi: f64,
    pub pitch_lo: f64,
    pub pitch_hi: f64,
    /// Yaw fraction in `[0, 1]`.
    pub u: f64,
    /// Pitch fraction in `[0, 1]`.
    pub v: f64,
}

fn bracket(values: &[f64], x: f64) -> usize {
    // last grid line at or below x, keeping one line above it
    let above = values.partition_point(|&g| g <= x);
    above.saturating_sub(1).min(values.len() - 2)
}

/// Locates the cell bracketing `yp`. A target on a grid line belongs to the
/// cell having it on the lower edge, except at the range maximum.
pub fn locate_cell(yp: YawPitch, grid: &AnchorGrid) -> Result<Cell> {
    yp.validate()?;
    let c = bracket(&grid.yaw_values, yp.yaw);
    let r = bracket(&grid.pitch_values, yp.pitch);
    let (yaw_lo, yaw_hi) = (grid.yaw_values[c], grid.yaw_values[c + 1]);
    let (pitch_lo, pitch_hi) = (grid.pitch_values[r], grid.pitch_values[r + 1]);
    Ok(Cell {
        corners: [
            grid.index(c, r),
            grid.index(c + 1, r),
            grid.index(c, r + 1),
            grid.index(c + 1, r + 1),
        ],
        yaw_lo,
        yaw_hi,
        pitch_lo,
        pitch_hi,
        u: ((yp.yaw - yaw_lo) / (yaw_hi - yaw_lo)).clamp(0.0, 1.0),
        v: ((yp.pitch - pitch_lo) / (pitch_hi - pitch_lo)).clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpolationScheme {
    GlobalLinear,
    PlanarBilinear,
    SphericalBilinear,
}

impl InterpolationScheme {
    pub const ALL: [InterpolationScheme; 3] = [
        InterpolationScheme::GlobalLinear,
        InterpolationScheme::PlanarBilinear,
        InterpolationScheme::SphericalBilinear,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            InterpolationScheme::GlobalLinear => "global-linear",
            InterpolationScheme::PlanarBilinear => "planar-bilinear",
            InterpolationScheme::SphericalBilinear => "spherical-bilinear",
        }
    }

    pub fn weights(&self, g: &GazeVector, grid: &AnchorGrid) -> Result<InterpolationWeights> {
        match self {
            InterpolationScheme::GlobalLinear => global_linear_weights(g, grid.gazes()),
            InterpolationScheme::PlanarBilinear => planar_bilinear_weights(g, grid),
            InterpolationScheme::SphericalBilinear => spherical_bilinear_weights(g, grid),
        }
    }
}

impl fmt::Display for InterpolationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InterpolationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global-linear" | "global" => Ok(InterpolationScheme::GlobalLinear),
            "planar-bilinear" | "planar" | "bilinear" => Ok(InterpolationScheme::PlanarBilinear),
            "spherical-bilinear" | "spherical" => Ok(InterpolationScheme::SphericalBilinear),
            other => Err(Error::config("scheme", format!("unknown interpolation scheme `{other}`"))),
        }
    }
}

/// Sparse anchor weights produced by one of the interpolation schemes.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationWeights {
    pub scheme: InterpolationScheme,
    pub entries: Vec<(usize, f64)>,
}

impl InterpolationWeights {
    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w).sum()
    }

    /// Total weight assigned to anchor `index`.
    pub fn weight_of(&self, index: usize) -> f64 {
        self.entries
            .iter()
            .filter(|(i, _)| *i == index)
            .map(|(_, w)| w)
            .sum()
    }

    /// Normalized direction `Σ w_k · g_k` over the weighted anchors' gazes.
    pub fn reconstruct(&self, gazes: &[GazeVector]) -> Result<GazeVector> {
        let mut acc = [0.0; 3];
        for &(i, w) in &self.entries {
            let g = gazes
                .get(i)
                .ok_or_else(|| Error::shape(format!("index < {}", gazes.len()), i))?
                .as_array();
            for k in 0..3 {
                acc[k] += w * g[k];
            }
        }
        GazeVector::normalize(acc)
    }
}

/// Slerp weights of `point` between `lo` and `hi`, with the interpolation
/// parameter read from the projection of `point` onto the `lo`–`hi` great
/// circle (signed, so points off the arc clamp to the nearer end).
fn projected_slerp_weights(lo: &GazeVector, hi: &GazeVector, point: &GazeVector) -> Result<(f64, f64)> {
    let theta = lo.arc_to(hi);
    if theta > PI - DEGENERATE_ARC {
        return slerp_weights(lo, hi, point);
    }
    let (l, h, p) = (lo.as_array(), hi.as_array(), point.as_array());
    // unit tangent at `lo` pointing toward `hi`
    let c = dot3(&l, &h);
    let mut tangent = [h[0] - c * l[0], h[1] - c * l[1], h[2] - c * l[2]];
    let tn = norm3(&tangent);
    tangent.iter_mut().for_each(|x| *x /= tn);
    let along = dot3(&p, &tangent).atan2(dot3(&p, &l));
    let t = (along / theta).clamp(0.0, 1.0);
    Ok(slerp_coefficients(theta, t))
}

/// Weights of one cell row for the row point at the target's yaw.
///
/// Rows whose corners coincide (the poles) take linear weights `(1 − u, u)`
/// so weights stay continuous across neighbouring pole cells.
fn row_weights(lo: &GazeVector, hi: &GazeVector, point: &GazeVector, u: f64) -> Result<(f64, f64)> {
    if lo.arc_to(hi) < DEGENERATE_ARC {
        return Ok((1.0 - u, u));
    }
    if u == 0.0 {
        return Ok((1.0, 0.0));
    }
    if u == 1.0 {
        return Ok((0.0, 1.0));
    }
    projected_slerp_weights(lo, hi, point)
}

/// Geometry-aware weights: slerp weights of the row points `a = (yaw, pitch_lo)`
/// and `b = (yaw, pitch_hi)` against their row corners, composed with the slerp
/// weights of the target between `a` and `b` along their shared meridian.
pub fn spherical_bilinear_weights(g: &GazeVector, grid: &AnchorGrid) -> Result<InterpolationWeights> {
    let yp = vec_to_yawpitch(g)?;
    spherical_bilinear_at(g, yp, grid)
}

/// [`spherical_bilinear_weights`] for a target given in yaw/pitch. Unlike the
/// vector form this distinguishes anchors that share a direction (the pole
/// rows and the ±180° meridian).
pub fn spherical_bilinear_weights_at(yp: YawPitch, grid: &AnchorGrid) -> Result<InterpolationWeights> {
    let g = yawpitch_to_vec(yp)?;
    spherical_bilinear_at(&g, yp, grid)
}

fn spherical_bilinear_at(g: &GazeVector, yp: YawPitch, grid: &AnchorGrid) -> Result<InterpolationWeights> {
    let cell = locate_cell(yp, grid)?;
    let [i1, i2, i3, i4] = cell.corners;
    let gz = grid.gazes();
    let a = yawpitch_to_vec(YawPitch { yaw: yp.yaw, pitch: cell.pitch_lo })?;
    let b = yawpitch_to_vec(YawPitch { yaw: yp.yaw, pitch: cell.pitch_hi })?;
    let (wa1, wa2) = row_weights(&gz[i1], &gz[i2], &a, cell.u)?;
    let (wb3, wb4) = row_weights(&gz[i3], &gz[i4], &b, cell.u)?;
    let (wia, wib) = if cell.v == 0.0 {
        (1.0, 0.0)
    } else if cell.v == 1.0 {
        (0.0, 1.0)
    } else {
        projected_slerp_weights(&a, &b, g)?
    };
    Ok(InterpolationWeights {
        scheme: InterpolationScheme::SphericalBilinear,
        entries: vec![
            (i1, wia * wa1),
            (i2, wia * wa2),
            (i3, wib * wb3),
            (i4, wib * wb4),
        ],
    })
}

/// Standard bilinear weights in (yaw, pitch) coordinates.
pub fn planar_bilinear_weights(g: &GazeVector, grid: &AnchorGrid) -> Result<InterpolationWeights> {
    planar_bilinear_weights_at(vec_to_yawpitch(g)?, grid)
}

pub fn planar_bilinear_weights_at(yp: YawPitch, grid: &AnchorGrid) -> Result<InterpolationWeights> {
    let cell = locate_cell(yp, grid)?;
    let (u, v) = (cell.u, cell.v);
    let [i1, i2, i3, i4] = cell.corners;
    Ok(InterpolationWeights {
        scheme: InterpolationScheme::PlanarBilinear,
        entries: vec![
            (i1, (1.0 - u) * (1.0 - v)),
            (i2, u * (1.0 - v)),
            (i3, (1.0 - u) * v),
            (i4, u * v),
        ],
    })
}

/// Weights proportional to the cosine between `g` and every anchor direction,
/// normalized by their sum. Negative weights are kept as they come.
pub fn global_linear_weights(g: &GazeVector, anchors: &[GazeVector]) -> Result<InterpolationWeights> {
    let cosines: Vec<f64> = anchors.iter().map(|a| g.dot(a)).collect();
    let sum: f64 = cosines.iter().sum();
    if sum.abs() <= 1e-6 {
        return Err(Error::SingularNormalization { sum });
    }
    Ok(InterpolationWeights {
        scheme: InterpolationScheme::GlobalLinear,
        entries: cosines.into_iter().map(|c| c / sum).enumerate().collect(),
    })
}

/// Anchor grid plus its learnable embeddings (one row per anchor).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    grid: AnchorGrid,
    embeddings: Matrix,
}

impl AnchorSet {
    /// Builds the grid and draws embeddings from `N(0, 0.02²)`.
    pub fn build(yaw_step: f64, pitch_step: f64, dim: usize, seed: u64) -> Result<Self> {
        let grid = AnchorGrid::new(yaw_step, pitch_step)?;
        let embeddings = random_embeddings(grid.len(), dim, seed);
        Ok(AnchorSet { grid, embeddings })
    }

    pub fn from_parts(grid: AnchorGrid, embeddings: Matrix) -> Result<Self> {
        if embeddings.rows() != grid.len() {
            return Err(Error::shape(
                format!("{} embedding rows", grid.len()),
                embeddings.rows(),
            ));
        }
        Ok(AnchorSet { grid, embeddings })
    }

    pub fn grid(&self) -> &AnchorGrid {
        &self.grid
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Matrix {
        &mut self.embeddings
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = AnchorSetDocument {
            yaw_step: self.grid.yaw_step,
            pitch_step: self.grid.pitch_step,
            dim: self.dim(),
            embeddings: self.embeddings.to_rows(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: AnchorSetDocument = serde_json::from_str(text)?;
        let grid = AnchorGrid::new(doc.yaw_step, doc.pitch_step)?;
        let embeddings = if doc.embeddings.is_empty() {
            Matrix::zeros(0, doc.dim)
        } else {
            Matrix::from_rows(&doc.embeddings)?
        };
        if embeddings.cols() != doc.dim {
            return Err(Error::shape(format!("dim {}", doc.dim), embeddings.cols()));
        }
        AnchorSet::from_parts(grid, embeddings)
    }
}

pub(crate) fn random_embeddings(rows: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid std");
    let data = (0..rows * dim).map(|_| normal.sample(&mut rng)).collect();
    Matrix::from_vec(rows, dim, data).expect("sized")
}

#[derive(Debug, Serialize, Deserialize)]
struct AnchorSetDocument {
    yaw_step: f64,
    pitch_step: f64,
    dim: usize,
    embeddings: Vec<Vec<f64>>,
}

/// `Σ_k w_k · embedding(A_k)` over the given weights.
pub fn interpolate_embedding(weights: &InterpolationWeights, embeddings: &Matrix) -> Result<Vec<f64>> {
    let mut out = vec![0.0; embeddings.cols()];
    for &(i, w) in &weights.entries {
        if i >= embeddings.rows() {
            return Err(Error::shape(format!("anchor index < {}", embeddings.rows()), i));
        }
        for (o, e) in out.iter_mut().zip(embeddings.row(i)) {
            *o += w * e;
        }
    }
    Ok(out)
}

/// Pairwise cosine matrix of a set of vectors, `N × N` row-major.
pub(crate) fn cosine_matrix(vectors: &[&[f64]]) -> Vec<f64> {
    let n = vectors.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = linalg::cosine(vectors[i], vectors[j]);
        }
    }
    out
}

/// Cosine matrix of the anchor gaze directions, the geometric target of
/// [`geo_loss`].
pub fn gaze_cosines(gazes: &[GazeVector]) -> Vec<f64> {
    let arrays: Vec<[f64; 3]> = gazes.iter().map(GazeVector::as_array).collect();
    let refs: Vec<&[f64]> = arrays.iter().map(|a| a.as_slice()).collect();
    cosine_matrix(&refs)
}

/// Geometric consistency loss over an anchor set and its gradient with
/// respect to every embedding.
pub fn geo_loss(set: &AnchorSet) -> Result<(f64, Matrix)> {
    let target = gaze_cosines(set.grid.gazes());
    geo_loss_with_target(&set.embeddings, &target)
}

/// `(1/N²) Σ_{i,j} |cos(A_i, A_j) − target_ij|` and its subgradient
/// (zero at the kink).
pub fn geo_loss_with_target(embeddings: &Matrix, target: &[f64]) -> Result<(f64, Matrix)> {
    let n = embeddings.rows();
    let d = embeddings.cols();
    if target.len() != n * n {
        return Err(Error::shape(format!("{n}x{n} target cosines"), target.len()));
    }
    let norms: Vec<f64> = (0..n).map(|i| linalg::norm(embeddings.row(i))).collect();
    if let Some(index) = norms.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::DegenerateEmbedding { index });
    }
    let units: Vec<f64> = (0..n)
        .flat_map(|i| embeddings.row(i).iter().map(move |&x| (i, x)))
        .map(|(i, x)| x / norms[i])
        .collect();
    let unit = |i: usize| &units[i * d..(i + 1) * d];

    let scale = 1.0 / (n * n) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, d);
    for i in 0..n {
        let mut acc = vec![0.0; d];
        for j in 0..n {
            if i == j {
                continue;
            }
            let c = linalg::cosine(embeddings.row(i), embeddings.row(j));
            let diff = c - target[i * n + j];
            loss += diff.abs();
            let s = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                continue;
            };
            // (i, j) and (j, i) contribute equally to ∂/∂A_i
            for ((a, &uj), &ui) in acc.iter_mut().zip(unit(j)).zip(unit(i)) {
                *a += s * (uj - c * ui);
            }
        }
        let k = 2.0 * scale / norms[i];
        for (g, a) in grad.row_mut(i).iter_mut().zip(acc) {
            *g = k * a;
        }
    }
    Ok((loss * scale, grad))
}
