//! Spherical geometry on gaze directions.
//!
//! Angle convention: `x = cos(pitch)·sin(yaw)`, `y = sin(pitch)`,
//! `z = cos(pitch)·cos(yaw)`. Angles in [`YawPitch`] are degrees; arcs
//! returned by the slerp helpers are radians.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Tolerance on the unit-norm invariant of [`GazeVector`].
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Arcs below this (radians) are treated as degenerate by the slerp routines.
pub const DEGENERATE_ARC: f64 = 1e-7;

/// A unit 3-vector gaze direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeVector([f64; 3]);

impl GazeVector {
    /// Builds a gaze vector, rejecting inputs whose norm is not 1 within
    /// [`UNIT_TOLERANCE`].
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let norm = (x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotUnit { norm });
        }
        Ok(GazeVector([x, y, z]))
    }

    /// Normalizes an arbitrary nonzero vector onto the sphere.
    pub fn normalize(v: [f64; 3]) -> Result<Self> {
        let norm = norm3(&v);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NotUnit { norm });
        }
        Ok(GazeVector([v[0] / norm, v[1] / norm, v[2] / norm]))
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }

    pub fn x(&self) -> f64 {
        self.0[0]
    }

    pub fn y(&self) -> f64 {
        self.0[1]
    }

    pub fn z(&self) -> f64 {
        self.0[2]
    }

    pub fn dot(&self, other: &GazeVector) -> f64 {
        dot3(&self.0, &other.0)
    }

    pub fn neg(&self) -> GazeVector {
        GazeVector([-self.0[0], -self.0[1], -self.0[2]])
    }

    /// Great-circle arc to `other` in radians, in `[0, π]`.
    ///
    /// Evaluated as `atan2(|a×b|, a·b)`, which equals the clamped `arccos(a·b)`
    /// but keeps full precision near 0 and π.
    pub fn arc_to(&self, other: &GazeVector) -> f64 {
        let c = cross3(&self.0, &other.0);
        norm3(&c).atan2(self.dot(other))
    }
}

impl From<GazeVector> for [f64; 3] {
    fn from(g: GazeVector) -> Self {
        g.0
    }
}

/// Yaw and pitch in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YawPitch {
    pub yaw: f64,
    pub pitch: f64,
}

impl YawPitch {
    /// Builds a yaw/pitch pair, checking `yaw ∈ [−180, 180]` and `pitch ∈ [−90, 90]`.
    pub fn new(yaw: f64, pitch: f64) -> Result<Self> {
        let yp = YawPitch { yaw, pitch };
        yp.validate()?;
        Ok(yp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-180.0..=180.0).contains(&self.yaw) {
            return Err(Error::OutOfRange(format!(
                "yaw {} outside [-180, 180]",
                self.yaw
            )));
        }
        if !(-90.0..=90.0).contains(&self.pitch) {
            return Err(Error::OutOfRange(format!(
                "pitch {} outside [-90, 90]",
                self.pitch
            )));
        }
        Ok(())
    }
}

pub(crate) fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn yawpitch_to_vec(yp: YawPitch) -> Result<GazeVector> {
    yp.validate()?;
    let (sy, cy) = yp.yaw.to_radians().sin_cos();
    let (sp, cp) = yp.pitch.to_radians().sin_cos();
    // renormalize: the product form is only unit to a few ulps
    let v = [cp * sy, sp, cp * cy];
    let n = norm3(&v);
    Ok(GazeVector([v[0] / n, v[1] / n, v[2] / n]))
}

/// Inverse of [`yawpitch_to_vec`]. At the poles yaw is reported as 0.
pub fn vec_to_yawpitch(g: &GazeVector) -> Result<YawPitch> {
    let [x, y, z] = g.0;
    let norm = norm3(&g.0);
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NotUnit { norm });
    }
    let horizontal = x.hypot(z);
    let pitch = y.atan2(horizontal).to_degrees();
    let yaw = if horizontal < 1e-15 {
        0.0
    } else {
        x.atan2(z).to_degrees()
    };
    Ok(YawPitch { yaw, pitch })
}

/// Angle between two gaze directions, in degrees.
pub fn angular_error(a: &GazeVector, b: &GazeVector) -> f64 {
    a.arc_to(b).to_degrees()
}

fn check_not_antipodal(theta: f64) -> Result<()> {
    if theta > PI - DEGENERATE_ARC {
        return Err(Error::SingularConfiguration(format!(
            "slerp endpoints are antipodal (arc = {theta})"
        )));
    }
    Ok(())
}

/// Weights `(w1, w2)` such that `w1·g1 + w2·g2` reproduces `gi` when `gi`
/// lies on the arc from `g1` to `g2`.
///
/// The interpolation parameter is `t = θ(g1, gi) / θ(g1, g2)`. For arcs below
/// [`DEGENERATE_ARC`] the weights fall back to linear `(1 − t′, t′)` with `t′`
/// the chord ratio, or `t′ = 0` when the chord itself vanishes.
pub fn slerp_weights(g1: &GazeVector, g2: &GazeVector, gi: &GazeVector) -> Result<(f64, f64)> {
    let theta = g1.arc_to(g2);
    check_not_antipodal(theta)?;
    if theta < DEGENERATE_ARC {
        let span = [g2.0[0] - g1.0[0], g2.0[1] - g1.0[1], g2.0[2] - g1.0[2]];
        let chord = norm3(&span);
        let t = if chord > 0.0 {
            let off = [gi.0[0] - g1.0[0], gi.0[1] - g1.0[1], gi.0[2] - g1.0[2]];
            norm3(&off) / chord
        } else {
            0.0
        };
        return Ok((1.0 - t, t));
    }
    let t = g1.arc_to(gi) / theta;
    Ok(slerp_coefficients(theta, t))
}

/// `(sin((1−t)θ)/sin θ, sin(tθ)/sin θ)` for a non-degenerate arc θ.
pub(crate) fn slerp_coefficients(theta: f64, t: f64) -> (f64, f64) {
    let s = theta.sin();
    (((1.0 - t) * theta).sin() / s, (t * theta).sin() / s)
}

/// Point at fraction `t` along the great-circle arc from `g1` to `g2`.
pub fn slerp_point(g1: &GazeVector, g2: &GazeVector, t: f64) -> Result<GazeVector> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("slerp parameter {t} outside [0, 1]")));
    }
    let theta = g1.arc_to(g2);
    check_not_antipodal(theta)?;
    if t == 0.0 {
        return Ok(*g1);
    }
    if t == 1.0 {
        return Ok(*g2);
    }
    let (w1, w2) = if theta < DEGENERATE_ARC {
        (1.0 - t, t)
    } else {
        slerp_coefficients(theta, t)
    };
    GazeVector::normalize([
        w1 * g1.0[0] + w2 * g2.0[0],
        w1 * g1.0[1] + w2 * g2.0[1],
        w1 * g1.0[2] + w2 * g2.0[2],
    ])
}

/// Deterministic Fibonacci lattice of `count` nearly uniform directions.
pub fn fibonacci_sphere(count: usize) -> Result<Vec<GazeVector>> {
    if count == 0 {
        return Err(Error::EmptyRequest("fibonacci_sphere needs at least one point".into()));
    }
    let golden_angle = PI * (3.0 - 5f64.sqrt());
    let k = count as f64;
    Ok((0..count)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / k;
            let r = (1.0 - y * y).sqrt();
            let (s, c) = (i as f64 * golden_angle).sin_cos();
            GazeVector([r * c, y, r * s])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: f64, y: f64, z: f64) -> GazeVector {
        GazeVector::new(x, y, z).unwrap()
    }

    fn close(a: &GazeVector, b: [f64; 3], tol: f64) -> bool {
        (0..3).all(|k| (a.0[k] - b[k]).abs() < tol)
    }

    #[test]
    fn convention_axes() {
        let cases = [
            ((0.0, 0.0), [0.0, 0.0, 1.0]),
            ((90.0, 0.0), [1.0, 0.0, 0.0]),
            ((0.0, 90.0), [0.0, 1.0, 0.0]),
        ];
        for ((yaw, pitch), want) in cases {
            let g = yawpitch_to_vec(YawPitch::new(yaw, pitch).unwrap()).unwrap();
            assert!(close(&g, want, 1e-15), "{yaw},{pitch} -> {g:?}");
        }
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(YawPitch::new(181.0, 0.0), Err(Error::OutOfRange(_))));
        assert!(matches!(
            yawpitch_to_vec(YawPitch { yaw: 0.0, pitch: -90.5 }),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn inverse_axes_and_pole() {
        let yp = vec_to_yawpitch(&v(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((yp.yaw, yp.pitch), (0.0, 0.0));
        let yp = vec_to_yawpitch(&v(0.0, 1.0, 0.0)).unwrap();
        assert_eq!((yp.yaw, yp.pitch), (0.0, 90.0));
        let yp = vec_to_yawpitch(&v(1.0, 0.0, 0.0)).unwrap();
        assert_eq!((yp.yaw, yp.pitch), (90.0, 0.0));
    }

    #[test]
    fn non_unit_rejected() {
        assert!(matches!(GazeVector::new(1.0, 1.0, 0.0), Err(Error::NotUnit { .. })));
        let bad = GazeVector([0.0, 0.0, 2.0]);
        assert!(matches!(vec_to_yawpitch(&bad), Err(Error::NotUnit { .. })));
    }

    #[test]
    fn angular_error_cases() {
        let a = v(0.0, 0.0, 1.0);
        assert_eq!(angular_error(&a, &a), 0.0);
        assert!((angular_error(&a, &v(1.0, 0.0, 0.0)) - 90.0).abs() < 1e-12);
        assert!((angular_error(&a, &a.neg()) - 180.0).abs() < 1e-12);
    }

    #[test]
    fn slerp_weight_cases() {
        let g1 = v(0.0, 0.0, 1.0);
        let g2 = v(1.0, 0.0, 0.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let (w1, w2) = slerp_weights(&g1, &g2, &v(s, 0.0, s)).unwrap();
        assert!((w1 - s).abs() < 1e-12 && (w2 - s).abs() < 1e-12);

        let (w1, w2) = slerp_weights(&g1, &g2, &g1).unwrap();
        assert_eq!((w1, w2), (1.0, 0.0));

        let at30 = v(0.5, 0.0, 3f64.sqrt() / 2.0);
        let (w1, w2) = slerp_weights(&g1, &g2, &at30).unwrap();
        assert!((w1 - 3f64.sqrt() / 2.0).abs() < 1e-12, "{w1}");
        assert!((w2 - 0.5).abs() < 1e-12, "{w2}");
    }

    #[test]
    fn slerp_antipodal_is_singular() {
        let g = v(0.0, 0.0, 1.0);
        assert!(matches!(
            slerp_weights(&g, &g.neg(), &g),
            Err(Error::SingularConfiguration(_))
        ));
        assert!(matches!(
            slerp_point(&g, &g.neg(), 0.5),
            Err(Error::SingularConfiguration(_))
        ));
    }

    #[test]
    fn slerp_degenerate_falls_back_to_linear() {
        let g = v(0.0, 1.0, 0.0);
        assert_eq!(slerp_weights(&g, &g, &g).unwrap(), (1.0, 0.0));
        assert_eq!(slerp_point(&g, &g, 0.3).unwrap(), g);
    }

    #[test]
    fn slerp_point_cases() {
        let g1 = v(0.0, 0.0, 1.0);
        let g2 = v(1.0, 0.0, 0.0);
        assert_eq!(slerp_point(&g1, &g2, 0.0).unwrap(), g1);
        assert_eq!(slerp_point(&g1, &g2, 1.0).unwrap(), g2);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(&slerp_point(&g1, &g2, 0.5).unwrap(), [s, 0.0, s], 1e-12));
    }

    #[test]
    fn fibonacci_small_counts() {
        assert!(matches!(fibonacci_sphere(0), Err(Error::EmptyRequest(_))));
        let one = fibonacci_sphere(1).unwrap();
        assert!(close(&one[0], [1.0, 0.0, 0.0], 1e-15));
        // Values from direct evaluation of the lattice formula at i = 0, 1.
        let two = fibonacci_sphere(2).unwrap();
        assert!(close(&two[0], [0.866_025_403_784_438_6, 0.5, 0.0], 1e-12));
        assert!(close(&two[1], [-0.638_580_180_375_855_3, -0.5, 0.584_991_754_840_305_4], 1e-12));
    }

    #[test]
    fn fibonacci_256_is_spread() {
        let pts = fibonacci_sphere(256).unwrap();
        let mut mean = [0.0; 3];
        for p in &pts {
            assert!((norm3(&p.0) - 1.0).abs() < 1e-12);
            for k in 0..3 {
                mean[k] += p.0[k] / 256.0;
            }
        }
        assert!(norm3(&mean) < 0.05);
        let mut min_sep = f64::INFINITY;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                min_sep = min_sep.min(angular_error(&pts[i], &pts[j]));
            }
        }
        assert!(min_sep > 5.0, "min separation {min_sep}");
    }

    fn unit() -> impl Strategy<Value = GazeVector> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("nonzero", |(x, y, z)| x * x + y * y + z * z > 1e-3)
            .prop_map(|(x, y, z)| GazeVector::normalize([x, y, z]).unwrap())
    }

    proptest! {
        #[test]
        fn round_trip(yaw in -180.0f64..=180.0, pitch in -89.9f64..89.9) {
            let yp = YawPitch::new(yaw, pitch).unwrap();
            let back = vec_to_yawpitch(&yawpitch_to_vec(yp).unwrap()).unwrap();
            let dyaw = (back.yaw - yaw).abs();
            // ±180 name the same meridian
            let dyaw = dyaw.min((360.0 - dyaw).abs());
            prop_assert!(dyaw < 1e-7, "yaw {} -> {}", yaw, back.yaw);
            prop_assert!((back.pitch - pitch).abs() < 1e-7);
        }

        #[test]
        fn angular_error_metric(a in unit(), b in unit(), c in unit()) {
            let ab = angular_error(&a, &b);
            prop_assert_eq!(ab, angular_error(&b, &a));
            prop_assert!((0.0..=180.0).contains(&ab));
            prop_assert!(ab <= angular_error(&a, &c) + angular_error(&c, &b) + 1e-9);
        }

        #[test]
        fn slerp_weight_sum_bound(g1 in unit(), g2 in unit(), t in 0.0f64..=1.0) {
            let theta = g1.arc_to(&g2);
            prop_assume!(theta > 1e-3 && theta < PI - 1e-3);
            let gi = slerp_point(&g1, &g2, t).unwrap();
            let (w1, w2) = slerp_weights(&g1, &g2, &gi).unwrap();
            let tt = g1.arc_to(&gi) / theta;
            let expected = ((tt - 0.5) * theta).cos() / (theta / 2.0).cos();
            prop_assert!((w1 + w2 - expected).abs() < 1e-9);
            prop_assert!(w1 + w2 >= 1.0 - 1e-12);
            prop_assert!(w1 + w2 <= 1.0 / (theta / 2.0).cos() + 1e-12);
        }
    }
}
