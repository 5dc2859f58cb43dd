//! Weighted multimodal contrastive regression losses, the angular gaze loss
//! and the λ-weighted objective, each with analytic gradients.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::anchors::{interpolate_embedding, AnchorGrid, InterpolationScheme, InterpolationWeights};
use crate::encoders::{Gradients, ParameterSet, SharedContextText, TextCache};
use crate::error::{Error, Result};
use crate::geometry::{cross3, fibonacci_sphere, norm3, GazeVector};
use crate::linalg::{dot, norm};

/// How a negative pair's contribution is weighted by label similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingScheme {
    /// `cos(g_i, g_j)`, may be negative.
    LiteralCos,
    /// `max(0, cos(g_i, g_j))`.
    ClampedCos,
    /// `(1 − cos(g_i, g_j)) / 2`.
    Distance,
    /// Constant 1, i.e. plain InfoNCE.
    Uniform,
}

impl WeightingScheme {
    pub const ALL: [WeightingScheme; 4] = [
        WeightingScheme::LiteralCos,
        WeightingScheme::ClampedCos,
        WeightingScheme::Distance,
        WeightingScheme::Uniform,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            WeightingScheme::LiteralCos => "literal-cos",
            WeightingScheme::ClampedCos => "clamped-cos",
            WeightingScheme::Distance => "distance",
            WeightingScheme::Uniform => "uniform",
        }
    }
}

impl fmt::Display for WeightingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightingScheme::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::config("scheme", format!("unknown weighting scheme `{s}`")))
    }
}

pub fn neg_weight(gi: &GazeVector, gj: &GazeVector, scheme: WeightingScheme) -> f64 {
    let c = gi.dot(gj);
    match scheme {
        WeightingScheme::LiteralCos => c,
        WeightingScheme::ClampedCos => c.max(0.0),
        WeightingScheme::Distance => (1.0 - c) / 2.0,
        WeightingScheme::Uniform => 1.0,
    }
}

/// Gradients of a contrastive term with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrads {
    /// W.r.t. the features each row's loss is anchored on.
    pub anchors: Vec<Vec<f64>>,
    /// W.r.t. the paired features (positives and in-batch negatives).
    pub partners: Vec<Vec<f64>>,
    /// W.r.t. extra negatives (the global bank); empty when none.
    pub extra: Vec<Vec<f64>>,
}

struct Units {
    units: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn units_of<F: AsRef<[f64]>>(feats: &[F]) -> Result<Units> {
    let mut units = Vec::with_capacity(feats.len());
    let mut norms = Vec::with_capacity(feats.len());
    for f in feats {
        let f = f.as_ref();
        let n = norm(f);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateFeature);
        }
        units.push(f.iter().map(|x| x / n).collect());
        norms.push(n);
    }
    Ok(Units { units, norms })
}

/// Maps gradients w.r.t. unit vectors back to the raw features.
fn unnormalize_grads(u: &Units, d_units: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    d_units
        .into_iter()
        .zip(u.units.iter().zip(&u.norms))
        .map(|(mut d, (unit, &n))| {
            let p = dot(unit, &d);
            d.iter_mut().zip(unit).for_each(|(g, x)| *g = (*g - x * p) / n);
            d
        })
        .collect()
}

/// Shared core of both MCR directions:
/// `−(1/B) Σ_i log(e^{s_ii/τ} / (e^{s_ii/τ} + Σ_{j≠i} w_ij e^{s_ij/τ} + Σ_k w_ik e^{s_ik/τ}))`
/// with cosine similarities between anchor `i` and partner `j` or extra `k`.
fn weighted_nce<A, P, E>(
    anchors: &[A],
    partners: &[P],
    labels: &[GazeVector],
    extra: &[E],
    extra_labels: &[GazeVector],
    scheme: WeightingScheme,
    tau: f64,
) -> Result<(f64, ContrastiveGrads)>
where
    A: AsRef<[f64]>,
    P: AsRef<[f64]>,
    E: AsRef<[f64]>,
{
    let b = anchors.len();
    if b == 0 {
        return Err(Error::EmptyRequest("contrastive loss needs at least one sample".into()));
    }
    if partners.len() != b || labels.len() != b {
        return Err(Error::shape(
            format!("{b} partners and labels"),
            format!("{} / {}", partners.len(), labels.len()),
        ));
    }
    if extra.len() != extra_labels.len() {
        return Err(Error::shape(format!("{} extra labels", extra.len()), extra_labels.len()));
    }
    if !(tau > 0.0) {
        return Err(Error::config("tau", "temperature must be positive"));
    }
    let ua = units_of(anchors)?;
    let up = units_of(partners)?;
    let ue = units_of(extra)?;
    let dim = ua.units[0].len();

    let mut d_a = vec![vec![0.0; dim]; b];
    let mut d_p = vec![vec![0.0; dim]; b];
    let mut d_e = vec![vec![0.0; dim]; extra.len()];
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;

    // (candidate index, is_extra, weight, logit)
    let mut terms: Vec<(usize, bool, f64, f64)> = Vec::with_capacity(b + extra.len());
    for i in 0..b {
        let a = &ua.units[i];
        let pos = dot(a, &up.units[i]) / tau;
        terms.clear();
        for j in (0..b).filter(|&j| j != i) {
            let w = neg_weight(&labels[i], &labels[j], scheme);
            if w != 0.0 {
                terms.push((j, false, w, dot(a, &up.units[j]) / tau));
            }
        }
        for (k, gk) in extra_labels.iter().enumerate() {
            let w = neg_weight(&labels[i], gk, scheme);
            if w != 0.0 {
                terms.push((k, true, w, dot(a, &ue.units[k]) / tau));
            }
        }
        let m = terms.iter().map(|t| t.3).fold(pos, f64::max);
        let e_pos = (pos - m).exp();
        let denom = e_pos + terms.iter().map(|t| t.2 * (t.3 - m).exp()).sum::<f64>();
        if !(denom > 0.0) || m + denom.ln() < 1e-12f64.ln() {
            return Err(Error::NonpositiveDenominator { index: i });
        }
        total += (m - pos) + denom.ln();

        // ∂ℓ_i/∂logit, scaled by 1/(Bτ) to reach the cosines
        let scale = inv_b / tau;
        let g_pos = (e_pos / denom - 1.0) * scale;
        for (k, x) in d_a[i].iter_mut().enumerate() {
            *x += g_pos * up.units[i][k];
        }
        for (k, x) in d_p[i].iter_mut().enumerate() {
            *x += g_pos * a[k];
        }
        for &(j, is_extra, w, logit) in &terms {
            let g = w * (logit - m).exp() / denom * scale;
            let other = if is_extra { &ue.units[j] } else { &up.units[j] };
            for (x, o) in d_a[i].iter_mut().zip(other) {
                *x += g * o;
            }
            let target = if is_extra { &mut d_e[j] } else { &mut d_p[j] };
            for (x, ak) in target.iter_mut().zip(a) {
                *x += g * ak;
            }
        }
    }
    Ok((
        total * inv_b,
        ContrastiveGrads {
            anchors: unnormalize_grads(&ua, d_a),
            partners: unnormalize_grads(&up, d_p),
            extra: unnormalize_grads(&ue, d_e),
        },
    ))
}

/// Text-to-image term: each text feature is contrasted against the batch's
/// image features. Gradient `anchors` are w.r.t. text, `partners` w.r.t. image.
pub fn mcr_t2i_loss<T: AsRef<[f64]>, I: AsRef<[f64]>>(
    text: &[T],
    image: &[I],
    labels: &[GazeVector],
    scheme: WeightingScheme,
    tau: f64,
) -> Result<(f64, ContrastiveGrads)> {
    weighted_nce::<T, I, Vec<f64>>(text, image, labels, &[], &[], scheme, tau)
}

/// Image-to-text term: each image feature is contrasted against the batch's
/// text features plus every bank feature. Gradient `anchors` are w.r.t.
/// image, `partners` w.r.t. text, `extra` w.r.t. bank features.
pub fn mcr_i2t_loss<I: AsRef<[f64]>, T: AsRef<[f64]>, K: AsRef<[f64]>>(
    image: &[I],
    text: &[T],
    labels: &[GazeVector],
    bank_features: &[K],
    bank_gazes: &[GazeVector],
    scheme: WeightingScheme,
    tau: f64,
) -> Result<(f64, ContrastiveGrads)> {
    weighted_nce(image, text, labels, bank_features, bank_gazes, scheme, tau)
}

/// Both MCR directions with gradients summed per input.
#[derive(Debug, Clone, PartialEq)]
pub struct McrOutput {
    pub t2i: f64,
    pub i2t: f64,
    pub d_image: Vec<Vec<f64>>,
    pub d_text: Vec<Vec<f64>>,
    pub d_bank: Vec<Vec<f64>>,
}

impl McrOutput {
    pub fn total(&self) -> f64 {
        self.t2i + self.i2t
    }
}

pub fn mcr_total<I: AsRef<[f64]>, T: AsRef<[f64]>, K: AsRef<[f64]>>(
    image: &[I],
    text: &[T],
    labels: &[GazeVector],
    bank_features: &[K],
    bank_gazes: &[GazeVector],
    scheme: WeightingScheme,
    tau: f64,
) -> Result<McrOutput> {
    let (t2i, gt) = mcr_t2i_loss(text, image, labels, scheme, tau)?;
    let (i2t, gi) = mcr_i2t_loss(image, text, labels, bank_features, bank_gazes, scheme, tau)?;
    let add = |a: Vec<Vec<f64>>, b: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        a.into_iter()
            .zip(b)
            .map(|(x, y)| x.into_iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    };
    Ok(McrOutput {
        t2i,
        i2t,
        d_image: add(gt.partners, gi.anchors),
        d_text: add(gt.anchors, gi.partners),
        d_bank: gi.extra,
    })
}

/// Floor on `sin θ` used in the gaze-loss gradient, i.e. `|cos θ| ≤ 1 − 1e-9`.
pub fn gaze_grad_sin_floor() -> f64 {
    let c: f64 = 1.0 - 1e-9;
    (1.0 - c * c).sqrt()
}

/// Angle (radians) between the normalized regressor output and the label,
/// with its gradient w.r.t. the raw output.
///
/// The gradient `−label_⊥ / (sin θ · |raw|)` uses a floored `sin θ` near
/// 0° and 180°; the loss value itself is exact.
pub fn gaze_loss(raw: &[f64; 3], label: &GazeVector) -> Result<(f64, [f64; 3])> {
    let n = norm3(raw);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegeneratePrediction);
    }
    let pred = [raw[0] / n, raw[1] / n, raw[2] / n];
    let l = label.as_array();
    let c = pred[0] * l[0] + pred[1] * l[1] + pred[2] * l[2];
    let s = norm3(&cross3(&pred, &l));
    let angle = s.atan2(c);
    let denom = s.max(gaze_grad_sin_floor()) * n;
    let grad = [
        -(l[0] - c * pred[0]) / denom,
        -(l[1] - c * pred[1]) / denom,
        -(l[2] - c * pred[2]) / denom,
    ];
    Ok((angle, grad))
}

/// The λ coefficients of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub geo: f64,
    pub mcr: f64,
    pub gaze: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            geo: 1.0,
            mcr: 1.0,
            gaze: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("lambda_geo", self.geo), ("lambda_mcr", self.mcr), ("lambda_gaze", self.gaze)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, format!("must be a finite nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub geo: f64,
    pub mcr_t2i: f64,
    pub mcr_i2t: f64,
    pub gaze: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.geo, self.mcr_t2i, self.mcr_i2t, self.gaze, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "geo={} mcr_t2i={} mcr_i2t={} gaze={} total={}",
            self.geo, self.mcr_t2i, self.mcr_i2t, self.gaze, self.total
        )
    }
}

/// Combines the component losses as `λ₁·geo + λ₂·(t2i + i2t) + λ₃·gaze`.
pub fn total_objective(geo: f64, mcr_t2i: f64, mcr_i2t: f64, gaze: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        geo,
        mcr_t2i,
        mcr_i2t,
        gaze,
        total: w.geo * geo + w.mcr * (mcr_t2i + mcr_i2t) + w.gaze * gaze,
    }
}

/// λ-weighted sum of per-term parameter gradients.
pub fn merge_gradients(
    w: &LossWeights,
    geo: &Gradients,
    mcr: &Gradients,
    gaze: &Gradients,
    out: &mut Gradients,
) {
    out.zero();
    out.add_scaled(geo, w.geo);
    out.add_scaled(mcr, w.mcr);
    out.add_scaled(gaze, w.gaze);
}

/// Fixed gaze directions of the global negatives with their anchor weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BankLayout {
    pub gazes: Vec<GazeVector>,
    pub weights: Vec<InterpolationWeights>,
}

impl BankLayout {
    /// Fibonacci-lattice gazes and their interpolation weights. Directions at
    /// which `scheme` is singular (global-linear where the anchor cosines sum
    /// to zero) are left out, so the bank may hold fewer than `k` entries.
    pub fn new(k: usize, grid: &AnchorGrid, scheme: InterpolationScheme) -> Result<Self> {
        let mut layout = BankLayout {
            gazes: Vec::new(),
            weights: Vec::new(),
        };
        if k == 0 {
            return Ok(layout);
        }
        for g in fibonacci_sphere(k)? {
            match scheme.weights(&g, grid) {
                Ok(w) => {
                    layout.gazes.push(g);
                    layout.weights.push(w);
                }
                Err(e) if e.is_singular() => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(layout)
    }

    pub fn len(&self) -> usize {
        self.gazes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gazes.is_empty()
    }
}

/// Bank text features computed from the current parameters.
#[derive(Debug, Clone)]
pub struct GlobalNegativeBank {
    pub gazes: Vec<GazeVector>,
    pub tokens: Vec<Vec<f64>>,
    pub caches: Vec<TextCache>,
}

impl GlobalNegativeBank {
    pub fn len(&self) -> usize {
        self.gazes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gazes.is_empty()
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.caches.iter().map(|c| &*c.feature).collect()
    }
}

/// Recomputes every bank feature through interpolation and the text proxy.
pub fn build_negative_bank(layout: &BankLayout, params: &ParameterSet) -> Result<GlobalNegativeBank> {
    let text = SharedContextText::new(params);
    build_negative_bank_with(layout, params, &text)
}

pub(crate) fn build_negative_bank_with(
    layout: &BankLayout,
    params: &ParameterSet,
    text: &SharedContextText<'_>,
) -> Result<GlobalNegativeBank> {
    let anchors = params.anchor_embeddings();
    let mut tokens = Vec::with_capacity(layout.len());
    let mut caches = Vec::with_capacity(layout.len());
    for w in &layout.weights {
        let token = interpolate_embedding(w, &anchors)?;
        caches.push(text.forward(&token)?);
        tokens.push(token);
    }
    Ok(GlobalNegativeBank {
        gazes: layout.gazes.clone(),
        tokens,
        caches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(x: f64, y: f64, z: f64) -> GazeVector {
        GazeVector::new(x, y, z).unwrap()
    }

    #[test]
    fn neg_weight_table() {
        let a = g(0.0, 0.0, 1.0);
        let b = g(1.0, 0.0, 0.0);
        assert_eq!(neg_weight(&a, &a, WeightingScheme::LiteralCos), 1.0);
        assert_eq!(neg_weight(&a, &b, WeightingScheme::LiteralCos), 0.0);
        assert_eq!(neg_weight(&a, &b, WeightingScheme::ClampedCos), 0.0);
        assert_eq!(neg_weight(&a, &b, WeightingScheme::Distance), 0.5);
        assert_eq!(neg_weight(&a, &a.neg(), WeightingScheme::LiteralCos), -1.0);
        assert_eq!(neg_weight(&a, &a.neg(), WeightingScheme::ClampedCos), 0.0);
        assert_eq!(neg_weight(&a, &a.neg(), WeightingScheme::Distance), 1.0);
        assert_eq!(neg_weight(&a, &b, WeightingScheme::Uniform), 1.0);
    }

    #[test]
    fn single_sample_has_zero_loss() {
        let f = [vec![0.3, 0.4, 0.5]];
        let t = [vec![-0.1, 0.9, 0.2]];
        let (l, _) = mcr_t2i_loss(&t, &f, &[g(0.0, 0.0, 1.0)], WeightingScheme::Uniform, 1.0).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn orthogonal_labels_vanish_under_literal_cos() {
        let f = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let t = [vec![0.6, 0.8], vec![0.8, 0.6]];
        let labels = [g(0.0, 0.0, 1.0), g(1.0, 0.0, 0.0)];
        let (l, _) = mcr_t2i_loss(&t, &f, &labels, WeightingScheme::LiteralCos, 1.0).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn negative_denominator_names_sample() {
        // literal-cos with an antipodal neighbour and a strongly similar negative
        let labels = [g(0.0, 0.0, 1.0), g(0.0, 0.0, -1.0)];
        let t = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let f = [vec![-1.0, 0.0], vec![1.0, 0.0]];
        let err = mcr_t2i_loss(&t, &f, &labels, WeightingScheme::LiteralCos, 1.0).unwrap_err();
        assert_eq!(err, Error::NonpositiveDenominator { index: 0 });
    }

    #[test]
    fn gaze_loss_cases() {
        let label = g(0.0, 0.0, 1.0);
        let (l, _) = gaze_loss(&[0.0, 0.0, 2.0], &label).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = gaze_loss(&[3.0, 0.0, 0.0], &label).unwrap();
        assert!((l - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(gaze_loss(&[0.0; 3], &label), Err(Error::DegeneratePrediction));
        // gradient stays finite at 0° and 180°
        let (_, grad) = gaze_loss(&[0.0, 1e-20, -1.0], &label).unwrap();
        assert!(grad.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn gaze_loss_gradient_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let raw = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let label = GazeVector::normalize([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0]).unwrap();
            let (_, grad) = gaze_loss(&raw, &label).unwrap();
            for k in 0..3 {
                let h = 1e-6;
                let mut p = raw;
                let mut m = raw;
                p[k] += h;
                m[k] -= h;
                let fd = (gaze_loss(&p, &label).unwrap().0 - gaze_loss(&m, &label).unwrap().0) / (2.0 * h);
                assert!((fd - grad[k]).abs() < 1e-7 * (1.0 + fd.abs()), "{fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn objective_arithmetic() {
        let b = total_objective(0.1, 0.05, 0.15, 0.3, &LossWeights::default());
        assert!((b.total - 0.6).abs() < 1e-15);
        let b = total_objective(0.1, 0.05, 0.15, 0.3, &LossWeights { geo: 0.0, mcr: 0.0, gaze: 1.0 });
        assert_eq!(b.total, 0.3);
        assert!(LossWeights { geo: -1.0, mcr: 1.0, gaze: 1.0 }.validate().is_err());
    }

    #[test]
    fn scheme_names_parse() {
        for s in WeightingScheme::ALL {
            assert_eq!(s.name().parse::<WeightingScheme>().unwrap(), s);
        }
        assert!("cosine".parse::<WeightingScheme>().is_err());
    }
}
