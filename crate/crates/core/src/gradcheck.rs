//! Central finite-difference checks of every analytic gradient.
//!
//! Each check draws seeded random configurations, compares the analytic
//! gradient `a` with the numerical one `n` by `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`
//! and reports the worst value per target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::str::FromStr;

use crate::anchors::{gaze_cosines, geo_loss_with_target, AnchorGrid, InterpolationScheme};
use crate::encoders::{
    image_encoder_backward, image_forward_cached, init_parameters, regressor_backward, regressor_forward,
    text_encoder_backward, text_forward_cached, Gradients, InitSeeds, ModelDims, ParamId, ParameterSet,
    PromptSequence,
};
use crate::error::{Error, Result};
use crate::geometry::GazeVector;
use crate::harness::{generate_with_mixing, DataConfig, Mixing, ModelConfig, Objective, SyntheticDomainSpec, TrainConfig};
use crate::linalg::{dot, norm, Matrix};
use crate::losses::{gaze_loss, mcr_i2t_loss, mcr_t2i_loss, mcr_total, LossWeights, WeightingScheme};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_CONFIGS: usize = 100;

/// Configurations whose loss sits within this distance of a kink of the
/// geometric loss are redrawn.
const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    /// Loss functions w.r.t. their direct inputs.
    Loss,
    /// Encoders, regressor and the full objective w.r.t. parameters.
    Encoder,
    All,
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(GradTarget::Loss),
            "encoder" => Ok(GradTarget::Encoder),
            "all" => Ok(GradTarget::All),
            _ => Err(Error::config("target", format!("unknown gradient-check target `{s}`"))),
        }
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    diff / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Central differences of `f` at `x`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let plus = f(&probe)?;
        probe[k] = x[k] - h;
        let minus = f(&probe)?;
        probe[k] = x[k];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub configs: usize,
    pub worst: f64,
    pub redraws: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.worst < FD_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.worst).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(
                f,
                "{:<4} {:<24} worst={:.3e} configs={} redraws={}",
                if r.passed() { "ok" } else { "FAIL" },
                r.name,
                r.worst,
                r.configs,
                r.redraws
            )?;
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_gaze(rng: &mut ChaCha8Rng) -> GazeVector {
    loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        if let Ok(g) = GazeVector::normalize(v) {
            return g;
        }
    }
}

/// Runs `draw` until it produces a usable configuration, then records its
/// relative error. `draw` returns `Ok(None)` to request a redraw.
fn check<F>(name: String, configs: usize, seed: u64, stream: u64, mut draw: F) -> Result<CheckRow>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<Option<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut worst: f64 = 0.0;
    let mut redraws = 0;
    for _ in 0..configs {
        loop {
            match draw(&mut rng)? {
                Some(err) => {
                    worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
                    break;
                }
                None => {
                    redraws += 1;
                    if redraws > MAX_REDRAWS {
                        return Err(Error::SingularConfiguration(format!(
                            "{name}: no usable random configuration found"
                        )));
                    }
                }
            }
        }
    }
    Ok(CheckRow {
        name,
        configs,
        worst,
        redraws,
    })
}

/// Flattens feature groups into one vector and back.
fn split(x: &[f64], counts: &[usize], dim: usize) -> Vec<Vec<Vec<f64>>> {
    let mut offset = 0;
    counts
        .iter()
        .map(|&c| {
            (0..c)
                .map(|_| {
                    let v = x[offset..offset + dim].to_vec();
                    offset += dim;
                    v
                })
                .collect()
        })
        .collect()
}

fn join(groups: &[&[Vec<f64>]]) -> Vec<f64> {
    groups.iter().flat_map(|g| g.iter().flatten().copied()).collect()
}

fn check_geo(configs: usize, seed: u64) -> Result<CheckRow> {
    check("geo".into(), configs, seed, 1, |rng| {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=6);
        let x = gaussian_vec(rng, n * d);
        let gazes: Vec<GazeVector> = (0..n).map(|_| random_gaze(rng)).collect();
        let target = gaze_cosines(&gazes);
        let m = Matrix::from_vec(n, d, x.clone())?;
        for i in 0..n {
            for j in 0..n {
                let c = crate::linalg::cosine(m.row(i), m.row(j));
                if i != j && (c - target[i * n + j]).abs() < KINK_MARGIN {
                    return Ok(None);
                }
            }
        }
        let (_, grad) = geo_loss_with_target(&m, &target)?;
        let numeric = central_difference(
            |p| Ok(geo_loss_with_target(&Matrix::from_vec(n, d, p.to_vec())?, &target)?.0),
            &x,
            FD_STEP,
        )?;
        Ok(Some(relative_error(grad.as_slice(), &numeric)))
    })
}

#[derive(Clone, Copy)]
enum McrTerm {
    T2i,
    I2t,
    Total,
}

fn check_mcr(term: McrTerm, scheme: WeightingScheme, configs: usize, seed: u64, stream: u64) -> Result<CheckRow> {
    let name = match term {
        McrTerm::T2i => format!("mcr_t2i/{scheme}"),
        McrTerm::I2t => format!("mcr_i2t/{scheme}"),
        McrTerm::Total => format!("mcr_total/{scheme}"),
    };
    check(name, configs, seed, stream, |rng| {
        let b = rng.gen_range(1..=6);
        let k = match term {
            McrTerm::T2i => 0,
            _ => rng.gen_range(0..=4),
        };
        let d = rng.gen_range(2..=6);
        let tau = rng.gen_range(0.2..2.0);
        let labels: Vec<GazeVector> = (0..b).map(|_| random_gaze(rng)).collect();
        let bank_gazes: Vec<GazeVector> = (0..k).map(|_| random_gaze(rng)).collect();
        let x = gaussian_vec(rng, (2 * b + k) * d);
        let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let g = split(x, &[b, b, k], d);
            let (image, text, bank) = (&g[0], &g[1], &g[2]);
            Ok(match term {
                McrTerm::T2i => {
                    let (l, gr) = mcr_t2i_loss(text, image, &labels, scheme, tau)?;
                    (l, join(&[&gr.partners, &gr.anchors, &[]]))
                }
                McrTerm::I2t => {
                    let (l, gr) = mcr_i2t_loss(image, text, &labels, bank, &bank_gazes, scheme, tau)?;
                    (l, join(&[&gr.anchors, &gr.partners, &gr.extra]))
                }
                McrTerm::Total => {
                    let out = mcr_total(image, text, &labels, bank, &bank_gazes, scheme, tau)?;
                    (out.total(), join(&[&out.d_image, &out.d_text, &out.d_bank]))
                }
            })
        };
        let analytic = match eval(&x) {
            Ok((_, g)) => g,
            Err(Error::NonpositiveDenominator { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        match central_difference(|p| Ok(eval(p)?.0), &x, FD_STEP) {
            Ok(numeric) => Ok(Some(relative_error(&analytic, &numeric))),
            Err(Error::NonpositiveDenominator { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    })
}

fn check_gaze(configs: usize, seed: u64) -> Result<CheckRow> {
    check("gaze".into(), configs, seed, 2, |rng| {
        let raw = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let label = random_gaze(rng);
        let (angle, grad) = gaze_loss(&raw, &label)?;
        // stay clear of the clamped region at 0° and 180°
        if !(1e-3..=std::f64::consts::PI - 1e-3).contains(&angle) {
            return Ok(None);
        }
        let numeric = central_difference(|p| Ok(gaze_loss(&[p[0], p[1], p[2]], &label)?.0), &raw, FD_STEP)?;
        Ok(Some(relative_error(&grad, &numeric)))
    })
}

fn small_model_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        input: rng.gen_range(2..=6),
        hidden: rng.gen_range(2..=6),
        feature: rng.gen_range(2..=5),
        token: rng.gen_range(1..=4),
        prompt_len: rng.gen_range(1..=4),
    }
}

fn small_dims(rng: &mut ChaCha8Rng, anchors: usize) -> ModelDims {
    let m = small_model_config(rng);
    ModelDims {
        input: m.input,
        hidden: m.hidden,
        feature: m.feature,
        token: m.token,
        prompt_len: m.prompt_len,
        anchors,
    }
}

/// Fresh parameters with every tensor redrawn at unit scale so that no
/// layer sits in a trivially linear regime.
fn random_params(rng: &mut ChaCha8Rng, dims: &ModelDims) -> Result<ParameterSet> {
    let mut p = init_parameters(dims, InitSeeds { init: rng.gen(), proxy: rng.gen() })?;
    for id in ParamId::ALL {
        let scale = match id {
            ParamId::Anchors | ParamId::Context => 1.0,
            _ => 1.0 / (p.shape(id).last().copied().unwrap_or(1) as f64).sqrt(),
        };
        for v in p.get_mut(id) {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(p)
}

const STACK: [ParamId; 8] = [
    ParamId::ImageW1,
    ParamId::ImageB1,
    ParamId::ImageW2,
    ParamId::ImageB2,
    ParamId::ImageW3,
    ParamId::ImageB3,
    ParamId::RegressorW,
    ParamId::RegressorB,
];

fn flatten_params(params: &ParameterSet, ids: &[ParamId]) -> Vec<f64> {
    ids.iter().flat_map(|&id| params.get(id).iter().copied()).collect()
}

fn with_flat(params: &ParameterSet, ids: &[ParamId], x: &[f64]) -> ParameterSet {
    let mut p = params.clone();
    let mut offset = 0;
    for &id in ids {
        let t = p.get_mut(id);
        let n = t.len();
        t.copy_from_slice(&x[offset..offset + n]);
        offset += n;
    }
    p
}

fn flatten_grads(grads: &Gradients, ids: &[ParamId]) -> Vec<f64> {
    ids.iter()
        .flat_map(|&id| grads.get(id).expect("trainable").iter().copied())
        .collect()
}

/// Image encoder and regressor under `gaze + r·f` for a random direction `r`.
fn check_stack(configs: usize, seed: u64) -> Result<CheckRow> {
    check("image+regressor".into(), configs, seed, 3, |rng| {
        let dims = small_dims(rng, 1);
        let params = random_params(rng, &dims)?;
        let x = gaussian_vec(rng, dims.input);
        let r = gaussian_vec(rng, dims.feature);
        let label = random_gaze(rng);
        let loss = |p: &ParameterSet| -> Result<f64> {
            let cache = image_forward_cached(&x, p)?;
            let pred = regressor_forward(&cache.feature, p)?;
            Ok(gaze_loss(&pred.raw, &label)?.0 + dot(&r, &cache.feature))
        };
        let cache = image_forward_cached(&x, &params)?;
        let pred = regressor_forward(&cache.feature, &params)?;
        let (angle, d_raw) = gaze_loss(&pred.raw, &label)?;
        if !(1e-3..=std::f64::consts::PI - 1e-3).contains(&angle) {
            return Ok(None);
        }
        let mut grads = Gradients::zeros_for(&params);
        let mut d_feature = regressor_backward(&cache.feature, &params, &d_raw, &mut grads);
        d_feature.iter_mut().zip(&r).for_each(|(d, ri)| *d += ri);
        image_encoder_backward(&cache, &params, &d_feature, &mut grads);
        let x0 = flatten_params(&params, &STACK);
        let numeric = central_difference(|v| loss(&with_flat(&params, &STACK, v)), &x0, FD_STEP)?;
        Ok(Some(relative_error(&flatten_grads(&grads, &STACK), &numeric)))
    })
}

/// Frozen text proxy w.r.t. its whole input sequence under `r·f`.
fn check_text(configs: usize, seed: u64) -> Result<CheckRow> {
    check("text-proxy".into(), configs, seed, 4, |rng| {
        let dims = small_dims(rng, 1);
        let params = random_params(rng, &dims)?;
        let r = gaussian_vec(rng, dims.feature);
        let seq_len = dims.prompt_len * dims.token;
        let x = gaussian_vec(rng, seq_len);
        let seq_of = |v: &[f64]| -> Result<PromptSequence> {
            let ctx = dims.context_tokens() * dims.token;
            Ok(PromptSequence {
                context: Matrix::from_vec(dims.context_tokens(), dims.token, v[..ctx].to_vec())?,
                gaze_token: v[ctx..].to_vec(),
            })
        };
        let cache = text_forward_cached(&seq_of(&x)?, &params)?;
        let analytic = text_encoder_backward(&cache, &params, &r);
        let numeric = central_difference(
            |v| Ok(dot(&r, &text_forward_cached(&seq_of(v)?, &params)?.feature)),
            &x,
            FD_STEP,
        )?;
        Ok(Some(relative_error(&analytic, &numeric)))
    })
}

/// The full batch objective w.r.t. every trainable tensor on a tiny model.
fn check_objective(configs: usize, seed: u64) -> Result<CheckRow> {
    let trainable: Vec<ParamId> = ParamId::ALL.into_iter().filter(|p| p.trainable()).collect();
    check("objective".into(), configs, seed, 5, |rng| {
        let model = small_model_config(rng);
        let scheme = WeightingScheme::ALL[rng.gen_range(0..4)];
        let config = TrainConfig {
            batch_size: rng.gen_range(1..=4),
            negatives: rng.gen_range(0..=3),
            tau: rng.gen_range(0.3..2.0),
            lambda: LossWeights {
                geo: rng.gen_range(0.0..2.0),
                mcr: rng.gen_range(0.0..2.0),
                gaze: rng.gen_range(0.0..2.0),
            },
            weighting: scheme,
            interpolation: InterpolationScheme::ALL[rng.gen_range(0..2) + 1],
            grid: crate::harness::GridConfig {
                yaw_step: 90.0,
                pitch_step: 90.0,
            },
            model,
            data: DataConfig {
                n_source: 6,
                ..DataConfig::default()
            },
            ..TrainConfig::default()
        };
        let grid = AnchorGrid::new(90.0, 90.0)?;
        let dims = config.dims()?;
        let params = random_params(rng, &dims)?;
        let mixing = Mixing::new(rng.gen(), model.input, 1.0, 0.3);
        let data = generate_with_mixing(6, &SyntheticDomainSpec::source(), &mixing, rng.gen())?;
        let batch: Vec<usize> = (0..config.batch_size).map(|_| rng.gen_range(0..6)).collect();

        // redraw near the kinks of the geometric loss and the clamped gaze gradient
        let target = gaze_cosines(grid.gazes());
        let anchors = params.anchor_embeddings();
        let n = anchors.rows();
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let c = crate::linalg::cosine(anchors.row(i), anchors.row(j));
                if (c - target[i * n + j]).abs() < KINK_MARGIN {
                    return Ok(None);
                }
            }
        }
        for &i in &batch {
            let s = &data.samples[i];
            let f = image_forward_cached(&s.input, &params)?;
            let pred = regressor_forward(&f.feature, &params)?;
            let a = pred.gaze.arc_to(&s.label);
            if !(1e-3..=std::f64::consts::PI - 1e-3).contains(&a) {
                return Ok(None);
            }
        }

        let objective = Objective::new(&config, &data)?;
        let mut grads = Gradients::zeros_for(&params);
        match objective.evaluate(&params, &batch, Some(&mut grads)) {
            Ok(_) => {}
            Err(Error::NonpositiveDenominator { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
        let x0 = flatten_params(&params, &trainable);
        let numeric = central_difference(
            |v| Ok(objective.evaluate(&with_flat(&params, &trainable, v), &batch, None)?.total),
            &x0,
            FD_STEP,
        );
        match numeric {
            Ok(numeric) => Ok(Some(relative_error(&flatten_grads(&grads, &trainable), &numeric))),
            Err(Error::NonpositiveDenominator { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    })
}

/// Runs the selected checks with `configs` random configurations each.
pub fn run_gradcheck(target: GradTarget, seed: u64, configs: usize) -> Result<GradCheckReport> {
    let mut rows = Vec::new();
    if matches!(target, GradTarget::Loss | GradTarget::All) {
        rows.push(check_geo(configs, seed)?);
        let mut stream = 10;
        for term in [McrTerm::T2i, McrTerm::I2t, McrTerm::Total] {
            for scheme in WeightingScheme::ALL {
                rows.push(check_mcr(term, scheme, configs, seed, stream)?);
                stream += 1;
            }
        }
        rows.push(check_gaze(configs, seed)?);
    }
    if matches!(target, GradTarget::Encoder | GradTarget::All) {
        rows.push(check_stack(configs, seed)?);
        rows.push(check_text(configs, seed)?);
        rows.push(check_objective(configs, seed)?);
    }
    Ok(GradCheckReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn central_difference_of_cubic() {
        let g = central_difference(|x| Ok(x[0].powi(3) + 2.0 * x[1]), &[1.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn target_parse() {
        assert_eq!("all".parse::<GradTarget>().unwrap(), GradTarget::All);
        assert!("everything".parse::<GradTarget>().is_err());
    }
}
