//! Synthetic cross-domain benchmark, training loop, evaluation, the
//! feature/label rank-correlation diagnostic and ablation sweeps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::anchors::{
    gaze_cosines, geo_loss_with_target, interpolate_embedding, AnchorGrid, InterpolationScheme, InterpolationWeights,
};
use crate::encoders::{
    image_encoder_backward, image_encoder_forward, image_forward_cached, init_parameters, regressor_backward,
    regressor_forward, text_backward_to_pre, Gradients, ImageCache, InitSeeds, ModelDims, ParamId, ParameterSet,
    SharedContextText, TextCache,
};
use crate::error::{Error, Result};
use crate::geometry::{angular_error, yawpitch_to_vec, GazeVector, YawPitch};
use crate::linalg::{cosine, Matrix};
use crate::losses::{
    build_negative_bank_with, gaze_loss, mcr_total, total_objective, BankLayout, LossBreakdown, LossWeights,
    WeightingScheme,
};

/// Dimension of the nuisance vector of the synthetic benchmark.
pub const NUISANCE_DIM: usize = 8;

/// Label patch of the synthetic benchmark, in degrees.
pub const MAX_LABEL_YAW: f64 = 90.0;
pub const MAX_LABEL_PITCH: f64 = 60.0;

/// Nuisance statistics and observation noise of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub id: u64,
    pub nuisance_mean: Vec<f64>,
    pub nuisance_scale: f64,
    pub obs_noise: f64,
}

impl SyntheticDomainSpec {
    pub fn source() -> Self {
        SyntheticDomainSpec {
            id: 0,
            nuisance_mean: vec![0.0; NUISANCE_DIM],
            nuisance_scale: 1.0,
            obs_noise: 0.05,
        }
    }

    pub fn target() -> Self {
        SyntheticDomainSpec {
            id: 1,
            nuisance_mean: vec![0.8; NUISANCE_DIM],
            nuisance_scale: 1.5,
            obs_noise: 0.05,
        }
    }

    fn validate(&self, key: &str) -> Result<()> {
        if self.nuisance_mean.len() != NUISANCE_DIM {
            return Err(Error::config(
                format!("{key}.nuisance_mean"),
                format!("expected {NUISANCE_DIM} values, got {}", self.nuisance_mean.len()),
            ));
        }
        if self.nuisance_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config(format!("{key}.nuisance_mean"), "values must be finite"));
        }
        if !(self.nuisance_scale >= 0.0) || !self.nuisance_scale.is_finite() {
            return Err(Error::config(format!("{key}.nuisance_scale"), "must be finite and nonnegative"));
        }
        if !(self.obs_noise >= 0.0) || !self.obs_noise.is_finite() {
            return Err(Error::config(format!("{key}.obs_noise"), "must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Fixed gaze and nuisance mixing matrices shared by every domain of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixing {
    /// `input × 3`.
    pub gaze: Matrix,
    /// `input × NUISANCE_DIM`.
    pub nuisance: Matrix,
}

impl Mixing {
    pub fn new(run_seed: u64, input_dim: usize, gaze_gain: f64, nuisance_gain: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
        rng.set_stream(0);
        let mut draw = |rows: usize, cols: usize, gain: f64| {
            let data = (0..rows * cols)
                .map(|_| gain * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Matrix::from_vec(rows, cols, data).expect("sized by construction")
        };
        let gaze = draw(input_dim, 3, gaze_gain);
        let nuisance = draw(input_dim, NUISANCE_DIM, nuisance_gain);
        Mixing { gaze, nuisance }
    }

    pub fn input_dim(&self) -> usize {
        self.gaze.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: GazeVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub spec: SyntheticDomainSpec,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<GazeVector> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Draws a label uniformly (by area) from the front-facing patch.
pub fn sample_patch_label<R: Rng + ?Sized>(rng: &mut R) -> GazeVector {
    let yaw = rng.gen_range(-MAX_LABEL_YAW..=MAX_LABEL_YAW);
    let s = MAX_LABEL_PITCH.to_radians().sin();
    let pitch = rng.gen_range(-s..=s).asin().to_degrees();
    yawpitch_to_vec(YawPitch { yaw, pitch }).expect("patch lies inside the valid range")
}

/// Generates `n` samples of one domain: `x = tanh(A·g + B·n) + σ·ε` with
/// `n ~ N(μ, s²I)`.
pub fn generate_with_mixing(n: usize, spec: &SyntheticDomainSpec, mixing: &Mixing, run_seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyRequest("dataset needs at least one sample".into()));
    }
    spec.validate("domain")?;
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(1 + spec.id);
    let dim = mixing.input_dim();
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = sample_patch_label(&mut rng);
        let nuisance: Vec<f64> = spec
            .nuisance_mean
            .iter()
            .map(|m| m + spec.nuisance_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let g = label.as_array();
        let input = (0..dim)
            .map(|r| {
                let a = mixing.gaze.row(r);
                let b = mixing.nuisance.row(r);
                let pre = a[0] * g[0] + a[1] * g[1] + a[2] * g[2] + crate::linalg::dot(b, &nuisance);
                let eps: f64 = rng.sample(StandardNormal);
                pre.tanh() + spec.obs_noise * eps
            })
            .collect();
        samples.push(Sample { input, label });
    }
    Ok(Dataset {
        samples,
        seed: run_seed,
        spec: spec.clone(),
    })
}

/// [`generate_with_mixing`] with the default benchmark dimensions and gains.
pub fn generate_dataset(n: usize, spec: &SyntheticDomainSpec, run_seed: u64) -> Result<Dataset> {
    let d = DataConfig::default();
    let mixing = Mixing::new(run_seed, ModelConfig::default().input, d.gaze_gain, d.nuisance_gain);
    generate_with_mixing(n, spec, &mixing, run_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub yaw_step: f64,
    pub pitch_step: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            yaw_step: 30.0,
            pitch_step: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input: usize,
    pub hidden: usize,
    pub feature: usize,
    pub token: usize,
    pub prompt_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ModelDims::default();
        ModelConfig {
            input: d.input,
            hidden: d.hidden,
            feature: d.feature,
            token: d.token,
            prompt_len: d.prompt_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct SeedConfig {
    /// Mixing matrices and samples of both domains.
    pub data: u64,
    /// Trainable parameter initialization.
    pub init: u64,
    /// Frozen text proxy.
    pub proxy: u64,
    /// Batch order.
    pub shuffle: u64,
    /// Pair sampling of the rank-correlation diagnostic.
    pub pairs: u64,
}


impl SeedConfig {
    /// Overrides every seed with `seed`.
    pub fn all(seed: u64) -> Self {
        SeedConfig {
            data: seed,
            init: seed,
            proxy: seed,
            shuffle: seed,
            pairs: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_source: usize,
    pub n_target: usize,
    /// Standard deviation of the gaze mixing entries.
    pub gaze_gain: f64,
    /// Standard deviation of the nuisance mixing entries.
    pub nuisance_gain: f64,
    pub source: SyntheticDomainSpec,
    pub target: SyntheticDomainSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_source: 4096,
            n_target: 1024,
            gaze_gain: 1.0,
            nuisance_gain: 0.3,
            source: SyntheticDomainSpec::source(),
            target: SyntheticDomainSpec::target(),
        }
    }
}

/// Every knob of a training run. Missing JSON fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    /// Size `K` of the global negative bank.
    pub negatives: usize,
    pub tau: f64,
    pub lambda: LossWeights,
    pub weighting: WeightingScheme,
    pub interpolation: InterpolationScheme,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub seeds: SeedConfig,
    pub data: DataConfig,
    /// Threads used for per-sample work; results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 30,
            lr: 0.05,
            weight_decay: 1e-5,
            momentum: 0.9,
            warmup_epochs: 3,
            negatives: 256,
            tau: 1.0,
            lambda: LossWeights::default(),
            weighting: WeightingScheme::ClampedCos,
            interpolation: InterpolationScheme::SphericalBilinear,
            grid: GridConfig::default(),
            model: ModelConfig::default(),
            seeds: SeedConfig::default(),
            data: DataConfig::default(),
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Parses a JSON config; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                key: if path.is_empty() { ".".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("workers", self.workers),
            ("data.n_source", self.data.n_source),
            ("data.n_target", self.data.n_target),
            ("model.input", self.model.input),
            ("model.hidden", self.model.hidden),
            ("model.feature", self.model.feature),
            ("model.token", self.model.token),
            ("model.prompt_len", self.model.prompt_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        let finite_positive = [
            ("lr", self.lr),
            ("tau", self.tau),
            ("grid.yaw_step", self.grid.yaw_step),
            ("grid.pitch_step", self.grid.pitch_step),
        ];
        for (key, v) in finite_positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(key, format!("must be a finite positive number, got {v}")));
            }
        }
        let nonnegative = [
            ("weight_decay", self.weight_decay),
            ("data.gaze_gain", self.data.gaze_gain),
            ("data.nuisance_gain", self.data.nuisance_gain),
        ];
        for (key, v) in nonnegative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, format!("must be a finite nonnegative number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.warmup_epochs >= self.epochs && self.warmup_epochs > 0 {
            return Err(Error::config("warmup_epochs", "must be smaller than epochs"));
        }
        self.lambda.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::config(format!("lambda.{}", key.trim_start_matches("lambda_")), message),
            other => other,
        })?;
        self.data.source.validate("data.source")?;
        self.data.target.validate("data.target")?;
        if self.data.source.id == self.data.target.id {
            return Err(Error::config("data.target.id", "source and target domains need distinct ids"));
        }
        AnchorGrid::new(self.grid.yaw_step, self.grid.pitch_step).map_err(|e| match e {
            Error::Config { key, message } => Error::config(format!("grid.{key}"), message),
            other => other,
        })?;
        Ok(())
    }

    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        AnchorGrid::new(self.grid.yaw_step, self.grid.pitch_step)
    }

    pub fn dims(&self) -> Result<ModelDims> {
        let m = &self.model;
        Ok(ModelDims {
            input: m.input,
            hidden: m.hidden,
            feature: m.feature,
            token: m.token,
            prompt_len: m.prompt_len,
            anchors: self.anchor_grid()?.len(),
        })
    }

    pub fn init_seeds(&self) -> InitSeeds {
        InitSeeds {
            init: self.seeds.init,
            proxy: self.seeds.proxy,
        }
    }

    pub fn mixing(&self) -> Mixing {
        Mixing::new(self.seeds.data, self.model.input, self.data.gaze_gain, self.data.nuisance_gain)
    }

    /// Source and target datasets of this config.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let mixing = self.mixing();
        let source = generate_with_mixing(self.data.n_source, &self.data.source, &mixing, self.seeds.data)?;
        let target = generate_with_mixing(self.data.n_target, &self.data.target, &mixing, self.seeds.data)?;
        Ok((source, target))
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Linear warm-up from 0 over `warmup_steps`, then cosine annealing to 0.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let p = (step - warmup_steps) as f64 / span as f64;
    base_lr * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
}

/// SGD with Nesterov momentum and decoupled weight decay, over trainable
/// tensors only.
#[derive(Debug, Clone)]
pub struct NesterovSgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Gradients,
}

impl NesterovSgd {
    pub fn new(params: &ParameterSet, momentum: f64, weight_decay: f64) -> Self {
        NesterovSgd {
            momentum,
            weight_decay,
            velocity: Gradients::zeros_for(params),
        }
    }

    /// `v ← μv + g`, `p ← p − lr·(g + μv) − lr·wd·p`.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients, lr: f64) {
        let mu = self.momentum;
        let decay = 1.0 - lr * self.weight_decay;
        for id in ParamId::ALL.into_iter().filter(|p| p.trainable()) {
            let g = grads.get(id).expect("trainable tensors have gradients");
            let v = self.velocity.slot(id);
            for ((p, vi), gi) in params.get_mut(id).iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi;
                *p = decay * *p - lr * (gi + mu * *vi);
            }
        }
    }
}

/// Runs `f` over `items` on up to `workers` threads, returning results in
/// item order.
fn ordered_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if workers <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

struct SampleForward {
    image: ImageCache,
    gaze: f64,
    d_raw: [f64; 3],
    text: Option<TextCache>,
}

/// The batch objective of a training set: fixed per-sample interpolation
/// weights, negative-bank layout and anchor target cosines.
pub struct Objective<'d> {
    data: &'d Dataset,
    lambda: LossWeights,
    weighting: WeightingScheme,
    tau: f64,
    workers: usize,
    sample_weights: Vec<InterpolationWeights>,
    bank: BankLayout,
    geo_target: Vec<f64>,
}

impl<'d> Objective<'d> {
    pub fn new(config: &TrainConfig, data: &'d Dataset) -> Result<Self> {
        let grid = config.anchor_grid()?;
        let uses_text = config.lambda.mcr > 0.0;
        let sample_weights = if uses_text {
            data.samples
                .iter()
                .map(|s| config.interpolation.weights(&s.label, &grid))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let bank = if uses_text {
            BankLayout::new(config.negatives, &grid, config.interpolation)?
        } else {
            BankLayout::new(0, &grid, config.interpolation)?
        };
        let geo_target = if config.lambda.geo > 0.0 {
            gaze_cosines(grid.gazes())
        } else {
            Vec::new()
        };
        Ok(Objective {
            data,
            lambda: config.lambda,
            weighting: config.weighting,
            tau: config.tau,
            workers: config.workers,
            sample_weights,
            bank,
            geo_target,
        })
    }

    pub fn bank_layout(&self) -> &BankLayout {
        &self.bank
    }

    /// Loss over the samples at `batch`; when `grads` is given it is
    /// overwritten with the gradient of the total.
    ///
    /// Terms whose λ is zero are skipped and reported as 0.
    pub fn evaluate(
        &self,
        params: &ParameterSet,
        batch: &[usize],
        grads: Option<&mut Gradients>,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::EmptyRequest("empty batch".into()));
        }
        let lambda = self.lambda;
        let b = batch.len() as f64;
        let text = (lambda.mcr > 0.0).then(|| SharedContextText::new(params));
        let anchors = params.anchor_embeddings();

        let forward = ordered_map(batch, self.workers, |&i| -> Result<SampleForward> {
            let sample = &self.data.samples[i];
            let image = image_forward_cached(&sample.input, params)?;
            let prediction = regressor_forward(&image.feature, params)?;
            let (gaze, d_raw) = gaze_loss(&prediction.raw, &sample.label)?;
            let text = match &text {
                Some(t) => Some(t.forward(&interpolate_embedding(&self.sample_weights[i], &anchors)?)?),
                None => None,
            };
            Ok(SampleForward {
                image,
                gaze,
                d_raw,
                text,
            })
        });
        let forward = forward.into_iter().collect::<Result<Vec<_>>>()?;

        let gaze_mean = forward.iter().map(|f| f.gaze).sum::<f64>() / b;

        let mcr = match &text {
            Some(t) => {
                let bank = build_negative_bank_with(&self.bank, params, t)?;
                let image_feats: Vec<&[f64]> = forward.iter().map(|f| &*f.image.feature).collect();
                let text_feats: Vec<&[f64]> = forward
                    .iter()
                    .map(|f| &*f.text.as_ref().expect("text forward ran").feature)
                    .collect();
                let labels: Vec<GazeVector> = batch.iter().map(|&i| self.data.samples[i].label).collect();
                let out = mcr_total(
                    &image_feats,
                    &text_feats,
                    &labels,
                    &bank.features(),
                    &bank.gazes,
                    self.weighting,
                    self.tau,
                )?;
                Some((out, bank))
            }
            None => None,
        };

        let geo = if lambda.geo > 0.0 {
            Some(geo_loss_with_target(&anchors, &self.geo_target)?)
        } else {
            None
        };

        let breakdown = total_objective(
            geo.as_ref().map_or(0.0, |g| g.0),
            mcr.as_ref().map_or(0.0, |m| m.0.t2i),
            mcr.as_ref().map_or(0.0, |m| m.0.i2t),
            gaze_mean,
            &lambda,
        );

        let Some(grads) = grads else {
            return Ok(breakdown);
        };
        grads.zero();

        // image encoder and regressor, one gradient buffer per sample so the
        // reduction order never depends on the worker count
        let indexed: Vec<usize> = (0..batch.len()).collect();
        let per_sample = ordered_map(&indexed, self.workers, |&k| {
            let f = &forward[k];
            let mut local = Gradients::zeros_for(params);
            let d_raw = f.d_raw.map(|d| d * lambda.gaze / b);
            let mut d_feature = regressor_backward(&f.image.feature, params, &d_raw, &mut local);
            if let Some((out, _)) = &mcr {
                for (d, m) in d_feature.iter_mut().zip(&out.d_image[k]) {
                    *d += lambda.mcr * m;
                }
            }
            image_encoder_backward(&f.image, params, &d_feature, &mut local);
            local
        });
        for local in &per_sample {
            grads.add_scaled(local, 1.0);
        }

        if let (Some(t), Some((out, bank))) = (&text, &mcr) {
            let feature_dim = params.dims().feature;
            let token_dim = params.dims().token;
            let mut dpre_sum = vec![0.0; feature_dim];
            let mut prompt_backward = |cache: &TextCache, d_feat: &[f64], weights: &InterpolationWeights| {
                let scaled: Vec<f64> = d_feat.iter().map(|d| lambda.mcr * d).collect();
                let dpre = text_backward_to_pre(cache, params, &scaled);
                let d_token = t.token_grad(&dpre);
                let slot = grads.slot(ParamId::Anchors);
                for &(idx, w) in &weights.entries {
                    for (g, dt) in slot[idx * token_dim..(idx + 1) * token_dim].iter_mut().zip(&d_token) {
                        *g += w * dt;
                    }
                }
                dpre_sum.iter_mut().zip(&dpre).for_each(|(s, d)| *s += d);
            };
            for (k, &i) in batch.iter().enumerate() {
                let cache = forward[k].text.as_ref().expect("text forward ran");
                prompt_backward(cache, &out.d_text[k], &self.sample_weights[i]);
            }
            for (k, cache) in bank.caches.iter().enumerate() {
                prompt_backward(cache, &out.d_bank[k], &self.bank.weights[k]);
            }
            t.context_grad(&dpre_sum, grads.slot(ParamId::Context));
        }

        if let Some((_, g)) = &geo {
            for (a, d) in grads.slot(ParamId::Anchors).iter_mut().zip(g.as_slice()) {
                *a += lambda.geo * d;
            }
        }
        Ok(breakdown)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub geo: f64,
    pub mcr_t2i: f64,
    pub mcr_i2t: f64,
    pub gaze: f64,
    pub total: f64,
    pub lr: f64,
    pub src_err_deg: f64,
    pub tgt_err_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub rows: Vec<EpochMetrics>,
    /// Seconds since the start of training at the end of each epoch; not
    /// part of the CSV so that logs stay byte-reproducible.
    pub wall_clock: Vec<f64>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record([
                "epoch", "geo", "mcr_t2i", "mcr_i2t", "gaze", "total", "lr", "src_err_deg", "tgt_err_deg",
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.rows.last()
    }
}

pub struct TrainOutcome {
    pub params: ParameterSet,
    pub log: MetricsLog,
}

/// Trains from a fresh initialization. `target` is only evaluated, never
/// trained on.
pub fn train(config: &TrainConfig, source: &Dataset, target: Option<&Dataset>) -> Result<TrainOutcome> {
    train_with(config, source, target, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F: FnMut(&EpochMetrics)>(
    config: &TrainConfig,
    source: &Dataset,
    target: Option<&Dataset>,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    let dims = config.dims()?;
    if source.samples.first().map(|s| s.input.len()) != Some(dims.input) {
        return Err(Error::shape(
            format!("source inputs of length {}", dims.input),
            source.samples.first().map_or(0, |s| s.input.len()),
        ));
    }
    let mut params = init_parameters(&dims, config.init_seeds())?;
    let objective = Objective::new(config, source)?;
    let mut optimizer = NesterovSgd::new(&params, config.momentum, config.weight_decay);
    let mut grads = Gradients::zeros_for(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seeds.shuffle);
    let n = source.len();
    let steps_per_epoch = config.steps_per_epoch(n);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup_steps = steps_per_epoch * config.warmup_epochs;
    let start = std::time::Instant::now();
    let mut log = MetricsLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            lr = lr_schedule(step, total_steps, warmup_steps, config.lr);
            let b = objective.evaluate(&params, batch, Some(&mut grads))?;
            if !b.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    breakdown: b.to_string(),
                });
            }
            optimizer.step(&mut params, &grads, lr);
            sum.geo += b.geo;
            sum.mcr_t2i += b.mcr_t2i;
            sum.mcr_i2t += b.mcr_i2t;
            sum.gaze += b.gaze;
            sum.total += b.total;
            step += 1;
        }
        let k = steps_per_epoch as f64;
        let row = EpochMetrics {
            epoch,
            geo: sum.geo / k,
            mcr_t2i: sum.mcr_t2i / k,
            mcr_i2t: sum.mcr_i2t / k,
            gaze: sum.gaze / k,
            total: sum.total / k,
            lr,
            src_err_deg: evaluate(&params, source)?,
            tgt_err_deg: target.map(|t| evaluate(&params, t)).transpose()?,
        };
        on_epoch(&row);
        log.rows.push(row);
        log.wall_clock.push(start.elapsed().as_secs_f64());
    }
    Ok(TrainOutcome { params, log })
}

pub fn predict(params: &ParameterSet, input: &[f64]) -> Result<GazeVector> {
    let feature = image_encoder_forward(input, params)?;
    Ok(regressor_forward(&feature, params)?.gaze)
}

/// Mean angular error in degrees over the dataset.
pub fn evaluate(params: &ParameterSet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyRequest("cannot evaluate an empty dataset".into()));
    }
    let mut total = 0.0;
    for s in &data.samples {
        total += angular_error(&predict(params, &s.input)?, &s.label);
    }
    Ok(total / data.len() as f64)
}

/// Ranks with ties sharing their average rank (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} values", x.len()), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedRank("need at least two observations".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedRank("first variable is constant".into()));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedRank("second variable is constant".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman ρ between `1 − cos(f_i, f_j)` and the angle between labels
/// over `n_pairs` random pairs of distinct samples.
pub fn correlation_of_features(features: &[Vec<f64>], labels: &[GazeVector], n_pairs: usize, seed: u64) -> Result<f64> {
    if n_pairs < 100 {
        return Err(Error::config("n_pairs", "need at least 100 pairs"));
    }
    if features.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", features.len()), labels.len()));
    }
    if features.len() < 2 {
        return Err(Error::UndefinedRank("need at least two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = features.len();
    let mut fd = Vec::with_capacity(n_pairs);
    let mut ld = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        fd.push(1.0 - cosine(&features[i], &features[j]));
        ld.push(labels[i].arc_to(&labels[j]));
    }
    spearman(&fd, &ld)
}

/// [`correlation_of_features`] on image-encoder features.
pub fn feature_label_correlation(params: &ParameterSet, data: &Dataset, n_pairs: usize, seed: u64) -> Result<f64> {
    let features = data
        .samples
        .iter()
        .map(|s| Ok(image_encoder_forward(&s.input, params)?.into_vec()))
        .collect::<Result<Vec<_>>>()?;
    correlation_of_features(&features, &data.labels(), n_pairs, seed)
}

/// Which part of the method an ablation varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    #[serde(rename = "loss-terms")]
    LossTerms,
    #[serde(rename = "interpolation")]
    Interpolation,
    #[serde(rename = "K")]
    NegativeCount,
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::LossTerms => "loss-terms",
            AblationAxis::Interpolation => "interpolation",
            AblationAxis::NegativeCount => "K",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss-terms" | "loss" => Ok(AblationAxis::LossTerms),
            "interpolation" | "interp" => Ok(AblationAxis::Interpolation),
            "K" | "k" | "negatives" => Ok(AblationAxis::NegativeCount),
            _ => Err(Error::config("axis", format!("unknown ablation axis `{s}`"))),
        }
    }
}

/// Bank sizes swept by default along the `K` axis.
pub const DEFAULT_K_VALUES: [usize; 4] = [0, 64, 128, 256];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    pub config: TrainConfig,
}

pub fn ablation_variants(axis: AblationAxis, base: &TrainConfig, k_values: &[usize]) -> Vec<AblationVariant> {
    let with = |name: String, f: &dyn Fn(&mut TrainConfig)| {
        let mut config = base.clone();
        f(&mut config);
        AblationVariant { name, config }
    };
    match axis {
        AblationAxis::LossTerms => vec![
            with("Gaze".into(), &|c| c.lambda = LossWeights { geo: 0.0, mcr: 0.0, gaze: 1.0 }),
            with("MCR+Gaze".into(), &|c| c.lambda = LossWeights { geo: 0.0, mcr: 1.0, gaze: 1.0 }),
            with("Geo+MCR+Gaze".into(), &|c| c.lambda = LossWeights { geo: 1.0, mcr: 1.0, gaze: 1.0 }),
        ],
        AblationAxis::Interpolation => InterpolationScheme::ALL
            .into_iter()
            .map(|s| with(s.name().into(), &|c| c.interpolation = s))
            .collect(),
        AblationAxis::NegativeCount => k_values
            .iter()
            .map(|&k| with(format!("K={k}"), &|c| c.negatives = k))
            .collect(),
    }
}

/// The `replicate`-th run of a config: init and shuffle seeds are offset,
/// data and proxy seeds stay fixed.
pub fn replicate_config(base: &TrainConfig, replicate: u64) -> TrainConfig {
    let mut c = base.clone();
    c.seeds.init = base.seeds.init.wrapping_add(replicate);
    c.seeds.shuffle = base.seeds.shuffle.wrapping_add(replicate);
    c
}

pub struct ReplicateOutcome {
    pub replicate: u64,
    pub source_error: f64,
    pub target_error: f64,
    pub params: ParameterSet,
}

/// Trains `replicates` seeded copies of `config` on shared datasets.
pub fn run_replicates<F: FnMut(&ReplicateOutcome)>(
    config: &TrainConfig,
    replicates: u64,
    source: &Dataset,
    target: &Dataset,
    mut on_run: F,
) -> Result<Vec<ReplicateOutcome>> {
    let mut out = Vec::new();
    for r in 0..replicates {
        let c = replicate_config(config, r);
        let params = train(&c, source, None)?.params;
        let run = ReplicateOutcome {
            replicate: r,
            source_error: evaluate(&params, source)?,
            target_error: evaluate(&params, target)?,
            params,
        };
        on_run(&run);
        out.push(run);
    }
    Ok(out)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_tgt_err_deg: f64,
    pub std_tgt_err_deg: f64,
    pub mean_src_err_deg: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    /// Per-variant target errors in replicate order.
    pub target_errors: Vec<Vec<f64>>,
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn summarize(name: &str, runs: &[ReplicateOutcome]) -> AblationRow {
    let tgt: Vec<f64> = runs.iter().map(|r| r.target_error).collect();
    let src: Vec<f64> = runs.iter().map(|r| r.source_error).collect();
    let (mean, std) = mean_std(&tgt);
    AblationRow {
        variant: name.to_string(),
        mean_tgt_err_deg: mean,
        std_tgt_err_deg: std,
        mean_src_err_deg: mean_std(&src).0,
        seeds: runs.len(),
    }
}

/// Trains every variant of `axis` over `replicates` seeds and reports the
/// mean ± sample standard deviation of the target-domain error.
pub fn run_ablation<F: FnMut(&str, &ReplicateOutcome)>(
    axis: AblationAxis,
    base: &TrainConfig,
    k_values: &[usize],
    replicates: u64,
    mut on_run: F,
) -> Result<AblationTable> {
    base.validate()?;
    if replicates == 0 {
        return Err(Error::config("seeds", "need at least one replicate"));
    }
    let (source, target) = base.datasets()?;
    let mut rows = Vec::new();
    let mut target_errors = Vec::new();
    for v in ablation_variants(axis, base, k_values) {
        let runs = run_replicates(&v.config, replicates, &source, &target, |r| on_run(&v.name, r))?;
        target_errors.push(runs.iter().map(|r| r.target_error).collect());
        rows.push(summarize(&v.name, &runs));
    }
    Ok(AblationTable {
        axis,
        rows,
        target_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_schedule(0, 100, 10, 0.05), 0.0);
        assert!((lr_schedule(5, 100, 10, 0.05) - 0.025).abs() < 1e-15);
        assert_eq!(lr_schedule(10, 100, 10, 0.05), 0.05);
        let last = lr_schedule(99, 100, 10, 0.05);
        assert!(last > 0.0 && last < 0.05 * 0.001);
        assert_eq!(lr_schedule(0, 100, 0, 0.05), 0.05);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0]).unwrap(), 1.0);
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(matches!(spearman(&x, &[1.0; 4]), Err(Error::UndefinedRank(_))));
    }

    #[test]
    fn config_defaults_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let back = TrainConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(TrainConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn config_errors_name_key_path() {
        let err = TrainConfig::from_json(r#"{"model": {"hidden": "wide"}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "model.hidden"), "{err:?}");
        let err = TrainConfig::from_json(r#"{"lambda": {"geo": -1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "lambda.geo"), "{err:?}");
        let err = TrainConfig::from_json(r#"{"data": {"source": {"id": 0, "nuisance_mean": [0], "nuisance_scale": 1, "obs_noise": 0}}}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "data.source.nuisance_mean"), "{err:?}");
        let err = TrainConfig::from_json(r#"{"epochz": 3}"#).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err:?}");
    }

    #[test]
    fn variants_per_axis() {
        let base = TrainConfig::default();
        let names = |axis| -> Vec<String> {
            ablation_variants(axis, &base, &DEFAULT_K_VALUES)
                .into_iter()
                .map(|v| v.name)
                .collect()
        };
        assert_eq!(names(AblationAxis::LossTerms), ["Gaze", "MCR+Gaze", "Geo+MCR+Gaze"]);
        assert_eq!(
            names(AblationAxis::Interpolation),
            ["global-linear", "planar-bilinear", "spherical-bilinear"]
        );
        assert_eq!(names(AblationAxis::NegativeCount), ["K=0", "K=64", "K=128", "K=256"]);
    }
}
