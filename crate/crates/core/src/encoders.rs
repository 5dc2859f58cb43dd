//! Frozen text-encoder proxy, trainable image encoder and gaze regressor, and
//! the named-tensor parameter store that stands in for an autodiff framework.
//!
//! Every forward pass here has a matching hand-written backward pass. Affine
//! weights are row-major `out × in`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Deref;

use crate::anchors::EMBEDDING_INIT_STD;
use crate::error::{Error, Result};
use crate::geometry::GazeVector;
use crate::linalg::{self, affine, affine_backward, normalize_backward, normalize_in_place, Matrix};

/// Layer sizes of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Raw input dimension of the image encoder.
    pub input: usize,
    /// Width of both hidden layers of the image encoder.
    pub hidden: usize,
    /// Feature dimension shared by image and text features.
    pub feature: usize,
    /// Token embedding dimension.
    pub token: usize,
    /// Prompt length `L`, including the trailing gaze token.
    pub prompt_len: usize,
    /// Number of anchors.
    pub anchors: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            input: 32,
            hidden: 64,
            feature: 64,
            token: 16,
            prompt_len: 10,
            anchors: 91,
        }
    }
}

impl ModelDims {
    pub fn context_tokens(&self) -> usize {
        self.prompt_len - 1
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("input_dim", self.input),
            ("hidden_dim", self.hidden),
            ("feature_dim", self.feature),
            ("token_dim", self.token),
            ("prompt_len", self.prompt_len),
            ("anchors", self.anchors),
        ];
        for (key, v) in checks {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Identifies one tensor in a [`ParameterSet`]. The discriminant is the
/// tensor's position in the set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    Anchors,
    Context,
    ImageW1,
    ImageB1,
    ImageW2,
    ImageB2,
    ImageW3,
    ImageB3,
    RegressorW,
    RegressorB,
    TextW1,
    TextB1,
    TextW2,
    TextB2,
}

impl ParamId {
    pub const ALL: [ParamId; 14] = [
        ParamId::Anchors,
        ParamId::Context,
        ParamId::ImageW1,
        ParamId::ImageB1,
        ParamId::ImageW2,
        ParamId::ImageB2,
        ParamId::ImageW3,
        ParamId::ImageB3,
        ParamId::RegressorW,
        ParamId::RegressorB,
        ParamId::TextW1,
        ParamId::TextB1,
        ParamId::TextW2,
        ParamId::TextB2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Anchors => "anchors.embeddings",
            ParamId::Context => "prompt.context",
            ParamId::ImageW1 => "image.w1",
            ParamId::ImageB1 => "image.b1",
            ParamId::ImageW2 => "image.w2",
            ParamId::ImageB2 => "image.b2",
            ParamId::ImageW3 => "image.w3",
            ParamId::ImageB3 => "image.b3",
            ParamId::RegressorW => "regressor.w",
            ParamId::RegressorB => "regressor.b",
            ParamId::TextW1 => "text.w1",
            ParamId::TextB1 => "text.b1",
            ParamId::TextW2 => "text.w2",
            ParamId::TextB2 => "text.b2",
        }
    }

    /// The text proxy is frozen; everything else trains.
    pub fn trainable(self) -> bool {
        !matches!(
            self,
            ParamId::TextW1 | ParamId::TextB1 | ParamId::TextW2 | ParamId::TextB2
        )
    }

    pub fn shape(self, d: &ModelDims) -> Vec<usize> {
        match self {
            ParamId::Anchors => vec![d.anchors, d.token],
            ParamId::Context => vec![d.context_tokens(), d.token],
            ParamId::ImageW1 => vec![d.hidden, d.input],
            ParamId::ImageB1 | ParamId::ImageB2 => vec![d.hidden],
            ParamId::ImageW2 => vec![d.hidden, d.hidden],
            ParamId::ImageW3 => vec![d.feature, d.hidden],
            ParamId::ImageB3 | ParamId::TextB1 | ParamId::TextB2 => vec![d.feature],
            ParamId::RegressorW => vec![3, d.feature],
            ParamId::RegressorB => vec![3],
            ParamId::TextW1 => vec![d.feature, d.prompt_len * d.token],
            ParamId::TextW2 => vec![d.feature, d.feature],
        }
    }

    fn from_name(name: &str) -> Option<ParamId> {
        ParamId::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// All model tensors, trainable and frozen, in [`ParamId`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    dims: ModelDims,
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id as usize].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id as usize].data
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.tensors[id as usize].shape
    }

    pub fn anchor_embeddings(&self) -> Matrix {
        Matrix::from_vec(self.dims.anchors, self.dims.token, self.get(ParamId::Anchors).to_vec())
            .expect("anchor tensor sized at construction")
    }

    pub fn count(&self, trainable: bool) -> usize {
        ParamId::ALL
            .into_iter()
            .filter(|p| p.trainable() == trainable)
            .map(|p| self.get(p).len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Largest absolute elementwise difference to `other` (same dims).
    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Serializes to a JSON object mapping tensor name to shape and values.
    pub fn to_json(&self) -> Result<String> {
        let doc: BTreeMap<&str, TensorDoc> = ParamId::ALL
            .into_iter()
            .map(|p| {
                let t = &self.tensors[p as usize];
                (
                    p.name(),
                    TensorDoc {
                        shape: t.shape.clone(),
                        data: t.data.clone(),
                    },
                )
            })
            .collect();
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut doc: BTreeMap<String, TensorDoc> = serde_json::from_str(text)?;
        if let Some(unknown) = doc.keys().find(|k| ParamId::from_name(k).is_none()) {
            return Err(Error::Format(format!("unknown tensor `{unknown}`")));
        }
        let mut take = |p: ParamId| {
            doc.remove(p.name())
                .ok_or_else(|| Error::Format(format!("missing tensor `{}`", p.name())))
        };
        let anchors = take(ParamId::Anchors)?;
        let context = take(ParamId::Context)?;
        let w1 = take(ParamId::ImageW1)?;
        let w3 = take(ParamId::ImageW3)?;
        let text_w1 = take(ParamId::TextW1)?;
        let dim = |t: &TensorDoc, i: usize| t.shape.get(i).copied().unwrap_or(0);
        let dims = ModelDims {
            input: dim(&w1, 1),
            hidden: dim(&w1, 0),
            feature: dim(&w3, 0),
            token: dim(&anchors, 1),
            prompt_len: dim(&context, 0) + 1,
            anchors: dim(&anchors, 0),
        };
        dims.validate()?;
        let mut tensors = Vec::with_capacity(ParamId::ALL.len());
        for p in ParamId::ALL {
            let t = match p {
                ParamId::Anchors => anchors.clone(),
                ParamId::Context => context.clone(),
                ParamId::ImageW1 => w1.clone(),
                ParamId::ImageW3 => w3.clone(),
                ParamId::TextW1 => text_w1.clone(),
                other => take(other)?,
            };
            let shape = p.shape(&dims);
            if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::shape(
                    format!("{} with shape {:?}", p.name(), shape),
                    format!("shape {:?} with {} values", t.shape, t.data.len()),
                ));
            }
            tensors.push(Tensor {
                shape: t.shape,
                data: t.data,
            });
        }
        Ok(ParameterSet { dims, tensors })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorDoc {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Gradient slots parallel to a [`ParameterSet`]; frozen tensors have none.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_for(params: &ParameterSet) -> Self {
        Gradients {
            slots: ParamId::ALL
                .into_iter()
                .map(|p| p.trainable().then(|| vec![0.0; params.get(p).len()]))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots[id as usize].as_deref()
    }

    /// Mutable slot of a trainable tensor.
    ///
    /// Panics for frozen tensors: writing a gradient there is a logic error.
    pub fn slot(&mut self, id: ParamId) -> &mut [f64] {
        self.slots[id as usize]
            .as_deref_mut()
            .unwrap_or_else(|| panic!("{} is frozen and has no gradient slot", id.name()))
    }

    pub fn zero(&mut self) {
        for s in self.slots.iter_mut().flatten() {
            s.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += scale * y;
                }
            }
        }
    }

    /// Flattened view over all trainable slots in [`ParamId`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.slots.iter().flatten().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().flatten().all(|g| g.is_finite())
    }
}

/// Seeds for [`init_parameters`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSeeds {
    /// Stream for trainable tensors.
    pub init: u64,
    /// Independent stream for the frozen text proxy.
    pub proxy: u64,
}

/// Draws a fresh parameter set.
///
/// Affine weights use `N(0, 2/(fan_in + fan_out))`, biases start at zero,
/// anchor and context embeddings use `N(0, 0.02²)`. The frozen proxy uses
/// `N(0, 1/fan_in)` weights and `N(0, 0.02²)` biases.
pub fn init_parameters(dims: &ModelDims, seeds: InitSeeds) -> Result<ParameterSet> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.init);
    let mut proxy_rng = ChaCha8Rng::seed_from_u64(seeds.proxy);
    proxy_rng.set_stream(1);
    let mut tensors = Vec::with_capacity(ParamId::ALL.len());
    for p in ParamId::ALL {
        let shape = p.shape(dims);
        let n: usize = shape.iter().product();
        let fill = |rng: &mut ChaCha8Rng, std: f64| -> Vec<f64> {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| normal.sample(rng)).collect()
        };
        let data = match p {
            ParamId::Anchors | ParamId::Context => fill(&mut rng, EMBEDDING_INIT_STD),
            ParamId::ImageW1 | ParamId::ImageW2 | ParamId::ImageW3 | ParamId::RegressorW => {
                fill(&mut rng, (2.0 / (shape[0] + shape[1]) as f64).sqrt())
            }
            ParamId::TextW1 | ParamId::TextW2 => fill(&mut proxy_rng, (1.0 / shape[1] as f64).sqrt()),
            ParamId::TextB1 | ParamId::TextB2 => fill(&mut proxy_rng, 0.02),
            _ => vec![0.0; n],
        };
        tensors.push(Tensor { shape, data });
    }
    Ok(ParameterSet { dims: *dims, tensors })
}

/// A unit-norm feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Normalizes `v`, failing on a zero or non-finite norm.
    pub fn normalize(mut v: Vec<f64>) -> Result<(Self, f64)> {
        let n = normalize_in_place(&mut v).ok_or(Error::DegenerateFeature)?;
        Ok((FeatureVector(v), n))
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Learnable context tokens followed by one gaze token.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSequence {
    pub context: Matrix,
    pub gaze_token: Vec<f64>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.context.rows() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row-major `L × D_tok` flattening, gaze token last.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.context.as_slice().to_vec();
        out.extend_from_slice(&self.gaze_token);
        out
    }

    fn check(&self, dims: &ModelDims) -> Result<()> {
        if self.len() != dims.prompt_len {
            return Err(Error::shape(format!("prompt length {}", dims.prompt_len), self.len()));
        }
        if self.context.cols() != dims.token || self.gaze_token.len() != dims.token {
            return Err(Error::shape(
                format!("token dim {}", dims.token),
                format!("{} / {}", self.context.cols(), self.gaze_token.len()),
            ));
        }
        Ok(())
    }
}

/// Intermediate values of one text-proxy forward pass.
#[derive(Debug, Clone)]
pub struct TextCache {
    hidden: Vec<f64>,
    norm: f64,
    pub feature: FeatureVector,
}

/// Text-proxy forward over a full prompt: affine → tanh → affine → normalize.
pub fn text_encoder_forward(seq: &PromptSequence, params: &ParameterSet) -> Result<FeatureVector> {
    Ok(text_forward_cached(seq, params)?.feature)
}

pub fn text_forward_cached(seq: &PromptSequence, params: &ParameterSet) -> Result<TextCache> {
    let dims = params.dims();
    seq.check(dims)?;
    let mut pre = vec![0.0; dims.feature];
    affine(params.get(ParamId::TextW1), params.get(ParamId::TextB1), &seq.flatten(), &mut pre);
    text_head(params, pre)
}

fn text_head(params: &ParameterSet, pre: Vec<f64>) -> Result<TextCache> {
    let hidden: Vec<f64> = pre.into_iter().map(f64::tanh).collect();
    let mut z = vec![0.0; hidden.len()];
    affine(params.get(ParamId::TextW2), params.get(ParamId::TextB2), &hidden, &mut z);
    let (feature, norm) = FeatureVector::normalize(z)?;
    Ok(TextCache { hidden, norm, feature })
}

/// Backpropagates `d_feature` through the frozen proxy to the pre-activation
/// of its first layer.
pub fn text_backward_to_pre(cache: &TextCache, params: &ParameterSet, d_feature: &[f64]) -> Vec<f64> {
    let mut dz = vec![0.0; d_feature.len()];
    normalize_backward(&cache.feature, cache.norm, d_feature, &mut dz);
    let mut dh = vec![0.0; cache.hidden.len()];
    affine_backward(params.get(ParamId::TextW2), &cache.hidden, &dz, None, Some(&mut dh));
    dh.iter()
        .zip(&cache.hidden)
        .map(|(d, h)| d * (1.0 - h * h))
        .collect()
}

/// Gradient of the proxy output w.r.t. the whole input sequence (`L·D_tok`).
pub fn text_encoder_backward(cache: &TextCache, params: &ParameterSet, d_feature: &[f64]) -> Vec<f64> {
    let dpre = text_backward_to_pre(cache, params, d_feature);
    let n_in = params.dims().prompt_len * params.dims().token;
    let mut dseq = vec![0.0; n_in];
    let w1 = params.get(ParamId::TextW1);
    for (row, d) in w1.chunks_exact(n_in).zip(&dpre) {
        for (g, w) in dseq.iter_mut().zip(row) {
            *g += d * w;
        }
    }
    dseq
}

/// Text proxy specialised for many prompts sharing one context: the context
/// half of the first layer is evaluated once per parameter state.
pub struct SharedContextText<'p> {
    params: &'p ParameterSet,
    context_pre: Vec<f64>,
    ctx_len: usize,
}

impl<'p> SharedContextText<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        let d = params.dims();
        let ctx_len = d.context_tokens() * d.token;
        let n_in = d.prompt_len * d.token;
        let ctx = params.get(ParamId::Context);
        let context_pre = params
            .get(ParamId::TextW1)
            .chunks_exact(n_in)
            .zip(params.get(ParamId::TextB1))
            .map(|(row, b)| b + linalg::dot(&row[..ctx_len], ctx))
            .collect();
        SharedContextText {
            params,
            context_pre,
            ctx_len,
        }
    }

    pub fn forward(&self, gaze_token: &[f64]) -> Result<TextCache> {
        let n_in = self.ctx_len + gaze_token.len();
        let pre = self
            .params
            .get(ParamId::TextW1)
            .chunks_exact(n_in)
            .zip(&self.context_pre)
            .map(|(row, c)| c + linalg::dot(&row[self.ctx_len..], gaze_token))
            .collect();
        text_head(self.params, pre)
    }

    /// Gradient w.r.t. the gaze token for a first-layer pre-activation gradient.
    pub fn token_grad(&self, dpre: &[f64]) -> Vec<f64> {
        let n_tok = self.params.dims().token;
        let n_in = self.ctx_len + n_tok;
        let mut out = vec![0.0; n_tok];
        for (row, d) in self.params.get(ParamId::TextW1).chunks_exact(n_in).zip(dpre) {
            for (g, w) in out.iter_mut().zip(&row[self.ctx_len..]) {
                *g += d * w;
            }
        }
        out
    }

    /// Accumulates the context-token gradient for the summed pre-activation
    /// gradient of all prompts.
    pub fn context_grad(&self, dpre_sum: &[f64], d_context: &mut [f64]) {
        let n_in = self.ctx_len + self.params.dims().token;
        for (row, d) in self.params.get(ParamId::TextW1).chunks_exact(n_in).zip(dpre_sum) {
            for (g, w) in d_context.iter_mut().zip(&row[..self.ctx_len]) {
                *g += d * w;
            }
        }
    }
}

/// Intermediate values of one image-encoder forward pass.
#[derive(Debug, Clone)]
pub struct ImageCache {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    norm: f64,
    pub feature: FeatureVector,
}

pub fn image_encoder_forward(x: &[f64], params: &ParameterSet) -> Result<FeatureVector> {
    Ok(image_forward_cached(x, params)?.feature)
}

/// affine → tanh → affine → tanh → affine → normalize.
pub fn image_forward_cached(x: &[f64], params: &ParameterSet) -> Result<ImageCache> {
    let d = params.dims();
    if x.len() != d.input {
        return Err(Error::shape(format!("input of length {}", d.input), x.len()));
    }
    let mut h1 = vec![0.0; d.hidden];
    affine(params.get(ParamId::ImageW1), params.get(ParamId::ImageB1), x, &mut h1);
    h1.iter_mut().for_each(|v| *v = v.tanh());
    let mut h2 = vec![0.0; d.hidden];
    affine(params.get(ParamId::ImageW2), params.get(ParamId::ImageB2), &h1, &mut h2);
    h2.iter_mut().for_each(|v| *v = v.tanh());
    let mut z = vec![0.0; d.feature];
    affine(params.get(ParamId::ImageW3), params.get(ParamId::ImageB3), &h2, &mut z);
    let (feature, norm) = FeatureVector::normalize(z)?;
    Ok(ImageCache {
        input: x.to_vec(),
        h1,
        h2,
        norm,
        feature,
    })
}

/// Accumulates image-encoder parameter gradients for `d_feature`.
pub fn image_encoder_backward(
    cache: &ImageCache,
    params: &ParameterSet,
    d_feature: &[f64],
    grads: &mut Gradients,
) {
    let mut dz = vec![0.0; d_feature.len()];
    normalize_backward(&cache.feature, cache.norm, d_feature, &mut dz);

    let mut dh2 = vec![0.0; cache.h2.len()];
    backward_layer(params, grads, ParamId::ImageW3, ParamId::ImageB3, &cache.h2, &dz, Some(&mut dh2));
    dh2.iter_mut().zip(&cache.h2).for_each(|(g, h)| *g *= 1.0 - h * h);

    let mut dh1 = vec![0.0; cache.h1.len()];
    backward_layer(params, grads, ParamId::ImageW2, ParamId::ImageB2, &cache.h1, &dh2, Some(&mut dh1));
    dh1.iter_mut().zip(&cache.h1).for_each(|(g, h)| *g *= 1.0 - h * h);

    backward_layer(params, grads, ParamId::ImageW1, ParamId::ImageB1, &cache.input, &dh1, None);
}

fn backward_layer(
    params: &ParameterSet,
    grads: &mut Gradients,
    w: ParamId,
    b: ParamId,
    x: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
) {
    let mut dw = std::mem::take(grads.slots[w as usize].as_mut().expect("trainable"));
    let db = grads.slot(b);
    affine_backward(params.get(w), x, dy, Some((&mut dw, db)), dx);
    grads.slots[w as usize] = Some(dw);
}

/// Regressor output before and after normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub raw: [f64; 3],
    pub gaze: GazeVector,
}

/// Affine `D_feat → 3` followed by normalization onto the sphere.
pub fn regressor_forward(feature: &[f64], params: &ParameterSet) -> Result<Prediction> {
    if feature.len() != params.dims().feature {
        return Err(Error::shape(
            format!("feature of length {}", params.dims().feature),
            feature.len(),
        ));
    }
    let mut raw = [0.0; 3];
    affine(params.get(ParamId::RegressorW), params.get(ParamId::RegressorB), feature, &mut raw);
    let gaze = GazeVector::normalize(raw).map_err(|_| Error::DegeneratePrediction)?;
    Ok(Prediction { raw, gaze })
}

/// Accumulates regressor gradients for `d_raw` and returns `∂/∂feature`.
pub fn regressor_backward(
    feature: &[f64],
    params: &ParameterSet,
    d_raw: &[f64; 3],
    grads: &mut Gradients,
) -> Vec<f64> {
    let mut d_feature = vec![0.0; feature.len()];
    backward_layer(
        params,
        grads,
        ParamId::RegressorW,
        ParamId::RegressorB,
        feature,
        d_raw,
        Some(&mut d_feature),
    );
    d_feature
}
