//! Spatial-frequency classifiers.
//!
//! * `sfnet`: global spatial vector ++ whole-image spectrum encoding -> head.
//! * `sfpnet`: per-patch spatial ++ per-patch spectrum encoding, mean-pooled,
//!   reduced by a one-hidden-layer MLP -> head.
//! * `swinatten`: the same per-patch tokens passed through multi-head
//!   self-attention, mean-pooled -> head.
//! * `swinfusion` / `facecrop_pair`: spatial vector -> head, no frequency
//!   branch.
//!
//! The spatial extractor is frozen; every other stage is trainable and has an
//! analytic gradient.

pub mod checkpoint;
pub mod extractor;

use std::fmt;
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, Array3, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use extractor::{spatial_features, ExtractorPreset, SpatialExtractor, SpatialFeatures};

use crate::error::{Error, Result};
use crate::freqfeat::{fft_magnitude_phase, per_patch_spectra, FrequencySpectrum, MagnitudeScale};
use crate::nn::{
    self, gelu, gelu_grad, ClassificationHead, ConvCache, ConvEncoder, HeadCache, Linear, ParamLayout, SelfAttention,
};
use crate::types::{ImageSample, Score};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Sfnet,
    Sfpnet,
    Swinatten,
    Swinfusion,
    FacecropPair,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Sfnet => "sfnet",
            ModelKind::Sfpnet => "sfpnet",
            ModelKind::Swinatten => "swinatten",
            ModelKind::Swinfusion => "swinfusion",
            ModelKind::FacecropPair => "facecrop_pair",
        }
    }

    pub fn has_frequency_branch(self) -> bool {
        matches!(self, ModelKind::Sfnet | ModelKind::Sfpnet | ModelKind::Swinatten)
    }

    pub fn is_patch_model(self) -> bool {
        matches!(self, ModelKind::Sfpnet | ModelKind::Swinatten)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Trainable convolutional encoder.
    Conv,
    /// Parameter-free: mean of `log(1 + magnitude)`, one output.
    LogMagnitudeMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub freq_dim: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Cells per axis of the region pooling over the spectrum.
    pub pool_grid: usize,
    pub magnitude: MagnitudeScale,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Conv,
            freq_dim: 8,
            channels: 4,
            kernel: 3,
            pool_grid: 4,
            magnitude: MagnitudeScale::Log1p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden width; `ceil(input / 2)` when unset.
    pub hidden: Option<usize>,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: None,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Input size as `[rows, cols]`.
    #[serde(default = "default_resolution")]
    pub resolution: [usize; 2],
    pub extractor: ExtractorPreset,
    /// FFT tile size for the patch models.
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub head: HeadConfig,
    /// Output width of the sfpnet aggregation MLP; `S + Fq` when unset.
    #[serde(default)]
    pub aggregator_dim: Option<usize>,
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
}

fn default_resolution() -> [usize; 2] {
    [256, 256]
}

fn default_patch_size() -> usize {
    32
}

fn default_heads() -> usize {
    1
}

impl ModelConfig {
    pub fn new(kind: ModelKind, resolution: [usize; 2], extractor: ExtractorPreset) -> ModelConfig {
        ModelConfig {
            kind,
            resolution,
            extractor,
            patch_size: default_patch_size(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            aggregator_dim: None,
            attention_heads: default_heads(),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Frequency branch of a model.
#[derive(Debug, Clone, PartialEq)]
pub enum FrequencyEncoder {
    LogMagnitudeMean { rows: usize, cols: usize },
    Conv(ConvEncoder),
}

#[derive(Debug, Clone)]
enum EncoderCache {
    Stateless,
    Conv(ConvCache),
}

impl FrequencyEncoder {
    pub fn dim(&self) -> usize {
        match self {
            FrequencyEncoder::LogMagnitudeMean { .. } => 1,
            FrequencyEncoder::Conv(c) => c.out_dim(),
        }
    }

    pub fn input_size(&self) -> (usize, usize) {
        match self {
            FrequencyEncoder::LogMagnitudeMean { rows, cols } => (*rows, *cols),
            FrequencyEncoder::Conv(c) => (c.rows, c.cols),
        }
    }

    fn forward(&self, p: &[f64], spectrum: &FrequencySpectrum) -> Result<(Array1<f64>, EncoderCache)> {
        if spectrum.dim() != self.input_size() {
            return Err(Error::config(format!(
                "spectrum is {:?}, encoder expects {:?}",
                spectrum.dim(),
                self.input_size()
            )));
        }
        Ok(match self {
            FrequencyEncoder::LogMagnitudeMean { .. } => {
                let m = spectrum
                    .compressed_magnitude(MagnitudeScale::Log1p)
                    .mean()
                    .expect("non-empty");
                (Array1::from_elem(1, m), EncoderCache::Stateless)
            }
            FrequencyEncoder::Conv(c) => {
                let (out, cache) = c.forward(p, spectrum);
                (out, EncoderCache::Conv(cache))
            }
        })
    }

    fn backward(&self, p: &[f64], cache: &EncoderCache, dout: &Array1<f64>, g: &mut [f64]) {
        if let (FrequencyEncoder::Conv(c), EncoderCache::Conv(cache)) = (self, cache) {
            c.backward(p, cache, dout.view(), g);
        }
    }
}

/// Encodes one spectrum with the encoder's parameters taken from `params`.
pub fn encode_frequency(
    encoder: &FrequencyEncoder,
    params: &[f64],
    spectrum: &FrequencySpectrum,
) -> Result<Array1<f64>> {
    let (out, _) = encoder.forward(params, spectrum)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Consistency(
            "frequency encoder produced non-finite output".into(),
        ));
    }
    Ok(out)
}

/// Declared dimensions of a built model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Patches per image on the extractor grid (1 for global models).
    pub num_patches: usize,
    pub spatial_dim: usize,
    /// 0 for models without a frequency branch.
    pub freq_dim: usize,
    pub patch_size: usize,
    /// Width of the vector entering the classification head.
    pub head_input: usize,
}

#[derive(Debug, Clone)]
struct Network {
    kind: ModelKind,
    spatial_dim: usize,
    num_patches: usize,
    extractor_grid: (usize, usize),
    freq_grid: (usize, usize),
    patch_size: usize,
    encoder: Option<FrequencyEncoder>,
    aggregator: Option<Linear>,
    attention: Option<SelfAttention>,
    head: ClassificationHead,
    layout: ParamLayout,
}

/// Non-trainable per-sample inputs: extractor features and spectra.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// `[P, S]` (or `[1, S]`).
    pub spatial: Array2<f64>,
    /// One whole-image spectrum (sfnet) or one per FFT tile.
    pub spectra: Vec<FrequencySpectrum>,
}

#[derive(Debug, Clone)]
struct SampleCache {
    enc: Vec<EncoderCache>,
    fused: Array2<f64>,
    agg: Option<(Array1<f64>, Array1<f64>)>,
    attn: Option<nn::AttentionCache>,
    representation: Array1<f64>,
    head: HeadCache,
}

impl Network {
    fn build(config: &ModelConfig, extractor: &dyn SpatialExtractor) -> Result<Network> {
        let resolution = (config.resolution[0], config.resolution[1]);
        if extractor.resolution() != resolution {
            return Err(Error::config(format!(
                "extractor expects {:?}, model declares {:?}",
                extractor.resolution(),
                resolution
            )));
        }
        if !(0.0..1.0).contains(&config.head.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        let kind = config.kind;
        let spatial_dim = extractor.spatial_dim();
        let mut layout = ParamLayout::default();

        let (extractor_grid, freq_grid, patch_size) = if kind.is_patch_model() {
            let eg = extractor
                .patch_grid()
                .ok_or_else(|| Error::config(format!("{kind} needs a per-patch spatial extractor")))?;
            let p = config.patch_size;
            if p == 0 || !resolution.0.is_multiple_of(p) || !resolution.1.is_multiple_of(p) {
                return Err(Error::config(format!(
                    "image of H={}, W={} cannot be tiled by patches of p={p}",
                    resolution.0, resolution.1
                )));
            }
            let fg = (resolution.0 / p, resolution.1 / p);
            if !fg.0.is_multiple_of(eg.0) || !fg.1.is_multiple_of(eg.1) {
                return Err(Error::config(format!(
                    "frequency patch grid {}x{} (P={}) cannot be pooled onto the extractor grid {}x{} (P={})",
                    fg.0,
                    fg.1,
                    fg.0 * fg.1,
                    eg.0,
                    eg.1,
                    eg.0 * eg.1
                )));
            }
            (eg, fg, p)
        } else {
            ((1, 1), (1, 1), resolution.0.max(resolution.1))
        };

        let encoder = if kind.has_frequency_branch() {
            let input = if kind.is_patch_model() {
                (patch_size, patch_size)
            } else {
                resolution
            };
            let enc = &config.encoder;
            Some(match enc.kind {
                EncoderKind::LogMagnitudeMean => {
                    if enc.freq_dim != 1 {
                        return Err(Error::config("log_magnitude_mean encoder has freq_dim = 1"));
                    }
                    FrequencyEncoder::LogMagnitudeMean {
                        rows: input.0,
                        cols: input.1,
                    }
                }
                EncoderKind::Conv => {
                    if enc.freq_dim == 0 || enc.channels == 0 || enc.kernel.is_multiple_of(2) || enc.pool_grid == 0 {
                        return Err(Error::config(
                            "conv encoder needs freq_dim >= 1, channels >= 1, pool_grid >= 1 and an odd kernel",
                        ));
                    }
                    FrequencyEncoder::Conv(ConvEncoder::new(
                        &mut layout,
                        input.0,
                        input.1,
                        enc.channels,
                        enc.kernel,
                        enc.pool_grid,
                        enc.freq_dim,
                        enc.magnitude,
                    ))
                }
            })
        } else {
            None
        };
        let freq_dim = encoder.as_ref().map_or(0, FrequencyEncoder::dim);
        let fused = spatial_dim + freq_dim;

        let mut aggregator = None;
        let mut attention = None;
        let head_input = match kind {
            ModelKind::Sfpnet => {
                let d = config.aggregator_dim.unwrap_or(fused);
                if d == 0 {
                    return Err(Error::config("aggregator_dim must be positive"));
                }
                aggregator = Some(Linear::new(&mut layout, "aggregator", fused, d));
                d
            }
            ModelKind::Swinatten => {
                let h = config.attention_heads;
                if h == 0 || !fused.is_multiple_of(h) {
                    return Err(Error::config(format!(
                        "{h} attention heads do not divide the fused width {fused}"
                    )));
                }
                attention = Some(SelfAttention::new(&mut layout, fused, h));
                fused
            }
            _ => fused,
        };
        let hidden = config.head.hidden.unwrap_or(head_input.div_ceil(2)).max(1);
        let head = ClassificationHead::new(&mut layout, head_input, hidden, config.head.dropout);

        Ok(Network {
            kind,
            spatial_dim,
            num_patches: extractor_grid.0 * extractor_grid.1,
            extractor_grid,
            freq_grid,
            patch_size,
            encoder,
            aggregator,
            attention,
            head,
            layout,
        })
    }

    fn freq_dim(&self) -> usize {
        self.encoder.as_ref().map_or(0, FrequencyEncoder::dim)
    }

    /// Averages frequency features from the FFT grid onto the extractor grid.
    fn pool_freq(&self, f: &Array2<f64>) -> Array2<f64> {
        if self.freq_grid == self.extractor_grid {
            return f.clone();
        }
        let (fr, fc) = (
            self.freq_grid.0 / self.extractor_grid.0,
            self.freq_grid.1 / self.extractor_grid.1,
        );
        let mut out = Array2::zeros((self.num_patches, f.ncols()));
        for (k, row) in f.rows().into_iter().enumerate() {
            let (r, c) = (k / self.freq_grid.1, k % self.freq_grid.1);
            let e = (r / fr) * self.extractor_grid.1 + c / fc;
            let mut dst = out.row_mut(e);
            dst.scaled_add(1.0 / (fr * fc) as f64, &row);
        }
        out
    }

    fn unpool_freq(&self, d: &Array2<f64>) -> Array2<f64> {
        if self.freq_grid == self.extractor_grid {
            return d.clone();
        }
        let (fr, fc) = (
            self.freq_grid.0 / self.extractor_grid.0,
            self.freq_grid.1 / self.extractor_grid.1,
        );
        let n = self.freq_grid.0 * self.freq_grid.1;
        Array2::from_shape_fn((n, d.ncols()), |(k, j)| {
            let (r, c) = (k / self.freq_grid.1, k % self.freq_grid.1);
            d[[(r / fr) * self.extractor_grid.1 + c / fc, j]] / (fr * fc) as f64
        })
    }

    fn forward(
        &self,
        p: &[f64],
        input: &Prepared,
        ablated: bool,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(f64, SampleCache)> {
        let mut enc_caches = Vec::new();
        let freq = match &self.encoder {
            Some(enc) => {
                let mut rows = Vec::with_capacity(input.spectra.len());
                for spec in &input.spectra {
                    let (f, cache) = enc.forward(p, spec)?;
                    rows.push(if ablated { Array1::zeros(f.len()) } else { f });
                    enc_caches.push(cache);
                }
                let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
                Some(ndarray::stack(Axis(0), &views).expect("uniform encoder output"))
            }
            None => None,
        };

        let fused = match self.kind {
            ModelKind::Sfnet => {
                let s = input.spatial.mean_axis(Axis(0)).expect("non-empty");
                let f = freq.expect("sfnet has an encoder");
                concatenate(Axis(0), &[s.view(), f.row(0)])
                    .expect("1-d concat")
                    .insert_axis(Axis(0))
            }
            ModelKind::Sfpnet | ModelKind::Swinatten => {
                let f = self.pool_freq(&freq.expect("patch model has an encoder"));
                concatenate(Axis(1), &[input.spatial.view(), f.view()]).expect("same patch count")
            }
            ModelKind::Swinfusion | ModelKind::FacecropPair => input
                .spatial
                .mean_axis(Axis(0))
                .expect("non-empty")
                .insert_axis(Axis(0)),
        };

        let mut agg = None;
        let mut attn_cache = None;
        let representation = match self.kind {
            ModelKind::Sfpnet => {
                let m = fused.mean_axis(Axis(0)).expect("non-empty");
                let pre = self
                    .aggregator
                    .as_ref()
                    .expect("sfpnet aggregator")
                    .forward_vec(p, m.view());
                let rep = pre.mapv(gelu);
                agg = Some((m, pre));
                rep
            }
            ModelKind::Swinatten => {
                let (y, cache) = self
                    .attention
                    .as_ref()
                    .expect("swinatten attention")
                    .forward(p, fused.view());
                attn_cache = Some(cache);
                y.mean_axis(Axis(0)).expect("non-empty")
            }
            _ => fused.row(0).to_owned(),
        };
        let (logit, head) = self.head.forward(p, representation.view(), rng);
        Ok((
            logit,
            SampleCache {
                enc: enc_caches,
                fused,
                agg,
                attn: attn_cache,
                representation,
                head,
            },
        ))
    }

    fn backward(&self, p: &[f64], cache: &SampleCache, dlogit: f64, ablated: bool, g: &mut [f64]) {
        let drep = self.head.backward(p, &cache.head, dlogit, g);
        if !self.kind.has_frequency_branch() {
            return;
        }
        let tokens = cache.fused.nrows();
        let dfused: Array2<f64> = match self.kind {
            ModelKind::Sfpnet => {
                let (m, pre) = cache.agg.as_ref().expect("sfpnet cache");
                let dpre = &drep * &pre.mapv(gelu_grad);
                let dm = self
                    .aggregator
                    .as_ref()
                    .expect("aggregator")
                    .backward_vec(p, m.view(), dpre.view(), g);
                let row = dm / tokens as f64;
                Array2::from_shape_fn((tokens, row.len()), |(_, j)| row[j])
            }
            ModelKind::Swinatten => {
                let row = &drep / tokens as f64;
                let dy = Array2::from_shape_fn((tokens, row.len()), |(_, j)| row[j]);
                let attn = self.attention.as_ref().expect("attention");
                attn.backward(p, cache.attn.as_ref().expect("attention cache"), dy.view(), g)
            }
            _ => drep.insert_axis(Axis(0)),
        };
        if ablated {
            return;
        }
        let Some(enc) = &self.encoder else { return };
        let dfreq = dfused.slice(s![.., self.spatial_dim..]).to_owned();
        let dfreq = if self.kind.is_patch_model() {
            self.unpool_freq(&dfreq)
        } else {
            dfreq
        };
        for (k, ec) in cache.enc.iter().enumerate() {
            enc.backward(p, ec, &dfreq.row(k).to_owned(), g);
        }
    }
}

/// A model architecture with its frozen extractor and (optionally loaded)
/// trainable weights.
#[derive(Clone)]
pub struct ModelBundle {
    config: ModelConfig,
    extractor: Arc<dyn SpatialExtractor>,
    net: Network,
    params: Option<Vec<f64>>,
    freq_ablated: bool,
}

impl fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelBundle")
            .field("kind", &self.config.kind)
            .field("extractor", &self.extractor.name())
            .field("dims", &self.dims())
            .field("loaded", &self.params.is_some())
            .finish()
    }
}

/// Intermediate tensors of a batch forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[B, T, D]` where `T` is `P` for the patch models and 1 otherwise.
    pub fused: Array3<f64>,
    /// `[B, head_input]`
    pub representation: Array2<f64>,
    pub scores: Vec<Score>,
}

impl ModelBundle {
    pub fn new(config: ModelConfig) -> Result<ModelBundle> {
        let extractor = config.extractor.build((config.resolution[0], config.resolution[1]))?;
        Self::with_extractor(config, extractor)
    }

    pub fn with_extractor(config: ModelConfig, extractor: Arc<dyn SpatialExtractor>) -> Result<ModelBundle> {
        let net = Network::build(&config, extractor.as_ref())?;
        Ok(ModelBundle {
            config,
            extractor,
            net,
            params: None,
            freq_ablated: false,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn name(&self) -> &'static str {
        self.config.kind.as_str()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn extractor(&self) -> &Arc<dyn SpatialExtractor> {
        &self.extractor
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.net.layout
    }

    pub fn head(&self) -> &ClassificationHead {
        &self.net.head
    }

    pub fn encoder(&self) -> Option<&FrequencyEncoder> {
        self.net.encoder.as_ref()
    }

    pub fn attention(&self) -> Option<&SelfAttention> {
        self.net.attention.as_ref()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.config.resolution[0], self.config.resolution[1])
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            num_patches: self.net.num_patches,
            spatial_dim: self.net.spatial_dim,
            freq_dim: self.net.freq_dim(),
            patch_size: self.net.patch_size,
            head_input: self.net.head.hidden.input,
        }
    }

    pub fn num_params(&self) -> usize {
        self.net.layout.len()
    }

    pub fn is_loaded(&self) -> bool {
        self.params.is_some()
    }

    pub fn params(&self) -> Result<&[f64]> {
        self.params
            .as_deref()
            .ok_or_else(|| Error::State(format!("{} weights are not loaded", self.name())))
    }

    pub fn params_mut(&mut self) -> Result<&mut [f64]> {
        let name = self.name();
        self.params
            .as_deref_mut()
            .ok_or_else(|| Error::State(format!("{name} weights are not loaded")))
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Consistency(format!(
                "{} expects {} parameters, got {}",
                self.name(),
                self.num_params(),
                params.len()
            )));
        }
        self.params = Some(params);
        Ok(())
    }

    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params = Some(self.net.layout.init(&mut rng));
    }

    /// Zeroes every classification-head parameter.
    pub fn zero_head(&mut self) -> Result<()> {
        let range = self.net.head.param_range();
        self.params_mut()?[range].iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }

    /// Forces the frequency encoder output to zero (and stops its gradient).
    pub fn set_frequency_ablation(&mut self, ablated: bool) {
        self.freq_ablated = ablated;
    }

    pub fn frequency_ablated(&self) -> bool {
        self.freq_ablated
    }

    pub fn prepare(&self, sample: &ImageSample) -> Result<Prepared> {
        let spatial = self.extractor.extract(sample)?;
        let spectra = if self.kind().has_frequency_branch() {
            let lum = extractor::checked_luminance(sample, self.resolution())?;
            if self.kind().is_patch_model() {
                per_patch_spectra(lum.view(), self.net.patch_size)?.patches
            } else {
                vec![fft_magnitude_phase(lum.view())?]
            }
        } else {
            Vec::new()
        };
        Ok(Prepared { spatial, spectra })
    }

    fn sample_forward(&self, sample: &ImageSample, rng: Option<&mut dyn RngCore>) -> Result<(f64, SampleCache)> {
        let p = self.params()?;
        let input = self.prepare(sample)?;
        self.net.forward(p, &input, self.freq_ablated, rng)
    }

    /// Evaluation-mode logits, order-aligned with `batch`.
    pub fn logits(&self, batch: &[ImageSample]) -> Result<Vec<f64>> {
        self.params()?;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        batch
            .par_iter()
            .map(|s| self.sample_forward(s, None).map(|(z, _)| z))
            .collect()
    }

    /// Evaluation-mode scores in `(0, 1)`.
    pub fn forward(&self, batch: &[ImageSample]) -> Result<Vec<Score>> {
        self.logits(batch)?
            .into_iter()
            .map(|z| Score::new(nn::probability(z)))
            .collect()
    }

    pub fn score_one(&self, sample: &ImageSample) -> Result<f64> {
        let (z, _) = self.sample_forward(sample, None)?;
        Ok(nn::probability(z))
    }

    pub fn trace(&self, batch: &[ImageSample]) -> Result<ForwardTrace> {
        self.params()?;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let caches = batch
            .par_iter()
            .map(|s| self.sample_forward(s, None))
            .collect::<Result<Vec<_>>>()?;
        let fused: Vec<_> = caches.iter().map(|(_, c)| c.fused.view()).collect();
        let reps: Vec<_> = caches.iter().map(|(_, c)| c.representation.view()).collect();
        Ok(ForwardTrace {
            fused: ndarray::stack(Axis(0), &fused).expect("uniform"),
            representation: ndarray::stack(Axis(0), &reps).expect("uniform"),
            scores: caches
                .iter()
                .map(|(z, _)| Score::new(nn::probability(*z)))
                .collect::<Result<_>>()?,
        })
    }

    /// Frequency features of one spectrum with the current weights.
    pub fn encode_frequency(&self, spectrum: &FrequencySpectrum) -> Result<Array1<f64>> {
        let enc = self
            .encoder()
            .ok_or_else(|| Error::config(format!("{} has no frequency branch", self.name())))?;
        encode_frequency(enc, self.params()?, spectrum)
    }

    /// Mean binary cross-entropy in evaluation mode.
    pub fn loss(&self, batch: &[ImageSample]) -> Result<f64> {
        let logits = self.logits(batch)?;
        let mut total = 0.0;
        for (z, s) in logits.iter().zip(batch) {
            total += nn::bce_with_logit(*z, s.require_label()?.target());
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean binary cross-entropy and its gradient with respect to every
    /// trainable parameter. Dropout is active iff `rng` is given.
    pub fn loss_and_grad(&self, batch: &[ImageSample], rng: Option<&mut dyn RngCore>) -> Result<(f64, Vec<f64>)> {
        let p = self.params()?;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let seeds: Option<Vec<u64>> = rng.map(|r| batch.iter().map(|_| r.next_u64()).collect());
        let n = batch.len() as f64;
        let per_sample = batch
            .par_iter()
            .enumerate()
            .map(|(i, sample)| {
                let target = sample.require_label()?.target();
                let mut local = seeds.as_ref().map(|s| ChaCha8Rng::seed_from_u64(s[i]));
                let input = self.prepare(sample)?;
                let (z, cache) = self.net.forward(
                    p,
                    &input,
                    self.freq_ablated,
                    local.as_mut().map(|r| r as &mut dyn RngCore),
                )?;
                let mut g = vec![0.0; p.len()];
                let dlogit = (nn::sigmoid(z) - target) / n;
                self.net.backward(p, &cache, dlogit, self.freq_ablated, &mut g);
                Ok((nn::bce_with_logit(z, target), g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grad = vec![0.0; p.len()];
        let mut loss = 0.0;
        for (l, g) in per_sample {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok((loss / n, grad))
    }
}

fn require_kind(model: &ModelBundle, kind: ModelKind) -> Result<()> {
    if model.kind() != kind {
        return Err(Error::config(format!("expected a {kind} model, got {}", model.kind())));
    }
    Ok(())
}

pub fn sfnet_forward(model: &ModelBundle, batch: &[ImageSample]) -> Result<Vec<Score>> {
    require_kind(model, ModelKind::Sfnet)?;
    model.forward(batch)
}

pub fn sfpnet_forward(model: &ModelBundle, batch: &[ImageSample]) -> Result<Vec<Score>> {
    require_kind(model, ModelKind::Sfpnet)?;
    model.forward(batch)
}

pub fn swinatten_forward(model: &ModelBundle, batch: &[ImageSample]) -> Result<Vec<Score>> {
    require_kind(model, ModelKind::Swinatten)?;
    model.forward(batch)
}
