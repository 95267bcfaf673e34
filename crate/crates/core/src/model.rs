//! Light field models: the baseline network on encoded ray coordinates, the
//! feature and local-affine ray-space embeddings, and the subdivided variant
//! that evaluates one local light field per crossed voxel and
//! over-composites the results.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{Encoder, PosEncConfig};
use crate::geometry::{
    to_two_plane, Camera, GeometryError, LocalRayCoords, Ray, RayCoords4D, TwoPlaneParam, VoxelGrid,
};
use crate::image::Image;
use crate::net::{ForwardCache, Mlp, MlpShape, NetError};
use crate::Real;

/// Squared-norm guard added inside embedding normalizations while training.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("embedding collapsed: pre-normalization norm {0:e} is below 1e-8")]
    DegenerateEmbedding(f64),
    #[error("samples are not sorted by entry_t (index {0})")]
    UnsortedSamples(usize),
    #[error("operation needs embedding kind {expected}, model has {actual}")]
    WrongEmbedding { expected: &'static str, actual: EmbeddingKind },
    #[error("operation requires a model {0} a subdivision grid")]
    Subdivision(&'static str),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    None,
    Feature(usize),
    Affine(usize),
}

impl EmbeddingKind {
    pub fn latent_dim(&self) -> Option<usize> {
        match *self {
            EmbeddingKind::None => None,
            EmbeddingKind::Feature(n) | EmbeddingKind::Affine(n) => Some(n),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingKind::None => "none",
            EmbeddingKind::Feature(_) => "feature",
            EmbeddingKind::Affine(_) => "affine",
        }
    }

    /// Width of the embedding network's output layer.
    fn embed_output_dim(&self) -> Option<usize> {
        match *self {
            EmbeddingKind::None => None,
            EmbeddingKind::Feature(n) => Some(n),
            EmbeddingKind::Affine(n) => Some(5 * n),
        }
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.latent_dim() {
            None => write!(f, "none"),
            Some(n) => write!(f, "{}:{n}", self.name()),
        }
    }
}

impl FromStr for EmbeddingKind {
    type Err = String;

    /// Accepts `none`, `feature`, `affine`, or `feature:N` / `affine:N`
    /// (latent dimension defaults to 32).
    fn from_str(s: &str) -> Result<Self, String> {
        let (name, n) = match s.split_once(':') {
            Some((name, n)) => (name, n.parse::<usize>().map_err(|e| format!("bad latent dim: {e}"))?),
            None => (s, 32),
        };
        if n == 0 {
            return Err("latent dimension must be >= 1".into());
        }
        match name {
            "none" => Ok(EmbeddingKind::None),
            "feature" => Ok(EmbeddingKind::Feature(n)),
            "affine" => Ok(EmbeddingKind::Affine(n)),
            other => Err(format!("unknown embedding kind {other:?}")),
        }
    }
}

/// Hidden-layer layout of one network; input and output widths follow from
/// the rest of the model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub width: usize,
    pub depth: usize,
    pub skip_layer: Option<usize>,
}

impl NetSpec {
    /// `depth` layers of `width` units with the input re-injected halfway.
    pub fn new(width: usize, depth: usize) -> Self {
        Self { width, depth, skip_layer: (depth >= 2).then_some(depth / 2) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding: EmbeddingKind,
    pub param: TwoPlaneParam,
    pub embed_net: NetSpec,
    pub color_net: NetSpec,
    /// Encoding of ray coordinates fed to the color network (kind none).
    pub ray_pe: PosEncConfig,
    /// Encoding of the embedded latent vector.
    pub latent_pe: PosEncConfig,
    /// Encoding of the normalized voxel centre (subdivided models only).
    pub voxel_pe: PosEncConfig,
    /// Encoding of the ray coordinates fed to the embedding network. The
    /// default (no bands, input included) passes the raw coordinates.
    pub embed_input_pe: PosEncConfig,
    pub grid: Option<VoxelGrid>,
    pub background: [f64; 3],
}

impl ModelConfig {
    pub fn new(embedding: EmbeddingKind, bands: usize) -> Self {
        Self {
            embedding,
            param: TwoPlaneParam::desk_default(),
            embed_net: NetSpec::new(128, 4),
            color_net: NetSpec::new(128, 4),
            ray_pe: PosEncConfig::new(bands, true),
            latent_pe: PosEncConfig::new(bands, true),
            voxel_pe: PosEncConfig::new(bands, true),
            embed_input_pe: PosEncConfig::new(0, true),
            grid: None,
            background: [0.0; 3],
        }
    }

    fn voxel_dim(&self) -> usize {
        self.grid.map_or(0, |_| self.voxel_pe.output_dim(3))
    }

    pub fn embed_shape(&self) -> Option<MlpShape> {
        let out = self.embedding.embed_output_dim()?;
        Some(MlpShape {
            input_dim: self.embed_input_pe.output_dim(4) + self.voxel_dim(),
            output_dim: out,
            width: self.embed_net.width,
            depth: self.embed_net.depth,
            skip_layer: self.embed_net.skip_layer,
        })
    }

    pub fn color_shape(&self) -> MlpShape {
        let feat = match self.embedding.latent_dim() {
            None => self.ray_pe.output_dim(4),
            Some(n) => self.latent_pe.output_dim(n),
        };
        MlpShape {
            input_dim: feat + self.voxel_dim(),
            output_dim: if self.grid.is_some() { 4 } else { 3 },
            width: self.color_net.width,
            depth: self.color_net.depth,
            skip_layer: self.color_net.skip_layer,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embedding.latent_dim() == Some(0) {
            return Err(ModelError::InvalidConfig("latent dimension must be >= 1".into()));
        }
        if let Some(s) = self.embed_shape() {
            s.validate()?;
        }
        self.color_shape().validate()?;
        Ok(())
    }
}

/// Training uses a soft norm guard; inference rejects collapsed embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Per-ray output of a subdivided model for one voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelSample {
    pub color: [f64; 3],
    pub alpha: f64,
    pub voxel_index: usize,
    pub entry_t: f64,
}

/// One network input row: model-space ray coordinates and the voxel they
/// belong to (0 for flat models).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSample {
    pub voxel: usize,
    pub coords: [f64; 4],
}

/// Samples of many rays packed into one matrix; ray `r` owns rows
/// `offsets[r]..offsets[r + 1]`, ordered front to back.
#[derive(Debug, Clone)]
pub struct SampleBatch<F> {
    pub coords: Array2<F>,
    pub voxels: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl<F: Real> SampleBatch<F> {
    pub fn from_rays<'a>(rays: impl IntoIterator<Item = &'a [LocalSample]>) -> Self {
        let mut flat = Vec::new();
        let mut voxels = Vec::new();
        let mut offsets = vec![0];
        for samples in rays {
            for s in samples {
                flat.extend(s.coords.iter().map(|&c| F::of(c)));
                voxels.push(s.voxel);
            }
            offsets.push(voxels.len());
        }
        let coords = Array2::from_shape_vec((voxels.len(), 4), flat).expect("4 coords per sample");
        Self { coords, voxels, offsets }
    }

    pub fn num_rays(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_samples(&self) -> usize {
        self.voxels.len()
    }
}

struct EmbedPass<F> {
    cache: ForwardCache<F>,
    out: Array2<F>,
    /// Guarded norm of `f` (feature) or `A` (affine) per sample.
    norms: Vec<F>,
    /// `tanh` biases (affine only).
    bias: Array2<F>,
    latent: Array2<F>,
}

/// Everything the reverse pass needs from a batched forward evaluation.
pub struct BatchForward<F> {
    embed: Option<EmbedPass<F>>,
    color_cache: ForwardCache<F>,
    /// Sigmoid RGB per sample.
    rgb: Array2<F>,
    /// Sigmoid alpha per sample (subdivided only).
    alpha: Vec<F>,
    coords: Array2<F>,
    offsets: Vec<usize>,
    /// Composited (or direct) color per ray.
    pub colors: Array2<F>,
}

impl<F: Real> BatchForward<F> {
    pub fn num_samples(&self) -> usize {
        self.rgb.nrows()
    }

    /// Per-sample colors and alphas (alphas are 1 for flat models).
    pub fn sample_outputs(&self) -> (ArrayView2<'_, F>, &[F]) {
        (self.rgb.view(), &self.alpha)
    }

    /// ReLU on/off pattern of both networks; finite-difference checks
    /// discard perturbations that change it.
    pub fn activation_pattern(&self, model: &LightFieldModel<F>) -> Vec<bool> {
        let mut out = match (&self.embed, &model.embed_net) {
            (Some(e), Some(net)) => e.cache.activation_pattern(&net.shape),
            _ => Vec::new(),
        };
        out.extend(self.color_cache.activation_pattern(&model.color_net.shape));
        out
    }
}

/// Parameter gradients for both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<F> {
    pub embed: Option<Mlp<F>>,
    pub color: Mlp<F>,
}

impl<F: Real> ModelGrads<F> {
    pub fn sum_sq(&self) -> f64 {
        self.color.sum_sq() + self.embed.as_ref().map_or(0.0, Mlp::sum_sq)
    }

    pub fn scale(&mut self, s: F) {
        self.color.scale(s);
        if let Some(e) = self.embed.as_mut() {
            e.scale(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.color.all_finite() && self.embed.as_ref().is_none_or(Mlp::all_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderedRay {
    pub color: [f64; 3],
    pub color_evals: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderStats {
    pub color_evals: usize,
    pub embed_evals: usize,
    pub rays: usize,
    pub seconds: f64,
}

impl RenderStats {
    pub fn evals_per_ray(&self) -> f64 {
        if self.rays == 0 {
            0.0
        } else {
            self.color_evals as f64 / self.rays as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct LightFieldModel<F> {
    pub config: ModelConfig,
    pub embed_net: Option<Mlp<F>>,
    pub color_net: Mlp<F>,
    ray_enc: Encoder<F>,
    latent_enc: Encoder<F>,
    embed_in_enc: Encoder<F>,
    /// Encoded normalized centre of every voxel, one row per voxel.
    voxel_table: Array2<F>,
}

impl<F: Real> LightFieldModel<F> {
    /// Glorot-initialized networks; the embedding and color networks use
    /// independent streams derived from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let embed_seed = seed.wrapping_mul(2).wrapping_add(1);
        let mut embed_net = config.embed_shape().map(|s| Mlp::init(s, embed_seed)).transpose()?;
        if let Some(net) = embed_net.as_mut() {
            // With all-zero biases the origin ray would embed to the zero
            // vector; a small random output bias keeps fresh models usable.
            let mut rng = ChaCha8Rng::seed_from_u64(embed_seed ^ 0x5eed_b1a5);
            let out = net.layers.last_mut().expect("output layer");
            out.bias.mapv_inplace(|_| F::of(rng.random_range(-0.1..0.1)));
        }
        let color_net = Mlp::init(config.color_shape(), seed.wrapping_mul(2))?;
        Self::from_parts(config, embed_net, color_net)
    }

    pub fn from_parts(
        config: ModelConfig,
        embed_net: Option<Mlp<F>>,
        color_net: Mlp<F>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if embed_net.as_ref().map(|m| m.shape) != config.embed_shape() {
            return Err(ModelError::InvalidConfig("embedding network does not match config".into()));
        }
        if color_net.shape != config.color_shape() {
            return Err(ModelError::InvalidConfig("color network does not match config".into()));
        }
        let voxel_table = match config.grid {
            None => Array2::zeros((0, 0)),
            Some(grid) => {
                let enc = Encoder::<F>::new(config.voxel_pe);
                let dim = enc.output_dim(3);
                let mut t = Array2::zeros((grid.num_voxels(), dim));
                for (i, mut row) in t.rows_mut().into_iter().enumerate() {
                    let p = grid.normalized_center(i).map(F::of);
                    enc.encode_into(&p, row.as_slice_mut().expect("contiguous row"));
                }
                t
            }
        };
        Ok(Self {
            ray_enc: Encoder::new(config.ray_pe),
            latent_enc: Encoder::new(config.latent_pe),
            embed_in_enc: Encoder::new(config.embed_input_pe),
            config,
            embed_net,
            color_net,
            voxel_table,
        })
    }

    pub fn cast<G: Real>(&self) -> LightFieldModel<G> {
        LightFieldModel::from_parts(
            self.config.clone(),
            self.embed_net.as_ref().map(Mlp::cast),
            self.color_net.cast(),
        )
        .expect("shapes unchanged by cast")
    }

    pub fn num_params(&self) -> usize {
        self.color_net.num_params() + self.embed_net.as_ref().map_or(0, Mlp::num_params)
    }

    /// Sets the easing position of the ray and latent encodings as a
    /// fraction of their band counts.
    pub fn set_ease(&mut self, fraction: f64) {
        let f = fraction.clamp(0.0, 1.0);
        self.config.ray_pe = self.config.ray_pe.with_progress(f * self.config.ray_pe.num_bands as f64);
        self.config.latent_pe =
            self.config.latent_pe.with_progress(f * self.config.latent_pe.num_bands as f64);
        self.ray_enc = Encoder::new(self.config.ray_pe);
        self.latent_enc = Encoder::new(self.config.latent_pe);
    }

    pub fn is_subdivided(&self) -> bool {
        self.config.grid.is_some()
    }

    /// Network input rows for one ray: its two-plane coordinates, or its
    /// local coordinates in every voxel it crosses (possibly none).
    pub fn ray_samples(&self, ray: &Ray) -> Result<Vec<LocalSample>, ModelError> {
        match &self.config.grid {
            None => {
                let c = to_two_plane(ray, &self.config.param)?;
                Ok(vec![LocalSample { voxel: 0, coords: c.to_array() }])
            }
            Some(grid) => grid
                .voxels_intersected(ray)
                .into_iter()
                .map(|hit| {
                    let l = grid.localize(hit.index, ray)?;
                    Ok(LocalSample { voxel: hit.index, coords: l.coords.to_array() })
                })
                .collect(),
        }
    }

    fn embed_pass(&self, batch: &SampleBatch<F>, mode: Mode) -> Result<Option<EmbedPass<F>>, ModelError> {
        let Some(net) = &self.embed_net else { return Ok(None) };
        let n_s = batch.num_samples();
        let rd = self.embed_in_enc.output_dim(4);
        let mut input = Array2::zeros((n_s, net.shape.input_dim));
        for (i, mut row) in input.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("contiguous row");
            let r = batch.coords.row(i);
            self.embed_in_enc.encode_into(r.as_slice().expect("contiguous"), &mut row[..rd]);
            if self.is_subdivided() {
                row[rd..].copy_from_slice(self.voxel_table.row(batch.voxels[i]).as_slice().expect("row"));
            }
        }
        let (out, cache) = net.forward(input.view())?;
        let n = self.config.embedding.latent_dim().expect("embedding present");
        let mut latent = Array2::zeros((n_s, n));
        let mut norms = Vec::with_capacity(n_s);
        let mut bias = Array2::zeros((0, n));
        let guard = |sq: F| -> Result<F, ModelError> {
            match mode {
                Mode::Train => Ok((sq + F::of(NORM_EPS)).sqrt()),
                Mode::Inference => {
                    let nrm = sq.sqrt();
                    if nrm.f64() < NORM_EPS {
                        Err(ModelError::DegenerateEmbedding(nrm.f64()))
                    } else {
                        Ok(nrm)
                    }
                }
            }
        };
        match self.config.embedding {
            EmbeddingKind::None => unreachable!(),
            EmbeddingKind::Feature(_) => {
                let scale = F::of((n as f64).sqrt());
                for i in 0..n_s {
                    let f = out.row(i);
                    let nrm = guard(f.dot(&f))?;
                    latent.row_mut(i).assign(&f.mapv(|v| scale * v / nrm));
                    norms.push(nrm);
                }
            }
            EmbeddingKind::Affine(_) => {
                let scale = F::of((4.0 * n as f64).sqrt());
                bias = out.slice(s![.., 4 * n..]).mapv(|v| v.tanh());
                for i in 0..n_s {
                    let a = out.slice(s![i, ..4 * n]);
                    let nrm = guard(a.dot(&a))?;
                    let r = batch.coords.row(i);
                    for k in 0..n {
                        let mut z = F::zero();
                        for j in 0..4 {
                            z += a[4 * k + j] * r[j];
                        }
                        latent[[i, k]] = scale * z / nrm + bias[[i, k]];
                    }
                    norms.push(nrm);
                }
            }
        }
        Ok(Some(EmbedPass { cache, out, norms, bias, latent }))
    }

    /// Batched forward pass over packed samples.
    pub fn forward_batch(&self, batch: &SampleBatch<F>, mode: Mode) -> Result<BatchForward<F>, ModelError> {
        let n_s = batch.num_samples();
        if !self.is_subdivided() && batch.offsets.windows(2).any(|w| w[1] - w[0] != 1) {
            return Err(ModelError::InvalidConfig("flat models take exactly one sample per ray".into()));
        }
        let embed = self.embed_pass(batch, mode)?;
        let shape = self.color_net.shape;
        let mut input = Array2::zeros((n_s, shape.input_dim));
        let vd = self.config.voxel_dim();
        let fd = shape.input_dim - vd;
        for (i, mut row) in input.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("contiguous row");
            match &embed {
                None => self.ray_enc.encode_into(batch.coords.row(i).as_slice().expect("row"), &mut row[..fd]),
                Some(e) => self.latent_enc.encode_into(e.latent.row(i).as_slice().expect("row"), &mut row[..fd]),
            }
            if vd > 0 {
                row[fd..].copy_from_slice(self.voxel_table.row(batch.voxels[i]).as_slice().expect("row"));
            }
        }
        let (out, color_cache) = self.color_net.forward(input.view())?;
        let rgb = out.slice(s![.., ..3]).mapv(sigmoid);
        let n_r = batch.num_rays();
        let mut colors = Array2::zeros((n_r, 3));
        let alpha: Vec<F>;
        if self.is_subdivided() {
            alpha = out.column(3).iter().map(|&v| sigmoid(v)).collect();
            let bg = self.config.background.map(F::of);
            for r in 0..n_r {
                let (lo, hi) = (batch.offsets[r], batch.offsets[r + 1]);
                let mut t = F::one();
                let mut c = [F::zero(); 3];
                for i in lo..hi {
                    let w = t * alpha[i];
                    for ch in 0..3 {
                        c[ch] += w * rgb[[i, ch]];
                    }
                    t = t * (F::one() - alpha[i]);
                }
                for ch in 0..3 {
                    colors[[r, ch]] = c[ch] + t * bg[ch];
                }
            }
        } else {
            alpha = vec![F::one(); n_s];
            colors.assign(&rgb);
        }
        Ok(BatchForward {
            embed,
            color_cache,
            rgb,
            alpha,
            coords: batch.coords.clone(),
            offsets: batch.offsets.clone(),
            colors,
        })
    }

    /// Reverse pass for `grad_colors = dLoss/dColor` (one row per ray).
    pub fn backward_batch(
        &self,
        fwd: &BatchForward<F>,
        grad_colors: ArrayView2<F>,
    ) -> Result<ModelGrads<F>, ModelError> {
        let n_s = fwd.num_samples();
        let n_r = fwd.colors.nrows();
        if grad_colors.dim() != (n_r, 3) {
            return Err(NetError::ShapeMismatch(format!(
                "color gradient {:?}, expected ({n_r}, 3)",
                grad_colors.dim()
            ))
            .into());
        }
        let shape = self.color_net.shape;
        let mut g_out = Array2::zeros((n_s, shape.output_dim));
        let one = F::one();
        if self.is_subdivided() {
            let bg = self.config.background.map(F::of);
            for r in 0..n_r {
                let (lo, hi) = (fwd.offsets[r], fwd.offsets[r + 1]);
                let g = [grad_colors[[r, 0]], grad_colors[[r, 1]], grad_colors[[r, 2]]];
                // transmittance in front of each sample
                let mut trans = Vec::with_capacity(hi - lo);
                let mut t = one;
                for i in lo..hi {
                    trans.push(t);
                    t = t * (one - fwd.alpha[i]);
                }
                // color composited behind the current sample
                let mut behind = bg;
                for i in (lo..hi).rev() {
                    let (a, ti) = (fwd.alpha[i], trans[i - lo]);
                    let mut ga = F::zero();
                    for ch in 0..3 {
                        let c = fwd.rgb[[i, ch]];
                        ga += g[ch] * ti * (c - behind[ch]);
                        g_out[[i, ch]] = g[ch] * ti * a * c * (one - c);
                        behind[ch] = a * c + (one - a) * behind[ch];
                    }
                    g_out[[i, 3]] = ga * a * (one - a);
                }
            }
        } else {
            for i in 0..n_s {
                for ch in 0..3 {
                    let c = fwd.rgb[[i, ch]];
                    g_out[[i, ch]] = grad_colors[[i, ch]] * c * (one - c);
                }
            }
        }
        let want_input = fwd.embed.is_some();
        let (color, g_in) = self.color_net.backward(&fwd.color_cache, g_out.view(), want_input)?;
        let embed = match (&fwd.embed, &self.embed_net) {
            (Some(e), Some(net)) => {
                let g_in = g_in.expect("input gradient requested");
                Some(self.embed_backward(e, net, &fwd.coords, g_in.view())?)
            }
            _ => None,
        };
        Ok(ModelGrads { embed, color })
    }

    fn embed_backward(
        &self,
        e: &EmbedPass<F>,
        net: &Mlp<F>,
        coords: &Array2<F>,
        g_color_in: ArrayView2<F>,
    ) -> Result<Mlp<F>, ModelError> {
        let n = self.config.embedding.latent_dim().expect("embedding present");
        let n_s = e.out.nrows();
        let fd = self.latent_enc.output_dim(n);
        let mut g_e = Array2::zeros(e.out.dim());
        let mut gz = vec![F::zero(); n];
        for i in 0..n_s {
            gz.fill(F::zero());
            let g_row = g_color_in.slice(s![i, ..fd]);
            let g_row = g_row.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| g_row.to_vec());
            self.latent_enc.backward_into(e.latent.row(i).as_slice().expect("row"), &g_row, &mut gz);
            let nrm = e.norms[i];
            match self.config.embedding {
                EmbeddingKind::None => unreachable!(),
                EmbeddingKind::Feature(_) => {
                    let f = e.out.row(i);
                    let scale = F::of((n as f64).sqrt());
                    let fg: F = (0..n).map(|k| f[k] * gz[k]).sum();
                    for k in 0..n {
                        g_e[[i, k]] = scale / nrm * (gz[k] - f[k] * fg / (nrm * nrm));
                    }
                }
                EmbeddingKind::Affine(_) => {
                    let scale = F::of((4.0 * n as f64).sqrt());
                    let a = e.out.slice(s![i, ..4 * n]);
                    let r = coords.row(i);
                    let mut ag = F::zero();
                    for k in 0..n {
                        for j in 0..4 {
                            ag += a[4 * k + j] * gz[k] * r[j];
                        }
                    }
                    for k in 0..n {
                        for j in 0..4 {
                            let gh = gz[k] * r[j];
                            g_e[[i, 4 * k + j]] = scale / nrm * (gh - a[4 * k + j] * ag / (nrm * nrm));
                        }
                        let b = e.bias[[i, k]];
                        g_e[[i, 4 * n + k]] = gz[k] * (F::one() - b * b);
                    }
                }
            }
        }
        Ok(net.backward(&e.cache, g_e.view(), false)?.0)
    }

    fn check_kind(&self, expected: &'static str) -> Result<(), ModelError> {
        if self.config.embedding.name() != expected {
            return Err(ModelError::WrongEmbedding { expected, actual: self.config.embedding });
        }
        Ok(())
    }

    fn embed_one(&self, sample: LocalSample) -> Result<Vec<f64>, ModelError> {
        let batch = SampleBatch::from_rays([std::slice::from_ref(&sample)]);
        let e = self.embed_pass(&batch, Mode::Inference)?.expect("embedding present");
        Ok(e.latent.row(0).iter().map(|v| v.f64()).collect())
    }

    /// Normalized feature embedding `sqrt(N) f / |f|` of a flat model's ray.
    pub fn embed_feature(&self, r: RayCoords4D) -> Result<Vec<f64>, ModelError> {
        self.check_kind("feature")?;
        self.embed_one(LocalSample { voxel: 0, coords: r.to_array() })
    }

    /// Local affine embedding `A r + b`; `voxel` is required for subdivided
    /// models, where `r` are the normalized local coordinates.
    pub fn embed_affine(&self, r: RayCoords4D, voxel: Option<usize>) -> Result<Vec<f64>, ModelError> {
        self.check_kind("affine")?;
        self.check_voxel(voxel)?;
        self.embed_one(LocalSample { voxel: voxel.unwrap_or(0), coords: r.to_array() })
    }

    /// Latent vector of any embedding kind (used for visualization).
    pub fn embed(&self, sample: LocalSample) -> Result<Vec<f64>, ModelError> {
        if self.embed_net.is_none() {
            return Err(ModelError::WrongEmbedding { expected: "feature or affine", actual: self.config.embedding });
        }
        self.embed_one(sample)
    }

    fn check_voxel(&self, voxel: Option<usize>) -> Result<(), ModelError> {
        match (&self.config.grid, voxel) {
            (Some(g), Some(v)) if v < g.num_voxels() => Ok(()),
            (Some(_), Some(v)) => Err(ModelError::InvalidConfig(format!("voxel {v} out of range"))),
            (Some(_), None) => Err(ModelError::Subdivision("without")),
            (None, _) => Ok(()),
        }
    }

    /// Color of a ray given by its two-plane coordinates (flat models).
    pub fn lf_forward(&self, r: RayCoords4D) -> Result<[f64; 3], ModelError> {
        if self.is_subdivided() {
            return Err(ModelError::Subdivision("without"));
        }
        let batch = SampleBatch::from_rays([&[LocalSample { voxel: 0, coords: r.to_array() }][..]]);
        let fwd = self.forward_batch(&batch, Mode::Inference)?;
        Ok(row3(&fwd.colors, 0))
    }

    /// Color and alpha of one local light field.
    pub fn lf_forward_local(&self, lrc: &LocalRayCoords) -> Result<VoxelSample, ModelError> {
        if !self.is_subdivided() {
            return Err(ModelError::Subdivision("with"));
        }
        self.check_voxel(Some(lrc.voxel_index))?;
        let sample = LocalSample { voxel: lrc.voxel_index, coords: lrc.coords.to_array() };
        let batch = SampleBatch::from_rays([std::slice::from_ref(&sample)]);
        let fwd = self.forward_batch(&batch, Mode::Inference)?;
        Ok(VoxelSample {
            color: row3(&fwd.rgb, 0),
            alpha: fwd.alpha[0].f64(),
            voxel_index: lrc.voxel_index,
            entry_t: lrc.entry_t,
        })
    }

    pub fn render_ray(&self, ray: &Ray) -> Result<RenderedRay, ModelError> {
        let samples = self.ray_samples(ray)?;
        let batch = SampleBatch::from_rays([samples.as_slice()]);
        let fwd = self.forward_batch(&batch, Mode::Inference)?;
        Ok(RenderedRay { color: row3(&fwd.colors, 0), color_evals: samples.len() })
    }

    /// Renders rays in fixed-size chunks; results do not depend on chunking.
    pub fn render_rays(&self, rays: &[Ray]) -> Result<(Vec<[f64; 3]>, RenderStats), ModelError> {
        const CHUNK: usize = 4096;
        let mut colors = Vec::with_capacity(rays.len());
        let mut stats = RenderStats { rays: rays.len(), ..Default::default() };
        for chunk in rays.chunks(CHUNK) {
            let samples = chunk.iter().map(|r| self.ray_samples(r)).collect::<Result<Vec<_>, _>>()?;
            let batch = SampleBatch::from_rays(samples.iter().map(Vec::as_slice));
            stats.color_evals += batch.num_samples();
            if self.embed_net.is_some() {
                stats.embed_evals += batch.num_samples();
            }
            let fwd = self.forward_batch(&batch, Mode::Inference)?;
            colors.extend((0..chunk.len()).map(|r| row3(&fwd.colors, r)));
        }
        Ok((colors, stats))
    }

    /// Renders a `width x height` view, splitting rows over `workers`
    /// threads. Output is identical for every worker count.
    pub fn render_image(
        &self,
        camera: &Camera,
        width: usize,
        height: usize,
        workers: usize,
    ) -> Result<(Image, RenderStats), ModelError>
    where
        F: Send + Sync,
    {
        let start = Instant::now();
        let rays: Vec<Ray> = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| camera.pixel_ray(x, y, width, height))
            .collect();
        let workers = workers.max(1).min(height.max(1));
        let rows_per = height.div_ceil(workers).max(1);
        let parts: Vec<Result<(Vec<[f64; 3]>, RenderStats), ModelError>> = if workers == 1 {
            vec![self.render_rays(&rays)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = rays
                    .chunks(rows_per * width.max(1))
                    .map(|chunk| scope.spawn(move || self.render_rays(chunk)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("render worker panicked")).collect()
            })
        };
        let mut image = Image::new(width, height);
        let mut stats = RenderStats::default();
        let mut i = 0;
        for part in parts {
            let (colors, st) = part?;
            stats.color_evals += st.color_evals;
            stats.embed_evals += st.embed_evals;
            stats.rays += st.rays;
            for c in colors {
                image.data[3 * i..3 * i + 3].copy_from_slice(&c.map(|v| v as f32));
                i += 1;
            }
        }
        stats.seconds = start.elapsed().as_secs_f64();
        Ok((image, stats))
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn row3<F: Real>(a: &Array2<F>, r: usize) -> [f64; 3] {
    [a[[r, 0]].f64(), a[[r, 1]].f64(), a[[r, 2]].f64()]
}

/// Front-to-back over-compositing weights `T_i alpha_i` and the residual
/// transmittance that multiplies the background.
pub fn composite_weights(alphas: &[f64]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let w = alphas
        .iter()
        .map(|&a| {
            let w = t * a;
            t *= 1.0 - a;
            w
        })
        .collect();
    (w, t)
}

/// Over-composites samples sorted by `entry_t` onto `background`.
pub fn composite(samples: &[VoxelSample], background: [f64; 3]) -> Result<[f64; 3], ModelError> {
    if let Some(i) = samples.windows(2).position(|w| w[1].entry_t < w[0].entry_t) {
        return Err(ModelError::UnsortedSamples(i + 1));
    }
    let alphas: Vec<f64> = samples.iter().map(|s| s.alpha).collect();
    let (weights, t_end) = composite_weights(&alphas);
    let mut c = background.map(|b| b * t_end);
    for (s, w) in samples.iter().zip(weights) {
        for ch in 0..3 {
            c[ch] += w * s.color[ch];
        }
    }
    Ok(c)
}
