//! Ray-batch optimization: sampling, MSE loss on composited colors, Adam
//! with an exponentially decaying learning rate, positional-encoding
//! easing, and held-out evaluation.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::progress_at;
use crate::image::Image;
use crate::metrics::{psnr, ssim, MetricsError, MetricsReport, ViewMetrics};
use crate::model::{LightFieldModel, LocalSample, Mode, ModelConfig, ModelError, SampleBatch};
use crate::net::{adam_step, AdamConfig, AdamState, NetError};
use crate::scenes::{LightFieldDataset, Split};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no training pixels")]
    EmptyDataset,
    #[error("split {0:?} has no views")]
    EmptySplit(Split),
    #[error("non-finite loss at iteration {iteration}: {diagnostics}")]
    NonFiniteLoss { iteration: u64, diagnostics: String },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub total_iters: u64,
    /// Iterations over which the encoding bands are eased in; 0 disables
    /// easing.
    pub ease_iters: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub seed: u64,
    /// Draw batches from a reshuffled permutation instead of with
    /// replacement.
    pub permutation: bool,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            batch_size: 1024,
            total_iters: 20_000,
            ease_iters: 8_000,
            lr_start: 5e-4,
            lr_end: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 10.0,
            seed: 0,
            permutation: false,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.ease_iters > self.total_iters {
            return Err(TrainError::InvalidConfig("ease_iters must not exceed total_iters".into()));
        }
        if self.lr_start < 0.0 || self.lr_end < 0.0 {
            return Err(TrainError::InvalidConfig("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    /// `lr_start * (lr_end / lr_start)^(iteration / total_iters)`.
    pub fn learning_rate(&self, iteration: u64) -> f64 {
        if self.lr_start == 0.0 {
            return 0.0;
        }
        let frac = if self.total_iters == 0 { 0.0 } else { (iteration as f64 / self.total_iters as f64).min(1.0) };
        self.lr_start * (self.lr_end / self.lr_start).powf(frac)
    }

    /// Fraction of the encoding bands open at `iteration`.
    pub fn ease_fraction(&self, iteration: u64) -> f64 {
        if self.ease_iters == 0 {
            1.0
        } else {
            progress_at(iteration, self.ease_iters, 1)
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr_start, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

/// Network inputs and targets of every training pixel, prepared once.
#[derive(Debug, Clone)]
pub struct TrainData {
    samples: Vec<LocalSample>,
    offsets: Vec<usize>,
    pub targets: Vec<[f32; 3]>,
}

impl TrainData {
    /// All pixels of the views in `split`.
    pub fn new<F: crate::Real>(
        model: &LightFieldModel<F>,
        ds: &LightFieldDataset,
        split: Split,
    ) -> Result<Self, TrainError> {
        let mut data = Self { samples: Vec::new(), offsets: vec![0], targets: Vec::new() };
        for v in ds.view_indices(split) {
            for y in 0..ds.height {
                for x in 0..ds.width {
                    data.samples.extend(model.ray_samples(&ds.ray(v, x, y))?);
                    data.offsets.push(data.samples.len());
                    data.targets.push(ds.color(v, x, y));
                }
            }
        }
        Ok(data)
    }

    pub fn from_parts(rays: Vec<Vec<LocalSample>>, targets: Vec<[f32; 3]>) -> Self {
        assert_eq!(rays.len(), targets.len());
        let mut data = Self { samples: Vec::new(), offsets: vec![0], targets };
        for r in rays {
            data.samples.extend(r);
            data.offsets.push(data.samples.len());
        }
        data
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn ray(&self, i: usize) -> &[LocalSample] {
        &self.samples[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Packs the given pixels into a network batch and target matrix.
    pub fn batch<F: crate::Real>(&self, indices: &[usize]) -> (SampleBatch<F>, Array2<F>) {
        let batch = SampleBatch::from_rays(indices.iter().map(|&i| self.ray(i)));
        let targets = Array2::from_shape_fn((indices.len(), 3), |(r, c)| F::of(self.targets[indices[r]][c] as f64));
        (batch, targets)
    }
}

/// Pixel-index sampler: uniform with replacement, or epoch permutations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampler {
    pub rng: ChaCha8Rng,
    pub permutation: Option<(Vec<u32>, usize)>,
}

impl Sampler {
    pub fn new(seed: u64, permutation: bool) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), permutation: permutation.then(|| (Vec::new(), 0)) }
    }

    /// `batch_size` pixel indices in `0..n`.
    pub fn sample(&mut self, n: usize, batch_size: usize) -> Result<Vec<usize>, TrainError> {
        if n == 0 {
            return Err(TrainError::EmptyDataset);
        }
        match &mut self.permutation {
            None => Ok((0..batch_size).map(|_| self.rng.random_range(0..n)).collect()),
            Some((perm, cursor)) => {
                let mut out = Vec::with_capacity(batch_size);
                while out.len() < batch_size {
                    if *cursor >= perm.len() || perm.len() != n {
                        *perm = (0..n as u32).collect();
                        perm.shuffle(&mut self.rng);
                        *cursor = 0;
                    }
                    out.push(perm[*cursor] as usize);
                    *cursor += 1;
                }
                Ok(out)
            }
        }
    }
}

/// Uniform with-replacement (or permutation-mode) batch of pixel indices
/// and their target colors.
pub fn sample_batch(
    data: &TrainData,
    sampler: &mut Sampler,
    batch_size: usize,
) -> Result<(Vec<usize>, Vec<[f32; 3]>), TrainError> {
    let idx = sampler.sample(data.len(), batch_size)?;
    let targets = idx.iter().map(|&i| data.targets[i]).collect();
    Ok((idx, targets))
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: LightFieldModel<f32>,
    pub adam_color: AdamState<f32>,
    pub adam_embed: Option<AdamState<f32>>,
    pub iteration: u64,
    pub sampler: Sampler,
    pub losses: Vec<f64>,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub progress: f64,
    pub evals_per_ray: f64,
    pub lr: f64,
}

impl StepStats {
    /// Line-oriented log record.
    pub fn log_line(&self) -> String {
        let psnr = if self.loss > 0.0 { -10.0 * self.loss.log10() } else { f64::INFINITY };
        format!(
            "iter {} loss {:.6e} psnr {:.3} progress {:.4} evals_per_ray {:.3} lr {:.3e}",
            self.iteration, self.loss, psnr, self.progress, self.evals_per_ray, self.lr
        )
    }
}

impl TrainState {
    /// Fresh model and optimizer. The model and the batch sampler draw
    /// from separate streams of `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = LightFieldModel::new(config.model.clone(), config.seed)?;
        let adam = config.adam();
        let adam_color = AdamState::new(&model.color_net, adam);
        let adam_embed = model.embed_net.as_ref().map(|m| AdamState::new(m, adam));
        let sampler = Sampler::new(config.seed ^ 0x9e37_79b9_7f4a_7c15, config.permutation);
        Ok(Self { config, model, adam_color, adam_embed, iteration: 0, sampler, losses: Vec::new() })
    }

    /// One optimization step on a freshly sampled batch.
    pub fn step(&mut self, data: &TrainData) -> Result<StepStats, TrainError> {
        let (idx, _) = sample_batch(data, &mut self.sampler, self.config.batch_size)?;
        self.step_on(data, &idx)
    }

    /// One optimization step on the given pixels.
    pub fn step_on(&mut self, data: &TrainData, idx: &[usize]) -> Result<StepStats, TrainError> {
        let it = self.iteration;
        let fraction = self.config.ease_fraction(it);
        self.model.set_ease(fraction);
        let (batch, targets) = data.batch::<f32>(idx);
        let (loss, grad_colors, fwd) = {
            let fwd = self.model.forward_batch(&batch, Mode::Train)?;
            let diff = &fwd.colors - &targets;
            let n = diff.len() as f64;
            let loss = diff.iter().map(|&d| (d as f64) * (d as f64)).sum::<f64>() / n;
            let grad = diff.mapv(|d| (2.0 * d as f64 / n) as f32);
            (loss, grad, fwd)
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration: it,
                diagnostics: format!(
                    "batch {} rays, params finite: color {} embed {}",
                    idx.len(),
                    self.model.color_net.all_finite(),
                    self.model.embed_net.as_ref().is_none_or(|m| m.all_finite())
                ),
            });
        }
        let mut grads = self.model.backward_batch(&fwd, grad_colors.view())?;
        let grad_norm = grads.sum_sq().sqrt();
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration: it,
                diagnostics: format!("loss {loss:e} but gradient norm is {grad_norm}"),
            });
        }
        if grad_norm > self.config.grad_clip {
            grads.scale((self.config.grad_clip / grad_norm) as f32);
        }
        let lr = self.config.learning_rate(it);
        self.adam_color.config.lr = lr;
        adam_step(&mut self.model.color_net, &grads.color, &mut self.adam_color)?;
        if let (Some(net), Some(g), Some(st)) = (self.model.embed_net.as_mut(), grads.embed.as_ref(), self.adam_embed.as_mut()) {
            st.config.lr = lr;
            adam_step(net, g, st)?;
        }
        self.iteration += 1;
        self.losses.push(loss);
        Ok(StepStats {
            iteration: it,
            loss,
            grad_norm,
            progress: fraction,
            evals_per_ray: batch.num_samples() as f64 / idx.len().max(1) as f64,
            lr,
        })
    }

    /// Runs until `config.total_iters`, calling `on_step` after each step.
    pub fn run(
        &mut self,
        data: &TrainData,
        mut on_step: impl FnMut(&TrainState, &StepStats) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while self.iteration < self.config.total_iters {
            let stats = self.step(data)?;
            on_step(self, &stats)?;
        }
        // leave the model fully eased for rendering
        self.model.set_ease(self.config.ease_fraction(self.iteration));
        Ok(())
    }
}

/// Full loss `mean((color - target)^2)` and its parameter gradients,
/// without an optimizer step. Used for gradient checking.
pub fn loss_and_grads<F: crate::Real>(
    model: &LightFieldModel<F>,
    batch: &SampleBatch<F>,
    targets: &Array2<F>,
) -> Result<(f64, crate::model::ModelGrads<F>), TrainError> {
    let fwd = model.forward_batch(batch, Mode::Train)?;
    let diff = &fwd.colors - targets;
    let n = F::of(diff.len() as f64);
    let loss = diff.iter().map(|&d| d * d).sum::<F>() / n;
    let grad = diff.mapv(|d| F::of(2.0) * d / n);
    let grads = model.backward_batch(&fwd, grad.view())?;
    Ok((loss.f64(), grads))
}

/// Renders one dataset view with its own camera.
pub fn render_view<F: crate::Real + Send + Sync>(
    model: &LightFieldModel<F>,
    ds: &LightFieldDataset,
    view: usize,
    workers: usize,
) -> Result<Image, TrainError> {
    Ok(model.render_image(&ds.views[view].camera, ds.width, ds.height, workers)?.0)
}

/// Renders every view of `split` and compares against the stored images.
pub fn evaluate<F: crate::Real + Send + Sync>(
    model: &LightFieldModel<F>,
    ds: &LightFieldDataset,
    split: Split,
    workers: usize,
) -> Result<MetricsReport, TrainError> {
    let views = ds.view_indices(split);
    if views.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let mut out = Vec::with_capacity(views.len());
    for v in views {
        let img = render_view(model, ds, v, workers)?;
        let gt = &ds.views[v].image;
        out.push(ViewMetrics { view: v, psnr: psnr(&img, gt)?, ssim: ssim(&img, gt)? });
    }
    let name = match split {
        Split::Train => "train",
        Split::Holdout => "holdout",
    };
    Ok(MetricsReport::new(name, out))
}
