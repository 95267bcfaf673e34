use std::path::Path;

use clap::Args;
use nelf::encoding::PosEncConfig;
use nelf::geometry::{TwoPlaneParam, Vec3, VoxelGrid};
use nelf::model::{EmbeddingKind, ModelConfig, NetSpec};
use nelf::train::TrainConfig;
use serde::Deserialize;

use crate::error::CliError;

/// Training settings shared by the TOML config file and the command line.
/// Precedence: built-in defaults < config file < flags.
#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainKnobs {
    /// Ray embedding: none, feature[:N], affine[:N].
    #[arg(long)]
    pub embedding: Option<String>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Positional-encoding bands for ray coordinates.
    #[arg(long)]
    pub bands: Option<usize>,
    /// Positional-encoding bands for the embedded latent vector.
    #[arg(long)]
    pub latent_bands: Option<usize>,
    /// Positional-encoding bands for the voxel centre (subdivided models).
    #[arg(long)]
    pub voxel_bands: Option<usize>,
    /// Hidden width of both networks.
    #[arg(long)]
    pub width: Option<usize>,
    /// Hidden layers of both networks.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Voxels per axis; 0 trains a single flat model.
    #[arg(long)]
    pub grid_res: Option<usize>,
    /// Subdivision box `xmin,ymin,zmin,xmax,ymax,zmax`.
    #[arg(long)]
    pub grid_box: Option<String>,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_end: Option<f64>,
    #[arg(long)]
    pub ease_iters: Option<u64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Evaluate the holdout split every this many iterations (0 = never).
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Save a checkpoint every this many iterations (0 = only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Sample batches from a shuffled permutation instead of with replacement.
    #[arg(long)]
    pub permutation: Option<bool>,
    #[arg(skip)]
    pub seed: Option<u64>,
}

pub const DEFAULT_EMBEDDING: &str = "affine:16";
pub const DEFAULT_ITERS: u64 = 3000;
pub const DEFAULT_BANDS: usize = 10;
pub const DEFAULT_LATENT_BANDS: usize = 6;
pub const DEFAULT_VOXEL_BANDS: usize = 2;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_GRID_BOX: [f64; 6] = [-2.0, -2.0, -0.6, 2.0, 2.0, 0.6];

impl TrainKnobs {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Fills every unset field of `self` from `lower`.
    pub fn over(self, lower: TrainKnobs) -> TrainKnobs {
        TrainKnobs {
            embedding: self.embedding.or(lower.embedding),
            iters: self.iters.or(lower.iters),
            batch_size: self.batch_size.or(lower.batch_size),
            bands: self.bands.or(lower.bands),
            latent_bands: self.latent_bands.or(lower.latent_bands),
            voxel_bands: self.voxel_bands.or(lower.voxel_bands),
            width: self.width.or(lower.width),
            depth: self.depth.or(lower.depth),
            grid_res: self.grid_res.or(lower.grid_res),
            grid_box: self.grid_box.or(lower.grid_box),
            lr_start: self.lr_start.or(lower.lr_start),
            lr_end: self.lr_end.or(lower.lr_end),
            ease_iters: self.ease_iters.or(lower.ease_iters),
            grad_clip: self.grad_clip.or(lower.grad_clip),
            eval_every: self.eval_every.or(lower.eval_every),
            checkpoint_every: self.checkpoint_every.or(lower.checkpoint_every),
            permutation: self.permutation.or(lower.permutation),
            seed: self.seed.or(lower.seed),
        }
    }

    pub fn build(&self, param: TwoPlaneParam) -> Result<TrainConfig, CliError> {
        let kind: EmbeddingKind = self
            .embedding
            .as_deref()
            .unwrap_or(DEFAULT_EMBEDDING)
            .parse()
            .map_err(|e| CliError::Usage(format!("--embedding: {e}")))?;
        let bands = self.bands.unwrap_or(DEFAULT_BANDS);
        let mut m = ModelConfig::new(kind, bands);
        m.param = param;
        let net = NetSpec::new(self.width.unwrap_or(128), self.depth.unwrap_or(4));
        m.embed_net = net;
        m.color_net = net;
        m.latent_pe = PosEncConfig::new(self.latent_bands.unwrap_or(DEFAULT_LATENT_BANDS), true);
        let res = self.grid_res.unwrap_or(0);
        if res > 0 {
            let b = match &self.grid_box {
                Some(s) => parse_box(s)?,
                None => DEFAULT_GRID_BOX,
            };
            m.grid = Some(VoxelGrid::new(res, Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))?);
            m.voxel_pe = PosEncConfig::new(self.voxel_bands.unwrap_or(DEFAULT_VOXEL_BANDS), true);
        }
        m.validate()?;
        let mut c = TrainConfig::new(m);
        c.total_iters = self.iters.unwrap_or(DEFAULT_ITERS);
        c.ease_iters = self.ease_iters.unwrap_or(c.total_iters * 4 / 10);
        c.lr_start = self.lr_start.unwrap_or(DEFAULT_LR);
        c.lr_end = self.lr_end.unwrap_or(c.lr_start / 10.0);
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.grad_clip {
            c.grad_clip = v;
        }
        c.eval_every = self.eval_every.unwrap_or(0);
        c.checkpoint_every = self.checkpoint_every.unwrap_or(0);
        c.permutation = self.permutation.unwrap_or(false);
        c.seed = self.seed.unwrap_or(0);
        c.validate()?;
        Ok(c)
    }
}

fn parse_box(s: &str) -> Result<[f64; 6], CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--grid-box {s:?}: {e}")))?;
    v.try_into().map_err(|_| CliError::Usage(format!("--grid-box needs 6 numbers, got {s:?}")))
}
