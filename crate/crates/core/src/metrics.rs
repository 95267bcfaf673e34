//! Image-quality metrics, principal-component views of ray embeddings, and
//! epipolar-plane image slices.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, Ray};
use crate::image::Image;
use crate::model::{LightFieldModel, LocalSample, ModelError};
use crate::scenes::{GridSpec, LightFieldDataset, WindowSpec};
use crate::Real;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("image {0}x{1} is smaller than the 11x11 SSIM window")]
    TooSmall(usize, usize),
    #[error("slice index out of range: {0}")]
    OutOfRange(String),
    #[error("need at least one sample for PCA")]
    EmptyData,
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_dims(a: &Image, b: &Image) -> Result<(), MetricsError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricsError::DimensionMismatch((a.width, a.height), (b.width, b.height)));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all channels, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let n = a.data.len().max(1) as f64;
    let mse: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x0 in 0..ow {
            tmp[y * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean structural similarity over all valid 11x11 Gaussian windows
/// (sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1), averaged over
/// channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(w, h));
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.data.iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data.iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let sxx = filter_valid(&prod(&x, &x), w, h, &k);
        let syy = filter_valid(&prod(&y, &y), w, h, &k);
        let sxy = filter_valid(&prod(&x, &y), w, h, &k);
        let n = mx.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub split: String,
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Always `None`: LPIPS needs pretrained perceptual weights.
    pub lpips: Option<f64>,
}

impl MetricsReport {
    pub fn new(split: &str, views: Vec<ViewMetrics>) -> Self {
        let n = views.len().max(1) as f64;
        let mean_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / n;
        let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
        Self { split: split.to_string(), views, mean_psnr, mean_ssim, lpips: None }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// One line per view followed by the mean.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in &self.views {
            let _ = writeln!(out, "view {:>4} psnr {:.3} ssim {:.4}", v.view, v.psnr, v.ssim);
        }
        let _ = writeln!(
            out,
            "mean split={} views={} psnr {:.3} ssim {:.4} lpips unavailable",
            self.split,
            self.views.len(),
            self.mean_psnr,
            self.mean_ssim
        );
        out
    }
}

/// Principal components of row vectors, ordered by decreasing variance.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// Columns are unit components; each column's largest-magnitude entry
    /// is positive.
    pub components: DMatrix<f64>,
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, MetricsError> {
        let n = rows.len();
        if n == 0 {
            return Err(MetricsError::EmptyData);
        }
        let d = rows[0].len();
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut xc = x;
        for j in 0..d {
            let m = mean[j];
            xc.column_mut(j).add_scalar_mut(-m);
        }
        let cov = xc.transpose() * &xc / (n as f64);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = DMatrix::zeros(d, d);
        let mut variances = Vec::with_capacity(d);
        for (k, &src) in order.iter().enumerate() {
            let mut col = eig.eigenvectors.column(src).into_owned();
            let lead = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
            if lead < 0.0 {
                col.neg_mut();
            }
            components.set_column(k, &col);
            variances.push(eig.eigenvalues[src].max(0.0));
        }
        Ok(Self { mean, components, variances })
    }

    pub fn project(&self, row: &[f64]) -> DVector<f64> {
        let x = DVector::from_column_slice(row) - &self.mean;
        self.components.transpose() * x
    }

    pub fn reconstruct(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        &self.components * coeffs + &self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaWarning {
    /// Every embedding is identical; the image is uniform mid-gray.
    ConstantEmbedding,
}

/// Components whose variance falls below this fraction of the leading
/// variance are treated as empty and mapped to 0.5.
const PCA_REL_EPS: f64 = 1e-10;

/// Maps the first three principal components of `rows` to RGB with
/// per-component min-max normalization. `None` rows (rays with no
/// embedding) become black.
pub fn pca_image(
    rows: &[Option<Vec<f64>>],
    width: usize,
    height: usize,
) -> Result<(Image, Option<PcaWarning>), MetricsError> {
    let present: Vec<Vec<f64>> = rows.iter().flatten().cloned().collect();
    let pca = Pca::fit(&present)?;
    let top = pca.variances.first().copied().unwrap_or(0.0);
    let mut image = Image::new(width, height);
    if top <= 1e-20 {
        for (i, r) in rows.iter().enumerate() {
            if r.is_some() {
                image.data[3 * i..3 * i + 3].fill(0.5);
            }
        }
        return Ok((image, Some(PcaWarning::ConstantEmbedding)));
    }
    let proj: Vec<DVector<f64>> = present.iter().map(|r| pca.project(r)).collect();
    let mut ranges = [(0.0, 0.0, false); 3];
    for (c, range) in ranges.iter_mut().enumerate() {
        if c < pca.variances.len() && pca.variances[c] > PCA_REL_EPS * top {
            let lo = proj.iter().map(|p| p[c]).fold(f64::INFINITY, f64::min);
            let hi = proj.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max);
            *range = (lo, hi, hi > lo);
        }
    }
    let mut k = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.is_none() {
            continue;
        }
        for (c, &(lo, hi, live)) in ranges.iter().enumerate() {
            image.data[3 * i + c] = if live { ((proj[k][c] - lo) / (hi - lo)) as f32 } else { 0.5 };
        }
        k += 1;
    }
    Ok((image, None))
}

/// Embeds every pixel ray of `camera` and visualizes the embeddings'
/// principal components. Subdivided models use the first voxel each ray
/// crosses; rays that miss the grid are black.
pub fn embedding_pca_image<F: Real>(
    model: &LightFieldModel<F>,
    camera: &Camera,
    width: usize,
    height: usize,
) -> Result<(Image, Option<PcaWarning>), MetricsError> {
    let mut rows = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let ray = camera.pixel_ray(x, y, width, height);
            let samples = model.ray_samples(&ray)?;
            rows.push(match samples.first() {
                Some(&s) => Some(model.embed(s)?),
                None => None,
            });
        }
    }
    pca_image(&rows, width, height)
}

/// Which 2D slice of a camera-grid light field to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpiAxis {
    /// Camera row and image row fixed; varies camera x and pixel column.
    Horizontal,
    /// Camera column and image column fixed; varies camera y and pixel row.
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpiSpec {
    pub axis: EpiAxis,
    /// Grid row (horizontal) or column (vertical) of the cameras.
    pub camera_line: usize,
    /// Image row (horizontal) or column (vertical) that is kept.
    pub pixel_line: usize,
}

/// EPI resampled from a dataset's stored views. The output has one row
/// per camera along the slice and one column per pixel along it.
pub fn epi_from_dataset(ds: &LightFieldDataset, spec: EpiSpec) -> Result<Image, MetricsError> {
    let grid = ds.grid.ok_or_else(|| MetricsError::OutOfRange("dataset has no camera grid".into()))?;
    let (n_cam, n_cam_lines, n_pix, n_pix_lines) = match spec.axis {
        EpiAxis::Horizontal => (grid.cols, grid.rows, ds.width, ds.height),
        EpiAxis::Vertical => (grid.rows, grid.cols, ds.height, ds.width),
    };
    if spec.camera_line >= n_cam_lines || spec.pixel_line >= n_pix_lines {
        return Err(MetricsError::OutOfRange(format!(
            "camera line {} of {n_cam_lines}, pixel line {} of {n_pix_lines}",
            spec.camera_line, spec.pixel_line
        )));
    }
    let mut out = Image::new(n_pix, n_cam);
    for c in 0..n_cam {
        let (row, col) = match spec.axis {
            EpiAxis::Horizontal => (spec.camera_line, c),
            EpiAxis::Vertical => (c, spec.camera_line),
        };
        let view = ds
            .grid_view(row, col)
            .ok_or_else(|| MetricsError::OutOfRange(format!("no view at grid position ({row}, {col})")))?;
        for p in 0..n_pix {
            let (x, y) = match spec.axis {
                EpiAxis::Horizontal => (p, spec.pixel_line),
                EpiAxis::Vertical => (spec.pixel_line, p),
            };
            out.set(p, c, ds.color(view, x, y));
        }
    }
    Ok(out)
}

/// EPI rendered from a model with `num_cameras` virtual cameras spread
/// evenly along the slice of `grid`, all looking through `window`.
#[allow(clippy::too_many_arguments)]
pub fn epi_from_model<F: Real>(
    model: &LightFieldModel<F>,
    grid: GridSpec,
    window: WindowSpec,
    width: usize,
    height: usize,
    spec: EpiSpec,
    num_cameras: usize,
) -> Result<Image, MetricsError> {
    let (n_cam_lines, n_pix, n_pix_lines) = match spec.axis {
        EpiAxis::Horizontal => (grid.rows, width, height),
        EpiAxis::Vertical => (grid.cols, height, width),
    };
    if spec.camera_line >= n_cam_lines || spec.pixel_line >= n_pix_lines || num_cameras == 0 {
        return Err(MetricsError::OutOfRange(format!(
            "camera line {} of {n_cam_lines}, pixel line {} of {n_pix_lines}, {num_cameras} cameras",
            spec.camera_line, spec.pixel_line
        )));
    }
    let line = grid.position(
        if spec.axis == EpiAxis::Horizontal { spec.camera_line } else { 0 },
        if spec.axis == EpiAxis::Vertical { spec.camera_line } else { 0 },
    );
    let along = |i: usize| {
        if num_cameras == 1 {
            0.0
        } else {
            -grid.extent + 2.0 * grid.extent * i as f64 / (num_cameras - 1) as f64
        }
    };
    let h = window.half_extent;
    let mut rays: Vec<Ray> = Vec::with_capacity(num_cameras * n_pix);
    for c in 0..num_cameras {
        let mut origin = line;
        match spec.axis {
            EpiAxis::Horizontal => origin.x = along(c),
            // row 0 is the top, so y decreases down the EPI
            EpiAxis::Vertical => origin.y = -along(c),
        }
        let cam = Camera { origin, window_z: window.z, window_min: [-h, -h], window_max: [h, h] };
        for p in 0..n_pix {
            let (x, y) = match spec.axis {
                EpiAxis::Horizontal => (p, spec.pixel_line),
                EpiAxis::Vertical => (spec.pixel_line, p),
            };
            rays.push(cam.pixel_ray(x, y, width, height));
        }
    }
    let (colors, _) = model.render_rays(&rays)?;
    let data = colors.into_iter().flat_map(|c| c.map(|v| v as f32)).collect();
    Ok(Image::from_data(n_pix, num_cameras, data).expect("sizes agree"))
}

/// Embedding rows for the given samples (used by tests and tools that
/// already hold local samples).
pub fn embed_samples<F: Real>(model: &LightFieldModel<F>, samples: &[LocalSample]) -> Result<Vec<Vec<f64>>, MetricsError> {
    samples.iter().map(|&s| model.embed(s).map_err(MetricsError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = if (x / 2 + y / 2) % 2 == 0 { 0.9 } else { 0.1 };
                img.set(x, y, [v, 1.0 - v, v * 0.5]);
            }
        }
        img
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(8, 8, [0.3, 0.5, 0.7]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(8, 8, [0.4, 0.6, 0.8]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(matches!(psnr(&a, &Image::new(4, 8)), Err(MetricsError::DimensionMismatch(..))));
    }

    #[test]
    fn ssim_examples() {
        let a = checker(16, 16);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let neg = Image { data: a.data.iter().map(|v| 1.0 - v).collect(), ..a.clone() };
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        assert_eq!(ssim(&a, &neg).unwrap(), ssim(&neg, &a).unwrap());
        assert!(matches!(ssim(&Image::new(10, 20), &Image::new(10, 20)), Err(MetricsError::TooSmall(10, 20))));
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(k[i], k[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn constant_embedding_warns() {
        let rows = vec![Some(vec![1.0, 2.0, 3.0]); 4];
        let (img, warn) = pca_image(&rows, 2, 2).unwrap();
        assert_eq!(warn, Some(PcaWarning::ConstantEmbedding));
        assert!(img.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn line_embedding_fills_first_channel_only() {
        let rows: Vec<Option<Vec<f64>>> =
            (0..6).map(|i| Some(vec![1.0 + i as f64, 2.0 - 2.0 * i as f64, 0.5, 4.0])).collect();
        let (img, warn) = pca_image(&rows, 3, 2).unwrap();
        assert_eq!(warn, None);
        let reds: Vec<f32> = img.pixels().map(|p| p[0]).collect();
        assert_eq!(reds.iter().cloned().fold(f32::INFINITY, f32::min), 0.0);
        assert_eq!(reds.iter().cloned().fold(f32::NEG_INFINITY, f32::max), 1.0);
        assert!(img.pixels().all(|p| p[1] == 0.5 && p[2] == 0.5));
    }
}
