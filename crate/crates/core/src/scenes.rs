//! Ground truth for synthetic experiments: closed-form light fields of
//! textured rectangles, a quadrature volume renderer, camera-grid datasets,
//! and their on-disk manifest format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{to_two_plane, Camera, GeometryError, Ray, RayCoords4D, TwoPlaneParam, Vec3};
use crate::image::{Image, ImageError};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("manifest schema version {found}, expected {expected}")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("manifest is missing field `{0}`")]
    MissingField(String),
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Image-backed texture. Only the path is serialized; pixels are attached
/// with [`AnalyticScene::load_images`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageTexture {
    pub path: PathBuf,
    #[serde(skip)]
    pub pixels: Option<Arc<Image>>,
}

impl PartialEq for ImageTexture {
    fn eq(&self, other: &Self) -> bool {
        self.path == other.path
    }
}

/// Procedural or image-backed color on a rectangle, addressed by in-plane
/// world coordinates `(s, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Texture {
    Constant { color: [f64; 3] },
    Checker { size: f64, a: [f64; 3], b: [f64; 3] },
    /// Sum of sine gratings blended between two colors; each entry is
    /// `(fs, ft, phase)` in cycles per scene unit.
    Sines { waves: Vec<[f64; 3]>, a: [f64; 3], b: [f64; 3] },
    Image(ImageTexture),
}

impl Texture {
    /// Color at `(s, t)`; `uv` are the same point in the rectangle's
    /// normalized `[0, 1]^2` frame (used by image textures).
    fn sample(&self, s: f64, t: f64, uv: [f64; 2]) -> [f64; 3] {
        match self {
            Texture::Constant { color } => *color,
            Texture::Checker { size, a, b } => {
                let parity = ((s / size).floor() + (t / size).floor()).rem_euclid(2.0);
                if parity < 0.5 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Sines { waves, a, b } => {
                if waves.is_empty() {
                    return *a;
                }
                let sum: f64 = waves
                    .iter()
                    .map(|&[fs, ft, ph]| (std::f64::consts::TAU * (fs * s + ft * t) + ph).sin())
                    .sum();
                let m = 0.5 + 0.5 * sum / waves.len() as f64;
                lerp3(*a, *b, m)
            }
            Texture::Image(tex) => {
                let img = tex.pixels.as_ref().expect("image texture used before load_images");
                bilinear(img, uv[0] * img.width as f64 - 0.5, (1.0 - uv[1]) * img.height as f64 - 0.5)
            }
        }
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], m: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * m)
}

/// Bilinear lookup at continuous pixel coordinates, clamped at the border.
fn bilinear(img: &Image, x: f64, y: f64) -> [f64; 3] {
    let cx = |v: f64| v.clamp(0.0, (img.width - 1) as f64);
    let cy = |v: f64| v.clamp(0.0, (img.height - 1) as f64);
    let (x, y) = (cx(x), cy(y));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |x, y| img.get(x, y).map(f64::from);
    let top = lerp3(p(x0, y0), p(x1, y0), fx);
    let bottom = lerp3(p(x0, y1), p(x1, y1), fx);
    lerp3(top, bottom, fy)
}

/// Axis-aligned textured rectangle on the plane `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub z: f64,
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub opacity: f64,
    pub texture: Texture,
}

impl Rectangle {
    pub fn contains(&self, s: f64, t: f64) -> bool {
        (self.min[0]..=self.max[0]).contains(&s) && (self.min[1]..=self.max[1]).contains(&t)
    }

    pub fn color_at(&self, s: f64, t: f64) -> [f64; 3] {
        let uv = [
            (s - self.min[0]) / (self.max[0] - self.min[0]),
            (t - self.min[1]) / (self.max[1] - self.min[1]),
        ];
        self.texture.sample(s, t, uv)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub rectangles: Vec<Rectangle>,
    pub background: [f64; 3],
}

impl AnalyticScene {
    /// Checks that every rectangle lies beyond the camera plane `z_xy`, has
    /// positive extent and an opacity in `[0, 1]`.
    pub fn validate(&self, param: &TwoPlaneParam) -> Result<(), SceneError> {
        for (i, r) in self.rectangles.iter().enumerate() {
            if !(r.z > param.z_xy && r.z.is_finite()) {
                return Err(SceneError::InvalidScene(format!("rectangle {i} at z={} is not beyond the camera plane", r.z)));
            }
            if !(r.max[0] > r.min[0] && r.max[1] > r.min[1]) {
                return Err(SceneError::InvalidScene(format!("rectangle {i} has non-positive extent")));
            }
            if !(0.0..=1.0).contains(&r.opacity) {
                return Err(SceneError::InvalidScene(format!("rectangle {i} opacity {} outside [0, 1]", r.opacity)));
            }
        }
        Ok(())
    }

    /// Loads image textures, resolving relative paths against `base`.
    pub fn load_images(&mut self, base: &Path) -> Result<(), SceneError> {
        for r in &mut self.rectangles {
            if let Texture::Image(tex) = &mut r.texture {
                let p = if tex.path.is_absolute() { tex.path.clone() } else { base.join(&tex.path) };
                tex.pixels = Some(Arc::new(Image::read(&p)?));
            }
        }
        Ok(())
    }

    /// Rectangles ordered nearest-first for a camera on `z_xy`.
    fn front_to_back(&self) -> Vec<&Rectangle> {
        let mut v: Vec<&Rectangle> = self.rectangles.iter().collect();
        v.sort_by(|a, b| a.z.total_cmp(&b.z));
        v
    }
}

/// Closed-form radiance along the ray with two-plane coordinates `r`:
/// each rectangle is hit at `s = x + (u - x)(z_st - z_xy)/(z_uv - z_xy)`
/// (likewise for `t`), and hits are over-composited by opacity.
pub fn analytic_lightfield(scene: &AnalyticScene, r: RayCoords4D, param: &TwoPlaneParam) -> [f64; 3] {
    let span = param.z_uv - param.z_xy;
    let mut c = [0.0; 3];
    let mut trans = 1.0;
    for rect in scene.front_to_back() {
        let k = (rect.z - param.z_xy) / span;
        let s = r.x + (r.u - r.x) * k;
        let t = r.y + (r.v - r.y) * k;
        if rect.contains(s, t) {
            let col = rect.color_at(s, t);
            for ch in 0..3 {
                c[ch] += trans * rect.opacity * col[ch];
            }
            trans *= 1.0 - rect.opacity;
            if trans == 0.0 {
                break;
            }
        }
    }
    for ch in 0..3 {
        c[ch] += trans * scene.background[ch];
    }
    c
}

/// Density (1/scene unit) and emitted radiance of a participating medium.
pub trait RadianceField {
    fn density(&self, p: Vec3) -> f64;
    fn emission(&self, p: Vec3, dir: Vec3) -> [f64; 3];
}

/// A radiance field together with the ray parameter bounds to integrate.
pub struct RadianceFieldOracle<R> {
    pub field: R,
    pub t_near: f64,
    pub t_far: f64,
}

/// Midpoint quadrature of the volume rendering integral over `num_samples`
/// equal strata: `sum_k T_k (1 - exp(-sigma_k d)) L_k` with exclusive
/// transmittance `T_k = exp(-sum_{j<k} sigma_j d)`.
pub fn quadrature_render<R: RadianceField>(oracle: &RadianceFieldOracle<R>, ray: &Ray, num_samples: usize) -> [f64; 3] {
    assert!(num_samples >= 2, "quadrature needs at least two samples");
    assert!(oracle.t_near < oracle.t_far, "t_near must be below t_far");
    let delta = (oracle.t_far - oracle.t_near) / num_samples as f64;
    let mut c = [0.0; 3];
    let mut optical_depth = 0.0f64;
    for k in 0..num_samples {
        let p = ray.at(oracle.t_near + (k as f64 + 0.5) * delta);
        let sigma = oracle.field.density(p);
        if sigma > 0.0 {
            let w = (-optical_depth).exp() * (1.0 - (-sigma * delta).exp());
            let e = oracle.field.emission(p, ray.direction);
            for ch in 0..3 {
                c[ch] += w * e[ch];
            }
            optical_depth += sigma * delta;
        }
    }
    c
}

/// Box of constant density; emission is given per point so textured
/// slabs can stand in for rectangles.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneousSlab {
    pub min: Vec3,
    pub max: Vec3,
    pub sigma: f64,
    pub color: [f64; 3],
}

impl HomogeneousSlab {
    fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

impl RadianceField for HomogeneousSlab {
    fn density(&self, p: Vec3) -> f64 {
        if self.contains(p) {
            self.sigma
        } else {
            0.0
        }
    }

    fn emission(&self, _p: Vec3, _dir: Vec3) -> [f64; 3] {
        self.color
    }
}

/// An analytic scene with each rectangle thickened into a slab of the
/// given thickness. Opaque rectangles get `sigma = 20 / thickness`.
pub struct SlabScene {
    scene: AnalyticScene,
    thickness: f64,
}

/// Optical depth assigned to an opaque rectangle; `exp(-20)` is about 2e-9.
pub const OPAQUE_OPTICAL_DEPTH: f64 = 20.0;

impl SlabScene {
    pub fn new(scene: AnalyticScene, thickness: f64) -> Self {
        Self { scene, thickness }
    }

    fn rect_sigma(&self, r: &Rectangle) -> f64 {
        let depth = if r.opacity >= 1.0 { OPAQUE_OPTICAL_DEPTH } else { -(1.0 - r.opacity).ln() };
        depth / self.thickness
    }

    fn hit(&self, p: Vec3) -> Option<&Rectangle> {
        let h = 0.5 * self.thickness;
        self.scene.rectangles.iter().find(|r| (p.z - r.z).abs() <= h && r.contains(p.x, p.y))
    }
}

impl RadianceField for SlabScene {
    fn density(&self, p: Vec3) -> f64 {
        self.hit(p).map_or(0.0, |r| self.rect_sigma(r))
    }

    fn emission(&self, p: Vec3, _dir: Vec3) -> [f64; 3] {
        self.hit(p).map_or([0.0; 3], |r| r.color_at(p.x, p.y))
    }
}

/// Which views of a camera grid are held out for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum HoldoutRule {
    None,
    /// Views `i` with `(i + 1) % k == 0` (row-major order) are held out.
    EveryKth { k: usize },
    /// Views on every `stride`-th grid row and column are kept for
    /// training; all others are held out.
    GridSubsample { stride: usize },
}

impl HoldoutRule {
    pub fn is_holdout(&self, index: usize, row: usize, col: usize) -> bool {
        match *self {
            HoldoutRule::None => false,
            HoldoutRule::EveryKth { k } => k > 0 && (index + 1) % k == 0,
            HoldoutRule::GridSubsample { stride } => stride > 0 && !(row % stride == 0 && col % stride == 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

/// Regular grid of cameras on the plane `z`, spanning `[-extent, extent]`
/// in x and y. Row 0 is the top row (largest y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub extent: f64,
    pub z: f64,
}

impl GridSpec {
    pub fn desk(rows: usize, cols: usize) -> Self {
        Self { rows, cols, extent: 0.25, z: -1.0 }
    }

    pub fn spacing(&self) -> [f64; 2] {
        let step = |n: usize| if n > 1 { 2.0 * self.extent / (n - 1) as f64 } else { 0.0 };
        [step(self.cols), step(self.rows)]
    }

    pub fn position(&self, row: usize, col: usize) -> Vec3 {
        let [sx, sy] = self.spacing();
        let x = if self.cols > 1 { -self.extent + col as f64 * sx } else { 0.0 };
        let y = if self.rows > 1 { self.extent - row as f64 * sy } else { 0.0 };
        Vec3::new(x, y, self.z)
    }
}

/// Square image window on a plane shared by every camera of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub z: f64,
    pub half_extent: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { z: 0.0, half_extent: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    /// Grid position, when the view belongs to a camera grid.
    pub grid_pos: Option<(usize, usize)>,
    pub split: Split,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightFieldDataset {
    pub width: usize,
    pub height: usize,
    pub param: TwoPlaneParam,
    pub grid: Option<GridSpec>,
    pub holdout: HoldoutRule,
    pub scene: Option<AnalyticScene>,
    pub views: Vec<View>,
}

impl LightFieldDataset {
    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_indices(&self, split: Split) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].split == split).collect()
    }

    pub fn pixels_per_view(&self) -> usize {
        self.width * self.height
    }

    pub fn ray(&self, view: usize, x: usize, y: usize) -> Ray {
        self.views[view].camera.pixel_ray(x, y, self.width, self.height)
    }

    pub fn coords(&self, view: usize, x: usize, y: usize) -> Result<RayCoords4D, GeometryError> {
        to_two_plane(&self.ray(view, x, y), &self.param)
    }

    pub fn color(&self, view: usize, x: usize, y: usize) -> [f32; 3] {
        self.views[view].image.get(x, y)
    }

    /// View index at a grid position.
    pub fn grid_view(&self, row: usize, col: usize) -> Option<usize> {
        self.views.iter().position(|v| v.grid_pos == Some((row, col)))
    }
}

/// Renders a camera grid of an analytic scene. Every camera sees the same
/// window on `window.z`, so frusta are sheared and pixel `(x, y)` of every
/// view passes through the same window point. Images are stored with
/// 8-bit quantization.
pub fn generate_grid_dataset(
    scene: &AnalyticScene,
    grid: GridSpec,
    window: WindowSpec,
    width: usize,
    height: usize,
    param: TwoPlaneParam,
    holdout: HoldoutRule,
) -> Result<LightFieldDataset, SceneError> {
    if grid.rows == 0 || grid.cols == 0 || width == 0 || height == 0 {
        return Err(SceneError::InvalidScene("grid and image dimensions must be >= 1".into()));
    }
    scene.validate(&param)?;
    let mut views = Vec::with_capacity(grid.rows * grid.cols);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let index = views.len();
            let h = window.half_extent;
            let camera = Camera {
                origin: grid.position(row, col),
                window_z: window.z,
                window_min: [-h, -h],
                window_max: [h, h],
            };
            let mut image = Image::new(width, height);
            for y in 0..height {
                for x in 0..width {
                    let ray = camera.pixel_ray(x, y, width, height);
                    let c = analytic_lightfield(scene, to_two_plane(&ray, &param)?, &param);
                    image.set(x, y, c.map(|v| v as f32));
                }
            }
            let split = if holdout.is_holdout(index, row, col) { Split::Holdout } else { Split::Train };
            views.push(View { camera, grid_pos: Some((row, col)), split, image: image.quantized() });
        }
    }
    Ok(LightFieldDataset { width, height, param, grid: Some(grid), holdout, scene: Some(scene.clone()), views })
}

/// Moves `pi^uv` to `new_z_uv`. Rays and colors are untouched; two-plane
/// coordinates are recomputed against the new plane.
pub fn reparameterize_dataset(ds: &LightFieldDataset, new_z_uv: f64) -> Result<LightFieldDataset, SceneError> {
    let param = TwoPlaneParam::new(ds.param.z_xy, new_z_uv)?;
    for v in 0..ds.num_views() {
        for y in 0..ds.height {
            for x in 0..ds.width {
                to_two_plane(&ds.ray(v, x, y), &param)?;
            }
        }
    }
    Ok(LightFieldDataset { param, ..ds.clone() })
}

/// Built-in scene recipes used by the command-line tool and experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub scene: AnalyticScene,
    pub param: TwoPlaneParam,
    pub grid: GridSpec,
    pub window: WindowSpec,
    pub holdout: HoldoutRule,
}

pub const RECIPES: &[&str] = &["plane0", "plane1", "plane3", "two-plane-occluder", "constant"];

/// Textured square filling the view at `z = 0`: a mix of oblique sine
/// gratings with a few cycles across the window.
pub fn textured_plane_scene() -> AnalyticScene {
    AnalyticScene {
        rectangles: vec![Rectangle {
            z: 0.0,
            min: [-2.0, -2.0],
            max: [2.0, 2.0],
            opacity: 1.0,
            texture: Texture::Sines {
                waves: vec![[1.5, 0.5, 0.0], [-0.5, 2.0, 1.0], [3.0, 1.0, 2.0]],
                a: [0.1, 0.2, 0.7],
                b: [0.95, 0.8, 0.2],
            },
        }],
        background: [0.0; 3],
    }
}

/// Small checkered square in front of a textured backdrop.
pub fn occluder_scene() -> AnalyticScene {
    AnalyticScene {
        rectangles: vec![
            Rectangle {
                z: -0.4,
                min: [-0.35, -0.35],
                max: [0.35, 0.35],
                opacity: 1.0,
                texture: Texture::Checker { size: 0.175, a: [0.9, 0.15, 0.1], b: [0.95, 0.9, 0.85] },
            },
            Rectangle {
                z: 0.4,
                min: [-3.0, -3.0],
                max: [3.0, 3.0],
                opacity: 1.0,
                texture: Texture::Sines {
                    waves: vec![[0.75, 0.25, 0.0], [-0.25, 1.0, 1.3]],
                    a: [0.05, 0.3, 0.35],
                    b: [0.6, 0.85, 0.5],
                },
            },
        ],
        background: [0.0; 3],
    }
}

pub fn recipe(name: &str) -> Option<Recipe> {
    let plane = |z_uv: f64| Recipe {
        scene: textured_plane_scene(),
        param: TwoPlaneParam { z_xy: -1.0, z_uv },
        grid: GridSpec::desk(5, 5),
        window: WindowSpec::default(),
        holdout: HoldoutRule::EveryKth { k: 4 },
    };
    match name {
        "plane0" => Some(plane(0.0)),
        "plane1" => Some(plane(1.0)),
        "plane3" => Some(plane(3.0)),
        "two-plane-occluder" => Some(Recipe {
            scene: occluder_scene(),
            param: TwoPlaneParam::desk_default(),
            grid: GridSpec::desk(5, 5),
            window: WindowSpec::default(),
            holdout: HoldoutRule::GridSubsample { stride: 2 },
        }),
        "constant" => Some(Recipe {
            scene: AnalyticScene {
                rectangles: vec![Rectangle {
                    z: 0.0,
                    min: [-4.0, -4.0],
                    max: [4.0, 4.0],
                    opacity: 1.0,
                    texture: Texture::Constant { color: [0.2, 0.6, 0.4] },
                }],
                background: [0.0; 3],
            },
            param: TwoPlaneParam::desk_default(),
            grid: GridSpec::desk(5, 5),
            window: WindowSpec::default(),
            holdout: HoldoutRule::EveryKth { k: 4 },
        }),
        _ => None,
    }
}

impl Recipe {
    pub fn generate(&self, width: usize, height: usize) -> Result<LightFieldDataset, SceneError> {
        generate_grid_dataset(&self.scene, self.grid, self.window, width, height, self.param, self.holdout)
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Serialize, Deserialize)]
struct ViewEntry {
    file: String,
    split: Split,
    camera: Camera,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid_pos: Option<[usize; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    width: usize,
    height: usize,
    param: TwoPlaneParam,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<GridSpec>,
    #[serde(default = "no_holdout")]
    holdout: HoldoutRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<AnalyticScene>,
    views: Vec<ViewEntry>,
}

fn no_holdout() -> HoldoutRule {
    HoldoutRule::None
}

const REQUIRED: &[&str] = &["schema_version", "width", "height", "param", "views"];

/// Image format used when writing dataset views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io { path: path.display().to_string(), source }
}

/// Manifest text for `ds`, referencing view images `view_NNN.<ext>`.
pub fn manifest_string(ds: &LightFieldDataset, format: ImageFormat) -> Result<String, SceneError> {
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        width: ds.width,
        height: ds.height,
        param: ds.param,
        grid: ds.grid,
        holdout: ds.holdout,
        scene: ds.scene.clone(),
        views: ds
            .views
            .iter()
            .enumerate()
            .map(|(i, v)| ViewEntry {
                file: view_file_name(i, format),
                split: v.split,
                camera: v.camera,
                grid_pos: v.grid_pos.map(|(r, c)| [r, c]),
            })
            .collect(),
    };
    toml::to_string(&manifest).map_err(|e| SceneError::Malformed(e.to_string()))
}

pub fn view_file_name(index: usize, format: ImageFormat) -> String {
    format!("view_{index:03}.{}", format.extension())
}

/// Writes `manifest.toml` and one image per view into `dir`. Returns the
/// written paths, manifest first.
pub fn write_dataset(dir: &Path, ds: &LightFieldDataset, format: ImageFormat) -> Result<Vec<PathBuf>, SceneError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest_string(ds, format)?).map_err(io_err(&manifest_path))?;
    let mut written = vec![manifest_path];
    for (i, v) in ds.views.iter().enumerate() {
        let p = dir.join(view_file_name(i, format));
        v.image.write(&p)?;
        written.push(p);
    }
    Ok(written)
}

/// Parses manifest text, checking the schema version and required fields.
/// Returns metadata plus the view file names (relative to the manifest).
fn parse_manifest(text: &str) -> Result<(Manifest, Vec<String>), SceneError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| SceneError::Malformed(e.to_string()))?;
    for &key in REQUIRED {
        if !table.contains_key(key) {
            return Err(SceneError::MissingField(key.to_string()));
        }
    }
    let found = table["schema_version"]
        .as_integer()
        .ok_or_else(|| SceneError::Malformed("schema_version must be an integer".into()))?;
    if found != SCHEMA_VERSION as i64 {
        return Err(SceneError::SchemaVersionMismatch { found: found.max(0) as u32, expected: SCHEMA_VERSION });
    }
    let m: Manifest = table.try_into().map_err(|e: toml::de::Error| SceneError::Malformed(e.to_string()))?;
    let files = m.views.iter().map(|v| v.file.clone()).collect();
    Ok((m, files))
}

/// Reads a dataset from its manifest, loading view images relative to the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<LightFieldDataset, SceneError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let (m, files) = parse_manifest(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut views = Vec::with_capacity(m.views.len());
    for (entry, file) in m.views.into_iter().zip(files) {
        let image = Image::read(&base.join(&file))?;
        if (image.width, image.height) != (m.width, m.height) {
            return Err(SceneError::Malformed(format!(
                "{file} is {}x{}, manifest says {}x{}",
                image.width, image.height, m.width, m.height
            )));
        }
        views.push(View {
            camera: entry.camera,
            grid_pos: entry.grid_pos.map(|[r, c]| (r, c)),
            split: entry.split,
            image,
        });
    }
    let mut scene = m.scene;
    if let Some(s) = scene.as_mut() {
        s.load_images(base)?;
    }
    Ok(LightFieldDataset {
        width: m.width,
        height: m.height,
        param: m.param,
        grid: m.grid,
        holdout: m.holdout,
        scene,
        views,
    })
}

pub fn read_dataset(dir: &Path) -> Result<LightFieldDataset, SceneError> {
    read_manifest(&dir.join(MANIFEST_FILE))
}

/// Per-view train/holdout counts, keyed by split name.
pub fn split_summary(ds: &LightFieldDataset) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    m.insert("train", ds.view_indices(Split::Train).len());
    m.insert("holdout", ds.view_indices(Split::Holdout).len());
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_color(c: [f64; 3]) -> AnalyticScene {
        AnalyticScene {
            rectangles: vec![Rectangle {
                z: 0.0,
                min: [-10.0, -10.0],
                max: [10.0, 10.0],
                opacity: 1.0,
                texture: Texture::Constant { color: c },
            }],
            background: [0.0; 3],
        }
    }

    #[test]
    fn similar_triangles_example() {
        // z_xy = 0, z_st = 1, z_uv = 2: s = 0.5 + (0 - 0.5) * 1/2 = 0.25
        let scene = AnalyticScene {
            rectangles: vec![Rectangle {
                z: 1.0,
                min: [-1.0, -1.0],
                max: [1.0, 1.0],
                opacity: 1.0,
                texture: Texture::Checker { size: 0.25, a: [1.0; 3], b: [0.0; 3] },
            }],
            background: [0.5; 3],
        };
        let param = TwoPlaneParam::new(0.0, 2.0).unwrap();
        let c = analytic_lightfield(&scene, RayCoords4D::new(0.5, 0.1, 0.0, 0.1), &param);
        assert_eq!(c, scene.rectangles[0].color_at(0.25, 0.1));
        // just below s = 0.25 lands in the neighbouring checker cell
        let c2 = analytic_lightfield(&scene, RayCoords4D::new(0.5, 0.1, 0.0 - 1e-9, 0.1), &param);
        assert_ne!(c, c2);
    }

    #[test]
    fn miss_gives_background() {
        let mut scene = flat_color([1.0; 3]);
        scene.rectangles[0].max = [0.1, 0.1];
        scene.background = [0.1, 0.2, 0.3];
        let c = analytic_lightfield(&scene, RayCoords4D::new(0.0, 0.0, 5.0, 5.0), &TwoPlaneParam::desk_default());
        assert_eq!(c, [0.1, 0.2, 0.3]);
    }

    #[test]
    fn partial_opacity_composites() {
        let mut scene = flat_color([1.0, 0.0, 0.0]);
        scene.rectangles[0].opacity = 0.25;
        scene.rectangles.push(Rectangle { z: 0.5, ..flat_color([0.0, 1.0, 0.0]).rectangles[0].clone() });
        let c = analytic_lightfield(&scene, RayCoords4D::new(0.0, 0.0, 0.0, 0.0), &TwoPlaneParam::desk_default());
        assert_eq!(c, [0.25, 0.75, 0.0]);
    }

    #[test]
    fn empty_density_renders_black() {
        let slab = HomogeneousSlab { min: Vec3::new(-1.0, -1.0, 0.0), max: Vec3::new(1.0, 1.0, 1.0), sigma: 0.0, color: [1.0; 3] };
        let oracle = RadianceFieldOracle { field: slab, t_near: 0.0, t_far: 4.0 };
        let ray = Ray::new(Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(quadrature_render(&oracle, &ray, 64), [0.0; 3]);
    }

    #[test]
    fn holdout_every_second_of_three_by_three() {
        let rule = HoldoutRule::EveryKth { k: 2 };
        let held = (0..9).filter(|&i| rule.is_holdout(i, i / 3, i % 3)).count();
        assert_eq!((9 - held, held), (5, 4));
    }

    #[test]
    fn single_camera_dataset() {
        let ds = generate_grid_dataset(
            &flat_color([0.3, 0.6, 0.9]),
            GridSpec::desk(1, 1),
            WindowSpec::default(),
            4,
            4,
            TwoPlaneParam::desk_default(),
            HoldoutRule::None,
        )
        .unwrap();
        assert_eq!(ds.num_views() * ds.pixels_per_view(), 16);
        for y in 0..4 {
            for x in 0..4 {
                let c = ds.coords(0, x, y).unwrap();
                assert_eq!((c.x, c.y), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn manifest_missing_param() {
        let text = "schema_version = 1\nwidth = 1\nheight = 1\nviews = []\n";
        assert!(matches!(parse_manifest(text), Err(SceneError::MissingField(f)) if f == "param"));
        let text = "schema_version = 7\nwidth = 1\nheight = 1\nviews = []\n[param]\nz_xy = -1.0\nz_uv = 0.0\n";
        assert!(matches!(
            parse_manifest(text),
            Err(SceneError::SchemaVersionMismatch { found: 7, expected: 1 })
        ));
    }
}
