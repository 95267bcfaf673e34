//! Rays, two-plane and Plücker parameterizations, the forward-facing NDC
//! warp, and the voxel grid used by the subdivided model.

use std::ops::{Add, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rays whose z-direction is smaller than this are treated as parallel to
/// the parameterization planes.
pub const PARALLEL_EPS: f64 = 1e-9;

/// Minimum length a ray/voxel overlap must have to count as a hit.
pub const MIN_SEGMENT: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("ray is parallel to the z-planes (direction.z = {0:e})")]
    ParallelRay(f64),
    #[error("ray origin lies behind the near plane after shifting")]
    BehindNear,
    #[error("ray does not intersect voxel {0}")]
    NoIntersection(usize),
    #[error("degenerate ray direction")]
    ZeroDirection,
    #[error("invalid two-plane parameterization: z_xy == z_uv == {0}")]
    CoincidentPlanes(f64),
    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    fn map2(self, o: Vec3, f: impl Fn(f64, f64) -> f64) -> Vec3 {
        Vec3::new(f(self.x, o.x), f(self.y, o.y), f(self.z, o.z))
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        self.map2(o, |a, b| a + b)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        self.map2(o, |a, b| a - b)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        self * -1.0
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, axis: usize) -> &f64 {
        match axis {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("axis {axis} out of range"),
        }
    }
}

/// A half-line `origin + t * direction`, `t >= 0`, with a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self, GeometryError> {
        let direction = direction.normalized().ok_or(GeometryError::ZeroDirection)?;
        Ok(Self { origin, direction })
    }

    /// The ray starting at `from` and passing through `to`.
    pub fn through(from: Vec3, to: Vec3) -> Result<Self, GeometryError> {
        Self::new(from, to - from)
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// Same line, origin slid by `t` along the direction.
    pub fn slid(&self, t: f64) -> Ray {
        Ray { origin: self.at(t), direction: self.direction }
    }
}

/// Pinhole camera whose image is a rectangular window on the plane
/// `z = window_z`. Every pixel's ray starts at `origin` and passes through
/// the pixel centre on the window, so sheared (off-axis) frusta of a
/// rectified camera array are expressed directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub origin: Vec3,
    pub window_z: f64,
    pub window_min: [f64; 2],
    pub window_max: [f64; 2],
}

impl Camera {
    /// Camera looking down `+z` with the given horizontal field of view.
    pub fn pinhole(origin: Vec3, fov_x: f64, aspect: f64) -> Self {
        let hx = (0.5 * fov_x).tan();
        let hy = hx / aspect;
        Self {
            origin,
            window_z: origin.z + 1.0,
            window_min: [origin.x - hx, origin.y - hy],
            window_max: [origin.x + hx, origin.y + hy],
        }
    }

    /// Point on the window for continuous pixel coordinates; row 0 is the
    /// top (largest y) edge.
    pub fn window_point(&self, px: f64, py: f64, width: usize, height: usize) -> Vec3 {
        let sx = self.window_min[0] + px / width as f64 * (self.window_max[0] - self.window_min[0]);
        let sy = self.window_max[1] - py / height as f64 * (self.window_max[1] - self.window_min[1]);
        Vec3::new(sx, sy, self.window_z)
    }

    pub fn pixel_ray(&self, col: usize, row: usize, width: usize, height: usize) -> Ray {
        let target = self.window_point(col as f64 + 0.5, row as f64 + 0.5, width, height);
        Ray::through(self.origin, target).expect("window plane differs from camera origin")
    }
}

/// Depths of the two parameterization planes `pi^xy` and `pi^uv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoPlaneParam {
    pub z_xy: f64,
    pub z_uv: f64,
}

impl TwoPlaneParam {
    pub fn new(z_xy: f64, z_uv: f64) -> Result<Self, GeometryError> {
        if z_xy == z_uv || !z_xy.is_finite() || !z_uv.is_finite() {
            return Err(GeometryError::CoincidentPlanes(z_xy));
        }
        Ok(Self { z_xy, z_uv })
    }

    /// Camera plane at z = -1 and object plane at z = 0.
    pub fn desk_default() -> Self {
        Self { z_xy: -1.0, z_uv: 0.0 }
    }

    /// Rebuilds a ray from its plane intersections, pointing from `pi^xy`
    /// towards `pi^uv`.
    pub fn ray_from_coords(&self, c: RayCoords4D) -> Result<Ray, GeometryError> {
        Ray::through(Vec3::new(c.x, c.y, self.z_xy), Vec3::new(c.u, c.v, self.z_uv))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayCoords4D {
    pub x: f64,
    pub y: f64,
    pub u: f64,
    pub v: f64,
}

impl RayCoords4D {
    pub const fn new(x: f64, y: f64, u: f64, v: f64) -> Self {
        Self { x, y, u, v }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.u, self.v]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }
}

/// Point where `ray` crosses the plane at depth `z`. The crossing parameter
/// may be negative.
pub fn intersect_ray_plane(ray: &Ray, z: f64) -> Result<(f64, f64), GeometryError> {
    let dz = ray.direction.z;
    if dz.abs() <= PARALLEL_EPS {
        return Err(GeometryError::ParallelRay(dz));
    }
    let t = (z - ray.origin.z) / dz;
    Ok((ray.origin.x + t * ray.direction.x, ray.origin.y + t * ray.direction.y))
}

pub fn to_two_plane(ray: &Ray, param: &TwoPlaneParam) -> Result<RayCoords4D, GeometryError> {
    let (x, y) = intersect_ray_plane(ray, param.z_xy)?;
    let (u, v) = intersect_ray_plane(ray, param.z_uv)?;
    Ok(RayCoords4D { x, y, u, v })
}

/// Forward-facing NDC point map for a camera looking down -z.
pub fn ndc_point(p: Vec3, focal: f64, width: f64, height: f64, near: f64) -> Vec3 {
    Vec3::new(
        -2.0 * focal / width * p.x / p.z,
        -2.0 * focal / height * p.y / p.z,
        1.0 + 2.0 * near / p.z,
    )
}

/// Warps a camera-space ray (camera looking down -z) into normalized device
/// coordinates. The origin is first moved onto the near plane `z = -near`.
/// The returned direction is re-normalized; the line is the image of the
/// input line under [`ndc_point`].
pub fn world_to_ndc(
    ray: &Ray,
    focal: f64,
    width: f64,
    height: f64,
    near: f64,
) -> Result<Ray, GeometryError> {
    let (o, d) = (ray.origin, ray.direction);
    if d.z.abs() <= PARALLEL_EPS {
        return Err(GeometryError::ParallelRay(d.z));
    }
    let t = -(near + o.z) / d.z;
    let o = o + d * t;
    if o.z >= 0.0 {
        return Err(GeometryError::BehindNear);
    }
    let ax = -2.0 * focal / width;
    let ay = -2.0 * focal / height;
    let origin = Vec3::new(ax * o.x / o.z, ay * o.y / o.z, 1.0 + 2.0 * near / o.z);
    let direction = Vec3::new(
        ax * (d.x / d.z - o.x / o.z),
        ay * (d.y / d.z - o.y / o.z),
        -2.0 * near / o.z,
    );
    Ray::new(origin, direction)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlueckerCoords {
    pub direction: Vec3,
    pub moment: Vec3,
}

pub fn to_pluecker(ray: &Ray) -> PlueckerCoords {
    PlueckerCoords { direction: ray.direction, moment: ray.origin.cross(ray.direction) }
}

/// Regular `N^3` subdivision of an axis-aligned box.
///
/// Voxel `i` has integer coordinates `(ix, iy, iz)` with
/// `i = (iz * N + iy) * N + ix`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub box_min: Vec3,
    pub box_max: Vec3,
}

/// One voxel crossed by a ray, with the parameter interval spent inside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelHit {
    pub index: usize,
    pub entry_t: f64,
    pub exit_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalRayCoords {
    pub voxel_index: usize,
    /// Front/back face intersections in the voxel-centred frame, divided by
    /// the voxel half-extent on each axis.
    pub coords: RayCoords4D,
    pub entry_t: f64,
    pub exit_t: f64,
    half_extent: Vec3,
}

impl LocalRayCoords {
    /// Local coordinates in scene units (voxel-centred, not normalized).
    pub fn metric_coords(&self) -> RayCoords4D {
        let h = self.half_extent;
        let c = self.coords;
        RayCoords4D::new(c.x * h.x, c.y * h.y, c.u * h.x, c.v * h.y)
    }
}

impl VoxelGrid {
    pub fn new(resolution: usize, box_min: Vec3, box_max: Vec3) -> Result<Self, GeometryError> {
        if resolution == 0 {
            return Err(GeometryError::InvalidGrid("resolution must be >= 1".into()));
        }
        if !(box_min.x < box_max.x && box_min.y < box_max.y && box_min.z < box_max.z) {
            return Err(GeometryError::InvalidGrid(format!(
                "box_min {box_min:?} must be below box_max {box_max:?}"
            )));
        }
        Ok(Self { resolution, box_min, box_max })
    }

    pub fn num_voxels(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn voxel_width(&self) -> Vec3 {
        (self.box_max - self.box_min) * (1.0 / self.resolution as f64)
    }

    pub fn cell(&self, index: usize) -> [usize; 3] {
        let n = self.resolution;
        [index % n, (index / n) % n, index / (n * n)]
    }

    pub fn index(&self, cell: [usize; 3]) -> usize {
        let n = self.resolution;
        (cell[2] * n + cell[1]) * n + cell[0]
    }

    pub fn voxel_bounds(&self, index: usize) -> (Vec3, Vec3) {
        let c = self.cell(index);
        let w = self.voxel_width();
        let lo = Vec3::new(
            self.box_min.x + c[0] as f64 * w.x,
            self.box_min.y + c[1] as f64 * w.y,
            self.box_min.z + c[2] as f64 * w.z,
        );
        (lo, lo + w)
    }

    pub fn voxel_center(&self, index: usize) -> Vec3 {
        let (lo, hi) = self.voxel_bounds(index);
        (lo + hi) * 0.5
    }

    /// Voxel centre with the grid box mapped to `[-1, 1]^3`.
    pub fn normalized_center(&self, index: usize) -> [f64; 3] {
        let n = self.resolution as f64;
        let c = self.cell(index);
        c.map(|ci| (2.0 * ci as f64 + 1.0) / n - 1.0)
    }

    /// Voxels whose interior the ray (`t >= 0`) crosses with positive
    /// length, ordered front to back. Incremental grid stepping in the
    /// style of Amanatides & Woo; boundary crossings are recomputed from
    /// the cell index each step so no error accumulates.
    pub fn voxels_intersected(&self, ray: &Ray) -> Vec<VoxelHit> {
        let mut hits = Vec::new();
        let Some((t_enter, t_exit)) = slab_interval(ray, self.box_min, self.box_max) else {
            return hits;
        };
        let t_enter = t_enter.max(0.0);
        if t_exit - t_enter <= MIN_SEGMENT {
            return hits;
        }
        let n = self.resolution;
        let w = self.voxel_width();
        let (o, d) = (ray.origin, ray.direction);

        // A ray lying exactly in a cell-boundary plane touches no interior.
        for a in 0..3 {
            if d[a] == 0.0 {
                let rel = (o[a] - self.box_min[a]) / w[a];
                if rel == rel.round() {
                    return hits;
                }
            }
        }

        let p = ray.at(t_enter);
        let mut cell = [0usize; 3];
        let mut step = [0i64; 3];
        for a in 0..3 {
            let rel = (p[a] - self.box_min[a]) / w[a];
            let mut c = rel.floor();
            // on a boundary, take the cell the ray is heading into
            if d[a] < 0.0 && rel == c {
                c -= 1.0;
            }
            cell[a] = c.clamp(0.0, (n - 1) as f64) as usize;
            step[a] = if d[a] > 0.0 {
                1
            } else if d[a] < 0.0 {
                -1
            } else {
                0
            };
        }

        let boundary_t = |cell: &[usize; 3], a: usize| -> f64 {
            if step[a] == 0 {
                return f64::INFINITY;
            }
            let k = cell[a] as f64 + if step[a] > 0 { 1.0 } else { 0.0 };
            (self.box_min[a] + k * w[a] - o[a]) / d[a]
        };

        let mut t = t_enter;
        loop {
            let next = [boundary_t(&cell, 0), boundary_t(&cell, 1), boundary_t(&cell, 2)];
            let axis = (0..3)
                .min_by(|&a, &b| next[a].total_cmp(&next[b]))
                .expect("three axes");
            let exit = next[axis].min(t_exit);
            if exit - t > MIN_SEGMENT {
                hits.push(VoxelHit { index: self.index(cell), entry_t: t, exit_t: exit });
            }
            if exit >= t_exit {
                break;
            }
            t = t.max(exit);
            let c = cell[axis] as i64 + step[axis];
            if c < 0 || c >= n as i64 {
                break;
            }
            cell[axis] = c as usize;
        }
        hits
    }

    /// Re-parameterizes `ray` in voxel `index`'s frame: the ray is
    /// intersected with the voxel's front (`-z`) and back (`+z`) face planes
    /// after moving the voxel centre to the origin.
    pub fn localize(&self, index: usize, ray: &Ray) -> Result<LocalRayCoords, GeometryError> {
        let (lo, hi) = self.voxel_bounds(index);
        if ray.direction.z.abs() <= PARALLEL_EPS {
            return Err(GeometryError::ParallelRay(ray.direction.z));
        }
        let (entry_t, exit_t) =
            slab_interval_line(ray, lo, hi).ok_or(GeometryError::NoIntersection(index))?;
        let center = (lo + hi) * 0.5;
        let half = (hi - lo) * 0.5;
        let local = Ray { origin: ray.origin - center, direction: ray.direction };
        let (x, y) = intersect_ray_plane(&local, -half.z)?;
        let (u, v) = intersect_ray_plane(&local, half.z)?;
        Ok(LocalRayCoords {
            voxel_index: index,
            coords: RayCoords4D::new(x / half.x, y / half.y, u / half.x, v / half.y),
            entry_t,
            exit_t,
            half_extent: half,
        })
    }
}

/// Parameter interval over which the infinite line meets the closed box.
fn slab_interval_line(ray: &Ray, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.direction[a]);
        if d == 0.0 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - o) / d, (hi[a] - o) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Slab test restricted to `t >= 0`.
pub fn slab_interval(ray: &Ray, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let (t0, t1) = slab_interval_line(ray, lo, hi)?;
    (t1 >= 0.0).then_some((t0.max(0.0), t1))
}
