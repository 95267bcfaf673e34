//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs everything; extra arguments select
//! criteria by id, e.g. `cargo test --test acceptance -- c4 c5`.

use std::process::ExitCode;
use std::time::Instant;

use nelf::checkpoint::{state_from_bytes, state_to_bytes};
use nelf::encoding::PosEncConfig;
use nelf::geometry::{slab_interval, to_pluecker, to_two_plane, Ray, TwoPlaneParam, Vec3, VoxelGrid};
use nelf::model::{
    composite, composite_weights, EmbeddingKind, LightFieldModel, Mode, ModelConfig, NetSpec, SampleBatch, VoxelSample,
};
use nelf::scenes::{
    quadrature_render, recipe, HomogeneousSlab, LightFieldDataset, RadianceFieldOracle, Split,
};
use nelf::train::{evaluate, loss_and_grads, TrainConfig, TrainData, TrainState};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets.
const GRAD_CONFIGS: usize = 20;
const GRAD_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const GRAD_ABS_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;
const COMPOSITE_LISTS: usize = 100_000;
const COMPOSITE_TOL: f64 = 1e-12;
const SLAB_SAMPLES: usize = 1024;
const SLAB_TOL: f64 = 1e-6;
const PARAM_MIN_GAP_DB: f64 = 4.0;
const AFFINE_OVER_FEATURE_DB: f64 = 0.5;
const FEATURE_OVER_NONE_DB: f64 = 2.0;
const EVAL_COUNT_RAYS: usize = 10_000;
const SUBDIV_MIN_GAIN_DB: f64 = 1.0;
const GEOMETRY_CASES: usize = 1000;

/// Shared training protocol for the experiment criteria.
#[derive(Debug, Clone, Copy)]
struct Protocol {
    size: usize,
    iters: u64,
    batch: usize,
    width: usize,
    depth: usize,
    bands: usize,
    latent_bands: usize,
    lr: f64,
    seed: u64,
}

const DESK: Protocol = Protocol {
    size: 64,
    iters: 3000,
    batch: 1024,
    width: 128,
    depth: 4,
    bands: 10,
    latent_bands: 6,
    lr: 1e-3,
    seed: 0,
};

type Check = fn() -> Result<String, String>;

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, Check); 9] = [
        ("c1", "gradient correctness", c1_gradients),
        ("c2", "compositing oracle", c2_compositing),
        ("c3", "quadrature oracle", c3_quadrature),
        ("c4", "parameterization ordering", c4_parameterization),
        ("c5", "embedding ablation ordering", c5_ablation),
        ("c6", "evaluation-count contract", c6_eval_counts),
        ("c7", "subdivided beats flat on occlusion", c7_subdivision),
        ("c8", "determinism and resume", c8_determinism),
        ("c9", "geometry properties", c9_geometry),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f == id) {
            continue;
        }
        let t0 = Instant::now();
        let result = check();
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id} {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn verdict(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_ray(rng: &mut ChaCha8Rng, spread: f64) -> Ray {
    loop {
        let o = Vec3::new(rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-3.0..-1.5));
        let d = Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), 1.0);
        if let Ok(r) = Ray::new(o, d) {
            return r;
        }
    }
}

// ---------------------------------------------------------------------------
// c1

fn random_model_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n = rng.random_range(2..6);
    let kind = match rng.random_range(0..3) {
        0 => EmbeddingKind::None,
        1 => EmbeddingKind::Feature(n),
        _ => EmbeddingKind::Affine(n),
    };
    let mut c = ModelConfig::new(kind, rng.random_range(0..4));
    c.embed_net = NetSpec::new(rng.random_range(4..12), rng.random_range(1..4));
    c.color_net = NetSpec::new(rng.random_range(4..12), rng.random_range(1..4));
    c.latent_pe = PosEncConfig::new(rng.random_range(0..3), true);
    if rng.random_bool(0.5) {
        let res = rng.random_range(1..4);
        c.grid = Some(VoxelGrid::new(res, Vec3::new(-1.0, -1.0, -0.5), Vec3::new(1.0, 1.0, 0.5)).unwrap());
        c.voxel_pe = PosEncConfig::new(rng.random_range(0..3), true);
    }
    c
}

fn model_params_mut(m: &mut LightFieldModel<f64>) -> Vec<&mut f64> {
    let mut out: Vec<&mut f64> = Vec::new();
    if let Some(e) = m.embed_net.as_mut() {
        out.extend(e.params_mut());
    }
    out.extend(m.color_net.params_mut());
    out
}

fn c1_gradients() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    let mut kinds = [0usize; 3];
    let mut subdivided = 0;
    for cfg_i in 0..GRAD_CONFIGS {
        let config = random_model_config(&mut rng);
        kinds[match config.embedding {
            EmbeddingKind::None => 0,
            EmbeddingKind::Feature(_) => 1,
            EmbeddingKind::Affine(_) => 2,
        }] += 1;
        subdivided += config.grid.is_some() as usize;
        let mut model = LightFieldModel::<f64>::new(config, cfg_i as u64).map_err(|e| e.to_string())?;
        model.set_ease(rng.random_range(0.3..1.0));
        let mut rays = Vec::new();
        while rays.len() < 6 {
            let s = model.ray_samples(&random_ray(&mut rng, 0.8)).map_err(|e| e.to_string())?;
            if !s.is_empty() {
                rays.push(s);
            }
        }
        let batch = SampleBatch::<f64>::from_rays(rays.iter().map(Vec::as_slice));
        let targets = Array2::from_shape_fn((rays.len(), 3), |_| rng.random_range(0.0..1.0));
        let (_, grads) = loss_and_grads(&model, &batch, &targets).map_err(|e| e.to_string())?;
        let mut analytic: Vec<f64> = grads.embed.iter().flat_map(|g| g.params().copied()).collect();
        analytic.extend(grads.color.params().copied());
        let pattern = |m: &LightFieldModel<f64>| m.forward_batch(&batch, Mode::Train).unwrap().activation_pattern(m);
        let base = pattern(&model);
        for (i, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| -> Result<(f64, bool), String> {
                let mut m = model.clone();
                *model_params_mut(&mut m)[i] += delta;
                let (loss, _) = loss_and_grads(&m, &batch, &targets).map_err(|e| e.to_string())?;
                Ok((loss, pattern(&m) == base))
            };
            let (lp, same_p) = eval(FD_STEP)?;
            let (lm, same_m) = eval(-FD_STEP)?;
            if !(same_p && same_m) {
                // the perturbation crosses a ReLU kink
                skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_ABS_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    verdict(
        worst < GRAD_REL_TOL && checked > 0,
        format!(
            "{GRAD_CONFIGS} configs (none/feature/affine {}/{}/{}, {subdivided} subdivided), {checked} params, \
             {skipped} skipped at kinks, max rel err {worst:.2e} (< {GRAD_REL_TOL:e})",
            kinds[0], kinds[1], kinds[2]
        ),
    )
}

// ---------------------------------------------------------------------------
// c2

fn c2_compositing() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_c, mut worst_w) = (0.0f64, 0.0f64);
    for _ in 0..COMPOSITE_LISTS {
        let len = rng.random_range(0..17);
        let mut t = 0.0;
        let samples: Vec<VoxelSample> = (0..len)
            .map(|i| {
                t += rng.random_range(0.0..1.0);
                let alpha = match rng.random_range(0..10) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.random_range(0.0..1.0),
                };
                VoxelSample { color: [rng.random(), rng.random(), rng.random()], alpha, voxel_index: i, entry_t: t }
            })
            .collect();
        let bg: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let got = composite(&samples, bg).map_err(|e| e.to_string())?;
        // sequential front-to-back over operator
        let mut acc = [0.0; 3];
        let mut trans = 1.0;
        for s in &samples {
            for ch in 0..3 {
                acc[ch] += trans * s.alpha * s.color[ch];
            }
            trans *= 1.0 - s.alpha;
        }
        for ch in 0..3 {
            acc[ch] += trans * bg[ch];
            worst_c = worst_c.max((acc[ch] - got[ch]).abs());
        }
        let alphas: Vec<f64> = samples.iter().map(|s| s.alpha).collect();
        let (w, t_end) = composite_weights(&alphas);
        worst_w = worst_w.max((w.iter().sum::<f64>() + t_end - 1.0).abs());
    }
    verdict(
        worst_c <= COMPOSITE_TOL && worst_w <= COMPOSITE_TOL,
        format!("{COMPOSITE_LISTS} lists, max color err {worst_c:.1e}, max weight-sum err {worst_w:.1e} (<= {COMPOSITE_TOL:e})"),
    )
}

// ---------------------------------------------------------------------------
// c3

fn c3_quadrature() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let cases = 200;
    for _ in 0..cases {
        let (z0, len) = (rng.random_range(-1.0..1.0), rng.random_range(0.05..2.0));
        let slab = HomogeneousSlab {
            min: Vec3::new(-10.0, -10.0, z0),
            max: Vec3::new(10.0, 10.0, z0 + len),
            sigma: rng.random_range(0.01..30.0),
            color: [rng.random(), rng.random(), rng.random()],
        };
        let d = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0);
        let ray = Ray::new(Vec3::new(0.0, 0.0, -3.0), d).unwrap();
        let (t_near, t_far) = slab_interval(&ray, slab.min, slab.max).ok_or("ray misses slab")?;
        let ell = t_far - t_near;
        let expect = slab.color.map(|c| c * (1.0 - (-slab.sigma * ell).exp()));
        let oracle = RadianceFieldOracle { field: slab, t_near, t_far };
        let got = quadrature_render(&oracle, &ray, SLAB_SAMPLES);
        for ch in 0..3 {
            worst = worst.max((got[ch] - expect[ch]).abs());
        }
    }
    verdict(worst <= SLAB_TOL, format!("{cases} slabs at {SLAB_SAMPLES} samples, max err {worst:.1e} (<= {SLAB_TOL:e})"))
}

// ---------------------------------------------------------------------------
// Training experiments

fn desk_config(p: Protocol, kind: EmbeddingKind, ds: &LightFieldDataset) -> TrainConfig {
    let mut m = ModelConfig::new(kind, p.bands);
    m.param = ds.param;
    m.embed_net = NetSpec::new(p.width, p.depth);
    m.color_net = NetSpec::new(p.width, p.depth);
    m.latent_pe = PosEncConfig::new(p.latent_bands, true);
    let mut c = TrainConfig::new(m);
    c.batch_size = p.batch;
    c.total_iters = p.iters;
    c.ease_iters = p.iters * 4 / 10;
    c.lr_start = p.lr;
    c.lr_end = p.lr / 10.0;
    c.seed = p.seed;
    c
}

/// Trains on the training split and returns the mean held-out PSNR.
fn train_holdout_psnr(config: TrainConfig, ds: &LightFieldDataset) -> Result<f64, String> {
    let mut st = TrainState::new(config).map_err(|e| e.to_string())?;
    let data = TrainData::new(&st.model, ds, Split::Train).map_err(|e| e.to_string())?;
    st.run(&data, |_, _| Ok(())).map_err(|e| e.to_string())?;
    Ok(evaluate(&st.model, ds, Split::Holdout, 1).map_err(|e| e.to_string())?.mean_psnr)
}

fn desk_dataset(name: &str, size: usize) -> Result<LightFieldDataset, String> {
    recipe(name).ok_or(format!("no recipe {name}"))?.generate(size, size).map_err(|e| e.to_string())
}

fn c4_parameterization() -> Result<String, String> {
    let mut psnrs = Vec::new();
    for name in ["plane0", "plane1", "plane3"] {
        let ds = desk_dataset(name, DESK.size)?;
        psnrs.push(train_holdout_psnr(desk_config(DESK, EmbeddingKind::None, &ds), &ds)?);
    }
    let (p0, p1, p3) = (psnrs[0], psnrs[1], psnrs[2]);
    verdict(
        p0 > p1 && p1 > p3 && p0 - p3 >= PARAM_MIN_GAP_DB,
        format!("held-out PSNR offset 0/1/3 = {p0:.2}/{p1:.2}/{p3:.2} dB, gap {:.2} dB (>= {PARAM_MIN_GAP_DB})", p0 - p3),
    )
}

const ABLATION_LATENT: usize = 16;

fn c5_ablation() -> Result<String, String> {
    let ds = desk_dataset("plane3", DESK.size)?;
    let none = train_holdout_psnr(desk_config(DESK, EmbeddingKind::None, &ds), &ds)?;
    let feature = train_holdout_psnr(desk_config(DESK, EmbeddingKind::Feature(ABLATION_LATENT), &ds), &ds)?;
    let affine = train_holdout_psnr(desk_config(DESK, EmbeddingKind::Affine(ABLATION_LATENT), &ds), &ds)?;
    verdict(
        affine >= feature + AFFINE_OVER_FEATURE_DB && feature >= none + FEATURE_OVER_NONE_DB,
        format!(
            "held-out PSNR none/feature/affine = {none:.2}/{feature:.2}/{affine:.2} dB \
             (need affine-feature >= {AFFINE_OVER_FEATURE_DB}, feature-none >= {FEATURE_OVER_NONE_DB})"
        ),
    )
}

// ---------------------------------------------------------------------------
// c6

fn c6_eval_counts() -> Result<String, String> {
    let flat = LightFieldModel::<f32>::new(ModelConfig::new(EmbeddingKind::Affine(4), 2), 0).map_err(|e| e.to_string())?;
    let cam = recipe("plane0").unwrap().grid.position(1, 2);
    let camera = nelf::geometry::Camera {
        origin: cam,
        window_z: 0.0,
        window_min: [-1.0, -1.0],
        window_max: [1.0, 1.0],
    };
    let (w, h) = (37, 23);
    let (_, stats) = flat.render_image(&camera, w, h, 1).map_err(|e| e.to_string())?;
    if stats.color_evals != w * h {
        return Err(format!("flat render of {w}x{h} made {} color evaluations", stats.color_evals));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut detail = format!("flat {w}x{h}: {} evals", stats.color_evals);
    for n in [4usize, 8] {
        let mut c = ModelConfig::new(EmbeddingKind::Affine(4), 2);
        c.grid = Some(VoxelGrid::new(n, Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap());
        let model = LightFieldModel::<f32>::new(c, 0).map_err(|e| e.to_string())?;
        let rays: Vec<Ray> = (0..EVAL_COUNT_RAYS)
            .map(|_| {
                // origins both outside and inside the grid, any direction with d.z > 0
                let o = Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-3.0..0.5));
                let d = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.05..2.0));
                Ray::new(o, d).unwrap()
            })
            .collect();
        let mut max_per_ray = 0;
        let mut sum = 0;
        for r in &rays {
            let k = model.ray_samples(r).map_err(|e| e.to_string())?.len();
            max_per_ray = max_per_ray.max(k);
            sum += k;
        }
        let (_, stats) = model.render_rays(&rays).map_err(|e| e.to_string())?;
        if stats.color_evals != sum {
            return Err(format!("N={n}: render counted {} evals, samples {sum}", stats.color_evals));
        }
        let bound = 3 * n - 2;
        if max_per_ray > bound {
            return Err(format!("N={n}: a ray used {max_per_ray} evals > {bound}"));
        }
        detail.push_str(&format!("; N={n}: max {max_per_ray} <= {bound} over {EVAL_COUNT_RAYS} rays"));
    }
    Ok(detail)
}

// ---------------------------------------------------------------------------
// c7

const OCCLUDER_GRID_RES: usize = 4;
const OCCLUDER_LATENT: usize = 16;
const OCCLUDER_VOXEL_BANDS: usize = 2;

fn c7_subdivision() -> Result<String, String> {
    let ds = desk_dataset("two-plane-occluder", DESK.size)?;
    let flat_cfg = desk_config(DESK, EmbeddingKind::Affine(OCCLUDER_LATENT), &ds);
    let mut sub_cfg = flat_cfg.clone();
    sub_cfg.model.grid = Some(
        VoxelGrid::new(OCCLUDER_GRID_RES, Vec3::new(-2.0, -2.0, -0.6), Vec3::new(2.0, 2.0, 0.6)).map_err(|e| e.to_string())?,
    );
    sub_cfg.model.voxel_pe = PosEncConfig::new(OCCLUDER_VOXEL_BANDS, true);
    let flat = train_holdout_psnr(flat_cfg, &ds)?;
    let sub = train_holdout_psnr(sub_cfg, &ds)?;
    verdict(
        sub >= flat + SUBDIV_MIN_GAIN_DB,
        format!(
            "{} train views; held-out PSNR flat/{OCCLUDER_GRID_RES}^3 = {flat:.2}/{sub:.2} dB, gain {:.2} (>= {SUBDIV_MIN_GAIN_DB})",
            ds.view_indices(Split::Train).len(),
            sub - flat
        ),
    )
}

// ---------------------------------------------------------------------------
// c8

fn c8_determinism() -> Result<String, String> {
    let ds = desk_dataset("plane1", 16)?;
    let p = Protocol { iters: 120, batch: 256, width: 32, depth: 3, bands: 4, latent_bands: 2, seed: 11, ..DESK };
    let config = desk_config(p, EmbeddingKind::Affine(4), &ds);
    let straight = |config: TrainConfig| -> Result<(Vec<u8>, Vec<f64>), String> {
        let mut st = TrainState::new(config).map_err(|e| e.to_string())?;
        let data = TrainData::new(&st.model, &ds, Split::Train).map_err(|e| e.to_string())?;
        st.run(&data, |_, _| Ok(())).map_err(|e| e.to_string())?;
        Ok((state_to_bytes(&st).map_err(|e| e.to_string())?, st.losses.clone()))
    };
    let (a, trace_a) = straight(config.clone())?;
    let (b, trace_b) = straight(config.clone())?;
    if a != b || trace_a != trace_b {
        return Err("two seeded runs differ".into());
    }
    let mut st = TrainState::new(config).map_err(|e| e.to_string())?;
    let data = TrainData::new(&st.model, &ds, Split::Train).map_err(|e| e.to_string())?;
    for _ in 0..p.iters / 2 {
        st.step(&data).map_err(|e| e.to_string())?;
    }
    let mut resumed = state_from_bytes(&state_to_bytes(&st).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    resumed.run(&data, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let c = state_to_bytes(&resumed).map_err(|e| e.to_string())?;
    verdict(
        c == a && resumed.losses == trace_a,
        format!(
            "{} iterations: repeat run and resume-at-{} match bitwise ({} checkpoint bytes)",
            p.iters,
            p.iters / 2,
            a.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// c9

fn c9_geometry() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let param = TwoPlaneParam::new(-1.0, 0.5).unwrap();
    let (mut slide_err, mut plucker_err) = (0.0f64, 0.0f64);
    let mut grid_rays = 0;
    for _ in 0..GEOMETRY_CASES {
        let ray = random_ray(&mut rng, 2.0);
        let t = rng.random_range(-2.0..2.0);
        let slid = ray.slid(t);
        let (a, b) = (to_two_plane(&ray, &param).unwrap(), to_two_plane(&slid, &param).unwrap());
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            slide_err = slide_err.max((x - y).abs());
        }
        let (pa, pb) = (to_pluecker(&ray), to_pluecker(&slid));
        slide_err = slide_err.max((pa.moment - pb.moment).norm()).max((pa.direction - pb.direction).norm());
        plucker_err = plucker_err.max(pa.direction.dot(pa.moment).abs());
    }
    if slide_err > 1e-9 || plucker_err > 1e-9 {
        return Err(format!("sliding err {slide_err:.1e}, Pluecker d.m {plucker_err:.1e}"));
    }
    let mut worst_t = 0.0f64;
    for case in 0..GEOMETRY_CASES {
        let n = rng.random_range(1..7);
        let lo = Vec3::new(rng.random_range(-2.0..-0.5), rng.random_range(-2.0..-0.5), rng.random_range(-1.0..-0.2));
        let hi = Vec3::new(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.2..1.0));
        let grid = VoxelGrid::new(n, lo, hi).unwrap();
        let o = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        // mostly aim through the grid so the comparison is not vacuous
        let d = if rng.random_bool(0.8) {
            let target = Vec3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z));
            target - o
        } else {
            Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        };
        let Ok(ray) = Ray::new(o, d) else { continue };
        let hits = grid.voxels_intersected(&ray);
        grid_rays += !hits.is_empty() as usize;
        let mut brute: Vec<(usize, f64, f64)> = (0..grid.num_voxels())
            .filter_map(|i| {
                let (vlo, vhi) = grid.voxel_bounds(i);
                slab_interval(&ray, vlo, vhi).filter(|(a, b)| b - a > 1e-9).map(|(a, b)| (i, a, b))
            })
            .collect();
        brute.sort_by(|x, y| x.1.total_cmp(&y.1));
        let traversed: Vec<_> = hits.iter().filter(|h| h.exit_t - h.entry_t > 1e-9).collect();
        if traversed.len() != brute.len() {
            return Err(format!("case {case}: traversal found {} voxels, brute force {}", traversed.len(), brute.len()));
        }
        for (h, b) in traversed.iter().zip(&brute) {
            if h.index != b.0 {
                return Err(format!("case {case}: voxel order differs ({} vs {})", h.index, b.0));
            }
            worst_t = worst_t.max((h.entry_t - b.1).abs()).max((h.exit_t - b.2).abs());
        }
        if hits.windows(2).any(|w| w[1].entry_t < w[0].entry_t) {
            return Err(format!("case {case}: hits not front to back"));
        }
    }
    verdict(
        worst_t < 1e-9,
        format!(
            "{GEOMETRY_CASES} cases each: sliding err {slide_err:.1e}, max |d.m| {plucker_err:.1e}, \
             traversal = brute force on {grid_rays} grid-hitting rays (interval err {worst_t:.1e})"
        ),
    )
}
