use nelf::encoding::PosEncConfig;
use nelf::geometry::{Vec3, VoxelGrid};
use nelf::model::{EmbeddingKind, LocalSample, ModelConfig, NetSpec};
use nelf::scenes::{recipe, Split};
use nelf::train::{evaluate, render_view, sample_batch, Sampler, TrainConfig, TrainData, TrainState};

fn tiny(kind: EmbeddingKind) -> ModelConfig {
    let mut m = ModelConfig::new(kind, 2);
    m.embed_net = NetSpec::new(16, 2);
    m.color_net = NetSpec::new(16, 2);
    m.latent_pe = PosEncConfig::new(1, true);
    m
}

#[test]
fn single_pixel_is_memorized() {
    for kind in [EmbeddingKind::None, EmbeddingKind::Feature(4), EmbeddingKind::Affine(4)] {
        let mut c = TrainConfig::new(tiny(kind));
        c.total_iters = 2000;
        c.ease_iters = 0;
        c.batch_size = 1;
        c.lr_start = 1e-2;
        c.lr_end = 1e-3;
        let mut st = TrainState::new(c).unwrap();
        let data = TrainData::from_parts(
            vec![vec![LocalSample { voxel: 0, coords: [0.1, -0.2, 0.3, 0.05] }]],
            vec![[0.8, 0.25, 0.4]],
        );
        let mut best = f64::INFINITY;
        st.run(&data, |_, s| {
            best = best.min(s.loss);
            Ok(())
        })
        .unwrap();
        assert!(best < 1e-4, "{kind}: best loss {best:e}");
    }
}

#[test]
fn training_improves_held_out_views() {
    let ds = recipe("plane0").unwrap().generate(16, 16).unwrap();
    let mut m = tiny(EmbeddingKind::None);
    m.param = ds.param;
    m.ray_pe = PosEncConfig::new(4, true);
    m.color_net = NetSpec::new(48, 3);
    let mut c = TrainConfig::new(m);
    c.total_iters = 400;
    c.ease_iters = 100;
    c.batch_size = 256;
    c.lr_start = 3e-3;
    let mut st = TrainState::new(c).unwrap();
    let before = evaluate(&st.model, &ds, Split::Holdout, 1).unwrap();
    let data = TrainData::new(&st.model, &ds, Split::Train).unwrap();
    st.run(&data, |_, _| Ok(())).unwrap();
    let after = evaluate(&st.model, &ds, Split::Holdout, 2).unwrap();
    assert_eq!(after.split, "holdout");
    assert_eq!(after.views.len(), ds.view_indices(Split::Holdout).len());
    assert!(after.mean_psnr > before.mean_psnr + 3.0, "{} -> {}", before.mean_psnr, after.mean_psnr);
    let img = render_view(&st.model, &ds, after.views[0].view, 1).unwrap();
    assert_eq!((img.width, img.height), (16, 16));
}

#[test]
fn subdivided_training_learns_varying_alpha() {
    let ds = recipe("two-plane-occluder").unwrap().generate(16, 16).unwrap();
    let mut m = tiny(EmbeddingKind::Affine(4));
    m.param = ds.param;
    m.grid = Some(VoxelGrid::new(2, Vec3::new(-2.0, -2.0, -0.6), Vec3::new(2.0, 2.0, 0.6)).unwrap());
    m.voxel_pe = PosEncConfig::new(1, true);
    let mut c = TrainConfig::new(m);
    c.total_iters = 300;
    c.ease_iters = 0;
    c.batch_size = 128;
    c.lr_start = 3e-3;
    let mut st = TrainState::new(c).unwrap();
    let data = TrainData::new(&st.model, &ds, Split::Train).unwrap();
    let mut first = None;
    let mut last = 0.0;
    st.run(&data, |_, s| {
        first.get_or_insert(s.loss);
        last = s.loss;
        assert!(s.evals_per_ray >= 1.0 && s.evals_per_ray <= 4.0);
        Ok(())
    })
    .unwrap();
    assert!(last < first.unwrap());
    let (batch, _) = data.batch::<f32>(&(0..data.len()).step_by(7).collect::<Vec<_>>());
    let fwd = st.model.forward_batch(&batch, nelf::model::Mode::Inference).unwrap();
    let (_, alphas) = fwd.sample_outputs();
    let lo = alphas.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = alphas.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    assert!(hi - lo > 0.05, "alpha range [{lo}, {hi}]");
}

#[test]
fn sampler_draws_pixels_uniformly() {
    let n = 50;
    let draws = 200_000;
    let data = TrainData::from_parts(
        (0..n).map(|i| vec![LocalSample { voxel: 0, coords: [i as f64, 0.0, 0.0, 0.0] }]).collect(),
        vec![[0.0; 3]; n],
    );
    let mut sampler = Sampler::new(3, false);
    let mut counts = vec![0usize; n];
    for _ in 0..draws / 1000 {
        let (idx, _) = sample_batch(&data, &mut sampler, 1000).unwrap();
        for i in idx {
            counts[i] += 1;
        }
    }
    let p = 1.0 / n as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() < 5.0 * sd, "pixel {i} drawn {c} times, expected {mean}");
    }
}

#[test]
fn nan_inputs_surface_as_non_finite_loss() {
    let mut st = TrainState::new(TrainConfig::new(tiny(EmbeddingKind::None))).unwrap();
    let data = TrainData::from_parts(
        vec![vec![LocalSample { voxel: 0, coords: [f64::NAN, 0.0, 0.0, 0.0] }]],
        vec![[0.5; 3]],
    );
    let err = st.step(&data).unwrap_err();
    assert!(matches!(err, nelf::train::TrainError::NonFiniteLoss { iteration: 0, .. }), "{err}");
}
