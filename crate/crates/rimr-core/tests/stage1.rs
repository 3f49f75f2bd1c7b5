//! Oracle tests for the volume-to-depth networks: shape contracts, the
//! range-maxima skip connection against a brute-force sort, hand-composed
//! loss fixtures, gradient isolation between the adversaries, and full
//! finite-difference checks of both losses at 64-bit.

use rand::Rng;
use rimr_core::geometry::{CameraModel, DepthImage, Pose};
use rimr_core::gradcheck::{finite_difference, relative_error, FD_REL_TOL, FD_STEP};
use rimr_core::graph::Graph;
use rimr_core::nn::{clear_grads, harvest_grads, Adam, FwdCtx, Parameter};
use rimr_core::radar::{Bounds3, Frame, IntensityMap, RadarConfig};
use rimr_core::rng::stream;
use rimr_core::stage1::{
    generate, prepare_map, prepare_target, skip_feature, stage1_d_loss, stage1_g_loss, PerceptualNet,
    Stage1Config, Stage1Discriminator, Stage1Generator, Stage1Weights,
};
use rimr_core::tensor::Tensor;
use rimr_core::geometry::Vec3;
use std::collections::BTreeSet;

fn random_volume_tensor(dims: [usize; 3], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, "s1-volume", 0);
    let len = dims.iter().product::<usize>();
    Tensor::new(vec![1, dims[0], dims[1], dims[2]], (0..len).map(|_| rng.gen_range(0.0..1.0)).collect())
        .unwrap()
}

fn random_image_tensor(hw: [usize; 2], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, "s1-image", 0);
    Tensor::new(vec![1, hw[0], hw[1]], (0..hw[0] * hw[1]).map(|_| rng.gen_range(0.0..0.5)).collect())
        .unwrap()
}

fn tiny_nets(seed: u64) -> (Stage1Generator<f64>, Stage1Discriminator<f64>, PerceptualNet<f64>) {
    let cfg = Stage1Config::tiny();
    let gen = Stage1Generator::new(cfg.clone(), seed).unwrap();
    let disc = Stage1Discriminator::new(cfg.clone(), seed ^ 0x5a5a).unwrap();
    let perc = PerceptualNet::for_config(&cfg);
    (gen, disc, perc)
}

fn cartesian_map(dims: [usize; 3], values: Vec<f32>) -> IntensityMap {
    IntensityMap {
        frame: Frame::Cartesian,
        dims,
        values,
        config: RadarConfig::default(),
        sensor_pose: Pose::IDENTITY,
        bounds: Some(Bounds3::new(Vec3::new(-1.0, 0.1, -1.0), Vec3::new(1.0, 2.0, 1.0)).unwrap()),
    }
}

#[test]
fn full_size_networks_produce_configured_shapes() {
    let cfg = Stage1Config::default();
    let mut gen = Stage1Generator::<f32>::new(cfg.clone(), 7).unwrap();
    let mut rng = stream(7, "s1-full", 0);
    let len = cfg.input_dims.iter().product::<usize>();
    let map = Tensor::<f32>::new(
        vec![1, cfg.input_dims[0], cfg.input_dims[1], cfg.input_dims[2]],
        (0..len).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let depth = generate(&mut gen, &map, FwdCtx::eval()).unwrap();
    assert_eq!(depth.shape(), &[1, 128, 128]);
    assert!(depth.data().iter().all(|v| v.is_finite() && *v >= 0.0));

    let mut disc = Stage1Discriminator::<f32>::new(cfg, 8).unwrap();
    let mut g = Graph::new();
    let m = g.constant(map);
    let img = g.constant(depth);
    let score = disc.forward(&mut g, m, img, FwdCtx::eval()).unwrap();
    let s = g.value(score).item().unwrap();
    assert!(s > 0.0 && s < 1.0, "score {s}");
}

#[test]
fn generator_depth_is_nonnegative_and_input_scale_invariant() {
    let cfg = Stage1Config::tiny();
    let mut gen = Stage1Generator::<f64>::new(cfg.clone(), 3).unwrap();
    let mut rng = stream(3, "s1-scale", 0);
    let values: Vec<f32> = (0..128).map(|_| rng.gen_range(0.0f32..5.0)).collect();
    let base = cartesian_map(cfg.input_dims, values.clone());
    let scaled = cartesian_map(cfg.input_dims, values.iter().map(|v| v * 37.5).collect());

    let out_a = generate(&mut gen, &prepare_map(&base, &cfg).unwrap(), FwdCtx::eval()).unwrap();
    let out_b = generate(&mut gen, &prepare_map(&scaled, &cfg).unwrap(), FwdCtx::eval()).unwrap();
    for (a, b) in out_a.data().iter().zip(out_b.data()) {
        assert!(*a >= 0.0);
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn zero_volume_yields_finite_depth() {
    let cfg = Stage1Config::tiny();
    let mut gen = Stage1Generator::<f64>::new(cfg.clone(), 5).unwrap();
    let zero = cartesian_map(cfg.input_dims, vec![0.0; 128]);
    let prepared = prepare_map::<f64>(&zero, &cfg).unwrap();
    assert!(prepared.data().iter().all(|v| *v == 0.0));
    let out = generate(&mut gen, &prepared, FwdCtx::eval()).unwrap();
    assert!(out.data().iter().all(|v| v.is_finite()));
}

#[test]
fn networks_reject_mismatched_shapes() {
    let cfg = Stage1Config::tiny();
    let mut gen = Stage1Generator::<f64>::new(cfg.clone(), 1).unwrap();
    let bad = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
    assert!(generate(&mut gen, &bad, FwdCtx::eval()).is_err());

    let mut disc = Stage1Discriminator::<f64>::new(cfg.clone(), 1).unwrap();
    let mut g = Graph::new();
    let map = g.constant(random_volume_tensor(cfg.input_dims, 2));
    let wrong_img = g.constant(Tensor::<f64>::zeros(&[1, 3, 3]));
    assert!(disc.forward(&mut g, map, wrong_img, FwdCtx::eval()).is_err());

    let mut polar = cartesian_map(cfg.input_dims, vec![0.0; 128]);
    polar.frame = Frame::Polar;
    polar.bounds = None;
    assert!(prepare_map::<f64>(&polar, &cfg).is_err());

    let cam = CameraModel::new(8.0, 3, 3, Pose::IDENTITY).unwrap();
    let img = DepthImage::new(3, 3, vec![0.5; 9], cam).unwrap();
    assert!(prepare_target::<f64>(&img, &cfg).is_err());
}

#[test]
fn skip_feature_matches_brute_force_sort() {
    let shapes: [[usize; 3]; 4] = [[4, 4, 16], [2, 3, 8], [3, 2, 11], [5, 5, 9]];
    for trial in 0..50u64 {
        let dims = shapes[trial as usize % shapes.len()];
        let k = 8.min(dims[2]);
        let map = random_volume_tensor(dims, 1000 + trial);
        // Once at native resolution, once upsampled 2× to exercise the
        // nearest-neighbour path.
        for scale in [1usize, 2] {
            let (oh, ow) = (dims[0] * scale, dims[1] * scale);
            let mut g = Graph::new();
            let m = g.constant(map.clone());
            let out = skip_feature(&mut g, m, k, oh, ow).unwrap();
            let got = g.value(out);
            assert_eq!(got.shape(), &[k, oh, ow]);
            for c in 0..k {
                for y in 0..oh {
                    for x in 0..ow {
                        let (sy, sx) = (y * dims[0] / oh, x * dims[1] / ow);
                        let mut lane: Vec<f64> = (0..dims[2])
                            .map(|r| map.data()[(sy * dims[1] + sx) * dims[2] + r])
                            .collect();
                        lane.sort_by(|a, b| b.partial_cmp(a).unwrap());
                        let want = lane[c];
                        let have = got.data()[(c * oh + y) * ow + x];
                        assert_eq!(have, want, "cell ({c},{y},{x}) of trial {trial}");
                    }
                }
            }
        }
    }
}

#[test]
fn discriminator_score_is_repeatable_and_inside_unit_interval() {
    let cfg = Stage1Config::tiny();
    let map = random_volume_tensor(cfg.input_dims, 21);
    let img = random_image_tensor(cfg.image_hw(), 22);
    let mut scores = Vec::new();
    for _ in 0..2 {
        let mut disc = Stage1Discriminator::<f64>::new(cfg.clone(), 23).unwrap();
        let mut g = Graph::new();
        let m = g.constant(map.clone());
        let i = g.constant(img.clone());
        let s = disc.forward(&mut g, m, i, FwdCtx::eval()).unwrap();
        scores.push(g.value(s).item().unwrap());
    }
    assert_eq!(scores[0], scores[1]);
    assert!(scores[0] > 0.0 && scores[0] < 1.0);
}

#[test]
fn generator_loss_matches_hand_composed_fixture() {
    let (mut gen, mut disc, perc) = tiny_nets(31);
    disc.pin_score_to_half();
    let cfg = gen.cfg.clone();
    let map = random_volume_tensor(cfg.input_dims, 32);

    // First pass captures the generated image so the target can be offset
    // from it by exactly 0.1 everywhere.
    let dummy = Tensor::<f64>::zeros(&[1, cfg.image_hw()[0], cfg.image_hw()[1]]);
    let mut g0 = Graph::new();
    let first = stage1_g_loss(&mut g0, &mut gen, &mut disc, &perc, Stage1Weights::default(), &map, &dummy)
        .unwrap();
    let generated = g0.value(first.generated).clone();
    let target = generated.map(|v| v - 0.1);

    let mut g = Graph::new();
    let loss =
        stage1_g_loss(&mut g, &mut gen, &mut disc, &perc, Stage1Weights::default(), &map, &target).unwrap();
    let adv = g.value(loss.adversarial).item().unwrap();
    let l1 = g.value(loss.l1).item().unwrap();
    let p = g.value(loss.perceptual).item().unwrap();
    let total = g.value(loss.total).item().unwrap();

    // Pinned discriminator scores 1/2, so the adversarial term is (1/2)^2.
    assert!((adv - 0.25).abs() < 1e-12, "adversarial {adv}");
    assert!((l1 - 0.1).abs() < 1e-9, "l1 {l1}");

    // Recompute the perceptual distance outside the loss graph.
    let mut gp = Graph::new();
    let fake_c = gp.constant(generated);
    let true_c = gp.constant(target);
    let fake_feats = perc.features(&mut gp, fake_c).unwrap();
    let true_feats = perc.features(&mut gp, true_c).unwrap();
    let mut expected_p = 0.0;
    for (&f, &t) in fake_feats.iter().zip(true_feats.iter()) {
        let (fv, tv) = (gp.value(f), gp.value(t));
        let mse: f64 =
            fv.data().iter().zip(tv.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / fv.len() as f64;
        expected_p += mse;
    }
    expected_p /= fake_feats.len() as f64;
    assert!((p - expected_p).abs() <= 1e-9 * expected_p.max(1.0), "perceptual {p} vs {expected_p}");

    let expected_total = 0.25 + 1000.0 * l1 + 20.0 * p;
    assert!(
        (total - expected_total).abs() <= 1e-6 * expected_total.abs(),
        "total {total} vs {expected_total}"
    );
}

#[test]
fn generator_loss_with_zero_weights_is_pure_adversarial() {
    let (mut gen, mut disc, perc) = tiny_nets(41);
    let cfg = gen.cfg.clone();
    let map = random_volume_tensor(cfg.input_dims, 42);
    let target = random_image_tensor(cfg.image_hw(), 43);
    let mut g = Graph::new();
    let zero_weights = Stage1Weights { l1: 0.0, perceptual: 0.0 };
    let loss = stage1_g_loss(&mut g, &mut gen, &mut disc, &perc, zero_weights, &map, &target).unwrap();
    assert_eq!(g.value(loss.total).item().unwrap(), g.value(loss.adversarial).item().unwrap());
}

#[test]
fn discriminator_loss_matches_hand_value() {
    let (mut gen, mut disc, _) = tiny_nets(51);
    let cfg = gen.cfg.clone();
    let map = random_volume_tensor(cfg.input_dims, 52);
    let real = random_image_tensor(cfg.image_hw(), 53);
    let fake = generate(&mut gen, &map, FwdCtx::train_frozen()).unwrap();

    let mut g = Graph::new();
    let loss = stage1_d_loss(&mut g, &mut disc, &map, &real, &fake).unwrap();
    let (r, f) = (g.value(loss.real_score).item().unwrap(), g.value(loss.fake_score).item().unwrap());
    let total = g.value(loss.total).item().unwrap();
    let expected = 0.5 * ((r - 1.0) * (r - 1.0) + f * f);
    assert!((total - expected).abs() < 1e-12, "{total} vs {expected}");

    // A pinned discriminator answers 1/2 on both, so the loss is exactly 1/4.
    disc.pin_score_to_half();
    let mut g2 = Graph::new();
    let pinned = stage1_d_loss(&mut g2, &mut disc, &map, &real, &fake).unwrap();
    assert!((g2.value(pinned.total).item().unwrap() - 0.25).abs() < 1e-12);
}

#[test]
fn generator_loss_trains_only_the_generator() {
    let (mut gen, mut disc, perc) = tiny_nets(61);
    let cfg = gen.cfg.clone();
    let map = random_volume_tensor(cfg.input_dims, 62);
    let target = random_image_tensor(cfg.image_hw(), 63);
    let mut g = Graph::new();
    let loss =
        stage1_g_loss(&mut g, &mut gen, &mut disc, &perc, Stage1Weights::default(), &map, &target).unwrap();
    g.backward(loss.total).unwrap();
    clear_grads(gen.parameters_mut());
    clear_grads(disc.parameters_mut());
    harvest_grads(&g, gen.parameters_mut());
    harvest_grads(&g, disc.parameters_mut());
    for p in gen.parameters() {
        if p.trainable {
            assert!(p.grad.is_some(), "generator parameter {} missing a gradient", p.name);
        }
    }
    for p in disc.parameters() {
        assert!(p.grad.is_none(), "discriminator parameter {} unexpectedly received a gradient", p.name);
    }
}

#[test]
fn discriminator_loss_ignores_generator_parameters() {
    let (mut gen, mut disc, _) = tiny_nets(71);
    let cfg = gen.cfg.clone();
    let map = random_volume_tensor(cfg.input_dims, 72);
    let real = random_image_tensor(cfg.image_hw(), 73);
    let fake = generate(&mut gen, &map, FwdCtx::train_frozen()).unwrap();
    let mut g = Graph::new();
    let loss = stage1_d_loss(&mut g, &mut disc, &map, &real, &fake).unwrap();
    g.backward(loss.total).unwrap();
    clear_grads(gen.parameters_mut());
    clear_grads(disc.parameters_mut());
    harvest_grads(&g, gen.parameters_mut());
    harvest_grads(&g, disc.parameters_mut());
    for p in gen.parameters() {
        assert!(p.grad.is_none(), "generator parameter {} leaked into the discriminator loss", p.name);
    }
    for p in disc.parameters() {
        if p.trainable {
            assert!(p.grad.is_some(), "discriminator parameter {} missing a gradient", p.name);
        }
    }
}

#[test]
fn zero_learning_rate_step_is_identity() {
    let (mut gen, mut disc, perc) = tiny_nets(81);
    let cfg = gen.cfg.clone();
    let map = random_volume_tensor(cfg.input_dims, 82);
    let target = random_image_tensor(cfg.image_hw(), 83);
    let mut g = Graph::new();
    let loss =
        stage1_g_loss(&mut g, &mut gen, &mut disc, &perc, Stage1Weights::default(), &map, &target).unwrap();
    g.backward(loss.total).unwrap();
    clear_grads(gen.parameters_mut());
    harvest_grads(&g, gen.parameters_mut());

    let before: Vec<Tensor<f64>> = gen.parameters().iter().map(|p| p.value.clone()).collect();
    let mut opt = Adam::new(0.0);
    opt.step(gen.parameters_mut()).unwrap();
    for (p, b) in gen.parameters().iter().zip(before.iter()) {
        assert_eq!(p.value.data(), b.data(), "parameter {} moved under zero learning rate", p.name);
    }
}

#[test]
fn parameter_names_are_unique_across_both_networks() {
    let (gen, disc, _) = tiny_nets(91);
    let mut names = BTreeSet::new();
    let all: Vec<&Parameter<f64>> = gen.parameters().into_iter().chain(disc.parameters()).collect();
    for p in &all {
        assert!(names.insert(p.name.clone()), "duplicate parameter name {}", p.name);
    }
    assert_eq!(names.len(), all.len());
}

fn set_value(params: Vec<&mut Parameter<f64>>, name: &str, value: &Tensor<f64>) {
    for p in params {
        if p.name == name {
            p.value = value.clone();
            return;
        }
    }
    panic!("unknown parameter {name}");
}

#[test]
fn generator_loss_gradients_match_finite_differences() {
    for seed in 1..=5u64 {
        let (mut gen, mut disc, perc) = tiny_nets(seed);
        let cfg = gen.cfg.clone();
        let map = random_volume_tensor(cfg.input_dims, seed * 10);
        let target = random_image_tensor(cfg.image_hw(), seed * 10 + 1);

        let mut g = Graph::new();
        let loss = stage1_g_loss(&mut g, &mut gen, &mut disc, &perc, Stage1Weights::default(), &map, &target)
            .unwrap();
        g.backward(loss.total).unwrap();
        clear_grads(gen.parameters_mut());
        harvest_grads(&g, gen.parameters_mut());
        let analytic: Vec<(String, Tensor<f64>, Tensor<f64>)> = gen
            .parameters()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), p.value.clone(), p.grad.clone().expect("gradient")))
            .collect();

        for (name, x0, grad) in &analytic {
            let mut f = |probe: &Tensor<f64>| {
                set_value(gen.parameters_mut(), name, probe);
                let mut g2 = Graph::new();
                let l = stage1_g_loss(
                    &mut g2,
                    &mut gen,
                    &mut disc,
                    &perc,
                    Stage1Weights::default(),
                    &map,
                    &target,
                )
                .unwrap();
                g2.value(l.total).item().unwrap()
            };
            let fd = finite_difference(&mut f, x0, FD_STEP);
            set_value(gen.parameters_mut(), name, x0);
            let err = relative_error(grad, &fd);
            assert!(err < FD_REL_TOL, "seed {seed}, {name}: relative error {err:.3e}");
        }
    }
}

#[test]
fn discriminator_loss_gradients_match_finite_differences() {
    for seed in 1..=5u64 {
        let (mut gen, mut disc, _) = tiny_nets(seed + 100);
        let cfg = gen.cfg.clone();
        let map = random_volume_tensor(cfg.input_dims, seed * 20);
        let real = random_image_tensor(cfg.image_hw(), seed * 20 + 1);
        let fake = generate(&mut gen, &map, FwdCtx::train_frozen()).unwrap();

        let mut g = Graph::new();
        let loss = stage1_d_loss(&mut g, &mut disc, &map, &real, &fake).unwrap();
        g.backward(loss.total).unwrap();
        clear_grads(disc.parameters_mut());
        harvest_grads(&g, disc.parameters_mut());
        let analytic: Vec<(String, Tensor<f64>, Tensor<f64>)> = disc
            .parameters()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), p.value.clone(), p.grad.clone().expect("gradient")))
            .collect();

        for (name, x0, grad) in &analytic {
            let mut f = |probe: &Tensor<f64>| {
                set_value(disc.parameters_mut(), name, probe);
                let mut g2 = Graph::new();
                let l = stage1_d_loss(&mut g2, &mut disc, &map, &real, &fake).unwrap();
                g2.value(l.total).item().unwrap()
            };
            let fd = finite_difference(&mut f, x0, FD_STEP);
            set_value(disc.parameters_mut(), name, x0);
            let err = relative_error(grad, &fd);
            assert!(err < FD_REL_TOL, "seed {seed}, {name}: relative error {err:.3e}");
        }
    }
}
