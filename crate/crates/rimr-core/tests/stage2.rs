//! Oracle tests for the cloud-refinement networks: permutation invariance of
//! every set-valued input, pooled-feature semantics (duplicates ignored,
//! outliers seen), loss composition against independently recomputed terms,
//! gradient isolation, finite-difference checks, and a short training run
//! that must shrink the chamfer term.

use rand::seq::SliceRandom;
use rand::Rng;
use rimr_core::geometry::{PointCloud, Vec3};
use rimr_core::gradcheck::{finite_difference, relative_error, FD_REL_TOL, FD_STEP};
use rimr_core::graph::Graph;
use rimr_core::metrics::{chamfer, cloud_iou, cloud_from_tensor_pub, tensor_from_cloud};
use rimr_core::nn::{clear_grads, harvest_grads, Adam, FwdCtx, Parameter};
use rimr_core::rng::stream;
use rimr_core::stage2::{
    resample, stage2_d_loss, stage2_g_loss, stage2_g_loss_surrogate, Stage2Config, Stage2Discriminator,
    Stage2Generator, Stage2Weights,
};
use rimr_core::tensor::Tensor;

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = stream(seed, "s2-cloud", 0);
    PointCloud::new(
        (0..n)
            .map(|_| {
                Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5))
            })
            .collect(),
    )
}

fn shuffled(cloud: &PointCloud, seed: u64) -> PointCloud {
    let mut pts = cloud.points.clone();
    pts.shuffle(&mut stream(seed, "s2-shuffle", 0));
    PointCloud::new(pts)
}

fn tiny_nets(seed: u64) -> (Stage2Generator<f64>, Stage2Discriminator<f64>) {
    let cfg = Stage2Config::tiny();
    let gen = Stage2Generator::new(cfg.clone(), seed).unwrap();
    let disc = Stage2Discriminator::new(cfg, seed ^ 0x5a5a).unwrap();
    (gen, disc)
}

#[test]
fn full_size_generator_emits_configured_point_count() {
    let cfg = Stage2Config::default();
    let gen = Stage2Generator::<f32>::new(cfg, 7).unwrap();
    let refined = gen.refine(&random_cloud(500, 7)).unwrap();
    assert_eq!(refined.len(), 2048);
    assert!(refined.points.iter().all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite()));
}

#[test]
fn global_feature_is_permutation_invariant() {
    let mut cfg = Stage2Config::tiny();
    cfg.input_points = 16;
    let gen = Stage2Generator::<f64>::new(cfg, 11).unwrap();
    let cloud = random_cloud(16, 12);
    let base = gen.encode(&cloud).unwrap();
    for trial in 0..20u64 {
        let feat = gen.encode(&shuffled(&cloud, 100 + trial)).unwrap();
        for (a, b) in base.data().iter().zip(feat.data()) {
            assert!((a - b).abs() <= 1e-6, "trial {trial}: {a} vs {b}");
        }
    }
}

#[test]
fn refined_cloud_is_invariant_to_input_ordering() {
    let (gen, _) = tiny_nets(21);
    // 23 raw points force the fixed-seed downsampling path.
    let cloud = random_cloud(23, 22);
    let base = gen.refine(&cloud).unwrap();
    for trial in 0..20u64 {
        let out = gen.refine(&shuffled(&cloud, 200 + trial)).unwrap();
        assert_eq!(out.len(), base.len());
        for (a, b) in base.points.iter().zip(&out.points) {
            assert!(
                (a.x - b.x).abs() <= 1e-6 && (a.y - b.y).abs() <= 1e-6 && (a.z - b.z).abs() <= 1e-6,
                "trial {trial}"
            );
        }
    }
}

#[test]
fn discriminator_score_is_invariant_to_shuffling_both_clouds() {
    let (_, disc) = tiny_nets(31);
    let condition = random_cloud(12, 32);
    let candidate = random_cloud(17, 33);
    let base = disc.score(&condition, &candidate).unwrap();
    assert!(base > 0.0 && base < 1.0, "score {base}");
    for trial in 0..20u64 {
        let s = disc
            .score(&shuffled(&condition, 300 + trial), &shuffled(&candidate, 400 + trial))
            .unwrap();
        assert!((s - base).abs() <= 1e-6, "trial {trial}: {s} vs {base}");
    }
}

#[test]
fn strict_apis_reject_wrong_counts_and_empty_clouds() {
    let (gen, disc) = tiny_nets(41);
    assert!(gen.encode(&random_cloud(7, 42)).is_err());
    assert!(gen.encode(&random_cloud(9, 43)).is_err());
    assert!(gen.refine(&PointCloud::new(vec![])).is_err());
    assert!(disc.score(&PointCloud::new(vec![]), &random_cloud(4, 44)).is_err());
    assert!(disc.score(&random_cloud(4, 45), &PointCloud::new(vec![])).is_err());
}

#[test]
fn duplicated_points_leave_the_pooled_feature_unchanged() {
    let (gen, _) = tiny_nets(51);
    let cloud = random_cloud(10, 52);
    let mut g = Graph::new();
    let pts = g.constant(tensor_from_cloud::<f64>(&cloud));
    let base = gen.encoder.forward(&mut g, pts, FwdCtx::eval()).unwrap();
    let base_v = g.value(base).clone();

    // Append a copy of an existing point; the per-column max cannot change.
    let mut doubled = cloud.points.clone();
    doubled.push(cloud.points[3]);
    let mut g2 = Graph::new();
    let pts2 = g2.constant(tensor_from_cloud::<f64>(&PointCloud::new(doubled)));
    let feat = gen.encoder.forward(&mut g2, pts2, FwdCtx::eval()).unwrap();
    for (a, b) in base_v.data().iter().zip(g2.value(feat).data()) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    // Doubling the whole cloud is just as invisible.
    let twice: Vec<Vec3> = cloud.points.iter().chain(&cloud.points).copied().collect();
    let mut g3 = Graph::new();
    let pts3 = g3.constant(tensor_from_cloud::<f64>(&PointCloud::new(twice)));
    let feat3 = gen.encoder.forward(&mut g3, pts3, FwdCtx::eval()).unwrap();
    for (a, b) in base_v.data().iter().zip(g3.value(feat3).data()) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn distant_outlier_moves_the_global_feature() {
    let (gen, _) = tiny_nets(61);
    let cloud = random_cloud(8, 62);
    let base = gen.encode(&cloud).unwrap();
    let mut pts = cloud.points.clone();
    pts[0] = Vec3::new(50.0, 50.0, 50.0);
    let moved = gen.encode(&PointCloud::new(pts)).unwrap();
    let max_delta = base
        .data()
        .iter()
        .zip(moved.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_delta > 1e-6, "outlier left the feature unchanged (max delta {max_delta})");
}

#[test]
fn generator_loss_composes_its_three_terms() {
    let (gen, mut disc) = tiny_nets(71);
    disc.pin_score_to_half();
    let input = random_cloud(12, 72);
    let truth = random_cloud(9, 73);

    let mut g = Graph::new();
    let loss = stage2_g_loss(&mut g, &gen, Some(&disc), Stage2Weights::default(), &input, &truth).unwrap();
    let adv = g.value(loss.adversarial).item().unwrap();
    let cf = g.value(loss.chamfer).item().unwrap();
    let iou = g.value(loss.iou).item().unwrap();
    let total = g.value(loss.total).item().unwrap();
    let predicted = cloud_from_tensor_pub(g.value(loss.predicted)).unwrap();

    // Pinned discriminator scores 1/2, so the adversarial term is (1/2)^2.
    assert!((adv - 0.25).abs() < 1e-12, "adversarial {adv}");

    // The reconstruction terms must match their standalone metric values.
    let expected_cf = chamfer(&predicted, &truth).unwrap();
    assert!((cf - expected_cf).abs() <= 1e-9 * expected_cf.max(1.0), "chamfer {cf} vs {expected_cf}");
    let expected_iou = 1.0 - cloud_iou(&predicted, &truth, gen.cfg.voxel_size_m).unwrap();
    assert!((iou - expected_iou).abs() <= 1e-9, "overlap {iou} vs {expected_iou}");

    let expected_total = adv + 100.0 * cf + 10.0 * iou;
    assert!((total - expected_total).abs() <= 1e-12 * expected_total.abs(), "total {total}");
}

#[test]
fn matching_prediction_and_truth_hit_the_overlap_floor() {
    let (gen, _) = tiny_nets(81);
    let input = random_cloud(10, 82);
    let truth = gen.refine(&input).unwrap();

    let mut g = Graph::new();
    let loss = stage2_g_loss(&mut g, &gen, None, Stage2Weights::default(), &input, &truth).unwrap();
    assert_eq!(g.value(loss.adversarial).item().unwrap(), 0.0);
    assert_eq!(g.value(loss.chamfer).item().unwrap(), 0.0);

    // Identical voxel sets only miss a perfect overlap through the union
    // stabiliser, so the whole loss sits at a tiny positive floor.
    let occupancy = cloud_iou(&truth, &truth, gen.cfg.voxel_size_m).unwrap();
    let expected = 10.0 * (1.0 - occupancy);
    let total = g.value(loss.total).item().unwrap();
    assert!(total > 0.0 && total < 1e-4, "floor {total}");
    assert!((total - expected).abs() <= 1e-12, "floor {total} vs {expected}");
}

#[test]
fn zero_reconstruction_weights_reduce_to_the_adversarial_term() {
    let (gen, disc) = tiny_nets(91);
    let input = random_cloud(12, 92);
    let truth = random_cloud(9, 93);
    let weights = Stage2Weights { chamfer: 0.0, iou: 0.0 };

    let mut g = Graph::new();
    let loss = stage2_g_loss(&mut g, &gen, Some(&disc), weights, &input, &truth).unwrap();
    assert_eq!(g.value(loss.total).item().unwrap(), g.value(loss.adversarial).item().unwrap());

    let mut g2 = Graph::new();
    let bare = stage2_g_loss(&mut g2, &gen, None, weights, &input, &truth).unwrap();
    assert_eq!(g2.value(bare.total).item().unwrap(), 0.0);
}

#[test]
fn generator_loss_trains_only_the_generator() {
    let (mut gen, mut disc) = tiny_nets(101);
    let input = random_cloud(12, 102);
    let truth = random_cloud(9, 103);
    let mut g = Graph::new();
    let loss = stage2_g_loss(&mut g, &gen, Some(&disc), Stage2Weights::default(), &input, &truth).unwrap();
    g.backward(loss.total).unwrap();
    clear_grads(gen.parameters_mut());
    clear_grads(disc.parameters_mut());
    harvest_grads(&g, gen.parameters_mut());
    harvest_grads(&g, disc.parameters_mut());
    for p in gen.parameters() {
        assert!(p.grad.is_some(), "generator parameter {} missing a gradient", p.name);
    }
    for p in disc.parameters() {
        assert!(p.grad.is_none(), "discriminator parameter {} unexpectedly received a gradient", p.name);
    }
}

#[test]
fn discriminator_loss_touches_only_the_discriminator() {
    let (mut gen, mut disc) = tiny_nets(111);
    let input = random_cloud(12, 112);
    let truth = random_cloud(9, 113);
    let fake = gen.refine(&input).unwrap();
    let mut g = Graph::new();
    let loss = stage2_d_loss(&mut g, &disc, &input, &truth, &fake).unwrap();
    g.backward(loss.total).unwrap();
    clear_grads(gen.parameters_mut());
    clear_grads(disc.parameters_mut());
    harvest_grads(&g, gen.parameters_mut());
    harvest_grads(&g, disc.parameters_mut());
    for p in gen.parameters() {
        assert!(p.grad.is_none(), "generator parameter {} leaked into the discriminator loss", p.name);
    }
    for p in disc.parameters() {
        assert!(p.grad.is_some(), "discriminator parameter {} missing a gradient", p.name);
    }
}

#[test]
fn discriminator_loss_matches_hand_value() {
    let (gen, mut disc) = tiny_nets(121);
    let input = random_cloud(12, 122);
    let truth = random_cloud(9, 123);
    let fake = gen.refine(&input).unwrap();

    let mut g = Graph::new();
    let loss = stage2_d_loss(&mut g, &disc, &input, &truth, &fake).unwrap();
    let (r, f) = (g.value(loss.real_score).item().unwrap(), g.value(loss.fake_score).item().unwrap());
    let total = g.value(loss.total).item().unwrap();
    let expected = 0.5 * ((r - 1.0) * (r - 1.0) + f * f);
    assert!((total - expected).abs() < 1e-12, "{total} vs {expected}");

    disc.pin_score_to_half();
    let mut g2 = Graph::new();
    let pinned = stage2_d_loss(&mut g2, &disc, &input, &truth, &fake).unwrap();
    assert!((g2.value(pinned.total).item().unwrap() - 0.25).abs() < 1e-12);
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
        let (mut gen, disc) = tiny_nets(seed);
        let input = random_cloud(12, seed * 10);
        let truth = random_cloud(9, seed * 10 + 1);

        let mut g = Graph::new();
        let loss =
            stage2_g_loss_surrogate(&mut g, &gen, Some(&disc), Stage2Weights::default(), &input, &truth)
                .unwrap();
        g.backward(loss.total).unwrap();
        clear_grads(gen.parameters_mut());
        harvest_grads(&g, gen.parameters_mut());
        let analytic: Vec<(String, Tensor<f64>, Tensor<f64>)> = gen
            .parameters()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone(), p.grad.clone().expect("gradient")))
            .collect();

        // The deployable loss must drive the same gradients as its
        // finite-difference-checkable twin.
        let mut gh = Graph::new();
        let hard =
            stage2_g_loss(&mut gh, &gen, Some(&disc), Stage2Weights::default(), &input, &truth).unwrap();
        gh.backward(hard.total).unwrap();
        clear_grads(gen.parameters_mut());
        harvest_grads(&gh, gen.parameters_mut());
        for (p, (name, _, grad)) in gen.parameters().iter().zip(&analytic) {
            assert_eq!(&p.name, name);
            let hg = p.grad.as_ref().expect("gradient");
            for (a, b) in grad.data().iter().zip(hg.data()) {
                assert!((a - b).abs() <= 1e-12, "{name}: surrogate grad {a} vs deployed grad {b}");
            }
        }

        for (name, x0, grad) in &analytic {
            let mut f = |probe: &Tensor<f64>| {
                set_value(gen.parameters_mut(), name, probe);
                let mut g2 = Graph::new();
                let l = stage2_g_loss_surrogate(
                    &mut g2,
                    &gen,
                    Some(&disc),
                    Stage2Weights::default(),
                    &input,
                    &truth,
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
        let (gen, mut disc) = tiny_nets(seed + 100);
        let input = random_cloud(12, seed * 20);
        let truth = random_cloud(9, seed * 20 + 1);
        let fake = gen.refine(&input).unwrap();

        let mut g = Graph::new();
        let loss = stage2_d_loss(&mut g, &disc, &input, &truth, &fake).unwrap();
        g.backward(loss.total).unwrap();
        clear_grads(disc.parameters_mut());
        harvest_grads(&g, disc.parameters_mut());
        let analytic: Vec<(String, Tensor<f64>, Tensor<f64>)> = disc
            .parameters()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone(), p.grad.clone().expect("gradient")))
            .collect();

        for (name, x0, grad) in &analytic {
            let mut f = |probe: &Tensor<f64>| {
                set_value(disc.parameters_mut(), name, probe);
                let mut g2 = Graph::new();
                let l = stage2_d_loss(&mut g2, &disc, &input, &truth, &fake).unwrap();
                g2.value(l.total).item().unwrap()
            };
            let fd = finite_difference(&mut f, x0, FD_STEP);
            set_value(disc.parameters_mut(), name, x0);
            let err = relative_error(grad, &fd);
            assert!(err < FD_REL_TOL, "seed {seed}, {name}: relative error {err:.3e}");
        }
    }
}

#[test]
fn random_clouds_never_produce_nonfinite_outputs() {
    let (gen, disc) = tiny_nets(131);
    let mut rng = stream(131, "s2-fuzz", 0);
    for trial in 0..1000 {
        let n = rng.gen_range(1..=64);
        let pts: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0))
            })
            .collect();
        let cloud = PointCloud::new(pts);
        let refined = gen.refine(&cloud).unwrap();
        assert!(
            refined.points.iter().all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite()),
            "trial {trial} produced a non-finite coordinate"
        );
        let s = disc.score(&cloud, &refined).unwrap();
        assert!(s.is_finite() && s > 0.0 && s < 1.0, "trial {trial} score {s}");
    }
}

#[test]
fn chamfer_term_shrinks_under_reconstruction_training() {
    let weights = Stage2Weights { chamfer: 100.0, iou: 0.0 };
    let mut monotone = 0;
    for seed in 1..=5u64 {
        let (mut gen, _) = tiny_nets(seed + 200);
        let input = random_cloud(12, seed * 30);
        let truth = random_cloud(9, seed * 30 + 1);
        let mut opt = Adam::new(2e-4);
        let mut values = Vec::new();
        for _ in 0..=50 {
            let mut g = Graph::new();
            let loss = stage2_g_loss(&mut g, &gen, None, weights, &input, &truth).unwrap();
            values.push(g.value(loss.chamfer).item().unwrap());
            g.backward(loss.total).unwrap();
            clear_grads(gen.parameters_mut());
            harvest_grads(&g, gen.parameters_mut());
            opt.step(gen.parameters_mut()).unwrap();
        }
        assert!(
            values[50] < values[0],
            "seed {seed}: chamfer went from {} to {}",
            values[0],
            values[50]
        );
        if values.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 4, "only {monotone}/5 seeds decreased monotonically");
}

#[test]
fn resample_preserves_the_point_multiset_on_downsampling() {
    let cloud = random_cloud(40, 141);
    let picked = resample(&cloud, 8).unwrap();
    assert_eq!(picked.len(), 8);
    for p in &picked {
        assert!(
            cloud.points.iter().any(|q| q.x == p.x && q.y == p.y && q.z == p.z),
            "resampled point not drawn from the input cloud"
        );
    }
    // Seed is keyed on the input size, so the draw repeats.
    let again = resample(&cloud, 8).unwrap();
    for (a, b) in picked.iter().zip(&again) {
        assert_eq!((a.x, a.y, a.z), (b.x, b.y, b.z));
    }
}
