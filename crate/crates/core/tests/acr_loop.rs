//! Relocalization loop and bisection baseline on the simulated desk scene.

use acrkit::acr::{run_acr, run_bisection_baseline, AcrConfig, AcrStatus, AcrTrace};
use acrkit::geometry::{Pose, Rotation, Vec3};
use acrkit::simulator::{
    generate_scene, LightingProxySpec, NoiseSpec, RigSpec, SceneSpec, SimulatedExecutor, World,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_hand_eye(rng: &mut ChaCha8Rng, max_deg: f64) -> Pose {
    Pose::new(
        Rotation::from_axis_angle(&unit(rng), rng.gen_range(0.0..max_deg).to_radians()),
        unit(rng) * rng.gen_range(0.0..0.1),
    )
}

fn random_offset(rng: &mut ChaCha8Rng) -> Pose {
    Pose::new(
        Rotation::from_axis_angle(&unit(rng), rng.gen_range(2.0..5.0f64).to_radians()),
        unit(rng) * rng.gen_range(0.02..0.05),
    )
}

fn run(world: &World, x: Pose, offset: Pose, seed: u64, baseline: bool) -> AcrTrace {
    let mut ex = SimulatedExecutor::new(
        world.clone(),
        RigSpec::canon(x),
        offset,
        NoiseSpec::none(),
        LightingProxySpec::none(),
        seed,
    )
    .unwrap()
    .with_masks(!baseline);
    let cfg = AcrConfig::default();
    if baseline {
        run_bisection_baseline(&mut ex, &cfg).unwrap()
    } else {
        run_acr(&mut ex, &cfg).unwrap()
    }
}

fn desk() -> World {
    generate_scene(&SceneSpec::desk()).unwrap()
}

#[test]
fn identity_hand_eye_converges_in_one_step() {
    let world = desk();
    let offset = Pose::new(
        Rotation::from_axis_angle(&Vec3::z(), 5f64.to_radians()),
        Vec3::new(0.03, 0.0, 0.04),
    );
    let acr = run(&world, Pose::identity(), offset, 1, false);
    assert_eq!(acr.status, AcrStatus::Converged);
    assert!(acr.iterations <= 2, "{} iterations", acr.iterations);
    assert!(acr.final_rotation_error().unwrap() < 0.02);
    assert!(acr.final_translation_error().unwrap() < 1e-3);
}

#[test]
fn bisection_needs_several_times_more_iterations() {
    let world = desk();
    // A 5 cm offset would equal the initial bisection step and be reached
    // in one guess, so the comparison uses 3 cm.
    let offset = Pose::new(
        Rotation::from_axis_angle(&Vec3::z(), 5f64.to_radians()),
        Vec3::new(0.018, 0.0, 0.024),
    );
    let acr = run(&world, Pose::identity(), offset, 1, false);
    let base = run(&world, Pose::identity(), offset, 1, true);
    assert_eq!(base.status, AcrStatus::Converged);
    assert!(
        base.iterations >= 3 * acr.iterations,
        "baseline {} vs {}",
        base.iterations,
        acr.iterations
    );
}

#[test]
fn zero_offset_needs_no_motion() {
    let world = desk();
    let x = Pose::new(Rotation::rx_deg(10.0), Vec3::new(0.05, 0.0, 0.0));
    for baseline in [false, true] {
        let t = run(&world, x, Pose::identity(), 2, baseline);
        assert_eq!(t.status, AcrStatus::Converged);
        assert_eq!(t.motions, 0);
    }
}

#[test]
fn small_hand_eye_rotation_converges_within_four() {
    let world = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..5 {
        let (x, offset) = (random_hand_eye(&mut rng, 5.0), random_offset(&mut rng));
        let t = run(&world, x, offset, k, false);
        assert_eq!(t.status, AcrStatus::Converged);
        assert!(t.iterations <= 4, "trial {k}: {} iterations", t.iterations);
    }
}

/// Hidden hand-eye draws up to 30°: every run converges, the residual
/// translation shrinks at every corrective step taken above the scale
/// threshold, and the loop needs fewer iterations than the bisection
/// baseline on matched seeds. Below the threshold the lever arm of the
/// hand-eye offset under the remaining rotation correction is of the same
/// size as the residual, so the decrease is not asserted there.
#[test]
fn hand_eye_robustness_monotonicity_and_ordering() {
    let world = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut compared, mut ordered) = (0, 0);
    for k in 0..50 {
        let (x, offset) = (random_hand_eye(&mut rng, 30.0), random_offset(&mut rng));
        let t = run(&world, x, offset, k, false);
        assert_eq!(t.status, AcrStatus::Converged, "trial {k}");
        let residuals: Vec<f64> = t
            .records
            .iter()
            .filter(|r| r.iter >= 1)
            .filter_map(|r| r.trans_err_m)
            .collect();
        let eps = AcrConfig::default().scale_epsilon;
        assert!(
            residuals.windows(2).all(|w| w[0] < eps || w[1] < w[0]),
            "trial {k}: {residuals:?}"
        );
        if k < 20 {
            let b = run(&world, x, offset, k, true);
            compared += 1;
            if t.iterations < b.iterations {
                ordered += 1;
            }
        }
    }
    assert!(ordered * 100 >= 95 * compared, "{ordered}/{compared}");
}

#[test]
fn trace_length_is_bounded() {
    let world = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (x, offset) = (random_hand_eye(&mut rng, 30.0), random_offset(&mut rng));
    let mut ex = SimulatedExecutor::new(
        world,
        RigSpec::canon(x),
        offset,
        NoiseSpec::none(),
        LightingProxySpec::none(),
        1,
    )
    .unwrap();
    let cfg = AcrConfig {
        max_iterations: 2,
        ..AcrConfig::default()
    };
    let t = run_acr(&mut ex, &cfg).unwrap();
    assert!(t.records.len() <= cfg.max_iterations + 1);
    assert!(matches!(t.status, AcrStatus::Converged | AcrStatus::Exhausted));
}
