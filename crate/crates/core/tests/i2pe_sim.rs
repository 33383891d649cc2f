//! Plane-mediated pose estimation on simulated desk scenes.

use acrkit::acr::MotionExecutor;
use acrkit::fusion::{i2pe, i2pe_report, I2peConfig};
use acrkit::geometry::{direction_angle, rotation_error_deg, PixelPoint, Pose, Rotation, Vec3};
use acrkit::pose_estimation::{estimate_epipolar, Correspondence, CorrespondenceSet, EpipolarConfig};
use acrkit::simulator::{
    generate_scene, LightingProxySpec, NoiseSpec, RigSpec, SceneSpec, SimObservation,
    SimulatedExecutor,
};

fn executor(camera: Pose, lighting: LightingProxySpec) -> SimulatedExecutor {
    let world = generate_scene(&SceneSpec::desk()).unwrap();
    SimulatedExecutor::new(
        world,
        RigSpec::canon(Pose::identity()),
        camera,
        NoiseSpec::none(),
        lighting,
        3,
    )
    .unwrap()
}

fn nominal_motion() -> Pose {
    Pose::new(
        Rotation::from_axis_angle(&Vec3::new(0.2, 1.0, -0.3), 4f64.to_radians()),
        Vec3::new(0.04, -0.02, 0.03),
    )
}

fn estimate(ex: &SimulatedExecutor, obs: &SimObservation) -> acrkit::geometry::DirectionalPose {
    i2pe(
        &obs.correspondences,
        ex.reference_mask().unwrap(),
        &obs.mask,
        &ex.intrinsics(),
        &I2peConfig::default(),
    )
    .unwrap()
}

#[test]
fn zero_noise_recovers_the_pose() {
    let truth = nominal_motion();
    let ex = executor(truth, LightingProxySpec::none());
    let obs = ex.observe_sim(1).unwrap();
    assert_eq!(obs.mask.num_planes(), 3);
    let est = estimate(&ex, &obs);
    let rot = rotation_error_deg(&est.rotation, &truth.rotation);
    let dir = direction_angle(est.direction(), &truth.translation)
        .unwrap()
        .to_degrees();
    assert!(rot < 1e-5, "rotation error {rot}°");
    assert!(dir < 1e-4, "direction error {dir}°");
}

#[test]
fn off_plane_contamination_is_ignored() {
    let truth = nominal_motion();
    let ex = executor(truth, LightingProxySpec::varied(0.6, 0.05));
    let obs = ex.observe_sim(2).unwrap();
    assert!(obs.contaminated.iter().filter(|&&c| c).count() > 100);
    let est = estimate(&ex, &obs);
    let rot = rotation_error_deg(&est.rotation, &truth.rotation);
    assert!(rot < 0.1, "rotation error {rot}°");

    let epi = estimate_epipolar(
        &obs.correspondences,
        &ex.intrinsics(),
        ex.image_size(),
        &EpipolarConfig::default(),
    )
    .unwrap();
    let epi_rot = rotation_error_deg(&epi.rotation, &truth.rotation);
    // Uniform outliers are rejected by the epipolar RANSAC too; the contrast
    // with the unrestricted estimate is not asserted here.
    println!("i2pe {rot:.2e}° epipolar {epi_rot:.2e}°");
}

#[test]
fn planes_leaving_the_view_still_yield_a_pose() {
    // Sliding the scene 30 cm sideways pushes one plane out of view.
    let truth = Pose::new(
        Rotation::from_axis_angle(&Vec3::z(), 1f64.to_radians()),
        Vec3::new(0.3, 0.0, 0.01),
    );
    let ex = executor(truth, LightingProxySpec::none());
    let obs = ex.observe_sim(1).unwrap();
    let h = ex.reference_mask().unwrap().num_planes();
    assert!(obs.mask.num_planes() < h, "{} planes visible", obs.mask.num_planes());
    let est = estimate(&ex, &obs);
    assert!(rotation_error_deg(&est.rotation, &truth.rotation) < 1e-4);
}

#[test]
fn pairs_outside_every_plane_change_nothing() {
    let truth = nominal_motion();
    let ex = executor(truth, LightingProxySpec::none());
    let obs = ex.observe_sim(1).unwrap();
    let m_ref = ex.reference_mask().unwrap();
    let intr = ex.intrinsics();
    let cfg = I2peConfig::default();
    let base = i2pe_report(&obs.correspondences, m_ref, &obs.mask, &intr, &cfg).unwrap();

    let mut items: Vec<Correspondence> = obs.correspondences.iter().cloned().collect();
    let size = ex.image_size();
    let mut k = 0u32;
    'fill: for y in (0..size.height).step_by(37) {
        for x in (0..size.width).step_by(41) {
            let a = PixelPoint::new(x as f64 + 0.5, y as f64 + 0.5);
            if m_ref.label_at(&a) == 0 {
                let b = PixelPoint::new((x * 7 % size.width) as f64, (y * 3 % size.height) as f64);
                items.push(Correspondence::new(a, b));
                k += 1;
                if k == 2000 {
                    break 'fill;
                }
            }
        }
    }
    let padded = CorrespondenceSet::new(items).unwrap();
    let more = i2pe_report(&padded, m_ref, &obs.mask, &intr, &cfg).unwrap();
    assert_eq!(more.rotation, base.rotation);
    assert_eq!(more.direction, base.direction);
    assert_eq!(more.matching, base.matching);
}
