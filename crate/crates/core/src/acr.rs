//! The active camera relocalization loop and the bisection-scale baseline.

use std::io::Write;

use serde::{Deserialize, Serialize};
use schemars::JsonSchema;

use crate::error::{AcrError, Result};
use crate::fusion::{i2pe_prepared, I2peConfig, I2peReport};
use crate::geometry::{DirectionalPose, ImageSize, Intrinsics, Pose, Rotation, Vec3};
use crate::plane_match::{PlaneSegmentMap, PreparedMask};
use crate::pose_estimation::{estimate_epipolar, CorrespondenceSet, EpipolarConfig, TrackId};
use crate::scale_solver::{
    coefficient_blocks, depth_map_current, depth_map_reference, init_scale, iteration_scale,
    solve_blocks, ScaleAggregate, ScaleSolution, SparseDepthMap,
};

/// What the camera sees after a capture.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Reference-image points against current-image points, with track ids.
    pub correspondences: CorrespondenceSet,
    pub mask: Option<PlaneSegmentMap>,
}

/// The hardware seam: a robot carrying the camera through an unknown
/// hand-eye pose.
pub trait MotionExecutor {
    fn intrinsics(&self) -> Intrinsics;

    fn image_size(&self) -> ImageSize;

    /// Plane labels of the reference image, if available.
    fn reference_mask(&self) -> Option<&PlaneSegmentMap>;

    /// Captures the current view.
    fn observe(&mut self) -> Result<Observation>;

    /// Moves the hand by `hand_motion`, expressed in the current hand frame.
    fn execute(&mut self, hand_motion: &Pose) -> Result<()>;

    /// Current camera pose relative to the reference view, when known.
    fn ground_truth(&self) -> Option<Pose> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct AcrConfig {
    /// Translation below which the camera counts as relocalized, meters.
    pub scale_epsilon: f64,
    /// Rotation below which the camera counts as relocalized, degrees.
    pub rotation_epsilon: f64,
    pub max_iterations: usize,
    /// Known hand translation executed to fix the metric scale, meters.
    pub init_translation: [f64; 3],
    pub i2pe: I2peConfig,
    /// Estimator used by the bisection baseline.
    pub epipolar: EpipolarConfig,
    pub scale_aggregate: ScaleAggregate,
}

impl Default for AcrConfig {
    fn default() -> Self {
        AcrConfig {
            scale_epsilon: 1e-3,
            rotation_epsilon: 0.02,
            max_iterations: 30,
            init_translation: [0.0, 0.0, 0.05],
            i2pe: I2peConfig::default(),
            epipolar: EpipolarConfig::default(),
            scale_aggregate: ScaleAggregate::Median,
        }
    }
}

impl AcrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_epsilon > 0.0) || !(self.rotation_epsilon > 0.0) {
            return Err(AcrError::Config("epsilons must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(AcrError::Config("max_iterations must be at least 1".into()));
        }
        if !self.init_translation.iter().all(|v| v.is_finite()) {
            return Err(AcrError::Config("init_translation must be finite".into()));
        }
        Ok(())
    }

    fn init_vector(&self) -> Vec3 {
        Vec3::from(self.init_translation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcrStatus {
    Running,
    Converged,
    Exhausted,
    Failed,
}

/// One step of a relocalization run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AcrRecord {
    /// 0 for the initialization step.
    pub iter: usize,
    /// Estimated relative rotation angle, degrees.
    pub est_rot_deg: Option<f64>,
    pub est_direction: Option<[f64; 3]>,
    /// Metric translation used for the command, meters.
    #[serde(rename = "S_i_m")]
    pub s_i_m: Option<f64>,
    pub command: Option<Pose>,
    /// Ground-truth residual before the command, when known.
    pub rot_err_deg: Option<f64>,
    pub trans_err_m: Option<f64>,
    pub status: AcrStatus,
    pub error: Option<String>,
}

impl AcrRecord {
    fn new(iter: usize, truth: Option<Pose>) -> Self {
        AcrRecord {
            iter,
            est_rot_deg: None,
            est_direction: None,
            s_i_m: None,
            command: None,
            rot_err_deg: truth.map(|p| p.rotation.angle_deg()),
            trans_err_m: truth.map(|p| p.translation.norm()),
            status: AcrStatus::Running,
            error: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AcrTrace {
    pub records: Vec<AcrRecord>,
    pub status: AcrStatus,
    /// Pose estimates made after initialization.
    pub iterations: usize,
    /// Hand motions commanded, including the initialization translation.
    pub motions: usize,
    /// Ground-truth residual at the end of the run, when known.
    pub final_residual: Option<Pose>,
}

impl AcrTrace {
    fn finish(mut self, status: AcrStatus, ex: &dyn MotionExecutor) -> Self {
        if let Some(last) = self.records.last_mut() {
            last.status = status;
        }
        self.status = status;
        self.iterations = self.records.iter().filter(|r| r.iter > 0).count();
        self.final_residual = ex.ground_truth();
        self
    }

    fn fail(mut self, mut record: AcrRecord, err: AcrError, ex: &dyn MotionExecutor) -> Self {
        record.error = Some(err.kind().to_owned());
        self.records.push(record);
        self.finish(AcrStatus::Failed, ex)
    }

    /// Final ground-truth rotation error, degrees.
    pub fn final_rotation_error(&self) -> Option<f64> {
        self.final_residual.map(|p| p.rotation.angle_deg())
    }

    pub fn final_translation_error(&self) -> Option<f64> {
        self.final_residual.map(|p| p.translation.norm())
    }

    /// One JSON object per record.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Hand motion that undoes an estimated relative pose, treating the hand-eye
/// pose as identity: `R̃ = R⁻¹`, `t̃ = −R⁻¹ (scale · ṫ)`.
pub fn hand_motion_from_estimate(est: &DirectionalPose, scale: f64) -> Pose {
    correction(&est.rotation, &(est.direction() * scale))
}

fn correction(rotation: &Rotation, translation: &Vec3) -> Pose {
    let r_inv = rotation.inverse();
    Pose::new(r_inv, -r_inv.apply(translation))
}

fn tracks_of(c: &CorrespondenceSet) -> Result<Vec<TrackId>> {
    c.iter()
        .map(|p| {
            p.track
                .ok_or_else(|| AcrError::InvalidInput("correspondence without track id".into()))
        })
        .collect()
}

/// Scale solution over the correspondences that support the estimate,
/// optionally restricted to tracks with known reference depth.
fn solve_supported(
    c: &CorrespondenceSet,
    report: &I2peReport,
    pose: &DirectionalPose,
    intr: &Intrinsics,
    known: Option<&SparseDepthMap>,
) -> Result<(ScaleSolution, Vec<TrackId>)> {
    let idx: Vec<usize> = report
        .inliers
        .iter()
        .copied()
        .filter(|&i| match (known, c.get(i).and_then(|p| p.track)) {
            (Some(d), Some(t)) => d.get(t).is_some(),
            (Some(_), None) => false,
            (None, _) => true,
        })
        .collect();
    let sub = c.subset(&idx);
    let tracks = tracks_of(&sub)?;
    let blocks = coefficient_blocks(&sub, intr, pose)?;
    Ok((solve_blocks(&blocks)?, tracks))
}

fn prepare(obs: &Observation, cfg: &AcrConfig) -> Result<PreparedMask> {
    let m = obs
        .mask
        .as_ref()
        .ok_or_else(|| AcrError::MissingInput("observation carries no plane mask".into()))?;
    Ok(PreparedMask::new(m, cfg.i2pe.plane_match.erosion_radius))
}

/// Metric reference depths from the initialization: the known hand
/// translation between the first two captures fixes their depths, which are
/// then transferred to the reference image through `report0`.
fn reference_depths(
    obs0: &Observation,
    p0: &PreparedMask,
    report0: &I2peReport,
    obs1: &Observation,
    intr: &Intrinsics,
    cfg: &AcrConfig,
) -> Result<SparseDepthMap> {
    let p1 = prepare(obs1, cfg)?;
    let c01 = obs0
        .correspondences
        .chain_through_tracks(&obs1.correspondences);
    let report01 = i2pe_prepared(&c01, p0, &p1, intr, &cfg.i2pe)?;
    let pose01 = report01.pose()?;
    let s_init = init_scale(&cfg.init_vector(), &pose01)?;
    let (sol01, tracks01) = solve_supported(&c01, &report01, &pose01, intr, None)?;
    let d0 = depth_map_current(&sol01, &tracks01, s_init)?;

    let c0 = &obs0.correspondences;
    let pose0 = report0.pose()?;
    let (sol0, tracks0) = solve_supported(c0, report0, &pose0, intr, Some(&d0))?;
    depth_map_reference(&sol0, &tracks0, &d0)
}

/// Estimated relative pose and metric translation of one observation.
fn estimate_iteration(
    obs: &Observation,
    p_ref: &PreparedMask,
    dref: &SparseDepthMap,
    intr: &Intrinsics,
    cfg: &AcrConfig,
) -> Result<(Rotation, Option<Vec3>, f64)> {
    let report = i2pe_prepared(
        &obs.correspondences,
        p_ref,
        &prepare(obs, cfg)?,
        intr,
        &cfg.i2pe,
    )?;
    let Some(direction) = report.direction else {
        return Ok((report.rotation, None, 0.0));
    };
    let pose = DirectionalPose::new(report.rotation, direction)?;
    let scale = match solve_supported(&obs.correspondences, &report, &pose, intr, Some(dref)) {
        Ok((sol, tracks)) => iteration_scale(&sol, &tracks, dref, cfg.scale_aggregate)?,
        Err(AcrError::AmbiguousNullspace { .. }) => 0.0,
        Err(e) => return Err(e),
    };
    Ok((report.rotation, Some(direction), scale))
}

/// Relocalizes the camera: executes the known initialization translation,
/// recovers reference depths, then repeatedly estimates the relative pose and
/// its metric scale and commands the inverse motion until both the scale and
/// the rotation fall below the configured thresholds.
pub fn run_acr(ex: &mut dyn MotionExecutor, cfg: &AcrConfig) -> Result<AcrTrace> {
    cfg.validate()?;
    let intr = ex.intrinsics();
    let p_ref = ex
        .reference_mask()
        .map(|m| PreparedMask::new(m, cfg.i2pe.plane_match.erosion_radius))
        .ok_or_else(|| AcrError::MissingInput("executor provides no reference mask".into()))?;
    let mut trace = AcrTrace {
        records: Vec::new(),
        status: AcrStatus::Running,
        iterations: 0,
        motions: 0,
        final_residual: None,
    };

    let mut init = AcrRecord::new(0, ex.ground_truth());
    let obs0 = match ex.observe() {
        Ok(o) => o,
        Err(e) => return Ok(trace.fail(init, e, ex)),
    };
    let first = prepare(&obs0, cfg).and_then(|p0| {
        let r = i2pe_prepared(&obs0.correspondences, &p_ref, &p0, &intr, &cfg.i2pe)?;
        Ok((p0, r))
    });
    let (p0, report0) = match first {
        Ok(v) => v,
        Err(e) => return Ok(trace.fail(init, e, ex)),
    };
    init.est_rot_deg = Some(report0.rotation.angle_deg());
    init.est_direction = report0.direction.map(|d| d.into());
    if report0.direction.is_none() && report0.rotation.angle_deg() < cfg.rotation_epsilon {
        init.s_i_m = Some(0.0);
        trace.records.push(init);
        return Ok(trace.finish(AcrStatus::Converged, ex));
    }
    let init_motion = Pose::from_translation(cfg.init_vector());
    init.command = Some(init_motion);
    if let Err(e) = ex.execute(&init_motion) {
        return Ok(trace.fail(init, e, ex));
    }
    trace.motions += 1;
    let mut obs = match ex.observe() {
        Ok(o) => o,
        Err(e) => return Ok(trace.fail(init, e, ex)),
    };
    let dref = match reference_depths(&obs0, &p0, &report0, &obs, &intr, cfg) {
        Ok(d) => d,
        Err(e) => return Ok(trace.fail(init, e, ex)),
    };
    trace.records.push(init);

    for i in 1..=cfg.max_iterations {
        let mut rec = AcrRecord::new(i, ex.ground_truth());
        let (rotation, direction, scale) = match estimate_iteration(&obs, &p_ref, &dref, &intr, cfg)
        {
            Ok(v) => v,
            Err(e) => return Ok(trace.fail(rec, e, ex)),
        };
        let angle = rotation.angle_deg();
        rec.est_rot_deg = Some(angle);
        rec.est_direction = direction.map(|d| d.into());
        rec.s_i_m = Some(scale);
        if scale < cfg.scale_epsilon && angle < cfg.rotation_epsilon {
            trace.records.push(rec);
            return Ok(trace.finish(AcrStatus::Converged, ex));
        }
        if i == cfg.max_iterations {
            trace.records.push(rec);
            break;
        }
        let command = correction(&rotation, &(direction.unwrap_or_else(Vec3::zeros) * scale));
        rec.command = Some(command);
        if let Err(e) = ex.execute(&command) {
            return Ok(trace.fail(rec, e, ex));
        }
        trace.motions += 1;
        trace.records.push(rec);
        obs = match ex.observe() {
            Ok(o) => o,
            Err(e) => {
                let rec = AcrRecord::new(i + 1, ex.ground_truth());
                return Ok(trace.fail(rec, e, ex));
            }
        };
    }
    Ok(trace.finish(AcrStatus::Exhausted, ex))
}

/// Baseline relocalization that guesses the translation magnitude: the step
/// starts at the initialization translation length and is halved whenever
/// the estimated direction reverses. Poses come from the essential matrix of
/// all correspondences, without plane masks.
pub fn run_bisection_baseline(ex: &mut dyn MotionExecutor, cfg: &AcrConfig) -> Result<AcrTrace> {
    cfg.validate()?;
    let intr = ex.intrinsics();
    let image = ex.image_size();
    let mut trace = AcrTrace {
        records: Vec::new(),
        status: AcrStatus::Running,
        iterations: 0,
        motions: 0,
        final_residual: None,
    };
    let mut step = cfg.init_vector().norm();
    let mut previous: Option<Vec3> = None;
    for i in 1..=cfg.max_iterations {
        let mut rec = AcrRecord::new(i, ex.ground_truth());
        let hyp = match ex
            .observe()
            .and_then(|o| estimate_epipolar(&o.correspondences, &intr, image, &cfg.epipolar))
        {
            Ok(h) => h,
            Err(e) => return Ok(trace.fail(rec, e, ex)),
        };
        let angle = hyp.rotation.angle_deg();
        rec.est_rot_deg = Some(angle);
        rec.est_direction = hyp.direction.map(|d| d.into());
        let direction = hyp.direction.filter(|_| !hyp.unstable_translation);
        if let (Some(d), Some(p)) = (direction, previous) {
            if d.dot(&p) < 0.0 {
                step /= 2.0;
            }
        }
        let translation_done = direction.is_none() || step < cfg.scale_epsilon;
        if translation_done && angle < cfg.rotation_epsilon {
            rec.s_i_m = Some(0.0);
            trace.records.push(rec);
            return Ok(trace.finish(AcrStatus::Converged, ex));
        }
        let scale = if direction.is_some() { step } else { 0.0 };
        rec.s_i_m = Some(scale);
        if i == cfg.max_iterations {
            trace.records.push(rec);
            break;
        }
        let command = correction(
            &hyp.rotation,
            &(direction.unwrap_or_else(Vec3::zeros) * scale),
        );
        rec.command = Some(command);
        if let Err(e) = ex.execute(&command) {
            return Ok(trace.fail(rec, e, ex));
        }
        trace.motions += 1;
        trace.records.push(rec);
        if direction.is_some() {
            previous = direction;
        }
    }
    Ok(trace.finish(AcrStatus::Exhausted, ex))
}
