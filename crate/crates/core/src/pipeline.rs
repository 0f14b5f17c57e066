//! Scenario files, Monte-Carlo orchestration and CSV reports.
//!
//! Scenario files are TOML. Lengths are in meters, angles in degrees and
//! pulse/scatter times in nanoseconds; everything is converted to SI units
//! and radians on load. See `scenarios/` for complete examples.
//!
//! ```toml
//! seed = 7            # master seed, default 0
//! runs = 20           # Monte-Carlo runs, default 1
//! va_order = 1        # reflection order of the virtual anchors, default 1
//!
//! [[walls]]           # or a [room] table with min = [x, y], max = [x, y]
//! id = "south"
//! points = [[0.0, 0.0], [8.0, 0.0]]
//!
//! [[anchors]]
//! id = "pa1"
//! position = [1.0, 1.0]
//!
//! [trajectory]        # either start/velocity/steps or explicit poses
//! dt = 0.1
//! start = [2.0, 2.0]
//! velocity = [1.0, 0.0]
//! steps = 40
//! # poses = [[x, y, heading_deg], ...]
//! ```
//!
//! Optional tables: `[pulse]`, `[channel]`, `[scatter]`, `[estimator]`,
//! `[association]`, `[fov]`, `[tracker]`; see the `Raw*` structs below for
//! their keys and defaults.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::estimator::EstimatorConfig;
use crate::geometry::{generate_vas, AgentPose, Anchor, AnchorId, FloorPlan, FovConfig, GeometryError, Point, Wall};
use crate::signal::{snapshot_from_scene, AmplitudeModel, ChannelModel, NoiseConfig, PulseModel, ScatterConfig, Snapshot};
use crate::tracking::{effective_bandwidth, run_tracker, StepInput, TrackerConfig, TrackerInit, TrackingContext, TrackingError};
use crate::SPEED_OF_LIGHT;

const NS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Parse(String),
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("run {run}, step {step}, PA {pa}: {message}")]
    Synthesis {
        run: usize,
        step: usize,
        pa: usize,
        message: String,
    },
    #[error("run {run}: {source}")]
    Tracking {
        run: usize,
        #[source]
        source: TrackingError,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl PipelineError {
    /// Short machine-readable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::Io { .. } => "io",
            PipelineError::Parse(_) => "parse",
            PipelineError::Invalid { .. } => "validation",
            PipelineError::Synthesis { .. } | PipelineError::Tracking { .. } | PipelineError::ThreadPool(_) => {
                "runtime"
            }
        }
    }

    fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        PipelineError::Invalid {
            key: key.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
struct RawScenario {
    seed: Option<u64>,
    runs: Option<usize>,
    va_order: Option<usize>,
    walls: Option<Vec<RawWall>>,
    room: Option<RawRoom>,
    anchors: Option<Vec<RawAnchor>>,
    trajectory: Option<RawTrajectory>,
    #[serde(default)]
    pulse: RawPulse,
    #[serde(default)]
    channel: RawChannel,
    #[serde(default)]
    scatter: RawScatter,
    #[serde(default)]
    estimator: RawEstimator,
    #[serde(default)]
    association: RawAssociation,
    #[serde(default)]
    fov: RawFov,
    #[serde(default)]
    tracker: RawTracker,
}

#[derive(Debug, Deserialize)]
struct RawWall {
    id: Option<String>,
    points: Option<[[f64; 2]; 2]>,
}

#[derive(Debug, Deserialize)]
struct RawRoom {
    min: [f64; 2],
    max: [f64; 2],
}

#[derive(Debug, Deserialize)]
struct RawAnchor {
    id: Option<String>,
    position: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
struct RawTrajectory {
    dt: Option<f64>,
    start: Option<[f64; 2]>,
    velocity: Option<[f64; 2]>,
    steps: Option<usize>,
    /// Defaults to the direction of `velocity`.
    heading_deg: Option<f64>,
    poses: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct RawPulse {
    roll_off: f64,
    symbol_duration_ns: f64,
    sampling_time_ns: f64,
    samples: usize,
}

impl Default for RawPulse {
    fn default() -> Self {
        Self {
            roll_off: 0.6,
            symbol_duration_ns: 2.0,
            sampling_time_ns: 1.0,
            samples: 256,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct RawChannel {
    noise_variance: Option<f64>,
    /// Path SNR at 1 m, relative to the noise variance. Default 30 dB.
    snr_1m_db: Option<f64>,
    /// Absolute path power at 1 m; excludes `snr_1m_db`.
    power_1m_db: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct RawScatter {
    mean_count: f64,
    delay_spread_ns: f64,
    /// Absolute mean power at zero excess delay.
    power_0_db: f64,
}

impl Default for RawScatter {
    fn default() -> Self {
        Self {
            mean_count: 0.0,
            delay_spread_ns: 20.0,
            power_0_db: 0.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct RawEstimator {
    gamma_db: f64,
    lambda: f64,
    grid_oversampling: usize,
    max_components: usize,
    refine_iters: usize,
    refine_tolerance: f64,
}

impl Default for RawEstimator {
    fn default() -> Self {
        let d = EstimatorConfig::default();
        Self {
            gamma_db: 10.0 * d.gamma.log10(),
            lambda: d.lambda,
            grid_oversampling: d.grid_oversampling,
            max_components: d.max_components,
            refine_iters: d.refine_iters,
            refine_tolerance: d.refine_tolerance,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct RawAssociation {
    cutoff_m: f64,
    truth_tolerance_m: f64,
}

impl Default for RawAssociation {
    fn default() -> Self {
        Self {
            cutoff_m: 0.5,
            truth_tolerance_m: 0.3,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct RawFov {
    half_angle_deg: f64,
    /// FOV gating of the association candidates.
    gating: bool,
    /// Body shadowing of the synthesized paths.
    shadowing: bool,
}

impl Default for RawFov {
    fn default() -> Self {
        Self {
            half_angle_deg: 90.0,
            gating: true,
            shadowing: true,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct RawTracker {
    accel_noise: f64,
    rho: f64,
    /// Defaults to the RMS bandwidth of the pulse.
    beta_hz: Option<f64>,
    init_position_sigma: f64,
    init_velocity_sigma: f64,
    init_perturb: bool,
}

impl Default for RawTracker {
    fn default() -> Self {
        let init = TrackerInit::default();
        Self {
            accel_noise: TrackerConfig::DEFAULT_ACCEL_NOISE,
            rho: TrackerConfig::DEFAULT_RHO,
            beta_hz: None,
            init_position_sigma: init.position_sigma,
            init_velocity_sigma: init.velocity_sigma,
            init_perturb: init.perturb,
        }
    }
}

/// A validated scenario in SI units.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub plan: FloorPlan,
    pub pas: Vec<Anchor>,
    pub va_order: usize,
    /// Ground-truth pose per step.
    pub trajectory: Vec<AgentPose>,
    pub pulse: PulseModel,
    pub channel: ChannelModel,
    pub estimator: EstimatorConfig,
    pub cutoff: f64,
    /// Largest distance between a measurement and a true path for the
    /// measurement to be attributed to that path's anchor.
    pub truth_tolerance: f64,
    /// Gating used by the association; `channel.body` is the physical shadowing.
    pub fov: FovConfig,
    pub tracker: TrackerConfig,
    pub runs: usize,
    pub seed: u64,
}

/// Non-fatal findings of `load_scenario`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub unknown_keys: Vec<String>,
}

impl Scenario {
    /// Anchor list of every PA: the PA followed by its virtual anchors.
    pub fn anchors(&self) -> Result<Vec<Vec<Anchor>>, GeometryError> {
        self.pas
            .iter()
            .map(|pa| {
                let mut v = vec![pa.clone()];
                v.extend(generate_vas(&self.plan, pa, self.va_order)?);
                Ok(v)
            })
            .collect()
    }
}

pub fn load_scenario(path: &Path) -> Result<(Scenario, ValidationReport), PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<(Scenario, ValidationReport), PipelineError> {
    let de = toml::Deserializer::parse(text).map_err(|e| PipelineError::Parse(e.to_string()))?;
    let mut unknown_keys = Vec::new();
    let raw: RawScenario = serde_ignored::deserialize(de, |p| unknown_keys.push(p.to_string()))
        .map_err(|e| PipelineError::Parse(e.to_string()))?;
    let scenario = validate(raw)?;
    Ok((scenario, ValidationReport { unknown_keys }))
}

fn finite(key: &str, v: f64) -> Result<f64, PipelineError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(PipelineError::invalid(key, "must be finite"))
    }
}

fn point(key: &str, p: [f64; 2]) -> Result<Point, PipelineError> {
    Ok(Point::new(finite(key, p[0])?, finite(key, p[1])?))
}

fn validate(raw: RawScenario) -> Result<Scenario, PipelineError> {
    let runs = raw.runs.unwrap_or(1);
    if runs == 0 {
        return Err(PipelineError::invalid("runs", "must be >= 1"));
    }

    let walls = match (raw.walls, raw.room) {
        (Some(_), Some(_)) => return Err(PipelineError::invalid("room", "give either `walls` or `room`, not both")),
        (None, None) => return Err(PipelineError::invalid("walls", "missing required key")),
        (None, Some(room)) => {
            let lo = point("room.min", room.min)?;
            let hi = point("room.max", room.max)?;
            if !(hi.x > lo.x && hi.y > lo.y) {
                return Err(PipelineError::invalid("room.max", "must exceed room.min in both coordinates"));
            }
            FloorPlan::rectangle(lo.x, lo.y, hi.x, hi.y)
                .map_err(|e| PipelineError::invalid("room", e.to_string()))?
                .walls()
                .to_vec()
        }
        (Some(raw_walls), None) => {
            let mut walls = Vec::with_capacity(raw_walls.len());
            for (i, w) in raw_walls.into_iter().enumerate() {
                let id = w.id.ok_or_else(|| PipelineError::invalid(format!("walls[{i}].id"), "missing required key"))?;
                let key = format!("walls[{i}].points");
                let [a, b] = w
                    .points
                    .ok_or_else(|| PipelineError::invalid(&key, format!("missing required key (wall `{id}`)")))?;
                let wall = Wall::new(id.clone(), point(&key, a)?, point(&key, b)?)
                    .map_err(|e| PipelineError::invalid(&key, e.to_string()))?;
                walls.push(wall);
            }
            walls
        }
    };
    let plan = FloorPlan::new(walls).map_err(|e| PipelineError::invalid("walls", e.to_string()))?;

    let raw_anchors = raw
        .anchors
        .ok_or_else(|| PipelineError::invalid("anchors", "missing required key"))?;
    if raw_anchors.is_empty() {
        return Err(PipelineError::invalid("anchors", "at least one anchor is required"));
    }
    let mut seen = HashSet::new();
    let mut pas = Vec::with_capacity(raw_anchors.len());
    for (i, a) in raw_anchors.into_iter().enumerate() {
        let id = a.id.ok_or_else(|| PipelineError::invalid(format!("anchors[{i}].id"), "missing required key"))?;
        if id.contains(':') {
            return Err(PipelineError::invalid(format!("anchors[{i}].id"), "`:` is reserved for virtual anchors"));
        }
        if !seen.insert(id.clone()) {
            return Err(PipelineError::invalid(format!("anchors[{i}].id"), format!("duplicate anchor id `{id}`")));
        }
        let key = format!("anchors[{i}].position");
        let pos = a
            .position
            .ok_or_else(|| PipelineError::invalid(&key, format!("missing required key (anchor `{id}`)")))?;
        pas.push(Anchor::physical(id.as_str(), point(&key, pos)?));
    }

    let va_order = raw.va_order.unwrap_or(1);
    if va_order > 2 {
        return Err(PipelineError::invalid("va_order", "orders above 2 are not supported"));
    }

    let traj = raw
        .trajectory
        .ok_or_else(|| PipelineError::invalid("trajectory", "missing required key"))?;
    let dt = traj
        .dt
        .ok_or_else(|| PipelineError::invalid("trajectory.dt", "missing required key"))?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(PipelineError::invalid("trajectory.dt", "must be > 0"));
    }
    let trajectory = build_trajectory(&traj, dt)?;

    let p = &raw.pulse;
    let pulse = PulseModel::new(p.roll_off, p.symbol_duration_ns * NS, p.sampling_time_ns * NS, p.samples)
        .map_err(|e| PipelineError::invalid("pulse", e.to_string()))?;

    let noise_variance = raw.channel.noise_variance.unwrap_or(1.0);
    if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
        return Err(PipelineError::invalid("channel.noise_variance", "must be >= 0"));
    }
    let amplitude = match (raw.channel.snr_1m_db, raw.channel.power_1m_db) {
        (Some(_), Some(_)) => {
            return Err(PipelineError::invalid(
                "channel.power_1m_db",
                "give either `snr_1m_db` or `power_1m_db`, not both",
            ))
        }
        (None, Some(db)) => AmplitudeModel {
            power_1m: 10f64.powf(finite("channel.power_1m_db", db)? / 10.0),
        },
        (snr, None) => {
            let db = finite("channel.snr_1m_db", snr.unwrap_or(30.0))?;
            if noise_variance == 0.0 {
                return Err(PipelineError::invalid(
                    "channel.snr_1m_db",
                    "undefined for zero noise; use `power_1m_db`",
                ));
            }
            AmplitudeModel::from_snr_db(db, noise_variance)
        }
    };
    let scatter = ScatterConfig {
        mean_count: raw.scatter.mean_count,
        delay_spread: raw.scatter.delay_spread_ns * NS,
        power_0: 10f64.powf(raw.scatter.power_0_db / 10.0),
        onset: 0.0,
    };
    scatter
        .validate()
        .map_err(|e| PipelineError::invalid("scatter", e.to_string()))?;

    let half_angle = raw.fov.half_angle_deg.to_radians();
    let fov = FovConfig::new(half_angle, raw.fov.gating)
        .ok_or_else(|| PipelineError::invalid("fov.half_angle_deg", "must lie in (0, 180]"))?;
    let body = FovConfig::new(half_angle, raw.fov.shadowing).expect("checked above");

    let e = &raw.estimator;
    let estimator = EstimatorConfig {
        lambda: e.lambda,
        gamma: 10f64.powf(e.gamma_db / 10.0),
        grid_oversampling: e.grid_oversampling,
        max_components: e.max_components,
        refine_iters: e.refine_iters,
        refine_tolerance: e.refine_tolerance,
    };
    estimator
        .validate()
        .map_err(|err| PipelineError::invalid("estimator", err.to_string()))?;

    if !(raw.association.cutoff_m > 0.0) {
        return Err(PipelineError::invalid("association.cutoff_m", "must be > 0"));
    }
    if !(raw.association.truth_tolerance_m > 0.0) {
        return Err(PipelineError::invalid("association.truth_tolerance_m", "must be > 0"));
    }

    let t = &raw.tracker;
    let beta = match t.beta_hz {
        Some(b) => b,
        None => effective_bandwidth(&pulse).map_err(|err| PipelineError::invalid("pulse", err.to_string()))?,
    };
    let tracker = TrackerConfig {
        dt,
        accel_noise: t.accel_noise,
        rho: t.rho,
        beta,
        init: TrackerInit {
            position_sigma: t.init_position_sigma,
            velocity_sigma: t.init_velocity_sigma,
            perturb: t.init_perturb,
        },
    };
    tracker
        .validate()
        .map_err(|err| PipelineError::invalid("tracker", err.to_string()))?;

    let scenario = Scenario {
        plan,
        pas,
        va_order,
        trajectory,
        pulse,
        channel: ChannelModel {
            amplitude,
            scatter,
            noise: NoiseConfig {
                variance: noise_variance,
            },
            body,
        },
        estimator,
        cutoff: raw.association.cutoff_m,
        truth_tolerance: raw.association.truth_tolerance_m,
        fov,
        tracker,
        runs,
        seed: raw.seed.unwrap_or(0),
    };
    check_clearance(&scenario)?;
    Ok(scenario)
}

fn build_trajectory(traj: &RawTrajectory, dt: f64) -> Result<Vec<AgentPose>, PipelineError> {
    let generated = traj.start.is_some() || traj.velocity.is_some() || traj.steps.is_some();
    match (&traj.poses, generated) {
        (Some(_), true) => Err(PipelineError::invalid(
            "trajectory.poses",
            "give either `poses` or `start`/`velocity`/`steps`, not both",
        )),
        (None, false) => Err(PipelineError::invalid("trajectory.poses", "missing required key")),
        (Some(poses), false) => {
            if poses.is_empty() {
                return Err(PipelineError::invalid("trajectory.poses", "trajectory must be non-empty"));
            }
            let mut pts = Vec::with_capacity(poses.len());
            for (i, p) in poses.iter().enumerate() {
                let key = format!("trajectory.poses[{i}]");
                pts.push((point(&key, [p[0], p[1]])?, finite(&key, p[2])?.to_radians()));
            }
            // velocity by finite differences; the last pose reuses the previous one
            let n = pts.len();
            Ok((0..n)
                .map(|i| {
                    let v = if n < 2 {
                        Vector2::zeros()
                    } else if i + 1 < n {
                        (pts[i + 1].0 - pts[i].0) / dt
                    } else {
                        (pts[i].0 - pts[i - 1].0) / dt
                    };
                    AgentPose::new(pts[i].0, pts[i].1, v)
                })
                .collect())
        }
        (None, true) => {
            let start = point(
                "trajectory.start",
                traj.start
                    .ok_or_else(|| PipelineError::invalid("trajectory.start", "missing required key"))?,
            )?;
            let v = point("trajectory.velocity", traj.velocity.unwrap_or([0.0, 0.0]))?.coords;
            let steps = traj
                .steps
                .ok_or_else(|| PipelineError::invalid("trajectory.steps", "missing required key"))?;
            if steps == 0 {
                return Err(PipelineError::invalid("trajectory.steps", "trajectory must be non-empty"));
            }
            let heading = match traj.heading_deg {
                Some(h) => finite("trajectory.heading_deg", h)?.to_radians(),
                None if v.norm() > 0.0 => v.y.atan2(v.x),
                None => 0.0,
            };
            Ok((0..steps)
                .map(|n| AgentPose::new(start + v * (n as f64 * dt), heading, v))
                .collect())
        }
    }
}

/// Every anchor must stay away from every true agent position.
fn check_clearance(s: &Scenario) -> Result<(), PipelineError> {
    let anchors = s.anchors().map_err(|e| PipelineError::invalid("walls", e.to_string()))?;
    for (n, pose) in s.trajectory.iter().enumerate() {
        for a in anchors.iter().flatten() {
            if (a.position - pose.position).norm() < 1e-6 {
                return Err(PipelineError::invalid(
                    format!("trajectory.poses[{n}]"),
                    format!("agent coincides with anchor `{}`", a.id),
                ));
            }
        }
    }
    Ok(())
}

/// Stable per-run seed (SplitMix64 finalizer over the master seed and index).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub truth: Point,
    pub estimate: Point,
    pub error: f64,
}

/// One extracted measurement with its association and its generation truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationRecord {
    pub step: usize,
    pub pa: usize,
    pub measurement: usize,
    pub distance: f64,
    /// `None` is clutter.
    pub anchor: Option<AnchorId>,
    /// Anchor of the nearest true path within the truth tolerance.
    pub truth: Option<AnchorId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub associations: Vec<AssociationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub runs: usize,
    pub steps: usize,
    pub rmse: f64,
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    /// Associated measurements per (run, step).
    pub mean_associated: f64,
    /// Fraction of measurements left unassociated.
    pub clutter_rate: f64,
    /// Fraction of associated measurements whose anchor differs from the truth label.
    pub wrong_association_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub runs: Vec<RunResult>,
    pub summary: Summary,
}

/// Linear interpolation between order statistics at rank `(n − 1)·q`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl RunReport {
    pub fn from_runs(runs: Vec<RunResult>) -> Self {
        let mut errors: Vec<f64> = runs.iter().flat_map(|r| r.steps.iter().map(|s| s.error)).collect();
        let steps = errors.len();
        let rmse = if steps == 0 {
            f64::NAN
        } else {
            (errors.iter().map(|e| e * e).sum::<f64>() / steps as f64).sqrt()
        };
        errors.sort_by(f64::total_cmp);

        let records = runs.iter().flat_map(|r| &r.associations);
        let (mut total, mut associated, mut wrong) = (0, 0, 0);
        for rec in records {
            total += 1;
            if let Some(a) = &rec.anchor {
                associated += 1;
                if rec.truth.as_ref() != Some(a) {
                    wrong += 1;
                }
            }
        }
        let summary = Summary {
            runs: runs.len(),
            steps,
            rmse,
            p50: percentile(&errors, 0.5),
            p90: percentile(&errors, 0.9),
            p95: percentile(&errors, 0.95),
            mean_associated: ratio(associated, steps),
            clutter_rate: ratio(total - associated, total),
            wrong_association_rate: ratio(wrong, associated),
        };
        RunReport { runs, summary }
    }
}

fn truth_label(distance: f64, snap: &Snapshot, tolerance: f64) -> Option<AnchorId> {
    let truth = snap.truth.as_ref()?;
    truth
        .mpcs
        .iter()
        .map(|m| ((distance - m.delay * SPEED_OF_LIGHT).abs(), m))
        .filter(|(d, _)| *d <= tolerance)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .and_then(|(_, m)| m.anchor.clone())
}

/// Executes one Monte-Carlo run with its derived seed.
pub fn run_once(s: &Scenario, anchors: &[Vec<Anchor>], run: usize) -> Result<RunResult, PipelineError> {
    let seed = derive_seed(s.seed, run as u64);
    let n_pa = anchors.len();
    let mut inputs = Vec::with_capacity(s.trajectory.len());
    for (n, pose) in s.trajectory.iter().enumerate() {
        let mut snapshots = Vec::with_capacity(n_pa);
        for (j, list) in anchors.iter().enumerate() {
            let snap_seed = derive_seed(seed, 1 + (n * n_pa + j) as u64);
            let snap = snapshot_from_scene(pose, list, &s.plan, &s.channel, &s.pulse, snap_seed).map_err(|e| {
                PipelineError::Synthesis {
                    run,
                    step: n,
                    pa: j,
                    message: e.to_string(),
                }
            })?;
            snapshots.push(snap);
        }
        inputs.push(StepInput {
            orientation: pose.orientation(),
            snapshots,
        });
    }

    let ctx = TrackingContext {
        plan: &s.plan,
        anchors,
        fov: s.fov,
        estimator: s.estimator.clone(),
        cutoff: s.cutoff,
        tracker: s.tracker.clone(),
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let initial = s.tracker.init.initial_state(&s.trajectory[0], &mut init_rng);
    let track = run_tracker(&ctx, initial, &inputs).map_err(|source| PipelineError::Tracking { run, source })?;

    let mut steps = Vec::with_capacity(track.steps.len());
    let mut associations = Vec::new();
    for (n, (step, pose)) in track.steps.iter().zip(&s.trajectory).enumerate() {
        let est = step.state.position();
        steps.push(StepRecord {
            truth: pose.position,
            estimate: est,
            error: (est - pose.position).norm(),
        });
        for (j, pa) in step.per_pa.iter().enumerate() {
            let snap = &inputs[n].snapshots[j];
            for (i, m) in pa.measurements.iter().enumerate() {
                associations.push(AssociationRecord {
                    step: n,
                    pa: j,
                    measurement: i,
                    distance: m.distance,
                    anchor: pa.association.anchor_of(i).cloned(),
                    truth: truth_label(m.distance, snap, s.truth_tolerance),
                });
            }
        }
    }
    Ok(RunResult {
        run,
        seed,
        steps,
        associations,
    })
}

/// Runs all Monte-Carlo runs on the global rayon pool.
pub fn run_scenario(s: &Scenario) -> Result<RunReport, PipelineError> {
    let anchors = s.anchors().map_err(|e| PipelineError::invalid("walls", e.to_string()))?;
    let runs = (0..s.runs)
        .into_par_iter()
        .map(|r| run_once(s, &anchors, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunReport::from_runs(runs))
}

/// Same as [`run_scenario`] on a dedicated pool of `threads` workers.
pub fn run_scenario_with_threads(s: &Scenario, threads: usize) -> Result<RunReport, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
    pool.install(|| run_scenario(s))
}

const CLUTTER: &str = "CLUTTER";

fn fixed(v: f64) -> String {
    format!("{v:.12}")
}

pub fn track_csv(report: &RunReport) -> String {
    let mut out = String::from("run,step,true_x,true_y,est_x,est_y,error_m\n");
    for r in &report.runs {
        for (n, s) in r.steps.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.run,
                n,
                fixed(s.truth.x),
                fixed(s.truth.y),
                fixed(s.estimate.x),
                fixed(s.estimate.y),
                fixed(s.error)
            );
        }
    }
    out
}

pub fn summary_csv(report: &RunReport) -> String {
    let s = &report.summary;
    let mut out = String::from("metric,value\n");
    let _ = writeln!(out, "runs,{}", s.runs);
    let _ = writeln!(out, "steps,{}", s.steps);
    for (name, v) in [
        ("rmse_m", s.rmse),
        ("p50_m", s.p50),
        ("p90_m", s.p90),
        ("p95_m", s.p95),
        ("mean_associated", s.mean_associated),
        ("clutter_rate", s.clutter_rate),
        ("wrong_association_rate", s.wrong_association_rate),
    ] {
        let _ = writeln!(out, "{name},{}", fixed(v));
    }
    out
}

pub fn associations_csv(report: &RunReport) -> String {
    let mut out = String::from("run,step,pa,measurement,distance_m,anchor,truth\n");
    for r in &report.runs {
        for a in &r.associations {
            let label = |id: &Option<AnchorId>| id.as_ref().map_or(CLUTTER.to_string(), |a| a.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.run,
                a.step,
                a.pa,
                a.measurement,
                fixed(a.distance),
                label(&a.anchor),
                label(&a.truth)
            );
        }
    }
    out
}

/// Writes `track.csv`, `summary.csv` and `associations.csv` into `out_dir`,
/// creating it if needed. Returns the written paths.
pub fn write_report(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let io = |path: &Path, e: std::io::Error| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, body) in [
        ("track.csv", track_csv(report)),
        ("summary.csv", summary_csv(report)),
        ("associations.csv", associations_csv(report)),
    ] {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const MINIMAL: &str = r#"
[[walls]]
id = "w1"
points = [[0.0, 0.0], [10.0, 0.0]]

[[anchors]]
id = "pa1"
position = [1.0, 5.0]

[trajectory]
dt = 0.1
poses = [[3.0, 3.0, 0.0], [3.1, 3.0, 0.0]]
"#;

    fn parse(text: &str) -> Scenario {
        parse_scenario(text).unwrap().0
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let (s, report) = parse_scenario(MINIMAL).unwrap();
        assert!(report.unknown_keys.is_empty());
        assert_eq!(s.runs, 1);
        assert_eq!(s.seed, 0);
        assert_eq!(s.va_order, 1);
        assert_eq!(s.plan.walls().len(), 1);
        assert_eq!(s.trajectory.len(), 2);
        assert_abs_diff_eq!(s.trajectory[0].velocity.x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.trajectory[1].velocity.x, 1.0, epsilon = 1e-12);
        assert_eq!(s.cutoff, 0.5);
        assert_eq!(s.fov, FovConfig::default());
        assert_eq!(s.pulse.roll_off(), 0.6);
        assert_abs_diff_eq!(s.pulse.symbol_duration(), 2e-9, epsilon = 1e-21);
        assert_abs_diff_eq!(s.channel.amplitude.power_1m, 1000.0, epsilon = 1e-9);
        assert_eq!(s.tracker.rho, 3.0);
        assert_abs_diff_eq!(s.estimator.gamma, 10.0, epsilon = 1e-12);
        assert!(s.tracker.beta > 1e8);
    }

    #[test]
    fn zero_length_wall_names_the_wall() {
        let text = MINIMAL.replace("[[0.0, 0.0], [10.0, 0.0]]", "[[2.0, 2.0], [2.0, 2.0]]");
        let err = parse_scenario(&text).unwrap_err();
        assert_eq!(err.category(), "validation");
        let msg = err.to_string();
        assert!(msg.contains("w1"), "{msg}");
        assert!(msg.contains("walls[0].points"), "{msg}");
    }

    #[test]
    fn unknown_key_is_a_warning() {
        let text = format!("colour = \"red\"\n{MINIMAL}\n[tracker]\nrho = 2.0\nfudge = 1\n");
        let (s, report) = parse_scenario(&text).unwrap();
        assert_eq!(s.tracker.rho, 2.0);
        assert_eq!(report.unknown_keys, vec!["colour".to_string(), "tracker.fudge".to_string()]);
    }

    #[test]
    fn missing_and_bad_keys_are_named() {
        let cases = [
            (MINIMAL.replace("dt = 0.1", ""), "trajectory.dt"),
            (MINIMAL.replace("dt = 0.1", "dt = 0.0"), "trajectory.dt"),
            (MINIMAL.replace("dt = 0.1", "dt = -1.0"), "trajectory.dt"),
            (MINIMAL.replace("position = [1.0, 5.0]", ""), "anchors[0].position"),
            (MINIMAL.replace("poses = [[3.0, 3.0, 0.0], [3.1, 3.0, 0.0]]", "poses = []"), "trajectory.poses"),
            (format!("runs = 0\n{MINIMAL}"), "runs"),
            (format!("{MINIMAL}\n[fov]\nhalf_angle_deg = 0.0\n"), "fov.half_angle_deg"),
            (format!("{MINIMAL}\n[association]\ncutoff_m = 0.0\n"), "association.cutoff_m"),
        ];
        for (text, key) in cases {
            let err = parse_scenario(&text).unwrap_err();
            match &err {
                PipelineError::Invalid { key: k, .. } => assert_eq!(k, key, "{err}"),
                other => panic!("expected validation error for {key}, got {other}"),
            }
        }
    }

    #[test]
    fn syntax_error_is_a_parse_error() {
        let err = parse_scenario("runs = [").unwrap_err();
        assert_eq!(err.category(), "parse");
    }

    #[test]
    fn generated_trajectory() {
        let text = r#"
[room]
min = [0.0, 0.0]
max = [8.0, 6.0]
[[anchors]]
id = "a"
position = [1.0, 1.0]
[trajectory]
dt = 0.5
start = [2.0, 3.0]
velocity = [0.0, 1.0]
steps = 4
"#;
        let s = parse(text);
        assert_eq!(s.plan.walls().len(), 4);
        assert_eq!(s.trajectory.len(), 4);
        assert_abs_diff_eq!(s.trajectory[3].position.y, 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.trajectory[0].orientation(), std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_eq!(s.anchors().unwrap()[0].len(), 5);
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        let seeds: HashSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_abs_diff_eq!(percentile(&v, 0.9), 4.6, epsilon = 1e-12);
        assert_eq!(percentile(&[2.0], 0.95), 2.0);
        assert!(percentile(&[], 0.5).is_nan());
    }

    fn static_noiseless() -> Scenario {
        parse(
            r#"
[room]
min = [0.0, 0.0]
max = [8.0, 6.0]
[[anchors]]
id = "pa1"
position = [6.0, 3.5]
[trajectory]
dt = 0.1
start = [2.0, 2.0]
steps = 20
[channel]
noise_variance = 0.0
power_1m_db = 30.0
[tracker]
accel_noise = 0.0
init_perturb = false
"#,
        )
    }

    #[test]
    fn noiseless_static_run_is_exact() {
        let report = run_scenario(&static_noiseless()).unwrap();
        eprintln!("{}{}", associations_csv(&report), track_csv(&report));
        assert!(report.summary.rmse < 1e-3, "rmse {}", report.summary.rmse);
        assert_eq!(report.summary.wrong_association_rate, 0.0);
    }

    #[test]
    fn runs_repeat_exactly() {
        let text = format!("{MINIMAL}\n[scatter]\nmean_count = 3.0\npower_0_db = 10.0\n");
        let s = parse(&text);
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(track_csv(&a), track_csv(&b));
    }

    #[test]
    fn row_counts_match() {
        let mut s = static_noiseless();
        s.runs = 3;
        let report = run_scenario(&s).unwrap();
        let track = track_csv(&report);
        assert_eq!(track.lines().count(), 1 + 3 * 20);
        let assoc = associations_csv(&report);
        let n: usize = report.runs.iter().map(|r| r.associations.len()).sum();
        assert_eq!(assoc.lines().count(), 1 + n);
        assert_eq!(summary_csv(&report).lines().count(), 10);
    }

    #[test]
    fn empty_report_writes_headers() {
        let report = RunReport::from_runs(vec![RunResult {
            run: 0,
            seed: 0,
            steps: vec![],
            associations: vec![],
        }]);
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&report, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        assert_eq!(fs::read_to_string(&files[0]).unwrap(), "run,step,true_x,true_y,est_x,est_y,error_m\n");
        assert_eq!(
            fs::read_to_string(&files[2]).unwrap(),
            "run,step,pa,measurement,distance_m,anchor,truth\n"
        );
        assert!(fs::read_to_string(&files[1]).unwrap().contains("steps,0\n"));
    }

    #[test]
    fn io_error_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let report = RunReport::from_runs(vec![]);
        let err = write_report(&report, &blocker.join("sub")).unwrap_err();
        assert_eq!(err.category(), "io");
        assert!(err.to_string().contains("file"));
    }
}
