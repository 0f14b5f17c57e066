//! Extended Kalman filter over a constant-velocity agent state driven by
//! ranges to associated physical and virtual anchors.
//!
//! Each associated range is weighted by the delay Cramér-Rao bound of its
//! component, evaluated with a deflated effective bandwidth `β/ρ`:
//! `σ = c / sqrt(8π² (β/ρ)² SNR)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, RowVector4, Vector2, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::association::{build_candidates, ospa_associate, Association, CandidateSet};
use crate::estimator::{estimate_mpcs, to_distance_measurements, DistanceMeasurement, EstimatorConfig, EstimatorError};
use crate::geometry::{AgentPose, Anchor, FloorPlan, FovConfig, Point};
use crate::signal::{PulseModel, Snapshot};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("pulse has zero energy")]
    ZeroEnergy,
    #[error("SNR must be positive, got {0}")]
    NonPositiveSnr(f64),
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("invalid tracker config: {0}")]
    InvalidConfig(&'static str),
    #[error("step {step}: expected {expected} snapshots (one per PA), got {got}")]
    SnapshotCount { step: usize, expected: usize, got: usize },
    #[error("step {step}, PA {pa}: {source}")]
    Estimator {
        step: usize,
        pa: usize,
        #[source]
        source: EstimatorError,
    },
}

/// RMS bandwidth `sqrt(∫f²|S(f)|²df / ∫|S(f)|²df)` of a real sampled
/// waveform, from a zero-padded FFT.
pub fn rms_bandwidth(samples: &[f64], sampling_time: f64) -> Result<f64, TrackingError> {
    if samples.iter().all(|&x| x == 0.0) {
        return Err(TrackingError::ZeroEnergy);
    }
    let len = (samples.len() * 16).max(4096).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
    buf.resize(len, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let df = 1.0 / (len as f64 * sampling_time);
    let (mut num, mut den) = (0.0, 0.0);
    for (k, c) in buf.iter().enumerate() {
        // two-sided frequency axis; the Nyquist bin is split evenly
        let p = c.norm_sqr();
        if 2 * k == len {
            let f = 0.5 * len as f64 * df;
            num += f * f * p;
            den += p;
            continue;
        }
        let signed = if 2 * k < len { k as f64 } else { k as f64 - len as f64 };
        let f = signed * df;
        num += f * f * p;
        den += p;
    }
    Ok((num / den).sqrt())
}

/// Effective bandwidth `β` of the sampled pulse.
pub fn effective_bandwidth(pulse: &PulseModel) -> Result<f64, TrackingError> {
    let s = pulse.sparse(0.0);
    rms_bandwidth(&s.values, pulse.sampling_time())
}

/// CRLB standard deviation of a range measurement in meters.
pub fn measurement_sigma(snr: f64, beta: f64, rho: f64) -> Result<f64, TrackingError> {
    if !(snr > 0.0) {
        return Err(TrackingError::NonPositiveSnr(snr));
    }
    if !(beta > 0.0) {
        return Err(TrackingError::NonPositiveBandwidth(beta));
    }
    let b = beta / rho;
    Ok(SPEED_OF_LIGHT / (8.0 * PI * PI * b * b * snr).sqrt())
}

/// State `[px, py, vx, vy]` with covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    pub mean: Vector4<f64>,
    pub covariance: Matrix4<f64>,
}

impl KalmanState {
    pub fn position(&self) -> Point {
        Point::new(self.mean[0], self.mean[1])
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.mean[2], self.mean[3])
    }
}

/// How the filter is initialised from the true start pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerInit {
    pub position_sigma: f64,
    pub velocity_sigma: f64,
    /// Draw the initial mean from the initial covariance around the truth.
    pub perturb: bool,
}

impl Default for TrackerInit {
    fn default() -> Self {
        Self {
            position_sigma: 0.3,
            velocity_sigma: 1.0,
            perturb: true,
        }
    }
}

impl TrackerInit {
    pub fn initial_state<R: Rng>(&self, truth: &AgentPose, rng: &mut R) -> KalmanState {
        let mut mean = Vector4::new(truth.position.x, truth.position.y, truth.velocity.x, truth.velocity.y);
        if self.perturb {
            let sig = [self.position_sigma, self.position_sigma, self.velocity_sigma, self.velocity_sigma];
            for (m, s) in mean.iter_mut().zip(sig) {
                let e: f64 = rng.sample(StandardNormal);
                *m += s * e;
            }
        }
        let p2 = self.position_sigma.powi(2);
        let v2 = self.velocity_sigma.powi(2);
        KalmanState {
            mean,
            covariance: Matrix4::from_diagonal(&Vector4::new(p2, p2, v2, v2)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Step period in seconds.
    pub dt: f64,
    /// White-acceleration noise standard deviation in m/s².
    pub accel_noise: f64,
    /// Bandwidth deflation factor.
    pub rho: f64,
    /// Effective bandwidth in Hz.
    pub beta: f64,
    pub init: TrackerInit,
}

impl TrackerConfig {
    pub const DEFAULT_ACCEL_NOISE: f64 = 0.5;
    pub const DEFAULT_RHO: f64 = 3.0;

    pub fn new(dt: f64, beta: f64) -> Self {
        Self {
            dt,
            accel_noise: Self::DEFAULT_ACCEL_NOISE,
            rho: Self::DEFAULT_RHO,
            beta,
            init: TrackerInit::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrackingError> {
        if !(self.dt > 0.0) {
            return Err(TrackingError::InvalidConfig("dt must be > 0"));
        }
        if !(self.accel_noise >= 0.0) {
            return Err(TrackingError::InvalidConfig("accel_noise must be >= 0"));
        }
        if !(self.rho >= 1.0) {
            return Err(TrackingError::InvalidConfig("rho must be >= 1"));
        }
        if !(self.beta > 0.0) {
            return Err(TrackingError::InvalidConfig("beta must be > 0"));
        }
        if !(self.init.position_sigma > 0.0 && self.init.velocity_sigma > 0.0) {
            return Err(TrackingError::InvalidConfig("initial sigmas must be > 0"));
        }
        Ok(())
    }

    pub fn transition(&self) -> Matrix4<f64> {
        let mut f = Matrix4::identity();
        f[(0, 2)] = self.dt;
        f[(1, 3)] = self.dt;
        f
    }

    /// Piecewise-constant white-acceleration process noise.
    pub fn process_noise(&self) -> Matrix4<f64> {
        let dt = self.dt;
        let block = Matrix2::new(dt.powi(4) / 4.0, dt.powi(3) / 2.0, dt.powi(3) / 2.0, dt * dt) * self.accel_noise.powi(2);
        let mut q = Matrix4::zeros();
        for axis in 0..2 {
            for r in 0..2 {
                for c in 0..2 {
                    q[(axis + 2 * r, axis + 2 * c)] = block[(r, c)];
                }
            }
        }
        q
    }
}

fn symmetrize(p: &Matrix4<f64>) -> Matrix4<f64> {
    (p + p.transpose()) * 0.5
}

pub fn predict(state: &KalmanState, cfg: &TrackerConfig) -> KalmanState {
    let f = cfg.transition();
    KalmanState {
        mean: f * state.mean,
        covariance: symmetrize(&(f * state.covariance * f.transpose() + cfg.process_noise())),
    }
}

/// One range to a known anchor position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeObservation {
    pub anchor: Point,
    pub range: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub state: KalmanState,
    /// Observations dropped because the mean coincides with their anchor.
    pub skipped: Vec<usize>,
}

/// Stacked EKF update with `h(p) = ‖p − a‖`, in Joseph form.
pub fn update(state: &KalmanState, observations: &[RangeObservation]) -> UpdateOutcome {
    let p = state.position();
    let mut skipped = Vec::new();
    let mut rows = Vec::new();
    for (i, o) in observations.iter().enumerate() {
        let diff = p - o.anchor;
        let dist = diff.norm();
        if dist < 1e-9 {
            skipped.push(i);
            continue;
        }
        rows.push((RowVector4::new(diff.x / dist, diff.y / dist, 0.0, 0.0), o.range - dist, o.sigma));
    }
    if rows.is_empty() {
        return UpdateOutcome { state: *state, skipped };
    }
    let m = rows.len();
    let h = DMatrix::from_fn(m, 4, |r, c| rows[r].0[c]);
    let innovation = DVector::from_fn(m, |r, _| rows[r].1);
    let r_cov = DMatrix::from_diagonal(&DVector::from_fn(m, |r, _| rows[r].2 * rows[r].2));
    let pc = DMatrix::from_column_slice(4, 4, state.covariance.as_slice());
    let s = &h * &pc * h.transpose() + &r_cov;
    let Some(s_inv) = s.clone().cholesky().map(|c| c.inverse()) else {
        skipped.extend(0..observations.len());
        return UpdateOutcome { state: *state, skipped };
    };
    let k = &pc * h.transpose() * s_inv;
    let mean = DVector::from_column_slice(state.mean.as_slice()) + &k * innovation;
    let ikh = DMatrix::<f64>::identity(4, 4) - &k * &h;
    let cov = &ikh * &pc * ikh.transpose() + &k * r_cov * k.transpose();
    UpdateOutcome {
        state: KalmanState {
            mean: Vector4::from_column_slice(mean.as_slice()),
            covariance: symmetrize(&Matrix4::from_column_slice(cov.as_slice())),
        },
        skipped,
    }
}

/// Turns an association into EKF observations with CRLB-derived sigmas.
pub fn observations_from_association(
    assoc: &Association,
    cand: &CandidateSet,
    measurements: &[DistanceMeasurement],
    cfg: &TrackerConfig,
) -> Result<Vec<RangeObservation>, TrackingError> {
    assoc
        .pairs
        .iter()
        .map(|pair| {
            let m = measurements[pair.measurement];
            Ok(RangeObservation {
                anchor: cand.entries[pair.candidate].position,
                range: m.distance,
                sigma: measurement_sigma(m.snr, cfg.beta, cfg.rho)?,
            })
        })
        .collect()
}

/// Fixed inputs of a tracking run.
#[derive(Debug, Clone)]
pub struct TrackingContext<'a> {
    pub plan: &'a FloorPlan,
    /// Per PA: the PA followed by its virtual anchors.
    pub anchors: &'a [Vec<Anchor>],
    /// Gate applied when forming association candidates.
    pub fov: FovConfig,
    pub estimator: EstimatorConfig,
    /// Association cut-off distance in meters.
    pub cutoff: f64,
    pub tracker: TrackerConfig,
}

/// Observations for one time step: the known heading and one snapshot per PA.
#[derive(Debug, Clone)]
pub struct StepInput {
    pub orientation: f64,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaStep {
    pub measurements: Vec<DistanceMeasurement>,
    pub candidates: CandidateSet,
    pub association: Association,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackStep {
    pub predicted: KalmanState,
    pub state: KalmanState,
    pub per_pa: Vec<PaStep>,
    /// Associated observations dropped by the update.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentTrack {
    pub steps: Vec<TrackStep>,
}

/// Runs predict → candidates → estimation → association → update over all
/// steps. `initial` is the state at step 0, which is not predicted.
pub fn run_tracker(
    ctx: &TrackingContext<'_>,
    initial: KalmanState,
    steps: &[StepInput],
) -> Result<AgentTrack, TrackingError> {
    ctx.tracker.validate()?;
    let mut state = initial;
    let mut out = Vec::with_capacity(steps.len());
    for (n, step) in steps.iter().enumerate() {
        if step.snapshots.len() != ctx.anchors.len() {
            return Err(TrackingError::SnapshotCount {
                step: n,
                expected: ctx.anchors.len(),
                got: step.snapshots.len(),
            });
        }
        let predicted = if n == 0 { state } else { predict(&state, &ctx.tracker) };
        let hypothesis = AgentPose::new(predicted.position(), step.orientation, predicted.velocity());

        let mut per_pa = Vec::with_capacity(ctx.anchors.len());
        let mut observations = Vec::new();
        for (j, (anchors, snap)) in ctx.anchors.iter().zip(&step.snapshots).enumerate() {
            let estimates = estimate_mpcs(snap, &ctx.estimator).map_err(|source| TrackingError::Estimator {
                step: n,
                pa: j,
                source,
            })?;
            let measurements = to_distance_measurements(&estimates);
            let candidates = build_candidates(&hypothesis, anchors, ctx.plan, &ctx.fov);
            let z: Vec<f64> = measurements.iter().map(|m| m.distance).collect();
            let association = ospa_associate(&z, &candidates, ctx.cutoff);
            observations.extend(observations_from_association(
                &association,
                &candidates,
                &measurements,
                &ctx.tracker,
            )?);
            per_pa.push(PaStep {
                measurements,
                candidates,
                association,
            });
        }
        let outcome = update(&predicted, &observations);
        state = outcome.state;
        out.push(TrackStep {
            predicted,
            state,
            per_pa,
            skipped: outcome.skipped.len(),
        });
    }
    Ok(AgentTrack { steps: out })
}
