//! Sparsity-penalised deterministic maximum-likelihood extraction of
//! multipath components.
//!
//! For a fixed delay vector the amplitudes and the noise variance have closed
//! form ML solutions (least squares and mean squared residual). The delays
//! are found greedily: each new component is seeded at the best point of an
//! oversampled delay grid, refined locally by golden-section search, and then
//! all delays are refined cyclically. Components are added until the newest
//! one's SNR estimate falls below the detection threshold.

use num_complex::Complex64;
use thiserror::Error;

use crate::signal::{PulseModel, Snapshot, SparsePulse};
use crate::SPEED_OF_LIGHT;

/// Lower bound on the noise variance inside the search objective, relative to
/// the mean sample power. Only keeps the log finite for noiseless input.
const SEARCH_FLOOR: f64 = 1e-15;

/// Dynamic range of the detector: noise variance estimates used for SNRs are
/// floored at this fraction of the mean sample power, and a residual below
/// this fraction of the input energy ends the search.
const DYNAMIC_RANGE: f64 = 1e-6;

/// A column whose energy left after projection onto the other columns falls
/// below this fraction is considered linearly dependent.
/// Bracket re-centrings allowed in one local search.
const MAX_WALK: usize = 64;
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("delays {first} and {second} give linearly dependent pulse vectors")]
    RankDeficient { first: usize, second: usize },
    #[error("delay {0} places the pulse outside the observation window")]
    EmptyColumn(usize),
    #[error("noise variance estimate is zero")]
    ZeroNoise,
    #[error("invalid estimator config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcEstimate {
    pub delay: f64,
    pub amplitude: Complex64,
    /// Linear component SNR.
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    /// ℓ1 penalty weight on the amplitudes.
    pub lambda: f64,
    /// Linear SNR detection threshold.
    pub gamma: f64,
    /// Delay grid spacing is `T_s / grid_oversampling`.
    pub grid_oversampling: usize,
    pub max_components: usize,
    /// Maximum cyclic refinement passes after each added component; passes
    /// stop early once no delay moves by more than the tolerance.
    pub refine_iters: usize,
    /// Local search tolerance as a fraction of `T_s`.
    pub refine_tolerance: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            gamma: 10.0,
            grid_oversampling: 8,
            max_components: 20,
            refine_iters: 10,
            refine_tolerance: 1e-3,
        }
    }
}

impl EstimatorConfig {
    pub fn with_gamma_db(gamma_db: f64) -> Self {
        Self {
            gamma: 10f64.powf(gamma_db / 10.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.lambda >= 0.0) {
            return Err(EstimatorError::InvalidConfig("lambda must be >= 0"));
        }
        if !(self.gamma > 0.0) {
            return Err(EstimatorError::InvalidConfig("gamma must be > 0"));
        }
        if self.grid_oversampling == 0 {
            return Err(EstimatorError::InvalidConfig("grid_oversampling must be >= 1"));
        }
        if self.max_components == 0 {
            return Err(EstimatorError::InvalidConfig("max_components must be >= 1"));
        }
        if !(self.refine_tolerance > 0.0) {
            return Err(EstimatorError::InvalidConfig("refine_tolerance must be > 0"));
        }
        Ok(())
    }
}

/// Orthonormal basis of a set of pulse vectors with its triangular factor,
/// `S = Q R`.
struct Basis {
    q: Vec<Vec<Complex64>>,
    r: Vec<Vec<Complex64>>,
}

enum BasisError {
    Dependent(usize),
    Empty(usize),
}

fn cdot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn energy(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

impl Basis {
    fn empty() -> Self {
        Self {
            q: Vec::new(),
            r: Vec::new(),
        }
    }

    /// Modified Gram-Schmidt with one re-orthogonalization pass.
    fn build(cols: &[&SparsePulse], n: usize) -> Result<Self, BasisError> {
        let k = cols.len();
        let mut q: Vec<Vec<Complex64>> = Vec::with_capacity(k);
        let mut r = vec![vec![Complex64::new(0.0, 0.0); k]; k];
        for (j, col) in cols.iter().enumerate() {
            let e = col.energy();
            if e <= f64::MIN_POSITIVE {
                return Err(BasisError::Empty(j));
            }
            let mut v = col.to_dense(n);
            for _ in 0..2 {
                for (i, qi) in q.iter().enumerate() {
                    let c = cdot(qi, &v);
                    r[i][j] += c;
                    for (vv, qq) in v.iter_mut().zip(qi) {
                        *vv -= c * qq;
                    }
                }
            }
            let rem = energy(&v);
            if rem <= RANK_TOLERANCE * e {
                return Err(BasisError::Dependent(j));
            }
            let norm = rem.sqrt();
            r[j][j] = Complex64::new(norm, 0.0);
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
        Ok(Self { q, r })
    }

    fn len(&self) -> usize {
        self.q.len()
    }

    /// `Qᴴ s` for a sparse column.
    fn coeffs_sparse(&self, s: &SparsePulse) -> Vec<Complex64> {
        self.q
            .iter()
            .map(|qi| {
                s.values
                    .iter()
                    .zip(&qi[s.start..])
                    .map(|(v, x)| x.conj() * *v)
                    .sum()
            })
            .collect()
    }

    fn coeffs(&self, r: &[Complex64]) -> Vec<Complex64> {
        self.q.iter().map(|qi| cdot(qi, r)).collect()
    }

    /// Component of `r` orthogonal to the span.
    fn residual(&self, r: &[Complex64]) -> Vec<Complex64> {
        let mut out = r.to_vec();
        for qi in &self.q {
            let c = cdot(qi, &out);
            for (o, q) in out.iter_mut().zip(qi) {
                *o -= c * q;
            }
        }
        out
    }

    /// Solves `R x = b` by back substitution.
    fn solve_r(&self, b: &[Complex64]) -> Vec<Complex64> {
        let k = self.len();
        let mut x = vec![Complex64::new(0.0, 0.0); k];
        for i in (0..k).rev() {
            let mut acc = b[i];
            for j in i + 1..k {
                acc -= self.r[i][j] * x[j];
            }
            x[i] = acc / self.r[i][i];
        }
        x
    }
}

fn coherence(a: &SparsePulse, b: &SparsePulse, n: usize) -> f64 {
    let da = a.to_dense(n);
    let c = b.dot(&da);
    c.norm() / (a.energy() * b.energy()).sqrt()
}

fn basis_error(err: BasisError, cols: &[SparsePulse], n: usize) -> EstimatorError {
    match err {
        BasisError::Empty(j) => EstimatorError::EmptyColumn(j),
        BasisError::Dependent(j) => {
            let first = (0..j)
                .max_by(|&x, &y| {
                    coherence(&cols[x], &cols[j], n)
                        .partial_cmp(&coherence(&cols[y], &cols[j], n))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(0);
            EstimatorError::RankDeficient { first, second: j }
        }
    }
}

/// ML amplitudes and noise variance for fixed delays.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeFit {
    pub amplitudes: Vec<Complex64>,
    /// `‖r − S α̂‖² / N`.
    pub noise_variance: f64,
}

/// Least-squares amplitudes `α̂ = argmin ‖r − S(τ) α‖²` and
/// `σ̂² = ‖r − S(τ) α̂‖² / N`.
pub fn ml_amplitudes(r: &[Complex64], delays: &[f64], pulse: &PulseModel) -> Result<AmplitudeFit, EstimatorError> {
    let n = r.len();
    let cols: Vec<SparsePulse> = delays.iter().map(|&t| pulse.sparse(t)).collect();
    let refs: Vec<&SparsePulse> = cols.iter().collect();
    let basis = Basis::build(&refs, n).map_err(|e| basis_error(e, &cols, n))?;
    let amplitudes = basis.solve_r(&basis.coeffs(r));
    let resid = basis.residual(r);
    Ok(AmplitudeFit {
        amplitudes,
        noise_variance: energy(&resid) / n as f64,
    })
}

/// `SNR_k = |α̂_k|² ‖s(τ̂_k)‖² / σ̂²`, ignoring overlap between components.
pub fn component_snr(
    amplitude: Complex64,
    delay: f64,
    noise_variance: f64,
    pulse: &PulseModel,
) -> Result<f64, EstimatorError> {
    if !(noise_variance > 0.0) {
        return Err(EstimatorError::ZeroNoise);
    }
    Ok(amplitude.norm_sqr() * pulse.sparse(delay).energy() / noise_variance)
}

/// A range measurement `z = c τ̂` with the SNR of the component it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceMeasurement {
    pub distance: f64,
    pub snr: f64,
}

pub fn to_distance_measurements(estimates: &[MpcEstimate]) -> Vec<DistanceMeasurement> {
    estimates
        .iter()
        .map(|e| DistanceMeasurement {
            distance: SPEED_OF_LIGHT * e.delay,
            snr: e.snr,
        })
        .collect()
}

/// Per-call search state shared by all objective evaluations.
struct Problem<'a> {
    r: &'a [Complex64],
    pulse: &'a PulseModel,
    cfg: &'a EstimatorConfig,
    n: usize,
    /// Noise variance floor inside the objective.
    search_floor: f64,
    /// Noise variance floor for SNR estimates.
    snr_floor: f64,
    tau_max: f64,
    step: f64,
}

/// Penalised log-likelihood of a model and the quantities it came from.
#[derive(Debug, Clone)]
struct Eval {
    objective: f64,
}

/// The model with all columns except one held fixed.
struct Frame {
    basis: Basis,
    /// `Qᴴ r`.
    qr: Vec<Complex64>,
    /// `r` projected away from the fixed columns.
    resid: Vec<Complex64>,
    resid_energy: f64,
}

impl<'a> Problem<'a> {
    fn log_likelihood(&self, residual_energy: f64) -> f64 {
        let var = (residual_energy / self.n as f64).max(self.search_floor);
        -(self.n as f64) * ((std::f64::consts::PI * var).ln() + 1.0)
    }

    fn frame(&self, fixed: &[f64]) -> Option<Frame> {
        let cols: Vec<SparsePulse> = fixed.iter().map(|&t| self.pulse.sparse(t)).collect();
        let refs: Vec<&SparsePulse> = cols.iter().collect();
        let basis = if refs.is_empty() {
            Basis::empty()
        } else {
            Basis::build(&refs, self.n).ok()?
        };
        let qr = basis.coeffs(self.r);
        let resid = basis.residual(self.r);
        let resid_energy = energy(&resid);
        Some(Frame {
            basis,
            qr,
            resid,
            resid_energy,
        })
    }

    /// Evaluates the model `fixed ∪ {s}` in closed form from the frame.
    fn eval_with(&self, frame: &Frame, s: &SparsePulse) -> Option<Eval> {
        let e = s.energy();
        if e <= f64::MIN_POSITIVE {
            return None;
        }
        let a = frame.basis.coeffs_sparse(s);
        let den = e - a.iter().map(|c| c.norm_sqr()).sum::<f64>();
        if den <= RANK_TOLERANCE * e {
            return None;
        }
        let c = s.dot(&frame.resid);
        let alpha = c / den;
        let residual_energy = (frame.resid_energy - c.norm_sqr() / den).max(0.0);
        // fixed amplitudes followed by the free one; only needed for the penalty
        let amplitudes = if self.cfg.lambda > 0.0 {
            let rhs: Vec<Complex64> = frame.qr.iter().zip(&a).map(|(q, ai)| q - ai * alpha).collect();
            let mut amps = frame.basis.solve_r(&rhs);
            amps.push(alpha);
            amps
        } else {
            vec![alpha]
        };
        let l1: f64 = amplitudes.iter().map(|x| x.norm()).sum();
        Some(Eval {
            objective: self.log_likelihood(residual_energy) - self.cfg.lambda * l1,
        })
    }

    fn eval_at(&self, frame: &Frame, tau: f64) -> Option<Eval> {
        self.eval_with(frame, &self.pulse.sparse(tau))
    }

    /// Golden-section maximisation of the objective over `[lo, hi]`.
    fn golden(&self, frame: &Frame, lo: f64, hi: f64) -> Option<(f64, Eval)> {
        const INV_PHI: f64 = 0.618_033_988_749_894_8;
        let tol = self.cfg.refine_tolerance * self.pulse.sampling_time();
        let f = |t: f64| self.eval_at(frame, t).map_or(f64::NEG_INFINITY, |e| e.objective);
        let (mut a, mut b) = (lo, hi);
        let mut x1 = b - INV_PHI * (b - a);
        let mut x2 = a + INV_PHI * (b - a);
        let (mut f1, mut f2) = (f(x1), f(x2));
        while b - a > tol {
            if f1 >= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - INV_PHI * (b - a);
                f1 = f(x1);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + INV_PHI * (b - a);
                f2 = f(x2);
            }
        }
        let t = 0.5 * (a + b);
        self.eval_at(frame, t).map(|e| (t, e))
    }

    fn bracket(&self, tau: f64) -> (f64, f64) {
        ((tau - self.step).max(0.0), (tau + self.step).min(self.tau_max))
    }

    /// Best new delay on the oversampled grid, refined locally.
    fn seed_component(&self, delays: &[f64]) -> Option<f64> {
        let frame = self.frame(delays)?;
        let points = (self.tau_max / self.step).floor() as usize;
        let mut best: Option<(f64, f64)> = None;
        for g in 0..=points {
            let tau = g as f64 * self.step;
            if let Some(e) = self.eval_at(&frame, tau) {
                if best.is_none_or(|(_, o)| e.objective > o) {
                    best = Some((tau, e.objective));
                }
            }
        }
        let (tau_g, obj_g) = best?;
        match self.local_max(&frame, tau_g) {
            Some((t, o)) if o > obj_g => Some(t),
            _ => Some(tau_g),
        }
    }

    /// Golden-section search in a one-step bracket around `tau`, re-centred
    /// while the maximum sits on the bracket edge.
    fn local_max(&self, frame: &Frame, tau: f64) -> Option<(f64, f64)> {
        let edge = 2.0 * self.cfg.refine_tolerance * self.pulse.sampling_time();
        let mut best: Option<(f64, f64)> = None;
        let mut centre = tau;
        for _ in 0..MAX_WALK {
            let (lo, hi) = self.bracket(centre);
            let Some((t, e)) = self.golden(frame, lo, hi) else { break };
            if best.is_some_and(|(_, o)| e.objective <= o) {
                break;
            }
            best = Some((t, e.objective));
            let at_edge = (t - lo < edge && lo > 0.0) || (hi - t < edge && hi < self.tau_max);
            if !at_edge {
                break;
            }
            centre = t;
        }
        best
    }

    /// One cyclic pass over all delays; a delay only moves if the objective
    /// improves. Returns whether any delay moved by more than the tolerance.
    fn refine_pass(&self, delays: &mut [f64]) -> bool {
        let tol = self.cfg.refine_tolerance * self.pulse.sampling_time();
        let mut moved = false;
        for k in 0..delays.len() {
            let others: Vec<f64> = delays
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != k)
                .map(|(_, &t)| t)
                .collect();
            let Some(frame) = self.frame(&others) else { continue };
            let current = self.eval_at(&frame, delays[k]).map_or(f64::NEG_INFINITY, |e| e.objective);
            if let Some((t, o)) = self.local_max(&frame, delays[k]) {
                if o > current {
                    moved |= (t - delays[k]).abs() > tol;
                    delays[k] = t;
                }
            }
        }
        moved
    }

    /// Amplitudes, residual energy and per-component SNRs of a delay set.
    fn fit(&self, delays: &[f64]) -> Option<(Vec<Complex64>, f64, Vec<f64>)> {
        let fit = ml_amplitudes(self.r, delays, self.pulse).ok()?;
        let var = fit.noise_variance.max(self.snr_floor);
        let snrs = delays
            .iter()
            .zip(&fit.amplitudes)
            .map(|(&t, &a)| component_snr(a, t, var, self.pulse).unwrap_or(0.0))
            .collect();
        Some((fit.amplitudes, fit.noise_variance * self.n as f64, snrs))
    }
}

/// Diagnostics recorded while estimating.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimationTrace {
    /// Residual energy after each accepted component.
    pub residual_energy: Vec<f64>,
}

/// Extracts multipath components from a snapshot, sorted by ascending delay.
pub fn estimate_mpcs(
    snapshot: &Snapshot,
    cfg: &EstimatorConfig,
) -> Result<Vec<MpcEstimate>, EstimatorError> {
    estimate_mpcs_traced(&snapshot.samples, &snapshot.pulse, cfg).map(|(e, _)| e)
}

pub fn estimate_mpcs_traced(
    r: &[Complex64],
    pulse: &PulseModel,
    cfg: &EstimatorConfig,
) -> Result<(Vec<MpcEstimate>, EstimationTrace), EstimatorError> {
    cfg.validate()?;
    let mut trace = EstimationTrace::default();
    let n = r.len();
    let total = energy(r);
    if n == 0 || total == 0.0 {
        return Ok((Vec::new(), trace));
    }
    let ts = pulse.sampling_time();
    let tau_max = ((n - 1) as f64 * ts - pulse.peak_offset()).max(0.0);
    let prob = Problem {
        r,
        pulse,
        cfg,
        n,
        search_floor: SEARCH_FLOOR * total / n as f64,
        snr_floor: DYNAMIC_RANGE * total / n as f64,
        tau_max,
        step: ts / cfg.grid_oversampling as f64,
    };

    let mut delays: Vec<f64> = Vec::new();
    while delays.len() < cfg.max_components {
        let Some(tau) = prob.seed_component(&delays) else { break };
        let mut candidate = delays.clone();
        candidate.push(tau);
        for _ in 0..cfg.refine_iters {
            if !prob.refine_pass(&mut candidate) {
                break;
            }
        }
        let Some((_, resid, snrs)) = prob.fit(&candidate) else { break };
        if snrs[snrs.len() - 1] < cfg.gamma {
            break;
        }
        delays = candidate;
        trace.residual_energy.push(resid);
        if resid <= DYNAMIC_RANGE * total {
            break;
        }
    }

    // earlier components can drop below the threshold once later ones absorb
    // part of their energy or the noise estimate changes
    loop {
        let Some((amps, _, snrs)) = prob.fit(&delays) else {
            delays.clear();
            break;
        };
        let weakest = snrs
            .iter()
            .enumerate()
            .filter(|(_, &s)| s < cfg.gamma)
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i);
        match weakest {
            Some(i) => {
                delays.remove(i);
            }
            None => {
                let mut out: Vec<MpcEstimate> = delays
                    .iter()
                    .zip(amps)
                    .zip(snrs)
                    .map(|((&delay, amplitude), snr)| MpcEstimate { delay, amplitude, snr })
                    .collect();
                out.sort_by(|a, b| a.delay.total_cmp(&b.delay));
                return Ok((out, trace));
            }
        }
    }
    Ok((Vec::new(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synthesize, NoiseConfig, ScatterConfig, TrueMpc};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    const TS: f64 = 1e-9;

    fn pulse(n: usize) -> PulseModel {
        PulseModel::new(0.6, 2e-9, TS, n).unwrap()
    }

    fn snap(mpcs: &[TrueMpc], variance: f64, n: usize, seed: u64) -> Snapshot {
        synthesize(mpcs, &ScatterConfig::none(), &NoiseConfig { variance }, &pulse(n), seed).unwrap()
    }

    /// Normal equations `(SᴴS) α = Sᴴ r` solved with a dense LU.
    fn normal_equations(r: &[Complex64], delays: &[f64], p: &PulseModel) -> Vec<Complex64> {
        let n = r.len();
        let s = DMatrix::from_fn(n, delays.len(), |i, k| p.sample(delays[k])[i]);
        let rv = DVector::from_column_slice(r);
        let sh = s.adjoint();
        let sol = (&sh * &s).lu().solve(&(&sh * rv)).unwrap();
        sol.iter().copied().collect()
    }

    #[test]
    fn exact_fit() {
        let p = pulse(128);
        let t0 = 20.4e-9;
        let r: Vec<Complex64> = p.sample(t0).iter().map(|x| x * 2.0).collect();
        let fit = ml_amplitudes(&r, &[t0], &p).unwrap();
        assert_abs_diff_eq!(fit.amplitudes[0].re, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.amplitudes[0].im, 0.0, epsilon = 1e-12);
        assert!(fit.noise_variance < 1e-25);
    }

    #[test]
    fn orthogonal_columns_decouple() {
        let p = pulse(128);
        // supports do not overlap
        let delays = [10.3e-9, 50.8e-9];
        let s = snap(
            &[
                TrueMpc::new(delays[0], Complex64::new(1.0, 0.5)),
                TrueMpc::new(delays[1], Complex64::new(-0.3, 2.0)),
            ],
            0.1,
            128,
            4,
        );
        let fit = ml_amplitudes(&s.samples, &delays, &p).unwrap();
        let oracle = normal_equations(&s.samples, &delays, &p);
        for k in 0..2 {
            let sp = p.sparse(delays[k]);
            let individual = sp.dot(&s.samples) / sp.energy();
            assert!((fit.amplitudes[k] - individual).norm() < 1e-10);
            assert!((fit.amplitudes[k] - oracle[k]).norm() < 1e-10);
        }
    }

    #[test]
    fn overlapping_columns_match_normal_equations() {
        let p = pulse(128);
        let delays = [10.3e-9, 13.1e-9, 16.0e-9];
        let s = snap(
            &[
                TrueMpc::new(delays[0], Complex64::new(1.0, 0.5)),
                TrueMpc::new(delays[1], Complex64::new(-0.3, 2.0)),
                TrueMpc::new(delays[2], Complex64::new(0.7, 0.0)),
            ],
            0.01,
            128,
            8,
        );
        let fit = ml_amplitudes(&s.samples, &delays, &p).unwrap();
        let oracle = normal_equations(&s.samples, &delays, &p);
        for k in 0..3 {
            assert!((fit.amplitudes[k] - oracle[k]).norm() < 1e-8);
        }
    }

    #[test]
    fn noise_only_variance() {
        let p = pulse(512);
        let mut ratio = 0.0;
        let runs = 50;
        for seed in 0..runs {
            let s = snap(&[], 0.5, 512, seed);
            let fit = ml_amplitudes(&s.samples, &[100e-9], &p).unwrap();
            let sample_var = s.energy() / 512.0;
            assert!((fit.noise_variance - sample_var).abs() < 0.1 * sample_var);
            ratio += fit.noise_variance / 0.5;
        }
        assert!((ratio / runs as f64 - 1.0).abs() < 0.05);
    }

    #[test]
    fn coincident_delays_are_rank_deficient() {
        let p = pulse(128);
        let r = p.sample(10e-9);
        let err = ml_amplitudes(&r, &[30e-9, 10e-9, 10e-9], &p).unwrap_err();
        assert_eq!(err, EstimatorError::RankDeficient { first: 1, second: 2 });
        let err = ml_amplitudes(&r, &[1e-6], &p).unwrap_err();
        assert_eq!(err, EstimatorError::EmptyColumn(0));
    }

    #[test]
    fn snr_definition() {
        let p = pulse(128);
        let one = Complex64::new(1.0, 0.0);
        assert_abs_diff_eq!(component_snr(one, 20e-9, 0.01, &p).unwrap(), 100.0, epsilon = 1e-3);
        assert_eq!(component_snr(Complex64::new(0.0, 0.0), 20e-9, 0.01, &p).unwrap(), 0.0);
        assert_eq!(component_snr(one, 20e-9, 0.0, &p), Err(EstimatorError::ZeroNoise));
        // half of the pulse outside the window
        let tau = (p.len() as f64 - 0.5) * TS - p.peak_offset();
        let e = p.sparse(tau).energy();
        assert_abs_diff_eq!(e, 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(component_snr(one, tau, 0.01, &p).unwrap(), e / 0.01, epsilon = 1e-9);
    }

    #[test]
    fn distances() {
        let e = |delay| MpcEstimate {
            delay,
            amplitude: Complex64::new(1.0, 0.0),
            snr: 10.0,
        };
        let d = to_distance_measurements(&[e(10.0069e-9), e(0.0)]);
        assert_abs_diff_eq!(d[0].distance, 3.0, epsilon = 1e-4);
        assert_eq!(d[1].distance, 0.0);
        assert!(to_distance_measurements(&[]).is_empty());
    }

    #[test]
    fn zero_input_yields_nothing() {
        let s = snap(&[], 0.0, 128, 0);
        assert!(estimate_mpcs(&s, &EstimatorConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn invalid_config() {
        let s = snap(&[], 0.0, 128, 0);
        let cfg = EstimatorConfig {
            max_components: 0,
            ..EstimatorConfig::default()
        };
        assert!(matches!(estimate_mpcs(&s, &cfg), Err(EstimatorError::InvalidConfig(_))));
    }

    #[test]
    fn noiseless_recovery_of_separated_components() {
        let truth = [(12.37e-9, 1.0), (20.91e-9, 0.6), (33.05e-9, 0.8)];
        let mpcs: Vec<TrueMpc> = truth
            .iter()
            .map(|&(t, a)| TrueMpc::new(t, Complex64::from_polar(a, t * 1e9)))
            .collect();
        let s = snap(&mpcs, 0.0, 128, 0);
        let est = estimate_mpcs(&s, &EstimatorConfig::default()).unwrap();
        assert_eq!(est.len(), 3);
        for (e, (t, _)) in est.iter().zip(truth) {
            assert!((e.delay - t).abs() <= 1e-3 * TS, "{} vs {}", e.delay, t);
        }
    }

    #[test]
    fn single_component_at_30_db() {
        let cfg = EstimatorConfig::default();
        let mut hits = 0;
        let runs = 200u64;
        for seed in 0..runs {
            let tau = 40e-9 + (seed as f64 * 0.377).fract() * 5e-9;
            let amp = Complex64::from_polar(1000f64.sqrt(), seed as f64);
            let s = snap(&[TrueMpc::new(tau, amp)], 1.0, 128, seed);
            let est = estimate_mpcs(&s, &cfg).unwrap();
            if est.len() == 1 && (est[0].delay - tau).abs() < TS / 10.0 {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * runs as f64, "{hits}/{runs}");
    }

    #[test]
    fn two_components_five_symbols_apart() {
        let cfg = EstimatorConfig::default();
        let runs = 100u64;
        let mut ok = 0;
        for seed in 0..runs {
            let t1 = 30.3e-9;
            let t2 = t1 + 5.0 * 2e-9;
            let a = 1000f64.sqrt();
            let s = snap(
                &[
                    TrueMpc::new(t1, Complex64::from_polar(a, 0.3 * seed as f64)),
                    TrueMpc::new(t2, Complex64::from_polar(a, 1.1 * seed as f64)),
                ],
                1.0,
                128,
                1000 + seed,
            );
            let est = estimate_mpcs(&s, &cfg).unwrap();
            if est.len() == 2 && (est[0].delay - t1).abs() < TS / 10.0 && (est[1].delay - t2).abs() < TS / 10.0 {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.95 * runs as f64, "{ok}/{runs}");
    }

    #[test]
    fn residual_energy_never_increases() {
        let mpcs: Vec<TrueMpc> = (0..6)
            .map(|k| TrueMpc::new((15.0 + 7.3 * k as f64) * 1e-9, Complex64::from_polar(10.0 / (k + 1) as f64, k as f64)))
            .collect();
        for seed in 0..20 {
            let s = snap(&mpcs, 0.5, 128, seed);
            let (est, trace) = estimate_mpcs_traced(&s.samples, &s.pulse, &EstimatorConfig::default()).unwrap();
            assert!(!est.is_empty());
            for w in trace.residual_energy.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn reported_components_pass_threshold() {
        let cfg = EstimatorConfig::default();
        let sc = ScatterConfig {
            mean_count: 8.0,
            delay_spread: 8e-9,
            power_0: 30.0,
            onset: 20e-9,
        };
        for seed in 0..20 {
            let s = synthesize(
                &[TrueMpc::new(20e-9, Complex64::new(20.0, 0.0))],
                &sc,
                &NoiseConfig { variance: 1.0 },
                &pulse(128),
                seed,
            )
            .unwrap();
            let est = estimate_mpcs(&s, &cfg).unwrap();
            assert!(est.iter().all(|e| e.snr >= cfg.gamma && e.delay >= 0.0));
            assert!(est.windows(2).all(|w| w[0].delay <= w[1].delay));
        }
    }

    #[test]
    fn penalty_keeps_estimates_sane() {
        let cfg = EstimatorConfig {
            lambda: 0.5,
            ..EstimatorConfig::default()
        };
        let s = snap(&[TrueMpc::new(25.5e-9, Complex64::new(30.0, 0.0))], 1.0, 128, 9);
        let est = estimate_mpcs(&s, &cfg).unwrap();
        assert_eq!(est.len(), 1);
        assert!((est[0].delay - 25.5e-9).abs() < TS / 10.0);
    }

    #[test]
    fn deterministic() {
        let s = snap(&[TrueMpc::new(25.5e-9, Complex64::new(30.0, 0.0))], 1.0, 128, 9);
        let cfg = EstimatorConfig::default();
        assert_eq!(estimate_mpcs(&s, &cfg).unwrap(), estimate_mpcs(&s, &cfg).unwrap());
    }
}
