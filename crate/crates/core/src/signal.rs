//! Baseband snapshot synthesis.
//!
//! A snapshot is the sampled sum of delayed, scaled copies of a unit-energy
//! pulse (one per specular path), a random set of point-source scatterers
//! with an exponentially decaying power-delay profile, and white complex
//! Gaussian noise.

use std::f64::consts::PI;
use std::io::{self, BufRead, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use thiserror::Error;

use crate::geometry::{expected_distance, in_fov, specular_visible, AgentPose, Anchor, AnchorId, FloorPlan, FovConfig};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("invalid pulse: {0}")]
    InvalidPulse(&'static str),
    #[error("negative delay {0} s")]
    NegativeDelay(f64),
    #[error("invalid scatter config: {0}")]
    InvalidScatter(&'static str),
    #[error("noise variance must be non-negative, got {0}")]
    InvalidNoise(f64),
    #[error("anchor `{0}` coincides with the agent")]
    CoincidentAnchor(AnchorId),
    #[error("no anchors given")]
    NoAnchors,
    #[error("malformed snapshot file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// `io::Error` wrapper so `SignalError` stays `Clone + PartialEq`.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct IoError(pub String);

impl From<io::Error> for SignalError {
    fn from(e: io::Error) -> Self {
        SignalError::Io(IoError(e.to_string()))
    }
}

/// Truncated root-raised-cosine pulse delayed by half its span, so that the
/// pulse starts at `t = 0` and is fully causal.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseModel {
    roll_off: f64,
    symbol_duration: f64,
    sampling_time: f64,
    len: usize,
    half_span: f64,
    scale: f64,
}

impl PulseModel {
    pub const DEFAULT_ROLL_OFF: f64 = 0.6;
    pub const DEFAULT_HALF_SPAN: f64 = 6.0;

    pub fn new(roll_off: f64, symbol_duration: f64, sampling_time: f64, len: usize) -> Result<Self, SignalError> {
        Self::with_span(roll_off, symbol_duration, sampling_time, len, Self::DEFAULT_HALF_SPAN)
    }

    /// `half_span` is the truncation half-width in symbol durations.
    pub fn with_span(
        roll_off: f64,
        symbol_duration: f64,
        sampling_time: f64,
        len: usize,
        half_span: f64,
    ) -> Result<Self, SignalError> {
        if !(0.0..=1.0).contains(&roll_off) {
            return Err(SignalError::InvalidPulse("roll-off must lie in [0, 1]"));
        }
        if !(symbol_duration > 0.0) || !(sampling_time > 0.0) {
            return Err(SignalError::InvalidPulse("durations must be positive"));
        }
        if len == 0 {
            return Err(SignalError::InvalidPulse("window length must be positive"));
        }
        if !(half_span > 0.0) {
            return Err(SignalError::InvalidPulse("span must be positive"));
        }
        if 2.0 * half_span * symbol_duration > (len - 1) as f64 * sampling_time {
            return Err(SignalError::InvalidPulse("pulse support does not fit the window"));
        }
        let mut p = Self {
            roll_off,
            symbol_duration,
            sampling_time,
            len,
            half_span,
            scale: 1.0,
        };
        let energy: f64 = (0..len).map(|i| p.eval(i as f64 * sampling_time).powi(2)).sum();
        p.scale = energy.sqrt().recip();
        Ok(p)
    }

    pub fn roll_off(&self) -> f64 {
        self.roll_off
    }

    pub fn symbol_duration(&self) -> f64 {
        self.symbol_duration
    }

    pub fn sampling_time(&self) -> f64 {
        self.sampling_time
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Offset of the pulse peak from its start.
    pub fn peak_offset(&self) -> f64 {
        self.half_span * self.symbol_duration
    }

    /// Length of the non-zero support.
    pub fn support(&self) -> f64 {
        2.0 * self.peak_offset()
    }

    /// Window duration `N·T_s`.
    pub fn window(&self) -> f64 {
        self.len as f64 * self.sampling_time
    }

    /// Continuous-time pulse `s(t)`.
    pub fn eval(&self, t: f64) -> f64 {
        let t0 = self.peak_offset();
        if t < 0.0 || t > 2.0 * t0 {
            return 0.0;
        }
        self.scale * rrc(t - t0, self.symbol_duration, self.roll_off)
    }

    /// Non-zero samples of `s(i·T_s − τ)` inside the window.
    pub fn sparse(&self, tau: f64) -> SparsePulse {
        let ts = self.sampling_time;
        let first = (tau / ts).ceil().max(0.0);
        let last = ((tau + self.support()) / ts).floor().min(self.len as f64 - 1.0);
        if last < first {
            return SparsePulse {
                start: 0,
                values: Vec::new(),
            };
        }
        let (first, last) = (first as usize, last as usize);
        let values = (first..=last).map(|i| self.eval(i as f64 * ts - tau)).collect();
        SparsePulse { start: first, values }
    }

    /// Dense sampled pulse vector of length `N`.
    pub fn sample(&self, tau: f64) -> Vec<Complex64> {
        self.sparse(tau).to_dense(self.len)
    }
}

/// Root-raised-cosine impulse response with unit peak-normalized scale.
fn rrc(t: f64, period: f64, a: f64) -> f64 {
    let x = t / period;
    if x.abs() < 1e-9 {
        return 1.0 - a + 4.0 * a / PI;
    }
    if a > 0.0 && (1.0 - (4.0 * a * x).powi(2)).abs() < 1e-9 {
        let q = PI / (4.0 * a);
        return a / 2f64.sqrt() * ((1.0 + 2.0 / PI) * q.sin() + (1.0 - 2.0 / PI) * q.cos());
    }
    let num = (PI * x * (1.0 - a)).sin() + 4.0 * a * x * (PI * x * (1.0 + a)).cos();
    let den = PI * x * (1.0 - (4.0 * a * x).powi(2));
    num / den
}

/// Real pulse samples occupying indices `start..start + values.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePulse {
    pub start: usize,
    pub values: Vec<f64>,
}

impl SparsePulse {
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// `⟨s, r⟩ = sᴴ r`.
    pub fn dot(&self, r: &[Complex64]) -> Complex64 {
        self.values
            .iter()
            .zip(&r[self.start..])
            .fold(Complex64::new(0.0, 0.0), |acc, (s, x)| acc + x * *s)
    }

    pub fn add_scaled_to(&self, out: &mut [Complex64], alpha: Complex64) {
        for (o, s) in out[self.start..].iter_mut().zip(&self.values) {
            *o += alpha * *s;
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<Complex64> {
        let mut v = vec![Complex64::new(0.0, 0.0); len];
        self.add_scaled_to(&mut v, Complex64::new(1.0, 0.0));
        v
    }
}

/// Delay-domain point-source scattering.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterConfig {
    /// Poisson mean of the number of scattered components.
    pub mean_count: f64,
    /// Decay constant of the power-delay profile (seconds).
    pub delay_spread: f64,
    /// Mean power at zero excess delay.
    pub power_0: f64,
    /// Earliest scatter delay (seconds).
    pub onset: f64,
}

impl ScatterConfig {
    pub fn none() -> Self {
        Self {
            mean_count: 0.0,
            delay_spread: 1e-9,
            power_0: 0.0,
            onset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.mean_count >= 0.0) {
            return Err(SignalError::InvalidScatter("mean_count must be >= 0"));
        }
        if !(self.delay_spread > 0.0) {
            return Err(SignalError::InvalidScatter("delay_spread must be > 0"));
        }
        if !(self.power_0 >= 0.0) {
            return Err(SignalError::InvalidScatter("power_0 must be >= 0"));
        }
        if !(self.onset >= 0.0) {
            return Err(SignalError::InvalidScatter("onset must be >= 0"));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.mean_count > 0.0 && self.power_0 > 0.0
    }
}

/// AWGN with per-sample complex variance `σ_w² = N₀/T_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub variance: f64,
}

impl NoiseConfig {
    pub fn from_n0(n0: f64, sampling_time: f64) -> Self {
        Self {
            variance: n0 / sampling_time,
        }
    }
}

/// A deterministic path: delay, complex amplitude and the anchor it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueMpc {
    pub delay: f64,
    pub amplitude: Complex64,
    pub anchor: Option<AnchorId>,
}

impl TrueMpc {
    pub fn new(delay: f64, amplitude: Complex64) -> Self {
        Self {
            delay,
            amplitude,
            anchor: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterComponent {
    pub delay: f64,
    pub coefficient: Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub mpcs: Vec<TrueMpc>,
    pub scatter: Vec<ScatterComponent>,
    pub noise_variance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub samples: Vec<Complex64>,
    pub pulse: PulseModel,
    pub truth: Option<Truth>,
}

impl Snapshot {
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|c| c.norm_sqr()).sum()
    }
}

fn complex_gaussian<R: Rng>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

/// `r = Σ α_k s(τ_k) + Σ β_ℓ s(τ_ℓ) + w`. Identical seeds give identical
/// samples.
pub fn synthesize(
    mpcs: &[TrueMpc],
    scatter: &ScatterConfig,
    noise: &NoiseConfig,
    pulse: &PulseModel,
    seed: u64,
) -> Result<Snapshot, SignalError> {
    if let Some(m) = mpcs.iter().find(|m| !(m.delay >= 0.0)) {
        return Err(SignalError::NegativeDelay(m.delay));
    }
    scatter.validate()?;
    if !(noise.variance >= 0.0) {
        return Err(SignalError::InvalidNoise(noise.variance));
    }

    let n = pulse.len();
    let mut samples = vec![Complex64::new(0.0, 0.0); n];
    for m in mpcs {
        pulse.sparse(m.delay).add_scaled_to(&mut samples, m.amplitude);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scattered = Vec::new();
    if scatter.is_active() {
        let count = Poisson::new(scatter.mean_count)
            .map_err(|_| SignalError::InvalidScatter("mean_count"))?
            .sample(&mut rng) as usize;
        let excess = Exp::new(1.0 / scatter.delay_spread).map_err(|_| SignalError::InvalidScatter("delay_spread"))?;
        for _ in 0..count {
            let dt: f64 = excess.sample(&mut rng);
            let power = scatter.power_0 * (-dt / scatter.delay_spread).exp();
            let c = ScatterComponent {
                delay: scatter.onset + dt,
                coefficient: complex_gaussian(&mut rng, power),
            };
            pulse.sparse(c.delay).add_scaled_to(&mut samples, c.coefficient);
            scattered.push(c);
        }
    }

    if noise.variance > 0.0 {
        for x in samples.iter_mut() {
            *x += complex_gaussian(&mut rng, noise.variance);
        }
    }

    Ok(Snapshot {
        samples,
        pulse: pulse.clone(),
        truth: Some(Truth {
            mpcs: mpcs.to_vec(),
            scatter: scattered,
            noise_variance: noise.variance,
            seed,
        }),
    })
}

/// Free-space-like amplitude law `|α| = sqrt(P₁)/d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplitudeModel {
    /// `|α|²` at 1 m.
    pub power_1m: f64,
}

impl AmplitudeModel {
    pub fn from_snr_db(snr_db: f64, noise_variance: f64) -> Self {
        Self {
            power_1m: 10f64.powf(snr_db / 10.0) * noise_variance,
        }
    }

    pub fn magnitude(&self, distance: f64) -> f64 {
        self.power_1m.sqrt() / distance
    }
}

/// Everything needed to turn scene geometry into a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    pub amplitude: AmplitudeModel,
    /// `onset` is overridden by the LOS delay of the physical anchor.
    pub scatter: ScatterConfig,
    pub noise: NoiseConfig,
    /// Physical body shadowing applied to the generated paths.
    pub body: FovConfig,
}

/// Builds one snapshot for the anchors of a single PA seen from `pose`.
///
/// Every anchor that is specularly visible and inside the body FOV contributes
/// a path with delay `d/c` and uniformly random phase. Scattering starts at the
/// line-of-sight delay of the physical anchor, blocked or not.
pub fn snapshot_from_scene(
    pose: &AgentPose,
    anchors: &[Anchor],
    plan: &FloorPlan,
    channel: &ChannelModel,
    pulse: &PulseModel,
    seed: u64,
) -> Result<Snapshot, SignalError> {
    if anchors.is_empty() {
        return Err(SignalError::NoAnchors);
    }
    let mut phase_rng = ChaCha8Rng::seed_from_u64(seed);
    phase_rng.set_stream(1);

    let mut mpcs = Vec::new();
    for a in anchors {
        let phase = phase_rng.random_range(0.0..2.0 * PI);
        let d = expected_distance(&pose.position, a);
        if d < 1e-9 {
            return Err(SignalError::CoincidentAnchor(a.id.clone()));
        }
        let visible = specular_visible(&pose.position, a, plan)
            && in_fov(pose, &a.position, &channel.body).map_err(|_| SignalError::CoincidentAnchor(a.id.clone()))?;
        if visible {
            mpcs.push(TrueMpc {
                delay: d / SPEED_OF_LIGHT,
                amplitude: Complex64::from_polar(channel.amplitude.magnitude(d), phase),
                anchor: Some(a.id.clone()),
            });
        }
    }

    let los = anchors
        .iter()
        .find(|a| a.is_physical())
        .map(|a| expected_distance(&pose.position, a))
        .unwrap_or_else(|| {
            anchors
                .iter()
                .map(|a| expected_distance(&pose.position, a))
                .fold(f64::INFINITY, f64::min)
        });
    let scatter = ScatterConfig {
        onset: los / SPEED_OF_LIGHT,
        ..channel.scatter.clone()
    };
    synthesize(&mpcs, &scatter, &channel.noise, pulse, seed)
}

const DUMP_MAGIC: &str = "mploc-snapshot";
const DUMP_VERSION: u32 = 1;

/// Header of a dumped snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpHeader {
    pub version: u32,
    pub sampling_time: f64,
    pub len: usize,
    pub seed: Option<u64>,
}

/// Writes samples as text: a versioned header followed by one `re im` line
/// per sample. Values round-trip exactly.
pub fn write_snapshot<W: Write>(snap: &Snapshot, mut w: W) -> Result<(), SignalError> {
    writeln!(w, "{DUMP_MAGIC} {DUMP_VERSION}")?;
    writeln!(w, "sampling_time_s {}", snap.pulse.sampling_time())?;
    writeln!(w, "samples {}", snap.samples.len())?;
    match snap.truth.as_ref() {
        Some(t) => writeln!(w, "seed {}", t.seed)?,
        None => writeln!(w, "seed -")?,
    }
    for c in &snap.samples {
        writeln!(w, "{} {}", c.re, c.im)?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(r: R) -> Result<(DumpHeader, Vec<Complex64>), SignalError> {
    let fmt = |m: &str| SignalError::Format(m.to_owned());
    let mut lines = r.lines();
    let mut next = |what: &str| -> Result<String, SignalError> {
        lines.next().ok_or_else(|| fmt(&format!("missing {what}")))?.map_err(SignalError::from)
    };

    let magic = next("header")?;
    let version = match magic.split_once(' ') {
        Some((DUMP_MAGIC, v)) => v.trim().parse::<u32>().map_err(|_| fmt("bad version"))?,
        _ => return Err(fmt("not a snapshot file")),
    };
    if version != DUMP_VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let field = |line: String, key: &str| -> Result<String, SignalError> {
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim().to_owned()),
            _ => Err(fmt(&format!("expected `{key}`"))),
        }
    };
    let sampling_time = field(next("sampling time")?, "sampling_time_s")?
        .parse()
        .map_err(|_| fmt("bad sampling time"))?;
    let len: usize = field(next("length")?, "samples")?
        .parse()
        .map_err(|_| fmt("bad length"))?;
    let seed = match field(next("seed")?, "seed")?.as_str() {
        "-" => None,
        s => Some(s.parse().map_err(|_| fmt("bad seed"))?),
    };
    let mut samples = Vec::with_capacity(len);
    for i in 0..len {
        let line = next("sample")?;
        let mut it = line.split_whitespace().map(str::parse::<f64>);
        match (it.next(), it.next()) {
            (Some(Ok(re)), Some(Ok(im))) => samples.push(Complex64::new(re, im)),
            _ => return Err(fmt(&format!("bad sample on row {i}"))),
        }
    }
    Ok((
        DumpHeader {
            version,
            sampling_time,
            len,
            seed,
        },
        samples,
    ))
}
