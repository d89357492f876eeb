//! Parametric three-phase stator current surrogate.
//!
//! Stands in for a finite-element twin of a one-pole-pair induction motor.
//! Every window is a balanced three-phase harmonic mixture (fundamental plus
//! 5th and 7th harmonics) at the supply frequency `pole_pairs * rpm / 60`,
//! with one of four overlays:
//!
//! | state | overlay |
//! |-------|---------|
//! | `N`   | none |
//! | `BRB` | twin sidebands at `f_e (1 ± 2s)` |
//! | `SWF` | phase A scaled down by the fault severity |
//! | `MRF` | weak amplitude modulation at the rotating frequency |
//!
//! Windows of the physical domain additionally pass through a
//! [`DomainShift`]: per-phase gains, phase jitter, a zero-sequence third
//! harmonic, a DC offset and additive Gaussian noise.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::seed;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Health states in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "UPPERCASE"))]
pub enum HealthState {
    N,
    Brb,
    Swf,
    Mrf,
}

impl HealthState {
    pub const ALL: [HealthState; 4] = [HealthState::N, HealthState::Brb, HealthState::Swf, HealthState::Mrf];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::Argument(format!("unknown label index {i}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            HealthState::N => "N",
            HealthState::Brb => "BRB",
            HealthState::Swf => "SWF",
            HealthState::Mrf => "MRF",
        }
    }
}

impl fmt::Display for HealthState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HealthState {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|h| h.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown health state {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Domain {
    Virtual,
    Physical,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Virtual => "virtual",
            Domain::Physical => "physical",
        }
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "virtual" => Ok(Domain::Virtual),
            "physical" => Ok(Domain::Physical),
            _ => Err(Error::Argument(format!("unknown domain {s:?}"))),
        }
    }
}

/// Operating speeds of the test motor, rpm.
pub const SPEEDS_RPM: [u32; 3] = [1200, 2400, 2700];

/// Sim-to-real gap applied to physical-domain windows.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct DomainShift {
    /// Additive noise standard deviation relative to each phase's RMS.
    pub noise_std: f64,
    pub amp_imbalance: [f64; 3],
    /// Standard deviation of a per-window, per-phase angle error (rad).
    pub phase_jitter_rad: f64,
    /// Relative amplitude of an added zero-sequence third harmonic.
    pub harmonic_distortion: f64,
    /// DC offset relative to the nominal amplitude.
    pub dc_offset: f64,
}

impl DomainShift {
    pub const ZERO: DomainShift = DomainShift {
        noise_std: 0.0,
        amp_imbalance: [1.0, 1.0, 1.0],
        phase_jitter_rad: 0.0,
        harmonic_distortion: 0.0,
        dc_offset: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.noise_std, self.phase_jitter_rad, self.harmonic_distortion, self.dc_offset];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Argument(format!("domain shift terms must be non-negative: {self:?}")));
        }
        if self.amp_imbalance.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::Argument("phase gains must be positive".into()));
        }
        Ok(())
    }
}

impl Default for DomainShift {
    /// Moderate gap used by the experiments.
    fn default() -> Self {
        Self {
            noise_std: 0.05,
            amp_imbalance: [1.05, 0.97, 1.0],
            phase_jitter_rad: 0.02,
            harmonic_distortion: 0.02,
            dc_offset: 0.01,
        }
    }
}

/// Waveform and fault-signature parameters of the surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct SurrogateConfig {
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub pole_pairs: u32,
    /// Nominal fundamental amplitude (A).
    pub amplitude: f64,
    pub fifth_harmonic: f64,
    pub seventh_harmonic: f64,
    /// Uniform relative spread of the per-window amplitude (load level).
    pub load_variation: f64,
    /// Uniform relative spread of the per-window harmonic amplitudes.
    pub harmonic_variation: f64,
    /// Harmonic phase wander around the fundamental-locked phase (rad, uniform half-width).
    pub harmonic_phase_wander: f64,
    pub swf_severity: f64,
    pub brb_slip: f64,
    pub brb_sideband: f64,
    pub mrf_modulation: f64,
    /// Uniform relative spread of the per-window fault severity.
    pub severity_spread: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 5120.0,
            duration_s: 0.2,
            pole_pairs: 1,
            amplitude: 1.0,
            fifth_harmonic: 0.12,
            seventh_harmonic: 0.07,
            load_variation: 0.1,
            harmonic_variation: 0.1,
            harmonic_phase_wander: 0.3,
            swf_severity: 0.1,
            brb_slip: 0.02,
            brb_sideband: 0.25,
            mrf_modulation: 0.25,
            severity_spread: 0.5,
        }
    }
}

impl SurrogateConfig {
    pub fn window_len(&self) -> usize {
        libm::round(self.sample_rate_hz * self.duration_s) as usize
    }

    pub fn supply_hz(&self, speed_rpm: u32) -> f64 {
        self.pole_pairs as f64 * speed_rpm as f64 / 60.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0 && self.duration_s > 0.0) || self.window_len() < 2 {
            return Err(Error::Argument("sample rate and duration must give at least two samples".into()));
        }
        if self.pole_pairs == 0 {
            return Err(Error::Argument("pole_pairs must be >= 1".into()));
        }
        let terms = [
            self.amplitude,
            self.fifth_harmonic,
            self.seventh_harmonic,
            self.load_variation,
            self.harmonic_variation,
            self.harmonic_phase_wander,
            self.swf_severity,
            self.brb_slip,
            self.brb_sideband,
            self.mrf_modulation,
            self.severity_spread,
        ];
        if terms.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Argument("surrogate parameters must be finite and non-negative".into()));
        }
        if self.swf_severity * (1.0 + self.severity_spread) >= 1.0 || self.load_variation >= 1.0 {
            return Err(Error::Argument("severity/load spread would flip the phase amplitude sign".into()));
        }
        Ok(())
    }
}

/// One labeled three-phase window.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSample {
    /// `[3, L]`, phase-major.
    pub phases: Tensor,
    pub label: HealthState,
    pub speed_rpm: u32,
    pub domain: Domain,
    pub sample_rate_hz: f64,
}

impl SignalSample {
    pub fn len(&self) -> usize {
        self.phases.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn phase(&self, c: usize) -> &[f64] {
        let l = self.len();
        &self.phases.data()[c * l..(c + 1) * l]
    }

    pub fn rms(&self, c: usize) -> f64 {
        rms(self.phase(c))
    }
}

/// Stacks windows into a `[B, 3, L]` model input.
pub fn stack_phases<'a>(samples: impl IntoIterator<Item = &'a SignalSample>) -> Result<Tensor> {
    let parts: Vec<Tensor> = samples.into_iter().map(|s| s.phases.clone()).collect();
    Tensor::stack(&parts)
}

pub fn rms(x: &[f64]) -> f64 {
    libm::sqrt(x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
}

fn check_speed(speed_rpm: u32) -> Result<()> {
    if SPEEDS_RPM.contains(&speed_rpm) {
        Ok(())
    } else {
        Err(Error::Argument(format!("unsupported speed {speed_rpm} rpm, expected one of {SPEEDS_RPM:?}")))
    }
}

fn spread<R: Rng>(rng: &mut R, width: f64) -> f64 {
    1.0 + width * rng.gen_range(-1.0..=1.0)
}

/// Generates `count` windows of one health state, speed and domain.
pub fn generate(
    cfg: &SurrogateConfig,
    label: HealthState,
    speed_rpm: u32,
    domain: Domain,
    shift: &DomainShift,
    count: usize,
    seed: u64,
) -> Result<Vec<SignalSample>> {
    if count < 1 {
        return Err(Error::Argument("count must be >= 1".into()));
    }
    check_speed(speed_rpm)?;
    cfg.validate()?;
    shift.validate()?;
    let mut rng = seed::rng(seed);
    (0..count).map(|_| window(cfg, label, speed_rpm, domain, shift, &mut rng)).collect()
}

fn window<R: Rng>(
    cfg: &SurrogateConfig,
    label: HealthState,
    speed_rpm: u32,
    domain: Domain,
    shift: &DomainShift,
    rng: &mut R,
) -> Result<SignalSample> {
    let len = cfg.window_len();
    let fs = cfg.sample_rate_hz;
    let w_e = 2.0 * PI * cfg.supply_hz(speed_rpm);
    let w_r = 2.0 * PI * speed_rpm as f64 / 60.0;
    let amp = cfg.amplitude * spread(rng, cfg.load_variation);
    let theta: f64 = rng.gen_range(0.0..2.0 * PI);
    let h5 = cfg.fifth_harmonic * spread(rng, cfg.harmonic_variation);
    let h7 = cfg.seventh_harmonic * spread(rng, cfg.harmonic_variation);
    let d5 = cfg.harmonic_phase_wander * rng.gen_range(-1.0..=1.0);
    let d7 = cfg.harmonic_phase_wander * rng.gen_range(-1.0..=1.0);
    let severity = spread(rng, cfg.severity_spread);
    // random draws for overlays are taken unconditionally so that every label
    // consumes the same number of values per window
    let sb_lo: f64 = rng.gen_range(0.0..2.0 * PI);
    let sb_hi: f64 = rng.gen_range(0.0..2.0 * PI);
    let psi: f64 = rng.gen_range(0.0..2.0 * PI);

    let physical = domain == Domain::Physical;
    let mut jitter = [0.0; 3];
    if physical {
        for j in &mut jitter {
            let z: f64 = rng.sample(StandardNormal);
            *j = shift.phase_jitter_rad * z;
        }
    }

    let mut data = alloc::vec![0.0; 3 * len];
    for c in 0..3 {
        let phi = -(c as f64) * 2.0 * PI / 3.0 + jitter[c];
        let out = &mut data[c * len..(c + 1) * len];
        for (t, v) in out.iter_mut().enumerate() {
            let time = t as f64 / fs;
            let ang = w_e * time + theta + phi;
            let mut i = libm::cos(ang) + h5 * libm::cos(5.0 * ang + d5) + h7 * libm::cos(7.0 * ang + d7);
            match label {
                HealthState::N | HealthState::Swf => {}
                HealthState::Brb => {
                    let s = cfg.brb_slip;
                    let b = cfg.brb_sideband * severity;
                    i += b * libm::cos((1.0 - 2.0 * s) * w_e * time + sb_lo + theta + phi);
                    i += b * libm::cos((1.0 + 2.0 * s) * w_e * time + sb_hi + theta + phi);
                }
                HealthState::Mrf => {
                    i *= 1.0 + cfg.mrf_modulation * severity * libm::cos(w_r * time + psi);
                }
            }
            if physical && shift.harmonic_distortion > 0.0 {
                i += shift.harmonic_distortion * libm::cos(3.0 * (w_e * time + theta));
            }
            *v = amp * i;
        }
        if label == HealthState::Swf && c == 0 {
            let k = 1.0 - cfg.swf_severity * severity;
            out.iter_mut().for_each(|v| *v *= k);
        }
    }

    if physical {
        for c in 0..3 {
            let out = &mut data[c * len..(c + 1) * len];
            let gain = shift.amp_imbalance[c];
            let offset = shift.dc_offset * cfg.amplitude;
            let sigma = shift.noise_std * rms(out) * gain;
            for v in out.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = gain * *v + offset + sigma * z;
            }
        }
    }

    Ok(SignalSample {
        phases: Tensor::new(&[3, len], data)?,
        label,
        speed_rpm,
        domain,
        sample_rate_hz: fs,
    })
}

/// What [`make_dataset`] builds for one operating speed.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub surrogate: SurrogateConfig,
    pub shift: DomainShift,
    pub speed_rpm: u32,
    /// Labeled virtual windows per class (`K_s / N`).
    pub source_per_class: usize,
    /// Physical windows per class from which support and query sets are drawn.
    pub target_per_class: usize,
    /// Largest support size the target pool must serve.
    pub max_shot: usize,
    pub queries_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            surrogate: SurrogateConfig::default(),
            shift: DomainShift::default(),
            speed_rpm: 2700,
            source_per_class: 200,
            target_per_class: 40,
            max_shot: 10,
            queries_per_class: 15,
            seed: 2024,
        }
    }
}

/// Source (virtual) and target (physical) windows for one speed, grouped by class
/// in label order.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetArchive {
    pub speed_rpm: u32,
    pub sample_rate_hz: f64,
    pub source: Vec<SignalSample>,
    pub target: Vec<SignalSample>,
}

impl DatasetArchive {
    pub fn source_of(&self, label: HealthState) -> impl Iterator<Item = &SignalSample> {
        self.source.iter().filter(move |s| s.label == label)
    }

    pub fn target_of(&self, label: HealthState) -> impl Iterator<Item = &SignalSample> {
        self.target.iter().filter(move |s| s.label == label)
    }
}

pub fn make_dataset(cfg: &DatasetConfig) -> Result<DatasetArchive> {
    if cfg.source_per_class < 1 {
        return Err(Error::Config("source pool must hold at least one window per class".into()));
    }
    if cfg.target_per_class < cfg.max_shot + cfg.queries_per_class {
        return Err(Error::Config(format!(
            "target pool of {} per class cannot serve {}-shot tasks with {} queries",
            cfg.target_per_class, cfg.max_shot, cfg.queries_per_class
        )));
    }
    let mut source = Vec::with_capacity(4 * cfg.source_per_class);
    let mut target = Vec::with_capacity(4 * cfg.target_per_class);
    for label in HealthState::ALL {
        let base = seed::derive(cfg.seed, &[seed::stream::DATA, cfg.speed_rpm as u64, label.index() as u64]);
        source.extend(generate(
            &cfg.surrogate,
            label,
            cfg.speed_rpm,
            Domain::Virtual,
            &cfg.shift,
            cfg.source_per_class,
            seed::derive(base, &[0]),
        )?);
        target.extend(generate(
            &cfg.surrogate,
            label,
            cfg.speed_rpm,
            Domain::Physical,
            &cfg.shift,
            cfg.target_per_class,
            seed::derive(base, &[1]),
        )?);
    }
    Ok(DatasetArchive { speed_rpm: cfg.speed_rpm, sample_rate_hz: cfg.surrogate.sample_rate_hz, source, target })
}
