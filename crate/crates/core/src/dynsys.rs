//! Constant-velocity target simulator.
//!
//! State is `[position, velocity]ᵀ`, driven by a random acceleration through
//! `G = [dt²/2, dt]ᵀ` and observed directly (`H = I`) with additive noise.
//! Besides the textbook Gaussian case there are three scenarios that break
//! the optimality assumptions of the Kalman filter: one-sided measurement
//! noise, observations that lag the state by a random fraction of a step,
//! and a nonlinear state map.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynsysError {
    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("noise standard deviation must be non-negative and finite, got {0}")]
    BadSigma(f64),
    #[error("delay range [{0}, {1}] must satisfy 0 <= lo <= hi <= 1")]
    BadDelayRange(f64, f64),
    #[error("unknown scenario `{0}` (expected gaussian, half-gaussian, delayed or nonlinear)")]
    UnknownScenario(String),
}

/// Linear-Gaussian model of the tracked object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub f: Matrix,
    pub g: Matrix,
    pub h: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    /// Control matrix; zero, since no control input is applied.
    pub b: Matrix,
    pub dt: f64,
    pub sigma_a: f64,
    pub sigma_z: f64,
}

pub fn make_system(dt: f64, sigma_a: f64, sigma_z: f64) -> Result<SystemModel, DynsysError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynsysError::BadTimeStep(dt));
    }
    for s in [sigma_a, sigma_z] {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(DynsysError::BadSigma(s));
        }
    }
    let f = Matrix::from_rows(&[[1.0, dt], [0.0, 1.0]]);
    let g = Matrix::column(&[0.5 * dt * dt, dt]);
    let q = g
        .matmul(&g.transpose())
        .and_then(|gg| gg.scale(sigma_a * sigma_a))
        .expect("2x1 outer product");
    let r = Matrix::identity(2).scale(sigma_z * sigma_z).expect("finite");
    Ok(SystemModel {
        f,
        g,
        h: Matrix::identity(2),
        q,
        r,
        b: Matrix::zeros(2, 1),
        dt,
        sigma_a,
        sigma_z,
    })
}

impl SystemModel {
    /// Mean of one component of half-normal measurement noise.
    pub fn half_normal_mean(&self) -> f64 {
        self.sigma_z * (2.0 / PI).sqrt()
    }
}

/// Which assumptions of the linear-Gaussian model are violated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scenario {
    Gaussian,
    /// Measurement noise entries are `|N(0, σ_z²)|`.
    HalfGaussian,
    /// Each observation sees the state a random fraction `d·dt` of a step
    /// in the past, `d ~ U(lo, hi)`, linearly interpolated between steps.
    Delayed { lo: f64, hi: f64 },
    /// `x_{k+1} = F·g(x_k) + w_k` with [`default_nonlinear_g`].
    Nonlinear,
}

impl Scenario {
    pub fn delayed(lo: f64, hi: f64) -> Result<Self, DynsysError> {
        let s = Scenario::Delayed { lo, hi };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<(), DynsysError> {
        match *self {
            Scenario::Delayed { lo, hi } if !(0.0 <= lo && lo <= hi && hi <= 1.0) => {
                Err(DynsysError::BadDelayRange(lo, hi))
            }
            _ => Ok(()),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Scenario::Gaussian => "gaussian",
            Scenario::HalfGaussian => "half-gaussian",
            Scenario::Delayed { .. } => "delayed",
            Scenario::Nonlinear => "nonlinear",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Delayed { lo, hi } => write!(f, "delayed[{lo},{hi}]"),
            other => f.write_str(other.tag()),
        }
    }
}

/// Parses a scenario tag; `delayed` gets the default `[0, 1]` range.
impl FromStr for Scenario {
    type Err = DynsysError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(Scenario::Gaussian),
            "half-gaussian" => Ok(Scenario::HalfGaussian),
            "delayed" => Ok(Scenario::Delayed { lo: 0.0, hi: 1.0 }),
            "nonlinear" => Ok(Scenario::Nonlinear),
            other => Err(DynsysError::UnknownScenario(other.to_string())),
        }
    }
}

/// Ground truth and measurements, one 2×1 column per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Matrix>,
    pub observations: Vec<Matrix>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// `g(x) = [0.05·x₀³ − 2·x₀, 0.1·sin(x₁)]ᵀ`
pub fn default_nonlinear_g(x: &Matrix) -> Matrix {
    let (p, v) = (x.get(0, 0), x.get(1, 0));
    Matrix::column(&[0.05 * p * p * p - 2.0 * p, 0.1 * v.sin()])
}

const PROCESS_STREAM: u64 = 0;
const MEASUREMENT_STREAM: u64 = 1;
const DELAY_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Simulates `steps` steps from `x₀ = 0`.
///
/// Process noise, measurement noise and delays come from separate RNG
/// streams, so a delayed run with range `[0, 0]` reproduces the Gaussian
/// observations exactly.
pub fn simulate(sys: &SystemModel, scenario: Scenario, steps: usize, seed: u64) -> Trajectory {
    let mut process = stream(seed, PROCESS_STREAM);
    let mut measure = stream(seed, MEASUREMENT_STREAM);
    let mut delays = stream(seed, DELAY_STREAM);

    let mut x = Matrix::zeros(2, 1);
    let mut states = Vec::with_capacity(steps);
    let mut observations = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a: f64 = process.sample::<f64, _>(StandardNormal) * sys.sigma_a;
        let w = sys.g.scale(a).expect("finite noise");
        let driven = match scenario {
            Scenario::Nonlinear => default_nonlinear_g(&x),
            _ => x.clone(),
        };
        let next = sys.f.matmul(&driven).and_then(|fx| fx.add(&w)).expect("2x2 by 2x1");

        let seen = match scenario {
            Scenario::Delayed { lo, hi } => {
                let d = if hi > lo { delays.random_range(lo..=hi) } else { lo };
                // (1 - d)·x_k + d·x_{k-1}
                next.scale(1.0 - d).and_then(|a| a.add(&x.scale(d)?)).expect("finite")
            }
            _ => next.clone(),
        };
        let mut v = [0.0; 2];
        for e in &mut v {
            let n: f64 = measure.sample(StandardNormal);
            *e = match scenario {
                Scenario::HalfGaussian => (n * sys.sigma_z).abs(),
                _ => n * sys.sigma_z,
            };
        }
        let z = sys.h.matmul(&seen).and_then(|hx| hx.add(&Matrix::column(&v))).expect("2x1");
        states.push(next.clone());
        observations.push(z);
        x = next;
    }
    Trajectory { states, observations, seed }
}

/// Mixes a base seed, a split tag and an index into an independent seed.
pub fn derive_seed(base: u64, split: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(base) ^ split.wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}
