//! Reference filter, fitness, task definitions and the candidate harness.
//!
//! A candidate program takes over the first part of the predict/update
//! recursion. The harness feeds it the previous posterior, the model
//! matrices and the current observation, finishes the step with the
//! remaining reference statements, and carries the posterior estimate and
//! covariance over to the next step.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{
    parse, validate, CompiledProgram, EvalError, EvalErrorKind, GuardConfig, Program, Signature,
    Statement, DEFAULT_MAX_STATEMENTS,
};
use crate::dynsys::{derive_seed, simulate, Scenario, SystemModel, Trajectory};
use crate::matrix::{Matrix, MatrixError};

/// Fitness of any candidate whose evaluation failed. Orders after every
/// finite fitness.
pub const WORST_FITNESS: f64 = 1e18;

/// The reference recursion as a program, with `H = I`.
pub const KALMAN_SOURCE: &str = include_str!("../fixtures/kalman.mdsl");

/// Number of predict statements at the head of [`KALMAN_SOURCE`].
const PREDICT_STATEMENTS: usize = 2;

pub fn kalman_program() -> Program {
    parse(KALMAN_SOURCE).expect("bundled reference program parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub x_hat: Matrix,
    /// Error covariance for the reference filter. A candidate may carry
    /// any matrix here; the harness only passes it back in.
    pub p: Matrix,
}

impl FilterState {
    /// `x̂₀ = 0`, `P₀ = I`.
    pub fn initial() -> Self {
        FilterState { x_hat: Matrix::zeros(2, 1), p: Matrix::identity(2) }
    }
}

pub fn predict(s: &FilterState, sys: &SystemModel, u: &Matrix) -> Result<FilterState, MatrixError> {
    let x_hat = sys.f.matmul(&s.x_hat)?.add(&sys.b.matmul(u)?)?;
    let p = sys.f.matmul(&s.p)?.matmul(&sys.f.transpose())?.add(&sys.q)?;
    Ok(FilterState { x_hat, p })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub state: FilterState,
    pub y: Matrix,
    pub s: Matrix,
    pub k: Matrix,
}

/// Measurement update. The posterior covariance is symmetrised.
pub fn update(s: &FilterState, z: &Matrix, sys: &SystemModel) -> Result<Update, MatrixError> {
    let h = &sys.h;
    let y = z.sub(&h.matmul(&s.x_hat)?)?;
    let pht = s.p.matmul(&h.transpose())?;
    let innovation_cov = h.matmul(&pht)?.add(&sys.r)?;
    let k = pht.matmul(&innovation_cov.invert()?)?;
    let x_hat = s.x_hat.add(&k.matmul(&y)?)?;
    let n = s.p.rows();
    let p = Matrix::identity(n).sub(&k.matmul(h)?)?.matmul(&s.p)?.symmetrized()?;
    Ok(Update { state: FilterState { x_hat, p }, y, s: innovation_cov, k })
}

/// One step of a recursive estimator.
pub trait Stepper: Sync {
    fn step(&self, state: &FilterState, z: &Matrix) -> Result<FilterState, EvalError>;
}

fn matrix_failure(e: MatrixError) -> EvalError {
    EvalError::from_matrix(0, e)
}

/// Standard filter, optionally subtracting a known observation bias.
#[derive(Debug, Clone)]
pub struct KalmanStepper {
    sys: SystemModel,
    bias: Matrix,
    u: Matrix,
}

impl KalmanStepper {
    pub fn new(sys: &SystemModel) -> Self {
        Self::with_bias(sys, Matrix::zeros(sys.h.rows(), 1))
    }

    pub fn with_bias(sys: &SystemModel, bias: Matrix) -> Self {
        KalmanStepper { sys: sys.clone(), bias, u: Matrix::zeros(sys.b.cols(), 1) }
    }

    /// Corrects for the mean `σ_z·√(2/π)` of half-normal measurement noise.
    pub fn debiased(sys: &SystemModel) -> Self {
        let m = sys.half_normal_mean();
        Self::with_bias(sys, Matrix::column(&vec![m; sys.h.rows()]))
    }
}

impl Stepper for KalmanStepper {
    fn step(&self, state: &FilterState, z: &Matrix) -> Result<FilterState, EvalError> {
        let prior = predict(state, &self.sys, &self.u).map_err(matrix_failure)?;
        let z = z.sub(&self.bias).map_err(matrix_failure)?;
        Ok(update(&prior, &z, &self.sys).map_err(matrix_failure)?.state)
    }
}

/// Filter that knows the transition is `x ↦ F·g(x)`: the state is pushed
/// through `g` and the covariance through its Jacobian.
#[derive(Debug, Clone)]
pub struct NonlinearStepper {
    sys: SystemModel,
}

impl NonlinearStepper {
    pub fn new(sys: &SystemModel) -> Self {
        NonlinearStepper { sys: sys.clone() }
    }
}

impl Stepper for NonlinearStepper {
    fn step(&self, state: &FilterState, z: &Matrix) -> Result<FilterState, EvalError> {
        let sys = &self.sys;
        let (p0, v0) = (state.x_hat.get(0, 0), state.x_hat.get(1, 0));
        let jac = Matrix::diag(&[0.15 * p0 * p0 - 2.0, 0.1 * v0.cos()]);
        let fj = sys.f.matmul(&jac).map_err(matrix_failure)?;
        let prior = (|| {
            Ok::<_, MatrixError>(FilterState {
                x_hat: sys.f.matmul(&crate::dynsys::default_nonlinear_g(&state.x_hat))?,
                p: fj.matmul(&state.p)?.matmul(&fj.transpose())?.add(&sys.q)?,
            })
        })()
        .map_err(matrix_failure)?;
        Ok(update(&prior, z, sys).map_err(matrix_failure)?.state)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("step {step}: {error}")]
pub struct StepFailure {
    pub step: usize,
    pub error: EvalError,
}

/// Runs `stepper` over the observations from [`FilterState::initial`] and
/// returns the state after every step.
pub fn run_filter_states(traj: &Trajectory, stepper: &dyn Stepper) -> Result<Vec<FilterState>, StepFailure> {
    let mut state = FilterState::initial();
    let mut out = Vec::with_capacity(traj.len());
    for (step, z) in traj.observations.iter().enumerate() {
        state = stepper.step(&state, z).map_err(|error| StepFailure { step, error })?;
        out.push(state.clone());
    }
    Ok(out)
}

/// Posterior estimate at every step.
pub fn run_filter(traj: &Trajectory, stepper: &dyn Stepper) -> Result<Vec<Matrix>, StepFailure> {
    let mut state = FilterState::initial();
    let mut out = Vec::with_capacity(traj.len());
    for (step, z) in traj.observations.iter().enumerate() {
        state = stepper.step(&state, z).map_err(|error| StepFailure { step, error })?;
        out.push(state.x_hat.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitnessError {
    #[error("{estimates} estimates for {truth} states")]
    LengthMismatch { estimates: usize, truth: usize },
    #[error("empty trajectory")]
    Empty,
    #[error("estimate at step {0} has shape {1:?}, expected {2:?}")]
    Shape(usize, (usize, usize), (usize, usize)),
}

/// Squared estimation error at every step.
pub fn squared_errors(estimates: &[Matrix], truth: &[Matrix]) -> Result<Vec<f64>, FitnessError> {
    if estimates.len() != truth.len() {
        return Err(FitnessError::LengthMismatch { estimates: estimates.len(), truth: truth.len() });
    }
    estimates
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(k, (e, t))| {
            e.sub(t)
                .ok()
                .filter(|_| e.shape() == t.shape())
                .map(|d| d.squared_norm())
                .ok_or(FitnessError::Shape(k, e.shape(), t.shape()))
        })
        .collect()
}

/// `(1/T)·Σ‖x̂_k − x_k‖²`
pub fn fitness(estimates: &[Matrix], truth: &[Matrix]) -> Result<f64, FitnessError> {
    let errs = squared_errors(estimates, truth)?;
    if errs.is_empty() {
        return Err(FitnessError::Empty);
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

pub fn debiased_kalman_baseline(sys: &SystemModel, traj: &Trajectory) -> Vec<Matrix> {
    run_filter(traj, &KalmanStepper::debiased(sys)).expect("reference filter is total on simulated data")
}

/// Which prefix of the reference recursion a candidate has to supply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskTag {
    Predict,
    #[serde(rename = "update-12.5")]
    Update12,
    #[serde(rename = "update-25")]
    Update25,
    #[serde(rename = "update-50")]
    Update50,
    #[serde(rename = "update-75")]
    Update75,
    Full,
}

impl TaskTag {
    pub const ALL: [TaskTag; 6] =
        [TaskTag::Predict, TaskTag::Update12, TaskTag::Update25, TaskTag::Update50, TaskTag::Update75, TaskTag::Full];

    /// Fraction of the update step the candidate covers.
    pub fn fraction(self) -> f64 {
        match self {
            TaskTag::Predict => 0.0,
            TaskTag::Update12 => 0.125,
            TaskTag::Update25 => 0.25,
            TaskTag::Update50 => 0.5,
            TaskTag::Update75 => 0.75,
            TaskTag::Full => 1.0,
        }
    }

    /// Update statements of the reference program included in the prefix.
    pub fn update_statements(self) -> usize {
        match self {
            TaskTag::Predict => 0,
            TaskTag::Update12 => 1,
            TaskTag::Update25 => 2,
            TaskTag::Update50 => 3,
            TaskTag::Update75 => 5,
            TaskTag::Full => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskTag::Predict => "predict",
            TaskTag::Update12 => "update-12.5",
            TaskTag::Update25 => "update-25",
            TaskTag::Update50 => "update-50",
            TaskTag::Update75 => "update-75",
            TaskTag::Full => "full",
        }
    }

    fn reference_inputs(self) -> &'static [&'static str] {
        match self {
            TaskTag::Predict => &["x", "F", "P", "Q"],
            _ => &["x", "F", "P", "Q", "z", "R"],
        }
    }

    fn reference_outputs(self) -> &'static [&'static str] {
        match self {
            TaskTag::Predict => &["x_predict", "P"],
            TaskTag::Update12 => &["x_predict", "P", "y"],
            TaskTag::Update25 => &["x_predict", "P", "y", "S"],
            TaskTag::Update50 => &["x_predict", "P", "y", "S", "S_inv"],
            TaskTag::Update75 | TaskTag::Full => &["x_predict", "P", "y", "S", "K", "x_update"],
        }
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}` (expected predict, update-12.5, update-25, update-50, update-75 or full)"))
    }
}

/// Where a harness value comes from: the step inputs or a candidate output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Input(usize),
    Output(usize),
}

/// A discovery task: the signature a candidate must implement and the
/// reference statements the harness runs after it.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub tag: TaskTag,
    /// Signature required of candidates; generic names when anti-leak.
    pub signature: Signature,
    /// The same signature under the reference names.
    pub reference_signature: Signature,
    pub fixed_remainder: Vec<Statement>,
    prefix: Program,
    remainder: CompiledProgram,
    bindings: Vec<Source>,
}

const FULL_INPUTS: [&str; 6] = ["x", "F", "P", "Q", "z", "R"];

impl TaskSpec {
    pub fn new(tag: TaskTag, anti_leak: bool) -> Self {
        let reference = kalman_program();
        let split = PREDICT_STATEMENTS + tag.update_statements();
        let reference_signature =
            Signature::new(tag.reference_inputs().iter().copied(), tag.reference_outputs().iter().copied())
                .expect("reference names are distinct");
        let prefix = Program::new("kalman", reference_signature.clone(), reference.statements[..split].to_vec());
        let fixed_remainder = reference.statements[split..].to_vec();

        let mut remainder_inputs: Vec<&str> = FULL_INPUTS.to_vec();
        for out in tag.reference_outputs() {
            if !remainder_inputs.contains(out) {
                remainder_inputs.push(out);
            }
        }
        let bindings = remainder_inputs
            .iter()
            .map(|name| match tag.reference_outputs().iter().position(|o| o == name) {
                Some(j) => Source::Output(j),
                None => Source::Input(FULL_INPUTS.iter().position(|i| i == name).expect("known input")),
            })
            .collect();
        let remainder_sig =
            Signature::new(remainder_inputs, ["x_update", "P"]).expect("remainder names are distinct");
        let remainder = CompiledProgram::new(&Program::new("remainder", remainder_sig, fixed_remainder.clone()))
            .expect("reference remainder resolves");

        let signature = if anti_leak { reference_signature.to_generic() } else { reference_signature.clone() };
        TaskSpec { tag, signature, reference_signature, fixed_remainder, prefix, remainder, bindings }
    }

    pub fn anti_leak(&self) -> bool {
        self.signature.anti_leak
    }

    /// The reference prefix, written against [`TaskSpec::signature`].
    pub fn reference_candidate(&self) -> Program {
        if self.signature == self.reference_signature {
            return self.prefix.clone();
        }
        self.prefix.rebind(&self.signature, "f", true).expect("generic names never collide")
    }

    /// Number of step inputs passed to the candidate.
    pub fn input_arity(&self) -> usize {
        self.signature.inputs.len()
    }
}

/// A candidate wrapped by the harness of a task.
pub struct CandidateStepper<'a> {
    task: &'a TaskSpec,
    program: CompiledProgram,
    f: Matrix,
    q: Matrix,
    r: Matrix,
    guards: GuardConfig,
}

impl<'a> CandidateStepper<'a> {
    pub fn new(p: &Program, task: &'a TaskSpec, sys: &SystemModel, guards: GuardConfig) -> Result<Self, EvalError> {
        Ok(CandidateStepper {
            task,
            program: CompiledProgram::new(p)?,
            f: sys.f.clone(),
            q: sys.q.clone(),
            r: sys.r.clone(),
            guards,
        })
    }
}

impl Stepper for CandidateStepper<'_> {
    fn step(&self, state: &FilterState, z: &Matrix) -> Result<FilterState, EvalError> {
        let inputs = [state.x_hat.clone(), self.f.clone(), state.p.clone(), self.q.clone(), z.clone(), self.r.clone()];
        let outputs = self.program.run(&inputs[..self.task.input_arity()], &self.guards)?;
        let fed: Vec<Matrix> = self
            .task
            .bindings
            .iter()
            .map(|s| match *s {
                Source::Input(i) => inputs[i].clone(),
                Source::Output(j) => outputs[j].clone(),
            })
            .collect();
        let offset = self.program_statements();
        let mut finished = self.task.remainder.run(&fed, &self.guards).map_err(|mut e| {
            e.statement += offset;
            e
        })?;
        let p = finished.pop().expect("two outputs");
        let x_hat = finished.pop().expect("two outputs");
        if x_hat.shape() != (2, 1) {
            return Err(EvalError::at(
                offset,
                EvalErrorKind::ShapeMismatch(format!("estimate has shape {:?}, expected (2, 1)", x_hat.shape())),
            ));
        }
        Ok(FilterState { x_hat, p })
    }
}

impl CandidateStepper<'_> {
    fn program_statements(&self) -> usize {
        self.program.statement_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Validation => 2,
            Split::Test => 3,
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, validation or test)")),
        }
    }
}

/// Number of trajectories and steps per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSize {
    pub trajectories: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: SplitSize,
    pub validation: SplitSize,
    pub test: SplitSize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: SplitSize { trajectories: 1, steps: 200 },
            validation: SplitSize { trajectories: 50, steps: 500 },
            test: SplitSize { trajectories: 50, steps: 500 },
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalDatasets {
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

impl EvalDatasets {
    /// Simulates every split. Trajectory seeds are derived from `seed`,
    /// the split and the trajectory index.
    pub fn generate(sys: &SystemModel, scenario: Scenario, sizes: &SplitSizes, seed: u64) -> Self {
        let make = |split: Split, size: &SplitSize| -> Vec<Trajectory> {
            (0..size.trajectories)
                .map(|i| simulate(sys, scenario, size.steps, derive_seed(seed, split.id(), i as u64)))
                .collect()
        };
        EvalDatasets {
            train: make(Split::Train, &sizes.train),
            validation: make(Split::Validation, &sizes.validation),
            test: make(Split::Test, &sizes.test),
        }
    }

    pub fn split(&self, split: Split) -> &[Trajectory] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub trajectory: usize,
    pub step: Option<usize>,
    pub reason: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(step) => write!(f, "trajectory {}, step {}: {}", self.trajectory, step, self.reason),
            None => f.write_str(&self.reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub mean: f64,
    pub per_trajectory: Vec<f64>,
    /// Sample standard deviation over trajectories divided by `√n`.
    pub stderr: f64,
    pub failure: Option<Failure>,
}

impl FitnessReport {
    pub fn from_values(per_trajectory: Vec<f64>) -> Self {
        let n = per_trajectory.len() as f64;
        let mean = per_trajectory.iter().sum::<f64>() / n;
        let stderr = if per_trajectory.len() > 1 {
            let var = per_trajectory.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        FitnessReport { mean, per_trajectory, stderr, failure: None }
    }

    pub fn failed(failure: Failure) -> Self {
        FitnessReport { mean: WORST_FITNESS, per_trajectory: Vec::new(), stderr: 0.0, failure: Some(failure) }
    }

    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }
}

/// Scores candidates for one task under one system model.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub sys: SystemModel,
    pub task: TaskSpec,
    pub guards: GuardConfig,
    /// Evaluate trajectories on the rayon pool. Results are identical
    /// either way.
    pub parallel: bool,
}

impl Evaluator {
    pub fn new(sys: SystemModel, task: TaskSpec) -> Self {
        Evaluator { sys, task, guards: GuardConfig::default(), parallel: true }
    }

    fn prepare(&self, p: &Program) -> Result<CandidateStepper<'_>, Failure> {
        if let Err(vs) = validate(p, &self.task.signature, DEFAULT_MAX_STATEMENTS) {
            let reason = vs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
            return Err(Failure { trajectory: 0, step: None, reason });
        }
        CandidateStepper::new(p, &self.task, &self.sys, self.guards)
            .map_err(|e| Failure { trajectory: 0, step: None, reason: e.to_string() })
    }

    /// Mean per-trajectory MSE. Any failure yields [`WORST_FITNESS`].
    pub fn evaluate(&self, p: &Program, trajectories: &[Trajectory]) -> FitnessReport {
        let stepper = match self.prepare(p) {
            Ok(s) => s,
            Err(f) => return FitnessReport::failed(f),
        };
        let one = |(i, t): (usize, &Trajectory)| -> Result<f64, Failure> {
            let est = run_filter(t, &stepper).map_err(|e| Failure {
                trajectory: i,
                step: Some(e.step),
                reason: e.error.to_string(),
            })?;
            fitness(&est, &t.states).map_err(|e| Failure { trajectory: i, step: None, reason: e.to_string() })
        };
        let results: Vec<Result<f64, Failure>> = if self.parallel && trajectories.len() > 1 {
            trajectories.par_iter().enumerate().map(one).collect()
        } else {
            trajectories.iter().enumerate().map(one).collect()
        };
        match results.into_iter().collect::<Result<Vec<f64>, Failure>>() {
            Ok(values) if values.is_empty() => FitnessReport::failed(Failure {
                trajectory: 0,
                step: None,
                reason: "no trajectories".into(),
            }),
            Ok(values) => FitnessReport::from_values(values),
            Err(f) => FitnessReport::failed(f),
        }
    }

    /// Mean squared error at each step, averaged over trajectories.
    pub fn per_step_mse(&self, p: &Program, trajectories: &[Trajectory]) -> Result<Vec<f64>, Failure> {
        let stepper = self.prepare(p)?;
        per_step_mse(trajectories, &stepper)
    }
}

/// Mean squared error of `stepper` at each step, averaged over trajectories
/// of equal length.
pub fn per_step_mse(trajectories: &[Trajectory], stepper: &dyn Stepper) -> Result<Vec<f64>, Failure> {
    let mut sums: Vec<f64> = Vec::new();
    for (i, t) in trajectories.iter().enumerate() {
        let est = run_filter(t, stepper).map_err(|e| Failure {
            trajectory: i,
            step: Some(e.step),
            reason: e.error.to_string(),
        })?;
        let errs = squared_errors(&est, &t.states)
            .map_err(|e| Failure { trajectory: i, step: None, reason: e.to_string() })?;
        if sums.len() < errs.len() {
            sums.resize(errs.len(), 0.0);
        }
        for (s, e) in sums.iter_mut().zip(errs) {
            *s += e;
        }
    }
    let n = trajectories.len().max(1) as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

/// Scores a fixed (non-program) estimator over a split.
pub fn evaluate_stepper(stepper: &dyn Stepper, trajectories: &[Trajectory]) -> FitnessReport {
    let results: Result<Vec<f64>, Failure> = trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let est = run_filter(t, stepper).map_err(|e| Failure {
                trajectory: i,
                step: Some(e.step),
                reason: e.error.to_string(),
            })?;
            fitness(&est, &t.states).map_err(|e| Failure { trajectory: i, step: None, reason: e.to_string() })
        })
        .collect();
    match results {
        Ok(v) => FitnessReport::from_values(v),
        Err(f) => FitnessReport::failed(f),
    }
}

/// MSE of using the raw observation as the estimate.
pub fn observation_report(trajectories: &[Trajectory]) -> FitnessReport {
    FitnessReport::from_values(
        trajectories
            .iter()
            .map(|t| fitness(&t.observations, &t.states).expect("equal lengths"))
            .collect(),
    )
}

/// Scores `p` on one split of `data`.
pub fn evaluate_candidate(
    p: &Program,
    task: &TaskSpec,
    sys: &SystemModel,
    data: &EvalDatasets,
    split: Split,
) -> FitnessReport {
    Evaluator::new(sys.clone(), task.clone()).evaluate(p, data.split(split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::make_system;

    fn sys() -> SystemModel {
        make_system(1.0, 0.5, 1.0).unwrap()
    }

    #[test]
    fn predict_examples() {
        let mut s = make_system(1.0, 0.0, 1.0).unwrap();
        s.f = Matrix::identity(2);
        let st = FilterState { x_hat: Matrix::column(&[1.0, 2.0]), p: Matrix::identity(2) };
        let u = Matrix::zeros(1, 1);
        assert_eq!(predict(&st, &s, &u).unwrap(), st);

        let mut s = make_system(1.0, 0.0, 1.0).unwrap();
        s.q = Matrix::identity(2);
        let out = predict(&st, &s, &u).unwrap();
        assert_eq!(out.x_hat, Matrix::column(&[3.0, 2.0]));
        assert_eq!(out.p, Matrix::from_rows(&[[3.0, 1.0], [1.0, 2.0]]));

        s.f = Matrix::zeros(2, 2);
        assert_eq!(predict(&st, &s, &u).unwrap().p, Matrix::identity(2));
    }

    #[test]
    fn update_examples() {
        let s = make_system(1.0, 0.5, 1.0).unwrap();
        let st = FilterState { x_hat: Matrix::zeros(2, 1), p: Matrix::identity(2) };
        let u = update(&st, &Matrix::column(&[2.0, 4.0]), &s).unwrap();
        assert!(u.k.max_abs_diff(&Matrix::identity(2).scale(0.5).unwrap()) < 1e-15);
        assert!(u.state.x_hat.max_abs_diff(&Matrix::column(&[1.0, 2.0])) < 1e-15);
        assert!(u.state.p.max_abs_diff(&Matrix::identity(2).scale(0.5).unwrap()) < 1e-15);

        let mut loud = s.clone();
        loud.r = Matrix::identity(2).scale(1e12).unwrap();
        let st = FilterState { x_hat: Matrix::column(&[1.0, -1.0]), p: Matrix::identity(2) };
        let u = update(&st, &Matrix::column(&[50.0, 50.0]), &loud).unwrap();
        assert!(u.k.data().iter().all(|k| k.abs() < 1e-9));
        assert!(u.state.x_hat.max_abs_diff(&st.x_hat) < 1e-9);

        let u = update(&st, &st.x_hat, &s).unwrap();
        assert_eq!(u.y, Matrix::zeros(2, 1));
        assert_eq!(u.state.x_hat, st.x_hat);
    }

    #[test]
    fn fitness_examples() {
        let t = vec![Matrix::column(&[1.0, 2.0]), Matrix::column(&[-1.0, 0.5])];
        assert_eq!(fitness(&t, &t).unwrap(), 0.0);
        let shifted: Vec<_> = t.iter().map(|m| m.add(&Matrix::column(&[1.0, 0.0])).unwrap()).collect();
        assert_eq!(fitness(&shifted, &t).unwrap(), 1.0);
        let one = [Matrix::column(&[3.0, 4.0])];
        assert_eq!(fitness(&one, &[Matrix::zeros(2, 1)]).unwrap(), 25.0);
        assert!(matches!(fitness(&t, &one), Err(FitnessError::LengthMismatch { .. })));
    }

    #[test]
    fn zero_noise_estimates_converge() {
        let s = sys();
        let traj = Trajectory {
            states: (1..=60).map(|k| Matrix::column(&[k as f64, 1.0])).collect(),
            observations: (1..=60).map(|k| Matrix::column(&[k as f64, 1.0])).collect(),
            seed: 0,
        };
        let est = run_filter(&traj, &KalmanStepper::new(&s)).unwrap();
        assert!(est.last().unwrap().max_abs_diff(traj.states.last().unwrap()) < 1e-6);
    }

    #[test]
    fn riccati_reaches_steady_state() {
        let s = sys();
        let traj = simulate(&s, Scenario::Gaussian, 500, 11);
        let states = run_filter_states(&traj, &KalmanStepper::new(&s)).unwrap();
        for (k, st) in states.iter().enumerate() {
            assert!(st.p.is_symmetric_psd(1e-9), "step {k}");
            if k > 200 {
                assert!(st.p.max_abs_diff(&states[k - 1].p) < 1e-9);
            }
        }
    }

    #[test]
    fn reference_candidates_reproduce_the_filter() {
        let s = sys();
        let traj = simulate(&s, Scenario::Gaussian, 200, 5);
        let native = run_filter(&traj, &KalmanStepper::new(&s)).unwrap();
        for tag in TaskTag::ALL {
            for anti_leak in [false, true] {
                let task = TaskSpec::new(tag, anti_leak);
                let p = task.reference_candidate();
                assert_eq!(p.signature, task.signature);
                let stepper = CandidateStepper::new(&p, &task, &s, GuardConfig::default()).unwrap();
                let est = run_filter(&traj, &stepper).unwrap();
                let diff = est.iter().zip(&native).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
                assert!(diff < 1e-12, "{tag} anti_leak={anti_leak}: {diff}");
            }
        }
    }

    #[test]
    fn task_signatures() {
        let t = TaskSpec::new(TaskTag::Predict, false);
        assert_eq!(t.signature.inputs, ["x", "F", "P", "Q"]);
        assert_eq!(t.signature.outputs, ["x_predict", "P"]);
        assert_eq!(t.fixed_remainder.len(), 6);
        let t = TaskSpec::new(TaskTag::Full, true);
        assert_eq!(t.signature, Signature::generic(6, 6));
        assert!(t.fixed_remainder.is_empty());
        assert_eq!(TaskSpec::new(TaskTag::Update75, false).fixed_remainder.len(), 1);
        for tag in TaskTag::ALL {
            assert_eq!(tag.name().parse::<TaskTag>().unwrap(), tag);
        }
    }

    #[test]
    fn pass_through_predict_is_worse() {
        let s = sys();
        let data = EvalDatasets::generate(&s, Scenario::Gaussian, &SplitSizes::default(), 3);
        let task = TaskSpec::new(TaskTag::Predict, true);
        let pass = crate::dsl::parse("fn f(i_1, i_2, i_3, i_4) -> (o_1, o_2) { o_1 = i_1; o_2 = i_3 }").unwrap();
        let bad = evaluate_candidate(&pass, &task, &s, &data, Split::Train);
        let good = evaluate_candidate(&task.reference_candidate(), &task, &s, &data, Split::Train);
        assert!(bad.failure.is_none() && bad.mean.is_finite());
        assert!(bad.mean > good.mean);
    }

    #[test]
    fn singular_candidate_gets_sentinel() {
        let s = sys();
        let task = TaskSpec::new(TaskTag::Full, true);
        let p = crate::dsl::parse(
            "fn f(i_1, i_2, i_3, i_4, i_5, i_6) -> (o_1, o_2, o_3, o_4, o_5, o_6) {
                o_4 = i_3 - i_3; o_5 = inv(o_4);
                o_1 = i_1; o_2 = i_3; o_3 = i_5; o_6 = i_1 }",
        )
        .unwrap();
        let traj = vec![simulate(&s, Scenario::Gaussian, 20, 1)];
        let r = Evaluator::new(s, task).evaluate(&p, &traj);
        assert_eq!(r.mean, WORST_FITNESS);
        let f = r.failure.unwrap();
        assert_eq!(f.step, Some(0));
        assert!(f.reason.contains("singular"), "{}", f.reason);
    }

    #[test]
    fn debiasing_is_a_no_op_without_bias() {
        let mut s = sys();
        s.sigma_z = 0.0;
        let traj = simulate(&sys(), Scenario::Gaussian, 100, 2);
        let plain = run_filter(&traj, &KalmanStepper::new(&s)).unwrap();
        assert_eq!(debiased_kalman_baseline(&s, &traj), plain);
        assert!((sys().half_normal_mean() - 0.7979).abs() < 1e-4);
    }

    #[test]
    fn split_seeds_are_disjoint_and_order_free() {
        let s = sys();
        let sizes = SplitSizes {
            train: SplitSize { trajectories: 3, steps: 10 },
            validation: SplitSize { trajectories: 5, steps: 10 },
            test: SplitSize { trajectories: 5, steps: 10 },
        };
        let d = EvalDatasets::generate(&s, Scenario::Gaussian, &sizes, 1);
        let mut seeds: Vec<u64> = [&d.train, &d.validation, &d.test].iter().flat_map(|v| v.iter().map(|t| t.seed)).collect();
        let n = seeds.len();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), n);

        let task = TaskSpec::new(TaskTag::Full, false);
        let ev = Evaluator::new(s, task);
        let p = ev.task.reference_candidate();
        let a = ev.evaluate(&p, &d.validation);
        let mut rev = d.validation.clone();
        rev.reverse();
        let b = ev.evaluate(&p, &rev);
        assert!((a.mean - b.mean).abs() < 1e-12);
    }
}
