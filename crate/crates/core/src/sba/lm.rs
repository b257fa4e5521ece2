use std::io::Write;

use nalgebra::{DMatrix, DVector, Point3};
use serde::{Deserialize, Serialize};

use super::{linearize, objective, SbaProblem, SparseJacobian, POSE_DOF};
use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Floor on the damping diagonal for parameters with an all-zero Jacobian column.
pub const MIN_DIAGONAL: f64 = 1e-12;

const LAMBDA_RANGE: (f64, f64) = (1e-15, 1e15);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampingDecision {
    pub accept: bool,
    pub next_lambda: f64,
}

/// Chooses the damping factor and whether each proposed step is kept.
pub trait DampingPolicy: Send + Sync {
    fn initial_lambda(&self) -> f64;

    fn decide(&self, iteration: usize, current_error: f64, proposed_error: f64, lambda: f64) -> DampingDecision;
}

/// Fixed damping; every step is accepted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantLambda(pub f64);

impl DampingPolicy for ConstantLambda {
    fn initial_lambda(&self) -> f64 {
        self.0
    }

    fn decide(&self, _: usize, _: f64, _: f64, lambda: f64) -> DampingDecision {
        DampingDecision {
            accept: true,
            next_lambda: lambda,
        }
    }
}

/// Accepts steps that do not increase the error and divides λ by `down`;
/// rejects the rest and multiplies λ by `up`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicAdaptive {
    pub initial: f64,
    pub up: f64,
    pub down: f64,
}

impl Default for ClassicAdaptive {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            up: 10.0,
            down: 10.0,
        }
    }
}

impl DampingPolicy for ClassicAdaptive {
    fn initial_lambda(&self) -> f64 {
        self.initial
    }

    fn decide(&self, _: usize, current_error: f64, proposed_error: f64, lambda: f64) -> DampingDecision {
        let accept = proposed_error <= current_error;
        let next = if accept { lambda / self.down } else { lambda * self.up };
        DampingDecision {
            accept,
            next_lambda: next.clamp(LAMBDA_RANGE.0, LAMBDA_RANGE.1),
        }
    }
}

/// Serializable policy selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DampingPolicyKind {
    Constant { lambda: f64 },
    Adaptive { initial: f64, up: f64, down: f64 },
}

impl Default for DampingPolicyKind {
    fn default() -> Self {
        let c = ClassicAdaptive::default();
        DampingPolicyKind::Adaptive {
            initial: c.initial,
            up: c.up,
            down: c.down,
        }
    }
}

impl DampingPolicyKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DampingPolicyKind::Constant { lambda } => lambda > 0.0 && lambda.is_finite(),
            DampingPolicyKind::Adaptive { initial, up, down } => {
                initial > 0.0 && initial.is_finite() && up > 1.0 && down > 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid damping policy {self:?}")))
        }
    }

    pub fn build(&self) -> Box<dyn DampingPolicy> {
        match *self {
            DampingPolicyKind::Constant { lambda } => Box::new(ConstantLambda(lambda)),
            DampingPolicyKind::Adaptive { initial, up, down } => Box::new(ClassicAdaptive { initial, up, down }),
        }
    }
}

fn solve_damped<T: Real>(mut h: DMatrix<T>, g: DVector<T>, lambda: T) -> Result<DVector<T>> {
    let floor = T::lit(MIN_DIAGONAL);
    for k in 0..h.nrows() {
        let d = h[(k, k)].max(floor);
        h[(k, k)] += lambda * d;
    }
    let chol = h.cholesky().ok_or(Error::SingularSystem)?;
    let x = chol.solve(&g);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::SingularSystem)
    }
}

/// `(J^T J + λ D)^{-1} J^T e` with `D = diag(J^T J)` floored at [`MIN_DIAGONAL`].
pub fn damped_step<T: Real>(j: &DMatrix<T>, e: &DVector<T>, lambda: T) -> Result<DVector<T>> {
    let jt = j.transpose();
    solve_damped(&jt * j, jt * e, lambda)
}

fn normal_equations<T: Real>(lin: &SparseJacobian<T>) -> (DMatrix<T>, DVector<T>) {
    let pbase = POSE_DOF * (lin.cameras - 1);
    let n = pbase + 3 * lin.points;
    let mut h = DMatrix::<T>::zeros(n, n);
    let mut g = DVector::<T>::zeros(n);
    let point_col = |j: usize| pbase + 3 * j;
    for b in &lin.observations {
        let pc = point_col(b.point);
        let jp_t = b.d_point.transpose();
        {
            let mut hpp = h.fixed_view_mut::<3, 3>(pc, pc);
            hpp += jp_t * b.d_point;
        }
        {
            let mut gp = g.fixed_rows_mut::<3>(pc);
            gp += jp_t * b.residual;
        }
        if b.camera == 0 {
            continue;
        }
        let cc = POSE_DOF * (b.camera - 1);
        let jc_t = b.d_pose.transpose();
        {
            let mut hcc = h.fixed_view_mut::<6, 6>(cc, cc);
            hcc += jc_t * b.d_pose;
        }
        let hcp = jc_t * b.d_point;
        {
            let mut v = h.fixed_view_mut::<6, 3>(cc, pc);
            v += hcp;
        }
        {
            let mut v = h.fixed_view_mut::<3, 6>(pc, cc);
            v += hcp.transpose();
        }
        {
            let mut gc = g.fixed_rows_mut::<6>(cc);
            gc += jc_t * b.residual;
        }
    }
    for a in &lin.angle_rows {
        for (pa, ga) in a.points.iter().zip(&a.grads) {
            let ca = point_col(*pa);
            {
                let mut gv = g.fixed_rows_mut::<3>(ca);
                gv += ga * a.residual;
            }
            for (pb, gb) in a.points.iter().zip(&a.grads) {
                let cb = point_col(*pb);
                let mut v = h.fixed_view_mut::<3, 3>(ca, cb);
                v += ga * gb.transpose();
            }
        }
    }
    (h, g)
}

/// Damped step over the free parameters (pose 0 excluded); the scale-anchor
/// component, if any, is held at zero. The update is
/// applied as `X - ΔX`; see [`SbaProblem::apply_update`].
pub fn lm_step<T: Real>(problem: &SbaProblem<T>, angle_weight: T, lambda: T) -> Result<DVector<T>> {
    if !(lambda > T::zero()) {
        return Err(Error::InvalidProblem(format!("damping factor must be positive, got {lambda}")));
    }
    let (mut h, mut g) = normal_equations(&linearize(problem, angle_weight));
    if let Some(k) = problem.anchor_index() {
        h.row_mut(k).fill(T::zero());
        h.column_mut(k).fill(T::zero());
        h[(k, k)] = T::one();
        g[k] = T::zero();
    }
    solve_damped(h, g, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SbaReport<T: Real> {
    pub iterations: usize,
    pub angle_weight: T,
    /// Combined objective before the first step.
    pub initial_error: T,
    /// Combined objective after each iteration.
    pub errors: Vec<T>,
    /// Damping factor used by each iteration's step.
    pub lambdas: Vec<f64>,
    pub accepted: Vec<bool>,
    pub initial_rms: T,
    pub final_rms: T,
    pub cameras: Vec<CameraView<T>>,
    pub points: Vec<Point3<T>>,
}

impl<T: Real> SbaReport<T> {
    pub fn final_error(&self) -> T {
        *self.errors.last().unwrap_or(&self.initial_error)
    }

    /// Writes `iteration,total_error,lambda,accepted`, one row per iteration.
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,total_error,lambda,accepted")?;
        for (k, ((e, l), a)) in self.errors.iter().zip(&self.lambdas).zip(&self.accepted).enumerate() {
            writeln!(w, "{},{},{},{}", k + 1, e, l, u8::from(*a))?;
        }
        Ok(())
    }
}

/// Runs exactly `iterations` damped steps on `|E(X)|^2 + w * angle_penalty`.
/// Rejected steps leave the state unchanged.
pub fn run_sba<T: Real>(
    problem: &SbaProblem<T>,
    iterations: usize,
    policy: &dyn DampingPolicy,
    angle_weight: T,
) -> Result<SbaReport<T>> {
    if iterations == 0 {
        return Err(Error::InvalidProblem("iteration count must be at least 1".into()));
    }
    if !(angle_weight >= T::zero()) {
        return Err(Error::InvalidProblem("angle weight must be non-negative".into()));
    }
    problem.validate()?;
    let mut current = problem.clone();
    let initial_error = objective(&current, angle_weight);
    let mut error = initial_error;
    let mut lambda = policy.initial_lambda();
    let mut report = SbaReport {
        iterations,
        angle_weight,
        initial_error,
        errors: Vec::with_capacity(iterations),
        lambdas: Vec::with_capacity(iterations),
        accepted: Vec::with_capacity(iterations),
        initial_rms: problem.rms_reprojection_error(),
        final_rms: T::zero(),
        cameras: Vec::new(),
        points: Vec::new(),
    };
    for it in 0..iterations {
        let delta = lm_step(&current, angle_weight, T::lit(lambda))?;
        let candidate = current.apply_update(&delta);
        let proposed = objective(&candidate, angle_weight);
        let proposed_f = if proposed.is_finite() { proposed.as_f64() } else { f64::INFINITY };
        let decision = policy.decide(it, error.as_f64(), proposed_f, lambda);
        log::debug!("sba iteration {it}: lambda {lambda:e} error {error} -> {proposed} accept {}", decision.accept);
        report.lambdas.push(lambda);
        report.accepted.push(decision.accept);
        if decision.accept {
            current = candidate;
            error = proposed;
        }
        report.errors.push(error);
        lambda = decision.next_lambda;
        debug_assert!(lambda > 0.0);
    }
    report.final_rms = current.rms_reprojection_error();
    report.cameras = current.cameras;
    report.points = current.points;
    Ok(report)
}
