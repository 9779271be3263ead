//! Robust Levenberg-Marquardt over pose residual blocks.

use super::TrackingError;
use crate::geometry::Pose;
use nalgebra::{Matrix3, Matrix3x6, Matrix6, SymmetricEigen, Vector3, Vector6};

/// Robust loss applied to one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    /// Huber on the whitened norm `sqrt(Σ info_i r_i²)`.
    Huber(f64),
    /// Huber on each raw component with its own threshold.
    ComponentHuber(Vector3<f64>),
}

/// Inlier test applied between rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    /// Whitened squared norm must not exceed the bound.
    Chi2(f64),
    /// Every raw component must stay within its bound.
    Componentwise(Vector3<f64>),
}

/// Up to three scalar residuals sharing a kernel. Unused rows are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBlock {
    pub residual: Vector3<f64>,
    pub jacobian: Matrix3x6<f64>,
    /// Diagonal information (inverse variance) per component.
    pub information: Vector3<f64>,
    pub dim: usize,
    pub kernel: Kernel,
    pub gate: Gate,
}

fn huber_rho(e2: f64, delta: f64) -> f64 {
    if e2 <= delta * delta {
        e2
    } else {
        2.0 * delta * e2.sqrt() - delta * delta
    }
}

fn huber_weight(e: f64, delta: f64) -> f64 {
    if e <= delta {
        1.0
    } else {
        delta / e
    }
}

impl ResidualBlock {
    pub fn chi2(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.information[i] * self.residual[i] * self.residual[i])
            .sum()
    }

    /// Robustified cost.
    pub fn cost(&self) -> f64 {
        match self.kernel {
            Kernel::Huber(delta) => huber_rho(self.chi2(), delta),
            Kernel::ComponentHuber(delta) => (0..self.dim)
                .map(|i| self.information[i] * huber_rho(self.residual[i] * self.residual[i], delta[i]))
                .sum(),
        }
    }

    /// Effective per-component information after the IRLS reweighting.
    fn irls_information(&self) -> Vector3<f64> {
        match self.kernel {
            Kernel::Huber(delta) => self.information * huber_weight(self.chi2().sqrt(), delta),
            Kernel::ComponentHuber(delta) => {
                Vector3::from_fn(|i, _| self.information[i] * huber_weight(self.residual[i].abs(), delta[i]))
            }
        }
    }

    pub fn passes_gate(&self) -> bool {
        match self.gate {
            Gate::Chi2(bound) => self.chi2() <= bound,
            Gate::Componentwise(bound) => (0..self.dim).all(|i| self.residual[i].abs() <= bound[i]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.residual.iter().all(|v| v.is_finite()) && self.jacobian.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub initial_lambda: f64,
    /// Damping multiplier on a rejected step (and divisor on an accepted one).
    pub lambda_factor: f64,
    pub max_iterations: usize,
    /// Solve/re-gate rounds.
    pub rounds: usize,
}

impl Default for LmParams {
    fn default() -> Self {
        Self {
            initial_lambda: 1e-4,
            lambda_factor: 10.0,
            max_iterations: 10,
            rounds: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameters {
    /// Rotation and translation.
    Full,
    /// Translation only; the rotation is carried through untouched.
    TranslationOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub pose: Pose,
    /// Per block: evaluable and inside its gate at the final pose.
    pub inliers: Vec<bool>,
    /// Robust cost of the inlier blocks at the final pose.
    pub cost: f64,
    pub iterations: usize,
}

const MAX_RETRIES: usize = 12;
const MIN_EIGEN_RATIO: f64 = 1e-12;

/// Sum of robust costs over active blocks; `None` when an active block can
/// no longer be evaluated.
fn total_cost(blocks: &[Option<ResidualBlock>], active: &[bool]) -> Option<f64> {
    let mut cost = 0.0;
    for (b, &a) in blocks.iter().zip(active) {
        if a {
            cost += b.as_ref()?.cost();
        }
    }
    Some(cost)
}

fn normal_equations(blocks: &[Option<ResidualBlock>], active: &[bool]) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for (b, _) in blocks.iter().zip(active).filter(|(_, &a)| a) {
        let b = b.as_ref().expect("active blocks are evaluable");
        let w = b.irls_information();
        for i in 0..b.dim {
            let row = b.jacobian.row(i);
            h += row.transpose() * row * w[i];
            g += row.transpose() * (w[i] * b.residual[i]);
        }
    }
    (h, g)
}

fn well_conditioned(h: &Matrix6<f64>, params: Parameters) -> bool {
    let eigenvalues = match params {
        Parameters::Full => SymmetricEigen::new(*h).eigenvalues.iter().copied().collect::<Vec<_>>(),
        Parameters::TranslationOnly => {
            let htt: Matrix3<f64> = h.fixed_view::<3, 3>(3, 3).into();
            SymmetricEigen::new(htt).eigenvalues.iter().copied().collect()
        }
    };
    let max = eigenvalues.iter().copied().fold(0.0, f64::max);
    let min = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    max > 0.0 && max.is_finite() && min / max > MIN_EIGEN_RATIO
}

/// Damped step for the selected parameters; `None` if the system is singular.
fn damped_step(
    h: &Matrix6<f64>,
    g: &Vector6<f64>,
    lambda: f64,
    params: Parameters,
) -> Option<(Vector3<f64>, Vector3<f64>)> {
    match params {
        Parameters::Full => {
            let mut a = *h;
            for i in 0..6 {
                a[(i, i)] += lambda * h[(i, i)];
            }
            let x = a.cholesky()?.solve(&(-g));
            Some((x.fixed_rows::<3>(0).into(), x.fixed_rows::<3>(3).into()))
        }
        Parameters::TranslationOnly => {
            let mut a: Matrix3<f64> = h.fixed_view::<3, 3>(3, 3).into();
            for i in 0..3 {
                a[(i, i)] += lambda * a[(i, i)];
            }
            let rhs: Vector3<f64> = -g.fixed_rows::<3>(3);
            Some((Vector3::zeros(), a.cholesky()?.solve(&rhs)))
        }
    }
}

fn apply(pose: &Pose, dw: &Vector3<f64>, dt: &Vector3<f64>, params: Parameters) -> Pose {
    match params {
        Parameters::Full => pose.retract(dw, dt),
        Parameters::TranslationOnly => pose.with_translation(pose.translation() + dt),
    }
}

/// One LM round over a fixed active set.
fn lm_round<F>(
    mut pose: Pose,
    active: &[bool],
    evaluate: &F,
    params: Parameters,
    lm: &LmParams,
) -> Result<(Pose, usize), TrackingError>
where
    F: Fn(&Pose) -> Vec<Option<ResidualBlock>>,
{
    let mut blocks = evaluate(&pose);
    let mut cost = total_cost(&blocks, active).ok_or(TrackingError::Diverged)?;
    let mut lambda = lm.initial_lambda;
    let mut accepted_any = false;
    let mut iterations = 0;
    for _ in 0..lm.max_iterations {
        iterations += 1;
        let (h, g) = normal_equations(&blocks, active);
        if !well_conditioned(&h, params) {
            return Err(TrackingError::Underconstrained);
        }
        let gradient = match params {
            Parameters::Full => g.norm(),
            Parameters::TranslationOnly => g.fixed_rows::<3>(3).norm(),
        };
        if !gradient.is_finite() {
            return Err(TrackingError::Diverged);
        }
        if cost == 0.0 || gradient < 1e-300 {
            break;
        }
        let mut accepted = false;
        let mut tiny_step = false;
        for _ in 0..MAX_RETRIES {
            let Some((dw, dt)) = damped_step(&h, &g, lambda, params) else {
                lambda *= lm.lambda_factor;
                continue;
            };
            let step = (dw.norm_squared() + dt.norm_squared()).sqrt();
            let candidate = apply(&pose, &dw, &dt, params);
            let candidate_blocks = evaluate(&candidate);
            match total_cost(&candidate_blocks, active) {
                Some(c) if c.is_finite() && c < cost => {
                    pose = candidate;
                    blocks = candidate_blocks;
                    tiny_step = step < 1e-12 || cost - c <= 1e-15 * cost;
                    cost = c;
                    lambda = (lambda / lm.lambda_factor).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => {
                    if step < 1e-14 {
                        tiny_step = true;
                        break;
                    }
                    lambda *= lm.lambda_factor;
                }
            }
        }
        if accepted {
            accepted_any = true;
        }
        if !accepted || tiny_step {
            if !accepted && !accepted_any && gradient > 1e-6 * (1.0 + cost) && !tiny_step {
                return Err(TrackingError::Diverged);
            }
            break;
        }
    }
    Ok((pose, iterations))
}

/// Robust LM with inlier re-gating between rounds.
///
/// `evaluate` returns one entry per residual block at a given pose; `None`
/// marks a block that cannot be evaluated there (for example a point behind
/// the camera), which excludes it from the round. Blocks are re-gated
/// against their inlier tests after every round.
pub fn solve<F>(initial: &Pose, evaluate: F, params: Parameters, lm: &LmParams) -> Result<SolveOutcome, TrackingError>
where
    F: Fn(&Pose) -> Vec<Option<ResidualBlock>>,
{
    let initial_blocks = evaluate(initial);
    let mut active: Vec<bool> = initial_blocks
        .iter()
        .map(|b| b.as_ref().is_some_and(|b| b.is_finite()))
        .collect();
    let mut pose = *initial;
    let mut iterations = 0;
    for round in 0..lm.rounds.max(1) {
        if !active.iter().any(|&a| a) {
            return Err(TrackingError::Underconstrained);
        }
        let (p, it) = lm_round(pose, &active, &evaluate, params, lm)?;
        pose = p;
        iterations += it;
        let blocks = evaluate(&pose);
        let gated: Vec<bool> = blocks
            .iter()
            .map(|b| b.as_ref().is_some_and(|b| b.is_finite() && b.passes_gate()))
            .collect();
        if round + 1 < lm.rounds {
            // A round that gates everything out keeps the previous set.
            if gated.iter().any(|&a| a) {
                active = gated;
            }
        } else {
            active = gated;
        }
    }
    let blocks = evaluate(&pose);
    let cost = total_cost(&blocks, &active).unwrap_or(0.0);
    Ok(SolveOutcome {
        pose,
        inliers: active,
        cost,
        iterations,
    })
}
