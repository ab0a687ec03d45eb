//! Point-to-point ICP with a robust kernel.
//!
//! One registration alternates nearest-neighbor correspondence search
//! with a robust Gauss-Newton alignment step, transforming the source by
//! each increment, until the twist norm of the increment falls below the
//! convergence threshold. The composed correction and the Gauss-Newton
//! Hessian at the optimum (the information matrix) feed the pose graph.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use thiserror::Error;

use crate::se3::{hat, Pose, Twist};
use crate::spatial::SpatialIndex;

/// Condition number of the 6x6 normal matrix beyond which the geometry is
/// treated as degenerate.
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum IcpError {
    #[error("degenerate correspondence geometry: normal matrix condition {condition:.3e}")]
    DegenerateGeometry { condition: f64 },
}

/// Matched point pair; `dist = |a - b|` and is strictly below the search
/// radius used to produce it.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub dist: f64,
}

/// Parameters of one registration. Defaults carry the reference values:
/// 3 m search radius, tau = 1/3 m, 1e-5 convergence norm, 200 minimum
/// correspondences.
#[derive(Debug, Clone, Copy)]
pub struct IcpConfig {
    pub d_max: f64,
    pub tau: f64,
    pub conv_eps: f64,
    pub max_iterations: usize,
    pub min_correspondences: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            d_max: 3.0,
            tau: 1.0 / 3.0,
            conv_eps: 1e-5,
            max_iterations: 100,
            min_correspondences: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Composed ICP correction: maps initial source positions onto the
    /// target.
    pub delta: Pose,
    /// Robust Gauss-Newton Hessian at the optimum.
    pub information: Matrix6<f64>,
    pub iterations: usize,
    pub final_correspondences: usize,
    /// False when the iteration cap was hit before the convergence norm.
    pub converged: bool,
}

/// Outcome of a registration attempt. An abort (too little overlap) is a
/// regular outcome, not an error.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum IcpOutcome {
    Registered(RegistrationResult),
    Aborted {
        iterations: usize,
        correspondences: usize,
    },
}

/// Robust kernel `rho(e) = (e^2 / 2) / (tau + e^2)`: quadratic near zero,
/// saturating at 1/2 for outliers.
pub fn robust_cost(e: f64, tau: f64) -> f64 {
    (e * e / 2.0) / (tau + e * e)
}

/// IRLS weight `w(e) = (1/e) * drho/de = tau / (tau + e^2)^2`, so that
/// weighted least squares reproduces the Gauss-Newton step on `rho`.
pub fn robust_weight(e: f64, tau: f64) -> f64 {
    let d = tau + e * e;
    tau / (d * d)
}

/// One correspondence per source point whose nearest target neighbor lies
/// strictly within `d_max`; unmatched source points are omitted.
pub fn find_correspondences(
    source: &[Vector3<f64>],
    index: &SpatialIndex,
    d_max: f64,
) -> Vec<Correspondence> {
    source
        .iter()
        .filter_map(|a| {
            index.nearest_within(a, d_max).map(|(i, dist)| Correspondence {
                a: *a,
                b: *index.point(i),
                dist,
            })
        })
        .collect()
}

/// Accumulates the weighted normal equations. The residual for a pair is
/// `r = a - b` with Jacobian `[I | -hat(a)]` under a local perturbation
/// `a -> exp(xi) * a`, so
/// `H = sum w J^T J` and `g = sum w J^T r`.
fn weighted_normal_equations(
    corrs: &[Correspondence],
    tau: f64,
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h00 = Matrix3::<f64>::zeros();
    let mut h01 = Matrix3::<f64>::zeros();
    let mut h11 = Matrix3::<f64>::zeros();
    let mut g0 = Vector3::<f64>::zeros();
    let mut g1 = Vector3::<f64>::zeros();
    for c in corrs {
        let w = robust_weight(c.dist, tau);
        let a = &c.a;
        let r = c.a - c.b;
        h00 += w * Matrix3::identity();
        h01 -= w * hat(a);
        h11 += w * (a.norm_squared() * Matrix3::identity() - a * a.transpose());
        g0 += w * r;
        g1 += w * a.cross(&r);
    }
    let mut h = Matrix6::zeros();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(&h00);
    h.fixed_view_mut::<3, 3>(0, 3).copy_from(&h01);
    h.fixed_view_mut::<3, 3>(3, 0).copy_from(&h01.transpose());
    h.fixed_view_mut::<3, 3>(3, 3).copy_from(&h11);
    let mut g = Vector6::zeros();
    g.fixed_view_mut::<3, 1>(0, 0).copy_from(&g0);
    g.fixed_view_mut::<3, 1>(3, 0).copy_from(&g1);
    (h, g)
}

/// Solves one robustly weighted Gauss-Newton step for the twist that
/// reduces `sum w(e_i) |T(xi) a_i - b_i|^2`.
pub fn gauss_newton_step(corrs: &[Correspondence], tau: f64) -> Result<Twist, IcpError> {
    let (h, g) = weighted_normal_equations(corrs, tau);
    let eigen = h.symmetric_eigenvalues();
    let max_ev = eigen.max();
    let min_ev = eigen.min();
    let condition = if min_ev > 0.0 { max_ev / min_ev } else { f64::INFINITY };
    if condition.is_nan() || condition >= MAX_CONDITION {
        return Err(IcpError::DegenerateGeometry { condition });
    }
    let chol = h
        .cholesky()
        .ok_or(IcpError::DegenerateGeometry { condition })?;
    let xi = chol.solve(&(-g));
    Ok(Twist::from_vector(&xi))
}

/// Robust Gauss-Newton Hessian at the correspondence set, symmetrized.
/// Unscaled by construction; relative weighting between constraints is
/// what the pose graph consumes.
pub fn information_matrix(corrs: &[Correspondence], tau: f64) -> Matrix6<f64> {
    let (h, _) = weighted_normal_equations(corrs, tau);
    (h + h.transpose()) / 2.0
}

/// Full ICP loop between a source cloud and an indexed target.
///
/// Aborts as soon as any iteration sees fewer than
/// `min_correspondences` matches. The returned `delta` is the product of
/// all increments, newest leftmost.
pub fn icp(
    source: &[Vector3<f64>],
    index: &SpatialIndex,
    config: &IcpConfig,
) -> Result<IcpOutcome, IcpError> {
    let mut current: Vec<Vector3<f64>> = source.to_vec();
    let mut delta = Pose::identity();
    for iter in 1..=config.max_iterations {
        let corrs = find_correspondences(&current, index, config.d_max);
        if corrs.len() < config.min_correspondences {
            return Ok(IcpOutcome::Aborted {
                iterations: iter,
                correspondences: corrs.len(),
            });
        }
        let step = gauss_newton_step(&corrs, config.tau)?;
        let increment = Pose::exp(&step);
        for p in &mut current {
            *p = increment.transform_point(p);
        }
        delta = increment.compose(&delta);
        let converged = step.norm() < config.conv_eps;
        if converged || iter == config.max_iterations {
            return Ok(IcpOutcome::Registered(RegistrationResult {
                delta,
                information: information_matrix(&corrs, config.tau),
                iterations: iter,
                final_correspondences: corrs.len(),
                converged,
            }));
        }
    }
    unreachable!("loop always returns by the iteration cap");
}
