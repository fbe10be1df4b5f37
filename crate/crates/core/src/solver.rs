//! The HiHTP iteration.
//!
//! Starting from `z⁰ = 0`, each iteration takes a gradient step on
//! `½‖y − Mz‖²`, thresholds the intermediate point to a hierarchically
//! sparse support and re-fits the entries by least squares on that support:
//!
//! ```text
//! S^{k+1} = T_{(s,σ,μ)}( z^k + Mᴴ(y − M z^k) )
//! z^{k+1} = argmin ‖y − Mz‖  s.t.  supp(z) ⊆ S^{k+1}
//! ```
//!
//! The gradient is scaled by the inverse mean squared column norm of `M`,
//! so a unit step means a unit step on the column-normalized system; with
//! unnormalized Gaussian codebooks a raw unit step makes the support
//! oscillate.
//!
//! The loop ends when the support repeats, the residual drops below
//! `residual_tol`, or `max_iters` is reached.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hier::{self, BlockScore, HierSupport, SparsityProfile};
use crate::operator::{Dims, LiftedVector, LinearMeasurement};
use crate::protocol::PlantedInstance;
use crate::scalar::Scalar;
use crate::signal::{rank_one_factor, Signal};

/// Residual threshold of the recovery success criterion.
pub const SUCCESS_RESIDUAL_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub residual_tol: f64,
    /// Relative rank tolerance of the restricted least-squares solve.
    pub ls_tol: f64,
    /// Gradient step in units of `1 / mean ‖column of M‖²`, i.e. the step on
    /// the column-normalized operator.
    pub step_size: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            residual_tol: SUCCESS_RESIDUAL_TOL,
            ls_tol: 1e-12,
            step_size: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        for (name, v) in [
            ("residual_tol", self.residual_tol),
            ("ls_tol", self.ls_tol),
            ("step_size", self.step_size),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    SupportFixed,
    Residual,
    MaxIters,
}

#[derive(Clone, Debug)]
pub struct SolverResult<T: Scalar> {
    pub z_hat: LiftedVector<T>,
    pub support: HierSupport,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged_by: StopReason,
    /// `‖y − M z^k‖` after each iteration.
    pub residual_trace: Vec<f64>,
}

/// HiHTP with a configurable block score.
#[derive(Clone, Copy)]
pub struct Hihtp {
    pub config: SolverConfig,
    pub score: &'static dyn BlockScore,
}

impl Default for Hihtp {
    fn default() -> Self {
        Self::new(SolverConfig::default())
    }
}

impl Hihtp {
    pub fn new(config: SolverConfig) -> Self {
        Self {
            config,
            score: hier::default_block_score(),
        }
    }

    pub fn with_score(mut self, score: &'static dyn BlockScore) -> Self {
        self.score = score;
        self
    }

    pub fn solve<T: Scalar>(
        &self,
        op: &dyn LinearMeasurement<T>,
        y: &Signal<T>,
        profile: &SparsityProfile,
    ) -> Result<SolverResult<T>> {
        let cfg = &self.config;
        cfg.validate()?;
        let dims = op.dims();
        check_profile(&dims, profile)?;
        if y.len() != dims.n {
            return Err(Error::LengthMismatch {
                expected: dims.n,
                actual: y.len(),
            });
        }

        let step = T::from_real(cfg.step_size / op.mean_column_norm_sq());
        let mut z = LiftedVector::zeros(dims);
        let mut residual = y.clone();
        let mut support: Option<HierSupport> = None;
        let mut trace = Vec::new();

        for iteration in 1..=cfg.max_iters {
            let grad = op.adjoint(&residual)?;
            let mut proxy = z.clone();
            for (p, g) in proxy.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *p += step * *g;
            }
            let next = hier::hier_threshold_with(&proxy, profile, self.score)?;
            z = restricted_least_squares(op, y, &next, cfg.ls_tol)?;
            residual = y - op.apply(&z)?;
            let residual_norm = residual.norm();
            trace.push(residual_norm);

            let stop = if support.as_ref() == Some(&next) {
                Some(StopReason::SupportFixed)
            } else if residual_norm <= cfg.residual_tol {
                Some(StopReason::Residual)
            } else if iteration == cfg.max_iters {
                Some(StopReason::MaxIters)
            } else {
                None
            };
            if let Some(converged_by) = stop {
                return Ok(SolverResult {
                    z_hat: z,
                    support: next,
                    residual_norm,
                    iterations: iteration,
                    converged_by,
                    residual_trace: trace,
                });
            }
            support = Some(next);
        }
        unreachable!("max_iters >= 1 always returns inside the loop")
    }
}

/// HiHTP with the default block score.
pub fn hihtp<T: Scalar>(
    op: &dyn LinearMeasurement<T>,
    y: &Signal<T>,
    profile: &SparsityProfile,
    cfg: &SolverConfig,
) -> Result<SolverResult<T>> {
    Hihtp::new(*cfg).solve(op, y, profile)
}

fn check_profile(dims: &Dims, profile: &SparsityProfile) -> Result<()> {
    let p = profile.dims;
    if p.taps != dims.taps || p.code_len != dims.code_len || p.users != dims.users {
        return Err(Error::InvalidProfile(format!(
            "profile dims {p:?} do not match operator dims {dims:?}"
        )));
    }
    Ok(())
}

/// `argmin ‖y − Mz‖` over `z` supported on `support`.
///
/// Solved by a QR factorization of the extracted columns; a rank-deficient
/// column block (some `|R_ii| ≤ ls_tol · max |R_jj|`) falls back to the
/// minimum-norm solution.
pub fn restricted_least_squares<T: Scalar>(
    op: &dyn LinearMeasurement<T>,
    y: &Signal<T>,
    support: &HierSupport,
    ls_tol: f64,
) -> Result<LiftedVector<T>> {
    let dims = op.dims();
    if y.len() != dims.n {
        return Err(Error::LengthMismatch {
            expected: dims.n,
            actual: y.len(),
        });
    }
    if support.len() > dims.n {
        return Err(Error::IllPosed {
            support: support.len(),
            rows: dims.n,
        });
    }
    let mut z = LiftedVector::zeros(dims);
    if support.is_empty() {
        return Ok(z);
    }
    let a = op.extract_columns(support)?;
    let coeffs = least_squares(a, y, ls_tol)?;
    for (flat, c) in support.flat_indices(&dims).into_iter().zip(coeffs.iter()) {
        z.as_mut_slice()[flat] = *c;
    }
    Ok(z)
}

fn least_squares<T: Scalar>(a: DMatrix<T>, y: &DVector<T>, tol: f64) -> Result<DVector<T>> {
    let qr = a.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = r.diagonal().iter().map(|v| v.modulus()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    if max > 0.0 && diag.iter().all(|&d| d > tol * max) {
        let rhs = qr.q().ad_mul(y);
        return r
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::LeastSquares("triangular solve failed".into()));
    }
    // Minimum-norm solution through the eigendecomposition of the Gram matrix.
    let eig = (a.adjoint() * &a).symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let mut coeffs = eig.eigenvectors.ad_mul(&a.ad_mul(y));
    for (c, &lambda) in coeffs.iter_mut().zip(eig.eigenvalues.iter()) {
        if lambda > tol * tol * lambda_max && lambda > 0.0 {
            *c /= T::from_real(lambda);
        } else {
            *c = T::zero();
        }
    }
    Ok(&eig.eigenvectors * coeffs)
}

/// Channel and signal estimates of one user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserFactors<T: Scalar> {
    pub user: usize,
    /// Entries in `{-1, 0, +1}`, first nonzero entry `+1`.
    pub b: Signal<T>,
    pub h: Signal<T>,
}

/// Split each listed user block of `z_hat` into `(b, h)`.
///
/// The leading singular pair is normalized so the anchor of `b` is `+1`,
/// then every entry of `b` is rounded to the nearest of `{-1, 0, +1}` (on
/// its real part) and `h = Xᵀ conj(b) / ‖b‖²` is refit against the rounded
/// `b`. Users whose block is zero, or whose `b` rounds to zero, are left out.
pub fn recover_factors<T: Scalar>(z_hat: &LiftedVector<T>, active_users: &[usize]) -> Result<Vec<UserFactors<T>>> {
    let dims = z_hat.dims();
    let mut out = Vec::with_capacity(active_users.len());
    for &user in active_users {
        if user >= dims.users {
            return Err(Error::InvalidSupport(format!("user {user} out of range")));
        }
        let x = z_hat.user_matrix(user);
        let (b, _) = match rank_one_factor(&x) {
            Ok(f) => f,
            Err(Error::NoFactor) => continue,
            Err(e) => return Err(e),
        };
        let mut bq = b.map(|v| {
            if v.modulus() < 0.5 {
                T::zero()
            } else if v.real() >= 0.0 {
                T::one()
            } else {
                -T::one()
            }
        });
        let Some(first) = bq.iter().position(|v| *v != T::zero()) else {
            continue;
        };
        if bq[first].real() < 0.0 {
            bq.neg_mut();
        }
        let energy = bq.norm_squared();
        let h = x.transpose() * bq.map(|v| v.conjugate()) / T::from_real(energy);
        out.push(UserFactors { user, b: bq, h });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecovery {
    pub user: usize,
    /// The solver reported this user active.
    pub detected: bool,
    /// The user's support triples match exactly.
    pub support_exact: bool,
    /// Bits differing between the transmitted and the recovered payload index.
    pub bit_errors: usize,
    /// `‖ĥ − h‖ / ‖h‖`, or 1 when the user was not recovered.
    pub channel_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessReport {
    /// Full `(user, tap, entry)` support recovered exactly.
    pub support_exact: bool,
    /// Active users and their taps recovered, entries ignored.
    pub activity_exact: bool,
    pub residual_ok: bool,
    pub success: bool,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged_by: StopReason,
    pub users: Vec<UserRecovery>,
}

/// Recovery verdict against a planted instance: success means exact support
/// and residual below [`SUCCESS_RESIDUAL_TOL`].
pub fn evaluate_success<T: Scalar>(result: &SolverResult<T>, truth: &PlantedInstance<T>) -> Result<SuccessReport> {
    let true_support = HierSupport::of_nonzeros(&truth.lifted);
    let support_exact = result.support == true_support;
    let activity_exact = result.support.tap_pattern() == true_support.tap_pattern();
    let residual_ok = result.residual_norm <= SUCCESS_RESIDUAL_TOL;
    let detected = result.support.active_users();
    let factors = recover_factors(&result.z_hat, &detected)?;
    let codec = &truth.codec;
    let width = codec.index_width();

    let users = truth
        .active_users()
        .map(|u| {
            let est = factors.iter().find(|f| f.user == u.user);
            let bit_errors = est
                .and_then(|f| codec.index(&f.b))
                .map(|idx| (idx ^ u.payload_index).count_ones() as usize)
                .unwrap_or(width);
            let channel_rel_error = est
                .map(|f| (&f.h - &u.h).norm() / u.h.norm().max(f64::MIN_POSITIVE))
                .unwrap_or(1.0);
            UserRecovery {
                user: u.user,
                detected: detected.contains(&u.user),
                support_exact: result.support.user_support(u.user) == true_support.user_support(u.user),
                bit_errors,
                channel_rel_error,
            }
        })
        .collect();

    Ok(SuccessReport {
        support_exact,
        activity_exact,
        residual_ok,
        success: support_exact && residual_ok,
        residual_norm: result.residual_norm,
        iterations: result.iterations,
        converged_by: result.converged_by,
        users,
    })
}
