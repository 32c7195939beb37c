//! Linearization of the gradient-play dynamics, Hurwitz and Lyapunov
//! analysis, and the attraction radii of the capacity multipliers.
//!
//! The market part of the dynamics is affine, `dx/dt = A1 x + c`, so the
//! assembled `A1` is its exact Jacobian. With capacity dynamics on, the
//! multipliers enter the supply rows through `A2` and are driven by the
//! capacity map `C` (1 on every supply component of the SC).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::dynamics::{DynamicsError, GradientPlaySystem, PerturbationSpec, TrajectoryRecord};
use crate::model::{MarketScenario, MarketState};

/// Required accuracy of a Lyapunov solution, `max |A^T P + P A + Q|`.
pub const LYAPUNOV_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not Hurwitz (max real eigenvalue part {0})")]
    NotHurwitz(f64),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
    #[error("linear system is singular")]
    Singular,
    #[error("Lyapunov residual {0} exceeds tolerance")]
    LyapunovResidual(f64),
    #[error("{which} perturbation norm {norm} exceeds declared bound {bound}")]
    PerturbationBound { which: &'static str, norm: f64, bound: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// `dx1/dt = a1 x1 + a2 x2 + constant` over the ordered market state.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSystem {
    pub a1: DMatrix<f64>,
    /// Multiplier coupling (`n x m`, zero columns when capacity dynamics are off).
    pub a2: DMatrix<f64>,
    /// Committed supply per SC as a function of the state (`m x n`).
    pub capacity_map: DMatrix<f64>,
    pub capacity: DVector<f64>,
    pub constant: DVector<f64>,
    pub ordering: Vec<String>,
}

impl LinearizedSystem {
    pub fn dim(&self) -> usize {
        self.a1.nrows()
    }

    pub fn capacity_dynamics(&self) -> bool {
        self.a2.ncols() > 0
    }

    /// `a1 x + constant` (multipliers at zero).
    pub fn rhs(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a1 * x + &self.constant
    }

    /// The unique point where the market vector field vanishes.
    pub fn equilibrium(&self) -> Result<DVector<f64>, StabilityError> {
        self.a1.clone().lu().solve(&(-&self.constant)).ok_or(StabilityError::Singular)
    }
}

fn unit_perturbation(scenario: &MarketScenario) -> PerturbationSpec {
    PerturbationSpec {
        supply_factors: scenario.scs.iter().map(|s| (s.id.clone(), 1.0)).collect(),
        pi_sc: 0.0,
        pi_c: 0.0,
    }
}

/// Assembles `A1`, `A2`, `C` and the constant term. Supply factors from
/// `perturbation` scale the curvature and price-equation supply entries.
pub fn assemble_linearization(
    scenario: &MarketScenario,
    perturbation: Option<&PerturbationSpec>,
    capacity_dynamics: bool,
) -> Result<LinearizedSystem, StabilityError> {
    let system = GradientPlaySystem::new(scenario, perturbation, capacity_dynamics)?;
    let layout = system.layout().clone();
    let n = layout.dim();
    let m = if capacity_dynamics { layout.n_scs() } else { 0 };
    let (d0, p0) = (layout.demand_offset(), layout.price_offset());
    let factor = |sc: usize| perturbation.map_or(1.0, |p| p.factor(&scenario.scs[sc].id));

    let mut a1 = DMatrix::zeros(n, n);
    let mut a2 = DMatrix::zeros(n, m);
    let mut capacity_map = DMatrix::zeros(m, n);
    for (s, slot) in layout.supply.iter().enumerate() {
        let ch = scenario.channel(*slot);
        let f = factor(slot.sc);
        let tau_rho = scenario.scs[slot.sc].tau_rho;
        a1[(s, s)] = -f * ch.coeffs.beta / ch.tau;
        a1[(s, p0 + slot.sc)] = 1.0 / ch.tau;
        a1[(p0 + slot.sc, s)] = -f / tau_rho;
        if capacity_dynamics {
            a2[(s, slot.sc)] = -1.0 / ch.tau;
            capacity_map[(slot.sc, s)] = 1.0;
        }
    }
    for (j, c) in scenario.customers.iter().enumerate() {
        let i = layout.customer_sc[j];
        a1[(d0 + j, d0 + j)] = c.coeffs_ag.beta / c.tau_ag;
        a1[(d0 + j, p0 + i)] = -1.0 / c.tau_ag;
        a1[(p0 + i, d0 + j)] = c.demand_factor() / scenario.scs[i].tau_rho;
    }
    // constant = rhs(0); the multiplier rows of the field are not affine
    let zero = vec![0.0; system.dim()];
    let f0 = system.rhs(&zero)?;
    let constant = DVector::from_column_slice(&f0[..n]);
    let capacity = DVector::from_iterator(m, system.capacities().iter().copied().take(m));
    Ok(LinearizedSystem {
        a1,
        a2,
        capacity_map,
        capacity,
        constant,
        ordering: scenario.state_labels().map_err(DynamicsError::from)?,
    })
}

/// Supply and demand perturbation matrices relative to the nominal system
/// (unit supply factors, no curtailment): `A1 = A1_nominal + delta_sc - delta_c`.
pub fn perturbation_matrices(
    scenario: &MarketScenario,
    perturbation: &PerturbationSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>), StabilityError> {
    let nominal = crate::presets::with_kappa(scenario.clone(), 0.0, 0.0);
    let base = assemble_linearization(&nominal, Some(&unit_perturbation(scenario)), false)?.a1;
    let supply = assemble_linearization(&nominal, Some(perturbation), false)?.a1;
    let curtailed = assemble_linearization(scenario, Some(&unit_perturbation(scenario)), false)?.a1;
    Ok((&supply - &base, &base - &curtailed))
}

/// Spectral norms of the supply and demand perturbation matrices, checked
/// against the declared bounds.
pub fn perturbation_norms(
    scenario: &MarketScenario,
    perturbation: &PerturbationSpec,
) -> Result<(f64, f64), StabilityError> {
    let (dsc, dc) = perturbation_matrices(scenario, perturbation)?;
    let (nsc, nc) = (spectral_norm(&dsc), spectral_norm(&dc));
    let slack = |b: f64| 1e-12 * b.abs().max(1.0);
    if nsc > perturbation.pi_sc + slack(perturbation.pi_sc) {
        return Err(StabilityError::PerturbationBound { which: "supply", norm: nsc, bound: perturbation.pi_sc });
    }
    if nc > perturbation.pi_c + slack(perturbation.pi_c) {
        return Err(StabilityError::PerturbationBound { which: "demand", norm: nc, bound: perturbation.pi_c });
    }
    Ok((nsc, nc))
}

fn check_square(m: &DMatrix<f64>) -> Result<usize, StabilityError> {
    if m.nrows() != m.ncols() {
        return Err(StabilityError::NotSquare { rows: m.nrows(), cols: m.ncols() });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(StabilityError::NonFinite);
    }
    Ok(m.nrows())
}

/// All eigenvalues with multiplicity, sorted by real then imaginary part.
pub fn eigenvalues(matrix: &DMatrix<f64>) -> Result<Vec<Complex64>, StabilityError> {
    let n = check_square(matrix)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut eig = schur_eigenvalues(matrix).ok_or(StabilityError::NoConvergence)?;
    eig.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(eig)
}

/// Real Schur eigenvalues. The QR iteration occasionally stagnates on a
/// particular matrix; the transpose and a shifted copy have the same
/// spectrum (up to the shift) and are tried in turn.
fn schur_eigenvalues(matrix: &DMatrix<f64>) -> Option<Vec<Complex64>> {
    let n = matrix.nrows();
    let run = |m: DMatrix<f64>, shift: f64| {
        m.try_schur(f64::EPSILON, 10_000 * n)
            .map(|s| s.complex_eigenvalues().iter().map(|c| Complex64::new(c.re - shift, c.im)).collect())
    };
    let shift = 0.1 * (1.0 + max_abs(matrix));
    run(matrix.clone(), 0.0)
        .or_else(|| run(matrix.transpose(), 0.0))
        .or_else(|| run(matrix + DMatrix::identity(n, n) * shift, shift))
        .or_else(|| run(matrix - DMatrix::identity(n, n) * shift, -shift))
}

fn max_real(eig: &[Complex64]) -> f64 {
    eig.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max)
}

/// `(is_hurwitz, max_real_part)` of `sys.a1`.
pub fn hurwitz_check(sys: &LinearizedSystem) -> Result<(bool, f64), StabilityError> {
    matrix_hurwitz(&sys.a1)
}

pub fn matrix_hurwitz(a: &DMatrix<f64>) -> Result<(bool, f64), StabilityError> {
    let mr = max_real(&eigenvalues(a)?);
    Ok((mr < 0.0, mr))
}

/// Largest singular value; zero for empty matrices.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::NAN;
    }
    m.clone().symmetric_eigen().eigenvalues.min()
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.clone().cholesky().is_some()
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Solves `A^T P + P A = -Q` through the vectorized system
/// `(I (x) A^T + A^T (x) I) vec(P) = -vec(Q)`, with one step of iterative
/// refinement. Sized for state dimensions up to about 100.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, StabilityError> {
    let n = check_square(a)?;
    if q.shape() != (n, n) {
        return Err(StabilityError::Dimension(format!("Q is {:?}, A is {n}x{n}", q.shape())));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(StabilityError::NonFinite);
    }
    if !is_positive_definite(q) || max_abs(&(q - q.transpose())) > 1e-12 * max_abs(q).max(1.0) {
        return Err(StabilityError::NotPositiveDefinite("Q"));
    }
    let (hurwitz, mr) = matrix_hurwitz(a)?;
    if !hurwitz {
        return Err(StabilityError::NotHurwitz(mr));
    }
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let k = eye.kronecker(&at) + at.kronecker(&eye);
    let lu = k.lu();
    let residual = |p: &DMatrix<f64>| -(q + &at * p + p * a);
    let rhs = DVector::from_column_slice((-q).as_slice());
    let vec_p = lu.solve(&rhs).ok_or(StabilityError::Singular)?;
    let mut p = DMatrix::from_column_slice(n, n, vec_p.as_slice());
    p = 0.5 * (&p + p.transpose());
    let r = residual(&p);
    if let Some(delta) = lu.solve(&DVector::from_column_slice(r.as_slice())) {
        let d = DMatrix::from_column_slice(n, n, delta.as_slice());
        p += 0.5 * (&d + d.transpose());
    }
    let res = max_abs(&residual(&p));
    if res > LYAPUNOV_TOLERANCE {
        return Err(StabilityError::LyapunovResidual(res));
    }
    if !is_positive_definite(&p) {
        return Err(StabilityError::NotPositiveDefinite("P"));
    }
    Ok(p)
}

/// `max |A^T P + P A + Q|`.
pub fn lyapunov_residual(a: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    max_abs(&(a.transpose() * p + p * a + q))
}

/// `V = y1^T P1 y1 + y2^T P2 y2`.
pub fn lyapunov_value(y1: &DVector<f64>, y2: &DVector<f64>, p1: &DMatrix<f64>, p2: &DMatrix<f64>) -> f64 {
    let v1 = (y1.transpose() * p1 * y1)[(0, 0)];
    let v2 = if y2.is_empty() { 0.0 } else { (y2.transpose() * p2 * y2)[(0, 0)] };
    v1 + v2
}

/// `d = 2 lambda_min(P2) psi_min lambda_min(Q) / beta^2`; infinite when
/// `beta = 0` (no multiplier coupling, the whole space is attracted).
pub fn attraction_radius(p2: &DMatrix<f64>, psi_min: f64, q: &DMatrix<f64>, beta_bound: f64) -> f64 {
    if beta_bound == 0.0 {
        return f64::INFINITY;
    }
    2.0 * lambda_min(p2) * psi_min * lambda_min(q) / (beta_bound * beta_bound)
}

/// Expansion of a capacity vector in the eigenbasis of `P2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiDecomposition {
    pub coefficients: Vec<f64>,
    /// Orthonormal eigenvectors of `P2` as columns, sign-normalized so that
    /// every coefficient is nonnegative.
    pub basis: DMatrix<f64>,
    pub psi_min: f64,
}

pub fn psi_coefficients(vm_max: &DVector<f64>, p2: &DMatrix<f64>) -> Result<PsiDecomposition, StabilityError> {
    let n = check_square(p2)?;
    if vm_max.len() != n {
        return Err(StabilityError::Dimension(format!("capacity vector of length {} for {n}x{n} P2", vm_max.len())));
    }
    if n == 0 {
        return Ok(PsiDecomposition { coefficients: Vec::new(), basis: DMatrix::zeros(0, 0), psi_min: 0.0 });
    }
    let eig = p2.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut basis = DMatrix::zeros(n, n);
    let mut coefficients = Vec::with_capacity(n);
    for (col, &k) in order.iter().enumerate() {
        let mut w = eig.eigenvectors.column(k).into_owned();
        let mut psi = w.dot(vm_max);
        if psi < 0.0 {
            w = -w;
            psi = -psi;
        }
        basis.set_column(col, &w);
        coefficients.push(psi);
    }
    let psi_min = coefficients.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(PsiDecomposition { coefficients, basis, psi_min })
}

/// Spectral norm of `P1 A2 + C^T P2`; zero without capacity dynamics.
pub fn beta_coupling_bound(
    p1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    p2: &DMatrix<f64>,
    capacity_map: &DMatrix<f64>,
) -> f64 {
    if a2.ncols() == 0 {
        return 0.0;
    }
    spectral_norm(&(p1 * a2 + capacity_map.transpose() * p2))
}

/// `d_delta = d - d_sc + d_c` with
/// `d_x = 4 lambda_min(P2) psi_min ||P1|| pi_x / beta^2`.
pub fn perturbed_radius(
    d: f64,
    bounds: &PerturbationSpec,
    p1: &DMatrix<f64>,
    p2: &DMatrix<f64>,
    psi_min: f64,
    beta_bound: f64,
) -> f64 {
    if beta_bound == 0.0 {
        return d;
    }
    let k = 4.0 * lambda_min(p2) * psi_min * spectral_norm(p1) / (beta_bound * beta_bound);
    d - k * bounds.pi_sc + k * bounds.pi_c
}

/// `pi_sc - pi_c < lambda_min(Q) / (2 ||P1||)`.
pub fn perturbation_condition(bounds: &PerturbationSpec, p1: &DMatrix<f64>, q: &DMatrix<f64>) -> bool {
    bounds.pi_sc - bounds.pi_c < lambda_min(q) / (2.0 * spectral_norm(p1))
}

#[derive(Debug, Clone, Default)]
pub struct AnalysisOptions {
    /// Diagonal multiplier weight; identity when absent.
    pub p2: Option<DMatrix<f64>>,
    /// Lyapunov right-hand side; identity when absent.
    pub q: Option<DMatrix<f64>>,
    pub capacity_dynamics: bool,
}

/// Fields that exist only when `A1` is Hurwitz.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovCertificate {
    pub p1: DMatrix<f64>,
    pub p2: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub lambda_min_q: f64,
    pub lambda_min_p2: f64,
    pub p1_norm: f64,
    pub psi: PsiDecomposition,
    pub beta_bound: f64,
    /// Attraction radius; `+inf` without capacity dynamics, `<= 0` when no
    /// region is certified.
    pub d: f64,
    pub d_delta: Option<f64>,
    pub perturbation_condition_ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub system: LinearizedSystem,
    pub eigenvalues: Vec<Complex64>,
    pub max_real_part: f64,
    pub is_hurwitz: bool,
    pub lyapunov: Option<LyapunovCertificate>,
    /// Spectral norms of the supply and demand perturbation matrices.
    pub perturbation_norms: Option<(f64, f64)>,
    /// Max real eigenvalue part of the perturbed system matrix.
    pub perturbed_max_real_part: Option<f64>,
}

/// Runs linearization, the Hurwitz test and, when `A1` is Hurwitz, the
/// Lyapunov certificate with attraction radii.
///
/// Without a perturbation `A1` is the scenario's own system matrix. With
/// one, `A1` is the nominal matrix (unit supply factors, no curtailment)
/// and the perturbation enters through its norms, `d_delta` and the
/// robustness condition.
pub fn analyze(
    scenario: &MarketScenario,
    perturbation: Option<&PerturbationSpec>,
    options: &AnalysisOptions,
) -> Result<StabilityReport, StabilityError> {
    let cap = options.capacity_dynamics;
    let (system, norms, perturbed_max_real_part) = match perturbation {
        None => (assemble_linearization(scenario, None, cap)?, None, None),
        Some(p) => {
            let norms = perturbation_norms(scenario, p)?;
            let nominal = crate::presets::with_kappa(scenario.clone(), 0.0, 0.0);
            let perturbed = assemble_linearization(scenario, Some(p), cap)?;
            let (_, mr) = hurwitz_check(&perturbed)?;
            (assemble_linearization(&nominal, None, cap)?, Some(norms), Some(mr))
        }
    };
    let eigenvalues = eigenvalues(&system.a1)?;
    let max_real_part = max_real(&eigenvalues);
    let is_hurwitz = max_real_part < 0.0;
    let lyapunov = if is_hurwitz {
        let n = system.dim();
        let m = scenario.scs.len();
        let q = options.q.clone().unwrap_or_else(|| DMatrix::identity(n, n));
        let p2 = options.p2.clone().unwrap_or_else(|| DMatrix::identity(m, m));
        if p2.shape() != (m, m) {
            return Err(StabilityError::Dimension(format!("P2 is {:?}, expected {m}x{m}", p2.shape())));
        }
        if !is_positive_definite(&p2) {
            return Err(StabilityError::NotPositiveDefinite("P2"));
        }
        let p1 = solve_lyapunov(&system.a1, &q)?;
        let capacities = DVector::from_iterator(m, scenario.scs.iter().map(|s| s.capacity()));
        let psi = psi_coefficients(&capacities, &p2)?;
        let beta_bound = beta_coupling_bound(&p1, &system.a2, &p2, &system.capacity_map);
        let d = attraction_radius(&p2, psi.psi_min, &q, beta_bound);
        let d_delta = perturbation.map(|p| perturbed_radius(d, p, &p1, &p2, psi.psi_min, beta_bound));
        let condition = perturbation.map(|p| perturbation_condition(p, &p1, &q));
        Some(LyapunovCertificate {
            lambda_min_q: lambda_min(&q),
            lambda_min_p2: lambda_min(&p2),
            p1_norm: spectral_norm(&p1),
            psi,
            beta_bound,
            d,
            d_delta,
            perturbation_condition_ok: condition,
            p1,
            p2,
            q,
        })
    } else {
        None
    };
    Ok(StabilityReport {
        system,
        eigenvalues,
        max_real_part,
        is_hurwitz,
        lyapunov,
        perturbation_norms: norms,
        perturbed_max_real_part,
    })
}

/// Checks that `V` never rises along a trajectory by more than
/// `1e-6 * V(0)` between consecutive samples. Returns the verdict and the
/// largest observed rise.
pub fn verify_lyapunov_decrease(
    trajectory: &TrajectoryRecord,
    equilibrium: &MarketState,
    p1: &DMatrix<f64>,
    p2: &DMatrix<f64>,
) -> Result<(bool, f64), StabilityError> {
    let eq = DVector::from_vec(equilibrium.to_vector());
    if p1.shape() != (eq.len(), eq.len()) {
        return Err(StabilityError::Dimension(format!("P1 is {:?}, state has {} components", p1.shape(), eq.len())));
    }
    let mut values = Vec::with_capacity(trajectory.states.len());
    for st in &trajectory.states {
        let x = DVector::from_vec(st.market.to_vector());
        if x.len() != eq.len() {
            return Err(StabilityError::Dimension("trajectory state does not match equilibrium".into()));
        }
        let y2 = DVector::from_column_slice(&st.multipliers);
        if !y2.is_empty() && p2.shape() != (y2.len(), y2.len()) {
            return Err(StabilityError::Dimension(format!("P2 is {:?}, {} multipliers", p2.shape(), y2.len())));
        }
        values.push(lyapunov_value(&(x - &eq), &y2, p1, p2));
    }
    let v0 = values.first().copied().unwrap_or(0.0);
    let worst = values.windows(2).map(|w| (w[1] - w[0]).max(0.0)).fold(0.0, f64::max);
    Ok((worst <= 1e-6 * v0, worst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate, perturb_state, DynamicState, IntegrationOptions, TerminalStatus};
    use crate::equilibrium::solve_kkt_closed_form;
    use crate::presets::{s1, s1_single, s2, with_kappa};

    /// Characteristic polynomial coefficients `[1, c1, ..., cn]` of
    /// `det(lambda I - A)` by Faddeev-LeVerrier.
    fn faddeev_leverrier(a: &DMatrix<f64>) -> Vec<f64> {
        let n = a.nrows();
        let mut coeffs = vec![1.0];
        let mut m = DMatrix::<f64>::zeros(n, n);
        let eye = DMatrix::<f64>::identity(n, n);
        for k in 1..=n {
            m = a * &m + &eye * coeffs[k - 1];
            let c = -(a * &m).trace() / k as f64;
            coeffs.push(c);
        }
        coeffs
    }

    fn poly_at(coeffs: &[f64], z: Complex64) -> Complex64 {
        coeffs.iter().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
    }

    #[test]
    fn s1_matrix_entries() {
        let sys = assemble_linearization(&s1(), None, false).unwrap();
        let a = &sys.a1;
        for s in 0..3 {
            assert!((a[(s, s)] - 0.5).abs() < 1e-12);
            assert!((a[(s, 4)] - 1.0 / 0.6).abs() < 1e-12);
            assert_eq!(a[(4, s)], -1.0);
        }
        assert!((a[(3, 3)] + 5.0).abs() < 1e-12);
        assert!((a[(3, 4)] + 10.0).abs() < 1e-12);
        assert_eq!(a[(4, 3)], 1.0);
        assert_eq!(a[(4, 4)], 0.0);
        assert_eq!(sys.ordering.len(), 5);
        assert_eq!(sys.a2.ncols(), 0);
    }

    #[test]
    fn curtailment_changes_only_demand_price_entry() {
        let base = assemble_linearization(&s1(), None, false).unwrap().a1;
        let cut = assemble_linearization(&with_kappa(s1(), 0.02, 0.02), None, false).unwrap().a1;
        let diff = &cut - &base;
        for ((r, c), v) in diff.iter().enumerate().map(|(k, v)| ((k % 5, k / 5), v)) {
            if (r, c) == (4, 3) {
                assert!((cut[(4, 3)] - 0.96).abs() < 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn matrix_matches_finite_difference_jacobian() {
        for s in [s1(), s2(), with_kappa(s1_single(), 0.03, 0.01)] {
            let sys = assemble_linearization(&s, None, false).unwrap();
            let field = GradientPlaySystem::new(&s, None, false).unwrap();
            let x0: Vec<f64> = (0..sys.dim()).map(|k| 10.0 + k as f64).collect();
            let h = 1e-4;
            for c in 0..sys.dim() {
                let mut xp = x0.clone();
                let mut xm = x0.clone();
                xp[c] += h;
                xm[c] -= h;
                let fp = field.rhs(&xp).unwrap();
                let fm = field.rhs(&xm).unwrap();
                for r in 0..sys.dim() {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    assert!((fd - sys.a1[(r, c)]).abs() < 1e-6, "({r},{c})");
                }
            }
            let f0 = field.rhs(&x0).unwrap();
            let lin = sys.rhs(&DVector::from_vec(x0));
            for (a, b) in f0.iter().zip(lin.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn eigenvalue_trivial_cases() {
        let e = eigenvalues(&DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]))).unwrap();
        assert_eq!(e, vec![Complex64::new(-2.0, 0.0), Complex64::new(-1.0, 0.0)]);
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let e = eigenvalues(&rot).unwrap();
        assert!((e[0] - Complex64::new(0.0, -1.0)).norm() < 1e-12);
        assert!((e[1] - Complex64::new(0.0, 1.0)).norm() < 1e-12);
        assert!(matches!(eigenvalues(&DMatrix::zeros(2, 3)), Err(StabilityError::NotSquare { .. })));
        let mut nan = DMatrix::<f64>::identity(2, 2);
        nan[(0, 1)] = f64::NAN;
        assert!(matches!(eigenvalues(&nan), Err(StabilityError::NonFinite)));
    }

    #[test]
    fn eigenvalues_are_roots_of_characteristic_polynomial() {
        for s in [s1(), s1_single(), s2()] {
            let a = assemble_linearization(&s, None, false).unwrap().a1;
            let coeffs = faddeev_leverrier(&a);
            let eig = eigenvalues(&a).unwrap();
            assert_eq!(eig.len(), a.nrows());
            let scale: f64 = coeffs.iter().map(|c| c.abs()).sum();
            for z in &eig {
                assert!(poly_at(&coeffs, *z).norm() < 1e-8 * scale * (1.0 + z.norm()).powi(a.nrows() as i32));
            }
            let sum: Complex64 = eig.iter().sum();
            assert!((sum.re - a.trace()).abs() < 1e-8);
            let prod: Complex64 = eig.iter().product();
            let det = a.determinant();
            assert!((prod.re - det).abs() <= 1e-6 * det.abs().max(1.0));
        }
    }

    #[test]
    fn s1_is_not_hurwitz() {
        let sys = assemble_linearization(&s1(), None, false).unwrap();
        let (ok, mr) = hurwitz_check(&sys).unwrap();
        assert!(!ok);
        assert!((mr - 0.5).abs() < 1e-8);
        let eig = eigenvalues(&sys.a1).unwrap();
        assert!(eig.iter().filter(|z| (z.re - 0.5).abs() < 1e-8 && z.im.abs() < 1e-8).count() >= 2);
    }

    #[test]
    fn s1_single_is_hurwitz() {
        let sys = assemble_linearization(&s1_single(), None, false).unwrap();
        let c = faddeev_leverrier(&sys.a1);
        for (got, want) in c.iter().zip([1.0, 4.5, 9.1667, 3.3333]) {
            assert!((got - want).abs() < 1e-3, "{c:?}");
        }
        // Routh-Hurwitz for a cubic: all positive and c1 c2 > c3
        assert!(c[1] > 0.0 && c[2] > 0.0 && c[3] > 0.0 && c[1] * c[2] > c[3]);
        let (ok, mr) = hurwitz_check(&sys).unwrap();
        assert!(ok && mr < 0.0);
        let (ok, mr) = matrix_hurwitz(&DMatrix::from_element(1, 1, -1.0)).unwrap();
        assert!(ok && mr == -1.0);
    }

    #[test]
    fn lyapunov_trivial_cases() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let p = solve_lyapunov(&(-&eye), &eye).unwrap();
        assert_eq!(p, 0.5 * &eye);
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        let p = solve_lyapunov(&a, &eye).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-14 && (p[(1, 1)] - 0.25).abs() < 1e-14);
        assert!(p[(0, 1)].abs() < 1e-14);
        assert!(matches!(solve_lyapunov(&eye, &eye), Err(StabilityError::NotHurwitz(_))));
        let not_pd = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(solve_lyapunov(&a, &not_pd), Err(StabilityError::NotPositiveDefinite("Q"))));
    }

    #[test]
    fn lyapunov_on_s1_single() {
        let a = assemble_linearization(&s1_single(), None, false).unwrap().a1;
        let q = DMatrix::identity(3, 3);
        let p = solve_lyapunov(&a, &q).unwrap();
        assert!(lyapunov_residual(&a, &p, &q) < 1e-8);
        assert!(p.clone().cholesky().is_some());
    }

    #[test]
    fn lyapunov_value_properties() {
        let p1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p2 = DMatrix::identity(1, 1);
        let z1 = DVector::zeros(2);
        let z2 = DVector::zeros(1);
        assert_eq!(lyapunov_value(&z1, &z2, &p1, &p2), 0.0);
        let y1 = DVector::from_vec(vec![1.0, -2.0]);
        let v = lyapunov_value(&y1, &z2, &p1, &p2);
        assert!(v > 0.0);
        assert!((lyapunov_value(&(2.0 * &y1), &z2, &p1, &p2) - 4.0 * v).abs() < 1e-12);
        assert!(lyapunov_value(&z1, &DVector::from_vec(vec![0.1]), &p1, &p2) > 0.0);
    }

    #[test]
    fn radius_formulas() {
        let p2 = DMatrix::identity(2, 2);
        let q = DMatrix::identity(2, 2);
        assert!((attraction_radius(&p2, 2.0, &q, 2.0) - 1.0).abs() < 1e-15);
        assert_eq!(attraction_radius(&p2, 0.0, &q, 2.0), 0.0);
        assert!((attraction_radius(&p2, 2.0, &q, 4.0) - 0.25).abs() < 1e-15);
        assert_eq!(attraction_radius(&p2, 2.0, &q, 0.0), f64::INFINITY);

        let p1 = 0.5 * DMatrix::<f64>::identity(2, 2);
        let b = PerturbationSpec { pi_sc: 0.1, pi_c: 0.05, ..Default::default() };
        assert!((perturbed_radius(1.0, &b, &p1, &p2, 2.0, 2.0) - 0.95).abs() < 1e-12);
        let zero = PerturbationSpec::default();
        assert_eq!(perturbed_radius(1.0, &zero, &p1, &p2, 2.0, 2.0), 1.0);
        let equal = PerturbationSpec { pi_sc: 0.3, pi_c: 0.3, ..Default::default() };
        assert!((perturbed_radius(1.0, &equal, &p1, &p2, 2.0, 2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn robustness_condition() {
        let p1 = 0.5 * DMatrix::<f64>::identity(2, 2);
        let q = DMatrix::identity(2, 2);
        let cond =
            |pi_sc, pi_c| perturbation_condition(&PerturbationSpec { pi_sc, pi_c, ..Default::default() }, &p1, &q);
        assert!(cond(0.05, 0.05));
        assert!(cond(0.1, 0.05));
        assert!(!cond(2.0, 0.0));
    }

    #[test]
    fn psi_decomposition() {
        let p2 = DMatrix::<f64>::identity(2, 2);
        let d = psi_coefficients(&DVector::from_vec(vec![3.0, 4.0]), &p2).unwrap();
        let mut c = d.coefficients.clone();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[1] - 4.0).abs() < 1e-12);
        assert!((d.psi_min - 3.0).abs() < 1e-12);
        assert_eq!(psi_coefficients(&DVector::zeros(2), &p2).unwrap().psi_min, 0.0);

        let p2 = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.5, 1.7, 2.2]));
        let v = DVector::from_vec(vec![200.0, 200.0, 250.0, 120.0]);
        let d = psi_coefficients(&v, &p2).unwrap();
        let rebuilt = &d.basis * DVector::from_vec(d.coefficients.clone());
        assert!((rebuilt - v).amax() < 1e-10);
        assert!(d.coefficients.iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn beta_bound_cases() {
        let p1 = DMatrix::<f64>::identity(3, 3);
        let p2 = DMatrix::<f64>::identity(1, 1);
        assert_eq!(beta_coupling_bound(&p1, &DMatrix::zeros(3, 0), &p2, &DMatrix::zeros(0, 3)), 0.0);

        let a2 = DMatrix::from_column_slice(3, 1, &[-1.0, -1.0, 0.0]);
        let c = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        // P1 A2 + C^T P2 cancels on the supply rows
        assert!(beta_coupling_bound(&p1, &a2, &p2, &c) < 1e-15);

        let a2 = DMatrix::from_column_slice(3, 1, &[-2.0, -1.0, 0.0]);
        let direct = (-2.0f64 + 1.0).hypot(-1.0 + 1.0);
        assert!((beta_coupling_bound(&p1, &a2, &p2, &c) - direct).abs() < 1e-12);

        let zero_c = DMatrix::zeros(1, 3);
        let b1 = beta_coupling_bound(&p1, &a2, &p2, &zero_c);
        let b2 = beta_coupling_bound(&(2.0 * &p1), &a2, &p2, &zero_c);
        assert!((b2 - 2.0 * b1).abs() < 1e-12);
    }

    #[test]
    fn capacity_blocks() {
        let sys = assemble_linearization(&s1(), None, true).unwrap();
        assert_eq!(sys.a2.shape(), (5, 1));
        assert_eq!(sys.capacity_map.shape(), (1, 5));
        for s in 0..3 {
            assert!((sys.a2[(s, 0)] + 1.0 / 0.6).abs() < 1e-12);
            assert_eq!(sys.capacity_map[(0, s)], 1.0);
        }
        assert_eq!(sys.capacity[0], 3000.0);
    }

    #[test]
    fn analyze_s1_and_s1_single() {
        let r = analyze(&s1(), None, &AnalysisOptions::default()).unwrap();
        assert!(!r.is_hurwitz);
        assert!((r.max_real_part - 0.5).abs() < 1e-8);
        assert!(r.lyapunov.is_none());

        let r = analyze(&s1_single(), None, &AnalysisOptions::default()).unwrap();
        assert!(r.is_hurwitz);
        let cert = r.lyapunov.as_ref().unwrap();
        assert_eq!(cert.beta_bound, 0.0);
        assert_eq!(cert.d, f64::INFINITY);
        assert!(lyapunov_residual(&r.system.a1, &cert.p1, &cert.q) < 1e-8);
        let again = analyze(&s1_single(), None, &AnalysisOptions::default()).unwrap();
        assert_eq!(r, again);

        let cap = AnalysisOptions { capacity_dynamics: true, ..Default::default() };
        let r = analyze(&s1_single(), None, &cap).unwrap();
        let cert = r.lyapunov.unwrap();
        assert!(cert.beta_bound > 0.0);
        assert!(cert.d.is_finite() && cert.d > 0.0);
    }

    #[test]
    fn analyze_with_perturbation() {
        let s = with_kappa(s1_single(), 0.01, 0.01);
        let mut p = PerturbationSpec { supply_factors: [("SC1".to_string(), 0.98)].into(), pi_sc: 1.0, pi_c: 1.0 };
        let (nsc, nc) = perturbation_norms(&s, &p).unwrap();
        assert!(nsc > 0.0 && nc > 0.0);
        let r = analyze(&s, Some(&p), &AnalysisOptions::default()).unwrap();
        assert_eq!(r.perturbation_norms, Some((nsc, nc)));
        assert!(r.lyapunov.unwrap().perturbation_condition_ok.is_some());
        p.pi_sc = 0.5 * nsc;
        assert!(matches!(
            analyze(&s, Some(&p), &AnalysisOptions::default()),
            Err(StabilityError::PerturbationBound { which: "supply", .. })
        ));
    }

    #[test]
    fn lyapunov_decrease_along_trajectories() {
        let s = s1_single();
        let eq = solve_kkt_closed_form(&s).unwrap().state;
        let report = analyze(&s, None, &AnalysisOptions::default()).unwrap();
        let cert = report.lyapunov.unwrap();
        let opts = IntegrationOptions { t_end: 50.0, dt: 1e-2, record_every: 10, ..Default::default() };

        let at_eq = integrate(&s, &DynamicState::without_capacity(eq.clone()), &opts, None).unwrap();
        assert_eq!(verify_lyapunov_decrease(&at_eq, &eq, &cert.p1, &cert.p2).unwrap(), (true, 0.0));

        let x0 = perturb_state(&DynamicState::without_capacity(eq.clone()), 0.01, 11).unwrap();
        let tr = integrate(&s, &x0, &opts, None).unwrap();
        assert_eq!(tr.terminal_status, TerminalStatus::Converged);
        assert!(verify_lyapunov_decrease(&tr, &eq, &cert.p1, &cert.p2).unwrap().0);

        let s = s1();
        let eq = solve_kkt_closed_form(&s).unwrap().state;
        let x0 = perturb_state(&DynamicState::without_capacity(eq.clone()), 0.01, 11).unwrap();
        let tr = integrate(&s, &x0, &opts, None).unwrap();
        let p = DMatrix::identity(5, 5);
        let (ok, worst) = verify_lyapunov_decrease(&tr, &eq, &p, &DMatrix::identity(1, 1)).unwrap();
        assert!(!ok && worst > 0.0);
    }

    #[test]
    fn equilibrium_of_linear_system_matches_closed_form() {
        for s in [s1_single(), s2(), with_kappa(s2(), 0.02, 0.02)] {
            let sys = assemble_linearization(&s, None, false).unwrap();
            let x = sys.equilibrium().unwrap();
            let cf = solve_kkt_closed_form(&s).unwrap().state.to_vector();
            for (a, b) in x.iter().zip(cf) {
                assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
            }
        }
    }

    mod props {
        use super::*;
        use crate::generate::{random_scenario, RandomScenarioConfig};
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn duplicate_channels_give_positive_eigenvalue(seed in any::<u64>()) {
                let mut s = random_scenario(seed, &RandomScenarioConfig::default());
                let sc = &mut s.scs[0];
                let mut twin = sc.channels[0].clone();
                twin.channel = crate::model::Channel::ALL
                    .into_iter()
                    .find(|c| sc.channels.iter().all(|x| x.channel != *c))
                    .unwrap_or(twin.channel);
                if sc.channels.iter().any(|x| x.channel == twin.channel) {
                    sc.channels[1] = sc.channels[0].clone();
                    sc.channels[1].channel = twin.channel;
                    let other = crate::model::Channel::ALL.into_iter().find(|c| *c != sc.channels[0].channel).unwrap();
                    sc.channels[1].channel = other;
                    if sc.channels.len() > 2 && sc.channels[2].channel == other {
                        sc.channels.truncate(2);
                    }
                } else {
                    sc.channels.push(twin);
                }
                let ch = &s.scs[0].channels[0];
                let mode = -ch.coeffs.beta / ch.tau;
                let eig = eigenvalues(&assemble_linearization(&s, None, false).unwrap().a1).unwrap();
                prop_assert!(eig.iter().any(|z| (z.re - mode).abs() < 1e-8 * mode.max(1.0) && z.im.abs() < 1e-8));
                prop_assert!(!matrix_hurwitz(&assemble_linearization(&s, None, false).unwrap().a1).unwrap().0);
            }

            #[test]
            fn similarity_preserves_eigenvalues(seed in any::<u64>()) {
                let s = random_scenario(seed, &RandomScenarioConfig { scs: (1, 2), customers_per_sc: (1, 2), ..Default::default() });
                let a = assemble_linearization(&s, None, false).unwrap().a1;
                let n = a.nrows();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let t = DMatrix::<f64>::identity(n, n) + DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.3..0.3) / n as f64);
                let ti = t.clone().try_inverse().unwrap();
                let b = &ti * &a * &t;
                let ea = eigenvalues(&a).unwrap();
                let eb = eigenvalues(&b).unwrap();
                let scale = ea.iter().map(|z| z.norm()).fold(1.0, f64::max);
                for z in &ea {
                    let nearest = eb.iter().map(|w| (w - z).norm()).fold(f64::INFINITY, f64::min);
                    prop_assert!(nearest < 1e-6 * scale, "{} vs {:?}", z, eb);
                }
            }
        }
    }
}
