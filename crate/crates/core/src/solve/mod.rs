//! Dirichlet and Neumann p-harmonic problems on extension domains, the
//! exhaustion scheme for data without compact support, and the a-priori
//! energy ratio.

mod newton;

use serde::{Deserialize, Serialize};

use crate::cheeger::{DifferentialStructure, Stencil};
use crate::error::{Error, Result};
use crate::extension::{ExtensionDomain, FractionalParams, NodeRole};
use crate::graph;
use crate::nonlocal;
use crate::space::MetricMeasureSpace;

pub(crate) use newton::Minimizer;

/// Optimizer selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Newton,
    Descent,
    /// Newton, falling back to accelerated descent when it stalls.
    #[default]
    Auto,
}

/// Solver settings. Residual target is `tol * (1 + max|f|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Informational; the exponent passed to each solve wins.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub epsilon_schedule: Vec<f64>,
    pub method: Method,
    pub energy_rtol: f64,
    /// Initial guess on all nodes (fixed entries are overwritten).
    #[serde(skip)]
    pub init: Option<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            p: None,
            tol: 1e-8,
            max_iter: 500,
            epsilon_schedule: vec![1e-2, 1e-4, 1e-6, 1e-8, 1e-10, 1e-12],
            method: Method::Auto,
            energy_rtol: 1e-14,
            init: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParams(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParams("max_iter must be positive".into()));
        }
        if self.epsilon_schedule.is_empty() || self.epsilon_schedule.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidParams("epsilon_schedule needs positive entries".into()));
        }
        Ok(())
    }

    pub fn with_init(mut self, init: Vec<f64>) -> Self {
        self.init = Some(init);
        self
    }
}

/// Neumann data on the points of `Z`, with its weighted norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryData {
    pub f: Vec<f64>,
    pub x0: usize,
    /// `||f||_{L^{p'}(nu)}`.
    pub norm_p_conj: f64,
    /// `||f||_{L^{p'}(nu_J)}`.
    pub norm_j: f64,
    /// `sum_i f_i nu_i`.
    pub mean: f64,
}

impl BoundaryData {
    /// `x0` defaults to the maximizer of `nu(B(x, 1))`.
    pub fn new(z: &MetricMeasureSpace, params: FractionalParams, f: Vec<f64>, x0: Option<usize>) -> Result<Self> {
        if f.len() != z.len() {
            return Err(Error::DimensionMismatch { what: "boundary data", expected: z.len(), got: f.len() });
        }
        if let Some(i) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("boundary data is not finite at point {i}")));
        }
        let x0 = x0.unwrap_or_else(|| z.unit_ball_maximizer());
        if x0 >= z.len() {
            return Err(Error::InvalidParams(format!("base point {x0} out of range")));
        }
        let q = params.p_conj();
        let norm_p_conj = f.iter().zip(z.nu()).map(|(v, m)| v.abs().powf(q) * m).sum::<f64>().powf(1.0 / q);
        let norm_j = nonlocal::norm_nu_j(z, &f, x0, params);
        let mean = f.iter().zip(z.nu()).map(|(v, m)| v * m).sum();
        Ok(Self { f, x0, norm_p_conj, norm_j, mean })
    }

    /// Zero data.
    pub fn zeros(z: &MetricMeasureSpace, params: FractionalParams) -> Self {
        Self::new(z, params, vec![0.0; z.len()], None).expect("zero data is valid")
    }

    pub fn max_abs(&self) -> f64 {
        self.f.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// A computed node function with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub u: Vec<f64>,
    pub energy: f64,
    pub el_residual: f64,
    pub iterations: usize,
    /// Mean of `u` over the reference ball after normalization.
    pub normalization: f64,
    pub method: Method,
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::InvalidParams(format!("p must lie in (1, inf), got {p}")));
    }
    Ok(())
}

/// Fails when some component of the graph has no active boundary node.
fn check_components(domain: &ExtensionDomain) -> Result<()> {
    let labels = graph::components(domain.node_count(), &domain.edge_pairs());
    let mut anchored = vec![false; domain.node_count()];
    for i in domain.boundary_ids() {
        anchored[labels[i]] = true;
    }
    match (0..domain.node_count()).find(|&i| !anchored[labels[i]]) {
        Some(node) => Err(Error::DisconnectedComponentWithoutBoundary { node }),
        None => Ok(()),
    }
}

/// p-harmonic extension of `boundary_values` (indexed by the points of `Z`;
/// values at free points are ignored).
pub fn solve_dirichlet(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    p: f64,
    boundary_values: &[f64],
    cfg: &SolverConfig,
) -> Result<Solution> {
    let st = Stencil::build(domain, structure)?;
    dirichlet_with_stencil(domain, &st, p, boundary_values, cfg)
}

pub(crate) fn dirichlet_with_stencil(
    domain: &ExtensionDomain,
    st: &Stencil,
    p: f64,
    boundary_values: &[f64],
    cfg: &SolverConfig,
) -> Result<Solution> {
    check_p(p)?;
    cfg.validate()?;
    if boundary_values.len() != domain.boundary_len() {
        return Err(Error::DimensionMismatch {
            what: "boundary values",
            expected: domain.boundary_len(),
            got: boundary_values.len(),
        });
    }
    if domain.boundary_ids().is_empty() {
        return Err(Error::InvalidDomain("no active boundary nodes".into()));
    }
    check_components(domain)?;
    let n = domain.node_count();
    let free: Vec<bool> = (0..n).map(|i| domain.role(i) != NodeRole::Boundary).collect();
    let fixed = |u: &mut Vec<f64>| {
        for i in domain.boundary_ids() {
            u[i] = boundary_values[i];
        }
    };
    let mut u0 = match &cfg.init {
        Some(v) if v.len() == n => v.clone(),
        Some(v) => return Err(Error::DimensionMismatch { what: "initial guess", expected: n, got: v.len() }),
        None => vec![0.0; n],
    };
    fixed(&mut u0);
    let target = cfg.tol;
    if cfg.init.is_none() && p != 2.0 {
        let lin = Minimizer::new(st, 2.0, &free, vec![0.0; n]);
        u0 = lin.run(u0, &SolverConfig { method: Method::Newton, ..cfg.clone() }, target)?.u;
    }
    let mz = Minimizer::new(st, p, &free, vec![0.0; n]);
    let out = mz.run(u0, cfg, target)?;
    Ok(Solution {
        energy: st.energy(&out.u, p),
        el_residual: out.residual,
        iterations: out.iterations,
        normalization: 0.0,
        method: out.method,
        u: out.u,
    })
}

/// Nodes and weights of the reference ball `B_0` used for normalization: the
/// `mu`-weighted nodes within `base_radius` of the base point, or the
/// `nu`-weighted boundary points when that set carries no measure.
pub fn reference_weights(domain: &ExtensionDomain) -> Vec<(usize, f64)> {
    let d = domain.distances_from_point(domain.base_point());
    let r = domain.base_radius();
    let inner: Vec<(usize, f64)> = (0..domain.node_count())
        .filter(|&i| d[i] < r && domain.mu()[i] > 0.0)
        .map(|i| (i, domain.mu()[i]))
        .collect();
    if !inner.is_empty() {
        return inner;
    }
    domain.reference_ball().into_iter().map(|i| (i, domain.space().nu()[i])).collect()
}

fn weighted_mean(u: &[f64], w: &[(usize, f64)]) -> f64 {
    let total: f64 = w.iter().map(|x| x.1).sum();
    w.iter().map(|&(i, m)| m * u[i]).sum::<f64>() / total
}

/// Minimizer of `int |grad v|^p dmu - p int v f dnu`, normalized to zero mean
/// on the reference ball. Data at free points is dropped; the data is
/// recentred when its mean is within `1e-10 sum |f| nu` and rejected otherwise.
pub fn solve_neumann(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    p: f64,
    f: &BoundaryData,
    cfg: &SolverConfig,
) -> Result<Solution> {
    let st = Stencil::build(domain, structure)?;
    neumann_with_stencil(domain, &st, p, &f.f, cfg)
}

/// Returns the data restricted to the active boundary and recentred.
pub(crate) fn active_zero_mean(domain: &ExtensionDomain, f: &[f64]) -> Result<Vec<f64>> {
    let nu = domain.space().nu();
    let active = domain.boundary_ids();
    let mean: f64 = active.iter().map(|&i| f[i] * nu[i]).sum();
    let scale: f64 = active.iter().map(|&i| f[i].abs() * nu[i]).sum();
    let tol = 1e-10 * scale;
    if mean.abs() > tol {
        return Err(Error::NonzeroMean { mean, tol });
    }
    let mass: f64 = active.iter().map(|&i| nu[i]).sum();
    let mut out = vec![0.0; f.len()];
    for &i in &active {
        out[i] = f[i] - mean / mass;
    }
    Ok(out)
}

pub(crate) fn neumann_with_stencil(
    domain: &ExtensionDomain,
    st: &Stencil,
    p: f64,
    f: &[f64],
    cfg: &SolverConfig,
) -> Result<Solution> {
    check_p(p)?;
    cfg.validate()?;
    let nz = domain.boundary_len();
    if f.len() != nz {
        return Err(Error::DimensionMismatch { what: "boundary data", expected: nz, got: f.len() });
    }
    domain.check_connected()?;
    let f = active_zero_mean(domain, f)?;
    let n = domain.node_count();
    let nu = domain.space().nu();
    let mut load = vec![0.0; n];
    for i in 0..nz {
        load[i] = f[i] * nu[i];
    }
    let pin = domain.base_point();
    let mut free = vec![true; n];
    free[pin] = false;
    let fmax = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target = cfg.tol * (1.0 + fmax);
    let mut u0 = match &cfg.init {
        Some(v) if v.len() == n => v.clone(),
        Some(v) => return Err(Error::DimensionMismatch { what: "initial guess", expected: n, got: v.len() }),
        None => vec![0.0; n],
    };
    let shift = u0[pin];
    u0.iter_mut().for_each(|x| *x -= shift);

    let out = if fmax == 0.0 {
        newton::Outcome { u: vec![0.0; n], iterations: 0, residual: 0.0, method: cfg.method }
    } else {
        if cfg.init.is_none() && p != 2.0 {
            let lin = Minimizer::new(st, 2.0, &free, load.clone());
            let u2 = lin.run(u0, &SolverConfig { method: Method::Newton, ..cfg.clone() }, target)?.u;
            // best multiple of the linear solution for the p-problem
            let pair: f64 = load.iter().zip(&u2).map(|(b, x)| b * x).sum();
            let e = st.energy(&u2, p);
            let s = if pair > 0.0 && e > 0.0 { (pair / e).powf(1.0 / (p - 1.0)) } else { 1.0 };
            u0 = u2.into_iter().map(|x| s * x).collect();
        }
        let mz = Minimizer::new(st, p, &free, load.clone());
        mz.run(u0, cfg, target)?
    };
    let mut u = out.u;
    let w = reference_weights(domain);
    let m = weighted_mean(&u, &w);
    u.iter_mut().for_each(|x| *x -= m);
    // residual over every node, the pinned one included; for p < 2 the
    // minimizer's smoothed measure is the meaningful one
    let residual = if p >= 2.0 {
        let el = st.el_vector(&u, p);
        el.iter().zip(&load).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    } else {
        0.0
    };
    Ok(Solution {
        energy: st.energy(&u, p),
        el_residual: residual.max(out.residual),
        iterations: out.iterations,
        normalization: weighted_mean(&u, &w),
        method: out.method,
        u,
    })
}

/// Whether the exhaustion increments contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CauchyVerdict {
    /// Increments strictly decrease, each by more than the stagnation factor.
    Cauchy,
    /// Some increment failed to shrink below `STAGNATION_RATIO` times its predecessor.
    NonCauchy,
}

/// Ratio of successive increments at or above which the sequence counts as stagnating.
pub const STAGNATION_RATIO: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustionStep {
    pub k: u32,
    pub active_points: usize,
    /// `||f - f_k||_{L^{p'}(nu_J)}`.
    pub tail_norm_j: f64,
    /// `||grad(u_k - u_{k-1})||_{L^p(mu)}`, absent for the first step.
    pub increment: Option<f64>,
    pub energy: f64,
    pub el_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustionReport {
    pub steps: Vec<ExhaustionStep>,
    pub verdict: CauchyVerdict,
    pub solution: Solution,
}

/// `f_k = f chi_{B_k} - (int_{B_k} f dnu / nu(B_0)) chi_{B_0}` over the active
/// points, with closed balls `B_k = 2^k B_0`.
pub fn truncated_data(domain: &ExtensionDomain, f: &[f64], k: u32) -> Vec<f64> {
    let nu = domain.space().nu();
    let active: Vec<bool> = (0..domain.boundary_len()).map(|i| domain.role(i) == NodeRole::Boundary).collect();
    let bk: Vec<usize> = domain.ball_points(k).into_iter().filter(|&i| active[i]).collect();
    let b0: Vec<usize> = domain.ball_points(0).into_iter().filter(|&i| active[i]).collect();
    let mass_k: f64 = bk.iter().map(|&i| f[i] * nu[i]).sum();
    let nu_b0: f64 = b0.iter().map(|&i| nu[i]).sum();
    let mut out = vec![0.0; f.len()];
    for &i in &bk {
        out[i] = f[i];
    }
    for &i in &b0 {
        out[i] -= mass_k / nu_b0;
    }
    out
}

/// Solves on `truncate(domain, k)` with data `f_k` for `k = 1..=k_max`.
pub fn solve_neumann_exhaustion(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    p: f64,
    f: &BoundaryData,
    k_max: u32,
    cfg: &SolverConfig,
) -> Result<ExhaustionReport> {
    if k_max < 1 {
        return Err(Error::InvalidParams("k_max must be at least 1".into()));
    }
    // the full data must itself be admissible
    active_zero_mean(domain, &f.f)?;
    let st = Stencil::build(domain, structure)?;
    let params = domain.params();
    let z = domain.space();
    let mut steps = Vec::new();
    let mut prev: Option<Vec<f64>> = None;
    let mut last = None;
    for k in 1..=k_max {
        let dk = domain.truncate(k);
        let fk = truncated_data(&dk, &f.f, k);
        let sol = neumann_with_stencil(&dk, &st, p, &fk, cfg)?;
        let tail: Vec<f64> = f.f.iter().zip(&fk).map(|(a, b)| a - b).collect();
        let increment = prev.as_ref().map(|u_prev| {
            let diff: Vec<f64> = sol.u.iter().zip(u_prev).map(|(a, b)| a - b).collect();
            st.energy(&diff, p).powf(1.0 / p)
        });
        steps.push(ExhaustionStep {
            k,
            active_points: dk.boundary_ids().len(),
            tail_norm_j: nonlocal::norm_nu_j(z, &tail, f.x0, params_with_p(params, p)),
            increment,
            energy: sol.energy,
            el_residual: sol.el_residual,
        });
        prev = Some(sol.u.clone());
        last = Some(sol);
    }
    let incs: Vec<f64> = steps.iter().filter_map(|s| s.increment).collect();
    let first = incs.first().copied().unwrap_or(0.0);
    let stagnates = incs.windows(2).any(|w| {
        // increments at round-off level count as converged
        w[0] > 1e-14 * first.max(f64::MIN_POSITIVE) && w[1] >= STAGNATION_RATIO * w[0]
    });
    Ok(ExhaustionReport {
        steps,
        verdict: if stagnates { CauchyVerdict::NonCauchy } else { CauchyVerdict::Cauchy },
        solution: last.expect("k_max >= 1"),
    })
}

/// Same `theta`, different `p` when a solve is run at a non-native exponent.
/// Falls back to the domain parameters when the combination is invalid.
pub(crate) fn params_with_p(params: FractionalParams, p: f64) -> FractionalParams {
    if p == params.p() {
        params
    } else {
        FractionalParams::new(p, params.theta()).unwrap_or(params)
    }
}

/// `energy / ||f||_{nu_J}^{p'}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APrioriReport {
    pub energy: f64,
    pub norm_j: f64,
    /// Zero when both sides vanish.
    pub ratio: f64,
    pub bound: Option<f64>,
    pub violated: bool,
}

pub fn a_priori_check(solution: &Solution, f: &BoundaryData, p: f64, bound: Option<f64>) -> APrioriReport {
    let q = p / (p - 1.0);
    let denom = f.norm_j.powf(q);
    let ratio = if solution.energy == 0.0 && denom == 0.0 {
        0.0
    } else if denom == 0.0 {
        f64::INFINITY
    } else {
        solution.energy / denom
    };
    APrioriReport {
        energy: solution.energy,
        norm_j: f.norm_j,
        ratio,
        bound,
        violated: bound.is_some_and(|b| ratio > b),
    }
}
