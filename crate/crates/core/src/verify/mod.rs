//! Numerical checks: energy comparability, stability exponents, Harnack and
//! Hölder behaviour, the growth condition on data, and the `p = 2` spectral
//! oracle. Every check can be rendered as a JSON report plus a CSV table.

mod oracle;
mod regularity;

pub use oracle::{extension_constant, spectral_oracle_p2, SpectralOracle};
pub use regularity::{
    check_harnack, estimate_holder, harnack_ratios, holder_threshold, makalainen_check, oscillation_fit,
    product_mass_exponent, HarnackBall, HarnackReport, HolderReport, MakalainenReport,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cheeger::{DifferentialStructure, Stencil};
use crate::error::{Error, Result};
use crate::extension::ExtensionDomain;
use crate::nonlocal::{besov_form, norm_nu_j};
use crate::solve::{self, BoundaryData, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    /// Nothing is claimed, e.g. below an integrability threshold.
    Informational,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    /// Pass and informational both count as success.
    pub fn is_ok(self) -> bool {
        self != Verdict::Fail
    }
}

/// Raw samples for external plotting.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// `{check, params, seed, verdict, data}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub check: String,
    pub params: Value,
    pub seed: u64,
    pub verdict: Verdict,
    pub data: Value,
    #[serde(skip)]
    pub table: Table,
}

impl Report {
    pub fn new(check: &str, params: Value, seed: u64, verdict: Verdict, data: impl Serialize, table: Table) -> Result<Self> {
        Ok(Self { check: check.to_string(), params, seed, verdict, data: serde_json::to_value(data)?, table })
    }
}

/// Log-log regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub samples: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl ExponentFit {
    /// Fits `log y = slope log x + intercept`; needs at least 4 positive samples.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        let samples: Vec<(f64, f64)> = pairs
            .iter()
            .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
            .map(|(x, y)| (x.ln(), y.ln()))
            .collect();
        Self::from_logs(samples)
    }

    pub fn from_logs(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.len() < 4 {
            return Err(Error::InsufficientSamples { needed: 4, got: samples.len() });
        }
        let (slope, intercept, _) = crate::space::least_squares(&samples);
        let my = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
        let ss_tot: f64 = samples.iter().map(|s| (s.1 - my).powi(2)).sum();
        let ss_res: f64 = samples.iter().map(|s| (s.1 - slope * s.0 - intercept).powi(2)).sum();
        let r_squared = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { 1.0 };
        Ok(Self { samples, slope, intercept, r_squared })
    }
}

/// Generator for ensemble member `member` of a run seeded with `seed`.
pub fn member_rng(seed: u64, member: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member);
    rng
}

/// `E_{p,theta}(u,u) / E_T(u,u)` over an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// `max(ratio_max, 1 / ratio_min)`.
    pub constant: f64,
    /// `(besov, e_t)` per retained member.
    pub samples: Vec<(f64, f64)>,
    pub skipped: usize,
}

impl EquivalenceReport {
    pub fn report(&self, domain: &ExtensionDomain, seed: u64) -> Result<Report> {
        let mut t = Table::new(&["besov", "e_t", "ratio"]);
        for &(b, e) in &self.samples {
            t.push(vec![b, e, b / e]);
        }
        let verdict = Verdict::from_bool(self.constant.is_finite());
        Report::new("equivalence", params_json(domain), seed, verdict, self, t)
    }
}

pub(crate) fn params_json(domain: &ExtensionDomain) -> Value {
    let p = domain.params();
    serde_json::json!({
        "p": p.p(),
        "theta": p.theta(),
        "beta": p.beta(),
        "points": domain.boundary_len(),
        "layers": domain.layer_count(),
    })
}

/// Both energies for `u` on `Z`; `None` for constant `u`.
pub fn energy_pair(domain: &ExtensionDomain, st: &Stencil, u: &[f64], cfg: &SolverConfig) -> Result<Option<(f64, f64)>> {
    let (lo, hi) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !(hi > lo) {
        return Ok(None);
    }
    let params = domain.params();
    let besov = besov_form(domain.space(), u, u, params)?.value;
    let et = solve::dirichlet_with_stencil(domain, st, params.p(), u, cfg)?.energy;
    Ok(Some((besov, et)))
}

/// Draws `ensemble_size` functions uniform in `[-1, 1]` per point.
pub fn check_energy_equivalence(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    ensemble_size: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<EquivalenceReport> {
    use rand::Rng;
    let st = Stencil::build(domain, structure)?;
    let n = domain.boundary_len();
    let pairs: Vec<Option<(f64, f64)>> = (0..ensemble_size as u64)
        .into_par_iter()
        .map(|m| {
            let mut rng = member_rng(seed, m);
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            energy_pair(domain, &st, &u, cfg)
        })
        .collect::<Result<_>>()?;
    let skipped = pairs.iter().filter(|x| x.is_none()).count();
    let samples: Vec<(f64, f64)> = pairs.into_iter().flatten().collect();
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let ratios = samples.iter().map(|(b, e)| b / e);
    let ratio_min = ratios.clone().fold(f64::INFINITY, f64::min);
    let ratio_max = ratios.fold(0.0, f64::max);
    Ok(EquivalenceReport { ratio_min, ratio_max, constant: ratio_max.max(1.0 / ratio_min), samples, skipped })
}

/// Exponents `(kappa, tau)` in `||grad(u_f - u_g)|| <= C ||f-g||^tau (||f|| + ||g||)^kappa`.
pub fn stability_exponents(p: f64) -> (f64, f64) {
    if p >= 2.0 {
        (0.0, 1.0 / (p - 1.0))
    } else {
        ((2.0 - p) / (p - 1.0), 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub p: f64,
    pub kappa: f64,
    pub tau: f64,
    /// `(t, ||f - g_t||_{nu_J}, ||grad(u_f - u_{g_t})||_{L^p(mu)}, (||f|| + ||g||)^kappa)`.
    pub samples: Vec<(f64, f64, f64, f64)>,
    /// Fit over all but the two largest `t`, distances divided by the `kappa` factor.
    pub fit: ExponentFit,
    pub verdict: Verdict,
}

impl StabilityReport {
    pub fn report(&self, domain: &ExtensionDomain, seed: u64) -> Result<Report> {
        let mut t = Table::new(&["t", "data_distance", "gradient_distance", "kappa_factor"]);
        for s in &self.samples {
            t.push(vec![s.0, s.1, s.2, s.3]);
        }
        Report::new("stability", params_json(domain), seed, self.verdict, self, t)
    }
}

/// Solves with `g_t = f + t h` for each `t`; PASS when the fitted slope is at
/// least `tau - 0.1` with `r^2 >= 0.95`.
pub fn measure_stability_exponent(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    f: &BoundaryData,
    h: &[f64],
    ts: &[f64],
    cfg: &SolverConfig,
) -> Result<StabilityReport> {
    let params = domain.params();
    let p = params.p();
    let z = domain.space();
    if h.len() != z.len() {
        return Err(Error::DimensionMismatch { what: "perturbation", expected: z.len(), got: h.len() });
    }
    let st = Stencil::build(domain, structure)?;
    let (kappa, tau) = stability_exponents(p);
    let uf = solve::neumann_with_stencil(domain, &st, p, &f.f, cfg)?.u;
    let mut ts: Vec<f64> = ts.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    let samples: Vec<(f64, f64, f64, f64)> = ts
        .par_iter()
        .map(|&t| {
            let g: Vec<f64> = f.f.iter().zip(h).map(|(a, b)| a + t * b).collect();
            let ug = solve::neumann_with_stencil(domain, &st, p, &g, cfg)?.u;
            let diff: Vec<f64> = uf.iter().zip(&ug).map(|(a, b)| a - b).collect();
            let grad = st.energy(&diff, p).powf(1.0 / p);
            let dh: Vec<f64> = f.f.iter().zip(&g).map(|(a, b)| a - b).collect();
            let data = norm_nu_j(z, &dh, f.x0, params);
            let size = f.norm_j + norm_nu_j(z, &g, f.x0, params);
            Ok((t, data, grad, size.powf(kappa)))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<(f64, f64)> = samples.iter().skip(2).map(|s| (s.1, s.2 / s.3)).collect();
    let fit = ExponentFit::from_pairs(&kept)?;
    let verdict = Verdict::from_bool(fit.slope >= tau - 0.1 && fit.r_squared >= 0.95);
    Ok(StabilityReport { p, kappa, tau, samples, fit, verdict })
}

/// Oracle comparison for `p = 2`: relative L2 error of `frac_apply` against
/// `d_theta lambda^theta` on `n_samples` random functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub theta: f64,
    pub errors: Vec<f64>,
    pub max_error: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
}

impl OracleReport {
    pub fn report(&self, domain: &ExtensionDomain, seed: u64) -> Result<Report> {
        let mut t = Table::new(&["member", "relative_error"]);
        for (i, e) in self.errors.iter().enumerate() {
            t.push(vec![i as f64, *e]);
        }
        Report::new("oracle-p2", params_json(domain), seed, self.verdict, self, t)
    }
}

pub fn relative_l2(a: &[f64], b: &[f64], nu: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).zip(nu).map(|((x, y), m)| (x - y).powi(2) * m).sum();
    let den: f64 = b.iter().zip(nu).map(|(y, m)| y * y * m).sum();
    (num / den).sqrt()
}

pub fn oracle_comparison(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    n_samples: usize,
    seed: u64,
    tolerance: f64,
    cfg: &SolverConfig,
) -> Result<OracleReport> {
    use rand::Rng;
    let oracle = SpectralOracle::new(domain)?;
    let theta = domain.params().theta();
    let c = extension_constant(theta);
    let nu = domain.space().nu();
    let n = domain.boundary_len();
    let errors: Vec<f64> = (0..n_samples as u64)
        .into_par_iter()
        .map(|m| {
            let mut rng = member_rng(seed, m);
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = crate::nonlocal::frac_apply(domain, structure, &u, cfg)?.f;
            let want: Vec<f64> = oracle.forward(&u, theta).into_iter().map(|x| c * x).collect();
            Ok(relative_l2(&got, &want, nu))
        })
        .collect::<Result<_>>()?;
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(OracleReport { theta, verdict: Verdict::from_bool(max_error <= tolerance), errors, max_error, tolerance })
}
