//! Besov energies on `Z`, the weight `J`, trace and extension, the form `E_T`
//! and the fractional p-Laplacian built from the Neumann problem.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cheeger::{DifferentialStructure, Stencil};
use crate::error::{Error, Result};
use crate::extension::{ExtensionDomain, FractionalParams, NodeRole};
use crate::solve::{self, BoundaryData, SolverConfig};
use crate::space::MetricMeasureSpace;

/// `J(x, x0) = d(x, x0)^{p' theta} nu(B(x0, d(x, x0)))^{p'/p}` with open balls.
pub fn weight_j(z: &MetricMeasureSpace, x0: usize, params: FractionalParams) -> Vec<f64> {
    let q = params.p_conj();
    let row = z.row(x0);
    let (order, cum) = sorted_masses(z, x0);
    let mut out = vec![0.0; z.len()];
    let mut k = 0;
    let mut below = 0.0;
    // walk points by distance; `below` is the mass strictly closer than the current one
    for (pos, &x) in order.iter().enumerate() {
        let d = row[x];
        while k < pos && row[order[k]] < d {
            below = cum[k];
            k += 1;
        }
        out[x] = if d == 0.0 { 0.0 } else { d.powf(q * params.theta()) * below.powf(q / params.p()) };
    }
    out
}

/// Points ordered by distance from `y` and the running sum of their masses.
fn sorted_masses(z: &MetricMeasureSpace, y: usize) -> (Vec<usize>, Vec<f64>) {
    let row = z.row(y);
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    let mut acc = 0.0;
    let cum = order
        .iter()
        .map(|&i| {
            acc += z.nu()[i];
            acc
        })
        .collect();
    (order, cum)
}

/// `(sum |f|^{p'} J nu)^{1/p'}`.
pub fn norm_nu_j(z: &MetricMeasureSpace, f: &[f64], x0: usize, params: FractionalParams) -> f64 {
    let q = params.p_conj();
    let j = weight_j(z, x0, params);
    f.iter()
        .zip(&j)
        .zip(z.nu())
        .map(|((v, w), m)| v.abs().powf(q) * w * m)
        .sum::<f64>()
        .powf(1.0 / q)
}

/// A function on `Z` with its Besov seminorm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BesovFunction {
    pub values: Vec<f64>,
    pub p: f64,
    pub theta: f64,
    pub seminorm: f64,
}

impl BesovFunction {
    pub fn new(z: &MetricMeasureSpace, values: Vec<f64>, params: FractionalParams) -> Result<Self> {
        let e = besov_form(z, &values, &values, params)?.value;
        Ok(Self { seminorm: e.max(0.0).powf(1.0 / params.p()), values, p: params.p(), theta: params.theta() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormKind {
    Besov,
    #[serde(rename = "e-t")]
    ET,
}

/// A form evaluation, logged with fingerprints of its two arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormValue {
    pub kind: FormKind,
    pub p: f64,
    pub theta: f64,
    pub value: f64,
    pub fingerprints: [String; 2],
}

/// 64-bit FNV-1a over the little-endian bit patterns.
pub fn fingerprint(values: &[f64]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    format!("{h:016x}")
}

fn check_len(what: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch { what, expected, got: v.len() });
    }
    Ok(())
}

/// `sum_{x != y} |u(y)-u(x)|^{p-2} (u(y)-u(x)) (v(y)-v(x)) nu(x) nu(y) / (d^{p theta} nu(B(y, d)))`.
pub fn besov_form(z: &MetricMeasureSpace, u: &[f64], v: &[f64], params: FractionalParams) -> Result<FormValue> {
    let n = z.len();
    check_len("u", n, u)?;
    check_len("v", n, v)?;
    let (p, s) = (params.p(), params.p() * params.theta());
    let nu = z.nu();
    // one partial sum per y, reduced in index order
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|y| {
            let row = z.row(y);
            let (order, cum) = sorted_masses(z, y);
            let mut acc = 0.0;
            let mut k = 0;
            let mut below = 0.0;
            for (pos, &x) in order.iter().enumerate() {
                let d = row[x];
                while k < pos && row[order[k]] < d {
                    below = cum[k];
                    k += 1;
                }
                if x == y || d == 0.0 {
                    continue;
                }
                let du = u[y] - u[x];
                let dv = v[y] - v[x];
                if du == 0.0 || dv == 0.0 {
                    continue;
                }
                acc += du.abs().powf(p - 2.0) * du * dv * nu[x] * nu[y] / (d.powf(s) * below);
            }
            acc
        })
        .collect();
    Ok(FormValue {
        kind: FormKind::Besov,
        p,
        theta: params.theta(),
        value: rows.iter().sum(),
        fingerprints: [fingerprint(u), fingerprint(v)],
    })
}

/// Restriction to the points of `Z`.
pub fn trace(domain: &ExtensionDomain, u: &[f64]) -> Result<Vec<f64>> {
    check_len("domain function", domain.node_count(), u)?;
    Ok(u[..domain.boundary_len()].to_vec())
}

/// Layer-scale averaging: the value at height `y` above `x` is the
/// `nu`-average of `v` over the closed ball `B(x, y)`.
pub fn extend(domain: &ExtensionDomain, v: &[f64]) -> Result<Vec<f64>> {
    let nz = domain.boundary_len();
    check_len("boundary function", nz, v)?;
    let z = domain.space();
    let nu = z.nu();
    let out = (0..domain.node_count())
        .into_par_iter()
        .map(|id| {
            if id < nz {
                return v[id];
            }
            let (c, y) = (domain.column_of(id), domain.y_of(id));
            let row = z.row(c);
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..nz {
                if row[i] <= y {
                    num += nu[i] * v[i];
                    den += nu[i];
                }
            }
            num / den
        })
        .collect();
    Ok(out)
}

/// `E_T(u, v)`: the p-harmonic extension of `u` paired with `extend(v)`.
pub fn et_form(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    u: &[f64],
    v: &[f64],
    cfg: &SolverConfig,
) -> Result<FormValue> {
    let st = Stencil::build(domain, structure)?;
    let p = domain.params().p();
    let uhat = solve::dirichlet_with_stencil(domain, &st, p, u, cfg)?.u;
    let w = extend(domain, v)?;
    Ok(FormValue {
        kind: FormKind::ET,
        p,
        theta: domain.params().theta(),
        value: st.el_form(&uhat, &w, p),
        fingerprints: [fingerprint(u), fingerprint(v)],
    })
}

/// The fractional p-Laplacian of `u` together with its p-harmonic extension.
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub data: BoundaryData,
    pub extension: Vec<f64>,
}

/// `f_i = el_form(u_hat, e_i) / nu_i`, the Neumann residual of the p-harmonic extension.
pub fn frac_apply(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    u: &[f64],
    cfg: &SolverConfig,
) -> Result<BoundaryData> {
    Ok(frac_apply_full(domain, structure, u, cfg)?.data)
}

pub fn frac_apply_full(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    u: &[f64],
    cfg: &SolverConfig,
) -> Result<Applied> {
    let st = Stencil::build(domain, structure)?;
    let params = domain.params();
    let uhat = solve::dirichlet_with_stencil(domain, &st, params.p(), u, cfg)?.u;
    let el = st.el_vector(&uhat, params.p());
    let z = domain.space();
    let f = (0..domain.boundary_len()).map(|i| el[i] / z.nu()[i]).collect();
    Ok(Applied { data: BoundaryData::new(z, params, f, Some(domain.base_point()))?, extension: uhat })
}

/// Flux estimate with the collar cutoff `eta(x) = min(1, d(x, boundary) / eps)`:
/// `f_i = el_form(u_hat, (1 - eta) chi_{column i}) / nu_i`. `eps` defaults to
/// the first layer height.
pub fn flux_estimate(domain: &ExtensionDomain, structure: &DifferentialStructure, uhat: &[f64], eps: Option<f64>) -> Result<Vec<f64>> {
    check_len("domain function", domain.node_count(), uhat)?;
    let eps = match eps {
        Some(e) if e > 0.0 => e,
        Some(e) => return Err(Error::InvalidParams(format!("collar width must be positive, got {e}"))),
        None => domain.layer_heights().get(1).copied().unwrap_or(1.0),
    };
    let st = Stencil::build(domain, structure)?;
    let p = domain.params().p();
    let d = domain.boundary_distances();
    let nz = domain.boundary_len();
    // el_form is linear in the test function, so one pass over el_vector suffices
    let el = st.el_vector(uhat, p);
    let mut f = vec![0.0; nz];
    for id in 0..domain.node_count() {
        let cut = 1.0 - (d[id] / eps).min(1.0);
        if cut > 0.0 {
            f[domain.column_of(id)] += cut * el[id];
        }
    }
    for (fi, m) in f.iter_mut().zip(domain.space().nu()) {
        *fi /= m;
    }
    Ok(f)
}

/// Trace of the Neumann solution, normalized to zero `nu`-mean on `B_0`.
pub fn frac_solve(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    f: &BoundaryData,
    cfg: &SolverConfig,
) -> Result<BesovFunction> {
    let params = domain.params();
    let sol = solve::solve_neumann(domain, structure, params.p(), f, cfg)?;
    let mut u = trace(domain, &sol.u)?;
    let z = domain.space();
    let ball = domain.reference_ball();
    let mass: f64 = ball.iter().map(|&i| z.nu()[i]).sum();
    let mean = ball.iter().map(|&i| z.nu()[i] * u[i]).sum::<f64>() / mass;
    u.iter_mut().for_each(|x| *x -= mean);
    BesovFunction::new(z, u, params)
}

/// The pairing bound `|int f v dnu| <= C ||f||_{nu_J} ||v||_{theta,p}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualBound {
    pub pairing: f64,
    pub norm_j: f64,
    pub seminorm: f64,
    /// `pairing / (norm_j * seminorm)`, zero when the pairing vanishes.
    pub constant: f64,
}

pub fn dual_bound_check(z: &MetricMeasureSpace, f: &BoundaryData, v: &[f64], params: FractionalParams) -> Result<DualBound> {
    check_len("f", z.len(), &f.f)?;
    check_len("v", z.len(), v)?;
    let nu = z.nu();
    let scale: f64 = f.f.iter().zip(nu).map(|(a, m)| a.abs() * m).sum();
    let mean: f64 = f.f.iter().zip(nu).map(|(a, m)| a * m).sum();
    if mean.abs() > 1e-10 * scale {
        return Err(Error::NonzeroMean { mean, tol: 1e-10 * scale });
    }
    let pairing = f.f.iter().zip(v).zip(nu).map(|((a, b), m)| a * b * m).sum::<f64>().abs();
    let seminorm = BesovFunction::new(z, v.to_vec(), params)?.seminorm;
    let norm_j = norm_nu_j(z, &f.f, f.x0, params);
    let denom = norm_j * seminorm;
    let constant = if pairing <= 1e-14 * scale.max(1.0) * v.iter().fold(0.0f64, |m, x| m.max(x.abs())) {
        0.0
    } else if denom == 0.0 {
        f64::INFINITY
    } else {
        pairing / denom
    };
    Ok(DualBound { pairing, norm_j, seminorm, constant })
}

/// Active boundary indicator, used by callers that need to skip free points.
pub fn active_points(domain: &ExtensionDomain) -> Vec<bool> {
    (0..domain.boundary_len()).map(|i| domain.role(i) == NodeRole::Boundary).collect()
}
