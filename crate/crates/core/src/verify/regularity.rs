use serde::{Deserialize, Serialize};

use super::{params_json, ExponentFit, Report, Table, Verdict};
use crate::cheeger::DifferentialStructure;
use crate::error::{Error, Result};
use crate::extension::{ExtensionDomain, FractionalParams};
use crate::nonlocal::trace;
use crate::solve::{self, BoundaryData, SolverConfig};
use crate::space::{estimate_mass_exponents, MetricMeasureSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnackBall {
    pub center: usize,
    pub radius: f64,
    pub sup: f64,
    pub inf: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnackReport {
    pub window: Vec<usize>,
    pub balls: Vec<HarnackBall>,
    pub max_ratio: f64,
    /// Constant added to make the solution positive.
    pub shift: f64,
}

impl HarnackReport {
    pub fn report(&self, domain: &ExtensionDomain, seed: u64) -> Result<Report> {
        let mut t = Table::new(&["center", "radius", "sup", "inf", "ratio"]);
        for b in &self.balls {
            t.push(vec![b.center as f64, b.radius, b.sup, b.inf, b.ratio]);
        }
        let verdict = Verdict::from_bool(self.max_ratio.is_finite());
        Report::new("harnack", params_json(domain), seed, verdict, self, t)
    }
}

/// `sup / inf` of `u` on the balls `B((x, 0), r)` of the closed domain, for
/// centres `x` in the window whose doubled ball meets the boundary only
/// inside the window.
pub fn harnack_ratios(domain: &ExtensionDomain, u: &[f64], window: &[usize], radii: &[f64]) -> Result<HarnackReport> {
    if u.len() != domain.node_count() {
        return Err(Error::DimensionMismatch { what: "solution", expected: domain.node_count(), got: u.len() });
    }
    let z = domain.space();
    let mut in_w = vec![false; z.len()];
    for &i in window {
        if i >= z.len() {
            return Err(Error::InvalidParams(format!("window point {i} out of range")));
        }
        in_w[i] = true;
    }
    let mut window: Vec<usize> = window.to_vec();
    window.sort_unstable();
    window.dedup();
    let mut balls = Vec::new();
    for &x in &window {
        let dist = domain.distances_from_point(x);
        for &r in radii {
            let admissible = (0..z.len()).all(|i| in_w[i] || z.dist(x, i) >= 2.0 * r);
            if !admissible {
                continue;
            }
            let (mut sup, mut inf) = (f64::NEG_INFINITY, f64::INFINITY);
            for (id, &d) in dist.iter().enumerate() {
                if d < r {
                    sup = sup.max(u[id]);
                    inf = inf.min(u[id]);
                }
            }
            let ratio = if sup == inf {
                1.0
            } else if inf <= 0.0 {
                return Err(Error::ZeroInfimum { center: x, radius: r });
            } else {
                sup / inf
            };
            balls.push(HarnackBall { center: x, radius: r, sup, inf, ratio });
        }
    }
    if balls.is_empty() {
        return Err(Error::NoAdmissibleBalls);
    }
    let max_ratio = balls.iter().map(|b| b.ratio).fold(0.0, f64::max);
    Ok(HarnackReport { window, balls, max_ratio, shift: 0.0 })
}

/// Solves the Neumann problem for data vanishing on `window` and tests the
/// solution, shifted by `-min + 1e-9 range` when it dips below zero.
pub fn check_harnack(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    f: &BoundaryData,
    window: &[usize],
    radii: &[f64],
    cfg: &SolverConfig,
) -> Result<HarnackReport> {
    if let Some(&i) = window.iter().find(|&&i| f.f.get(i).is_some_and(|v| *v != 0.0)) {
        return Err(Error::InvalidParams(format!("data must vanish on the window, nonzero at point {i}")));
    }
    let mut u = solve::solve_neumann(domain, structure, domain.params().p(), f, cfg)?.u;
    let (lo, hi) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let shift = if lo < 0.0 { -lo + 1e-9 * (hi - lo) } else { 0.0 };
    u.iter_mut().for_each(|x| *x += shift);
    let mut rep = harnack_ratios(domain, &u, window, radii)?;
    rep.shift = shift;
    Ok(rep)
}

/// Lower mass exponent of `nu x y^a dy` from that of `nu`.
pub fn product_mass_exponent(q_nu: f64, a: f64) -> f64 {
    q_nu + 1.0 + a.max(0.0)
}

/// `q0 = (Q_mu - Theta) / (p - Theta)`.
pub fn holder_threshold(params: FractionalParams, q_mu: f64) -> f64 {
    let t = params.theta_cap();
    (q_mu - t) / (params.p() - t)
}

/// Slope of `log osc(delta)` against `log delta`, where `osc(delta)` is the
/// largest `|u(x) - u(y)|` over points of `B(xi, r0)` with `d(x, y) <= delta`
/// and `delta` runs over `r0 2^{-j}` down to the smallest distance.
pub fn oscillation_fit(z: &MetricMeasureSpace, u: &[f64], xi: usize, r0: f64) -> Result<(ExponentFit, Vec<(f64, f64)>)> {
    let pts = z.ball(xi, r0);
    let dmin = z.min_positive_distance().unwrap_or(1.0);
    let mut curve = Vec::new();
    let mut delta = r0;
    while delta >= dmin * (1.0 - 1e-12) {
        let mut osc = 0.0f64;
        for (a, &x) in pts.iter().enumerate() {
            for &y in &pts[a + 1..] {
                if z.dist(x, y) <= delta * (1.0 + 1e-12) {
                    osc = osc.max((u[x] - u[y]).abs());
                }
            }
        }
        curve.push((delta, osc));
        delta *= 0.5;
    }
    Ok((ExponentFit::from_pairs(&curve)?, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub q: f64,
    pub q0: f64,
    pub q_mu: f64,
    /// `(1 - Theta/p)(1 - q0/q)`.
    pub predicted: f64,
    pub below_threshold: bool,
    /// The measured exponent sits below the explicit branch, so the interior
    /// exponent may be the binding one.
    pub beta0_may_bind: bool,
    pub curve: Vec<(f64, f64)>,
    pub fit: ExponentFit,
    pub verdict: Verdict,
}

impl HolderReport {
    pub fn report(&self, domain: &ExtensionDomain, seed: u64) -> Result<Report> {
        let mut t = Table::new(&["delta", "oscillation"]);
        for &(d, o) in &self.curve {
            t.push(vec![d, o]);
        }
        Report::new("holder", params_json(domain), seed, self.verdict, self, t)
    }
}

/// Boundary oscillation exponent of the Neumann solution near `xi`. `q` is the
/// integrability of the data (`f64::INFINITY` for bounded data); `q_mu`
/// defaults to the product exponent estimated from `Z`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_holder(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    f: &BoundaryData,
    q: f64,
    xi: usize,
    r0: f64,
    q_mu: Option<f64>,
    cfg: &SolverConfig,
) -> Result<HolderReport> {
    let params = domain.params();
    let q_mu = match q_mu {
        Some(v) => v,
        None => product_mass_exponent(estimate_mass_exponents(domain.space(), 8)?.q_mu, params.weight_exponent()),
    };
    let q0 = holder_threshold(params, q_mu);
    let below_threshold = !(q > q0);
    let predicted = (1.0 - params.theta_cap() / params.p()) * (1.0 - if q.is_infinite() { 0.0 } else { q0 / q });
    let sol = solve::solve_neumann(domain, structure, params.p(), f, cfg)?;
    let u = trace(domain, &sol.u)?;
    let (fit, curve) = oscillation_fit(domain.space(), &u, xi, r0)?;
    let verdict = if below_threshold {
        Verdict::Informational
    } else {
        Verdict::from_bool(fit.slope >= predicted - 0.1)
    };
    Ok(HolderReport {
        q,
        q0,
        q_mu,
        predicted,
        below_threshold,
        beta0_may_bind: !below_threshold && fit.slope < predicted,
        curve,
        fit,
        verdict,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MakalainenReport {
    pub p: f64,
    pub alpha: f64,
    /// `(r, M(r))` for radii with at least one admissible ball.
    pub scales: Vec<(f64, f64)>,
    pub m_max: f64,
    /// `max_r M(r) / M(r_max)`.
    pub growth: f64,
    pub verdict: Verdict,
}

impl MakalainenReport {
    pub fn report(&self, domain: &ExtensionDomain, seed: u64) -> Result<Report> {
        let mut t = Table::new(&["radius", "m"]);
        for &(r, m) in &self.scales {
            t.push(vec![r, m]);
        }
        Report::new("makalainen", params_json(domain), seed, self.verdict, self, t)
    }
}

/// `M(r) = max nu_f(B(x, r)) r^{p - alpha (p-1)} / mu(B(x, r))` over centres
/// `x` in `region` with `B(x, 4r)` inside the region. PASS when no smaller
/// scale exceeds the largest tested one by more than a factor 2.
pub fn makalainen_check(
    domain: &ExtensionDomain,
    f: &[f64],
    region: &[usize],
    alpha: f64,
    radii: &[f64],
) -> Result<MakalainenReport> {
    let z = domain.space();
    if f.len() != z.len() {
        return Err(Error::DimensionMismatch { what: "data", expected: z.len(), got: f.len() });
    }
    let mut in_d = vec![false; z.len()];
    for &i in region {
        if i >= z.len() {
            return Err(Error::InvalidParams(format!("region point {i} out of range")));
        }
        if f[i] < 0.0 {
            return Err(Error::NegativeData { index: i });
        }
        in_d[i] = true;
    }
    let p = domain.params().p();
    let expo = p - alpha * (p - 1.0);
    let mu = domain.mu();
    let nu = z.nu();
    let mut radii = radii.to_vec();
    radii.sort_by(f64::total_cmp);
    let mut scales = Vec::new();
    let dists: Vec<(usize, Vec<f64>)> = region.iter().map(|&x| (x, domain.distances_from_point(x))).collect();
    for &r in &radii {
        let mut best: Option<f64> = None;
        for (x, dist) in &dists {
            if !(0..z.len()).all(|i| in_d[i] || z.dist(*x, i) >= 4.0 * r) {
                continue;
            }
            let nu_f: f64 = (0..z.len()).filter(|&i| z.dist(*x, i) < r).map(|i| f[i] * nu[i]).sum();
            let mass: f64 = dist.iter().zip(mu).filter(|(d, _)| **d < r).map(|(_, m)| m).sum();
            if mass <= 0.0 {
                continue;
            }
            let v = nu_f * r.powf(expo) / mass;
            best = Some(best.map_or(v, |b| b.max(v)));
        }
        if let Some(m) = best {
            scales.push((r, m));
        }
    }
    let Some(&(_, m_ref)) = scales.last() else {
        return Err(Error::NoAdmissibleBalls);
    };
    let m_max = scales.iter().map(|s| s.1).fold(0.0, f64::max);
    let growth = if m_max == 0.0 {
        1.0
    } else if m_ref == 0.0 {
        f64::INFINITY
    } else {
        m_max / m_ref
    };
    Ok(MakalainenReport { p, alpha, scales, m_max, growth, verdict: Verdict::from_bool(growth <= 2.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::{build_product_extension, LayerSpec};
    use crate::space::MetricMeasureSpace;
    use approx::assert_relative_eq;

    const ISO: DifferentialStructure = DifferentialStructure::Isotropic;

    fn domain(z: &MetricMeasureSpace, p: f64, theta: f64, layers: usize) -> ExtensionDomain {
        build_product_extension(z, FractionalParams::new(p, theta).unwrap(), &LayerSpec::with_layers(layers)).unwrap()
    }

    #[test]
    fn zero_data_gives_unit_ratios() {
        let dom = domain(&MetricMeasureSpace::cycle(32), 2.0, 0.5, 6);
        let f = BoundaryData::zeros(dom.space(), dom.params());
        let w: Vec<usize> = (0..8).collect();
        let rep = check_harnack(&dom, &ISO, &f, &w, &[1.0, 2.0], &SolverConfig::default()).unwrap();
        assert!(rep.balls.iter().all(|b| b.ratio == 1.0));
        assert_eq!(rep.shift, 0.0);
    }

    #[test]
    fn harnack_scale_invariance_and_errors() {
        let z = MetricMeasureSpace::cycle(32);
        let dom = domain(&z, 2.0, 0.5, 8);
        let mut f = vec![0.0; 32];
        for i in 12..16 {
            f[i] = 1.0;
        }
        for i in 20..24 {
            f[i] = -1.0;
        }
        let data = BoundaryData::new(&z, dom.params(), f, None).unwrap();
        let w: Vec<usize> = (26..32).chain(0..8).collect();
        let radii = [1.0, 2.0];
        let rep = check_harnack(&dom, &ISO, &data, &w, &radii, &SolverConfig::default()).unwrap();
        assert!(rep.max_ratio.is_finite() && rep.max_ratio >= 1.0);
        assert!(rep.shift > 0.0);
        // admissibility: doubled balls stay in the window
        for b in &rep.balls {
            assert!((0..32).all(|i| w.contains(&i) || z.dist(b.center, i) >= 2.0 * b.radius));
        }
        let sol = solve::solve_neumann(&dom, &ISO, 2.0, &data, &SolverConfig::default()).unwrap();
        let u: Vec<f64> = sol.u.iter().map(|x| 3.0 * (x + rep.shift)).collect();
        let scaled = harnack_ratios(&dom, &u, &w, &radii).unwrap();
        assert_relative_eq!(scaled.max_ratio, rep.max_ratio, max_relative = 1e-9);
        // a function touching zero inside a tested ball
        let mut touching = vec![1.0; dom.node_count()];
        touching[0] = 0.0;
        assert!(matches!(harnack_ratios(&dom, &touching, &w, &radii), Err(Error::ZeroInfimum { .. })));
        assert!(matches!(harnack_ratios(&dom, &touching, &[12], &[8.0]), Err(Error::NoAdmissibleBalls)));
        let bad = BoundaryData::new(&z, dom.params(), (0..32).map(|i| if i == 0 { 1.0 } else if i == 16 { -1.0 } else { 0.0 }).collect(), None).unwrap();
        assert!(matches!(check_harnack(&dom, &ISO, &bad, &w, &radii, &SolverConfig::default()), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn affine_oscillation_has_unit_exponent() {
        let z = MetricMeasureSpace::path(64);
        let u: Vec<f64> = (0..64).map(|i| 0.25 * i as f64 - 3.0).collect();
        let (fit, curve) = oscillation_fit(&z, &u, 32, 16.0).unwrap();
        assert_relative_eq!(fit.slope, 1.0, max_relative = 1e-12);
        assert_eq!(curve.len(), 5);
    }

    #[test]
    fn threshold_formula() {
        let params = FractionalParams::new(2.0, 0.5).unwrap();
        assert_relative_eq!(holder_threshold(params, 2.0), 1.0);
        assert_relative_eq!(product_mass_exponent(1.0, 0.0), 2.0);
    }

    #[test]
    fn holder_below_threshold_is_informational() {
        let z = MetricMeasureSpace::cycle(64);
        let dom = domain(&z, 2.0, 0.5, 12);
        let f: Vec<f64> = (0..64).map(|i| if i < 32 { 1.0 } else { -1.0 }).collect();
        let data = BoundaryData::new(&z, dom.params(), f, None).unwrap();
        let rep = estimate_holder(&dom, &ISO, &data, 0.5, 0, 16.0, Some(2.0), &SolverConfig::default()).unwrap();
        assert!(rep.below_threshold);
        assert_eq!(rep.verdict, Verdict::Informational);
        let bounded = estimate_holder(&dom, &ISO, &data, f64::INFINITY, 0, 16.0, Some(2.0), &SolverConfig::default()).unwrap();
        assert_relative_eq!(bounded.predicted, 0.5);
        assert_eq!(bounded.verdict, Verdict::Pass, "{:?}", bounded.fit);
    }

    #[test]
    fn makalainen_cases() {
        let z = MetricMeasureSpace::cycle(64);
        let dom = domain(&z, 2.0, 0.5, 12);
        let all: Vec<usize> = (0..64).collect();
        let radii = [1.0, 2.0, 4.0, 8.0];
        let zero = makalainen_check(&dom, &[0.0; 64], &all, 0.5, &radii).unwrap();
        assert_eq!(zero.m_max, 0.0);
        assert_eq!(zero.verdict, Verdict::Pass);
        let flat = makalainen_check(&dom, &[1.0; 64], &all, 0.5, &radii).unwrap();
        assert_eq!(flat.verdict, Verdict::Pass);
        let mut atom = vec![0.0; 64];
        atom[10] = 1.0;
        let rep = makalainen_check(&dom, &atom, &all, 0.5, &radii).unwrap();
        assert_eq!(rep.verdict, Verdict::Fail, "{:?}", rep.scales);
        let mut neg = vec![1.0; 64];
        neg[3] = -1.0;
        assert!(matches!(makalainen_check(&dom, &neg, &all, 0.5, &radii), Err(Error::NegativeData { index: 3 })));
    }
}
