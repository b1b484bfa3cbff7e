//! Finite metric measure spaces standing in for the boundary `Z`, together with
//! ball-counting diagnostics (doubling constant, lower mass exponent,
//! codimension) and kernel-induced length metrics.
//!
//! Balls are open throughout: `B(x, r) = { y : d(x, y) < r }`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extension::ExtensionDomain;
use crate::graph;

/// Relative tolerance for the triangle inequality, scaled by the diameter.
pub const TRIANGLE_RTOL: f64 = 1e-9;

/// A validated finite metric measure space.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMeasureSpace {
    n: usize,
    dist: Vec<f64>,
    nu: Vec<f64>,
    coords: Option<Vec<Vec<f64>>>,
    labels: Option<Vec<String>>,
}

/// Metric used to derive distances from coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordMetric {
    Euclidean,
    L1,
    /// Shortest paths on the graph joining points at the minimal Euclidean spacing.
    GraphGeodesic,
}

/// Validates raw metric data and builds a space.
pub fn validate_space(
    dist: Vec<Vec<f64>>,
    nu: Vec<f64>,
    coords: Option<Vec<Vec<f64>>>,
) -> Result<MetricMeasureSpace> {
    let n = dist.len();
    for row in &dist {
        if row.len() != n {
            return Err(Error::DimensionMismatch {
                what: "distance matrix row",
                expected: n,
                got: row.len(),
            });
        }
    }
    let flat: Vec<f64> = dist.into_iter().flatten().collect();
    MetricMeasureSpace::from_flat(n, flat, nu, coords)
}

impl MetricMeasureSpace {
    fn from_flat(
        n: usize,
        dist: Vec<f64>,
        nu: Vec<f64>,
        coords: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if nu.len() != n {
            return Err(Error::DimensionMismatch {
                what: "measure vector",
                expected: n,
                got: nu.len(),
            });
        }
        if let Some(c) = &coords {
            if c.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "coordinate list",
                    expected: n,
                    got: c.len(),
                });
            }
        }
        for (i, &m) in nu.iter().enumerate() {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::NonpositiveMeasure { index: i, value: m });
            }
        }
        let symmetric_tol = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        for i in 0..n {
            let dii = dist[i * n + i];
            if dii != 0.0 {
                return Err(Error::InvalidDistance { i, j: i, value: dii });
            }
            for j in (i + 1)..n {
                let (a, b) = (dist[i * n + j], dist[j * n + i]);
                if !symmetric_tol(a, b) {
                    return Err(Error::NonSymmetric { i, j });
                }
                if !(a > 0.0 && a.is_finite()) {
                    return Err(Error::InvalidDistance { i, j, value: a });
                }
            }
        }
        let diameter = dist.iter().cloned().fold(0.0, f64::max);
        let tol = TRIANGLE_RTOL * diameter;
        // Deterministic: report the violation with the smallest i.
        let violation = (0..n).into_par_iter().find_map_first(|i| {
            for j in 0..n {
                let dij = dist[i * n + j];
                for k in 0..n {
                    let lhs = dist[i * n + k];
                    let rhs = dij + dist[j * n + k];
                    if lhs > rhs + tol {
                        return Some(Error::TriangleViolation { i, j, k, lhs, rhs });
                    }
                }
            }
            None
        });
        if let Some(e) = violation {
            return Err(e);
        }
        Ok(Self {
            n,
            dist,
            nu,
            coords,
            labels: None,
        })
    }

    /// Builds a space from coordinates and a named metric.
    pub fn from_coords(coords: Vec<Vec<f64>>, metric: CoordMetric, nu: Vec<f64>) -> Result<Self> {
        let n = coords.len();
        let pair = |a: &[f64], b: &[f64], m: CoordMetric| -> f64 {
            match m {
                CoordMetric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
                _ => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            }
        };
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                dist[i * n + j] = pair(&coords[i], &coords[j], metric);
            }
        }
        if metric == CoordMetric::GraphGeodesic {
            let h = dist.iter().cloned().filter(|&d| d > 0.0).fold(f64::INFINITY, f64::min);
            let mut edges = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if dist[i * n + j] <= h * (1.0 + 1e-6) {
                        edges.push((i, j, dist[i * n + j]));
                    }
                }
            }
            dist = graph::all_pairs_distances(n, &edges);
        }
        Self::from_flat(n, dist, nu, Some(coords))
    }

    /// Cycle graph on `n` points with geodesic distance and unit measure.
    pub fn cycle(n: usize) -> Self {
        Self::scaled_cycle(n, 1.0)
    }

    /// Cycle of `n` points with spacing `h` and measure `h` per point.
    pub fn scaled_cycle(n: usize, h: f64) -> Self {
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let k = i.abs_diff(j);
                dist[i * n + j] = h * k.min(n - k) as f64;
            }
        }
        Self {
            n,
            dist,
            nu: vec![h; n],
            coords: None,
            labels: None,
        }
    }

    /// Path of `n` points with unit spacing, unit measure and 1D coordinates `0..n`.
    pub fn path(n: usize) -> Self {
        let coords: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                dist[i * n + j] = i.abs_diff(j) as f64;
            }
        }
        Self {
            n,
            dist,
            nu: vec![1.0; n],
            coords: Some(coords),
            labels: None,
        }
    }

    /// `nx * ny` lattice with the l1 metric and unit measure (row-major in x).
    pub fn grid(nx: usize, ny: usize) -> Self {
        let coords: Vec<Vec<f64>> = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| vec![i as f64, j as f64]))
            .collect();
        let n = coords.len();
        let mut dist = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                dist[a * n + b] =
                    (coords[a][0] - coords[b][0]).abs() + (coords[a][1] - coords[b][1]).abs();
            }
        }
        Self {
            n,
            dist,
            nu: vec![1.0; n],
            coords: Some(coords),
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::DimensionMismatch {
                what: "label list",
                expected: self.n,
                got: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Same space with every measure weight multiplied by `c > 0`.
    pub fn with_scaled_measure(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.nu.iter_mut().for_each(|m| *m *= c);
        out
    }

    /// Same metric with a new measure.
    pub fn with_measure(&self, nu: Vec<f64>) -> Result<Self> {
        Self::from_flat(self.n, self.dist.clone(), nu, self.coords.clone())
            .map(|s| Self { labels: self.labels.clone(), ..s })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.dist[i * self.n..(i + 1) * self.n]
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn coords(&self) -> Option<&[Vec<f64>]> {
        self.coords.as_deref()
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn diameter(&self) -> f64 {
        self.dist.iter().cloned().fold(0.0, f64::max)
    }

    pub fn min_positive_distance(&self) -> Option<f64> {
        let m = self
            .dist
            .iter()
            .cloned()
            .filter(|&d| d > 0.0)
            .fold(f64::INFINITY, f64::min);
        m.is_finite().then_some(m)
    }

    pub fn total_mass(&self) -> f64 {
        self.nu.iter().sum()
    }

    /// `nu(B(x, r))` for the open ball.
    pub fn ball_mass(&self, x: usize, r: f64) -> f64 {
        self.row(x)
            .iter()
            .zip(&self.nu)
            .filter(|(&d, _)| d < r)
            .map(|(_, &m)| m)
            .sum()
    }

    /// Indices of the open ball `B(x, r)`.
    pub fn ball(&self, x: usize, r: f64) -> Vec<usize> {
        (0..self.n).filter(|&y| self.dist(x, y) < r).collect()
    }

    /// Pairs `i < j` with `d(i, j) <= radius` (up to a relative 1e-9 slack).
    pub fn threshold_pairs(&self, radius: f64) -> Vec<(usize, usize)> {
        let cut = radius * (1.0 + 1e-9);
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.dist(i, j) <= cut {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Symmetrized k-nearest-neighbour pairs `i < j` (ties broken by index).
    pub fn knn_pairs(&self, k: usize) -> Vec<(usize, usize)> {
        let mut set = std::collections::BTreeSet::new();
        for i in 0..self.n {
            let mut others: Vec<usize> = (0..self.n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| self.dist(i, a).total_cmp(&self.dist(i, b)).then(a.cmp(&b)));
            for &j in others.iter().take(k) {
                set.insert((i.min(j), i.max(j)));
            }
        }
        set.into_iter().collect()
    }

    /// Point maximizing `nu(B(x, 1))`, smallest index on ties.
    pub fn unit_ball_maximizer(&self) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for x in 0..self.n {
            let m = self.ball_mass(x, 1.0);
            if m > best.1 {
                best = (x, m);
            }
        }
        best.0
    }

    pub fn to_doc(&self) -> SpaceDoc {
        SpaceDoc {
            points: self.labels.clone(),
            dist: Some((0..self.n).map(|i| self.row(i).to_vec()).collect()),
            coords: self.coords.clone(),
            metric: None,
            nu: self.nu.clone(),
        }
    }
}

/// JSON document for space ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceDoc {
    #[serde(default)]
    pub points: Option<Vec<String>>,
    #[serde(default)]
    pub dist: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub coords: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub metric: Option<CoordMetric>,
    pub nu: Vec<f64>,
}

impl SpaceDoc {
    pub fn into_space(self) -> Result<MetricMeasureSpace> {
        let space = match (self.dist, self.coords) {
            (Some(d), coords) => validate_space(d, self.nu, coords)?,
            (None, Some(c)) => MetricMeasureSpace::from_coords(
                c,
                self.metric.unwrap_or(CoordMetric::Euclidean),
                self.nu,
            )?,
            (None, None) => {
                return Err(Error::Parse(
                    "space document needs either \"dist\" or \"coords\"".into(),
                ))
            }
        };
        match self.points {
            Some(labels) => space.with_labels(labels),
            None => Ok(space),
        }
    }
}

/// Ball-growth diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublingProfile {
    /// Largest observed `nu(B(x, 2r)) / nu(B(x, r))`.
    pub c_d: f64,
    /// Lower mass bound exponent fitted on worst-case nested ball ratios.
    pub q_mu: f64,
    pub scales: Vec<f64>,
    pub fit_residual: f64,
}

/// Fits the lower mass exponent and doubling constant over dyadic radii
/// `diam * 2^-m`, `m = 1..=scale_count`, keeping radii above the minimal spacing.
pub fn estimate_mass_exponents(space: &MetricMeasureSpace, scale_count: usize) -> Result<DoublingProfile> {
    let n = space.len();
    let diam = space.diameter();
    let dmin = match space.min_positive_distance() {
        Some(d) => d,
        None => return Err(Error::InsufficientScales { found: 0 }),
    };
    // Radii at or above the diameter only see the whole space.
    let scales: Vec<f64> = (1..=scale_count)
        .map(|m| diam * 0.5f64.powi(m as i32))
        .filter(|&r| r > dmin * (1.0 + 1e-12))
        .collect();
    if scales.len() < 3 {
        return Err(Error::InsufficientScales { found: scales.len() });
    }
    // mass[s][x] = nu(B(x, scales[s]))
    let mass: Vec<Vec<f64>> = scales
        .iter()
        .map(|&r| (0..n).into_par_iter().map(|x| space.ball_mass(x, r)).collect())
        .collect();

    let mut samples = Vec::new();
    for (big, &rr) in scales.iter().enumerate() {
        for (small, &r) in scales.iter().enumerate().skip(big + 1) {
            let worst = (0..n)
                .into_par_iter()
                .map(|x| {
                    let inner = space
                        .row(x)
                        .iter()
                        .enumerate()
                        .filter(|(_, &d)| d < rr)
                        .map(|(y, _)| mass[small][y])
                        .fold(f64::INFINITY, f64::min);
                    inner / mass[big][x]
                })
                .reduce(|| f64::INFINITY, f64::min);
            samples.push(((r / rr).ln(), worst.ln()));
        }
    }
    let (slope, _intercept, residual) = least_squares(&samples);
    if !(slope > 0.0) {
        return Err(Error::InsufficientScales { found: scales.len() });
    }

    let c_d = scales
        .iter()
        .map(|&r| {
            (0..n)
                .into_par_iter()
                .map(|x| space.ball_mass(x, 2.0 * r) / space.ball_mass(x, r))
                .reduce(|| 1.0, f64::max)
        })
        .fold(1.0, f64::max);

    Ok(DoublingProfile {
        c_d,
        q_mu: slope,
        scales,
        fit_residual: residual,
    })
}

/// Ordinary least squares: returns (slope, intercept, rms residual).
pub(crate) fn least_squares(samples: &[(f64, f64)]) -> (f64, f64, f64) {
    let m = samples.len() as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / m;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / m;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mx).powi(2)).sum();
    let sxy: f64 = samples.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rss: f64 = samples
        .iter()
        .map(|s| (s.1 - intercept - slope * s.0).powi(2))
        .sum();
    (slope, intercept, (rss / m).sqrt())
}

/// Extremes of `nu(B(xi, r)) * r^Theta / mu(B(xi, r) ∩ Omega)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodimReport {
    pub theta_cap: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// `max(ratio_max, 1 / ratio_min)`.
    pub c: f64,
    pub radii: Vec<f64>,
    pub samples: usize,
}

/// Samples every boundary point and the given radii (default: dyadic multiples of
/// the minimal spacing below `2 diam`).
pub fn check_codimension(
    z: &MetricMeasureSpace,
    domain: &ExtensionDomain,
    theta_cap: f64,
    p: f64,
    radii: Option<&[f64]>,
) -> Result<CodimReport> {
    if !(theta_cap > 0.0 && theta_cap < p) {
        return Err(Error::InvalidTheta { theta_cap, p });
    }
    if domain.interior_count() == 0 {
        return Err(Error::EmptyInterior);
    }
    if domain.space().len() != z.len() {
        return Err(Error::DimensionMismatch {
            what: "boundary points",
            expected: z.len(),
            got: domain.space().len(),
        });
    }
    let diam = z.diameter();
    let radii: Vec<f64> = match radii {
        Some(r) => r.to_vec(),
        None => {
            let h = z.min_positive_distance().unwrap_or(1.0);
            std::iter::successors(Some(h), |r| Some(r * 2.0))
                .take_while(|&r| r < 2.0 * diam)
                .collect()
        }
    };
    let mu = domain.mu();
    let per_point: Vec<(f64, f64, usize)> = (0..z.len())
        .into_par_iter()
        .map(|xi| {
            let d = domain.distances_from_point(xi);
            let mut lo = f64::INFINITY;
            let mut hi = 0.0f64;
            let mut count = 0;
            for &r in &radii {
                let mass: f64 = d
                    .iter()
                    .zip(mu)
                    .filter(|(&dd, _)| dd < r)
                    .map(|(_, &m)| m)
                    .sum();
                if mass <= 0.0 {
                    continue;
                }
                let ratio = z.ball_mass(xi, r) * r.powf(theta_cap) / mass;
                lo = lo.min(ratio);
                hi = hi.max(ratio);
                count += 1;
            }
            (lo, hi, count)
        })
        .collect();
    let ratio_min = per_point.iter().map(|t| t.0).fold(f64::INFINITY, f64::min);
    let ratio_max = per_point.iter().map(|t| t.1).fold(0.0, f64::max);
    let samples = per_point.iter().map(|t| t.2).sum();
    if samples == 0 {
        return Err(Error::EmptyInterior);
    }
    Ok(CodimReport {
        theta_cap,
        ratio_min,
        ratio_max,
        c: ratio_max.max(1.0 / ratio_min),
        radii,
        samples,
    })
}

/// Length metric induced by a symmetric kernel, with the realized comparability constant.
#[derive(Debug, Clone)]
pub struct KernelMetric {
    pub space: MetricMeasureSpace,
    /// Smallest `lambda` with `lambda^-1 K <= d_K^-(n + p theta) <= lambda K`.
    pub lambda: f64,
}

/// Builds `d_K` as the shortest-path metric over edge lengths `K(x,y)^(-1/(n + p theta))`
/// on the complete graph, or on its symmetrized `knn`-nearest sparsification.
pub fn kernel_metric(
    coords: Vec<Vec<f64>>,
    kernel: &[Vec<f64>],
    n_dim: usize,
    p: f64,
    theta: f64,
    knn: Option<usize>,
) -> Result<KernelMetric> {
    let n = kernel.len();
    if coords.len() != n {
        return Err(Error::DimensionMismatch {
            what: "coordinate list",
            expected: n,
            got: coords.len(),
        });
    }
    for row in kernel {
        if row.len() != n {
            return Err(Error::DimensionMismatch {
                what: "kernel row",
                expected: n,
                got: row.len(),
            });
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (kernel[i][j], kernel[j][i]);
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
                return Err(Error::AsymmetricKernel { i, j });
            }
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::NonpositiveKernel { i, j, value: a });
            }
        }
    }
    let s = n_dim as f64 + p * theta;
    let quasi = |i: usize, j: usize| kernel[i][j].powf(-1.0 / s);
    let mut edges = Vec::new();
    match knn {
        None => {
            for i in 0..n {
                for j in (i + 1)..n {
                    edges.push((i, j, quasi(i, j)));
                }
            }
        }
        Some(k) => {
            let mut set = std::collections::BTreeSet::new();
            for i in 0..n {
                let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                others.sort_by(|&a, &b| quasi(i, a).total_cmp(&quasi(i, b)).then(a.cmp(&b)));
                for &j in others.iter().take(k) {
                    set.insert((i.min(j), i.max(j)));
                }
            }
            edges.extend(set.into_iter().map(|(i, j)| (i, j, quasi(i, j))));
        }
    }
    let dist = graph::all_pairs_distances(n, &edges);
    if let Some(pos) = dist.iter().position(|d| !d.is_finite()) {
        return Err(Error::InvalidDistance {
            i: pos / n,
            j: pos % n,
            value: f64::INFINITY,
        });
    }
    let mut lambda = 1.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let r = dist[i * n + j].powf(-s) / kernel[i][j];
            lambda = lambda.max(r).max(1.0 / r);
        }
    }
    let space = MetricMeasureSpace::from_flat(n, dist, vec![1.0; n], Some(coords))?;
    Ok(KernelMetric { space, lambda })
}
