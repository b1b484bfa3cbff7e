//! Discrete differential structures on extension domains: gradients, p-energies
//! and the Euler-Lagrange pairing.
//!
//! Every energy here has the form `sum_k c_k |B_k u|^p` with a small sparse
//! matrix `B_k` per term (a [`Stencil`]). Isotropic structures use one term per
//! edge, `w |u_i - u_j|^p`. Anisotropic structures live on axis-aligned
//! coordinate grids and use one term per node and quadrant: the one-sided
//! coordinate gradient towards that quadrant, mapped by `A(x)`, weighted by
//! `mu(x) / 2^d`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extension::ExtensionDomain;

/// Choice of gradient on the domain.
#[derive(Debug, Clone, PartialEq)]
pub enum DifferentialStructure {
    Isotropic,
    Anisotropic(Anisotropy),
}

/// Per-node SPD matrices on a coordinate grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Anisotropy {
    dim: usize,
    matrices: Vec<DMatrix<f64>>,
    lambda_min: f64,
    lambda_max: f64,
}

impl Anisotropy {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self, node: usize) -> &DMatrix<f64> {
        &self.matrices[node]
    }

    /// Extreme eigenvalues over all nodes.
    pub fn eigen_bounds(&self) -> (f64, f64) {
        (self.lambda_min, self.lambda_max)
    }
}

/// JSON form of an anisotropic structure: one `d x d` matrix per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyDoc {
    pub matrices: Vec<Vec<Vec<f64>>>,
}

impl DifferentialStructure {
    /// Validates one symmetric positive-definite matrix per node; the matrix
    /// size must match the node coordinate dimension.
    pub fn anisotropic(domain: &ExtensionDomain, matrices: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let coords = domain.coords().ok_or(Error::MissingCoords)?;
        let dim = coords.first().map(|c| c.len()).unwrap_or(0);
        if matrices.len() != domain.node_count() {
            return Err(Error::DimensionMismatch {
                what: "anisotropy matrices",
                expected: domain.node_count(),
                got: matrices.len(),
            });
        }
        let mut lambda_min = f64::INFINITY;
        let mut lambda_max = 0.0f64;
        let mut out = Vec::with_capacity(matrices.len());
        for (node, rows) in matrices.into_iter().enumerate() {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::DimensionMismatch { what: "anisotropy matrix size", expected: dim, got: rows.len() });
            }
            let m = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
            let scale = m.amax().max(1.0);
            if (&m - m.transpose()).amax() > 1e-12 * scale {
                return Err(Error::NotSpd { node });
            }
            let eig = SymmetricEigen::new(m.clone()).eigenvalues;
            let (lo, hi) = (eig.min(), eig.max());
            if !(lo > 0.0 && hi.is_finite()) {
                return Err(Error::NotSpd { node });
            }
            lambda_min = lambda_min.min(lo);
            lambda_max = lambda_max.max(hi);
            out.push(m);
        }
        Ok(Self::Anisotropic(Anisotropy { dim, matrices: out, lambda_min, lambda_max }))
    }

    pub fn from_doc(domain: &ExtensionDomain, doc: AnisotropyDoc) -> Result<Self> {
        Self::anisotropic(domain, doc.matrices)
    }

    /// `diag(factor, 1, ..., 1)` where the first coordinate is `<= 0`, identity elsewhere.
    pub fn axis_switch(domain: &ExtensionDomain, factor: f64) -> Result<Self> {
        let coords = domain.coords().ok_or(Error::MissingCoords)?;
        let mats = coords
            .iter()
            .map(|c| {
                let d = c.len();
                (0..d)
                    .map(|i| {
                        (0..d)
                            .map(|j| match (i == j, i == 0 && c[0] <= 0.0) {
                                (false, _) => 0.0,
                                (true, true) => factor,
                                (true, false) => 1.0,
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self::anisotropic(domain, mats)
    }

    /// Identity matrices on every node.
    pub fn identity_grid(domain: &ExtensionDomain) -> Result<Self> {
        Self::axis_switch(domain, 1.0)
    }
}

/// Sparse per-term operators of a p-energy `sum_k c_k |B_k u|^p`.
#[derive(Debug, Clone)]
pub struct Stencil {
    nodes: usize,
    coef: Vec<f64>,
    /// `term_rows[k]..term_rows[k+1]` are the rows of term `k`.
    term_rows: Vec<usize>,
    /// `row_entries[r]..row_entries[r+1]` are the entries of row `r`.
    row_entries: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Stencil {
    fn new(nodes: usize) -> Self {
        Self {
            nodes,
            coef: Vec::new(),
            term_rows: vec![0],
            row_entries: vec![0],
            idx: Vec::new(),
            val: Vec::new(),
        }
    }

    fn push_term(&mut self, coef: f64, rows: &[Vec<(usize, f64)>]) {
        self.coef.push(coef);
        for row in rows {
            for &(i, v) in row {
                self.idx.push(i);
                self.val.push(v);
            }
            self.row_entries.push(self.idx.len());
        }
        self.term_rows.push(self.row_entries.len() - 1);
    }

    /// Builds the stencil of a structure on a domain.
    pub fn build(domain: &ExtensionDomain, structure: &DifferentialStructure) -> Result<Self> {
        match structure {
            DifferentialStructure::Isotropic => Ok(Self::isotropic(domain)),
            DifferentialStructure::Anisotropic(an) => Self::anisotropic(domain, an),
        }
    }

    fn isotropic(domain: &ExtensionDomain) -> Self {
        let mut s = Self::new(domain.node_count());
        for e in domain.edges() {
            s.push_term(e.w, &[vec![(e.i, 1.0), (e.j, -1.0)]]);
        }
        s
    }

    fn anisotropic(domain: &ExtensionDomain, an: &Anisotropy) -> Result<Self> {
        let coords = domain.coords().ok_or(Error::MissingCoords)?;
        let n = domain.node_count();
        let d = an.dim;
        let axes = axis_neighbors(domain, coords, d);
        let mut s = Self::new(n);
        let weight = 1.0 / (1usize << d) as f64;
        for i in 0..n {
            let mu = domain.mu()[i];
            if mu == 0.0 {
                continue;
            }
            for sigma in 0..(1usize << d) {
                let g = quadrant_rows(i, sigma, &axes[i], coords, d);
                let a = &an.matrices[i];
                let rows: Vec<Vec<(usize, f64)>> = (0..d)
                    .map(|r| {
                        let mut row: Vec<(usize, f64)> = Vec::new();
                        for (l, gl) in g.iter().enumerate() {
                            let c = a[(r, l)];
                            if c == 0.0 {
                                continue;
                            }
                            for &(node, v) in gl {
                                match row.iter_mut().find(|(k, _)| *k == node) {
                                    Some(entry) => entry.1 += c * v,
                                    None => row.push((node, c * v)),
                                }
                            }
                        }
                        row
                    })
                    .collect();
                s.push_term(mu * weight, &rows);
            }
        }
        Ok(s)
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn term_count(&self) -> usize {
        self.coef.len()
    }

    pub fn coef(&self, k: usize) -> f64 {
        self.coef[k]
    }

    /// Row ranges of term `k`.
    pub fn rows(&self, k: usize) -> impl Iterator<Item = (&[usize], &[f64])> + '_ {
        (self.term_rows[k]..self.term_rows[k + 1]).map(move |r| {
            let (a, b) = (self.row_entries[r], self.row_entries[r + 1]);
            (&self.idx[a..b], &self.val[a..b])
        })
    }

    /// Distinct node indices touched by term `k`, in first-seen order.
    pub fn support(&self, k: usize) -> Vec<usize> {
        let (a, b) = (
            self.row_entries[self.term_rows[k]],
            self.row_entries[self.term_rows[k + 1]],
        );
        let mut out: Vec<usize> = Vec::new();
        for &i in &self.idx[a..b] {
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }

    /// `B_k u`, written into `z` (cleared first).
    pub fn apply(&self, k: usize, u: &[f64], z: &mut Vec<f64>) {
        z.clear();
        for (idx, val) in self.rows(k) {
            z.push(idx.iter().zip(val).map(|(&i, &v)| v * u[i]).sum());
        }
    }

    /// Adds `scale * B_k^T z` into `out`.
    pub fn apply_transpose_add(&self, k: usize, z: &[f64], scale: f64, out: &mut [f64]) {
        for ((idx, val), &zr) in self.rows(k).zip(z) {
            for (&i, &v) in idx.iter().zip(val) {
                out[i] += scale * v * zr;
            }
        }
    }

    pub fn energy(&self, u: &[f64], p: f64) -> f64 {
        let mut z = Vec::new();
        let mut total = 0.0;
        for k in 0..self.term_count() {
            self.apply(k, u, &mut z);
            let n2: f64 = z.iter().map(|x| x * x).sum();
            if n2 > 0.0 {
                total += self.coef[k] * n2.powf(0.5 * p);
            }
        }
        total
    }

    /// `sum_k c_k |z_k|^{p-2} z_k . (B_k v)` with `z_k = B_k u`, extended by 0 at `z_k = 0`.
    pub fn el_form(&self, u: &[f64], v: &[f64], p: f64) -> f64 {
        let mut zu = Vec::new();
        let mut zv = Vec::new();
        let mut total = 0.0;
        for k in 0..self.term_count() {
            self.apply(k, u, &mut zu);
            let n2: f64 = zu.iter().map(|x| x * x).sum();
            if n2 == 0.0 {
                continue;
            }
            self.apply(k, v, &mut zv);
            let dot: f64 = zu.iter().zip(&zv).map(|(a, b)| a * b).sum();
            total += self.coef[k] * n2.powf(0.5 * p - 1.0) * dot;
        }
        total
    }

    /// `sum_k c_k |z_k|^{p-2} B_k^T z_k`: the pairing against every indicator
    /// at once, so entry `i` equals `el_form(u, e_i)`.
    pub fn el_vector(&self, u: &[f64], p: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes];
        let mut z = Vec::new();
        for k in 0..self.term_count() {
            self.apply(k, u, &mut z);
            let n2: f64 = z.iter().map(|x| x * x).sum();
            if n2 == 0.0 {
                continue;
            }
            self.apply_transpose_add(k, &z, self.coef[k] * n2.powf(0.5 * p - 1.0), &mut out);
        }
        out
    }
}

/// Neighbours along each axis: `(minus, plus)` per axis.
type AxisNeighbors = Vec<(Option<usize>, Option<usize>)>;

fn axis_neighbors(domain: &ExtensionDomain, coords: &[Vec<f64>], d: usize) -> Vec<AxisNeighbors> {
    let n = domain.node_count();
    let mut out = vec![vec![(None, None); d]; n];
    for i in 0..n {
        for &e in domain.incident(i) {
            let edge = domain.edges()[e];
            let j = if edge.i == i { edge.j } else { edge.i };
            let diff: Vec<f64> = (0..d).map(|k| coords[j][k] - coords[i][k]).collect();
            let scale = diff.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let moving: Vec<usize> = (0..d).filter(|&k| diff[k].abs() > 1e-12 * scale).collect();
            if moving.len() != 1 {
                continue;
            }
            let k = moving[0];
            let slot = &mut out[i][k];
            // keep the closest neighbour on each side
            let pick = |cur: Option<usize>| match cur {
                Some(c) if (coords[c][k] - coords[i][k]).abs() <= diff[k].abs() => Some(c),
                _ => Some(j),
            };
            if diff[k] > 0.0 {
                slot.1 = pick(slot.1);
            } else {
                slot.0 = pick(slot.0);
            }
        }
    }
    out
}

/// One-sided difference rows for quadrant `sigma` (bit `k` set = plus side on axis `k`).
fn quadrant_rows(
    i: usize,
    sigma: usize,
    axes: &AxisNeighbors,
    coords: &[Vec<f64>],
    d: usize,
) -> Vec<Vec<(usize, f64)>> {
    (0..d)
        .map(|k| {
            let (minus, plus) = axes[k];
            let nb = if sigma & (1 << k) != 0 { plus.or(minus) } else { minus.or(plus) };
            match nb {
                Some(j) => {
                    let h = coords[j][k] - coords[i][k];
                    vec![(j, 1.0 / h), (i, -1.0 / h)]
                }
                None => Vec::new(),
            }
        })
        .collect()
}

/// Gradient data of a node function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientField {
    /// `(u_j - u_i) / len` per edge, oriented as stored (isotropic only).
    pub edge_quotients: Vec<f64>,
    /// Quadrant-averaged `A(x) grad u` per node (anisotropic only).
    pub node_vectors: Option<Vec<Vec<f64>>>,
    /// `|grad u|` per node.
    pub magnitude: Vec<f64>,
}

/// Gradient field of `u`. Isotropic magnitudes split each edge term between
/// its endpoints (wholly to the interior end of an edge reaching layer 0), so
/// `sum_i mu_i |grad u(i)|^p` equals the edge energy; nodes with zero measure
/// report the conductance-weighted mean quotient instead.
pub fn gradient(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    u: &[f64],
    p: f64,
) -> Result<GradientField> {
    check_len(domain, u)?;
    match structure {
        DifferentialStructure::Isotropic => {
            let edges = domain.edges();
            let edge_quotients = edges.iter().map(|e| (u[e.j] - u[e.i]) / e.len).collect();
            let magnitude = (0..domain.node_count())
                .map(|i| {
                    let mu = domain.mu()[i];
                    if mu > 0.0 {
                        let s: f64 = domain
                            .incident(i)
                            .iter()
                            .map(|&k| {
                                let e = &edges[k];
                                let j = if e.i == i { e.j } else { e.i };
                                let share = if domain.mu()[j] == 0.0 { 1.0 } else { 0.5 };
                                share * e.w * (u[e.i] - u[e.j]).abs().powf(p)
                            })
                            .sum();
                        (s / mu).powf(1.0 / p)
                    } else {
                        let (num, den) = domain.incident(i).iter().fold((0.0, 0.0), |(a, b), &k| {
                            let e = &edges[k];
                            (a + e.w * (u[e.i] - u[e.j]).abs().powf(p), b + e.w * e.len.powf(p))
                        });
                        if den > 0.0 { (num / den).powf(1.0 / p) } else { 0.0 }
                    }
                })
                .collect();
            Ok(GradientField { edge_quotients, node_vectors: None, magnitude })
        }
        DifferentialStructure::Anisotropic(an) => {
            let coords = domain.coords().ok_or(Error::MissingCoords)?;
            let d = an.dim;
            let axes = axis_neighbors(domain, coords, d);
            let q = (1usize << d) as f64;
            let mut vectors = Vec::with_capacity(domain.node_count());
            let mut magnitude = Vec::with_capacity(domain.node_count());
            for i in 0..domain.node_count() {
                let mut mean = vec![0.0; d];
                let mut pw = 0.0;
                for sigma in 0..(1usize << d) {
                    let g: Vec<f64> = quadrant_rows(i, sigma, &axes[i], coords, d)
                        .iter()
                        .map(|row| row.iter().map(|&(j, v)| v * u[j]).sum())
                        .collect();
                    let ag = &an.matrices[i] * nalgebra::DVector::from_vec(g);
                    pw += ag.norm().powf(p);
                    mean.iter_mut().zip(ag.iter()).for_each(|(m, x)| *m += x / q);
                }
                vectors.push(mean);
                magnitude.push((pw / q).powf(1.0 / p));
            }
            Ok(GradientField { edge_quotients: Vec::new(), node_vectors: Some(vectors), magnitude })
        }
    }
}

fn check_len(domain: &ExtensionDomain, u: &[f64]) -> Result<()> {
    if u.len() != domain.node_count() {
        return Err(Error::DimensionMismatch { what: "node function", expected: domain.node_count(), got: u.len() });
    }
    Ok(())
}

/// Discrete p-energy `sum_k c_k |B_k u|^p`.
pub fn p_energy(domain: &ExtensionDomain, structure: &DifferentialStructure, u: &[f64], p: f64) -> Result<f64> {
    check_len(domain, u)?;
    Ok(Stencil::build(domain, structure)?.energy(u, p))
}

/// Euler-Lagrange pairing `int |grad u|^{p-2} grad u . grad v dmu`.
pub fn el_form(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    u: &[f64],
    v: &[f64],
    p: f64,
) -> Result<f64> {
    check_len(domain, u)?;
    check_len(domain, v)?;
    Ok(Stencil::build(domain, structure)?.el_form(u, v, p))
}

/// Gradient of `u -> p_energy(u)` with respect to node values.
pub fn p_energy_gradient(
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    u: &[f64],
    p: f64,
) -> Result<Vec<f64>> {
    check_len(domain, u)?;
    let mut g = Stencil::build(domain, structure)?.el_vector(u, p);
    g.iter_mut().for_each(|x| *x *= p);
    Ok(g)
}

/// `(|z|^{p-2} z - |w|^{p-2} w) . (z - w)`.
pub fn monotonicity_gap(z: &[f64], w: &[f64], p: f64) -> f64 {
    let pow = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 { 0.0 } else { n.powf(p - 2.0) }
    };
    let (sz, sw) = (pow(z), pow(w));
    z.iter().zip(w).map(|(a, b)| (sz * a - sw * b) * (a - b)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::{build_product_extension, FractionalParams, LayerSpec};
    use crate::space::MetricMeasureSpace;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_domain(n: usize, layers: usize, p: f64) -> ExtensionDomain {
        let z = MetricMeasureSpace::cycle(n);
        build_product_extension(&z, FractionalParams::new(p, 0.3).unwrap(), &LayerSpec::with_layers(layers)).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn grid_domain(nx: usize, layers: usize) -> ExtensionDomain {
        let coords: Vec<Vec<f64>> = (0..nx).map(|i| vec![i as f64 - (nx / 2) as f64]).collect();
        let z = MetricMeasureSpace::from_coords(coords, crate::space::CoordMetric::Euclidean, vec![1.0; nx]).unwrap();
        let spec = LayerSpec { layers, y_min: Some(0.25), y_max: Some(nx as f64), ..LayerSpec::default() };
        build_product_extension(&z, FractionalParams::new(2.0, 0.5).unwrap(), &spec).unwrap()
    }

    #[test]
    fn constant_has_zero_gradient_and_energy() {
        let dom = small_domain(8, 3, 2.0);
        let u = vec![3.5; dom.node_count()];
        let g = gradient(&dom, &DifferentialStructure::Isotropic, &u, 2.0).unwrap();
        assert!(g.magnitude.iter().all(|&m| m == 0.0));
        assert!(g.edge_quotients.iter().all(|&m| m == 0.0));
        assert_eq!(p_energy(&dom, &DifferentialStructure::Isotropic, &u, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn linear_function_on_a_vertical_chain() {
        let z = MetricMeasureSpace::from_coords(vec![vec![0.0]], crate::space::CoordMetric::Euclidean, vec![1.0]).unwrap();
        for &p in &[1.5, 2.0, 3.0] {
            // a = 0, where the half-edge split reproduces the cell measure exactly
            let theta = 1.0 / p;
            let spec = LayerSpec { layers: 6, y_min: Some(0.5), y_max: Some(16.0), ..LayerSpec::default() };
            let dom = build_product_extension(&z, FractionalParams::new(p, theta).unwrap(), &spec).unwrap();
            let s = -1.7;
            let u: Vec<f64> = (0..dom.node_count()).map(|i| s * dom.y_of(i)).collect();
            let g = gradient(&dom, &DifferentialStructure::Isotropic, &u, p).unwrap();
            for m in g.magnitude {
                assert_relative_eq!(m, s.abs(), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn node_magnitudes_integrate_to_energy() {
        let dom = small_domain(10, 4, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_vec(&mut rng, dom.node_count());
        let g = gradient(&dom, &DifferentialStructure::Isotropic, &u, 3.0).unwrap();
        let lhs: f64 = g.magnitude.iter().zip(dom.mu()).map(|(m, mu)| mu * m.powi(3)).sum();
        let e = p_energy(&dom, &DifferentialStructure::Isotropic, &u, 3.0).unwrap();
        assert_relative_eq!(lhs, e, max_relative = 1e-12);
    }

    #[test]
    fn single_edge_energy() {
        let z = MetricMeasureSpace::from_coords(vec![vec![0.0]], crate::space::CoordMetric::Euclidean, vec![1.0]).unwrap();
        // a = 0 requires p theta = 1; p = 3 with theta = 1/3
        let spec = LayerSpec { layers: 2, y_min: Some(1.0), y_max: Some(2.0), ..LayerSpec::default() };
        let dom = build_product_extension(&z, FractionalParams::new(3.0, 1.0 / 3.0).unwrap(), &spec).unwrap();
        // first vertical edge: len 1, w = nu * (1 - 0) / 1 = 1
        let e = dom.edges()[0];
        assert_eq!((e.len, e.w), (1.0, 1.0));
        let u = vec![0.0, 1.0, 1.0];
        assert_relative_eq!(p_energy(&dom, &DifferentialStructure::Isotropic, &u, 3.0).unwrap(), 1.0);
    }

    #[test]
    fn el_form_on_a_path_by_hand() {
        // Four-node horizontal path inside layer 1 of a 4-point path boundary.
        let z = MetricMeasureSpace::path(4);
        let spec = LayerSpec { layers: 2, y_min: Some(1.0), y_max: Some(3.0), ..LayerSpec::default() };
        let dom = build_product_extension(&z, FractionalParams::new(2.0, 0.5).unwrap(), &spec).unwrap();
        let mut u = vec![0.0; dom.node_count()];
        let mut v = vec![0.0; dom.node_count()];
        for id in 4..8 {
            u[id] = (id - 4) as f64;
            v[id] = [0.0, 0.0, 1.0, 1.0][id - 4];
        }
        let mut expected = 0.0;
        for e in dom.edges() {
            expected += e.w * (u[e.i] - u[e.j]) * (v[e.i] - v[e.j]);
        }
        let iso = DifferentialStructure::Isotropic;
        assert_relative_eq!(el_form(&dom, &iso, &u, &v, 2.0).unwrap(), expected, max_relative = 1e-14);
        assert_relative_eq!(
            el_form(&dom, &iso, &u, &v, 2.0).unwrap(),
            el_form(&dom, &iso, &v, &u, 2.0).unwrap(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn el_form_identities() {
        let iso = DifferentialStructure::Isotropic;
        let dom = small_domain(12, 4, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &p in &[1.5, 2.0, 3.0] {
            let u = random_vec(&mut rng, dom.node_count());
            let ones = vec![1.0; dom.node_count()];
            let e = p_energy(&dom, &iso, &u, p).unwrap();
            assert_relative_eq!(el_form(&dom, &iso, &u, &u, p).unwrap(), e, max_relative = 1e-12);
            assert!(el_form(&dom, &iso, &u, &ones, p).unwrap().abs() <= 1e-12 * e);
        }
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let iso = DifferentialStructure::Isotropic;
        let z = MetricMeasureSpace::cycle(5);
        let dom = build_product_extension(&z, FractionalParams::new(2.0, 0.4).unwrap(), &LayerSpec::with_layers(3)).unwrap();
        assert_eq!(dom.node_count(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &p in &[1.5, 2.0, 3.0, 4.0] {
            let u = random_vec(&mut rng, 20);
            let g = p_energy_gradient(&dom, &iso, &u, p).unwrap();
            let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for i in 0..20 {
                let h = 1e-6;
                let (mut a, mut b) = (u.clone(), u.clone());
                a[i] += h;
                b[i] -= h;
                let fd = (p_energy(&dom, &iso, &a, p).unwrap() - p_energy(&dom, &iso, &b, p).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * scale, "p={p} i={i} fd={fd} g={}", g[i]);
            }
        }
    }

    #[test]
    fn axis_switch_doubles_x_derivative() {
        let dom = grid_domain(9, 4);
        let st = DifferentialStructure::axis_switch(&dom, 2.0).unwrap();
        let u: Vec<f64> = dom.coords().unwrap().iter().map(|c| c[0]).collect();
        let g = gradient(&dom, &st, &u, 2.0).unwrap();
        // layer 0 carries no horizontal edges, so only interior nodes see d/dx
        for (i, c) in dom.coords().unwrap().iter().enumerate().skip(dom.boundary_len()) {
            let expect = if c[0] <= 0.0 { 2.0 } else { 1.0 };
            assert_relative_eq!(g.magnitude[i], expect, max_relative = 1e-12);
        }
    }

    /// Direct loop over grid nodes and quadrants of one-sided differences.
    fn grid_energy_oracle(dom: &ExtensionDomain, u: &[f64], p: f64) -> f64 {
        let c = dom.coords().unwrap();
        let mut total = 0.0;
        for i in 0..dom.node_count() {
            if dom.mu()[i] == 0.0 {
                continue;
            }
            let find = |axis: usize, sign: f64| -> Option<usize> {
                (0..dom.node_count())
                    .filter(|&j| {
                        let other = 1 - axis;
                        j != i
                            && c[j][other] == c[i][other]
                            && (c[j][axis] - c[i][axis]) * sign > 0.0
                            && dom.incident(i).iter().any(|&k| {
                                let e = dom.edges()[k];
                                e.i == j || e.j == j
                            })
                    })
                    .min_by(|&a, &b| (c[a][axis] - c[i][axis]).abs().total_cmp(&(c[b][axis] - c[i][axis]).abs()))
            };
            let mut acc = 0.0;
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    let mut g2 = 0.0;
                    for (axis, s) in [(0usize, sx), (1usize, sy)] {
                        if let Some(j) = find(axis, s).or_else(|| find(axis, -s)) {
                            let q = (u[j] - u[i]) / (c[j][axis] - c[i][axis]);
                            g2 += q * q;
                        }
                    }
                    acc += g2.powf(0.5 * p);
                }
            }
            total += dom.mu()[i] * acc / 4.0;
        }
        total
    }

    #[test]
    fn identity_anisotropy_matches_grid_oracle() {
        let dom = grid_domain(7, 4);
        let st = DifferentialStructure::identity_grid(&dom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &p in &[1.5, 2.0, 3.0] {
            let u = random_vec(&mut rng, dom.node_count());
            let a = p_energy(&dom, &st, &u, p).unwrap();
            let b = grid_energy_oracle(&dom, &u, p);
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn anisotropic_gradient_matches_finite_differences() {
        let dom = grid_domain(5, 3);
        let st = DifferentialStructure::axis_switch(&dom, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = random_vec(&mut rng, dom.node_count());
        for &p in &[1.5, 3.0] {
            let g = p_energy_gradient(&dom, &st, &u, p).unwrap();
            let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for i in 0..dom.node_count() {
                let h = 1e-6;
                let (mut a, mut b) = (u.clone(), u.clone());
                a[i] += h;
                b[i] -= h;
                let fd = (p_energy(&dom, &st, &a, p).unwrap() - p_energy(&dom, &st, &b, p).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * scale);
            }
        }
    }

    #[test]
    fn anisotropy_validation() {
        let dom = grid_domain(3, 2);
        let n = dom.node_count();
        let bad = vec![vec![vec![1.0, 0.0], vec![0.0, -1.0]]; n];
        assert!(matches!(DifferentialStructure::anisotropic(&dom, bad), Err(Error::NotSpd { node: 0 })));
        let asym = vec![vec![vec![1.0, 0.5], vec![0.0, 1.0]]; n];
        assert!(matches!(DifferentialStructure::anisotropic(&dom, asym), Err(Error::NotSpd { .. })));
        let cyc = small_domain(6, 2, 2.0);
        assert!(matches!(DifferentialStructure::identity_grid(&cyc), Err(Error::MissingCoords)));
        if let DifferentialStructure::Anisotropic(a) = DifferentialStructure::axis_switch(&dom, 2.0).unwrap() {
            assert_eq!(a.eigen_bounds(), (1.0, 2.0));
        }
    }

    #[test]
    fn monotonicity_gap_basics() {
        let z = [0.3, -1.2, 2.0];
        assert_eq!(monotonicity_gap(&z, &z, 3.0), 0.0);
        let w = [1.0, 0.5, -0.25];
        let d2: f64 = z.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum();
        assert_relative_eq!(monotonicity_gap(&z, &w, 2.0), d2, max_relative = 1e-14);
    }

    #[test]
    fn monotonicity_gap_sweep_p3() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cmin = f64::INFINITY;
        for _ in 0..1000 {
            let z = random_vec(&mut rng, 3);
            let w = random_vec(&mut rng, 3);
            let gap = monotonicity_gap(&z, &w, 3.0);
            assert!(gap >= 0.0);
            let d: f64 = z.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            cmin = cmin.min(gap / d.powi(3));
        }
        assert!(cmin > 0.0);
    }

    proptest! {
        #[test]
        fn energy_is_p_homogeneous(c in -3.0f64..3.0, seed in 0u64..1000, p in 1.2f64..4.0) {
            let dom = small_domain(6, 2, 2.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_vec(&mut rng, dom.node_count());
            let cu: Vec<f64> = u.iter().map(|x| c * x).collect();
            let iso = DifferentialStructure::Isotropic;
            let e = p_energy(&dom, &iso, &u, p).unwrap();
            let ec = p_energy(&dom, &iso, &cu, p).unwrap();
            prop_assert!((ec - c.abs().powf(p) * e).abs() <= 1e-10 * (1.0 + ec));
        }

        #[test]
        fn energy_is_convex(seed in 0u64..1000, t in 0.01f64..0.99, p in 1.1f64..4.0) {
            let dom = small_domain(6, 2, 2.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_vec(&mut rng, dom.node_count());
            let v = random_vec(&mut rng, dom.node_count());
            let m: Vec<f64> = u.iter().zip(&v).map(|(a, b)| t * a + (1.0 - t) * b).collect();
            let iso = DifferentialStructure::Isotropic;
            let lhs = p_energy(&dom, &iso, &m, p).unwrap();
            let rhs = t * p_energy(&dom, &iso, &u, p).unwrap() + (1.0 - t) * p_energy(&dom, &iso, &v, p).unwrap();
            prop_assert!(lhs <= rhs + 1e-10);
        }

        #[test]
        fn monotonicity_gap_nonnegative(z in prop::collection::vec(-5.0f64..5.0, 3), w in prop::collection::vec(-5.0f64..5.0, 3), p in 1.1f64..5.0) {
            prop_assert!(monotonicity_gap(&z, &w, p) >= -1e-12);
        }

        #[test]
        fn el_form_kills_constants(seed in 0u64..1000, c in -10.0f64..10.0, p in 1.2f64..4.0) {
            let dom = small_domain(6, 3, 2.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_vec(&mut rng, dom.node_count());
            let k = vec![c; dom.node_count()];
            let iso = DifferentialStructure::Isotropic;
            let e = p_energy(&dom, &iso, &u, p).unwrap();
            prop_assert!(el_form(&dom, &iso, &u, &k, p).unwrap().abs() <= 1e-12 * e * (1.0 + c.abs()));
        }
    }
}
