//! Discrete extension domains over a boundary space: the weighted product
//! `Z x [0, Y_max]` with measure `y^a dy dnu`, the dampening transform and the
//! truncations used by the exhaustion scheme.
//!
//! Node ids are layer-major: node `m * n + i` sits over point `i` of `Z` at
//! height `y_m`, so layer-0 ids coincide with the indices of `Z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph;
use crate::space::{MetricMeasureSpace, SpaceDoc};

/// Exponent bookkeeping for `(-Delta_p)^theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRaw")]
pub struct FractionalParams {
    p: f64,
    theta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
}

#[derive(Deserialize)]
struct ParamsRaw {
    p: f64,
    theta: f64,
    #[serde(default)]
    beta: Option<f64>,
}

impl TryFrom<ParamsRaw> for FractionalParams {
    type Error = Error;
    fn try_from(r: ParamsRaw) -> Result<Self> {
        let mut out = FractionalParams::new(r.p, r.theta)?;
        if let Some(b) = r.beta {
            out = out.with_beta(b)?;
        }
        Ok(out)
    }
}

impl FractionalParams {
    pub fn new(p: f64, theta: f64) -> Result<Self> {
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::InvalidParams(format!("p must lie in (1, inf), got {p}")));
        }
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::InvalidParams(format!(
                "theta must lie in (0, 1), got {theta}"
            )));
        }
        Ok(Self { p, theta, beta: None })
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParams(format!("beta must be positive, got {beta}")));
        }
        self.beta = Some(beta);
        Ok(self)
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta
    }

    /// `Theta = p (1 - theta)`.
    pub fn theta_cap(&self) -> f64 {
        self.p * (1.0 - self.theta)
    }

    /// Weight exponent `a = 1 - p theta` of the product measure `y^a dy dnu`.
    pub fn weight_exponent(&self) -> f64 {
        1.0 - self.p * self.theta
    }

    /// `p' = p / (p - 1)`.
    pub fn p_conj(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    /// Codimension realized by the product measure, `1 + a`. Equals
    /// `theta_cap()` only when `p = 2`.
    pub fn product_codimension(&self) -> f64 {
        1.0 + self.weight_exponent()
    }
}

/// Which pairs of boundary points are joined within each interior layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Connectivity {
    /// Pairs at the minimal positive distance of `Z`.
    #[default]
    Nearest,
    /// Pairs within a fixed radius.
    Threshold(f64),
    /// Pairs within `max(y_m, min spacing)` on layer `m`.
    LayerScaled,
    /// Symmetrized k nearest neighbours.
    KNearest(usize),
}

/// Layer grading for the product construction. `None` fields take defaults:
/// `y_min = 0.01 * min spacing`, `y_max = diam(Z)`, and `rho` chosen so the top
/// layer sits at `y_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layers: usize,
    #[serde(default)]
    pub y_min: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub y_max: Option<f64>,
    #[serde(default)]
    pub connectivity: Connectivity,
}

impl Default for LayerSpec {
    fn default() -> Self {
        Self {
            layers: 24,
            y_min: None,
            rho: None,
            y_max: None,
            connectivity: Connectivity::Nearest,
        }
    }
}

impl LayerSpec {
    pub fn with_layers(layers: usize) -> Self {
        Self { layers, ..Self::default() }
    }

    /// Resolves `(heights y_1..y_M, Y_max)` for a given boundary space.
    pub fn resolve(&self, z: &MetricMeasureSpace) -> Result<(Vec<f64>, f64)> {
        let m = self.layers;
        if m < 2 {
            return Err(Error::InvalidParams(format!("need at least 2 layers, got {m}")));
        }
        let dmin = z.min_positive_distance().unwrap_or(1.0);
        let y_min = self.y_min.unwrap_or(0.01 * dmin);
        if !(y_min > 0.0 && y_min.is_finite()) {
            return Err(Error::InvalidParams(format!("y_min must be positive, got {y_min}")));
        }
        let (rho, y_max) = match (self.rho, self.y_max) {
            (Some(r), ym) => {
                let top = y_min * r.powi(m as i32 - 1);
                (r, ym.unwrap_or(top))
            }
            (None, ym) => {
                let ym = ym.unwrap_or_else(|| z.diameter().max(y_min));
                (( ym / y_min).powf(1.0 / (m as f64 - 1.0)), ym)
            }
        };
        if !(rho > 1.0) {
            return Err(Error::DegenerateGrading(format!("grading ratio must exceed 1, got {rho}")));
        }
        let mut heights: Vec<f64> = (0..m).map(|k| y_min * rho.powi(k as i32)).collect();
        if self.rho.is_none() {
            // pin the top layer against round-off in rho
            heights[m - 1] = y_max;
        }
        let top = heights[m - 1];
        if top > y_max * (1.0 + 1e-12) {
            return Err(Error::DegenerateGrading(format!(
                "top layer {top} exceeds Y_max = {y_max}"
            )));
        }
        Ok((heights, y_max))
    }
}

/// Classification of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    /// Point of the active boundary (carries `nu`, Dirichlet or Neumann data).
    Boundary,
    /// Former boundary point outside the truncation ball (natural boundary).
    Free,
    Interior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    /// Product distance `sqrt(d_Z^2 + y^2)` is available.
    Product,
    /// Only graph distances are meaningful (after dampening).
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub len: f64,
    pub w: f64,
}

/// The discrete extension domain `Omega` with its boundary.
#[derive(Debug, Clone)]
pub struct ExtensionDomain {
    space: MetricMeasureSpace,
    column_of: Vec<usize>,
    layer_of: Vec<usize>,
    y_of: Vec<f64>,
    mu: Vec<f64>,
    coords: Option<Vec<Vec<f64>>>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<usize>>,
    role: Vec<NodeRole>,
    params: FractionalParams,
    base_point: usize,
    base_radius: f64,
    geometry: Geometry,
}

/// Per-node input for [`ExtensionDomain::from_parts`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: usize,
    pub layer: usize,
    pub y: f64,
    pub mu: f64,
    pub boundary: bool,
    #[serde(default)]
    pub free: bool,
    pub column: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<f64>>,
}

/// JSON document for a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDoc {
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<Edge>,
    pub params: FractionalParams,
    pub space: SpaceDoc,
    pub base_point: usize,
    pub base_radius: f64,
    pub geometry: Geometry,
}

/// Builds the graded product extension.
pub fn build_product_extension(
    z: &MetricMeasureSpace,
    params: FractionalParams,
    spec: &LayerSpec,
) -> Result<ExtensionDomain> {
    let a = params.weight_exponent();
    if !(a > -1.0 && a < 1.0) {
        return Err(Error::WeightOutOfRange { a });
    }
    let (heights, y_max) = spec.resolve(z)?;
    let n = z.len();
    let m = heights.len();
    let p = params.p();
    let nu = z.nu();
    let ap1 = a + 1.0;
    let prim = |y: f64| y.powf(ap1) / ap1;

    // y[0] = 0 is the boundary layer.
    let mut y = Vec::with_capacity(m + 1);
    y.push(0.0);
    y.extend_from_slice(&heights);
    let mut cell = vec![0.0; m + 1];
    for k in 1..m {
        cell[k] = 0.5 * (y[k] + y[k + 1]);
    }
    cell[m] = y_max;

    let total = n * (m + 1);
    let mut column_of = Vec::with_capacity(total);
    let mut layer_of = Vec::with_capacity(total);
    let mut y_of = Vec::with_capacity(total);
    let mut mu = Vec::with_capacity(total);
    for layer in 0..=m {
        let h = if layer == 0 { 0.0 } else { prim(cell[layer]) - prim(cell[layer - 1]) };
        for i in 0..n {
            column_of.push(i);
            layer_of.push(layer);
            y_of.push(y[layer]);
            mu.push(nu[i] * h);
        }
    }
    let coords = z.coords().map(|zc| {
        (0..total)
            .map(|id| {
                let mut c = zc[column_of[id]].clone();
                c.push(y_of[id]);
                c
            })
            .collect()
    });

    let dmin = z.min_positive_distance().unwrap_or(1.0);
    let mut edges = Vec::new();
    for layer in 0..m {
        let len = y[layer + 1] - y[layer];
        for i in 0..n {
            let w = nu[i] * (prim(y[layer + 1]) - prim(y[layer])) / len.powf(p);
            edges.push(Edge {
                i: layer * n + i,
                j: (layer + 1) * n + i,
                len,
                w,
            });
        }
    }
    let fixed_pairs = match spec.connectivity {
        Connectivity::Nearest => Some(z.threshold_pairs(dmin)),
        Connectivity::Threshold(r) => Some(z.threshold_pairs(r)),
        Connectivity::KNearest(k) => Some(z.knn_pairs(k)),
        Connectivity::LayerScaled => None,
    };
    for layer in 1..=m {
        let pairs = match &fixed_pairs {
            Some(pairs) => std::borrow::Cow::Borrowed(pairs),
            None => std::borrow::Cow::Owned(z.threshold_pairs(y[layer].max(dmin))),
        };
        let h = mu[layer * n] / nu[0];
        for &(i, j) in pairs.iter() {
            let len = z.dist(i, j);
            let hm = 2.0 * nu[i] * nu[j] / (nu[i] + nu[j]);
            edges.push(Edge {
                i: layer * n + i,
                j: layer * n + j,
                len,
                w: h * hm / len.powf(p),
            });
        }
    }

    let mut role = vec![NodeRole::Interior; total];
    role[..n].iter_mut().for_each(|r| *r = NodeRole::Boundary);
    let base_point = z.unit_ball_maximizer();
    let base_radius = default_base_radius(z, base_point);
    let dom = ExtensionDomain::assemble(
        z.clone(),
        column_of,
        layer_of,
        y_of,
        mu,
        coords,
        edges,
        role,
        params,
        base_point,
        base_radius,
        Geometry::Product,
    );
    dom.validate()?;
    Ok(dom)
}

/// Smallest `2^j`, `j >= 0`, whose open ball around `x0` holds at least
/// `max(4, ceil(n / 16))` points (capped by `n`).
pub fn default_base_radius(z: &MetricMeasureSpace, x0: usize) -> f64 {
    let n = z.len();
    let need = 4usize.max(n.div_ceil(16)).min(n);
    let mut r = 1.0;
    loop {
        let count = z.row(x0).iter().filter(|&&d| d < r).count();
        if count >= need {
            return r;
        }
        r *= 2.0;
    }
}

impl ExtensionDomain {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        space: MetricMeasureSpace,
        column_of: Vec<usize>,
        layer_of: Vec<usize>,
        y_of: Vec<f64>,
        mu: Vec<f64>,
        coords: Option<Vec<Vec<f64>>>,
        edges: Vec<Edge>,
        role: Vec<NodeRole>,
        params: FractionalParams,
        base_point: usize,
        base_radius: f64,
        geometry: Geometry,
    ) -> Self {
        let mut adjacency = vec![Vec::new(); mu.len()];
        for (k, e) in edges.iter().enumerate() {
            adjacency[e.i].push(k);
            adjacency[e.j].push(k);
        }
        Self {
            space,
            column_of,
            layer_of,
            y_of,
            mu,
            coords,
            edges,
            adjacency,
            role,
            params,
            base_point,
            base_radius,
            geometry,
        }
    }

    /// Structural checks: edge data, boundary ids, measure signs, layer rules.
    /// Connectivity is checked separately by [`Self::check_connected`].
    fn validate(&self) -> Result<()> {
        let n = self.space.len();
        let total = self.mu.len();
        if total < n {
            return Err(Error::InvalidDomain("fewer nodes than boundary points".into()));
        }
        for id in 0..total {
            let on_bdry = id < n;
            if on_bdry != (self.role[id] != NodeRole::Interior) {
                return Err(Error::InvalidDomain(format!(
                    "node {id}: boundary and free nodes must be exactly the first {n} ids"
                )));
            }
            if on_bdry && (self.column_of[id] != id || self.layer_of[id] != 0) {
                return Err(Error::InvalidDomain(format!("boundary node {id} must sit in layer 0 over point {id}")));
            }
            if !on_bdry && self.layer_of[id] == 0 {
                return Err(Error::InvalidDomain(format!("interior node {id} has layer 0")));
            }
            if self.column_of[id] >= n {
                return Err(Error::InvalidDomain(format!("node {id} has column out of range")));
            }
            let m = self.mu[id];
            if on_bdry && m != 0.0 {
                return Err(Error::InvalidDomain(format!("boundary node {id} has nonzero measure {m}")));
            }
            if !on_bdry && !(m > 0.0 && m.is_finite()) {
                return Err(Error::InvalidDomain(format!("interior node {id} has measure {m}")));
            }
            if !(self.y_of[id] >= 0.0) {
                return Err(Error::InvalidDomain(format!("node {id} has negative height")));
            }
        }
        if let Some(c) = &self.coords {
            if c.len() != total {
                return Err(Error::DimensionMismatch { what: "node coordinates", expected: total, got: c.len() });
            }
        }
        for e in &self.edges {
            if e.i >= total || e.j >= total || e.i == e.j {
                return Err(Error::InvalidDomain(format!("bad edge ({}, {})", e.i, e.j)));
            }
            if !(e.len > 0.0 && e.len.is_finite() && e.w > 0.0 && e.w.is_finite()) {
                return Err(Error::InvalidDomain(format!(
                    "edge ({}, {}) needs positive length and conductance",
                    e.i, e.j
                )));
            }
            let (li, lj) = (self.layer_of[e.i], self.layer_of[e.j]);
            let vertical = self.column_of[e.i] == self.column_of[e.j];
            let ok = if vertical { li.abs_diff(lj) == 1 } else { li == lj };
            if !ok {
                return Err(Error::InvalidDomain(format!(
                    "edge ({}, {}) is neither vertical between adjacent layers nor horizontal",
                    e.i, e.j
                )));
            }
        }
        if self.base_point >= n {
            return Err(Error::InvalidDomain("base point out of range".into()));
        }
        if !(self.base_radius > 0.0) {
            return Err(Error::InvalidDomain("base radius must be positive".into()));
        }
        Ok(())
    }

    /// Fails with `Disconnected` when some node cannot reach node 0.
    pub fn check_connected(&self) -> Result<()> {
        let labels = graph::components(self.node_count(), &self.edge_pairs());
        match labels.iter().position(|&l| l != labels[0]) {
            Some(node) => Err(Error::Disconnected { node }),
            None => Ok(()),
        }
    }

    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.i, e.j)).collect()
    }

    pub fn to_doc(&self) -> DomainDoc {
        let nodes = (0..self.node_count())
            .map(|id| NodeDoc {
                id,
                layer: self.layer_of[id],
                y: self.y_of[id],
                mu: self.mu[id],
                boundary: self.role[id] == NodeRole::Boundary,
                free: self.role[id] == NodeRole::Free,
                column: self.column_of[id],
                coords: self.coords.as_ref().map(|c| c[id].clone()),
            })
            .collect();
        DomainDoc {
            nodes,
            edges: self.edges.clone(),
            params: self.params,
            space: self.space.to_doc(),
            base_point: self.base_point,
            base_radius: self.base_radius,
            geometry: self.geometry,
        }
    }

    /// Rebuilds and validates a domain from its document, including connectivity.
    pub fn from_doc(doc: DomainDoc) -> Result<Self> {
        let space = doc.space.into_space()?;
        let mut nodes = doc.nodes;
        nodes.sort_by_key(|nd| nd.id);
        if nodes.iter().enumerate().any(|(k, nd)| nd.id != k) {
            return Err(Error::InvalidDomain("node ids must be 0..N without gaps".into()));
        }
        let has_coords = nodes.iter().all(|nd| nd.coords.is_some());
        let role = nodes
            .iter()
            .map(|nd| match (nd.boundary, nd.free) {
                (true, false) => Ok(NodeRole::Boundary),
                (false, true) => Ok(NodeRole::Free),
                (false, false) => Ok(NodeRole::Interior),
                (true, true) => Err(Error::InvalidDomain(format!("node {} is both boundary and free", nd.id))),
            })
            .collect::<Result<Vec<_>>>()?;
        let dom = Self::assemble(
            space,
            nodes.iter().map(|nd| nd.column).collect(),
            nodes.iter().map(|nd| nd.layer).collect(),
            nodes.iter().map(|nd| nd.y).collect(),
            nodes.iter().map(|nd| nd.mu).collect(),
            has_coords.then(|| nodes.iter().map(|nd| nd.coords.clone().unwrap()).collect()),
            doc.edges,
            role,
            doc.params,
            doc.base_point,
            doc.base_radius,
            doc.geometry,
        );
        dom.validate()?;
        dom.check_connected()?;
        Ok(dom)
    }

    pub fn space(&self) -> &MetricMeasureSpace {
        &self.space
    }

    pub fn params(&self) -> FractionalParams {
        self.params
    }

    pub fn node_count(&self) -> usize {
        self.mu.len()
    }

    pub fn boundary_len(&self) -> usize {
        self.space.len()
    }

    pub fn interior_count(&self) -> usize {
        self.node_count() - self.boundary_len()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_of.iter().copied().max().unwrap_or(0)
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Indices into [`Self::edges`] incident to `node`.
    pub fn incident(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn role(&self, node: usize) -> NodeRole {
        self.role[node]
    }

    pub fn column_of(&self, node: usize) -> usize {
        self.column_of[node]
    }

    pub fn layer_of(&self, node: usize) -> usize {
        self.layer_of[node]
    }

    pub fn y_of(&self, node: usize) -> f64 {
        self.y_of[node]
    }

    pub fn coords(&self) -> Option<&[Vec<f64>]> {
        self.coords.as_deref()
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn base_point(&self) -> usize {
        self.base_point
    }

    pub fn base_radius(&self) -> f64 {
        self.base_radius
    }

    /// Active boundary node ids (equal to their points of `Z`).
    pub fn boundary_ids(&self) -> Vec<usize> {
        (0..self.boundary_len()).filter(|&i| self.role[i] == NodeRole::Boundary).collect()
    }

    pub fn free_ids(&self) -> Vec<usize> {
        (0..self.boundary_len()).filter(|&i| self.role[i] == NodeRole::Free).collect()
    }

    /// Ids of all nodes in layer `m`.
    pub fn layer_nodes(&self, m: usize) -> Vec<usize> {
        (0..self.node_count()).filter(|&id| self.layer_of[id] == m).collect()
    }

    /// Distinct layer heights `y_0 = 0, y_1, ...` (product domains).
    pub fn layer_heights(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.layer_count() + 1];
        for id in 0..self.node_count() {
            out[self.layer_of[id]] = self.y_of[id];
        }
        out
    }

    /// Points of `Z` in the closed ball `B_k = 2^k B_0` around the base point.
    pub fn ball_points(&self, k: u32) -> Vec<usize> {
        let r = self.base_radius * 2f64.powi(k as i32);
        let row = self.space.row(self.base_point);
        (0..self.boundary_len()).filter(|&i| row[i] <= r * (1.0 + 1e-12)).collect()
    }

    /// Points of `Z` in the open reference ball `B_0`.
    pub fn reference_ball(&self) -> Vec<usize> {
        self.space.ball(self.base_point, self.base_radius)
    }

    pub fn with_base_point(mut self, x0: usize) -> Result<Self> {
        if x0 >= self.boundary_len() {
            return Err(Error::InvalidDomain(format!("base point {x0} out of range")));
        }
        self.base_point = x0;
        Ok(self)
    }

    pub fn with_base_radius(mut self, r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidDomain(format!("base radius must be positive, got {r}")));
        }
        self.base_radius = r;
        Ok(self)
    }

    /// Distance from boundary point `xi` to every node: the product distance
    /// for product domains, the shortest-path distance otherwise.
    pub fn distances_from_point(&self, xi: usize) -> Vec<f64> {
        match self.geometry {
            Geometry::Product => (0..self.node_count())
                .map(|id| self.space.dist(xi, self.column_of[id]).hypot(self.y_of[id]))
                .collect(),
            Geometry::Graph => graph::multi_source_distances(self.node_count(), &self.weighted_edges(), &[xi]),
        }
    }

    fn weighted_edges(&self) -> Vec<(usize, usize, f64)> {
        self.edges.iter().map(|e| (e.i, e.j, e.len)).collect()
    }

    /// Graph distance from every node to the nearest active boundary node.
    pub fn boundary_distances(&self) -> Vec<f64> {
        graph::multi_source_distances(self.node_count(), &self.weighted_edges(), &self.boundary_ids())
    }

    /// Conformal change by `phi(t) = min(1, t^-beta)` of the boundary distance:
    /// lengths scale by `phi` at the edge midpoint, measures by `phi^p`, and
    /// conductances are kept so every p-energy is unchanged.
    pub fn dampen(&self, beta: f64, q_mu: f64) -> Result<Self> {
        let p = self.params.p();
        if !(beta * p > q_mu) {
            return Err(Error::BetaTooSmall { beta_p: beta * p, q_mu });
        }
        let params = self.params.with_beta(beta)?;
        let d = self.boundary_distances();
        let phi = |t: f64| if t <= 1.0 { 1.0 } else { t.powf(-beta) };
        let mut out = self.clone();
        for e in out.edges.iter_mut() {
            e.len *= phi(0.5 * (d[e.i] + d[e.j]));
        }
        for (m, &t) in out.mu.iter_mut().zip(&d) {
            *m *= phi(t).powf(p);
        }
        out.params = params;
        out.geometry = Geometry::Graph;
        out.coords = None;
        Ok(out)
    }

    /// Reclassifies active boundary points outside the closed ball `2^k B_0`
    /// as free. Idempotent; the graph is unchanged.
    pub fn truncate(&self, k: u32) -> Self {
        let keep = self.ball_points(k);
        let mut out = self.clone();
        let mut inside = vec![false; self.boundary_len()];
        keep.iter().for_each(|&i| inside[i] = true);
        for i in 0..self.boundary_len() {
            if out.role[i] == NodeRole::Boundary && !inside[i] {
                out.role[i] = NodeRole::Free;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cycle_domain(n: usize, p: f64, theta: f64, layers: usize) -> ExtensionDomain {
        let z = MetricMeasureSpace::cycle(n);
        build_product_extension(&z, FractionalParams::new(p, theta).unwrap(), &LayerSpec::with_layers(layers)).unwrap()
    }

    #[test]
    fn params_bookkeeping() {
        let f = FractionalParams::new(3.0, 0.25).unwrap();
        assert_relative_eq!(f.theta_cap(), 2.25);
        assert_relative_eq!(f.weight_exponent(), 0.25);
        assert_relative_eq!(f.p_conj() * (f.p() - 1.0), f.p());
        assert!(FractionalParams::new(2.0, 1.0).is_err());
        assert!(FractionalParams::new(1.0, 0.5).is_err());
        let s = FractionalParams::new(2.0, 0.5).unwrap();
        assert_relative_eq!(s.product_codimension(), s.theta_cap());
    }

    #[test]
    fn a_zero_cells_are_plain_heights() {
        let dom = cycle_domain(16, 2.0, 0.5, 6);
        let y = dom.layer_heights();
        let m = y.len() - 1;
        let mut c = vec![0.0; m + 1];
        for k in 1..m {
            c[k] = 0.5 * (y[k] + y[k + 1]);
        }
        c[m] = dom.space().diameter();
        for k in 1..=m {
            assert_relative_eq!(dom.mu()[k * 16], c[k] - c[k - 1], max_relative = 1e-12);
        }
    }

    #[test]
    fn weight_out_of_range_at_a_minus_one() {
        let z = MetricMeasureSpace::cycle(8);
        let params = FractionalParams::new(3.0, 2.0 / 3.0).unwrap();
        assert!(matches!(
            build_product_extension(&z, params, &LayerSpec::default()),
            Err(Error::WeightOutOfRange { .. })
        ));
    }

    #[test]
    fn node_and_vertical_edge_counts() {
        let (n, m) = (20, 7);
        let dom = cycle_domain(n, 2.0, 0.5, m);
        assert_eq!(dom.node_count(), n * (m + 1));
        let vertical = dom
            .edges()
            .iter()
            .filter(|e| dom.column_of(e.i) == dom.column_of(e.j))
            .count();
        assert_eq!(vertical, n * m);
        dom.check_connected().unwrap();
    }

    #[test]
    fn grading_errors() {
        let z = MetricMeasureSpace::cycle(8);
        let params = FractionalParams::new(2.0, 0.5).unwrap();
        let spec = LayerSpec { rho: Some(1.0), ..LayerSpec::default() };
        assert!(matches!(build_product_extension(&z, params, &spec), Err(Error::DegenerateGrading(_))));
        let spec = LayerSpec { rho: Some(3.0), y_max: Some(4.0), ..LayerSpec::default() };
        assert!(matches!(build_product_extension(&z, params, &spec), Err(Error::DegenerateGrading(_))));
    }

    #[test]
    fn column_mass_closed_form() {
        for &(p, theta) in &[(2.0, 0.5), (2.0, 0.25), (3.0, 0.5), (1.5, 0.2)] {
            let z = MetricMeasureSpace::cycle(12).with_measure((0..12).map(|i| 1.0 + i as f64 * 0.1).collect()).unwrap();
            let params = FractionalParams::new(p, theta).unwrap();
            let dom = build_product_extension(&z, params, &LayerSpec::with_layers(9)).unwrap();
            let a = params.weight_exponent();
            let ymax = z.diameter();
            for i in 0..12 {
                let col: f64 = (0..dom.node_count()).filter(|&id| dom.column_of(id) == i).map(|id| dom.mu()[id]).sum();
                assert_relative_eq!(col, z.nu()[i] * ymax.powf(a + 1.0) / (a + 1.0), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn dampen_rejects_small_beta() {
        let dom = cycle_domain(8, 2.0, 0.5, 4);
        assert!(matches!(dom.dampen(1.0, 3.0), Err(Error::BetaTooSmall { .. })));
    }

    #[test]
    fn dampen_factor_at_distance_four() {
        let z = MetricMeasureSpace::cycle(8);
        let spec = LayerSpec { layers: 3, y_min: Some(1.0), rho: Some(2.0), y_max: Some(4.0), ..LayerSpec::default() };
        let dom = build_product_extension(&z, FractionalParams::new(2.0, 0.5).unwrap(), &spec).unwrap();
        let d = dom.boundary_distances();
        let top = 3 * 8;
        assert_relative_eq!(d[top], 4.0);
        let damp = dom.dampen(2.0, 1.0).unwrap();
        assert_relative_eq!(damp.mu()[top] / dom.mu()[top], 1.0 / 256.0, max_relative = 1e-14);
        // nodes within distance 1 keep their weights
        assert_eq!(damp.mu()[8], dom.mu()[8]);
        for (e, f) in dom.edges().iter().zip(damp.edges()) {
            if d[e.i].max(d[e.j]) <= 1.0 {
                assert_eq!(e.len, f.len);
            }
            assert_eq!(e.w, f.w);
        }
    }

    #[test]
    fn truncate_reclassifies_far_points() {
        let dom = cycle_domain(64, 2.0, 0.5, 4).with_base_point(0).unwrap().with_base_radius(1.0).unwrap();
        for k in 0..4u32 {
            let t = dom.truncate(k);
            let far = (3usize << k) % 64;
            if 3 * (1 << k) <= 32 {
                assert_eq!(t.role(far), NodeRole::Free);
            }
            assert_eq!(t.truncate(k).boundary_ids(), t.boundary_ids());
        }
        // whole boundary inside B_0
        let big = dom.clone().with_base_radius(100.0).unwrap();
        for k in 0..5 {
            assert_eq!(big.truncate(k).boundary_ids().len(), 64);
        }
    }

    #[test]
    fn default_base_radius_is_dyadic() {
        let z = MetricMeasureSpace::cycle(64);
        assert_eq!(default_base_radius(&z, 0), 4.0);
        let z = MetricMeasureSpace::cycle(256);
        assert_eq!(default_base_radius(&z, 0), 16.0);
    }

    #[test]
    fn json_round_trip() {
        let dom = cycle_domain(10, 3.0, 0.4, 3).truncate(0);
        let text = serde_json::to_string(&dom.to_doc()).unwrap();
        let back = ExtensionDomain::from_doc(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.mu(), dom.mu());
        assert_eq!(back.edges(), dom.edges());
        assert_eq!(back.free_ids(), dom.free_ids());
        assert_eq!(back.params(), dom.params());
    }

    #[test]
    fn json_rejects_theta_out_of_range() {
        let dom = cycle_domain(6, 2.0, 0.5, 2);
        let text = serde_json::to_string(&dom.to_doc()).unwrap().replace("\"theta\":0.5", "\"theta\":1.5");
        assert!(serde_json::from_str::<DomainDoc>(&text).is_err());
    }

    #[test]
    fn product_coords_append_height() {
        let z = MetricMeasureSpace::path(5);
        let dom = build_product_extension(&z, FractionalParams::new(2.0, 0.5).unwrap(), &LayerSpec::with_layers(3)).unwrap();
        let c = dom.coords().unwrap();
        assert_eq!(c[5 + 2], vec![2.0, dom.y_of(7)]);
    }

    proptest! {
        #[test]
        fn truncation_is_monotone(k in 0u32..6, x0 in 0usize..40, r in 0.5f64..6.0) {
            let dom = cycle_domain(40, 2.0, 0.5, 2).with_base_point(x0).unwrap().with_base_radius(r).unwrap();
            let a = dom.truncate(k).boundary_ids();
            let b = dom.truncate(k + 1).boundary_ids();
            prop_assert!(a.iter().all(|i| b.contains(i)));
            prop_assert!(a.contains(&x0));
        }
    }
}
