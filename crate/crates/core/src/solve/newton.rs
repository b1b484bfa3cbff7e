//! Minimization of `Phi(u) = (1/p) sum_k c_k |B_k u|^p - <b, u>` over a subset of
//! node values, the rest held fixed.
//!
//! The smooth surrogate `(eps^2 + |z|^2)^{p/2}` is minimized by damped Newton
//! with a sparse Cholesky factorization whose pattern is computed once; `eps`
//! follows a decreasing schedule relative to the size of the initial gradients.

use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::pattern::SparsityPattern;
use nalgebra_sparse::CscMatrix;

use super::{Method, SolverConfig};
use crate::cheeger::Stencil;
use crate::error::{Error, Result};

const FIXED: usize = usize::MAX;

pub(crate) struct Outcome {
    pub u: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub method: Method,
}

pub(crate) struct Minimizer<'a> {
    st: &'a Stencil,
    p: f64,
    var_of: Vec<usize>,
    vars: Vec<usize>,
    load: Vec<f64>,
    /// Per term: support nodes, local rows (row-major, rows x support) and
    /// Hessian slots (support x support, `FIXED` when either end is fixed).
    supp_start: Vec<usize>,
    supp: Vec<usize>,
    local_start: Vec<usize>,
    local: Vec<f64>,
    slot_start: Vec<usize>,
    slots: Vec<usize>,
    pattern: SparsityPattern,
    diag_slot: Vec<usize>,
}

impl<'a> Minimizer<'a> {
    /// `free[i]` marks node `i` as an unknown; `load` is indexed by node.
    pub fn new(st: &'a Stencil, p: f64, free: &[bool], load: Vec<f64>) -> Self {
        let n = st.node_count();
        let mut var_of = vec![FIXED; n];
        let mut vars = Vec::new();
        for i in 0..n {
            if free[i] {
                var_of[i] = vars.len();
                vars.push(i);
            }
        }
        let nv = vars.len();
        let mut supp_start = vec![0];
        let mut supp = Vec::new();
        let mut local_start = vec![0];
        let mut local = Vec::new();
        let mut pairs: Vec<(usize, usize)> = (0..nv).map(|v| (v, v)).collect();
        for k in 0..st.term_count() {
            let s = st.support(k);
            for (idx, val) in st.rows(k) {
                let mut row = vec![0.0; s.len()];
                for (&i, &v) in idx.iter().zip(val) {
                    let a = s.iter().position(|&x| x == i).unwrap();
                    row[a] += v;
                }
                local.extend(row);
            }
            for &a in &s {
                for &b in &s {
                    if var_of[a] != FIXED && var_of[b] != FIXED {
                        pairs.push((var_of[b], var_of[a]));
                    }
                }
            }
            supp.extend(&s);
            supp_start.push(supp.len());
            local_start.push(local.len());
        }
        // column-major (col, row) ordering
        pairs.sort_unstable();
        pairs.dedup();
        let mut offsets = vec![0usize; nv + 1];
        for &(c, _) in &pairs {
            offsets[c + 1] += 1;
        }
        for c in 0..nv {
            offsets[c + 1] += offsets[c];
        }
        let indices: Vec<usize> = pairs.iter().map(|&(_, r)| r).collect();
        let find = |c: usize, r: usize| -> usize {
            let lo = offsets[c];
            lo + indices[lo..offsets[c + 1]].binary_search(&r).unwrap()
        };
        let mut slot_start = vec![0];
        let mut slots = Vec::new();
        for k in 0..st.term_count() {
            let s = &supp[supp_start[k]..supp_start[k + 1]];
            for &a in s {
                for &b in s {
                    let (va, vb) = (var_of[a], var_of[b]);
                    slots.push(if va == FIXED || vb == FIXED { FIXED } else { find(vb, va) });
                }
            }
            slot_start.push(slots.len());
        }
        let diag_slot = (0..nv).map(|v| find(v, v)).collect();
        let pattern = SparsityPattern::try_from_offsets_and_indices(nv, nv, offsets, indices)
            .expect("valid sparsity pattern");
        Self {
            st,
            p,
            var_of,
            vars,
            load,
            supp_start,
            supp,
            local_start,
            local,
            slot_start,
            slots,
            pattern,
            diag_slot,
        }
    }

    /// Max-norm of `sum c |z|^{p-2} B^T z - b` over the unknowns. With
    /// `eps > 0` the flux is smoothed to `(eps^2 + |z|^2)^{(p-2)/2} z`.
    pub fn residual(&self, u: &[f64], eps: f64) -> f64 {
        if eps > 0.0 {
            return max_abs(&self.derivatives(u, eps, None));
        }
        let el = self.st.el_vector(u, self.p);
        self.vars
            .iter()
            .map(|&i| (el[i] - self.load[i]).abs())
            .fold(0.0, f64::max)
    }

    /// Smoothing used when measuring convergence: the last schedule entry for
    /// `p < 2`, where the unsmoothed flux `|z|^{p-1}` amplifies round-off in
    /// near-flat terms without bound, and none otherwise.
    pub fn residual_eps(&self, cfg: &SolverConfig, scale: f64) -> f64 {
        if self.p < 2.0 {
            cfg.epsilon_schedule.iter().copied().fold(f64::INFINITY, f64::min) * scale
        } else {
            0.0
        }
    }

    /// Largest `|B_k u|` over terms.
    pub fn gradient_scale(&self, u: &[f64]) -> f64 {
        let mut z = Vec::new();
        let mut m = 0.0f64;
        for k in 0..self.st.term_count() {
            self.st.apply(k, u, &mut z);
            m = m.max(z.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        m
    }

    fn objective(&self, u: &[f64], eps: f64) -> f64 {
        let p = self.p;
        let mut z = Vec::new();
        let mut total = 0.0;
        for k in 0..self.st.term_count() {
            self.st.apply(k, u, &mut z);
            let s = eps * eps + z.iter().map(|x| x * x).sum::<f64>();
            if s > 0.0 {
                total += self.st.coef(k) * s.powf(0.5 * p);
            }
        }
        total / p - self.vars.iter().map(|&i| self.load[i] * u[i]).sum::<f64>()
    }

    /// Regularized gradient over the unknowns and, optionally, Hessian values.
    fn derivatives(&self, u: &[f64], eps: f64, hess: Option<&mut Vec<f64>>) -> Vec<f64> {
        let p = self.p;
        let nv = self.vars.len();
        let mut g = vec![0.0; nv];
        let mut h = hess;
        if let Some(h) = h.as_deref_mut() {
            h.clear();
            h.resize(self.pattern.nnz(), 0.0);
        }
        let mut z = Vec::new();
        let mut bz = Vec::new();
        for k in 0..self.st.term_count() {
            let s_nodes = &self.supp[self.supp_start[k]..self.supp_start[k + 1]];
            let m = s_nodes.len();
            if m == 0 {
                continue;
            }
            let loc = &self.local[self.local_start[k]..self.local_start[k + 1]];
            let rows = loc.len() / m;
            z.clear();
            for r in 0..rows {
                z.push((0..m).map(|a| loc[r * m + a] * u[s_nodes[a]]).sum::<f64>());
            }
            let n2: f64 = z.iter().map(|x| x * x).sum();
            let s = eps * eps + n2;
            let c = self.st.coef(k);
            let (alpha, beta) = if p == 2.0 {
                (c, 0.0)
            } else if s == 0.0 {
                continue;
            } else {
                (c * s.powf(0.5 * p - 1.0), c * (p - 2.0) * s.powf(0.5 * p - 2.0))
            };
            bz.clear();
            for a in 0..m {
                bz.push((0..rows).map(|r| loc[r * m + a] * z[r]).sum::<f64>());
            }
            for a in 0..m {
                let v = self.var_of[s_nodes[a]];
                if v != FIXED {
                    g[v] += alpha * bz[a];
                }
            }
            if let Some(h) = h.as_deref_mut() {
                let sl = &self.slots[self.slot_start[k]..self.slot_start[k + 1]];
                for a in 0..m {
                    for b in 0..m {
                        let slot = sl[a * m + b];
                        if slot == FIXED {
                            continue;
                        }
                        let btb: f64 = (0..rows).map(|r| loc[r * m + a] * loc[r * m + b]).sum();
                        h[slot] += alpha * btb + beta * bz[a] * bz[b];
                    }
                }
            }
        }
        for (v, &i) in self.vars.iter().enumerate() {
            g[v] -= self.load[i];
        }
        g
    }

    fn scatter(&self, u: &mut [f64], x: &[f64]) {
        for (v, &i) in self.vars.iter().enumerate() {
            u[i] = x[v];
        }
    }

    fn gather(&self, u: &[f64]) -> Vec<f64> {
        self.vars.iter().map(|&i| u[i]).collect()
    }

    /// Runs the configured method from `u0` (fixed entries already set).
    pub fn run(&self, u0: Vec<f64>, cfg: &SolverConfig, target: f64) -> Result<Outcome> {
        if self.vars.is_empty() {
            return Ok(Outcome { u: u0, iterations: 0, residual: 0.0, method: Method::Newton });
        }
        let schedule = self.schedule(cfg);
        let scale = match self.gradient_scale(&u0) {
            s if s > 0.0 => s,
            _ => 1.0,
        };
        match cfg.method {
            Method::Newton => self.newton(u0, &schedule, scale, cfg, target),
            Method::Descent => self.descent(u0, &schedule, scale, cfg, target, 0),
            Method::Auto => match self.newton(u0.clone(), &schedule, scale, cfg, target) {
                Ok(out) => Ok(out),
                Err(Error::NonConvergence { .. }) | Err(Error::NotSpd { .. }) => {
                    self.descent(u0, &schedule, scale, cfg, target, 0)
                }
                Err(e) => Err(e),
            },
        }
    }

    fn schedule(&self, cfg: &SolverConfig) -> Vec<f64> {
        if self.p == 2.0 {
            return vec![0.0];
        }
        let mut out = Vec::new();
        if self.p < 2.0 {
            // from a rough start most terms sit far outside the smoothed
            // regime and Newton overshoots |z|^{p-1}; begin nearly quadratic
            let first = cfg.epsilon_schedule[0];
            out.extend([1.0, 0.1].into_iter().filter(|&e| e > first));
        }
        out.extend_from_slice(&cfg.epsilon_schedule);
        out
    }

    fn newton(
        &self,
        mut u: Vec<f64>,
        schedule: &[f64],
        scale: f64,
        cfg: &SolverConfig,
        target: f64,
    ) -> Result<Outcome> {
        let res_eps = self.residual_eps(cfg, scale);
        let mut hv = Vec::new();
        let mut chol: Option<CscCholesky<f64>> = None;
        let mut iterations = 0;
        let last = schedule.len() - 1;
        for (stage, &eps_rel) in schedule.iter().enumerate() {
            let eps = eps_rel * scale;
            let final_stage = stage == last;
            let mut phi = self.objective(&u, eps);
            loop {
                if final_stage {
                    let r = self.residual(&u, res_eps);
                    if r <= target {
                        return Ok(Outcome { residual: r, u, iterations, method: Method::Newton });
                    }
                }
                if iterations >= cfg.max_iter {
                    return Err(Error::NonConvergence { iterations, residual: self.residual(&u, res_eps), target });
                }
                iterations += 1;
                let g = self.derivatives(&u, eps, Some(&mut hv));
                let gmax = max_abs(&g);
                if !final_stage && gmax <= target {
                    break;
                }
                let d = self.newton_direction(&mut chol, &hv, &g)?;
                let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
                if !(slope < 0.0) {
                    if final_stage {
                        return Err(Error::NonConvergence { iterations, residual: self.residual(&u, res_eps), target });
                    }
                    break;
                }
                let x = self.gather(&u);
                let mut t = 1.0;
                let mut trial = u.clone();
                // below this the objective cannot resolve a decrease
                let noise = 1e-12 * phi.abs().max(f64::MIN_POSITIVE);
                let accepted = loop {
                    let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                    self.scatter(&mut trial, &xt);
                    let pt = self.objective(&trial, eps);
                    if pt <= phi + 1e-4 * t * slope {
                        break Some(pt);
                    }
                    if pt <= phi + noise && max_abs(&self.derivatives(&trial, eps, None)) < gmax {
                        break Some(pt);
                    }
                    t *= 0.5;
                    if t < 1e-14 {
                        break None;
                    }
                };
                match accepted {
                    Some(pt) => {
                        let decrease = phi - pt;
                        u = trial;
                        phi = pt;
                        if !final_stage && decrease <= cfg.energy_rtol * phi.abs().max(f64::MIN_POSITIVE) {
                            break;
                        }
                    }
                    None => {
                        if final_stage {
                            let r = self.residual(&u, res_eps);
                            if r <= target {
                                return Ok(Outcome { u, iterations, residual: r, method: Method::Newton });
                            }
                            return Err(Error::NonConvergence { iterations, residual: r, target });
                        }
                        break;
                    }
                }
            }
        }
        unreachable!("final stage always returns")
    }

    /// Solves `H d = -g`, adding a growing diagonal shift when the factorization fails.
    fn newton_direction(&self, chol: &mut Option<CscCholesky<f64>>, hv: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        let maxdiag = self.diag_slot.iter().map(|&s| hv[s].abs()).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
        let mut shift = 0.0;
        let mut values = hv.to_vec();
        for _ in 0..12 {
            if shift > 0.0 {
                values.copy_from_slice(hv);
                for &s in &self.diag_slot {
                    values[s] += shift;
                }
            }
            let ok = match chol {
                Some(c) => c.refactor(&values).is_ok(),
                None => {
                    let m = CscMatrix::try_from_pattern_and_values(self.pattern.clone(), values.clone())
                        .expect("pattern and values agree");
                    match CscCholesky::factor(&m) {
                        Ok(c) => {
                            *chol = Some(c);
                            true
                        }
                        Err(_) => false,
                    }
                }
            };
            if ok {
                let rhs = DVector::from_iterator(g.len(), g.iter().map(|x| -x));
                let sol = chol.as_ref().unwrap().solve(&rhs);
                let d: Vec<f64> = sol.column(0).iter().copied().collect();
                if d.iter().all(|x| x.is_finite()) {
                    return Ok(d);
                }
            }
            shift = if shift == 0.0 { 1e-12 * maxdiag } else { shift * 100.0 };
        }
        Err(Error::NotSpd { node: 0 })
    }

    /// Accelerated gradient descent with adaptive step and restarts.
    fn descent(
        &self,
        mut u: Vec<f64>,
        schedule: &[f64],
        scale: f64,
        cfg: &SolverConfig,
        target: f64,
        already: usize,
    ) -> Result<Outcome> {
        let res_eps = self.residual_eps(cfg, scale);
        let cap = already + cfg.max_iter.saturating_mul(100);
        let mut iterations = already;
        let last = schedule.len() - 1;
        for (stage, &eps_rel) in schedule.iter().enumerate() {
            let eps = eps_rel * scale;
            let final_stage = stage == last;
            let mut x = self.gather(&u);
            let mut y = x.clone();
            let mut t_mom = 1.0f64;
            let mut lip = 1.0f64;
            let mut work = u.clone();
            let mut phi_x = self.objective(&u, eps);
            loop {
                if final_stage {
                    let r = self.residual(&u, res_eps);
                    if r <= target {
                        return Ok(Outcome { u, iterations, residual: r, method: Method::Descent });
                    }
                }
                if iterations >= cap {
                    return Err(Error::NonConvergence { iterations, residual: self.residual(&u, res_eps), target });
                }
                iterations += 1;
                self.scatter(&mut work, &y);
                let gy = self.derivatives(&work, eps, None);
                let gmax = gy.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if !final_stage && gmax <= target {
                    break;
                }
                let phi_y = self.objective(&work, eps);
                let g2: f64 = gy.iter().map(|v| v * v).sum();
                // backtracking on the local Lipschitz estimate
                let (x_new, phi_new) = loop {
                    let cand: Vec<f64> = y.iter().zip(&gy).map(|(a, b)| a - b / lip).collect();
                    self.scatter(&mut work, &cand);
                    let pc = self.objective(&work, eps);
                    if pc <= phi_y - 0.5 * g2 / lip || lip > 1e300 {
                        break (cand, pc);
                    }
                    lip *= 2.0;
                };
                if phi_new > phi_x {
                    // restart momentum
                    t_mom = 1.0;
                    y = x.clone();
                    continue;
                }
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_mom * t_mom).sqrt());
                let mom = (t_mom - 1.0) / t_next;
                y = x_new.iter().zip(&x).map(|(a, b)| a + mom * (a - b)).collect();
                let decrease = phi_x - phi_new;
                x = x_new;
                phi_x = phi_new;
                t_mom = t_next;
                lip *= 0.9;
                self.scatter(&mut u, &x);
                if !final_stage && decrease <= cfg.energy_rtol * phi_x.abs().max(f64::MIN_POSITIVE) {
                    break;
                }
            }
        }
        unreachable!("final stage always returns")
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
