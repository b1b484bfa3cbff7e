use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::extension::ExtensionDomain;

/// Constant `d_theta = 2^{1-2 theta} Gamma(1-theta) / Gamma(theta)` relating the
/// Neumann flux of the weighted extension to `lambda^theta`.
pub fn extension_constant(theta: f64) -> f64 {
    2f64.powf(1.0 - 2.0 * theta) * gamma(1.0 - theta) / gamma(theta)
}

/// Spectral decomposition of the `nu`-weighted graph Laplacian on `Z`, built
/// from the same neighbour pairs as the first interior layer.
#[derive(Debug, Clone)]
pub struct SpectralOracle {
    nu: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// Columns are `nu`-orthonormal eigenvectors.
    vectors: DMatrix<f64>,
    laplacian: DMatrix<f64>,
}

impl SpectralOracle {
    pub fn new(domain: &ExtensionDomain) -> Result<Self> {
        let p = domain.params().p();
        if p != 2.0 {
            return Err(Error::RequiresP2 { p });
        }
        let z = domain.space();
        let mut pairs = Vec::new();
        for e in domain.edges() {
            if domain.layer_of(e.i) == 1 && domain.layer_of(e.j) == 1 {
                pairs.push((domain.column_of(e.i), domain.column_of(e.j)));
            }
        }
        let n = z.len();
        let nu = z.nu().to_vec();
        let mut k = DMatrix::<f64>::zeros(n, n);
        for (i, j) in pairs {
            let l = z.dist(i, j);
            let w = 2.0 * nu[i] * nu[j] / (nu[i] + nu[j]) / (l * l);
            k[(i, i)] += w;
            k[(j, j)] += w;
            k[(i, j)] -= w;
            k[(j, i)] -= w;
        }
        let s = DVector::from_iterator(n, nu.iter().map(|m| 1.0 / m.sqrt()));
        let mut sym = k.clone();
        for i in 0..n {
            for j in 0..n {
                sym[(i, j)] *= s[i] * s[j];
            }
        }
        let eig = SymmetricEigen::new(sym);
        let mut vectors = eig.eigenvectors;
        for i in 0..n {
            for c in 0..n {
                vectors[(i, c)] *= s[i];
            }
        }
        let mut laplacian = k;
        for i in 0..n {
            for j in 0..n {
                laplacian[(i, j)] /= nu[i];
            }
        }
        Ok(Self { nu, eigenvalues: eig.eigenvalues.iter().copied().collect(), vectors, laplacian })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `N^{-1} K`.
    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    fn apply_power(&self, u: &[f64], power: f64) -> Vec<f64> {
        let n = self.nu.len();
        let top = self.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut out = vec![0.0; n];
        for (c, &lam) in self.eigenvalues.iter().enumerate() {
            // the constant mode carries no weight on the zero-mean span
            if lam <= 1e-10 * top {
                continue;
            }
            let coef: f64 = (0..n).map(|i| self.vectors[(i, c)] * self.nu[i] * u[i]).sum();
            let scale = lam.powf(power) * coef;
            for (i, o) in out.iter_mut().enumerate() {
                *o += scale * self.vectors[(i, c)];
            }
        }
        out
    }

    /// `lambda^theta` on the zero-mean span; the constant mode maps to zero.
    pub fn forward(&self, u: &[f64], theta: f64) -> Vec<f64> {
        self.apply_power(u, theta)
    }

    /// `lambda^{-theta}` on the zero-mean span.
    pub fn inverse(&self, f: &[f64], theta: f64) -> Vec<f64> {
        self.apply_power(f, -theta)
    }
}

/// The oracle applied once: `lambda^theta u` (forward) or `lambda^{-theta} u`.
pub fn spectral_oracle_p2(domain: &ExtensionDomain, values: &[f64], theta: f64, inverse: bool) -> Result<Vec<f64>> {
    if values.len() != domain.boundary_len() {
        return Err(Error::DimensionMismatch { what: "boundary function", expected: domain.boundary_len(), got: values.len() });
    }
    let o = SpectralOracle::new(domain)?;
    Ok(if inverse { o.inverse(values, theta) } else { o.forward(values, theta) })
}
