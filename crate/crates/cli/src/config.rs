use std::path::{Path, PathBuf};

use fraclap_core::cheeger::{AnisotropyDoc, DifferentialStructure};
use fraclap_core::extension::{build_product_extension, DomainDoc, ExtensionDomain, FractionalParams, LayerSpec};
use fraclap_core::solve::SolverConfig;
use fraclap_core::space::{estimate_mass_exponents, MetricMeasureSpace, SpaceDoc};
use fraclap_core::verify::{member_rng, product_mass_exponent};
use fraclap_core::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Where the boundary space comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum SpaceSpec {
    Cycle(usize),
    Path(usize),
    Grid([usize; 2]),
    ScaledCycle { n: usize, h: f64 },
    File(PathBuf),
    Inline(SpaceDoc),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    pub p: f64,
    pub theta: f64,
    /// Dampens the built domain by `min(1, d^-beta)`.
    #[serde(default)]
    pub beta: Option<f64>,
    /// Mass exponent used for the dampening check; estimated when absent.
    #[serde(default)]
    pub q_mu: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "generator", deny_unknown_fields)]
pub enum Generator {
    Zeros,
    /// Uniform on `[-1, 1]`, recentred to `nu`-mean zero.
    Random {
        #[serde(default)]
        seed: Option<u64>,
    },
    /// `+1` on points `plus[0]..plus[1]`, `-1` on `minus[0]..minus[1]`, zero elsewhere.
    Step {
        plus: [usize; 2],
        #[serde(default)]
        minus: Option<[usize; 2]>,
    },
    Atom {
        at: usize,
        #[serde(default = "one")]
        mass: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSpec {
    Values { values: Vec<f64> },
    Generated(Generator),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    Dirichlet,
    #[default]
    Neumann,
    NeumannExhaustion,
    FracApply,
    FracSolve,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSpec {
    #[serde(default)]
    pub problem: Problem,
    #[serde(default = "default_k_max")]
    pub k_max: u32,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Optional bound for the a-priori energy ratio.
    #[serde(default)]
    pub bound: Option<f64>,
}

fn default_k_max() -> u32 {
    5
}

impl Default for SolveSpec {
    fn default() -> Self {
        Self { problem: Problem::default(), k_max: default_k_max(), solver: SolverConfig::default(), bound: None }
    }
}

/// Options for the verification suites. Missing entries take defaults that
/// depend on the space.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    #[serde(default)]
    pub suite: Option<String>,
    #[serde(default)]
    pub ensemble_size: Option<usize>,
    /// Perturbation sizes for the stability fit.
    #[serde(default)]
    pub ts: Option<Vec<f64>>,
    /// Boundary points where the data vanishes; defaults to the zero set of the data.
    #[serde(default)]
    pub window: Option<Vec<usize>>,
    #[serde(default)]
    pub radii: Option<Vec<f64>>,
    /// Integrability exponent of the data; `null` means infinity.
    #[serde(default)]
    pub q: Option<f64>,
    #[serde(default)]
    pub xi: Option<usize>,
    #[serde(default)]
    pub r0: Option<f64>,
    #[serde(default)]
    pub q_mu: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub region: Option<Vec<usize>>,
    #[serde(default)]
    pub n_samples: Option<usize>,
    #[serde(default)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub space: Option<SpaceSpec>,
    #[serde(default)]
    pub params: Option<ParamsSpec>,
    #[serde(default)]
    pub extension: LayerSpec,
    #[serde(default)]
    pub base_point: Option<usize>,
    #[serde(default)]
    pub base_radius: Option<f64>,
    /// A previously built domain; replaces `space`, `params` and `extension`.
    #[serde(default)]
    pub domain: Option<PathBuf>,
    #[serde(default)]
    pub anisotropy: Option<AnisotropyDoc>,
    #[serde(default)]
    pub data: Option<DataSpec>,
    #[serde(default)]
    pub solve: SolveSpec,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// A parsed config together with the raw bytes and the directory that
/// relative paths refer to.
pub struct Loaded {
    pub config: RunConfig,
    pub bytes: Vec<u8>,
    pub base_dir: PathBuf,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Error::Parse(format!("cannot read config {}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_slice(&bytes)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, bytes, base_dir })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

impl Loaded {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn space(&self) -> Result<MetricMeasureSpace> {
        let spec = self.config.space.as_ref().ok_or_else(|| Error::InvalidParams("config needs a \"space\"".into()))?;
        match spec {
            SpaceSpec::Cycle(n) => positive(*n, "cycle").map(MetricMeasureSpace::cycle),
            SpaceSpec::Path(n) => positive(*n, "path").map(MetricMeasureSpace::path),
            SpaceSpec::Grid([nx, ny]) => Ok(MetricMeasureSpace::grid(positive(*nx, "grid")?, positive(*ny, "grid")?)),
            SpaceSpec::ScaledCycle { n, h } => {
                if !(*h > 0.0 && h.is_finite()) {
                    return Err(Error::InvalidParams(format!("cycle spacing must be positive, got {h}")));
                }
                Ok(MetricMeasureSpace::scaled_cycle(positive(*n, "cycle")?, *h))
            }
            SpaceSpec::File(p) => read_json::<SpaceDoc>(&self.resolve(p))?.into_space(),
            SpaceSpec::Inline(doc) => doc.clone().into_space(),
        }
    }

    /// Builds (or loads) the domain, then applies base point, radius and dampening.
    pub fn domain(&self) -> Result<ExtensionDomain> {
        let cfg = &self.config;
        let mut domain = match &cfg.domain {
            Some(p) => ExtensionDomain::from_doc(read_json::<DomainDoc>(&self.resolve(p))?)?,
            None => {
                let spec = cfg.params.as_ref().ok_or_else(|| Error::InvalidParams("config needs \"params\"".into()))?;
                let params = FractionalParams::new(spec.p, spec.theta)?;
                let z = self.space()?;
                build_product_extension(&z, params, &cfg.extension)?
            }
        };
        if let Some(x0) = cfg.base_point {
            domain = domain.with_base_point(x0)?;
        }
        if let Some(r) = cfg.base_radius {
            domain = domain.with_base_radius(r)?;
        }
        if cfg.domain.is_none() {
            if let Some(beta) = cfg.params.as_ref().and_then(|s| s.beta) {
                let q_mu = match cfg.params.as_ref().and_then(|s| s.q_mu) {
                    Some(q) => q,
                    None => {
                        let profile = estimate_mass_exponents(domain.space(), 8)?;
                        product_mass_exponent(profile.q_mu, domain.params().weight_exponent())
                    }
                };
                domain = domain.dampen(beta, q_mu)?;
            }
        }
        Ok(domain)
    }

    pub fn structure(&self, domain: &ExtensionDomain) -> Result<DifferentialStructure> {
        match &self.config.anisotropy {
            Some(doc) => DifferentialStructure::from_doc(domain, doc.clone()),
            None => Ok(DifferentialStructure::Isotropic),
        }
    }

    /// Boundary data of length `|Z|`, or `None` when the config has none.
    pub fn data(&self, z: &MetricMeasureSpace, seed: u64) -> Result<Option<Vec<f64>>> {
        let n = z.len();
        let Some(spec) = &self.config.data else {
            return Ok(None);
        };
        let values = match spec {
            DataSpec::Values { values } => {
                if values.len() != n {
                    return Err(Error::DimensionMismatch { what: "data values", expected: n, got: values.len() });
                }
                values.clone()
            }
            DataSpec::Generated(Generator::Zeros) => vec![0.0; n],
            DataSpec::Generated(Generator::Random { seed: s }) => {
                let mut rng = member_rng(s.unwrap_or(seed), 0);
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mean = v.iter().zip(z.nu()).map(|(a, b)| a * b).sum::<f64>() / z.total_mass();
                v.into_iter().map(|x| x - mean).collect()
            }
            DataSpec::Generated(Generator::Step { plus, minus }) => {
                let mut v = vec![0.0; n];
                fill(&mut v, *plus, 1.0)?;
                if let Some(m) = minus {
                    fill(&mut v, *m, -1.0)?;
                }
                v
            }
            DataSpec::Generated(Generator::Atom { at, mass }) => {
                if *at >= n {
                    return Err(Error::InvalidParams(format!("atom point {at} out of range")));
                }
                let mut v = vec![0.0; n];
                v[*at] = *mass;
                v
            }
        };
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidParams(format!("data value at point {i} is not finite")));
        }
        Ok(Some(values))
    }
}

fn positive(n: usize, what: &str) -> Result<usize> {
    if n < 2 {
        return Err(Error::InvalidParams(format!("{what} needs at least 2 points, got {n}")));
    }
    Ok(n)
}

fn fill(v: &mut [f64], range: [usize; 2], value: f64) -> Result<()> {
    let [a, b] = range;
    if a > b || b > v.len() {
        return Err(Error::InvalidParams(format!("range {a}..{b} outside 0..{}", v.len())));
    }
    v[a..b].iter_mut().for_each(|x| *x = value);
    Ok(())
}
