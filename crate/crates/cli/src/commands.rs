use std::fmt::Write as _;
use std::path::PathBuf;

use fraclap_core::cheeger::{gradient, DifferentialStructure};
use fraclap_core::extension::ExtensionDomain;
use fraclap_core::nonlocal::{frac_apply_full, frac_solve};
use fraclap_core::solve::{
    a_priori_check, solve_dirichlet, solve_neumann, solve_neumann_exhaustion, BoundaryData, Solution,
};
use fraclap_core::space::{check_codimension, estimate_mass_exponents};
use fraclap_core::verify::{
    check_energy_equivalence, check_harnack, estimate_holder, makalainen_check, measure_stability_exponent,
    member_rng, oracle_comparison, Report, Table, Verdict,
};
use fraclap_core::{Error, Result};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Loaded, Problem};

pub const SUITES: [&str; 6] = ["equivalence", "stability", "harnack", "holder", "makalainen", "oracle-p2"];

/// Errors carry the exit code they map to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(e: impl std::fmt::Display) -> Self {
        Self { code: 2, message: e.to_string() }
    }

    /// Errors raised after validation. Those that still point at bad input keep code 2.
    pub fn runtime(e: Error) -> Self {
        let code = match e {
            Error::InvalidParams(_)
            | Error::DimensionMismatch { .. }
            | Error::NonzeroMean { .. }
            | Error::NegativeData { .. }
            | Error::RequiresP2 { .. }
            | Error::BetaTooSmall { .. }
            | Error::DisconnectedComponentWithoutBoundary { .. } => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

/// Collects output files so the report can list every one of them.
pub struct Output {
    dir: PathBuf,
    manifest: Vec<String>,
}

impl Output {
    pub fn new(dir: PathBuf) -> std::result::Result<Self, Failure> {
        std::fs::create_dir_all(&dir)
            .map_err(|e| Failure { code: 1, message: format!("cannot create {}: {e}", dir.display()) })?;
        Ok(Self { dir, manifest: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> std::result::Result<(), Failure> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| Failure { code: 1, message: format!("cannot write {}: {e}", path.display()) })?;
        self.manifest.push(name.to_string());
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> std::result::Result<(), Failure> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure { code: 1, message: e.to_string() })?;
        s.push('\n');
        self.write(name, &s)
    }
}

#[derive(Debug, Serialize)]
pub struct CheckVerdict {
    pub check: String,
    pub verdict: Verdict,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config_fingerprint: String,
    pub seed: u64,
    pub verdicts: Vec<CheckVerdict>,
    pub manifest: Vec<String>,
    pub details: Value,
}

/// 64-bit FNV-1a of the raw config bytes.
pub fn config_fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub struct Context<'a> {
    pub loaded: &'a Loaded,
    pub seed: u64,
    pub out: Output,
}

fn validated(loaded: &Loaded) -> std::result::Result<(ExtensionDomain, DifferentialStructure), Failure> {
    let domain = loaded.domain().map_err(Failure::config)?;
    let structure = loaded.structure(&domain).map_err(Failure::config)?;
    loaded.config.solve.solver.validate().map_err(Failure::config)?;
    Ok((domain, structure))
}

fn finish(mut ctx: Context, command: &str, verdicts: Vec<CheckVerdict>, details: Value) -> std::result::Result<Vec<CheckVerdict>, Failure> {
    let mut manifest = ctx.out.manifest.clone();
    manifest.push("report.json".into());
    let report = RunReport {
        command: command.into(),
        config_fingerprint: config_fingerprint(&ctx.loaded.bytes),
        seed: ctx.seed,
        verdicts,
        manifest,
        details,
    };
    ctx.out.write_json("report.json", &report)?;
    Ok(report.verdicts)
}

pub fn build(mut ctx: Context) -> std::result::Result<Vec<CheckVerdict>, Failure> {
    let (domain, _) = validated(ctx.loaded)?;
    let z = domain.space();
    let params = domain.params();
    let doubling = estimate_mass_exponents(z, 8).map_err(|e| e.to_string());
    let codim = check_codimension(z, &domain, params.theta_cap(), params.p(), None).map_err(|e| e.to_string());
    ctx.out.write_json("domain.json", &domain.to_doc())?;
    let diagnostics = json!({
        "doubling": either(doubling),
        "codimension": either(codim),
    });
    ctx.out.write_json("diagnostics.json", &diagnostics)?;
    let details = json!({
        "nodes": domain.node_count(),
        "edges": domain.edges().len(),
        "layers": domain.layer_count(),
        "boundary_points": domain.boundary_len(),
        "base_point": domain.base_point(),
        "base_radius": domain.base_radius(),
    });
    finish(ctx, "build", Vec::new(), details)
}

fn either<T: Serialize>(r: std::result::Result<T, String>) -> Value {
    match r {
        Ok(v) => serde_json::to_value(v).unwrap_or(Value::Null),
        Err(e) => json!({ "error": e }),
    }
}

fn solution_csv(domain: &ExtensionDomain, structure: &DifferentialStructure, u: &[f64], p: f64) -> Result<String> {
    let grad = gradient(domain, structure, u, p)?;
    let mut s = String::from("node_id,layer,y,u,grad_mag\n");
    for (i, v) in u.iter().enumerate() {
        writeln!(s, "{},{},{},{},{}", i, domain.layer_of(i), domain.y_of(i), v, grad.magnitude[i]).unwrap();
    }
    Ok(s)
}

fn point_csv(values: &[f64]) -> String {
    let mut s = String::from("point_id,value\n");
    for (i, v) in values.iter().enumerate() {
        writeln!(s, "{i},{v}").unwrap();
    }
    s
}

fn solution_details(sol: &Solution) -> Value {
    json!({
        "energy": sol.energy,
        "el_residual": sol.el_residual,
        "iterations": sol.iterations,
        "normalization": sol.normalization,
        "method": sol.method,
    })
}

fn require_data(loaded: &Loaded, domain: &ExtensionDomain, seed: u64) -> std::result::Result<Vec<f64>, Failure> {
    loaded
        .data(domain.space(), seed)
        .map_err(Failure::config)?
        .ok_or_else(|| Failure::config("config needs \"data\" for this command"))
}

fn boundary_data(domain: &ExtensionDomain, f: Vec<f64>) -> std::result::Result<BoundaryData, Failure> {
    BoundaryData::new(domain.space(), domain.params(), f, Some(domain.base_point())).map_err(Failure::config)
}

pub fn solve(mut ctx: Context) -> std::result::Result<Vec<CheckVerdict>, Failure> {
    let (domain, structure) = validated(ctx.loaded)?;
    let spec = ctx.loaded.config.solve.clone();
    let cfg = &spec.solver;
    let p = cfg.p.unwrap_or(domain.params().p());
    let values = require_data(ctx.loaded, &domain, ctx.seed)?;
    let rt = Failure::runtime;
    let details = match spec.problem {
        Problem::Dirichlet => {
            let sol = solve_dirichlet(&domain, &structure, p, &values, cfg).map_err(rt)?;
            ctx.out.write("solution.csv", &solution_csv(&domain, &structure, &sol.u, p).map_err(rt)?)?;
            solution_details(&sol)
        }
        Problem::Neumann => {
            let data = boundary_data(&domain, values)?;
            let sol = solve_neumann(&domain, &structure, p, &data, cfg).map_err(rt)?;
            ctx.out.write("solution.csv", &solution_csv(&domain, &structure, &sol.u, p).map_err(rt)?)?;
            let mut d = solution_details(&sol);
            d["a_priori"] = serde_json::to_value(a_priori_check(&sol, &data, p, spec.bound)).unwrap_or(Value::Null);
            d
        }
        Problem::NeumannExhaustion => {
            let data = boundary_data(&domain, values)?;
            let rep = solve_neumann_exhaustion(&domain, &structure, p, &data, spec.k_max, cfg).map_err(rt)?;
            ctx.out.write("solution.csv", &solution_csv(&domain, &structure, &rep.solution.u, p).map_err(rt)?)?;
            let mut t = String::from("k,active_points,tail_norm_j,increment,energy,el_residual\n");
            for s in &rep.steps {
                let inc = s.increment.map(|x| x.to_string()).unwrap_or_default();
                writeln!(t, "{},{},{},{},{},{}", s.k, s.active_points, s.tail_norm_j, inc, s.energy, s.el_residual).unwrap();
            }
            ctx.out.write("exhaustion.csv", &t)?;
            let mut d = solution_details(&rep.solution);
            d["verdict"] = serde_json::to_value(rep.verdict).unwrap_or(Value::Null);
            d["steps"] = serde_json::to_value(&rep.steps).unwrap_or(Value::Null);
            d
        }
        Problem::FracApply => {
            let applied = frac_apply_full(&domain, &structure, &values, cfg).map_err(rt)?;
            ctx.out.write("frac_apply.csv", &point_csv(&applied.data.f))?;
            ctx.out.write("solution.csv", &solution_csv(&domain, &structure, &applied.extension, p).map_err(rt)?)?;
            json!({ "mean": applied.data.mean, "norm_j": applied.data.norm_j })
        }
        Problem::FracSolve => {
            let data = boundary_data(&domain, values)?;
            let v = frac_solve(&domain, &structure, &data, cfg).map_err(rt)?;
            ctx.out.write("frac_solve.csv", &point_csv(&v.values))?;
            let back = frac_apply_full(&domain, &structure, &v.values, cfg).map_err(rt)?;
            ctx.out.write("frac_apply.csv", &point_csv(&back.data.f))?;
            let z = domain.space();
            let mean = data.mean / z.total_mass();
            let centred: Vec<f64> = data.f.iter().map(|x| x - mean).collect();
            let scale = centred.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let err = back.data.f.iter().zip(&centred).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let round_trip = if scale > 0.0 { err / scale } else { err };
            json!({ "seminorm": v.seminorm, "round_trip_error": round_trip })
        }
    };
    finish(ctx, "solve", Vec::new(), details)
}

struct Defaults {
    min_spacing: f64,
    diam: f64,
}

fn dyadic(start: f64, stop: f64) -> Vec<f64> {
    let mut r = start;
    let mut out = Vec::new();
    while r <= stop {
        out.push(r);
        r *= 2.0;
    }
    out
}

pub fn verify(mut ctx: Context, suite: &str) -> std::result::Result<Vec<CheckVerdict>, Failure> {
    let selected: Vec<&str> = match suite {
        "all" => SUITES.to_vec(),
        s if SUITES.contains(&s) => vec![s],
        s => return Err(Failure::config(format!("unknown suite {s:?}; expected one of {} or all", SUITES.join(", ")))),
    };
    let (domain, structure) = validated(ctx.loaded)?;
    let z = domain.space();
    let defaults = Defaults { min_spacing: z.min_positive_distance().unwrap_or(1.0), diam: z.diameter() };
    let data = ctx.loaded.data(z, ctx.seed).map_err(Failure::config)?;
    let mut verdicts = Vec::new();
    let mut summary = serde_json::Map::new();
    for name in selected {
        let report = run_check(&ctx, name, &domain, &structure, data.as_deref(), &defaults)?;
        ctx.out.write_json(&format!("{name}.json"), &report)?;
        ctx.out.write(&format!("{name}.csv"), &report.table.to_csv())?;
        summary.insert(name.to_string(), json!(report.verdict));
        verdicts.push(CheckVerdict { check: name.to_string(), verdict: report.verdict });
    }
    let overall = if verdicts.iter().all(|v| v.verdict.is_ok()) { "ok" } else { "fail" };
    finish(ctx, "verify", verdicts, json!({ "suite": suite, "overall": overall, "checks": summary }))
}

fn run_check(
    ctx: &Context,
    name: &str,
    domain: &ExtensionDomain,
    structure: &DifferentialStructure,
    data: Option<&[f64]>,
    d: &Defaults,
) -> std::result::Result<Report, Failure> {
    let v = &ctx.loaded.config.verify;
    let cfg = &ctx.loaded.config.solve.solver;
    let seed = ctx.seed;
    let z = domain.space();
    let rt = Failure::runtime;
    let need = || data.map(|f| f.to_vec()).ok_or_else(|| Failure::config(format!("suite {name} needs \"data\"")));
    let radii = |fallback: Vec<f64>| v.radii.clone().unwrap_or(fallback);
    match name {
        "equivalence" => {
            let rep = check_energy_equivalence(domain, structure, v.ensemble_size.unwrap_or(20), seed, cfg).map_err(rt)?;
            rep.report(domain, seed).map_err(rt)
        }
        "stability" => {
            let f = boundary_data(domain, need()?)?;
            let mut rng = member_rng(seed, 1);
            let h: Vec<f64> = (0..z.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean = h.iter().zip(z.nu()).map(|(a, b)| a * b).sum::<f64>() / z.total_mass();
            let h: Vec<f64> = h.into_iter().map(|x| x - mean).collect();
            let ts = v.ts.clone().unwrap_or_else(|| (0..8).map(|k| 2f64.powi(-k)).collect());
            let rep = measure_stability_exponent(domain, structure, &f, &h, &ts, cfg).map_err(rt)?;
            rep.report(domain, seed).map_err(rt)
        }
        "harnack" => {
            let f = need()?;
            let window = match &v.window {
                Some(w) => w.clone(),
                None => (0..f.len()).filter(|&i| f[i] == 0.0).collect(),
            };
            if window.is_empty() {
                return Err(Failure::config("harnack needs a window where the data vanishes"));
            }
            let data = boundary_data(domain, f)?;
            let r = radii(vec![d.min_spacing, 2.0 * d.min_spacing, 4.0 * d.min_spacing]);
            let rep = check_harnack(domain, structure, &data, &window, &r, cfg).map_err(rt)?;
            rep.report(domain, seed).map_err(rt)
        }
        "holder" => {
            let data = boundary_data(domain, need()?)?;
            let q = v.q.unwrap_or(f64::INFINITY);
            let xi = v.xi.unwrap_or(domain.base_point());
            let r0 = v.r0.unwrap_or(d.diam / 4.0);
            let rep = estimate_holder(domain, structure, &data, q, xi, r0, v.q_mu, cfg).map_err(rt)?;
            rep.report(domain, seed).map_err(rt)
        }
        "makalainen" => {
            let f = need()?;
            let region = v.region.clone().unwrap_or_else(|| (0..z.len()).collect());
            let r = radii(dyadic(d.min_spacing, d.diam / 8.0));
            let rep = makalainen_check(domain, &f, &region, v.alpha.unwrap_or(0.5), &r).map_err(rt)?;
            rep.report(domain, seed).map_err(rt)
        }
        "oracle-p2" => {
            let p = domain.params().p();
            if p != 2.0 {
                let note = json!({ "reason": format!("the spectral oracle needs p = 2, got p = {p}") });
                return Report::new("oracle-p2", json!({ "p": p }), seed, Verdict::Informational, note, Table::new(&[]))
                    .map_err(rt);
            }
            let rep = oracle_comparison(domain, structure, v.n_samples.unwrap_or(8), seed, v.tolerance.unwrap_or(0.1), cfg)
                .map_err(rt)?;
            rep.report(domain, seed).map_err(rt)
        }
        _ => unreachable!("suite names are checked before dispatch"),
    }
}
