use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use serde_json::{json, Value};
use sqr_core::copula::{
    correlation_matrix, estimate_dof, fit_copula, matheron_variogram, pseudo_observations, t_scores, CopulaFit, LagBins,
    Weighting,
};
use sqr_core::kernels::{Design, Grid, KernelFamily, KernelSpec};
use sqr_core::sampler::{draw_curves, GenerativeModel, Samples};
use sqr_core::simgen::{gen_noise_variants, gen_sim2, NoiseLevel, Sim1Config, Sim2Config};
use sqr_core::sqr::{
    fit_quantile, fit_quantile_admm, fit_surface, gacv, select_lambda, AdmmOptions, Dataset, FitOptions, LambdaPolicy,
    QuantileFit, QuantileSurface,
};

use crate::args::{BenchmarkArgs, FitArgs, PipelineArgs, SampleArgs, SimulateArgs};
use crate::config::{parse_tau_grid, Settings};
use crate::error::{CliError, Result};
use crate::io::{self, fmt, Artifacts, Layout};

/// How a command finished when it did not fail outright.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Artifacts were written but some solver stopped short.
    NotConverged(Vec<String>),
}

impl Status {
    pub fn exit_code(&self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::NotConverged(_) => 2,
        }
    }

    fn from_flags(flags: Vec<String>) -> Self {
        if flags.is_empty() {
            Status::Ok
        } else {
            Status::NotConverged(flags)
        }
    }
}

const KERNEL_DEFAULTS: [(&str, &str); 6] =
    [("kernel", "gaussian"), ("sigma", "0.2"), ("sigma2", "1"), ("c1", "1"), ("c2", "1"), ("degree", "2")];

fn kernel_from(s: &Settings) -> Result<KernelSpec> {
    let sigma = s.f64("sigma")?;
    let family = match s.require("kernel")? {
        "gaussian" => KernelFamily::Gaussian { sigma },
        "laplace" => KernelFamily::Laplace { sigma },
        "inverse_quadratic" => KernelFamily::InverseQuadratic { sigma },
        "polynomial" => {
            let degree = u32::try_from(s.usize("degree")?).map_err(|_| CliError::Input("degree is too large".into()))?;
            KernelFamily::Polynomial { sigma2: sigma * sigma, degree }
        }
        "mixture" => KernelFamily::WeightedSum {
            c1: s.f64("c1")?,
            k1: Box::new(KernelFamily::Gaussian { sigma }),
            c2: s.f64("c2")?,
            k2: Box::new(KernelFamily::Laplace { sigma: s.f64("sigma2")? }),
        },
        other => return Err(CliError::Input(format!("unknown kernel '{other}'"))),
    };
    Ok(KernelSpec::new(family)?)
}

fn weighting_from(v: &str) -> Result<Weighting> {
    match v {
        "cressie_wls" => Ok(Weighting::CressieWls),
        "genton" => Ok(Weighting::Genton),
        _ => Err(CliError::Input(format!("weighting must be cressie_wls or genton, got '{v}'"))),
    }
}

fn weighting_name(w: Weighting) -> &'static str {
    match w {
        Weighting::CressieWls => "cressie_wls",
        Weighting::Genton => "genton",
    }
}

fn tau_in_range(tau: f64) -> Result<f64> {
    if tau > 0.0 && tau < 1.0 {
        Ok(tau)
    } else {
        Err(CliError::Input(format!("tau must lie in (0, 1), got {tau}")))
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 {
        Ok(v)
    } else {
        Err(CliError::Input(format!("'{key}' must be positive, got {v}")))
    }
}

fn load(s: &Settings) -> Result<(Vec<String>, Dataset)> {
    let layout = Layout::parse(s.require("layout")?)?;
    io::load_dataset(&s.path("x")?, &s.path("y")?, &s.path("grid")?, layout)
}

fn manifest(command: &str, s: &Settings, results: Value, artifacts: &Artifacts) -> Value {
    let mut files: Vec<String> = artifacts.names().to_vec();
    files.push("manifest.json".into());
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": s.map(),
        "results": results,
        "artifacts": files,
    })
}

fn timing(stages: &[(&str, f64)]) -> Value {
    let total: f64 = stages.iter().map(|(_, t)| t).sum();
    let mut map = serde_json::Map::new();
    for (k, t) in stages {
        map.insert(k.to_string(), json!(t));
    }
    json!({ "wall_seconds": total, "stages": map })
}

fn coefficient_csv(names: &[String], fit: &QuantileFit, grid: &Grid) -> String {
    let mut header: Vec<String> = (1..=grid.dim()).map(|d| format!("dim{d}")).collect();
    header.extend(names.iter().map(|n| format!("beta_{n}")));
    let rows = (0..grid.len()).map(|j| {
        let mut row: Vec<String> = grid.point(j).iter().map(|v| fmt(*v)).collect();
        row.extend((0..fit.p()).map(|k| fmt(fit.beta_grid[(k, j)])));
        row
    });
    io::csv_text(Some(&header), rows)
}

fn dual_csv(fit: &QuantileFit, data: &Dataset) -> String {
    if data.is_fixed() {
        io::matrix_csv(None, &fit.dual_matrix())
    } else {
        let layout = data.layout();
        let header: Vec<String> = ["subject", "location", "d"].iter().map(|v| v.to_string()).collect();
        let rows = (0..data.n_obs())
            .map(|o| vec![layout.subject(o).to_string(), layout.location(o).to_string(), fmt(fit.dual[o])]);
        io::csv_text(Some(&header), rows)
    }
}

fn fit_summary(fit: &QuantileFit, data: &Dataset) -> Value {
    json!({
        "tau": fit.tau,
        "lambda": fit.lambda,
        "se_size": fit.se_size(),
        "gacv": gacv(fit, data).ok(),
        "objective": fit.objective,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "mu": fit.mu.as_slice(),
        "n": data.n(),
        "m": data.m(),
        "p": data.p(),
    })
}

const FIT_DEFAULTS: [(&str, &str); 3] = [("layout", "wide"), ("tau", "0.5"), ("out", "sqr-out")];

fn fit_settings(a: &FitArgs, extra: (&str, &str)) -> Result<Settings> {
    let defaults: Vec<(&str, &str)> = FIT_DEFAULTS.iter().chain(&KERNEL_DEFAULTS).chain([&extra]).copied().collect();
    Settings::resolve(FitArgs::KEYS, &defaults, a.config.as_deref(), &a.pairs())
}

/// `fit`: one quantile level at a fixed lambda.
pub fn cmd_fit(a: &FitArgs) -> Result<Status> {
    let s = fit_settings(a, ("lambda", "1"))?;
    s.threads()?;
    let tau = tau_in_range(s.f64("tau")?)?;
    let lambda = positive("lambda", s.f64("lambda")?)?;
    let kernel = kernel_from(&s)?;
    let (names, data) = load(&s)?;
    let mut art = Artifacts::new(&s.path("out")?)?;
    let t0 = Instant::now();
    let fit = fit_quantile(&data, tau, lambda, &kernel, &FitOptions::default())?;
    let elapsed = t0.elapsed().as_secs_f64();
    write_fit(&mut art, &names, &fit, &data)?;
    art.write_json("timing.json", &timing(&[("fit", elapsed)]))?;
    let m = manifest("fit", &s, fit_summary(&fit, &data), &art);
    art.write_json("manifest.json", &m)?;
    art.commit()?;
    Ok(Status::from_flags(if fit.converged { vec![] } else { vec![format!("fit at tau = {tau}")] }))
}

fn write_fit(art: &mut Artifacts, names: &[String], fit: &QuantileFit, data: &Dataset) -> Result<()> {
    art.write("coefficients.csv", &coefficient_csv(names, fit, data.grid()))?;
    art.write("dual.csv", &dual_csv(fit, data))
}

/// `select`: GACV over a lambda grid, then the artifacts of the winning fit.
pub fn cmd_select(a: &FitArgs) -> Result<Status> {
    let s = fit_settings(a, ("lambdas", "0.001,0.01,0.1,1,10,100"))?;
    s.threads()?;
    let tau = tau_in_range(s.f64("tau")?)?;
    let lambdas = s.f64_list("lambdas")?;
    for l in &lambdas {
        positive("lambdas", *l)?;
    }
    let kernel = kernel_from(&s)?;
    let (names, data) = load(&s)?;
    let mut art = Artifacts::new(&s.path("out")?)?;
    let t0 = Instant::now();
    let sel = select_lambda(&data, tau, &kernel, &lambdas, &FitOptions::default())?;
    let elapsed = t0.elapsed().as_secs_f64();
    let header = vec!["lambda".to_string(), "gacv".to_string()];
    let rows = sel.table.iter().map(|(l, g)| vec![fmt(*l), g.map(fmt).unwrap_or_default()]);
    art.write("gacv.csv", &io::csv_text(Some(&header), rows))?;
    write_fit(&mut art, &names, &sel.fit, &data)?;
    art.write_json("timing.json", &timing(&[("select", elapsed)]))?;
    let m = manifest("select", &s, fit_summary(&sel.fit, &data), &art);
    art.write_json("manifest.json", &m)?;
    art.commit()?;
    Ok(Status::from_flags(if sel.fit.converged { vec![] } else { vec![format!("fit at lambda = {}", sel.lambda)] }))
}

fn surface_csv(names: &[String], surface: &QuantileSurface) -> String {
    let mut header = vec!["tau".to_string(), "location".to_string()];
    header.extend(names.iter().map(|n| format!("beta_{n}")));
    let mut rows = Vec::new();
    for fit in &surface.fits {
        for j in 0..fit.beta_grid.ncols() {
            let mut row = vec![fmt(fit.tau), j.to_string()];
            row.extend((0..fit.p()).map(|k| fmt(fit.beta_grid[(k, j)])));
            rows.push(row);
        }
    }
    io::csv_text(Some(&header), rows)
}

fn samples_csv(draws: &[(usize, Samples)]) -> String {
    let m = draws.first().map_or(0, |(_, d)| d.y.ncols());
    let mut header = vec!["row".to_string(), "draw".to_string()];
    header.extend((1..=m).map(|j| format!("y{j}")));
    let rows = draws.iter().flat_map(|(row, d)| {
        (0..d.y.nrows()).map(move |r| {
            let mut v = vec![row.to_string(), r.to_string()];
            v.extend(d.y.row(r).iter().map(|y| fmt(*y)));
            v
        })
    });
    io::csv_text(Some(&header), rows)
}

fn covariate_rows(path: &Path, p: usize) -> Result<DMatrix<f64>> {
    let (_, x) = io::read_covariates(path)?;
    if x.ncols() != p {
        return Err(CliError::Parse { path: path.to_path_buf(), message: format!("expected {p} covariates, found {}", x.ncols()) });
    }
    Ok(x)
}

fn copula_json(fit: &CopulaFit, estimated: bool, profile: Option<&[(f64, f64)]>) -> Value {
    json!({
        "dof": fit.dof,
        "dof_estimated": estimated,
        "dof_profile": profile.map(|p| p.iter().map(|(d, l)| json!([d, l])).collect::<Vec<_>>()),
        "nu": fit.nu,
        "alpha": fit.alpha,
        "objective": fit.objective,
        "weighting": weighting_name(fit.weighting),
        "converged": fit.converged,
    })
}

fn staged<T>(stage: &'static str, r: std::result::Result<T, impl Into<CliError>>) -> Result<T> {
    r.map_err(|e| CliError::in_stage(stage)(e.into()))
}

/// `pipeline`: surface, pseudo-observations, copula, samples and p-values.
pub fn cmd_pipeline(a: &PipelineArgs) -> Result<Status> {
    let defaults: Vec<(&str, &str)> = [
        ("layout", "wide"),
        ("taus", "default"),
        ("lambda", "1"),
        ("per_tau", "false"),
        ("nu", "2.5"),
        ("dof", "estimate"),
        ("pair_budget", "200"),
        ("weighting", "cressie_wls"),
        ("n_samples", "100"),
        ("sample_row", "0"),
        ("seed", "0"),
        ("out", "sqr-out"),
    ]
    .iter()
    .chain(&KERNEL_DEFAULTS)
    .copied()
    .collect();
    let s = Settings::resolve(PipelineArgs::KEYS, &defaults, a.config.as_deref(), &a.pairs())?;
    s.threads()?;
    let taus = parse_tau_grid(s.require("taus")?)?;
    let policy = match s.get("lambdas") {
        Some(_) => {
            let grid = s.f64_list("lambdas")?;
            for l in &grid {
                positive("lambdas", *l)?;
            }
            if s.bool("per_tau")? {
                LambdaPolicy::PerTau(grid)
            } else {
                LambdaPolicy::Shared(grid)
            }
        }
        None => LambdaPolicy::Fixed(positive("lambda", s.f64("lambda")?)?),
    };
    let kernel = kernel_from(&s)?;
    let nu = positive("nu", s.f64("nu")?)?;
    let fixed_dof = match s.require("dof")? {
        "estimate" => None,
        _ => {
            let d = s.f64("dof")?;
            if !(d > 2.0) {
                return Err(CliError::Input(format!("dof must exceed 2, got {d}")));
            }
            Some(d)
        }
    };
    let pair_budget = s.usize("pair_budget")?;
    let weighting = weighting_from(s.require("weighting")?)?;
    let n_samples = s.usize("n_samples")?;
    let seed = s.u64("seed")?;
    let (names, data) = load(&s)?;
    let conditioning = match s.get("covariates") {
        Some(p) => covariate_rows(Path::new(p), data.p())?,
        None => {
            let row = s.usize("sample_row")?;
            if row >= data.n() {
                return Err(CliError::Input(format!("sample_row {row} is outside X (n = {})", data.n())));
            }
            data.x().rows(row, 1).into_owned()
        }
    };
    if !data.is_fixed() {
        return Err(CliError::Input("the copula stages need the wide (fixed-design) layout".into()));
    }

    let mut art = Artifacts::new(&s.path("out")?)?;
    let mut times = Vec::new();
    let mut flags = Vec::new();

    let t = Instant::now();
    let surface = staged("surface", fit_surface(&data, &taus, &kernel, &policy, &FitOptions::default()))?;
    times.push(("surface", t.elapsed().as_secs_f64()));
    for f in surface.fits.iter().filter(|f| !f.converged) {
        flags.push(format!("fit at tau = {}", f.tau));
    }
    art.write("surface.csv", &surface_csv(&names, &surface))?;
    art.write("grid.csv", &io::grid_csv(data.grid()))?;

    let t = Instant::now();
    let pseudo = staged("pseudo_observations", pseudo_observations(&surface, &data))?;
    times.push(("pseudo_observations", t.elapsed().as_secs_f64()));
    art.write("pseudo.csv", &io::matrix_csv(None, &pseudo.u))?;

    let t = Instant::now();
    let (dof, profile) = match fixed_dof {
        Some(d) => (d, None),
        None => {
            let est = staged("estimate_dof", estimate_dof(&pseudo.u, pair_budget, seed))?;
            (est.dof, Some(est.profile))
        }
    };
    times.push(("estimate_dof", t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let bins = LagBins::for_grid(data.grid());
    let z = t_scores(&pseudo.u, dof);
    let cloud = staged("variogram", matheron_variogram(&z, &bins, dof))?;
    times.push(("variogram", t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let copula = staged("copula", fit_copula(&cloud, data.x(), nu, weighting, Some((&bins, data.grid()))))?;
    times.push(("copula", t.elapsed().as_secs_f64()));
    if !copula.converged {
        flags.push("copula fit".into());
    }
    art.write_json("copula.json", &copula_json(&copula, fixed_dof.is_none(), profile.as_deref()))?;

    let t = Instant::now();
    let model = staged("sample", GenerativeModel::new(surface, copula, data.grid().clone()))?;
    let mut draws = Vec::new();
    for r in 0..conditioning.nrows() {
        let x: Vec<f64> = conditioning.row(r).iter().copied().collect();
        draws.push((r, staged("sample", model.sample_y(&x, n_samples, seed.wrapping_add(r as u64)))?));
    }
    art.write("samples.csv", &samples_csv(&draws))?;
    let y = data.response_matrix().expect("fixed design");
    let mut pvals = DMatrix::zeros(data.n(), data.m());
    for i in 0..data.n() {
        let obs: Vec<f64> = y.row(i).iter().copied().collect();
        let curve = staged("pvalues", model.pvalue_curve(&data.x_row(i), &obs))?;
        for (j, v) in curve.into_iter().enumerate() {
            pvals[(i, j)] = v;
        }
    }
    art.write("pvalues.csv", &io::matrix_csv(None, &pvals))?;
    times.push(("sample", t.elapsed().as_secs_f64()));

    art.write_json("timing.json", &timing(&times))?;
    let results = json!({
        "taus": model.surface.taus.len(),
        "lambdas": model.surface.fits.iter().map(|f| f.lambda).collect::<Vec<_>>(),
        "copula": copula_json(&model.copula, fixed_dof.is_none(), None),
        "excluded_lags": cloud.excluded,
        "flags": flags,
    });
    let m = manifest("pipeline", &s, results, &art);
    art.write_json("manifest.json", &m)?;
    art.commit()?;
    Ok(Status::from_flags(flags))
}

/// Coefficient tables written by `pipeline`, indexed `[tau][location][k]`.
struct StoredSurface {
    taus: Vec<f64>,
    beta: Vec<Vec<Vec<f64>>>,
}

impl StoredSurface {
    fn read(path: &Path, m: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let bad = |message: String| CliError::Parse { path: path.to_path_buf(), message };
        let p = rdr.headers().map_err(|e| bad(e.to_string()))?.len().saturating_sub(2);
        if p == 0 {
            return Err(bad("line 1: no coefficient columns".into()));
        }
        let mut taus: Vec<f64> = Vec::new();
        let mut beta: Vec<Vec<Vec<f64>>> = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let line = r + 2;
            let rec = rec.map_err(|e| bad(format!("line {line}: {e}")))?;
            let num = |c: usize| -> Result<f64> {
                rec.get(c)
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("line {line}, column {}: expected a number", c + 1)))
            };
            let tau = num(0)?;
            let loc = num(1)? as usize;
            if taus.last() != Some(&tau) {
                taus.push(tau);
                beta.push(Vec::new());
            }
            let block = beta.last_mut().expect("pushed above");
            if loc != block.len() {
                return Err(bad(format!("line {line}: locations must be listed in order")));
            }
            block.push((0..p).map(|k| num(2 + k)).collect::<Result<Vec<_>>>()?);
        }
        if taus.is_empty() || beta.iter().any(|b| b.len() != m) {
            return Err(bad(format!("every tau needs {m} locations")));
        }
        Ok(StoredSurface { taus, beta })
    }

    fn p(&self) -> usize {
        self.beta[0][0].len()
    }

    /// Quantile curve per location, rearranged to be nondecreasing in tau.
    fn curves(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let m = self.beta[0].len();
        (0..m)
            .map(|j| {
                let mut q: Vec<f64> =
                    self.beta.iter().map(|b| b[j].iter().zip(x).map(|(c, v)| c * v).sum()).collect();
                q.sort_by(f64::total_cmp);
                q
            })
            .collect()
    }
}

fn read_copula(path: &Path) -> Result<CopulaFit> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    let bad = |what: &str| CliError::Parse { path: path.to_path_buf(), message: format!("missing or invalid '{what}'") };
    let num = |k: &str| v.get(k).and_then(Value::as_f64).ok_or_else(|| bad(k));
    let alpha = v
        .get("alpha")
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
        .ok_or_else(|| bad("alpha"))?;
    let weighting = weighting_from(v.get("weighting").and_then(Value::as_str).ok_or_else(|| bad("weighting"))?)?;
    Ok(CopulaFit {
        dof: num("dof")?,
        nu: num("nu")?,
        alpha,
        weighting,
        objective: num("objective")?,
        converged: v.get("converged").and_then(Value::as_bool).unwrap_or(true),
    })
}

/// `sample`: draws from a model directory written by `pipeline`.
pub fn cmd_sample(a: &SampleArgs) -> Result<Status> {
    let defaults = [("n_samples", "100"), ("seed", "0"), ("out", "sqr-out")];
    let s = Settings::resolve(SampleArgs::KEYS, &defaults, a.config.as_deref(), &a.pairs())?;
    s.threads()?;
    let model = s.path("model")?;
    let n_samples = s.usize("n_samples")?;
    let seed = s.u64("seed")?;
    let grid = io::read_grid(&model.join("grid.csv"), Design::Fixed)?;
    let surface = StoredSurface::read(&model.join("surface.csv"), grid.len())?;
    let copula = read_copula(&model.join("copula.json"))?;
    if !(copula.dof > 2.0) || copula.alpha.len() != surface.p() {
        return Err(CliError::Input("copula.json does not match surface.csv".into()));
    }
    let covariates = covariate_rows(&s.path("covariates")?, surface.p())?;
    let mut art = Artifacts::new(&s.path("out")?)?;
    let t = Instant::now();
    let mut draws = Vec::new();
    for r in 0..covariates.nrows() {
        let x: Vec<f64> = covariates.row(r).iter().copied().collect();
        let corr = correlation_matrix(&x, &copula, &grid);
        let d = draw_curves(&surface.taus, &surface.curves(&x), &corr, copula.dof, n_samples, seed.wrapping_add(r as u64))?;
        draws.push((r, d));
    }
    art.write("samples.csv", &samples_csv(&draws))?;
    art.write_json("timing.json", &timing(&[("sample", t.elapsed().as_secs_f64())]))?;
    let m = manifest("sample", &s, json!({ "rows": covariates.nrows(), "n_samples": n_samples }), &art);
    art.write_json("manifest.json", &m)?;
    art.commit()?;
    Ok(Status::Ok)
}

/// `simulate`: writes one simulated data set in the input formats.
pub fn cmd_simulate(a: &SimulateArgs) -> Result<Status> {
    let defaults = [("design", "sim1"), ("n", "100"), ("m", "100"), ("noise", "moderate"), ("seed", "0"), ("out", "sqr-out")];
    let s = Settings::resolve(SimulateArgs::KEYS, &defaults, a.config.as_deref(), &a.pairs())?;
    s.threads()?;
    let (n, m, seed) = (s.usize("n")?, s.usize("m")?, s.u64("seed")?);
    let mut art = Artifacts::new(&s.path("out")?)?;
    let names: Vec<String> = ["x0", "x1", "x2"].iter().map(|v| v.to_string()).collect();
    let truth_header: Vec<String> = ["beta_x0", "beta_x1", "beta_x2"].iter().map(|v| v.to_string()).collect();
    let results = match s.require("design")? {
        "sim1" => {
            let noise = match s.require("noise")? {
                "moderate" => NoiseLevel::Moderate,
                "high" => NoiseLevel::High,
                "matern" => NoiseLevel::Matern,
                v => return Err(CliError::Input(format!("noise must be moderate, high or matern, got '{v}'"))),
            };
            let sim = gen_noise_variants(&Sim1Config::new(n, m, seed), noise)?;
            write_data(&mut art, &names, &sim.data)?;
            art.write("beta.csv", &io::matrix_csv(Some(&truth_header), &sim.beta.transpose()))?;
            json!({ "design": "sim1", "n": n, "m": m })
        }
        "sim2" => {
            let sim = gen_sim2(&Sim2Config::new(n, m, seed))?;
            write_data(&mut art, &names, &sim.data)?;
            art.write("u.csv", &io::matrix_csv(None, &sim.u))?;
            art.write("beta_median.csv", &io::matrix_csv(Some(&truth_header), &sim.beta(0.5).transpose()))?;
            json!({ "design": "sim2", "n": n, "m": m, "alpha": sim.alpha, "nu": sim.nu })
        }
        v => return Err(CliError::Input(format!("design must be sim1 or sim2, got '{v}'"))),
    };
    let m = manifest("simulate", &s, results, &art);
    art.write_json("manifest.json", &m)?;
    art.commit()?;
    Ok(Status::Ok)
}

fn write_data(art: &mut Artifacts, names: &[String], data: &Dataset) -> Result<()> {
    art.write("X.csv", &io::matrix_csv(Some(names), data.x()))?;
    art.write("Y.csv", &io::matrix_csv(None, &data.response_matrix().expect("simulated designs are fixed")))?;
    art.write("grid.csv", &io::grid_csv(data.grid()))
}

/// One `(n, m, tau)` cell of the solver benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub m: usize,
    pub tau: f64,
    pub reps: usize,
    pub pd_times: Vec<f64>,
    pub admm_times: Vec<f64>,
    pub pd_objectives: Vec<f64>,
    pub admm_objectives: Vec<f64>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl BenchRow {
    /// Largest relative objective gap over the repetitions.
    pub fn max_rel_gap(&self) -> f64 {
        self.pd_objectives
            .iter()
            .zip(&self.admm_objectives)
            .map(|(p, a)| (a - p).abs() / p.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> bool {
        !(self.max_rel_gap() <= 1e-4)
    }

    pub fn pd_time(&self) -> (f64, f64) {
        mean_sd(&self.pd_times)
    }

    pub fn admm_time(&self) -> (f64, f64) {
        mean_sd(&self.admm_times)
    }
}

/// Times both solvers on `reps` additive-error data sets; repetition `r`
/// uses data seed `seed + r`.
pub fn benchmark_cell(n: usize, m: usize, tau: f64, reps: usize, lambda: f64, sigma: f64, seed: u64) -> Result<BenchRow> {
    let kernel = KernelSpec::gaussian(sigma)?;
    let mut row = BenchRow { n, m, tau, reps, pd_times: vec![], admm_times: vec![], pd_objectives: vec![], admm_objectives: vec![] };
    for r in 0..reps {
        let sim = gen_noise_variants(&Sim1Config::new(n, m, seed + r as u64), NoiseLevel::Moderate)?;
        let t = Instant::now();
        let pd = fit_quantile(&sim.data, tau, lambda, &kernel, &FitOptions::default())?;
        row.pd_times.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let admm = fit_quantile_admm(&sim.data, tau, lambda, &kernel, &AdmmOptions::default())?;
        row.admm_times.push(t.elapsed().as_secs_f64());
        row.pd_objectives.push(pd.objective);
        row.admm_objectives.push(admm.objective);
    }
    Ok(row)
}

fn parse_sizes(v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(|cell| {
            let (a, b) = cell.trim().split_once('x').ok_or_else(|| CliError::Input(format!("size '{cell}' is not NxM")))?;
            let parse = |t: &str| t.parse::<usize>().map_err(|_| CliError::Input(format!("size '{cell}' is not NxM")));
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

/// `benchmark`: the timing table of primal-dual against ADMM.
pub fn cmd_benchmark(a: &BenchmarkArgs) -> Result<Status> {
    let defaults =
        [("sizes", "50x50,100x100"), ("taus", "0.5"), ("reps", "3"), ("lambda", "1"), ("sigma", "0.2"), ("seed", "0"), ("out", "sqr-out")];
    let s = Settings::resolve(BenchmarkArgs::KEYS, &defaults, a.config.as_deref(), &a.pairs())?;
    s.threads()?;
    let sizes = parse_sizes(s.require("sizes")?)?;
    let taus = s.f64_list("taus")?;
    for t in &taus {
        tau_in_range(*t)?;
    }
    let reps = s.usize("reps")?;
    if reps == 0 {
        return Err(CliError::Input("reps must be at least 1".into()));
    }
    let lambda = positive("lambda", s.f64("lambda")?)?;
    let sigma = positive("sigma", s.f64("sigma")?)?;
    let seed = s.u64("seed")?;
    let mut art = Artifacts::new(&s.path("out")?)?;
    let mut rows = Vec::new();
    for &(n, m) in &sizes {
        for &tau in &taus {
            rows.push(benchmark_cell(n, m, tau, reps, lambda, sigma, seed)?);
        }
    }
    let header: Vec<String> = [
        "n", "m", "tau", "reps", "pd_mean_s", "pd_sd_s", "admm_mean_s", "admm_sd_s", "speedup", "pd_objective",
        "admm_objective", "max_rel_gap", "flagged",
    ]
    .iter()
    .map(|v| v.to_string())
    .collect();
    let table = rows.iter().map(|r| {
        let (pm, ps) = r.pd_time();
        let (am, asd) = r.admm_time();
        vec![
            r.n.to_string(),
            r.m.to_string(),
            fmt(r.tau),
            r.reps.to_string(),
            fmt(pm),
            fmt(ps),
            fmt(am),
            fmt(asd),
            fmt(am / pm),
            fmt(mean_sd(&r.pd_objectives).0),
            fmt(mean_sd(&r.admm_objectives).0),
            fmt(r.max_rel_gap()),
            r.flagged().to_string(),
        ]
    });
    art.write("benchmark.csv", &io::csv_text(Some(&header), table))?;
    let flagged: Vec<String> =
        rows.iter().filter(|r| r.flagged()).map(|r| format!("n = {}, m = {}, tau = {}", r.n, r.m, r.tau)).collect();
    let results = json!({
        "cells": rows.iter().map(|r| json!({
            "n": r.n, "m": r.m, "tau": r.tau,
            "pd_objectives": r.pd_objectives, "admm_objectives": r.admm_objectives,
            "flagged": r.flagged(),
        })).collect::<Vec<_>>(),
    });
    let total: f64 = rows.iter().map(|r| r.pd_times.iter().chain(&r.admm_times).sum::<f64>()).sum();
    art.write_json("timing.json", &timing(&[("benchmark", total)]))?;
    let m = manifest("benchmark", &s, results, &art);
    art.write_json("manifest.json", &m)?;
    art.commit()?;
    if !flagged.is_empty() {
        log::warn!("objective mismatch above 1e-4 in: {}", flagged.join("; "));
    }
    Ok(Status::Ok)
}
