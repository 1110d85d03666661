use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use log::{info, warn};
use pgbart::diagnostics::{self, convergence_summary};
use pgbart::ingest::{
    gen_friedman, gen_simple, load_covariates, load_csv, ColumnKind, IngestError, ModelSpec, Schema, SimpleKind,
    SIMPLE_DEFAULT_N, SIMPLE_DEFAULT_NOISE,
};
use pgbart::interpret::{self, grid_for, InterpretOptions};
use pgbart::likelihood::LikelihoodError;
use pgbart::proposals::ConfigError;
use pgbart::sampler::{chain_seed, SamplerError};
use pgbart::trace::{checksum_files, read_trace, sha256_file, write_trace, RunManifest, TraceError};
use pgbart::{run_chains, LikelihoodSpec, Matrix, Trace};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::svg::{render, Mark, Panel};
use crate::{DiagnoseArgs, FitArgs, IceArgs, InterpretArgs, PdpArgs, PredictArgs, SimKind, SimulateArgs, ViArgs};

pub const DATASET_FILE: &str = "dataset.csv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const CONFIG_FILE: &str = "config.json";
pub const TRUTH_FILE: &str = "truth.csv";
const DEFAULT_RUN_DIR: &str = "pgbart-run";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 2,
    Data = 3,
    Sampling = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitKind,
    pub source: anyhow::Error,
}

type Result<T> = std::result::Result<T, CliError>;

fn fail(code: ExitKind, e: impl Into<anyhow::Error>) -> CliError {
    CliError { code, source: e.into() }
}

trait OrExit<T> {
    fn or_exit(self, code: ExitKind, what: &str) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for std::result::Result<T, E> {
    fn or_exit(self, code: ExitKind, what: &str) -> Result<T> {
        self.map_err(|e| fail(code, e.into().context(what.to_string())))
    }
}

fn likelihood_kind(e: &LikelihoodError) -> ExitKind {
    match e {
        LikelihoodError::Response { .. } | LikelihoodError::TransformDomain { .. } => ExitKind::Data,
        _ => ExitKind::Config,
    }
}

fn sampler_kind(e: &SamplerError) -> ExitKind {
    match e {
        SamplerError::Config(ConfigError::ZeroVariance | ConfigError::EmptyResponse) => ExitKind::Data,
        SamplerError::Config(_) | SamplerError::Model(_) => ExitKind::Config,
        SamplerError::Likelihood(l) => likelihood_kind(l),
        SamplerError::Resample => ExitKind::Sampling,
    }
}

fn ingest_kind(e: &IngestError) -> ExitKind {
    match e {
        IngestError::Argument(_) | IngestError::Config(_) => ExitKind::Config,
        IngestError::Likelihood(l) => likelihood_kind(l),
        IngestError::Sampler(s) => sampler_kind(s),
        _ => ExitKind::Data,
    }
}

fn ingest(e: IngestError, what: &str) -> CliError {
    let code = ingest_kind(&e);
    fail(code, anyhow::Error::new(e).context(what.to_string()))
}

fn absolute(p: &Path, base: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parse_batch(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |t: &str| {
        t.parse::<f64>()
            .map_err(|_| fail(ExitKind::Config, anyhow!("--batch: {t:?} is not a number")))
    };
    let b = match parts.as_slice() {
        [a] => (num(a)?, num(a)?),
        [a, b] => (num(a)?, num(b)?),
        _ => return Err(fail(ExitKind::Config, anyhow!("--batch takes one value or two comma-separated values"))),
    };
    if !(b.0 > 0.0 && b.0 <= 1.0 && b.1 > 0.0 && b.1 <= 1.0) {
        return Err(fail(ExitKind::Config, anyhow!("--batch fractions must lie in (0, 1]")));
    }
    Ok(b)
}

/// Applies command-line overrides and returns them as given.
fn apply_overrides(spec: &mut ModelSpec, a: &FitArgs, cwd: &Path) -> Result<Value> {
    let mut o = Map::new();
    if let Some(d) = &a.data {
        let target = a
            .target
            .clone()
            .or_else(|| spec.data.target.clone())
            .ok_or_else(|| fail(ExitKind::Config, anyhow!("--data needs --target (or data.target in the config)")))?;
        spec.data.path = Some(absolute(d, cwd));
        spec.data.target = Some(target);
        spec.data.generator = None;
        spec.data.events = None;
        o.insert("data".into(), json!(d));
    }
    if let Some(t) = &a.target {
        spec.data.target = Some(t.clone());
        o.insert("target".into(), json!(t));
    }
    macro_rules! set {
        ($flag:ident, $field:ident, $key:literal) => {
            if let Some(v) = a.$flag {
                spec.$field = v;
                o.insert($key.into(), json!(v));
            }
        };
    }
    set!(m, m, "m");
    set!(alpha, alpha, "alpha");
    set!(beta, beta, "beta");
    set!(particles, n_particles, "particles");
    set!(tune, tune, "tune");
    set!(draws, draws, "draws");
    set!(chains, chains, "chains");
    set!(seed, seed, "seed");
    set!(thin_forests, thin_forests, "thin_forests");
    if let Some(b) = &a.batch {
        spec.batch = parse_batch(b)?;
        o.insert("batch".into(), json!(b));
    }
    if let Some(out) = &a.out {
        o.insert("out".into(), json!(out));
    }
    if a.jobs != 0 {
        o.insert("jobs".into(), json!(a.jobs));
    }
    Ok(Value::Object(o))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).or_exit(ExitKind::Data, &format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).or_exit(ExitKind::Data, &format!("creating {}", path.display()))
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let cwd = std::env::current_dir().or_exit(ExitKind::Data, "reading the working directory")?;
    let (mut spec, base) = match &a.config {
        Some(p) => {
            let spec = ModelSpec::from_file(p).or_exit(ExitKind::Config, &format!("reading config {}", p.display()))?;
            let base = absolute(p.parent().unwrap_or(Path::new("")), &cwd);
            (spec, base)
        }
        None => (ModelSpec::default(), cwd.clone()),
    };
    let overrides = apply_overrides(&mut spec, a, &cwd)?;
    if a.config.is_none() && a.data.is_none() {
        return Err(fail(ExitKind::Config, anyhow!("give --config or --data")));
    }
    spec.data.path = spec.data.path.as_deref().map(|p| absolute(p, &base));
    spec.data.events = spec.data.events.as_deref().map(|p| absolute(p, &base));
    let out = match (&a.out, &spec.output) {
        (Some(o), _) => absolute(o, &cwd),
        (None, Some(o)) => absolute(o, &base),
        (None, None) => cwd.join(DEFAULT_RUN_DIR),
    };
    spec.output = Some(out.clone());
    spec.validate().map_err(|e| ingest(e, "invalid configuration"))?;

    let data = spec.data.load(&base).map_err(|e| ingest(e, "loading data"))?;
    info!("{} rows, {} covariates ({})", data.n(), data.p(), data.provenance);
    let model = spec.build_model(&data).map_err(|e| ingest(e, "building the model"))?;

    create_dir(&out)?;
    let manifest_path = out.join(pgbart::trace::MANIFEST_FILE);
    if manifest_path.exists() {
        warn!("replacing the existing run in {}", out.display());
        fs::remove_file(&manifest_path).or_exit(ExitKind::Data, "removing the old manifest")?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .or_exit(ExitKind::Config, "starting worker threads")?;
    let start = Instant::now();
    let trace = pool
        .install(|| run_chains(&model, spec.chains, spec.seed, &spec.run_settings()))
        .map_err(|e| fail(sampler_kind(&e), anyhow::Error::new(e).context("sampling")))?;
    let wall = start.elapsed().as_secs_f64();

    let mut files = write_trace(&out, &trace, &data.feature_names()).or_exit(ExitKind::Data, "writing the trace")?;
    data.write_csv(&out.join(DATASET_FILE))
        .map_err(|e| ingest(e, "writing the dataset"))?;
    if data.write_truth(&out.join(TRUTH_FILE)).map_err(|e| ingest(e, "writing the truth"))? {
        files.push(TRUTH_FILE.into());
    }
    let schema = serde_json::to_string_pretty(&data.schema()).expect("schema serializes");
    write_file(&out.join(SCHEMA_FILE), &schema)?;
    let config = serde_json::to_value(&spec).expect("config serializes");
    write_file(&out.join(CONFIG_FILE), &serde_json::to_string_pretty(&config).expect("json"))?;
    files.extend([DATASET_FILE.into(), SCHEMA_FILE.into(), CONFIG_FILE.into()]);

    let versions = BTreeMap::from([
        ("pgbart".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("trace_format".to_string(), "1".to_string()),
    ]);
    let manifest = RunManifest {
        config,
        overrides,
        seed: spec.seed,
        chain_seeds: (0..spec.chains).map(|c| chain_seed(spec.seed, c)).collect(),
        wall_time_secs: wall,
        versions,
        dataset_sha256: sha256_file(&out.join(DATASET_FILE)).or_exit(ExitKind::Data, "hashing the dataset")?,
        files: checksum_files(&out, &files).or_exit(ExitKind::Data, "hashing the trace")?,
    };
    manifest.write_atomic(&out).or_exit(ExitKind::Data, "writing the manifest")?;
    println!(
        "wrote {} ({} chains x {} draws, {:.1}s)",
        out.display(),
        trace.n_chains(),
        trace.n_draws(),
        wall
    );
    Ok(())
}

/// A finished run loaded back from disk.
struct Run {
    dir: PathBuf,
    schema: Schema,
    x: Matrix,
    link: LikelihoodSpec,
    trace: Trace,
}

fn open_run(dir: &Path) -> Result<Run> {
    let manifest = match RunManifest::read(dir) {
        Err(TraceError::Incomplete(_)) => {
            return Err(fail(
                ExitKind::Data,
                anyhow!("{} has no manifest; the run is incomplete or failed", dir.display()),
            ))
        }
        r => r.or_exit(ExitKind::Data, "reading the manifest")?,
    };
    for (name, sum) in &manifest.files {
        let got = sha256_file(&dir.join(name)).or_exit(ExitKind::Data, "verifying the run")?;
        if &got != sum {
            return Err(fail(ExitKind::Data, anyhow!("{name} does not match its checksum in the manifest")));
        }
    }
    let spec: ModelSpec = serde_json::from_value(manifest.config).or_exit(ExitKind::Data, "reading the config echo")?;
    let schema_path = dir.join(SCHEMA_FILE);
    let schema: Schema = serde_json::from_str(
        &fs::read_to_string(&schema_path).or_exit(ExitKind::Data, &format!("reading {}", schema_path.display()))?,
    )
    .or_exit(ExitKind::Data, "parsing the schema")?;
    let names: Vec<String> = schema.columns.iter().map(|c| c.name.clone()).collect();
    let categorical: Vec<String> = schema
        .columns
        .iter()
        .filter(|c| c.kind == ColumnKind::Categorical)
        .map(|c| c.name.clone())
        .collect();
    let data = load_csv(&dir.join(DATASET_FILE), &schema.target, Some(&names), &categorical)
        .map_err(|e| ingest(e, "reading the training data"))?;
    let link = spec.likelihood_spec(&data.y).map_err(|e| ingest(e, "rebuilding the likelihood"))?;
    let trace = read_trace(dir).or_exit(ExitKind::Data, "reading the trace")?;
    Ok(Run {
        dir: dir.to_path_buf(),
        schema,
        x: data.x,
        link,
        trace,
    })
}

fn check_prob(prob: f64) -> Result<()> {
    if prob > 0.0 && prob < 1.0 {
        Ok(())
    } else {
        Err(fail(ExitKind::Config, anyhow!("--prob must lie in (0, 1), got {prob}")))
    }
}

fn mean_hdi(values: &[f64], prob: f64) -> (f64, f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let (lo, hi) = diagnostics::hdi(values, prob).unwrap_or((values[0], values[0]));
    (mean, lo.min(mean), hi.max(mean))
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    check_prob(a.prob)?;
    let run = open_run(&a.run)?;
    let x = load_covariates(&a.data, &run.schema).map_err(|e| ingest(e, "reading covariates"))?;
    let snaps: Vec<_> = run.trace.snapshots().collect();
    if snaps.is_empty() {
        return Err(fail(ExitKind::Data, anyhow!("the run stored no forest snapshots")));
    }
    let d = run.trace.out_dim;
    let rows = (0..x.n_rows())
        .into_par_iter()
        .map(|i| {
            let mut per_dim = vec![Vec::with_capacity(snaps.len()); d];
            for s in &snaps {
                for (k, eta) in s.predict(x.row(i))?.into_iter().enumerate() {
                    per_dim[k].push(run.link.inverse_link(k, eta));
                }
            }
            Ok(per_dim.iter().map(|v| mean_hdi(v, a.prob)).collect::<Vec<_>>())
        })
        .collect::<std::result::Result<Vec<_>, pgbart::tree::TreeError>>()
        .or_exit(ExitKind::Data, "predicting")?;
    let mut text = String::from("row,dim,mean,hdi_low,hdi_high\n");
    for (i, r) in rows.iter().enumerate() {
        for (k, (m, lo, hi)) in r.iter().enumerate() {
            writeln!(text, "{i},{k},{m:?},{lo:?},{hi:?}").unwrap();
        }
    }
    match &a.out {
        Some(p) => write_file(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn output_dir(args: &InterpretArgs, run: &Run, name: &str) -> Result<PathBuf> {
    let out = args.out.clone().unwrap_or_else(|| run.dir.join(name));
    create_dir(&out)?;
    Ok(out)
}

fn options(args: &InterpretArgs) -> Result<InterpretOptions> {
    check_prob(args.prob)?;
    if args.draws == 0 {
        return Err(fail(ExitKind::Config, anyhow!("--draws must be >= 1")));
    }
    Ok(InterpretOptions {
        draws: args.draws,
        seed: args.seed,
        prob: args.prob,
    })
}

fn select_columns(schema: &Schema, names: &[String]) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Ok((0..schema.columns.len()).collect());
    }
    names
        .iter()
        .map(|n| {
            schema
                .columns
                .iter()
                .position(|c| &c.name == n)
                .ok_or_else(|| fail(ExitKind::Config, anyhow!("unknown covariate {n:?}")))
        })
        .collect()
}

fn interpret_err(e: interpret::InterpretError) -> CliError {
    use interpret::InterpretError as E;
    let code = match e {
        E::Grid(_) | E::Column { .. } => ExitKind::Config,
        _ => ExitKind::Data,
    };
    fail(code, e)
}

fn response_label(d: usize, k: usize) -> String {
    if d == 1 {
        "response".into()
    } else {
        format!("response[{k}]")
    }
}

fn panel_cols(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}

pub fn pdp(a: &PdpArgs) -> Result<()> {
    let run = open_run(&a.common.run)?;
    let opts = options(&a.common)?;
    let cols = select_columns(&run.schema, &a.columns)?;
    let out = output_dir(&a.common, &run, "pdp")?;
    let d = run.trace.out_dim;
    let mut text = String::from("column,grid,dim,mean,hdi_low,hdi_high\n");
    let mut panels = Vec::new();
    for j in cols {
        let meta = &run.schema.columns[j];
        let grid = grid_for(&run.x, j, a.grid, meta.kind == ColumnKind::Categorical).map_err(interpret_err)?;
        let res = interpret::pdp(&run.trace, &run.x, j, &grid, Some(&run.link), &opts).map_err(interpret_err)?;
        for p in &res.points {
            writeln!(text, "{},{:?},{},{:?},{:?},{:?}", meta.name, p.grid, p.dim, p.mean, p.low, p.high).unwrap();
        }
        for k in 0..d {
            let pts: Vec<_> = res.points.iter().filter(|p| p.dim == k).collect();
            panels.push(
                Panel::new(&meta.name, &meta.name, response_label(d, k))
                    .mark(Mark::Band(pts.iter().map(|p| (p.grid, p.low, p.high)).collect()))
                    .mark(Mark::Line(pts.iter().map(|p| (p.grid, p.mean)).collect())),
            );
        }
    }
    write_file(&out.join("pdp.csv"), &text)?;
    write_file(&out.join("pdp.svg"), &render(&panels, panel_cols(panels.len())))?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn ice(a: &IceArgs) -> Result<()> {
    let run = open_run(&a.common.run)?;
    let opts = options(&a.common)?;
    let cols = select_columns(&run.schema, &a.columns)?;
    let out = output_dir(&a.common, &run, "ice")?;
    let d = run.trace.out_dim;
    let mut text = String::from("column,row,grid,dim,value\n");
    let mut panels = Vec::new();
    for j in cols {
        let meta = &run.schema.columns[j];
        let grid = grid_for(&run.x, j, a.grid, meta.kind == ColumnKind::Categorical).map_err(interpret_err)?;
        let res =
            interpret::ice(&run.trace, &run.x, j, &grid, a.rows, Some(&run.link), &opts).map_err(interpret_err)?;
        for (r, curve) in res.rows.iter().zip(&res.curves) {
            for (g, values) in res.grid.iter().zip(curve) {
                for (k, v) in values.iter().enumerate() {
                    writeln!(text, "{},{r},{g:?},{k},{v:?}", meta.name).unwrap();
                }
            }
        }
        for k in 0..d {
            let mut panel = Panel::new(&meta.name, &meta.name, response_label(d, k));
            for curve in &res.curves {
                panel = panel.mark(Mark::Line(res.grid.iter().zip(curve).map(|(g, v)| (*g, v[k])).collect()));
            }
            panels.push(panel);
        }
    }
    write_file(&out.join("ice.csv"), &text)?;
    write_file(&out.join("ice.svg"), &render(&panels, panel_cols(panels.len())))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn vi(a: &ViArgs) -> Result<()> {
    let run = open_run(&a.common.run)?;
    let opts = options(&a.common)?;
    let out = output_dir(&a.common, &run, "vi")?;
    let res = interpret::variable_importance(&run.trace, &run.x, &opts).map_err(interpret_err)?;
    let name = |j: usize| run.schema.columns[j].name.as_str();

    let mut text = String::from("rank,column,importance\n");
    for (rank, &j) in res.ordering.iter().enumerate() {
        writeln!(text, "{},{},{:?}", rank + 1, name(j), res.normalized_importance[j]).unwrap();
    }
    write_file(&out.join("vi.csv"), &text)?;
    let mut r2 = String::from("k,r2_mean,r2_low,r2_high\n");
    for p in &res.r2_curve {
        writeln!(r2, "{},{},{},{}", p.k, opt(p.mean), opt(p.low), opt(p.high)).unwrap();
    }
    write_file(&out.join("r2.csv"), &r2)?;

    let importance = Panel::new("relative importance", "rank", "importance").mark(Mark::Line(
        res.ordering
            .iter()
            .enumerate()
            .map(|(r, &j)| ((r + 1) as f64, res.normalized_importance[j]))
            .collect(),
    ));
    let known: Vec<_> = res
        .r2_curve
        .iter()
        .filter_map(|p| Some((p.k as f64, p.mean?, p.low?, p.high?)))
        .collect();
    let curve = Panel::new("pruned model fit", "covariates kept", "r2")
        .mark(Mark::Band(known.iter().map(|&(k, _, lo, hi)| (k, lo, hi)).collect()))
        .mark(Mark::Line(known.iter().map(|&(k, m, _, _)| (k, m)).collect()))
        .mark(Mark::HLine(1.0));
    write_file(&out.join("vi.svg"), &render(&[importance, curve], 2))?;

    let order: Vec<&str> = res.ordering.iter().map(|&j| name(j)).collect();
    println!("{}", order.join(","));
    Ok(())
}

pub fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    let run = open_run(&a.run)?;
    let out = a.out.clone().unwrap_or_else(|| run.dir.join("diagnose"));
    create_dir(&out)?;
    let s = convergence_summary(&run.trace, !a.fixed_threshold).or_exit(ExitKind::Data, "computing diagnostics")?;
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    let with_rhat = s.rhat_threshold.is_some();
    let mut text = String::from(if with_rhat { "row,dim,ess,rhat\n" } else { "row,dim,ess\n" });
    for p in &s.points {
        match p.rhat {
            Some(r) => writeln!(text, "{},{},{:?},{r:?}", p.row, p.dim, p.ess).unwrap(),
            None => writeln!(text, "{},{},{:?}", p.row, p.dim, p.ess).unwrap(),
        }
    }
    write_file(&out.join("diagnostics.csv"), &text)?;

    let mut panels = vec![Panel::new("ESS", "ESS", "ECDF")
        .mark(Mark::Step(s.ess_ecdf.clone()))
        .mark(Mark::VLine(s.ess_reference))];
    if let (Some(ecdf), Some(t)) = (&s.rhat_ecdf, s.rhat_threshold) {
        panels.push(
            Panel::new("R-hat", "R-hat", "ECDF")
                .mark(Mark::Step(ecdf.clone()))
                .mark(Mark::VLine(t)),
        );
    }
    write_file(&out.join("convergence.svg"), &render(&panels, 2))?;

    let min_ess = s.points.iter().map(|p| p.ess).fold(f64::INFINITY, f64::min);
    let below_ref = s.points.iter().filter(|p| p.ess < s.ess_reference).count();
    println!("points: {}", s.points.len());
    println!("min ESS: {min_ess:.1} ({below_ref} below {})", s.ess_reference);
    if let (Some(t), Some(f)) = (s.rhat_threshold, s.fraction_below_threshold()) {
        println!("R-hat threshold: {t:.4}; fraction below: {f:.4}");
    }
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let data = match a.kind {
        SimKind::Friedman => gen_friedman(a.n.unwrap_or(200), a.p, a.noise.unwrap_or(1.0), a.seed),
        k => {
            let shape = match k {
                SimKind::Line => SimpleKind::Line,
                SimKind::Sine => SimpleKind::Sine,
                _ => SimpleKind::Step,
            };
            gen_simple(
                shape,
                a.n.unwrap_or(SIMPLE_DEFAULT_N),
                a.noise.unwrap_or(SIMPLE_DEFAULT_NOISE),
                a.seed,
            )
        }
    }
    .map_err(|e| ingest(e, "generating data"))?;
    create_dir(&a.out)?;
    data.write_csv(&a.out.join("data.csv"))
        .map_err(|e| ingest(e, "writing data"))?;
    data.write_truth(&a.out.join(TRUTH_FILE))
        .map_err(|e| ingest(e, "writing truth"))?;
    println!("wrote {} rows to {}", data.n(), a.out.display());
    Ok(())
}
