//! Data loading, synthetic generators and model configuration.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::likelihood::{init_response, theta_names_for, Family, InitTransform, Likelihood, LikelihoodError, LikelihoodSpec, Link, ThetaPrior};
use crate::matrix::Matrix;
use crate::proposals::SplitKind;
use crate::sampler::{Model, RunSettings, SamplerConfig, SamplerError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("row {row}, column {column:?}: cannot parse {value:?} as a number")]
    Parse { row: usize, column: String, value: String },
    #[error("column {0:?} not found")]
    MissingColumn(String),
    #[error("no feature columns selected")]
    EmptySelection,
    #[error("no complete rows")]
    NoRows,
    #[error("column {column:?}: unknown category {value:?}")]
    UnknownCategory { column: String, value: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
    /// Category labels in code order; empty for continuous columns.
    #[serde(default)]
    pub categories: Vec<String>,
}

/// Feature layout of a fitted model, used to read new covariates consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub target: String,
    pub columns: Vec<ColumnMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub columns: Vec<ColumnMeta>,
    pub target: String,
    /// Noise-free response for synthetic data.
    pub truth: Option<Vec<f64>>,
    pub provenance: String,
    /// Rows dropped for missing values.
    pub rejected_rows: usize,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.n_rows()
    }

    pub fn p(&self) -> usize {
        self.x.n_cols()
    }

    pub fn schema(&self) -> Schema {
        Schema {
            target: self.target.clone(),
            columns: self.columns.clone(),
        }
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Writes features and target, with categorical columns as their labels.
    pub fn write_csv(&self, path: &Path) -> Result<(), IngestError> {
        let cerr = |source| IngestError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(cerr)?;
        let mut header = self.feature_names();
        header.push(self.target.clone());
        w.write_record(&header).map_err(cerr)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self
                .columns
                .iter()
                .enumerate()
                .map(|(j, c)| match c.kind {
                    ColumnKind::Continuous => format!("{:?}", self.x.get(i, j)),
                    ColumnKind::Categorical => c.categories[self.x.get(i, j) as usize].clone(),
                })
                .collect();
            rec.push(format!("{:?}", self.y[i]));
            w.write_record(&rec).map_err(cerr)?;
        }
        w.flush().map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Writes `f` next to the row index when the dataset is synthetic.
    pub fn write_truth(&self, path: &Path) -> Result<bool, IngestError> {
        let Some(truth) = &self.truth else {
            return Ok(false);
        };
        let cerr = |source| IngestError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(cerr)?;
        w.write_record(["row", "f"]).map_err(cerr)?;
        for (i, f) in truth.iter().enumerate() {
            w.write_record([i.to_string(), format!("{f:?}")]).map_err(cerr)?;
        }
        w.flush().map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(true)
    }
}

fn is_missing(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "NaN" | "nan" | "null" | "NULL")
}

fn parse_cell(s: &str, row: usize, column: &str) -> Result<f64, IngestError> {
    let t = s.trim();
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(IngestError::Parse {
            row,
            column: column.to_string(),
            value: s.to_string(),
        }),
    }
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>), IngestError> {
    let cerr = |source| IngestError::Csv {
        path: path.to_path_buf(),
        source,
    };
    if !path.is_file() {
        return Err(IngestError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        });
    }
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(cerr)?;
    let header: Vec<String> = r.headers().map_err(cerr)?.iter().map(str::to_string).collect();
    let rows = r.records().collect::<Result<Vec<_>, _>>().map_err(cerr)?;
    Ok((header, rows))
}

/// Reads a CSV with a header row.
///
/// Numbers use `.` as decimal point regardless of locale. Categorical
/// columns are coded `0, 1, ...` by order of first appearance. Rows with a
/// missing cell (empty, `NA`, `NaN`, `null`) in a selected column are dropped
/// and counted. `features = None` selects every column except the target.
pub fn load_csv(
    path: &Path,
    target: &str,
    features: Option<&[String]>,
    categorical: &[String],
) -> Result<Dataset, IngestError> {
    let (header, rows) = read_table(path)?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let t = col(target)?;
    let feats: Vec<usize> = match features {
        Some(f) => f.iter().map(|n| col(n)).collect::<Result<_, _>>()?,
        None => (0..header.len()).filter(|&j| j != t).collect(),
    };
    if feats.is_empty() {
        return Err(IngestError::EmptySelection);
    }
    for c in categorical {
        col(c)?;
    }
    let mut columns: Vec<ColumnMeta> = feats
        .iter()
        .map(|&j| ColumnMeta {
            name: header[j].clone(),
            kind: if categorical.contains(&header[j]) {
                ColumnKind::Categorical
            } else {
                ColumnKind::Continuous
            },
            categories: Vec::new(),
        })
        .collect();
    let mut codes: Vec<HashMap<String, usize>> = vec![HashMap::new(); feats.len()];
    let mut data = Vec::with_capacity(rows.len() * feats.len());
    let mut y = Vec::with_capacity(rows.len());
    let mut rejected = 0;
    for (r, rec) in rows.iter().enumerate() {
        let line = r + 2;
        let cell = |j: usize| rec.get(j).unwrap_or("");
        if is_missing(cell(t)) || feats.iter().any(|&j| is_missing(cell(j))) {
            rejected += 1;
            continue;
        }
        y.push(parse_cell(cell(t), line, &header[t])?);
        for (k, &j) in feats.iter().enumerate() {
            let v = match columns[k].kind {
                ColumnKind::Continuous => parse_cell(cell(j), line, &header[j])?,
                ColumnKind::Categorical => {
                    let label = cell(j).to_string();
                    let next = codes[k].len();
                    let code = *codes[k].entry(label.clone()).or_insert_with(|| {
                        columns[k].categories.push(label);
                        next
                    });
                    code as f64
                }
            };
            data.push(v);
        }
    }
    if y.is_empty() {
        return Err(IngestError::NoRows);
    }
    if rejected > 0 {
        log::warn!("{}: dropped {rejected} rows with missing values", path.display());
    }
    Ok(Dataset {
        x: Matrix::from_vec(y.len(), feats.len(), data),
        y,
        columns,
        target: header[t].clone(),
        truth: None,
        provenance: format!("loaded from {}", path.display()),
        rejected_rows: rejected,
    })
}

/// Reads covariates laid out as `schema`, coding categories with the
/// training labels. Extra columns (such as the target) are ignored.
/// A header-only file gives an empty matrix.
pub fn load_covariates(path: &Path, schema: &Schema) -> Result<Matrix, IngestError> {
    let (header, rows) = read_table(path)?;
    let idx: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| *h == c.name)
                .ok_or_else(|| IngestError::MissingColumn(c.name.clone()))
        })
        .collect::<Result<_, _>>()?;
    let mut data = Vec::with_capacity(rows.len() * idx.len());
    for (r, rec) in rows.iter().enumerate() {
        for (c, &j) in schema.columns.iter().zip(&idx) {
            let cell = rec.get(j).unwrap_or("");
            let v = match c.kind {
                ColumnKind::Continuous => parse_cell(cell, r + 2, &c.name)?,
                ColumnKind::Categorical => c
                    .categories
                    .iter()
                    .position(|l| l == cell)
                    .ok_or_else(|| IngestError::UnknownCategory {
                        column: c.name.clone(),
                        value: cell.to_string(),
                    })? as f64,
            };
            data.push(v);
        }
    }
    Ok(Matrix::from_vec(rows.len(), idx.len(), data))
}

fn continuous_columns(p: usize) -> Vec<ColumnMeta> {
    (0..p)
        .map(|j| ColumnMeta {
            name: format!("x{j}"),
            kind: ColumnKind::Continuous,
            categories: Vec::new(),
        })
        .collect()
}

/// Friedman's test function of the first five columns.
pub fn friedman_f(x: &[f64]) -> f64 {
    10.0 * (std::f64::consts::PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}

/// `X ~ U(0,1)^{n x p}`, `Y = f(X) + N(0, noise^2)`. Needs `p >= 5`.
pub fn gen_friedman(n: usize, p: usize, noise: f64, seed: u64) -> Result<Dataset, IngestError> {
    if p < 5 {
        return Err(IngestError::Argument(format!("friedman needs p >= 5, got {p}")));
    }
    if !(noise >= 0.0) {
        return Err(IngestError::Argument("noise sd must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * p).map(|_| rng.random::<f64>()).collect();
    let x = Matrix::from_vec(n, p, x);
    let truth: Vec<f64> = x.rows().map(friedman_f).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let y = truth.iter().map(|f| f + noise * normal.sample(&mut rng)).collect();
    Ok(Dataset {
        x,
        y,
        columns: continuous_columns(p),
        target: "y".into(),
        truth: Some(truth),
        provenance: format!("friedman(n={n}, p={p}, noise={noise}, seed={seed})"),
        rejected_rows: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimpleKind {
    Line,
    Sine,
    Step,
}

impl SimpleKind {
    pub fn f(self, x: f64) -> f64 {
        match self {
            Self::Line => x,
            Self::Sine => (std::f64::consts::PI * x).sin(),
            Self::Step => f64::from(u8::from(x > 0.0)),
        }
    }
}

pub const SIMPLE_DEFAULT_N: usize = 200;
pub const SIMPLE_DEFAULT_NOISE: f64 = 0.25;

/// `x ~ U(-2, 2)`, `y = f(x) + N(0, noise^2)` with `f` linear, `sin(pi x)` or a unit step at 0.
pub fn gen_simple(kind: SimpleKind, n: usize, noise: f64, seed: u64) -> Result<Dataset, IngestError> {
    if !(noise >= 0.0) {
        return Err(IngestError::Argument("noise sd must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let truth: Vec<f64> = xs.iter().map(|&x| kind.f(x)).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let y = truth.iter().map(|f| f + noise * normal.sample(&mut rng)).collect();
    Ok(Dataset {
        x: Matrix::column_vector(&xs),
        y,
        columns: continuous_columns(1),
        target: "y".into(),
        truth: Some(truth),
        provenance: format!("simple({kind:?}, n={n}, noise={noise}, seed={seed})"),
        rejected_rows: 0,
    })
}

/// Bins event times into counts: `years = floor(max - min)`, `bins = years / 4`
/// equal-width bins over `[min, max]` (last bin closed), `X` the bin centers.
pub fn bin_coal(timestamps: &[f64]) -> Result<Dataset, IngestError> {
    if timestamps.is_empty() {
        return Err(IngestError::InvalidData("no timestamps".into()));
    }
    if timestamps.iter().any(|t| !t.is_finite()) {
        return Err(IngestError::InvalidData("timestamps must be finite".into()));
    }
    let lo = timestamps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = timestamps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let years = (hi - lo).floor() as usize;
    let bins = years / 4;
    if bins == 0 {
        return Err(IngestError::InvalidData(format!(
            "timestamps span {:.3} years; at least 4 are needed",
            hi - lo
        )));
    }
    let edges = bin_edges(lo, hi, bins);
    let mut counts = vec![0.0; bins];
    for &t in timestamps {
        counts[bin_index(&edges, t)] += 1.0;
    }
    let width = edges[1] - edges[0];
    let centers: Vec<f64> = edges[..bins].iter().map(|e| e + width / 2.0).collect();
    Ok(Dataset {
        x: Matrix::column_vector(&centers),
        y: counts,
        columns: vec![ColumnMeta {
            name: "year".into(),
            kind: ColumnKind::Continuous,
            categories: Vec::new(),
        }],
        target: "count".into(),
        truth: None,
        provenance: format!("{} events binned into {bins} bins of {width:.4} years", timestamps.len()),
        rejected_rows: 0,
    })
}

/// `bins + 1` equally spaced edges from `lo` to `hi`, as numpy computes them.
pub fn bin_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let step = (hi - lo) / bins as f64;
    (0..=bins)
        .map(|i| if i == bins { hi } else { lo + i as f64 * step })
        .collect()
}

fn bin_index(edges: &[f64], t: f64) -> usize {
    let bins = edges.len() - 1;
    // first edge strictly greater than t, minus one; the last bin is closed
    let k = edges.partition_point(|e| *e <= t);
    k.saturating_sub(1).min(bins - 1)
}

/// Reads event times from the first column (or the named column) of a CSV.
pub fn load_timestamps(path: &Path, column: Option<&str>) -> Result<Vec<f64>, IngestError> {
    let (header, rows) = read_table(path)?;
    let j = match column {
        Some(c) => header
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| IngestError::MissingColumn(c.to_string()))?,
        None => 0,
    };
    let mut out = Vec::with_capacity(rows.len());
    for (r, rec) in rows.iter().enumerate() {
        let cell = rec.get(j).unwrap_or("");
        if is_missing(cell) {
            continue;
        }
        out.push(parse_cell(cell, r + 2, &header[j])?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    Friedman {
        n: usize,
        p: usize,
        #[serde(default = "unit")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Simple {
        shape: SimpleKind,
        #[serde(default = "simple_n")]
        n: usize,
        #[serde(default = "simple_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn unit() -> f64 {
    1.0
}
fn simple_n() -> usize {
    SIMPLE_DEFAULT_N
}
fn simple_noise() -> f64 {
    SIMPLE_DEFAULT_NOISE
}

impl Generator {
    pub fn generate(&self) -> Result<Dataset, IngestError> {
        match *self {
            Self::Friedman { n, p, noise, seed } => gen_friedman(n, p, noise, seed),
            Self::Simple { shape, n, noise, seed } => gen_simple(shape, n, noise, seed),
        }
    }
}

/// Where the data comes from. Exactly one of `path`, `generator`, `events` is set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    pub path: Option<PathBuf>,
    pub target: Option<String>,
    pub features: Option<Vec<String>>,
    pub categorical: Vec<String>,
    pub generator: Option<Generator>,
    /// CSV of event times to bin into four-year counts.
    pub events: Option<PathBuf>,
    pub events_column: Option<String>,
}

impl DataSource {
    /// Loads the data; relative paths are resolved against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset, IngestError> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        match (&self.path, &self.generator, &self.events) {
            (Some(path), None, None) => {
                let target = self
                    .target
                    .as_deref()
                    .ok_or_else(|| IngestError::Config("data.target is required with data.path".into()))?;
                load_csv(&resolve(path), target, self.features.as_deref(), &self.categorical)
            }
            (None, Some(g), None) => g.generate(),
            (None, None, Some(events)) => {
                let ts = load_timestamps(&resolve(events), self.events_column.as_deref())?;
                let mut d = bin_coal(&ts)?;
                d.provenance = format!("{} from {}", d.provenance, events.display());
                Ok(d)
            }
            (None, None, None) => Err(IngestError::Config("no data source given".into())),
            _ => Err(IngestError::Config("give exactly one of data.path, data.generator, data.events".into())),
        }
    }
}

/// Full model and run configuration, read from JSON. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub data: DataSource,
    pub family: Family,
    /// Defaults to identity for Normal, exp for counts, logistic for Bernoulli.
    pub link: Option<Link>,
    pub out_dim: usize,
    pub theta_prior: Option<Vec<ThetaPrior>>,
    pub theta_init: Option<Vec<f64>>,
    pub init_transform: InitTransform,
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub split_prior: Option<Vec<f64>>,
    /// Rule family per feature column; empty means continuous everywhere.
    pub split_rules: Vec<SplitKind>,
    pub separate_trees: bool,
    pub n_particles: usize,
    pub batch: (f64, f64),
    pub theta_step: f64,
    pub tune: usize,
    pub draws: usize,
    pub chains: usize,
    pub seed: u64,
    pub thin_forests: usize,
    pub pointwise_loglik: bool,
    pub output: Option<PathBuf>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let s = SamplerConfig::default();
        let r = RunSettings::default();
        Self {
            data: DataSource::default(),
            family: Family::Normal,
            link: None,
            out_dim: 1,
            theta_prior: None,
            theta_init: None,
            init_transform: InitTransform::None,
            m: s.m,
            alpha: s.alpha,
            beta: s.beta,
            split_prior: None,
            split_rules: Vec::new(),
            separate_trees: false,
            n_particles: s.n_particles,
            batch: s.batch,
            theta_step: s.theta_step,
            tune: r.tune,
            draws: r.draws,
            chains: 4,
            seed: 0,
            thin_forests: r.thin_forests,
            pointwise_loglik: r.pointwise,
            output: None,
        }
    }
}

pub const ENV_SEED: &str = "PGBART_SEED";
pub const ENV_OUT: &str = "PGBART_OUT";

pub fn default_link(family: Family) -> Link {
    match family {
        Family::Normal => Link::Identity,
        Family::Poisson | Family::NegativeBinomial => Link::Exp,
        Family::Bernoulli => Link::Logistic,
    }
}

fn population_std(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        serde_json::from_str(text).map_err(|e| IngestError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Applies `PGBART_SEED` and `PGBART_OUT` when set.
    pub fn apply_env(&mut self) -> Result<(), IngestError> {
        if let Ok(s) = std::env::var(ENV_SEED) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| IngestError::Config(format!("{ENV_SEED}={s:?} is not an unsigned integer")))?;
        }
        if let Ok(o) = std::env::var(ENV_OUT) {
            self.output = Some(PathBuf::from(o));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.m == 0 {
            return Err(IngestError::Config("m must be >= 1".into()));
        }
        if self.chains == 0 {
            return Err(IngestError::Config("chains must be >= 1".into()));
        }
        if self.draws == 0 {
            return Err(IngestError::Config("draws must be >= 1".into()));
        }
        if self.n_particles == 0 {
            return Err(IngestError::Config("n_particles must be >= 1".into()));
        }
        if self.out_dim == 0 {
            return Err(IngestError::Config("out_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn likelihood_spec(&self, y: &[f64]) -> Result<LikelihoodSpec, IngestError> {
        let link = self.link.unwrap_or_else(|| default_link(self.family));
        let priors = match &self.theta_prior {
            Some(p) => p.clone(),
            None => theta_names_for(self.family, self.out_dim)
                .iter()
                .map(|name| match *name {
                    "sigma" => ThetaPrior::HalfNormal {
                        scale: positive_or_one(population_std(y)),
                    },
                    _ => ThetaPrior::Exponential { rate: 0.1 },
                })
                .collect(),
        };
        Ok(LikelihoodSpec::new(self.family, link, self.out_dim, priors)?)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            m: self.m,
            alpha: self.alpha,
            beta: self.beta,
            split_prior: self.split_prior.clone(),
            split_rules: self.split_rules.clone(),
            n_particles: self.n_particles,
            batch: self.batch,
            separate_trees: self.separate_trees,
            theta_step: self.theta_step,
        }
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            tune: self.tune,
            draws: self.draws,
            thin_forests: self.thin_forests,
            pointwise: self.pointwise_loglik,
        }
    }

    /// Builds the sampler model for `data`. The transformed response
    /// initializes every output dimension.
    pub fn build_model(&self, data: &Dataset) -> Result<Model, IngestError> {
        self.validate()?;
        let spec = self.likelihood_spec(&data.y)?;
        let names = spec.theta_names();
        let likelihood = Likelihood::new(spec, data.y.clone())?;
        let y0 = init_response(&data.y, self.init_transform)?;
        let d = self.out_dim;
        let mut init = Vec::with_capacity(y0.len() * d);
        for v in &y0 {
            init.extend(std::iter::repeat_n(*v, d));
        }
        let y_init = Matrix::from_vec(y0.len(), d, init);
        let theta_init = match &self.theta_init {
            Some(t) => t.clone(),
            None => names
                .iter()
                .map(|n| match *n {
                    "sigma" => positive_or_one(population_std(&data.y)),
                    _ => 1.0,
                })
                .collect(),
        };
        Ok(Model::new(data.x.clone(), likelihood, y_init, theta_init, self.sampler_config())?)
    }
}

fn positive_or_one(v: f64) -> f64 {
    if v > 0.0 && v.is_finite() {
        v
    } else {
        1.0
    }
}
