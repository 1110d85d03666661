//! Posterior draws in memory and on disk.
//!
//! A run directory holds:
//!
//! * `draws.csv`: `chain,draw,<theta...>[,ll_0..ll_{n-1}]`
//! * `latent_chain{c}.csv`: `draw,mu_...` with one column per row and output dimension
//! * `variable_inclusion.csv`: `chain,draw,<feature...>`
//! * `forests_chain{c}.txt`: forest snapshots as tree records
//! * `trace_meta.json`: shapes and names needed to read the rest back
//! * `manifest.json`: written last, atomically; its absence marks a failed run

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tree::{fmt_f64, parse_tree, ColumnSet, Forest, TreeError};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error on {path}: {source}")]
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
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed {path} at line {line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("tree record in {path}: {source}")]
    Tree {
        path: PathBuf,
        #[source]
        source: TreeError,
    },
    #[error("run directory {0} has no manifest; the run did not finish")]
    Incomplete(PathBuf),
    #[error("trace has no forest snapshots")]
    NoForests,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> TraceError + '_ {
    move |source| TraceError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Forests of one draw. A single forest carries every output dimension;
/// otherwise forest `k` carries dimension `k` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub draw: usize,
    pub forests: Vec<Forest>,
}

impl Snapshot {
    pub fn out_dim(&self) -> usize {
        if self.forests.len() == 1 {
            self.forests[0].out_dim()
        } else {
            self.forests.len()
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, TreeError> {
        if self.forests.len() == 1 {
            return self.forests[0].predict(x);
        }
        let mut out = Vec::with_capacity(self.forests.len());
        for f in &self.forests {
            out.extend(f.predict(x)?);
        }
        Ok(out)
    }

    pub fn predict_excluded(&self, x: &[f64], excluded: &ColumnSet) -> Result<Vec<f64>, TreeError> {
        if self.forests.len() == 1 {
            return self.forests[0].predict_excluded(x, excluded);
        }
        let mut out = Vec::with_capacity(self.forests.len());
        for f in &self.forests {
            out.extend(f.predict_excluded(x, excluded)?);
        }
        Ok(out)
    }

    pub fn count_split_vars(&self, p: usize) -> Vec<usize> {
        let mut counts = vec![0; p];
        for f in &self.forests {
            for t in &f.trees {
                t.add_split_counts(&mut counts);
            }
        }
        counts
    }
}

/// Draws of one chain, in draw order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub chain: usize,
    pub seed: u64,
    /// Per draw, row-major `n x out_dim` sum of trees.
    pub latent: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    /// Per draw pointwise log-likelihood; empty vectors when not stored.
    pub pointwise: Vec<Vec<f64>>,
    /// Per draw split counts over the whole ensemble.
    pub variable_inclusion: Vec<Vec<usize>>,
    pub forests: Vec<Snapshot>,
    pub theta_acceptance: Vec<f64>,
    pub final_split_weights: Vec<f64>,
    pub final_leaf_scale: Vec<f64>,
}

impl ChainTrace {
    pub fn new(chain: usize, seed: u64) -> Self {
        Self {
            chain,
            seed,
            latent: Vec::new(),
            theta: Vec::new(),
            pointwise: Vec::new(),
            variable_inclusion: Vec::new(),
            forests: Vec::new(),
            theta_acceptance: Vec::new(),
            final_split_weights: Vec::new(),
            final_leaf_scale: Vec::new(),
        }
    }

    pub fn n_draws(&self) -> usize {
        self.latent.len()
    }

    pub fn push_draw(
        &mut self,
        latent: Vec<f64>,
        theta: Vec<f64>,
        pointwise: Vec<f64>,
        variable_inclusion: Vec<usize>,
        forests: Option<Vec<Forest>>,
    ) {
        let draw = self.latent.len();
        self.latent.push(latent);
        self.theta.push(theta);
        self.pointwise.push(pointwise);
        self.variable_inclusion.push(variable_inclusion);
        if let Some(forests) = forests {
            self.forests.push(Snapshot { draw, forests });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub n: usize,
    pub out_dim: usize,
    pub p: usize,
    pub theta_names: Vec<String>,
    pub chains: usize,
    pub draws: usize,
    pub seeds: Vec<u64>,
}

/// All chains of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub chains: Vec<ChainTrace>,
    pub n: usize,
    pub out_dim: usize,
    pub p: usize,
    pub theta_names: Vec<String>,
}

impl Trace {
    pub fn new(chains: Vec<ChainTrace>, n: usize, out_dim: usize, p: usize, theta_names: Vec<String>) -> Self {
        Self {
            chains,
            n,
            out_dim,
            p,
            theta_names,
        }
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_draws(&self) -> usize {
        self.chains.first().map_or(0, ChainTrace::n_draws)
    }

    pub fn meta(&self) -> TraceMeta {
        TraceMeta {
            n: self.n,
            out_dim: self.out_dim,
            p: self.p,
            theta_names: self.theta_names.clone(),
            chains: self.n_chains(),
            draws: self.n_draws(),
            seeds: self.chains.iter().map(|c| c.seed).collect(),
        }
    }

    /// `draws[chain][draw]` of latent entry `(row, dim)`.
    pub fn latent_draws(&self, row: usize, dim: usize) -> Vec<Vec<f64>> {
        let idx = row * self.out_dim + dim;
        self.chains
            .iter()
            .map(|c| c.latent.iter().map(|l| l[idx]).collect())
            .collect()
    }

    /// `draws[chain][draw]` of scalar parameter `k`.
    pub fn theta_draws(&self, k: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.theta.iter().map(|t| t[k]).collect())
            .collect()
    }

    /// Posterior mean of the latent sum of trees, row-major `n x out_dim`.
    pub fn latent_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.n * self.out_dim];
        let mut count = 0usize;
        for c in &self.chains {
            for l in &c.latent {
                for (m, v) in mean.iter_mut().zip(l) {
                    *m += v;
                }
                count += 1;
            }
        }
        if count > 0 {
            for m in &mut mean {
                *m /= count as f64;
            }
        }
        mean
    }

    /// All forest snapshots, chains in order.
    pub fn snapshots(&self) -> impl Iterator<Item = &Snapshot> {
        self.chains.iter().flat_map(|c| c.forests.iter())
    }

    pub fn n_snapshots(&self) -> usize {
        self.chains.iter().map(|c| c.forests.len()).sum()
    }

    /// Split counts per draw, chains concatenated.
    pub fn variable_inclusion(&self) -> Vec<&[usize]> {
        self.chains
            .iter()
            .flat_map(|c| c.variable_inclusion.iter().map(Vec::as_slice))
            .collect()
    }
}

fn latent_header(n: usize, out_dim: usize) -> Vec<String> {
    let mut h = vec!["draw".to_string()];
    for i in 0..n {
        for k in 0..out_dim {
            if out_dim == 1 {
                h.push(format!("mu_{i}"));
            } else {
                h.push(format!("mu_{i}_{k}"));
            }
        }
    }
    h
}

pub const DRAWS_FILE: &str = "draws.csv";
pub const INCLUSION_FILE: &str = "variable_inclusion.csv";
pub const META_FILE: &str = "trace_meta.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn latent_file(chain: usize) -> String {
    format!("latent_chain{chain}.csv")
}

pub fn forests_file(chain: usize) -> String {
    format!("forests_chain{chain}.txt")
}

/// Writes every trace artifact except the manifest. Returns the file names written.
pub fn write_trace(dir: &Path, trace: &Trace, feature_names: &[String]) -> Result<Vec<String>, TraceError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();

    let path = dir.join(DRAWS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let with_pointwise = trace
        .chains
        .iter()
        .all(|c| c.pointwise.iter().all(|p| p.len() == trace.n))
        && trace.n_draws() > 0;
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(trace.theta_names.iter().cloned());
    if with_pointwise {
        header.extend((0..trace.n).map(|i| format!("ll_{i}")));
    }
    w.write_record(&header).map_err(csv_err(&path))?;
    for c in &trace.chains {
        for d in 0..c.n_draws() {
            let mut rec = vec![c.chain.to_string(), d.to_string()];
            rec.extend(c.theta[d].iter().map(|v| fmt_f64(*v)));
            if with_pointwise {
                rec.extend(c.pointwise[d].iter().map(|v| fmt_f64(*v)));
            }
            w.write_record(&rec).map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;
    written.push(DRAWS_FILE.to_string());

    for c in &trace.chains {
        let name = latent_file(c.chain);
        let path = dir.join(&name);
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(latent_header(trace.n, trace.out_dim)).map_err(csv_err(&path))?;
        for (d, l) in c.latent.iter().enumerate() {
            let mut rec = Vec::with_capacity(l.len() + 1);
            rec.push(d.to_string());
            rec.extend(l.iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec).map_err(csv_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        written.push(name);
    }

    let path = dir.join(INCLUSION_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend((0..trace.p).map(|j| feature_names.get(j).cloned().unwrap_or_else(|| format!("x{j}"))));
    w.write_record(&header).map_err(csv_err(&path))?;
    for c in &trace.chains {
        for (d, counts) in c.variable_inclusion.iter().enumerate() {
            let mut rec = vec![c.chain.to_string(), d.to_string()];
            rec.extend(counts.iter().map(usize::to_string));
            w.write_record(&rec).map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;
    written.push(INCLUSION_FILE.to_string());

    for c in &trace.chains {
        let name = forests_file(c.chain);
        let path = dir.join(&name);
        fs::write(&path, serialize_snapshots(&c.forests)).map_err(io_err(&path))?;
        written.push(name);
    }

    let path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&trace.meta()).expect("meta serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    written.push(META_FILE.to_string());
    Ok(written)
}

/// Text form of a chain's snapshots:
///
/// ```text
/// draw	<d>	forests=<k>
/// forest	<j>	shared=<bool>	m=<m>
/// <m tree records>
/// ```
pub fn serialize_snapshots(snapshots: &[Snapshot]) -> String {
    let mut s = String::new();
    for snap in snapshots {
        let _ = writeln!(s, "draw\t{}\tforests={}", snap.draw, snap.forests.len());
        for (j, f) in snap.forests.iter().enumerate() {
            let _ = writeln!(s, "forest\t{j}\tshared={}\tm={}", f.shared_structure, f.m());
            for t in &f.trees {
                s.push_str(&t.serialize());
            }
        }
    }
    s
}

pub fn deserialize_snapshots(text: &str, path: &Path) -> Result<Vec<Snapshot>, TraceError> {
    let lines: Vec<&str> = text.lines().collect();
    let ferr = |line: usize, msg: String| TraceError::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < lines.len() {
        if lines[pos].trim().is_empty() {
            pos += 1;
            continue;
        }
        let f: Vec<&str> = lines[pos].split('\t').collect();
        let (draw, k) = match f.as_slice() {
            ["draw", d, k] => (
                d.parse::<usize>().map_err(|_| ferr(pos + 1, format!("bad draw {d:?}")))?,
                k.strip_prefix("forests=")
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| ferr(pos + 1, format!("bad forest count {k:?}")))?,
            ),
            _ => return Err(ferr(pos + 1, format!("expected draw header, got {:?}", lines[pos]))),
        };
        pos += 1;
        let mut forests = Vec::with_capacity(k);
        for _ in 0..k {
            let f: Vec<&str> = lines.get(pos).copied().unwrap_or("").split('\t').collect();
            let (shared, m) = match f.as_slice() {
                ["forest", _, s, m] => (
                    match *s {
                        "shared=true" => true,
                        "shared=false" => false,
                        _ => return Err(ferr(pos + 1, format!("bad shared flag {s:?}"))),
                    },
                    m.strip_prefix("m=")
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| ferr(pos + 1, format!("bad tree count {m:?}")))?,
                ),
                _ => return Err(ferr(pos + 1, "expected forest header".into())),
            };
            pos += 1;
            let mut trees = Vec::with_capacity(m);
            for _ in 0..m {
                let mut it = lines[pos.min(lines.len())..].iter().copied();
                let before = it.len();
                let tree = parse_tree(&mut it, pos).map_err(|source| TraceError::Tree {
                    path: path.to_path_buf(),
                    source,
                })?;
                pos += before - it.len();
                trees.push(Arc::new(tree));
            }
            forests.push(Forest::new(trees, shared));
        }
        out.push(Snapshot { draw, forests });
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(s: &str, path: &Path, line: usize) -> Result<T, TraceError> {
    s.parse().map_err(|_| TraceError::Format {
        path: path.to_path_buf(),
        line,
        msg: format!("bad number {s:?}"),
    })
}

pub fn read_meta(dir: &Path) -> Result<TraceMeta, TraceError> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| TraceError::Json { path, source })
}

/// Loads a finished run. Fails if the manifest is missing.
pub fn read_trace(dir: &Path) -> Result<Trace, TraceError> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(TraceError::Incomplete(dir.to_path_buf()));
    }
    let meta = read_meta(dir)?;
    let mut chains: Vec<ChainTrace> = meta
        .seeds
        .iter()
        .enumerate()
        .map(|(c, &s)| ChainTrace::new(c, s))
        .collect();
    let n_theta = meta.theta_names.len();

    let path = dir.join(DRAWS_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    let with_pointwise = r.headers().map_err(csv_err(&path))?.len() > 2 + n_theta;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(&path))?;
        let line = line + 2;
        let c: usize = parse_num(&rec[0], &path, line)?;
        let chain = chains.get_mut(c).ok_or_else(|| TraceError::Format {
            path: path.clone(),
            line,
            msg: format!("chain {c} out of range"),
        })?;
        let vals: Vec<f64> = rec
            .iter()
            .skip(2)
            .map(|v| parse_num(v, &path, line))
            .collect::<Result<_, _>>()?;
        chain.theta.push(vals[..n_theta].to_vec());
        chain.pointwise.push(if with_pointwise { vals[n_theta..].to_vec() } else { Vec::new() });
    }

    for chain in &mut chains {
        let path = dir.join(latent_file(chain.chain));
        let mut r = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err(&path))?;
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|v| parse_num(v, &path, line + 2))
                .collect::<Result<_, _>>()?;
            chain.latent.push(vals);
        }
        let path = dir.join(forests_file(chain.chain));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        chain.forests = deserialize_snapshots(&text, &path)?;
    }

    let path = dir.join(INCLUSION_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(&path))?;
        let c: usize = parse_num(&rec[0], &path, line + 2)?;
        let counts: Vec<usize> = rec
            .iter()
            .skip(2)
            .map(|v| parse_num(v, &path, line + 2))
            .collect::<Result<_, _>>()?;
        if let Some(chain) = chains.get_mut(c) {
            chain.variable_inclusion.push(counts);
        }
    }
    Ok(Trace::new(chains, meta.n, meta.out_dim, meta.p, meta.theta_names))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, TraceError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

/// Record of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Effective configuration after overrides.
    pub config: serde_json::Value,
    /// Command-line overrides as given.
    pub overrides: serde_json::Value,
    pub seed: u64,
    pub chain_seeds: Vec<u64>,
    pub wall_time_secs: f64,
    pub versions: std::collections::BTreeMap<String, String>,
    pub dataset_sha256: String,
    /// File name to sha256 for every trace artifact.
    pub files: std::collections::BTreeMap<String, String>,
}

impl RunManifest {
    /// Writes through a temporary file and a rename, so readers never see a partial manifest.
    pub fn write_atomic(&self, dir: &Path) -> Result<(), TraceError> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        {
            let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(json.as_bytes()).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        let dest = dir.join(MANIFEST_FILE);
        fs::rename(&tmp, &dest).map_err(io_err(&dest))
    }

    pub fn read(dir: &Path) -> Result<Self, TraceError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(TraceError::Incomplete(dir.to_path_buf()));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|source| TraceError::Json { path, source })
    }
}

/// Checksums of the listed files inside `dir`.
pub fn checksum_files(dir: &Path, names: &[String]) -> Result<std::collections::BTreeMap<String, String>, TraceError> {
    names
        .iter()
        .map(|n| Ok((n.clone(), sha256_file(&dir.join(n))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{SplitRule, Tree};

    fn small_trace() -> Trace {
        let mut t = Tree::new_leaf(vec![0.5], 3);
        t.grow_at_leaf(0, 0, SplitRule::Continuous(0.25), vec![0.1], vec![0.9], &[0], &[1, 2])
            .unwrap();
        let forest = Forest::new(vec![Arc::new(t), Arc::new(Tree::new_leaf(vec![-0.2], 3))], true);
        let mut c = ChainTrace::new(0, 7);
        for d in 0..3 {
            c.push_draw(
                vec![0.1 * d as f64, 1.0 / 3.0, -2.5],
                vec![0.7 + d as f64],
                vec![-1.0, -2.0, -3.0],
                vec![1],
                (d % 2 == 0).then(|| vec![forest.clone()]),
            );
        }
        Trace::new(vec![c], 3, 1, 1, vec!["sigma".into()])
    }

    #[test]
    fn snapshot_text_round_trip() {
        let trace = small_trace();
        let text = serialize_snapshots(&trace.chains[0].forests);
        let back = deserialize_snapshots(&text, Path::new("x")).unwrap();
        assert_eq!(back, trace.chains[0].forests);
        assert_eq!(back[1].draw, 2);
    }

    #[test]
    fn run_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trace = small_trace();
        let files = write_trace(dir.path(), &trace, &["x".into()]).unwrap();
        assert!(matches!(read_trace(dir.path()), Err(TraceError::Incomplete(_))));
        let manifest = RunManifest {
            config: serde_json::json!({}),
            overrides: serde_json::json!({}),
            seed: 7,
            chain_seeds: vec![7],
            wall_time_secs: 0.0,
            versions: Default::default(),
            dataset_sha256: String::new(),
            files: checksum_files(dir.path(), &files).unwrap(),
        };
        manifest.write_atomic(dir.path()).unwrap();
        assert!(!dir.path().join("manifest.json.tmp").exists());
        assert_eq!(read_trace(dir.path()).unwrap(), trace);
        assert_eq!(RunManifest::read(dir.path()).unwrap(), manifest);
    }

    #[test]
    fn snapshot_predicts_concatenated_dims() {
        let a = Forest::new(vec![Arc::new(Tree::new_leaf(vec![1.0], 1))], false);
        let b = Forest::new(vec![Arc::new(Tree::new_leaf(vec![2.0], 1))], false);
        let s = Snapshot {
            draw: 0,
            forests: vec![a, b],
        };
        assert_eq!(s.predict(&[0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(s.out_dim(), 2);
    }

    #[test]
    fn sha_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
