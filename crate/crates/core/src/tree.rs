//! Binary regression trees stored in an append-only arena.
//!
//! A [`Tree`] maps a covariate row to a leaf value vector of length
//! `out_dim`. Every node records how many training rows were routed to it,
//! which is what [`Tree::predict_excluded`] uses to marginalize over splits
//! on excluded covariates.

use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("covariate {column} is missing or NaN at node {node}")]
    MissingCovariate { node: NodeId, column: usize },
    #[error("node {node} has zero routed observations on both sides")]
    DegenerateNode { node: NodeId },
    #[error("invalid split at leaf {leaf}: {reason}")]
    InvalidSplit { leaf: NodeId, reason: &'static str },
    #[error("malformed tree record at line {line}{}: {msg}", node.map(|n| format!(" (node {n})")).unwrap_or_default())]
    Parse {
        line: usize,
        node: Option<NodeId>,
        msg: String,
    },
    #[error("structural violation at node {node}: {msg}")]
    Structure { node: NodeId, msg: String },
}

/// Splitting rule attached to an internal node.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitRule {
    /// Left iff `x <= threshold`.
    Continuous(f64),
    /// Left iff `x == code`.
    OneHot(f64),
    /// Left iff `x` is one of the codes.
    Subset(Vec<f64>),
}

impl SplitRule {
    #[inline]
    pub fn goes_left(&self, x: f64) -> bool {
        match self {
            SplitRule::Continuous(t) => x <= *t,
            SplitRule::OneHot(c) => x == *c,
            SplitRule::Subset(codes) => codes.contains(&x),
        }
    }

    fn kind_tag(&self) -> &'static str {
        match self {
            SplitRule::Continuous(_) => "continuous",
            SplitRule::OneHot(_) => "onehot",
            SplitRule::Subset(_) => "subset",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Internal {
        split_var: usize,
        rule: SplitRule,
        left: NodeId,
        right: NodeId,
    },
    Leaf {
        value: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub depth: usize,
    pub n_obs: usize,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }
}

/// Set of excluded covariate columns, stored as a membership mask.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ColumnSet(Vec<bool>);

impl ColumnSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn all(p: usize) -> Self {
        Self(vec![true; p])
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut mask = Vec::new();
        for j in indices {
            if j >= mask.len() {
                mask.resize(j + 1, false);
            }
            mask[j] = true;
        }
        Self(mask)
    }

    /// Every column in `0..p` except `keep`.
    pub fn all_except(p: usize, keep: &[usize]) -> Self {
        let mut mask = vec![true; p];
        for &j in keep {
            if j < p {
                mask[j] = false;
            }
        }
        Self(mask)
    }

    #[inline]
    pub fn contains(&self, j: usize) -> bool {
        self.0.get(j).copied().unwrap_or(false)
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    root: NodeId,
    out_dim: usize,
}

impl Tree {
    /// A single-leaf tree.
    pub fn new_leaf(value: Vec<f64>, n_obs: usize) -> Self {
        let out_dim = value.len();
        assert!(out_dim > 0, "leaf value must be nonempty");
        Self {
            nodes: vec![Node {
                kind: NodeKind::Leaf { value },
                depth: 0,
                n_obs,
            }],
            root: 0,
            out_dim,
        }
    }

    /// Assembles a tree from raw nodes and checks the structural invariants.
    pub fn from_nodes(nodes: Vec<Node>, root: NodeId, out_dim: usize) -> Result<Self, TreeError> {
        let tree = Self {
            nodes,
            root,
            out_dim,
        };
        tree.audit()?;
        Ok(tree)
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_leaf())
            .map(|(i, _)| i)
    }

    pub fn n_internal(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf()).count()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Leaf value of `id`, or `None` for internal nodes.
    pub fn leaf_value(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id].kind {
            NodeKind::Leaf { value } => Some(value),
            NodeKind::Internal { .. } => None,
        }
    }

    /// Id of the leaf reached by `x`.
    pub fn leaf_for(&self, x: &[f64]) -> Result<NodeId, TreeError> {
        let mut id = self.root;
        loop {
            match &self.nodes[id].kind {
                NodeKind::Leaf { .. } => return Ok(id),
                NodeKind::Internal {
                    split_var,
                    rule,
                    left,
                    right,
                } => {
                    let v = covariate(x, *split_var, id)?;
                    id = if rule.goes_left(v) { *left } else { *right };
                }
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<&[f64], TreeError> {
        let leaf = self.leaf_for(x)?;
        Ok(self.leaf_value(leaf).expect("leaf_for returns a leaf"))
    }

    /// Prediction with splits on `excluded` columns marginalized out.
    ///
    /// At an internal node splitting on an excluded column both subtrees are
    /// evaluated and combined as `(n_L * v_L + n_R * v_R) / (n_L + n_R)`.
    pub fn predict_excluded(&self, x: &[f64], excluded: &ColumnSet) -> Result<Vec<f64>, TreeError> {
        if excluded.is_empty() {
            return self.predict(x).map(<[f64]>::to_vec);
        }
        let mut out = vec![0.0; self.out_dim];
        self.accumulate_excluded(self.root, x, excluded, 1.0, &mut out)?;
        Ok(out)
    }

    fn accumulate_excluded(
        &self,
        id: NodeId,
        x: &[f64],
        excluded: &ColumnSet,
        weight: f64,
        out: &mut [f64],
    ) -> Result<(), TreeError> {
        let mut id = id;
        loop {
            match &self.nodes[id].kind {
                NodeKind::Leaf { value } => {
                    for (o, v) in out.iter_mut().zip(value) {
                        *o += weight * v;
                    }
                    return Ok(());
                }
                NodeKind::Internal {
                    split_var,
                    rule,
                    left,
                    right,
                } => {
                    if excluded.contains(*split_var) {
                        let n_left = self.nodes[*left].n_obs as f64;
                        let n_right = self.nodes[*right].n_obs as f64;
                        let total = n_left + n_right;
                        if total == 0.0 {
                            return Err(TreeError::DegenerateNode { node: id });
                        }
                        if n_left > 0.0 {
                            self.accumulate_excluded(*left, x, excluded, weight * n_left / total, out)?;
                        }
                        if n_right == 0.0 {
                            return Ok(());
                        }
                        // tail-iterate into the right child
                        return self.accumulate_excluded(*right, x, excluded, weight * n_right / total, out);
                    }
                    let v = covariate(x, *split_var, id)?;
                    id = if rule.goes_left(v) { *left } else { *right };
                }
            }
        }
    }

    /// Turns leaf `leaf` into an internal node with two fresh leaves.
    pub fn grow_at_leaf(
        &mut self,
        leaf: NodeId,
        split_var: usize,
        rule: SplitRule,
        left_value: Vec<f64>,
        right_value: Vec<f64>,
        left_rows: &[usize],
        right_rows: &[usize],
    ) -> Result<(NodeId, NodeId), TreeError> {
        if leaf >= self.nodes.len() || !self.nodes[leaf].is_leaf() {
            return Err(TreeError::InvalidSplit {
                leaf,
                reason: "node is not a leaf",
            });
        }
        if left_rows.is_empty() || right_rows.is_empty() {
            return Err(TreeError::InvalidSplit {
                leaf,
                reason: "empty side of the partition",
            });
        }
        if left_value.len() != self.out_dim || right_value.len() != self.out_dim {
            return Err(TreeError::InvalidSplit {
                leaf,
                reason: "leaf value length differs from out_dim",
            });
        }
        let depth = self.nodes[leaf].depth + 1;
        let left = self.nodes.len();
        let right = left + 1;
        self.nodes.push(Node {
            kind: NodeKind::Leaf { value: left_value },
            depth,
            n_obs: left_rows.len(),
        });
        self.nodes.push(Node {
            kind: NodeKind::Leaf { value: right_value },
            depth,
            n_obs: right_rows.len(),
        });
        let parent = &mut self.nodes[leaf];
        parent.kind = NodeKind::Internal {
            split_var,
            rule,
            left,
            right,
        };
        parent.n_obs = left_rows.len() + right_rows.len();
        Ok((left, right))
    }

    /// Number of internal nodes splitting on each of the `p` columns.
    pub fn count_split_vars(&self, p: usize) -> Vec<usize> {
        let mut counts = vec![0; p];
        self.add_split_counts(&mut counts);
        counts
    }

    pub fn add_split_counts(&self, counts: &mut [usize]) {
        for node in &self.nodes {
            if let NodeKind::Internal { split_var, .. } = node.kind {
                counts[split_var] += 1;
            }
        }
    }

    /// Checks parent/child structure, depths and `n_obs` bookkeeping.
    pub fn audit(&self) -> Result<(), TreeError> {
        let n = self.nodes.len();
        if self.root >= n {
            return Err(TreeError::Structure {
                node: self.root,
                msg: "root id out of range".into(),
            });
        }
        if self.nodes[self.root].depth != 0 {
            return Err(TreeError::Structure {
                node: self.root,
                msg: "root depth must be 0".into(),
            });
        }
        let mut parent: Vec<Option<NodeId>> = vec![None; n];
        for (id, node) in self.nodes.iter().enumerate() {
            match &node.kind {
                NodeKind::Leaf { value } => {
                    if value.len() != self.out_dim {
                        return Err(TreeError::Structure {
                            node: id,
                            msg: format!("leaf value has length {}, expected {}", value.len(), self.out_dim),
                        });
                    }
                }
                NodeKind::Internal { left, right, .. } => {
                    for &child in [left, right] {
                        if child >= n || child == self.root || child == id {
                            return Err(TreeError::Structure {
                                node: id,
                                msg: format!("invalid child id {child}"),
                            });
                        }
                        if parent[child].replace(id).is_some() {
                            return Err(TreeError::Structure {
                                node: child,
                                msg: "node has more than one parent".into(),
                            });
                        }
                        if self.nodes[child].depth != node.depth + 1 {
                            return Err(TreeError::Structure {
                                node: child,
                                msg: "child depth must be parent depth + 1".into(),
                            });
                        }
                    }
                    if left == right {
                        return Err(TreeError::Structure {
                            node: id,
                            msg: "children must differ".into(),
                        });
                    }
                    if node.n_obs != self.nodes[*left].n_obs + self.nodes[*right].n_obs {
                        return Err(TreeError::Structure {
                            node: id,
                            msg: "n_obs differs from the sum over children".into(),
                        });
                    }
                }
            }
        }
        // single parent + depth increments rule out cycles; every non-root
        // node must also be reachable
        for (id, p) in parent.iter().enumerate() {
            if id != self.root && p.is_none() {
                return Err(TreeError::Structure {
                    node: id,
                    msg: "node is unreachable from the root".into(),
                });
            }
        }
        Ok(())
    }

    /// Canonical text record, one tab-separated line per node after a header.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "tree\tout_dim={}\troot={}\tnodes={}",
            self.out_dim,
            self.root,
            self.nodes.len()
        );
        for (id, node) in self.nodes.iter().enumerate() {
            match &node.kind {
                NodeKind::Internal {
                    split_var,
                    rule,
                    left,
                    right,
                } => {
                    let payload = match rule {
                        SplitRule::Continuous(t) | SplitRule::OneHot(t) => fmt_f64(*t),
                        SplitRule::Subset(codes) => join_f64(codes),
                    };
                    let _ = writeln!(
                        s,
                        "{id}\tI\t{}\t{}\t{split_var}\t{}\t{payload}\t{left}\t{right}\t-",
                        node.depth,
                        node.n_obs,
                        rule.kind_tag()
                    );
                }
                NodeKind::Leaf { value } => {
                    let _ = writeln!(
                        s,
                        "{id}\tL\t{}\t{}\t-\t-\t-\t-\t-\t{}",
                        node.depth,
                        node.n_obs,
                        join_f64(value)
                    );
                }
            }
        }
        s
    }

    pub fn deserialize(text: &str) -> Result<Self, TreeError> {
        let mut lines = text.lines();
        let tree = parse_tree(&mut lines, 0)?;
        if let Some(extra) = lines.find(|l| !l.trim().is_empty()) {
            return Err(TreeError::Parse {
                line: tree.nodes.len() + 2,
                node: None,
                msg: format!("trailing content {extra:?}"),
            });
        }
        Ok(tree)
    }
}

/// Reads one tree record from `lines`; `line_offset` only affects error messages.
pub(crate) fn parse_tree<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    line_offset: usize,
) -> Result<Tree, TreeError> {
    let perr = |line: usize, node: Option<NodeId>, msg: String| TreeError::Parse {
        line: line_offset + line,
        node,
        msg,
    };
    let header = lines
        .next()
        .ok_or_else(|| perr(1, None, "missing tree header".into()))?;
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.len() != 4 || fields[0] != "tree" {
        return Err(perr(1, None, format!("bad header {header:?}")));
    }
    let kv = |f: &str, key: &str| -> Result<usize, TreeError> {
        f.strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| perr(1, None, format!("bad header field {f:?}, expected {key}=<int>")))
    };
    let out_dim = kv(fields[1], "out_dim")?;
    let root = kv(fields[2], "root")?;
    let n_nodes = kv(fields[3], "nodes")?;
    if out_dim == 0 || n_nodes == 0 {
        return Err(perr(1, None, "out_dim and nodes must be positive".into()));
    }

    let mut nodes = Vec::with_capacity(n_nodes);
    for id in 0..n_nodes {
        let line_no = id + 2;
        let line = lines.next().ok_or_else(|| {
            perr(line_no, Some(id), format!("truncated record: expected {n_nodes} nodes, got {id}"))
        })?;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return Err(perr(line_no, Some(id), format!("expected 10 fields, got {}", f.len())));
        }
        let int = |s: &str, what: &str| -> Result<usize, TreeError> {
            s.parse()
                .map_err(|_| perr(line_no, Some(id), format!("bad {what} {s:?}")))
        };
        if int(f[0], "id")? != id {
            return Err(perr(line_no, Some(id), "node ids must be sequential".into()));
        }
        let depth = int(f[2], "depth")?;
        let n_obs = int(f[3], "n_obs")?;
        let kind = match f[1] {
            "L" => {
                let value = parse_f64_list(f[9]).map_err(|m| perr(line_no, Some(id), m))?;
                NodeKind::Leaf { value }
            }
            "I" => {
                let split_var = int(f[4], "split_var")?;
                let rule = match f[5] {
                    "continuous" => SplitRule::Continuous(parse_f64(f[6]).map_err(|m| perr(line_no, Some(id), m))?),
                    "onehot" => SplitRule::OneHot(parse_f64(f[6]).map_err(|m| perr(line_no, Some(id), m))?),
                    "subset" => SplitRule::Subset(parse_f64_list(f[6]).map_err(|m| perr(line_no, Some(id), m))?),
                    other => return Err(perr(line_no, Some(id), format!("unknown rule kind {other:?}"))),
                };
                NodeKind::Internal {
                    split_var,
                    rule,
                    left: int(f[7], "left")?,
                    right: int(f[8], "right")?,
                }
            }
            other => return Err(perr(line_no, Some(id), format!("unknown node kind {other:?}"))),
        };
        nodes.push(Node { kind, depth, n_obs });
    }
    Tree::from_nodes(nodes, root, out_dim)
}

/// Shortest representation that parses back to the same bits.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

fn parse_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("bad number {s:?}")),
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    if s.is_empty() || s == "-" {
        return Err("empty value list".into());
    }
    s.split(',').map(parse_f64).collect()
}

#[inline]
fn covariate(x: &[f64], column: usize, node: NodeId) -> Result<f64, TreeError> {
    match x.get(column) {
        Some(v) if !v.is_nan() => Ok(*v),
        _ => Err(TreeError::MissingCovariate { node, column }),
    }
}

/// The `m` trees of one sum-of-trees ensemble.
///
/// Trees are shared through `Arc` so that successive posterior snapshots
/// only pay for the trees that changed.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<Arc<Tree>>,
    pub shared_structure: bool,
}

impl Forest {
    pub fn new(trees: Vec<Arc<Tree>>, shared_structure: bool) -> Self {
        Self {
            trees,
            shared_structure,
        }
    }

    pub fn m(&self) -> usize {
        self.trees.len()
    }

    pub fn out_dim(&self) -> usize {
        self.trees.first().map_or(0, |t| t.out_dim())
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, TreeError> {
        let mut out = vec![0.0; self.out_dim()];
        for t in &self.trees {
            for (o, v) in out.iter_mut().zip(t.predict(x)?) {
                *o += v;
            }
        }
        Ok(out)
    }

    pub fn predict_excluded(&self, x: &[f64], excluded: &ColumnSet) -> Result<Vec<f64>, TreeError> {
        let mut out = vec![0.0; self.out_dim()];
        for t in &self.trees {
            for (o, v) in out.iter_mut().zip(t.predict_excluded(x, excluded)?) {
                *o += v;
            }
        }
        Ok(out)
    }

    pub fn count_split_vars(&self, p: usize) -> Vec<usize> {
        let mut counts = vec![0; p];
        for t in &self.trees {
            t.add_split_counts(&mut counts);
        }
        counts
    }
}
