//! Relational graph data model, triple-file ingestion and per-relation
//! in-neighbor indexing.
//!
//! Companion files:
//! - edges: `src<TAB>rel<TAB>dst` (or `<s> <p> <o> .` N-Triples lines)
//! - labels: `node<TAB>class<TAB>{train|test}`
//! - types: `node<TAB>type`
//!
//! Directories in the common RDF benchmark layout (an `.nt` edge file with
//! `trainingSet.tsv` / `testSet.tsv`) are read as well.
//!
//! Lines starting with `#` and blank lines are ignored everywhere.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty graph")]
    Empty,
    #[error("line {line}: unknown entity `{name}`")]
    UnknownEntity { line: usize, name: String },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripleFormat {
    Tsv,
    /// `<s> <p> <o> .` lines; literal objects are dropped.
    NTriples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub src: usize,
    pub rel: usize,
    pub dst: usize,
}

/// Typed nodes, relation-typed directed edges and labelled entity sets.
#[derive(Debug, Clone, Default)]
pub struct RelGraph {
    pub num_nodes: usize,
    pub node_type: Vec<usize>,
    pub edges: Vec<Triple>,
    pub num_relations: usize,
    pub labels: BTreeMap<usize, usize>,
    pub num_classes: usize,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub node_names: Vec<String>,
    pub relation_names: Vec<String>,
    pub type_names: Vec<String>,
    pub class_names: Vec<String>,
}

/// Warnings collected while parsing an edge file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub duplicates: usize,
    pub literals_dropped: usize,
}

impl RelGraph {
    pub fn num_types(&self) -> usize {
        self.type_names.len().max(self.node_type.iter().map(|t| t + 1).max().unwrap_or(0))
    }

    pub fn node_id(&self, name: &str) -> Option<usize> {
        self.node_names.iter().position(|n| n == name)
    }

    pub fn is_labeled(&self, node: usize) -> bool {
        self.labels.contains_key(&node)
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GraphError::Invalid(m));
        if self.node_type.len() != self.num_nodes {
            return bad(format!(
                "{} node types for {} nodes",
                self.node_type.len(),
                self.num_nodes
            ));
        }
        for e in &self.edges {
            if e.src >= self.num_nodes || e.dst >= self.num_nodes || e.rel >= self.num_relations {
                return bad(format!("edge {e:?} out of range"));
            }
        }
        let set: HashSet<&Triple> = self.edges.iter().collect();
        if set.len() != self.edges.len() {
            return bad("duplicate triples".into());
        }
        for (&n, &c) in &self.labels {
            if n >= self.num_nodes || c >= self.num_classes {
                return bad(format!("label ({n}, {c}) out of range"));
            }
        }
        let train: HashSet<usize> = self.train_ids.iter().copied().collect();
        for t in &self.test_ids {
            if train.contains(t) {
                return bad(format!("node {t} in both train and test"));
            }
        }
        for id in self.train_ids.iter().chain(&self.test_ids) {
            if !self.labels.contains_key(id) {
                return bad(format!("split node {id} has no label"));
            }
        }
        Ok(())
    }

    /// Attach labels from `node<TAB>class<TAB>{train|test}` lines.
    pub fn attach_labels(&mut self, text: &str) -> Result<()> {
        let mut class_ids: HashMap<String, usize> =
            self.class_names.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        let index = self.name_index();
        for (line_no, line) in content_lines(text) {
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            if f.len() != 3 {
                return Err(GraphError::Parse {
                    line: line_no,
                    msg: format!("expected 3 tab-separated fields, got {}", f.len()),
                });
            }
            let node = *index.get(f[0]).ok_or_else(|| GraphError::UnknownEntity {
                line: line_no,
                name: f[0].to_string(),
            })?;
            let next = class_ids.len();
            let class = *class_ids.entry(f[1].to_string()).or_insert_with(|| {
                self.class_names.push(f[1].to_string());
                next
            });
            if self.labels.insert(node, class).is_some() {
                return Err(GraphError::Parse {
                    line: line_no,
                    msg: format!("entity `{}` labelled twice", f[0]),
                });
            }
            match f[2] {
                "train" => self.train_ids.push(node),
                "test" => self.test_ids.push(node),
                other => {
                    return Err(GraphError::Parse {
                        line: line_no,
                        msg: format!("split must be train or test, got `{other}`"),
                    })
                }
            }
        }
        self.num_classes = self.class_names.len();
        self.train_ids.sort_unstable();
        self.test_ids.sort_unstable();
        Ok(())
    }

    /// Attach node types from `node<TAB>type` lines. Nodes left without a
    /// type share a trailing `_untyped` type; nodes that appear only here
    /// are added without edges.
    pub fn attach_types(&mut self, text: &str) -> Result<()> {
        let mut index = self.name_index();
        let mut type_ids: HashMap<String, usize> = HashMap::new();
        self.type_names.clear();
        let mut assigned: Vec<Option<usize>> = vec![None; self.num_nodes];
        for (line_no, line) in content_lines(text) {
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            if f.len() != 2 {
                return Err(GraphError::Parse {
                    line: line_no,
                    msg: format!("expected 2 tab-separated fields, got {}", f.len()),
                });
            }
            let node = match index.get(f[0]) {
                Some(&n) => n,
                None => {
                    let n = self.num_nodes;
                    self.num_nodes += 1;
                    self.node_names.push(f[0].to_string());
                    assigned.push(None);
                    index.insert(f[0].to_string(), n);
                    n
                }
            };
            let next = type_ids.len();
            let t = *type_ids.entry(f[1].to_string()).or_insert_with(|| {
                self.type_names.push(f[1].to_string());
                next
            });
            assigned[node] = Some(t);
        }
        if assigned.iter().any(Option::is_none) {
            self.type_names.push("_untyped".into());
        }
        let untyped = self.type_names.len() - 1;
        self.node_type = assigned.into_iter().map(|t| t.unwrap_or(untyped)).collect();
        Ok(())
    }

    fn name_index(&self) -> HashMap<String, usize> {
        self.node_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect()
    }

    pub fn edges_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.edges {
            let _ = writeln!(
                s,
                "{}\t{}\t{}",
                self.node_names[e.src], self.relation_names[e.rel], self.node_names[e.dst]
            );
        }
        s
    }

    pub fn labels_tsv(&self) -> String {
        let mut s = String::new();
        for (split, ids) in [("train", &self.train_ids), ("test", &self.test_ids)] {
            for &n in ids {
                let _ = writeln!(s, "{}\t{}\t{}", self.node_names[n], self.class_names[self.labels[&n]], split);
            }
        }
        s
    }

    pub fn types_tsv(&self) -> String {
        let mut s = String::new();
        for (n, &t) in self.node_type.iter().enumerate() {
            let _ = writeln!(s, "{}\t{}", self.node_names[n], self.type_names[t]);
        }
        s
    }

    /// Write `edges.tsv`, `labels.tsv` and `types.tsv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for (name, body) in [
            ("edges.tsv", self.edges_tsv()),
            ("labels.tsv", self.labels_tsv()),
            ("types.tsv", self.types_tsv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| io_err(&p, e))?;
        }
        Ok(())
    }

    /// Load a dataset directory holding `edges.tsv` (or `edges.nt`),
    /// `labels.tsv` and optionally `types.tsv`. Without `labels.tsv` the
    /// benchmark layout is tried: see [`RelGraph::load_benchmark_dir`].
    pub fn load_dir(dir: &Path) -> Result<(Self, IngestReport)> {
        if !dir.join("labels.tsv").exists() && dir.join("trainingSet.tsv").exists() {
            return Self::load_benchmark_dir(dir);
        }
        let tsv = dir.join("edges.tsv");
        let nt = dir.join("edges.nt");
        let (path, format) = if tsv.exists() {
            (tsv, TripleFormat::Tsv)
        } else {
            (nt, TripleFormat::NTriples)
        };
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let (mut g, report) = parse_triples(&text, format)?;
        let types = dir.join("types.tsv");
        if types.exists() {
            let t = fs::read_to_string(&types).map_err(|e| io_err(&types, e))?;
            g.attach_types(&t)?;
        }
        let labels = dir.join("labels.tsv");
        let l = fs::read_to_string(&labels).map_err(|e| io_err(&labels, e))?;
        g.attach_labels(&l)?;
        g.validate()?;
        Ok((g, report))
    }
}

pub const RDF_TYPE: &str = "http://www.w3.org/1999/02/22-rdf-syntax-ns#type";

impl RelGraph {
    /// Load the RDF entity-classification layout: the first `*.nt` file in
    /// `dir` plus `trainingSet.tsv` and `testSet.tsv`, whose header names an
    /// entity column first and a `label_*` column. Node types come from
    /// `rdf:type` edges (first one wins).
    pub fn load_benchmark_dir(dir: &Path) -> Result<(Self, IngestReport)> {
        let mut nt: Vec<_> = fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "nt"))
            .collect();
        nt.sort();
        let path = nt.first().ok_or_else(|| GraphError::Invalid(format!("{}: no .nt edge file", dir.display())))?;
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let (mut g, report) = parse_triples(&text, TripleFormat::NTriples)?;

        let mut labels = String::new();
        for (file, split) in [("trainingSet.tsv", "train"), ("testSet.tsv", "test")] {
            let p = dir.join(file);
            let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            let header: Vec<&str> = lines.next().unwrap_or("").split('\t').map(str::trim).collect();
            let label_col = header
                .iter()
                .position(|h| h.starts_with("label"))
                .ok_or_else(|| GraphError::Invalid(format!("{}: no label_* column", p.display())))?;
            for line in lines {
                let f: Vec<&str> = line.split('\t').map(str::trim).collect();
                if f.len() <= label_col {
                    return Err(GraphError::Invalid(format!("{}: short row `{line}`", p.display())));
                }
                let _ = writeln!(labels, "{}\t{}\t{split}", f[0], f[label_col]);
            }
        }
        g.attach_labels(&labels)?;

        if let Some(rel) = g.relation_names.iter().position(|r| r == RDF_TYPE) {
            let mut types = String::new();
            let mut typed = HashSet::new();
            for e in &g.edges {
                if e.rel == rel && typed.insert(e.src) {
                    let _ = writeln!(types, "{}\t{}", g.node_names[e.src], g.node_names[e.dst]);
                }
            }
            g.attach_types(&types)?;
        }
        g.validate()?;
        Ok((g, report))
    }
}

fn io_err(p: &Path, source: std::io::Error) -> GraphError {
    GraphError::Io {
        path: p.display().to_string(),
        source,
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
}

/// Parse an edge file. Ids are dense and assigned in first-appearance
/// order. Every node starts with a single `_untyped` type until
/// [`RelGraph::attach_types`] is called.
pub fn parse_triples(text: &str, format: TripleFormat) -> Result<(RelGraph, IngestReport)> {
    let mut nodes: HashMap<String, usize> = HashMap::new();
    let mut rels: HashMap<String, usize> = HashMap::new();
    let mut g = RelGraph::default();
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    for (line_no, line) in content_lines(text) {
        let parts = match format {
            TripleFormat::Tsv => split_tsv(line, line_no)?,
            TripleFormat::NTriples => match split_ntriple(line, line_no)? {
                Some(p) => p,
                None => {
                    report.literals_dropped += 1;
                    continue;
                }
            },
        };
        let intern = |map: &mut HashMap<String, usize>, names: &mut Vec<String>, s: &str| {
            let next = map.len();
            *map.entry(s.to_string()).or_insert_with(|| {
                names.push(s.to_string());
                next
            })
        };
        let src = intern(&mut nodes, &mut g.node_names, parts[0]);
        let rel = intern(&mut rels, &mut g.relation_names, parts[1]);
        let dst = intern(&mut nodes, &mut g.node_names, parts[2]);
        let t = Triple { src, rel, dst };
        if seen.insert(t) {
            g.edges.push(t);
        } else {
            report.duplicates += 1;
        }
    }
    if g.edges.is_empty() {
        return Err(GraphError::Empty);
    }
    if report.duplicates > 0 {
        log::warn!("dropped {} duplicate triples", report.duplicates);
    }
    if report.literals_dropped > 0 {
        log::warn!("dropped {} literal-valued triples", report.literals_dropped);
    }
    g.num_nodes = g.node_names.len();
    g.num_relations = g.relation_names.len();
    g.node_type = vec![0; g.num_nodes];
    g.type_names = vec!["_untyped".into()];
    Ok((g, report))
}

fn split_tsv(line: &str, line_no: usize) -> Result<[&str; 3]> {
    let f: Vec<&str> = line.split('\t').map(str::trim).collect();
    if f.len() != 3 || f.iter().any(|s| s.is_empty()) {
        return Err(GraphError::Parse {
            line: line_no,
            msg: format!("expected `src<TAB>rel<TAB>dst`, got {} fields", f.len()),
        });
    }
    Ok([f[0], f[1], f[2]])
}

/// `Ok(None)` for a literal-valued triple.
fn split_ntriple(line: &str, line_no: usize) -> Result<Option<[&str; 3]>> {
    let err = |msg: &str| GraphError::Parse {
        line: line_no,
        msg: msg.to_string(),
    };
    let body = line
        .trim()
        .strip_suffix('.')
        .ok_or_else(|| err("N-Triples line must end with `.`"))?
        .trim_end();
    let mut rest = body;
    let mut terms = [""; 3];
    for (k, slot) in terms.iter_mut().enumerate() {
        rest = rest.trim_start();
        if k == 2 && rest.starts_with('"') {
            return Ok(None);
        }
        if let Some(r) = rest.strip_prefix('<') {
            let end = r.find('>').ok_or_else(|| err("unterminated IRI"))?;
            *slot = &r[..end];
            rest = &r[end + 1..];
        } else if rest.starts_with("_:") && k != 1 {
            let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
            *slot = &rest[..end];
            rest = &rest[end..];
        } else {
            return Err(err("expected `<iri>` term"));
        }
    }
    if !rest.trim().is_empty() {
        return Err(err("trailing content after object"));
    }
    Ok(Some(terms))
}

/// Per-relation in-neighbor lists with normalization `c_{i,r} = |N_i^r|`.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    num_nodes: usize,
    num_relations: usize,
    base_relations: usize,
    /// CSR over `node * num_relations + rel`.
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl NeighborIndex {
    /// Index the graph's in-edges. With `inverse_relations`, every edge
    /// `(s, r, d)` also contributes `d` as an in-neighbor of `s` under
    /// relation `r + R`.
    pub fn build(g: &RelGraph, inverse_relations: bool) -> Self {
        let base = g.num_relations;
        let r_eff = if inverse_relations { 2 * base } else { base };
        let slots = g.num_nodes * r_eff;
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(g.edges.len() * 2);
        for e in &g.edges {
            pairs.push((e.dst * r_eff + e.rel, e.src));
            if inverse_relations {
                pairs.push((e.src * r_eff + e.rel + base, e.dst));
            }
        }
        pairs.sort_unstable();
        let mut offsets = vec![0; slots + 1];
        for &(slot, _) in &pairs {
            offsets[slot + 1] += 1;
        }
        for i in 0..slots {
            offsets[i + 1] += offsets[i];
        }
        Self {
            num_nodes: g.num_nodes,
            num_relations: r_eff,
            base_relations: base,
            offsets,
            neighbors: pairs.into_iter().map(|(_, j)| j).collect(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Effective relation count (doubled when inverses are materialized).
    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn neighbors(&self, node: usize, rel: usize) -> &[usize] {
        let slot = node * self.num_relations + rel;
        &self.neighbors[self.offsets[slot]..self.offsets[slot + 1]]
    }

    /// `c_{i,r}`; `None` when node `i` has no in-neighbors under `r`.
    pub fn norm(&self, node: usize, rel: usize) -> Option<f64> {
        match self.neighbors(node, rel).len() {
            0 => None,
            n => Some(n as f64),
        }
    }

    /// The indexed edges as `(src, rel, dst)`, sorted. Inverse entries are
    /// mirrors of these and are not repeated.
    pub fn flatten(&self) -> Vec<Triple> {
        let mut out = Vec::with_capacity(self.neighbors.len());
        for i in 0..self.num_nodes {
            for r in 0..self.base_relations {
                out.extend(self.neighbors(i, r).iter().map(|&j| Triple { src: j, rel: r, dst: i }));
            }
        }
        out.sort_unstable();
        out
    }

    /// `(dst, src, rel, 1/c)` entries for relational message passing.
    pub fn message_entries(&self) -> Vec<(usize, usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.neighbors.len());
        for i in 0..self.num_nodes {
            for r in 0..self.num_relations {
                let nb = self.neighbors(i, r);
                let w = 1.0 / nb.len() as f64;
                out.extend(nb.iter().map(|&j| (i, j, r, w)));
            }
        }
        out
    }
}
