//! Citation dataset files: the LINQS text release, the canonical TSV
//! layout, and seeded train/val/test splits.
//!
//! Canonical directory:
//!
//! | file        | line                                   |
//! |-------------|----------------------------------------|
//! | `nodes.tsv` | `node_id  label  v1 … vD` (label `-1` = unlabeled) |
//! | `edges.tsv` | `node_id  node_id`                     |
//! | `split.tsv` | `node_id  train\|val\|test` (optional) |
//! | `idmap.tsv` | `original_id  dense_index`             |
//!
//! Node ids are dense: line `i` of `nodes.tsv` describes node `i`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, MaskKind, Masks};
use crate::scalar::Scalar;

pub const NODES_FILE: &str = "nodes.tsv";
pub const EDGES_FILE: &str = "edges.tsv";
pub const SPLIT_FILE: &str = "split.tsv";
pub const IDMAP_FILE: &str = "idmap.tsv";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty lines with 1-based numbers.
fn numbered(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_field<F: FromStr>(path: &Path, line: usize, what: &str, s: &str) -> Result<F> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {what} `{s}`")))
}

/// A dataset read from the LINQS text release.
#[derive(Debug, Clone)]
pub struct LinqsDataset<T> {
    pub graph: Graph<T>,
    /// Original document id of each dense node index.
    pub ids: Vec<String>,
    /// Class names; label `k` is `classes[k]`.
    pub classes: Vec<String>,
    /// Citation lines read, before any filtering.
    pub cite_lines: usize,
    /// Citations dropped because an endpoint has no content line.
    pub dropped_edges: usize,
}

/// Parses `*.content` (`id  f1 … fD  class`) and `*.cites` (`id  id`).
/// Class names map to indices in sorted order.
pub fn parse_linqs<T: Scalar>(content: &Path, cites: &Path) -> Result<LinqsDataset<T>> {
    parse_linqs_with_classes(content, cites, None)
}

/// Like [`parse_linqs`], but with a fixed class list: any other class name
/// is rejected.
pub fn parse_linqs_with_classes<T: Scalar>(
    content: &Path,
    cites: &Path,
    classes: Option<&[String]>,
) -> Result<LinqsDataset<T>> {
    let text = read(content)?;
    let mut ids = Vec::new();
    let mut rows: Vec<Vec<T>> = Vec::new();
    let mut class_names = Vec::new();
    let mut dim = None;
    let mut index = HashMap::new();
    for (no, line) in numbered(&text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(parse_err(
                content,
                no,
                "expected `id<TAB>features…<TAB>class`",
            ));
        }
        let d = fields.len() - 2;
        match dim {
            None => dim = Some(d),
            Some(expect) if expect != d => {
                return Err(parse_err(
                    content,
                    no,
                    format!("{d} feature values, expected {expect}"),
                ));
            }
            _ => {}
        }
        let id = fields[0].trim().to_string();
        if index.insert(id.clone(), ids.len()).is_some() {
            return Err(parse_err(content, no, format!("duplicate id `{id}`")));
        }
        let values = fields[1..=d]
            .iter()
            .map(|s| parse_field(content, no, "feature value", s))
            .collect::<Result<Vec<T>>>()?;
        ids.push(id);
        rows.push(values);
        class_names.push((no, fields[d + 1].trim().to_string()));
    }
    let dim = dim.ok_or_else(|| parse_err(content, 0, "no content lines"))?;

    let classes: Vec<String> = match classes {
        Some(list) => list.to_vec(),
        None => class_names
            .iter()
            .map(|(_, c)| c.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let class_index: HashMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let labels = class_names
        .iter()
        .map(|(no, c)| {
            class_index
                .get(c.as_str())
                .map(|&k| Some(k))
                .ok_or_else(|| parse_err(content, *no, format!("unknown class `{c}`")))
        })
        .collect::<Result<Vec<_>>>()?;

    let text = read(cites)?;
    let mut edges = Vec::new();
    let mut cite_lines = 0;
    let mut dropped_edges = 0;
    for (no, line) in numbered(&text) {
        let mut parts = line.split('\t').map(str::trim);
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(cites, no, "expected `id<TAB>id`"));
        };
        cite_lines += 1;
        match (index.get(a), index.get(b)) {
            (Some(&i), Some(&j)) => edges.push((i, j)),
            _ => dropped_edges += 1,
        }
    }
    if dropped_edges > 0 {
        log::warn!(
            "{}: dropped {dropped_edges} citations to unknown ids",
            cites.display()
        );
    }

    let n = ids.len();
    let x = Array2::from_shape_vec((n, dim), rows.into_iter().flatten().collect())
        .expect("rows have equal length");
    let graph = Graph::build(n, &edges, x, labels, Masks::empty(n))?;
    Ok(LinqsDataset {
        graph,
        ids,
        classes,
        cite_lines,
        dropped_edges,
    })
}

/// Finds the single `*.content` / `*.cites` pair in `dir`.
pub fn find_linqs_files(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut content = Vec::new();
    let mut cites = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        match path.extension().and_then(|e| e.to_str()) {
            Some("content") => content.push(path),
            Some("cites") => cites.push(path),
            _ => {}
        }
    }
    match (content.as_slice(), cites.as_slice()) {
        ([c], [e]) => Ok((c.clone(), e.clone())),
        ([], _) => Err(Error::MissingFile(dir.join("*.content"))),
        (_, []) => Err(Error::MissingFile(dir.join("*.cites"))),
        _ => Err(Error::InvalidGraph(format!(
            "{} holds more than one .content/.cites pair",
            dir.display()
        ))),
    }
}

/// How many nodes go to each split. With `train_per_class`, `train` counts
/// nodes per class instead of in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    #[serde(default)]
    pub train_per_class: bool,
}

/// Named split presets.
pub const SPLIT_PRESETS: &[(&str, usize, usize, usize, bool)] = &[
    ("cora-fastgcn", 1208, 500, 1000, false),
    ("citeseer-fastgcn", 1827, 500, 1000, false),
    ("pubmed-fastgcn", 18217, 500, 1000, false),
    ("planetoid-style", 20, 500, 1000, true),
];

impl SplitSpec {
    pub fn new(train: usize, val: usize, test: usize, seed: u64) -> Self {
        Self {
            train,
            val,
            test,
            seed,
            train_per_class: false,
        }
    }

    /// A preset name or `train/val/test` counts.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        if let Some(&(_, train, val, test, per_class)) = SPLIT_PRESETS.iter().find(|p| p.0 == s) {
            return Ok(Self {
                train,
                val,
                test,
                seed,
                train_per_class: per_class,
            });
        }
        let counts: Vec<usize> = s
            .split('/')
            .map(|c| c.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::InvalidSplit(format!(
                    "`{s}` is neither a split preset nor train/val/test counts"
                ))
            })?;
        match counts[..] {
            [train, val, test] => Ok(Self::new(train, val, test, seed)),
            _ => Err(Error::InvalidSplit(format!(
                "`{s}` needs exactly three counts"
            ))),
        }
    }
}

/// Seeded split over the labeled nodes: after one uniform shuffle, test takes
/// the first `test` nodes, val the next `val`, and train is drawn from what
/// remains.
pub fn make_split<T: Scalar>(g: &Graph<T>, spec: &SplitSpec) -> Result<Masks> {
    let mut labeled: Vec<usize> = (0..g.num_nodes())
        .filter(|&i| g.labels()[i].is_some())
        .collect();
    let wanted = spec.test + spec.val + if spec.train_per_class { 0 } else { spec.train };
    if wanted > labeled.len() {
        return Err(Error::InvalidSplit(format!(
            "{}/{}/{} nodes requested but only {} are labeled",
            spec.train,
            spec.val,
            spec.test,
            labeled.len()
        )));
    }
    labeled.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let test = &labeled[..spec.test];
    let val = &labeled[spec.test..spec.test + spec.val];
    let rest = &labeled[spec.test + spec.val..];
    let train: Vec<usize> = if spec.train_per_class {
        let mut taken = vec![0usize; g.num_classes()];
        let picked: Vec<usize> = rest
            .iter()
            .copied()
            .filter(|&i| {
                let c = g.labels()[i].expect("labeled");
                taken[c] += 1;
                taken[c] <= spec.train
            })
            .collect();
        if let Some(c) = taken.iter().position(|&t| t < spec.train) {
            return Err(Error::InvalidSplit(format!(
                "class {c} has only {} nodes left for {} training slots",
                taken[c], spec.train
            )));
        }
        picked
    } else {
        rest[..spec.train].to_vec()
    };
    Ok(Masks::from_indices(g.num_nodes(), &train, val, test))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the canonical files. `ids` defaults to the dense indices.
pub fn save_canonical<T: Scalar>(g: &Graph<T>, dir: &Path, ids: Option<&[String]>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(ids) = ids {
        if ids.len() != g.num_nodes() {
            return Err(Error::InvalidGraph(format!(
                "{} ids for {} nodes",
                ids.len(),
                g.num_nodes()
            )));
        }
    }

    let mut nodes = String::new();
    for (i, row) in g.features().rows().into_iter().enumerate() {
        match g.labels()[i] {
            Some(l) => write!(nodes, "{i}\t{l}"),
            None => write!(nodes, "{i}\t-1"),
        }
        .expect("writing to a String");
        for v in row {
            write!(nodes, "\t{v}").expect("writing to a String");
        }
        nodes.push('\n');
    }
    write_file(&dir.join(NODES_FILE), &nodes)?;

    let mut edges = String::new();
    for (a, b) in g.edges() {
        writeln!(edges, "{a}\t{b}").expect("writing to a String");
    }
    write_file(&dir.join(EDGES_FILE), &edges)?;

    let mut split = String::new();
    for i in 0..g.num_nodes() {
        for which in [MaskKind::Train, MaskKind::Val, MaskKind::Test] {
            if g.masks().get(which)[i] {
                writeln!(split, "{i}\t{which}").expect("writing to a String");
            }
        }
    }
    write_file(&dir.join(SPLIT_FILE), &split)?;

    let mut idmap = String::new();
    for i in 0..g.num_nodes() {
        match ids {
            Some(ids) => writeln!(idmap, "{}\t{i}", ids[i]),
            None => writeln!(idmap, "{i}\t{i}"),
        }
        .expect("writing to a String");
    }
    write_file(&dir.join(IDMAP_FILE), &idmap)
}

/// Loads a canonical directory. A missing `split.tsv` means empty masks.
pub fn load_canonical<T: Scalar>(dir: &Path) -> Result<Graph<T>> {
    let path = dir.join(NODES_FILE);
    let text = read(&path)?;
    let mut labels = Vec::new();
    let mut values: Vec<T> = Vec::new();
    let mut dim = None;
    for (no, line) in numbered(&text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(parse_err(
                &path,
                no,
                "expected `node_id<TAB>label<TAB>values…`",
            ));
        }
        let id: usize = parse_field(&path, no, "node id", fields[0])?;
        if id != labels.len() {
            return Err(parse_err(
                &path,
                no,
                format!("node id {id} out of order, expected {}", labels.len()),
            ));
        }
        let label: i64 = parse_field(&path, no, "label", fields[1])?;
        labels.push(match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(parse_err(&path, no, format!("bad label {l}"))),
        });
        let d = fields.len() - 2;
        match dim {
            None => dim = Some(d),
            Some(expect) if expect != d => {
                return Err(parse_err(
                    &path,
                    no,
                    format!("{d} feature values, expected {expect}"),
                ));
            }
            _ => {}
        }
        for s in &fields[2..] {
            values.push(parse_field(&path, no, "feature value", s)?);
        }
    }
    let n = labels.len();
    let x = Array2::from_shape_vec((n, dim.unwrap_or(0)), values).expect("rows have equal length");

    let path = dir.join(EDGES_FILE);
    let text = read(&path)?;
    let mut edges = Vec::new();
    for (no, line) in numbered(&text) {
        let mut parts = line.split('\t');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(&path, no, "expected `node_id<TAB>node_id`"));
        };
        let a: usize = parse_field(&path, no, "node id", a)?;
        let b: usize = parse_field(&path, no, "node id", b)?;
        if a >= n || b >= n {
            return Err(parse_err(
                &path,
                no,
                format!("edge ({a}, {b}) refers to a node outside 0..{n}"),
            ));
        }
        edges.push((a, b));
    }

    let path = dir.join(SPLIT_FILE);
    let mut masks = Masks::empty(n);
    if path.exists() {
        let text = read(&path)?;
        for (no, line) in numbered(&text) {
            let Some((id, which)) = line.split_once('\t') else {
                return Err(parse_err(
                    &path,
                    no,
                    "expected `node_id<TAB>train|val|test`",
                ));
            };
            let id: usize = parse_field(&path, no, "node id", id)?;
            let which: MaskKind = parse_field(&path, no, "split name", which)?;
            if id >= n {
                return Err(parse_err(&path, no, format!("node {id} outside 0..{n}")));
            }
            if masks.train[id] || masks.val[id] || masks.test[id] {
                return Err(parse_err(&path, no, format!("node {id} listed twice")));
            }
            match which {
                MaskKind::Train => masks.train[id] = true,
                MaskKind::Val => masks.val[id] = true,
                MaskKind::Test => masks.test[id] = true,
            }
        }
    }
    Graph::build(n, &edges, x, labels, masks)
}

/// Original ids from `idmap.tsv`, indexed by dense position.
pub fn load_idmap(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(IDMAP_FILE);
    let text = read(&path)?;
    let mut ids = Vec::new();
    for (no, line) in numbered(&text) {
        let Some((orig, dense)) = line.rsplit_once('\t') else {
            return Err(parse_err(
                &path,
                no,
                "expected `original_id<TAB>dense_index`",
            ));
        };
        let dense: usize = parse_field(&path, no, "dense index", dense)?;
        if dense != ids.len() {
            return Err(parse_err(
                &path,
                no,
                format!("dense index {dense} out of order"),
            ));
        }
        ids.push(orig.to_string());
    }
    Ok(ids)
}

/// Loads either layout: canonical when `nodes.tsv` exists, otherwise a
/// LINQS `.content`/`.cites` pair (with empty masks).
pub fn load_any<T: Scalar>(dir: &Path) -> Result<Graph<T>> {
    if dir.join(NODES_FILE).exists() {
        load_canonical(dir)
    } else {
        let (content, cites) = find_linqs_files(dir)?;
        Ok(parse_linqs(&content, &cites)?.graph)
    }
}
