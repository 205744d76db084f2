//! File formats: native graph JSON, checkpoints, manifests and history CSV.

use std::fs;
use std::path::{Path, PathBuf};

use gvp_core::checkpoint::{Checkpoint, CheckpointError};
use gvp_core::graph::{featurize, parse_xyz, strip_hydrogens, AtomRecord, ElementVocab, GraphError, MolGraph};
use gvp_core::train::{History, Sample};
use serde_json::{json, Map, Value};

pub const GRAPH_VERSION: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: std::io::Error },
    #[error("{}: invalid JSON: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: {pointer}: {message}", file.display())]
    Schema { file: PathBuf, pointer: String, message: String },
    #[error("{}: unsupported graph version {version} (expected {GRAPH_VERSION})", file.display())]
    Version { file: PathBuf, version: Value },
    #[error("{}: {source}", file.display())]
    Graph { file: PathBuf, source: GraphError },
    #[error("{}: {source}", file.display())]
    Checkpoint { file: PathBuf, source: CheckpointError },
    #[error("{} line {line}: {message}", file.display())]
    Manifest { file: PathBuf, line: usize, message: String },
}

fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File { path: path.into(), source })
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File { path: path.into(), source })
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|source| IoError::File { path: path.into(), source })
}

/// Reads an XYZ file, optionally dropping hydrogens.
pub fn read_xyz(path: &Path, keep_hydrogens: bool) -> Result<Vec<AtomRecord>, IoError> {
    let atoms = parse_xyz(&read_text(path)?).map_err(|source| IoError::Graph { file: path.into(), source })?;
    Ok(if keep_hydrogens { atoms } else { strip_hydrogens(&atoms) })
}

pub fn graph_to_json(g: &MolGraph) -> Value {
    let nodes: Vec<Value> = g
        .atoms
        .iter()
        .map(|a| json!({"element": a.element, "pos": a.position, "readout": a.readout}))
        .collect();
    let edges: Vec<Value> = g.edges.iter().map(|e| json!([e.src, e.dst])).collect();
    json!({
        "version": GRAPH_VERSION,
        "cutoff": g.cutoff,
        "vocab": g.vocab.symbols(),
        "nodes": nodes,
        "edges": edges,
    })
}

pub fn graph_to_string(g: &MolGraph) -> String {
    let mut s = serde_json::to_string_pretty(&graph_to_json(g)).expect("graph JSON serializes");
    s.push('\n');
    s
}

struct Doc<'a> {
    file: &'a Path,
}

impl Doc<'_> {
    fn err<T>(&self, pointer: impl Into<String>, message: impl Into<String>) -> Result<T, IoError> {
        Err(IoError::Schema { file: self.file.into(), pointer: pointer.into(), message: message.into() })
    }

    fn field<'v>(&self, obj: &'v Map<String, Value>, base: &str, key: &str) -> Result<&'v Value, IoError> {
        match obj.get(key) {
            Some(v) => Ok(v),
            None => self.err(format!("{base}/{key}"), "missing key"),
        }
    }

    fn array<'v>(&self, v: &'v Value, pointer: &str) -> Result<&'v Vec<Value>, IoError> {
        match v.as_array() {
            Some(a) => Ok(a),
            None => self.err(pointer, "expected an array"),
        }
    }

    fn number(&self, v: &Value, pointer: &str) -> Result<f64, IoError> {
        match v.as_f64() {
            Some(x) if x.is_finite() => Ok(x),
            _ => self.err(pointer, "expected a finite number"),
        }
    }

    fn index(&self, v: &Value, pointer: &str) -> Result<usize, IoError> {
        match v.as_u64() {
            Some(x) => Ok(x as usize),
            None => self.err(pointer, "expected a non-negative integer"),
        }
    }
}

/// Parses a native graph document. Edges are rebuilt from the positions and
/// must agree with the stored edge list.
pub fn graph_from_json(v: &Value, file: &Path) -> Result<MolGraph, IoError> {
    let d = Doc { file };
    let Some(root) = v.as_object() else { return d.err("", "expected an object") };
    let version = d.field(root, "", "version")?;
    if version.as_u64() != Some(GRAPH_VERSION) {
        return Err(IoError::Version { file: file.into(), version: version.clone() });
    }
    let cutoff = d.number(d.field(root, "", "cutoff")?, "/cutoff")?;
    let vocab_v = d.array(d.field(root, "", "vocab")?, "/vocab")?;
    let mut symbols = Vec::with_capacity(vocab_v.len());
    for (i, s) in vocab_v.iter().enumerate() {
        match s.as_str() {
            Some(s) => symbols.push(s),
            None => return d.err(format!("/vocab/{i}"), "expected a string"),
        }
    }
    let vocab = ElementVocab::new(&symbols).map_err(|source| IoError::Graph { file: file.into(), source })?;
    let nodes_v = d.array(d.field(root, "", "nodes")?, "/nodes")?;
    let mut atoms = Vec::with_capacity(nodes_v.len());
    for (i, n) in nodes_v.iter().enumerate() {
        let base = format!("/nodes/{i}");
        let Some(obj) = n.as_object() else { return d.err(base, "expected an object") };
        let Some(element) = d.field(obj, &base, "element")?.as_str() else {
            return d.err(format!("{base}/element"), "expected a string");
        };
        let pos_v = d.array(d.field(obj, &base, "pos")?, &format!("{base}/pos"))?;
        if pos_v.len() != 3 {
            return d.err(format!("{base}/pos"), "expected 3 coordinates");
        }
        let mut position = [0.0; 3];
        for (k, c) in pos_v.iter().enumerate() {
            position[k] = d.number(c, &format!("{base}/pos/{k}"))?;
        }
        let readout = match obj.get("readout") {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => return d.err(format!("{base}/readout"), "expected a boolean"),
        };
        atoms.push(AtomRecord { element: element.into(), position, readout });
    }
    let edges_v = d.array(d.field(root, "", "edges")?, "/edges")?;
    let mut stored = Vec::with_capacity(edges_v.len());
    for (i, e) in edges_v.iter().enumerate() {
        let pair = d.array(e, &format!("/edges/{i}"))?;
        if pair.len() != 2 {
            return d.err(format!("/edges/{i}"), "expected [src, dst]");
        }
        stored.push((d.index(&pair[0], &format!("/edges/{i}/0"))?, d.index(&pair[1], &format!("/edges/{i}/1"))?));
    }
    let g = featurize(&atoms, &vocab, cutoff).map_err(|source| IoError::Graph { file: file.into(), source })?;
    let rebuilt: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.src, e.dst)).collect();
    if rebuilt != stored {
        return d.err("/edges", format!("stored edges disagree with positions ({} stored, {} recomputed)", stored.len(), rebuilt.len()));
    }
    Ok(g)
}

pub fn parse_graph(text: &str, file: &Path) -> Result<MolGraph, IoError> {
    let v: Value = serde_json::from_str(text).map_err(|source| IoError::Json { path: file.into(), source })?;
    graph_from_json(&v, file)
}

pub fn read_graph(path: &Path) -> Result<MolGraph, IoError> {
    parse_graph(&read_text(path)?, path)
}

pub fn write_graph(path: &Path, g: &MolGraph) -> Result<(), IoError> {
    write(path, graph_to_string(g))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    write(path, ckpt.encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    Checkpoint::decode(&read(path)?).map_err(|source| IoError::Checkpoint { file: path.into(), source })
}

/// Reads a manifest: one sample per line, `<graph> <targets...>` or, for
/// paired tasks, `<graph> <graph> <targets...>`. Relative graph paths are
/// resolved against the manifest's directory; `#` starts a comment.
pub fn read_manifest(path: &Path, paired: bool) -> Result<Vec<Sample>, IoError> {
    let text = read_text(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let npaths = if paired { 2 } else { 1 };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() <= npaths {
            return Err(IoError::Manifest { file: path.into(), line, message: format!("expected {npaths} graph path(s) and at least one target") });
        }
        let mut graphs = Vec::with_capacity(npaths);
        for f in &fields[..npaths] {
            graphs.push(read_graph(&dir.join(f))?);
        }
        let mut target = Vec::new();
        for f in &fields[npaths..] {
            match f.parse::<f64>() {
                Ok(x) if x.is_finite() => target.push(x),
                _ => return Err(IoError::Manifest { file: path.into(), line, message: format!("invalid target {f:?}") }),
            }
        }
        out.push(Sample { graphs, target });
    }
    if out.is_empty() {
        return Err(IoError::Manifest { file: path.into(), line: 0, message: "no samples".into() });
    }
    Ok(out)
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,metric";

pub fn history_csv(h: &History) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for e in 0..h.epochs() {
        s.push_str(&format!("{},{:?},{:?},{:?}\n", e + 1, h.train_loss[e], h.val_loss[e], h.metric[e]));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use gvp_core::graph::DEFAULT_CUTOFF;

    fn sample_graph() -> MolGraph {
        let atoms = vec![
            AtomRecord::new("C", [0.1, 0.2, 0.30000000000000004]),
            AtomRecord::new("O", [1.0 / 3.0, 1.5, -0.7]).tagged(),
            AtomRecord::new("Zz", [2.0, -1.1, 0.9]),
        ];
        featurize(&atoms, &ElementVocab::default(), DEFAULT_CUTOFF).unwrap()
    }

    #[test]
    fn json_round_trip_is_exact() {
        let g = sample_graph();
        let back = parse_graph(&graph_to_string(&g), Path::new("g.json")).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn schema_errors_carry_pointers() {
        let mut v = graph_to_json(&sample_graph());
        v.as_object_mut().unwrap().remove("edges");
        let e = graph_from_json(&v, Path::new("g.json")).unwrap_err();
        assert!(e.to_string().contains("/edges"), "{e}");

        let mut v = graph_to_json(&sample_graph());
        v["nodes"][1]["pos"][2] = json!("x");
        let e = graph_from_json(&v, Path::new("g.json")).unwrap_err();
        assert!(e.to_string().contains("/nodes/1/pos/2"), "{e}");

        let mut v = graph_to_json(&sample_graph());
        v["version"] = json!(2);
        assert!(matches!(graph_from_json(&v, Path::new("g.json")), Err(IoError::Version { .. })));

        let mut v = graph_to_json(&sample_graph());
        v["edges"] = json!([[0, 1]]);
        let e = graph_from_json(&v, Path::new("g.json")).unwrap_err();
        assert!(e.to_string().contains("/edges"), "{e}");
    }

    #[test]
    fn history_format() {
        let h = History { train_loss: vec![0.5, 0.25], val_loss: vec![f64::NAN, 1.0], metric: vec![f64::NAN, -1.0] };
        assert_eq!(history_csv(&h), "epoch,train_loss,val_loss,metric\n1,0.5,NaN,NaN\n2,0.25,1.0,-1.0\n");
    }
}
