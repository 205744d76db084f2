//! Atomic structures as radius graphs.
//!
//! Nodes are atoms with a one-hot element encoding; directed edges join
//! every pair of atoms closer than the cutoff and carry the unit vector
//! toward the destination atom plus a Gaussian RBF encoding of the length.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::svt::Orthogonal3;
use crate::tensor::Tensor;

pub const DEFAULT_CUTOFF: f64 = 4.5;
pub const RBF_COUNT: usize = 16;
/// Atoms closer than this are treated as coincident.
pub const COINCIDENT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty graph: no atoms")]
    Empty,
    #[error("cutoff must be positive, got {0}")]
    BadCutoff(f64),
    #[error("atoms {0} and {1} coincide; edge direction undefined")]
    Coincident(usize, usize),
    #[error("duplicate element `{0}` in vocabulary")]
    DuplicateElement(String),
    #[error("empty element symbol in vocabulary")]
    EmptyElement,
    #[error("non-finite coordinate for atom {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomRecord {
    pub element: String,
    /// Å
    pub position: [f64; 3],
    /// Marks atoms whose embeddings are read out (e.g. alpha carbons).
    pub readout: bool,
}

impl AtomRecord {
    pub fn new(element: &str, position: [f64; 3]) -> Self {
        Self { element: element.to_string(), position, readout: false }
    }

    pub fn tagged(mut self) -> Self {
        self.readout = true;
        self
    }
}

/// Parses XYZ text: atom count, comment line, then `symbol x y z [tag]`
/// lines where a fifth column `1` marks a readout atom.
pub fn parse_xyz(text: &str) -> Result<Vec<AtomRecord>, GraphError> {
    let err = |line: usize, message: String| GraphError::Parse { line, message };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "missing atom count".to_string()))?;
    let count: usize = header.trim().parse().map_err(|_| err(1, format!("invalid atom count `{}`", header.trim())))?;
    if count == 0 {
        return Err(err(1, "atom count is zero".to_string()));
    }
    if lines.next().is_none() {
        return Err(err(2, "missing comment line".to_string()));
    }
    let mut atoms = Vec::with_capacity(count);
    for (idx, raw) in lines.enumerate() {
        let line_no = idx + 3;
        let line = raw.trim();
        if line.is_empty() {
            if atoms.len() < count {
                return Err(err(line_no, format!("expected {count} atoms, found {}", atoms.len())));
            }
            continue;
        }
        if atoms.len() == count {
            return Err(err(line_no, format!("more atom lines than the declared {count}")));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 || fields.len() > 5 {
            return Err(err(line_no, format!("expected `symbol x y z [tag]`, got `{line}`")));
        }
        let mut position = [0.0; 3];
        for (k, axis) in ["x", "y", "z"].iter().enumerate() {
            let v: f64 = fields[k + 1]
                .parse()
                .map_err(|_| err(line_no, format!("malformed {axis} coordinate `{}`", fields[k + 1])))?;
            if !v.is_finite() {
                return Err(err(line_no, format!("non-finite {axis} coordinate")));
            }
            position[k] = v;
        }
        let readout = match fields.get(4) {
            None | Some(&"0") => false,
            Some(&"1") => true,
            Some(other) => return Err(err(line_no, format!("readout tag must be 0 or 1, got `{other}`"))),
        };
        atoms.push(AtomRecord { element: fields[0].to_string(), position, readout });
    }
    if atoms.len() != count {
        return Err(err(atoms.len() + 3, format!("expected {count} atoms, found {}", atoms.len())));
    }
    Ok(atoms)
}

pub fn is_hydrogen(element: &str) -> bool {
    element.eq_ignore_ascii_case("h")
}

pub fn strip_hydrogens(atoms: &[AtomRecord]) -> Vec<AtomRecord> {
    atoms.iter().filter(|a| !is_hydrogen(&a.element)).cloned().collect()
}

/// Ordered element symbols plus an implicit trailing "other" bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElementVocab {
    symbols: Vec<String>,
}

impl Default for ElementVocab {
    fn default() -> Self {
        Self { symbols: ["H", "C", "N", "O", "F", "P", "S", "Cl", "Se", "Br", "I"].iter().map(|s| s.to_string()).collect() }
    }
}

impl ElementVocab {
    pub fn new<S: AsRef<str>>(symbols: &[S]) -> Result<Self, GraphError> {
        let mut out: Vec<String> = Vec::with_capacity(symbols.len());
        for s in symbols {
            let s = s.as_ref().trim();
            if s.is_empty() {
                return Err(GraphError::EmptyElement);
            }
            if out.iter().any(|o| o.eq_ignore_ascii_case(s)) {
                return Err(GraphError::DuplicateElement(s.to_string()));
            }
            out.push(s.to_string());
        }
        Ok(Self { symbols: out })
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// One-hot width: the symbols plus the "other" bucket.
    pub fn width(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Case-insensitive lookup; unknown symbols map to the last index.
    pub fn index(&self, element: &str) -> usize {
        self.symbols.iter().position(|s| s.eq_ignore_ascii_case(element)).unwrap_or(self.symbols.len())
    }

    pub fn one_hot(&self, element: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.width()];
        v[self.index(element)] = 1.0;
        v
    }
}

/// Evenly spaced Gaussian radial basis on `[d_min, d_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfBasis {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl Default for RbfBasis {
    fn default() -> Self {
        Self { d_min: 0.0, d_max: DEFAULT_CUTOFF, count: RBF_COUNT }
    }
}

impl RbfBasis {
    pub fn center(&self, k: usize) -> f64 {
        if self.count <= 1 {
            return self.d_min;
        }
        self.d_min + k as f64 * (self.d_max - self.d_min) / (self.count - 1) as f64
    }

    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.count as f64
    }
}

/// `exp(-(d - μ_k)² / (2γ²))` for each center `μ_k`.
pub fn rbf_encode(d: f64, basis: &RbfBasis) -> Vec<f64> {
    let gamma = basis.width();
    let denom = 2.0 * gamma * gamma;
    (0..basis.count)
        .map(|k| {
            let x = d - basis.center(k);
            libm::exp(-(x * x) / denom)
        })
        .collect()
}

/// Both directed edges for every pair strictly closer than `cutoff`,
/// sorted by `(src, dst)`. Uses a cell list with cells of side `cutoff`.
pub fn build_radius_graph(positions: &[[f64; 3]], cutoff: f64) -> Result<Vec<(usize, usize)>, GraphError> {
    if positions.is_empty() {
        return Err(GraphError::Empty);
    }
    if !(cutoff > 0.0) || !cutoff.is_finite() {
        return Err(GraphError::BadCutoff(cutoff));
    }
    for (i, p) in positions.iter().enumerate() {
        if !p.iter().all(|x| x.is_finite()) {
            return Err(GraphError::NonFinite(i));
        }
    }
    let cell_of = |p: &[f64; 3]| -> [i64; 3] { [0, 1, 2].map(|k| libm::floor(p[k] / cutoff) as i64) };
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in positions.iter().enumerate() {
        cells.entry(cell_of(p)).or_default().push(i);
    }
    let cutoff2 = cutoff * cutoff;
    let mut edges = Vec::new();
    for (i, p) in positions.iter().enumerate() {
        let c = cell_of(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(members) = cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else { continue };
                    for &j in members {
                        if j != i && dist2(p, &positions[j]) < cutoff2 {
                            edges.push((i, j));
                        }
                    }
                }
            }
        }
    }
    edges.sort_unstable();
    Ok(edges)
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    /// Unit vector from `src` toward `dst`.
    pub unit: [f64; 3],
    /// Å
    pub distance: f64,
    pub rbf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MolGraph {
    pub atoms: Vec<AtomRecord>,
    pub vocab: ElementVocab,
    pub cutoff: f64,
    /// One-hot element encodings, one row per atom.
    pub node_scalars: Vec<Vec<f64>>,
    pub edges: Vec<Edge>,
}

impl MolGraph {
    pub fn num_nodes(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn readout_nodes(&self) -> Vec<usize> {
        self.atoms.iter().enumerate().filter(|(_, a)| a.readout).map(|(i, _)| i).collect()
    }

    /// Edge indices grouped by destination node.
    pub fn incoming(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.atoms.len()];
        for (k, e) in self.edges.iter().enumerate() {
            inc[e.dst].push(k);
        }
        inc
    }

    pub fn node_tensor(&self, i: usize) -> Tensor {
        Tensor::column(self.node_scalars[i].clone())
    }

    /// Re-featurizes after `p ↦ R p + t` on every atom.
    pub fn transformed(&self, r: &Orthogonal3, t: [f64; 3]) -> Result<MolGraph, GraphError> {
        let atoms: Vec<AtomRecord> = self
            .atoms
            .iter()
            .map(|a| {
                let p = r.apply(&a.position);
                AtomRecord { position: [p[0] + t[0], p[1] + t[1], p[2] + t[2]], ..a.clone() }
            })
            .collect();
        featurize(&atoms, &self.vocab, self.cutoff)
    }

    /// Relabels atoms so that new atom `k` is old atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<MolGraph, GraphError> {
        let atoms: Vec<AtomRecord> = perm.iter().map(|&k| self.atoms[k].clone()).collect();
        featurize(&atoms, &self.vocab, self.cutoff)
    }
}

/// Builds the featurized radius graph. The RBF basis spans `[0, cutoff]`
/// with [`RBF_COUNT`] centers.
pub fn featurize(atoms: &[AtomRecord], vocab: &ElementVocab, cutoff: f64) -> Result<MolGraph, GraphError> {
    let positions: Vec<[f64; 3]> = atoms.iter().map(|a| a.position).collect();
    let pairs = build_radius_graph(&positions, cutoff)?;
    let basis = RbfBasis { d_min: 0.0, d_max: cutoff, count: RBF_COUNT };
    let mut edges = Vec::with_capacity(pairs.len());
    for (src, dst) in pairs {
        let (a, b) = (&positions[src], &positions[dst]);
        let diff = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let distance = libm::sqrt(diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]);
        if distance < COINCIDENT_TOL {
            return Err(GraphError::Coincident(src.min(dst), src.max(dst)));
        }
        edges.push(Edge {
            src,
            dst,
            unit: [diff[0] / distance, diff[1] / distance, diff[2] / distance],
            distance,
            rbf: rbf_encode(distance, &basis),
        });
    }
    Ok(MolGraph {
        atoms: atoms.to_vec(),
        vocab: vocab.clone(),
        cutoff,
        node_scalars: atoms.iter().map(|a| vocab.one_hot(&a.element)).collect(),
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svt::random_orthogonal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parses_simple_file() {
        let atoms = parse_xyz("2\ntest\nC 0 0 0\nO 0 0 3.0").unwrap();
        assert_eq!(atoms.len(), 2);
        assert_eq!(atoms[0], AtomRecord::new("C", [0.0; 3]));
        assert_eq!(atoms[1].position, [0.0, 0.0, 3.0]);
    }

    #[test]
    fn count_mismatch_cites_line() {
        let err = parse_xyz("3\ntest\nC 0 0 0\nO 0 0 3.0\n").unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 5, .. }), "{err:?}");
    }

    #[test]
    fn readout_column() {
        let atoms = parse_xyz("1\nt\nCA 1 2 3 1").unwrap();
        assert!(atoms[0].readout);
        assert_eq!(atoms[0].position, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_xyz("0\nempty\n"), Err(GraphError::Parse { line: 1, .. })));
        assert!(matches!(parse_xyz("x\n"), Err(GraphError::Parse { line: 1, .. })));
        assert!(matches!(parse_xyz("1\nc\nC 0 zero 0"), Err(GraphError::Parse { line: 3, .. })));
        assert!(matches!(parse_xyz("1\nc\nC 0 0 0\nC 1 1 1"), Err(GraphError::Parse { line: 4, .. })));
        assert!(matches!(parse_xyz("1\nc\nC 0 0 0 7"), Err(GraphError::Parse { line: 3, .. })));
    }

    #[test]
    fn hydrogen_stripping() {
        let atoms: Vec<AtomRecord> = ["C", "H", "O", "h"].iter().map(|e| AtomRecord::new(e, [0.0; 3])).collect();
        let kept: Vec<String> = strip_hydrogens(&atoms).into_iter().map(|a| a.element).collect();
        assert_eq!(kept, vec!["C", "O"]);
        assert!(strip_hydrogens(&atoms[1..2]).is_empty());
        assert_eq!(strip_hydrogens(&[atoms[0].clone(), atoms[2].clone()]).len(), 2);
    }

    #[test]
    fn cutoff_is_strict() {
        let far = [[0.0; 3], [5.0, 0.0, 0.0]];
        assert!(build_radius_graph(&far, 4.5).unwrap().is_empty());
        let near = [[0.0; 3], [3.0, 0.0, 0.0]];
        assert_eq!(build_radius_graph(&near, 4.5).unwrap(), vec![(0, 1), (1, 0)]);
        let tie = [[0.0; 3], [4.5, 0.0, 0.0]];
        assert!(build_radius_graph(&tie, 4.5).unwrap().is_empty());
        assert_eq!(build_radius_graph(&[], 4.5), Err(GraphError::Empty));
    }

    #[test]
    fn radius_graph_matches_pair_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<[f64; 3]> = (0..20).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..10.0))).collect();
        let mut want = Vec::new();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d: f64 = (0..3).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum::<f64>().sqrt();
                if i != j && d < 4.5 {
                    want.push((i, j));
                }
            }
        }
        assert_eq!(build_radius_graph(&pts, 4.5).unwrap(), want);
    }

    #[test]
    fn rbf_peaks() {
        let basis = RbfBasis::default();
        let at3 = rbf_encode(basis.center(3), &basis);
        assert_eq!(at3[3], 1.0);
        assert!(at3.iter().enumerate().all(|(k, &v)| k == 3 || v < 1.0));
        assert_eq!(rbf_encode(0.0, &basis)[0], 1.0);
    }

    #[test]
    fn rbf_at_midpoint_matches_formula() {
        let got = rbf_encode(2.25, &RbfBasis::default());
        let gamma = 4.5 / 16.0;
        for (k, g) in got.iter().enumerate() {
            let mu = 4.5 * k as f64 / 15.0;
            let want = (-(2.25 - mu) * (2.25 - mu) / (2.0 * gamma * gamma)).exp();
            assert!((g - want).abs() < 1e-15, "k={k}");
        }
    }

    #[test]
    fn one_hot_lookup_and_other_bucket() {
        let vocab = ElementVocab::new(&["C", "N", "O", "S"]).unwrap();
        let g = featurize(&[AtomRecord::new("C", [0.0; 3]), AtomRecord::new("O", [0.0, 0.0, 1.5])], &vocab, 4.5).unwrap();
        assert_eq!(g.node_scalars[0], vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.node_scalars[1], vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(vocab.one_hot("Zz"), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(ElementVocab::new(&["C", "c"]), Err(GraphError::DuplicateElement(_))));
    }

    #[test]
    fn axis_aligned_edge() {
        let g = featurize(&[AtomRecord::new("C", [0.0; 3]), AtomRecord::new("O", [0.0, 0.0, 3.0])], &ElementVocab::default(), 4.5).unwrap();
        assert_eq!(g.num_edges(), 2);
        let e = &g.edges[0];
        assert_eq!((e.src, e.dst), (0, 1));
        assert_eq!(e.unit, [0.0, 0.0, 1.0]);
        assert_eq!(e.rbf, rbf_encode(3.0, &RbfBasis::default()));
        assert_eq!(g.edges[1].unit, [0.0, 0.0, -1.0]);
    }

    #[test]
    fn coincident_atoms_rejected() {
        let atoms = [AtomRecord::new("C", [1.0; 3]), AtomRecord::new("N", [0.0; 3]), AtomRecord::new("O", [1.0, 1.0, 1.0 + 1e-7])];
        assert_eq!(featurize(&atoms, &ElementVocab::default(), 4.5), Err(GraphError::Coincident(0, 2)));
    }

    #[test]
    fn rotation_covariance_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let atoms: Vec<AtomRecord> =
            (0..15).map(|i| AtomRecord::new(["C", "N", "O"][i % 3], [0, 1, 2].map(|_| rng.random_range(0.0..6.0)))).collect();
        let g = featurize(&atoms, &ElementVocab::default(), 4.5).unwrap();
        for e in &g.edges {
            let n: f64 = e.unit.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            let back = g.edges.iter().find(|f| f.src == e.dst && f.dst == e.src).unwrap();
            assert_eq!(back.unit, e.unit.map(|x| -x));
        }
        let r = random_orthogonal(3, true);
        let gr = g.transformed(&r, [0.0; 3]).unwrap();
        assert_eq!(gr.node_scalars, g.node_scalars);
        assert_eq!(gr.edges.len(), g.edges.len());
        for (a, b) in g.edges.iter().zip(&gr.edges) {
            assert_eq!((a.src, a.dst), (b.src, b.dst));
            let ru = r.apply(&a.unit);
            for k in 0..3 {
                assert!((ru[k] - b.unit[k]).abs() < 1e-12);
            }
            for (x, y) in a.rbf.iter().zip(&b.rbf) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
