//! Straight-line reference evaluation of the GVP-GNN. Shares nothing with the
//! library beyond the parameter tensors and raw atom records: no tape, no
//! library featurization, no library GVP.

use gvp_core::graph::MolGraph;
use gvp_core::gvp::{GvpWeights, Variant};
use gvp_core::model::{GvpGnnModel, TaskMode};
use gvp_core::Tensor;

const ROW_EPS: f64 = 1e-8;
const LN_EPS: f64 = 1e-8;
const RBF: usize = 16;

pub type V3 = [f64; 3];

#[derive(Debug, Clone)]
pub struct Node {
    pub s: Vec<f64>,
    pub v: Vec<V3>,
}

#[derive(Debug, Clone)]
pub struct OracleRun {
    /// After the embedding and after each layer.
    pub layers: Vec<Vec<Node>>,
    pub pooled: Vec<f64>,
    pub output: Vec<f64>,
}

struct OEdge {
    src: usize,
    dst: usize,
    rbf: Vec<f64>,
    unit: V3,
}

fn mv(w: &Tensor, x: &[f64]) -> Vec<f64> {
    assert_eq!(w.cols(), x.len());
    (0..w.rows()).map(|i| (0..w.cols()).map(|j| w.get(i, j) * x[j]).sum()).collect()
}

fn mix(w: &Tensor, v: &[V3]) -> Vec<V3> {
    assert_eq!(w.cols(), v.len());
    (0..w.rows())
        .map(|i| {
            let mut o = [0.0; 3];
            for (j, vj) in v.iter().enumerate() {
                for k in 0..3 {
                    o[k] += w.get(i, j) * vj[k];
                }
            }
            o
        })
        .collect()
}

fn col(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|i| t.get(i, 0)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn norm(v: &V3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + ROW_EPS * ROW_EPS).sqrt()
}

fn gvp(w: &GvpWeights<Tensor>, variant: Variant, s: &[f64], v: &[V3]) -> Node {
    let vh = mix(&w.w_h, v);
    let vmu = mix(&w.w_mu, &vh);
    let mut shn: Vec<f64> = vh.iter().map(norm).collect();
    shn.extend_from_slice(s);
    let b = col(&w.b_m);
    let sm: Vec<f64> = mv(&w.w_m, &shn).iter().zip(&b).map(|(x, b)| x + b).collect();
    let gate: Vec<f64> = match variant {
        Variant::Gated => {
            let bg = col(w.b_g.as_ref().unwrap());
            mv(w.w_g.as_ref().unwrap(), &sm).iter().zip(&bg).map(|(x, b)| sigmoid(x + b)).collect()
        }
        Variant::Original => vmu.iter().map(|r| sigmoid(norm(r))).collect(),
    };
    Node { s: sm.iter().map(|&x| relu(x)).collect(), v: vmu.iter().zip(&gate).map(|(r, g)| r.map(|x| g * x)).collect() }
}

fn layer_norm(x: &Node, gamma: &Tensor, beta: &Tensor, vscale: &Tensor) -> Node {
    let n = x.s.len() as f64;
    let mean = x.s.iter().sum::<f64>() / n;
    let var = x.s.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let sd = var.sqrt() + LN_EPS;
    let s = x.s.iter().enumerate().map(|(i, a)| gamma.get(i, 0) * ((a - mean) / sd) + beta.get(i, 0)).collect();
    let q = x.v.iter().map(|r| r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sum::<f64>() / x.v.len() as f64;
    let r = (q + LN_EPS).sqrt();
    let c = vscale.get(0, 0);
    Node { s, v: x.v.iter().map(|row| row.map(|a| c * (a / r))).collect() }
}

fn add(a: &Node, b: &Node) -> Node {
    Node {
        s: a.s.iter().zip(&b.s).map(|(x, y)| x + y).collect(),
        v: a.v.iter().zip(&b.v).map(|(x, y)| [x[0] + y[0], x[1] + y[1], x[2] + y[2]]).collect(),
    }
}

fn mean_of(nodes: &[&Node]) -> Node {
    let k = nodes.len() as f64;
    let mut acc = Node { s: vec![0.0; nodes[0].s.len()], v: vec![[0.0; 3]; nodes[0].v.len()] };
    for n in nodes {
        acc = add(&acc, n);
    }
    Node { s: acc.s.iter().map(|x| x / k).collect(), v: acc.v.iter().map(|r| r.map(|x| x / k)).collect() }
}

/// Edges recomputed from raw coordinates by brute force.
fn edges(graph: &MolGraph) -> Vec<OEdge> {
    let pos: Vec<V3> = graph.atoms.iter().map(|a| a.position).collect();
    let c = graph.cutoff;
    let width = c / RBF as f64;
    let mut out = Vec::new();
    for i in 0..pos.len() {
        for j in 0..pos.len() {
            if i == j {
                continue;
            }
            let d = [pos[j][0] - pos[i][0], pos[j][1] - pos[i][1], pos[j][2] - pos[i][2]];
            let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if dist < c {
                let rbf = (0..RBF)
                    .map(|k| {
                        let mu = k as f64 * c / (RBF - 1) as f64;
                        (-(dist - mu).powi(2) / (2.0 * width * width)).exp()
                    })
                    .collect();
                out.push(OEdge { src: i, dst: j, rbf, unit: d.map(|x| x / dist) });
            }
        }
    }
    out
}

fn one_hot(graph: &MolGraph, element: &str) -> Vec<f64> {
    let syms = graph.vocab.symbols();
    let idx = syms.iter().position(|s| s.eq_ignore_ascii_case(element)).unwrap_or(syms.len());
    let mut v = vec![0.0; syms.len() + 1];
    v[idx] = 1.0;
    v
}

/// Node states and pooled embedding of one graph, eval mode.
pub fn encode(model: &GvpGnnModel, graph: &MolGraph, readout: bool) -> (Vec<Vec<Node>>, Vec<f64>) {
    let cfg = model.config();
    let w = &model.weights;
    let nv = cfg.node_dims.1;
    let mut h: Vec<Node> =
        graph.atoms.iter().map(|a| Node { s: mv(&w.embed, &one_hot(graph, &a.element)), v: vec![[0.0; 3]; nv] }).collect();
    let es = edges(graph);
    let mut layers = vec![h.clone()];
    for lw in &w.layers {
        let msgs: Vec<Node> = es
            .iter()
            .map(|e| {
                let src = &h[e.src];
                let mut s = src.s.clone();
                s.extend_from_slice(&e.rbf);
                let mut v = src.v.clone();
                v.push(e.unit);
                let mut m = Node { s, v };
                for g in &lw.msg {
                    m = gvp(g, cfg.variant, &m.s, &m.v);
                }
                m
            })
            .collect();
        let mut next = Vec::with_capacity(h.len());
        for (i, hi) in h.iter().enumerate() {
            let inc: Vec<&Node> = es.iter().zip(&msgs).filter(|(e, _)| e.dst == i).map(|(_, m)| m).collect();
            let x = if inc.is_empty() { hi.clone() } else { add(hi, &mean_of(&inc)) };
            let [n0, n1] = &lw.norm;
            let x = layer_norm(&x, &n0.gamma, &n0.beta, &n0.vscale);
            let mut f = x.clone();
            for g in &lw.ff {
                f = gvp(g, cfg.variant, &f.s, &f.v);
            }
            next.push(layer_norm(&add(&x, &f), &n1.gamma, &n1.beta, &n1.vscale));
        }
        h = next;
        layers.push(h.clone());
    }
    let scalars: Vec<Node> = h.iter().map(|x| gvp(&w.readout, cfg.variant, &x.s, &x.v)).collect();
    let picks: Vec<&Node> = if readout {
        graph.atoms.iter().zip(&scalars).filter(|(a, _)| a.readout).map(|(_, s)| s).collect()
    } else {
        scalars.iter().collect()
    };
    (layers, mean_of(&picks).s)
}

pub fn head(model: &GvpGnnModel, x: &[f64]) -> Vec<f64> {
    let [d0, d1] = &model.weights.head;
    let h: Vec<f64> = mv(&d0.weight, x).iter().zip(col(&d0.bias)).map(|(a, b)| relu(a + b)).collect();
    mv(&d1.weight, &h).iter().zip(col(&d1.bias)).map(|(a, b)| a + b).collect()
}

/// Single-graph run (pool or tagged-node readout).
pub fn run(model: &GvpGnnModel, graph: &MolGraph) -> OracleRun {
    let readout = model.config().task_mode == TaskMode::NodeReadout;
    let (layers, pooled) = encode(model, graph, readout);
    let output = head(model, &pooled);
    OracleRun { layers, pooled, output }
}

pub fn run_pair(model: &GvpGnnModel, a: &MolGraph, b: &MolGraph) -> Vec<f64> {
    let (_, pa) = encode(model, a, false);
    let (_, pb) = encode(model, b, false);
    let x: Vec<f64> = pa.into_iter().chain(pb).collect();
    head(model, &x)
}
