//! Randomized symmetry audit of a model on one graph.
//!
//! Every trial draws a rotation (det +1) with a translation, an improper
//! orthogonal map (det −1) with a translation, a pure translation and an atom
//! relabeling. Outputs and pooled embeddings must be invariant, node scalars
//! invariant and node vector states covariant at every layer.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{GraphError, MolGraph};
use crate::model::{forward_states, ForwardStates, GvpGnnModel, ModelError};
use crate::svt::{random_orthogonal, Orthogonal3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AuditError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformClass {
    Rotation,
    Reflection,
    Translation,
    Permutation,
}

impl TransformClass {
    pub const ALL: [TransformClass; 4] =
        [TransformClass::Rotation, TransformClass::Reflection, TransformClass::Translation, TransformClass::Permutation];

    pub fn name(self) -> &'static str {
        match self {
            TransformClass::Rotation => "rotation",
            TransformClass::Reflection => "reflection",
            TransformClass::Translation => "translation",
            TransformClass::Permutation => "permutation",
        }
    }
}

/// Largest deviation seen for one transform class and the trial seed that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDeviation {
    pub class: TransformClass,
    pub max_rel: f64,
    pub worst_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub trials: usize,
    pub classes: [ClassDeviation; 4],
}

impl AuditReport {
    pub fn worst(&self) -> ClassDeviation {
        *self.classes.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel)).expect("four classes")
    }

    pub fn class(&self, c: TransformClass) -> ClassDeviation {
        self.classes[c as usize]
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.classes.iter().all(|c| c.max_rel <= tol)
    }
}

/// One sampled transform. `perm[k]` is the original index of new atom `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub rotation: Orthogonal3,
    pub translation: [f64; 3],
    pub perm: Vec<usize>,
}

impl Transform {
    /// Draws the transform of class `class` for trial seed `seed`.
    pub fn sample(class: TransformClass, seed: u64, atoms: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut translation = [0.0; 3];
        for t in &mut translation {
            *t = rng.random_range(-10.0..10.0);
        }
        let mut perm: Vec<usize> = (0..atoms).collect();
        let mut rotation = Orthogonal3::identity();
        match class {
            TransformClass::Rotation => rotation = random_orthogonal(rng.random(), false),
            TransformClass::Reflection => {
                let m = *random_orthogonal(rng.random(), false).matrix();
                rotation = Orthogonal3::new(m.map(|row| row.map(|x| -x))).expect("negated rotation is orthogonal");
            }
            TransformClass::Translation => {}
            TransformClass::Permutation => {
                translation = [0.0; 3];
                perm.shuffle(&mut rng);
            }
        }
        Self { rotation, translation, perm }
    }

    pub fn apply(&self, graph: &MolGraph) -> Result<MolGraph, GraphError> {
        graph.transformed(&self.rotation, self.translation)?.permuted(&self.perm)
    }
}

fn rel_dev(got: impl Iterator<Item = f64>, want: impl Iterator<Item = f64>) -> f64 {
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (g, w) in got.zip(want) {
        diff = diff.max((g - w).abs());
        scale = scale.max(w.abs());
    }
    if diff.is_nan() {
        return f64::INFINITY;
    }
    diff / scale.max(1e-12)
}

/// Maximum relative deviation between the transformed run `b` and the
/// expected image of the reference run `a`. Each quantity (output, pooled
/// embedding, and per layer the node scalars and node vectors) is
/// normalized by its own largest reference magnitude.
pub fn states_deviation(a: &ForwardStates, b: &ForwardStates, t: &Transform) -> f64 {
    let mut worst = rel_dev(b.output.iter().copied(), a.output.iter().copied());
    worst = worst.max(rel_dev(b.pooled.iter().copied(), a.pooled.iter().copied()));
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        let s_want = t.perm.iter().flat_map(|&k| la[k].s.0.iter().copied());
        let s_got = lb.iter().flat_map(|x| x.s.0.iter().copied());
        worst = worst.max(rel_dev(s_got, s_want));
        let v_want: Vec<f64> = t.perm.iter().flat_map(|&k| la[k].rotated(&t.rotation).v.0.into_iter().flatten()).collect();
        let v_got = lb.iter().flat_map(|x| x.v.0.iter().flatten().copied());
        worst = worst.max(rel_dev(v_got, v_want.into_iter()));
    }
    worst
}

/// Runs `trials` trials per class. Trial `i` uses transform seed
/// `seed + i` (wrapping).
pub fn audit_equivariance(model: &GvpGnnModel, graph: &MolGraph, trials: usize, seed: u64) -> Result<AuditReport, AuditError> {
    let reference = forward_states(model, graph)?;
    let mut classes = TransformClass::ALL.map(|class| ClassDeviation { class, max_rel: 0.0, worst_seed: seed });
    for i in 0..trials {
        let trial_seed = seed.wrapping_add(i as u64);
        for c in &mut classes {
            let t = Transform::sample(c.class, trial_seed, graph.num_nodes());
            let moved = forward_states(model, &t.apply(graph)?)?;
            let dev = states_deviation(&reference, &moved, &t);
            if dev > c.max_rel || (dev.is_nan() && !c.max_rel.is_nan()) {
                c.max_rel = dev;
                c.worst_seed = trial_seed;
            }
        }
    }
    Ok(AuditReport { trials, classes })
}
