#![allow(dead_code)]

pub mod oracle;

use gvp_core::graph::{featurize, AtomRecord, ElementVocab, MolGraph, DEFAULT_CUTOFF};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Elements drawn for synthetic molecules. `Zn` is outside the default
/// vocabulary and lands in the "other" bucket.
pub const ELEMENTS: [&str; 7] = ["C", "N", "O", "S", "F", "Cl", "Zn"];

/// `n` atoms uniform in a cube sized for roughly five neighbours per atom
/// at the default cutoff, no two closer than 0.9 Å.
pub fn random_atoms(rng: &mut ChaCha8Rng, n: usize) -> Vec<AtomRecord> {
    let side = (76.0 * n as f64).cbrt();
    let mut atoms: Vec<AtomRecord> = Vec::with_capacity(n);
    while atoms.len() < n {
        let p: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.0..side));
        let clear = atoms.iter().all(|a| {
            let d: f64 = (0..3).map(|k| (a.position[k] - p[k]).powi(2)).sum();
            d > 0.81
        });
        if clear {
            let e = ELEMENTS[rng.random_range(0..ELEMENTS.len())];
            atoms.push(AtomRecord::new(e, p));
        }
    }
    atoms
}

pub fn random_graph(seed: u64, n: usize) -> MolGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms = random_atoms(&mut rng, n);
    featurize(&atoms, &ElementVocab::default(), DEFAULT_CUTOFF).expect("atoms are separated")
}

/// Like [`random_graph`] with every atom whose index is even tagged for
/// readout.
pub fn random_tagged_graph(seed: u64, n: usize) -> MolGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms: Vec<AtomRecord> =
        random_atoms(&mut rng, n).into_iter().enumerate().map(|(i, a)| if i % 2 == 0 { a.tagged() } else { a }).collect();
    featurize(&atoms, &ElementVocab::default(), DEFAULT_CUTOFF).expect("atoms are separated")
}

/// Largest `|a - b| / max(1, |b|)`.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}
