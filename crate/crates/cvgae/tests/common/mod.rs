//! Shared fixtures for the integration suites: synthetic molecule
//! generation and small run configurations.
#![allow(dead_code)] // each test target uses a different subset

use cvgae::molgraph::{write_molblock, Atom, Bond, BondOrder, Conformation, MolecularGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Random tree-shaped molecule: heavy atoms from {C, N, O, F} with a few
/// hydrogens attached, coordinates grown bond by bond at roughly covalent
/// lengths. Geometry is crude but finite, connected, and distinct per seed.
pub fn synthetic_molecule(rng: &mut ChaCha8Rng) -> (MolecularGraph, Conformation) {
    let heavy_elements = ["C", "N", "O", "F"];
    let n_heavy = rng.random_range(2..=6usize);
    let mut atoms: Vec<Atom> = Vec::new();
    let mut bonds: Vec<Bond> = Vec::new();
    let mut coords: Vec<[f64; 3]> = Vec::new();

    let random_dir = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        loop {
            let v = [
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 0.1 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        }
    };

    for i in 0..n_heavy {
        atoms.push(Atom::new(heavy_elements[rng.random_range(0..heavy_elements.len())]));
        if i == 0 {
            coords.push([0.0, 0.0, 0.0]);
        } else {
            let parent = rng.random_range(0..i);
            bonds.push(Bond { i: parent, j: i, order: BondOrder::Single });
            let d = random_dir(rng);
            let len = rng.random_range(1.3..1.6);
            let p = coords[parent];
            coords.push([p[0] + len * d[0], p[1] + len * d[1], p[2] + len * d[2]]);
        }
    }
    let n_hydrogens = rng.random_range(0..=n_heavy.min(4));
    for _ in 0..n_hydrogens {
        let parent = rng.random_range(0..n_heavy);
        let idx = atoms.len();
        atoms.push(Atom::new("H"));
        bonds.push(Bond { i: parent, j: idx, order: BondOrder::Single });
        let d = random_dir(rng);
        let p = coords[parent];
        coords.push([p[0] + 1.05 * d[0], p[1] + 1.05 * d[1], p[2] + 1.05 * d[2]]);
    }

    (
        MolecularGraph::new(atoms, bonds).expect("generated topology is valid"),
        Conformation::new(coords).expect("generated coordinates are finite"),
    )
}

/// A `$$$$`-concatenated V2000 file of `n` synthetic molecules.
pub fn synthetic_sdf(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for k in 0..n {
        let (graph, conf) = synthetic_molecule(&mut rng);
        out.push_str(&write_molblock(&format!("synthetic {}", k), &graph, &conf));
    }
    out
}

/// Write a strict run-config JSON with the given architecture and optimizer
/// overrides on top of the published defaults.
pub fn write_run_config(
    path: &Path,
    rounds: usize,
    hidden_dim: usize,
    head_dim: usize,
    max_steps: u64,
    seed: u64,
) {
    let json = serde_json::json!({
        "model": {"rounds": rounds, "hidden_dim": hidden_dim, "head_dim": head_dim},
        "train": {"max_steps": max_steps, "seed": seed},
        "samples": 20,
    });
    std::fs::write(path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
}

/// Path to the in-repo overfit fixture.
pub fn overfit_fixture() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/overfit10.sdf")
}
