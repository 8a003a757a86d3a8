//! Molecular graphs: parsing, complete-graph featurization, dataset filters,
//! and train/validation/test splits.
//!
//! A molecule is treated as a complete graph over its atoms. Bonded pairs
//! carry a bond-order feature, non-bonded pairs an explicit "none" class, so
//! every graph with `M` atoms has exactly `M(M-1)/2` edge feature vectors.

pub mod dataset;
mod elements;
pub mod sdf;
pub mod xyz;

pub use dataset::{split_indices, Dataset, DatasetEntry, SplitKind, Splits};
pub use elements::atomic_mass;
pub use sdf::{parse_sdf, write_molblock, RecordReject, SdfParse, SdfRecord};

use crate::autodiff::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt;

pub const HYDROGEN: &str = "H";

/// Bond-order one-hot width: single, double, triple, aromatic, none.
pub const EDGE_FEATURE_DIM: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    Empty,
    BondIndexOutOfRange { index: usize, atom_count: usize },
    SelfBond(usize),
    DuplicateBond(usize, usize),
    NonFiniteCoordinate,
    LengthMismatch { atoms: usize, coords: usize },
    ElementOutsideVocab(String),
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::Empty => write!(f, "molecule has no atoms"),
            GraphError::BondIndexOutOfRange { index, atom_count } => {
                write!(f, "bond references atom {} of {}", index, atom_count)
            }
            GraphError::SelfBond(i) => write!(f, "bond from atom {} to itself", i),
            GraphError::DuplicateBond(i, j) => write!(f, "duplicate bond between {} and {}", i, j),
            GraphError::NonFiniteCoordinate => write!(f, "non-finite coordinate"),
            GraphError::LengthMismatch { atoms, coords } => {
                write!(f, "{} atoms but {} coordinates", atoms, coords)
            }
            GraphError::ElementOutsideVocab(e) => {
                write!(f, "element `{}` not in vocabulary", e)
            }
        }
    }
}

impl std::error::Error for GraphError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub element: String,
    pub formal_charge: i32,
}

impl Atom {
    pub fn new(element: impl Into<String>) -> Self {
        Atom { element: element.into(), formal_charge: 0 }
    }

    pub fn is_heavy(&self) -> bool {
        self.element != HYDROGEN
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Slot in the edge one-hot; slot 4 is reserved for "no bond".
    pub fn one_hot_index(self) -> usize {
        match self {
            BondOrder::Single => 0,
            BondOrder::Double => 1,
            BondOrder::Triple => 2,
            BondOrder::Aromatic => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: BondOrder,
}

/// Atoms plus bond topology. Construction validates bond indices; the
/// connectivity requirement is enforced at ingestion, not here, so filters
/// can still inspect disconnected molecules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MolecularGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
}

impl MolecularGraph {
    pub fn new(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self, GraphError> {
        if atoms.is_empty() {
            return Err(GraphError::Empty);
        }
        let m = atoms.len();
        let mut seen = BTreeSet::new();
        for b in &bonds {
            if b.i >= m {
                return Err(GraphError::BondIndexOutOfRange { index: b.i, atom_count: m });
            }
            if b.j >= m {
                return Err(GraphError::BondIndexOutOfRange { index: b.j, atom_count: m });
            }
            if b.i == b.j {
                return Err(GraphError::SelfBond(b.i));
            }
            let key = (b.i.min(b.j), b.i.max(b.j));
            if !seen.insert(key) {
                return Err(GraphError::DuplicateBond(key.0, key.1));
            }
        }
        Ok(MolecularGraph { atoms, bonds })
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn heavy_count(&self) -> usize {
        self.atoms.iter().filter(|a| a.is_heavy()).count()
    }

    pub fn heavy_mask(&self) -> Vec<bool> {
        self.atoms.iter().map(|a| a.is_heavy()).collect()
    }

    /// Number of unordered atom pairs, M(M-1)/2.
    pub fn pair_count(&self) -> usize {
        let m = self.atoms.len();
        m * (m - 1) / 2
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.i].push(b.j);
            adj[b.j].push(b.i);
        }
        adj
    }

    /// Whether the bond graph connects all atoms.
    pub fn is_connected(&self) -> bool {
        let m = self.atoms.len();
        if m == 1 {
            return true;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; m];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == m
    }

    /// Per-atom count of bonded heavy neighbors.
    pub fn heavy_neighbor_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.atoms.len()];
        for b in &self.bonds {
            if self.atoms[b.j].is_heavy() {
                counts[b.i] += 1;
            }
            if self.atoms[b.i].is_heavy() {
                counts[b.j] += 1;
            }
        }
        counts
    }

    /// Marks each bond that lies on at least one cycle (i.e. is not a
    /// bridge of the bond graph). Indices parallel `bonds()`.
    pub fn cycle_bond_mask(&self) -> Vec<bool> {
        let m = self.atoms.len();
        // adjacency with bond indices so the DFS can skip the tree edge it
        // came in on without skipping parallel paths
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m];
        for (bi, b) in self.bonds.iter().enumerate() {
            adj[b.i].push((b.j, bi));
            adj[b.j].push((b.i, bi));
        }
        let mut disc = vec![usize::MAX; m];
        let mut low = vec![0usize; m];
        let mut is_bridge = vec![false; self.bonds.len()];
        let mut timer = 0usize;

        // iterative DFS: (vertex, parent bond, neighbor cursor)
        for root in 0..m {
            if disc[root] != usize::MAX {
                continue;
            }
            let mut stack: Vec<(usize, usize, usize)> = vec![(root, usize::MAX, 0)];
            disc[root] = timer;
            low[root] = timer;
            timer += 1;
            while let Some(top) = stack.last_mut() {
                let (v, pbond) = (top.0, top.1);
                if top.2 < adj[v].len() {
                    let (w, bi) = adj[v][top.2];
                    top.2 += 1;
                    if bi == pbond {
                        continue;
                    }
                    if disc[w] == usize::MAX {
                        disc[w] = timer;
                        low[w] = timer;
                        timer += 1;
                        stack.push((w, bi, 0));
                    } else {
                        low[v] = low[v].min(disc[w]);
                    }
                } else {
                    stack.pop();
                    if let Some(parent) = stack.last() {
                        let pv = parent.0;
                        low[pv] = low[pv].min(low[v]);
                        if low[v] > disc[pv] {
                            is_bridge[pbond] = true;
                        }
                    }
                }
            }
        }
        is_bridge.iter().map(|&b| !b).collect()
    }
}

/// Index of unordered pair `(i, j)`, `i < j`, in lexicographic pair order.
pub fn pair_index(m: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < m);
    i * m - i * (i + 1) / 2 + (j - i - 1)
}

/// All unordered pairs of `0..m` in lexicographic order.
pub fn pair_list(m: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(m * (m.max(1) - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Ordered 3-D coordinates in angstroms, index-aligned with a graph's atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conformation {
    coords: Vec<[f64; 3]>,
}

impl Conformation {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self, GraphError> {
        if coords.iter().flatten().any(|x| !x.is_finite()) {
            return Err(GraphError::NonFiniteCoordinate);
        }
        Ok(Conformation { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn get(&self, i: usize) -> [f64; 3] {
        self.coords[i]
    }
}

/// Symmetric M x M matrix of pairwise Euclidean distances.
pub fn distance_matrix(conformation: &Conformation) -> Tensor {
    let m = conformation.len();
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            let a = conformation.coords[i];
            let b = conformation.coords[j];
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            data[i * m + j] = d;
            data[j * m + i] = d;
        }
    }
    Tensor::matrix(m, m, data).expect("square matrix")
}

/// Element vocabulary derived from an ingested corpus; ordering is the
/// sorted symbol order and is part of the dataset contract.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub elements: Vec<String>,
}

impl Vocabulary {
    pub fn from_graphs<'a>(graphs: impl IntoIterator<Item = &'a MolecularGraph>) -> Self {
        let set: BTreeSet<String> = graphs
            .into_iter()
            .flat_map(|g| g.atoms().iter().map(|a| a.element.clone()))
            .collect();
        Vocabulary { elements: set.into_iter().collect() }
    }

    pub fn element_index(&self, symbol: &str) -> Option<usize> {
        self.elements.iter().position(|e| e == symbol)
    }

    pub fn node_feature_dim(&self) -> usize {
        self.elements.len() + 2
    }

    pub fn edge_feature_dim(&self) -> usize {
        EDGE_FEATURE_DIM
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("vocab serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

/// Node and complete-graph edge features for one molecule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphFeatures {
    /// `[M, d_v]`: element one-hot, formal charge, heavy-neighbor count.
    pub node: Tensor,
    /// `[M(M-1)/2, 5]`: bond-order one-hot with an explicit "none" class.
    pub edge: Tensor,
}

/// Deterministic featurization given the vocabulary ordering.
pub fn featurize(graph: &MolecularGraph, vocab: &Vocabulary) -> Result<GraphFeatures, GraphError> {
    let m = graph.atom_count();
    let d_v = vocab.node_feature_dim();
    let heavy_neighbors = graph.heavy_neighbor_counts();

    let mut node = vec![0.0; m * d_v];
    for (i, atom) in graph.atoms().iter().enumerate() {
        let e = vocab
            .element_index(&atom.element)
            .ok_or_else(|| GraphError::ElementOutsideVocab(atom.element.clone()))?;
        node[i * d_v + e] = 1.0;
        node[i * d_v + vocab.elements.len()] = atom.formal_charge as f64;
        node[i * d_v + vocab.elements.len() + 1] = heavy_neighbors[i] as f64;
    }

    let p = graph.pair_count();
    let mut edge = vec![0.0; p * EDGE_FEATURE_DIM];
    // default every pair to "none", then overwrite bonded pairs
    for row in 0..p {
        edge[row * EDGE_FEATURE_DIM + 4] = 1.0;
    }
    for b in graph.bonds() {
        let (lo, hi) = (b.i.min(b.j), b.i.max(b.j));
        let row = pair_index(m, lo, hi);
        edge[row * EDGE_FEATURE_DIM + 4] = 0.0;
        edge[row * EDGE_FEATURE_DIM + b.order.one_hot_index()] = 1.0;
    }

    Ok(GraphFeatures {
        node: Tensor::matrix(m, d_v, node).expect("node feature shape"),
        edge: Tensor::matrix(p, EDGE_FEATURE_DIM, edge).expect("edge feature shape"),
    })
}

/// Why a record was rejected during ingestion or filtering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RejectReason {
    Malformed(String),
    UnsupportedBondType(u32),
    Disconnected,
    HeavyAtomCap { count: usize, cap: usize },
    ElementNotAllowed(String),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Malformed(msg) => write!(f, "malformed record: {}", msg),
            RejectReason::UnsupportedBondType(t) => write!(f, "unsupported bond type {}", t),
            RejectReason::Disconnected => write!(f, "disconnected bond graph"),
            RejectReason::HeavyAtomCap { count, cap } => {
                write!(f, "{} heavy atoms exceeds cap {}", count, cap)
            }
            RejectReason::ElementNotAllowed(e) => write!(f, "element `{}` not allowed", e),
        }
    }
}

/// Dataset admission rules: heavy-atom cap, optional element whitelist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterProfile {
    pub max_heavy: usize,
    /// `None` admits every element.
    pub allowed_elements: Option<BTreeSet<String>>,
}

impl FilterProfile {
    /// QM9-style: up to 9 heavy atoms of C, N, O, F (plus hydrogens).
    pub fn qm9() -> Self {
        FilterProfile {
            max_heavy: 9,
            allowed_elements: Some(
                ["H", "C", "N", "O", "F"].iter().map(|s| s.to_string()).collect(),
            ),
        }
    }

    /// COD-style: up to 50 heavy atoms from the organic element set.
    pub fn cod() -> Self {
        FilterProfile {
            max_heavy: 50,
            allowed_elements: Some(
                ["H", "B", "C", "N", "O", "F", "Si", "P", "S", "Cl", "Ge", "As", "Se", "Br",
                 "Te", "I"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            ),
        }
    }

    /// CSD-style: up to 50 heavy atoms, any element.
    pub fn csd() -> Self {
        FilterProfile { max_heavy: 50, allowed_elements: None }
    }

    /// No restrictions.
    pub fn open() -> Self {
        FilterProfile { max_heavy: usize::MAX, allowed_elements: None }
    }
}

/// Accept/reject decision for one molecule. Total: never errors.
pub fn filter_molecule(graph: &MolecularGraph, profile: &FilterProfile) -> Result<(), RejectReason> {
    let heavy = graph.heavy_count();
    if heavy > profile.max_heavy {
        return Err(RejectReason::HeavyAtomCap { count: heavy, cap: profile.max_heavy });
    }
    if let Some(allowed) = &profile.allowed_elements {
        for atom in graph.atoms() {
            if !allowed.contains(&atom.element) {
                return Err(RejectReason::ElementNotAllowed(atom.element.clone()));
            }
        }
    }
    if !graph.is_connected() {
        return Err(RejectReason::Disconnected);
    }
    Ok(())
}
