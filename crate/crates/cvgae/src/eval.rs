//! Evaluation protocol: per-molecule RMSD statistics over generated samples,
//! aggregate medians restricted to commonly successful molecules, pairwise
//! diversity, heavy-atom grouping, dataset statistics, and a trivial
//! random-coordinate baseline.
//!
//! All RMSDs here are heavy-atom, post-alignment values. Standard deviations
//! use the population convention (divide by n). Medians of even-length lists
//! average the two middle values.

use crate::align::{kabsch_align, AlignError};
use crate::molgraph::{atomic_mass, BondOrder, Conformation, Dataset, DatasetEntry};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

#[derive(Debug)]
pub enum EvalError {
    MissingReference(String),
    NoMolecules,
    Align(AlignError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::MissingReference(id) => {
                write!(f, "no dataset reference for molecule `{}`", id)
            }
            EvalError::NoMolecules => write!(f, "no molecules to evaluate"),
            EvalError::Align(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<AlignError> for EvalError {
    fn from(e: AlignError) -> Self {
        EvalError::Align(e)
    }
}

/// Generated conformations for one method, keyed by molecule id.
#[derive(Clone, Debug)]
pub struct MethodSamples {
    pub method: String,
    /// Number of conformations the method was asked to generate per molecule.
    pub requested: usize,
    pub by_molecule: BTreeMap<String, Vec<Conformation>>,
}

/// Heavy-atom aligned RMSD statistics for one molecule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoleculeEval {
    pub id: String,
    pub heavy_atoms: usize,
    pub rmsds: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub best: f64,
}

/// Aggregate report for one method over an evaluation set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub molecules: Vec<MoleculeEval>,
    /// Medians over the molecules for which every compared method produced
    /// at least one conformation.
    pub median_of_mean: f64,
    pub median_of_std: f64,
    pub median_of_best: f64,
    /// Fraction of evaluated molecules with at least one conformation.
    pub success_per_test_set: f64,
    /// Mean fraction of requested samples actually produced.
    pub success_per_molecule: f64,
    /// Ids counted by the medians (commonly successful molecules).
    pub common_ids: Vec<String>,
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite rmsd"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Heavy-atom aligned RMSD of one sample against the reference geometry.
pub fn heavy_aligned_rmsd(
    sample: &Conformation,
    entry: &DatasetEntry,
) -> Result<f64, EvalError> {
    let mask = entry.graph.heavy_mask();
    Ok(kabsch_align(sample, &entry.conformation, &mask)?.rmsd)
}

/// Evaluate one or more methods over the molecules named by `ids`.
/// Per-molecule rows cover every molecule a method produced samples for;
/// the aggregate medians are restricted to molecules where all compared
/// methods succeeded, mirroring the published protocol.
pub fn eval_methods(
    methods: &[MethodSamples],
    dataset: &Dataset,
    ids: &[String],
) -> Result<Vec<MethodReport>, EvalError> {
    if ids.is_empty() || methods.is_empty() {
        return Err(EvalError::NoMolecules);
    }
    for id in ids {
        if dataset.entry_by_id(id).is_none() {
            return Err(EvalError::MissingReference(id.clone()));
        }
    }

    let common_ids: Vec<String> = ids
        .iter()
        .filter(|id| {
            methods
                .iter()
                .all(|m| m.by_molecule.get(*id).is_some_and(|s| !s.is_empty()))
        })
        .cloned()
        .collect();

    let mut reports = Vec::with_capacity(methods.len());
    for method in methods {
        let mut molecules = Vec::new();
        let mut produced_fractions = Vec::with_capacity(ids.len());
        let mut with_any = 0usize;
        for id in ids {
            let entry = dataset.entry_by_id(id).expect("checked above");
            let samples = method.by_molecule.get(id).map(Vec::as_slice).unwrap_or(&[]);
            let frac = if method.requested == 0 {
                0.0
            } else {
                samples.len() as f64 / method.requested as f64
            };
            produced_fractions.push(frac);
            if samples.is_empty() {
                continue;
            }
            with_any += 1;
            let mut rmsds = Vec::with_capacity(samples.len());
            for s in samples {
                rmsds.push(heavy_aligned_rmsd(s, entry)?);
            }
            let mean = rmsds.iter().sum::<f64>() / rmsds.len() as f64;
            let std = population_std(&rmsds);
            let best = rmsds.iter().cloned().fold(f64::INFINITY, f64::min);
            molecules.push(MoleculeEval {
                id: id.clone(),
                heavy_atoms: entry.graph.heavy_count(),
                rmsds,
                mean,
                std,
                best,
            });
        }

        let common: Vec<&MoleculeEval> = molecules
            .iter()
            .filter(|m| common_ids.contains(&m.id))
            .collect();
        let (median_of_mean, median_of_std, median_of_best) = if common.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let means: Vec<f64> = common.iter().map(|m| m.mean).collect();
            let stds: Vec<f64> = common.iter().map(|m| m.std).collect();
            let bests: Vec<f64> = common.iter().map(|m| m.best).collect();
            (median(&means), median(&stds), median(&bests))
        };

        reports.push(MethodReport {
            method: method.method.clone(),
            molecules,
            median_of_mean,
            median_of_std,
            median_of_best,
            success_per_test_set: with_any as f64 / ids.len() as f64,
            success_per_molecule: produced_fractions.iter().sum::<f64>()
                / produced_fractions.len() as f64,
            common_ids: common_ids.clone(),
        });
    }
    Ok(reports)
}

/// Pooled pairwise-diversity statistics for one method.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiversityReport {
    pub method: String,
    pub pairs: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation of the heavy-atom aligned RMSD
/// over all unordered sample pairs of all molecules (pooled). Molecules
/// with fewer than two samples are skipped.
pub fn diversity(
    method: &MethodSamples,
    dataset: &Dataset,
    ids: &[String],
) -> Result<DiversityReport, EvalError> {
    let mut values = Vec::new();
    for id in ids {
        let entry = dataset
            .entry_by_id(id)
            .ok_or_else(|| EvalError::MissingReference(id.clone()))?;
        let samples = method.by_molecule.get(id).map(Vec::as_slice).unwrap_or(&[]);
        if samples.len() < 2 {
            continue;
        }
        let mask = entry.graph.heavy_mask();
        for i in 0..samples.len() {
            for j in (i + 1)..samples.len() {
                values.push(kabsch_align(&samples[i], &samples[j], &mask)?.rmsd);
            }
        }
    }
    let mean = if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    Ok(DiversityReport {
        method: method.method.clone(),
        pairs: values.len(),
        mean,
        std: population_std(&values),
    })
}

/// Statistics of one heavy-atom-count group.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupRow {
    pub heavy_atoms: usize,
    pub count: usize,
    pub mean_best: f64,
    pub std_best: f64,
    pub mean_median: f64,
    pub std_median: f64,
    /// Below the population threshold; excluded from emitted tables.
    pub omitted: bool,
}

/// Group per-molecule best and median RMSD by heavy-atom count. Groups with
/// fewer than 1% of the evaluated molecules are marked omitted.
pub fn group_by_heavy_atoms(report: &MethodReport) -> Vec<GroupRow> {
    let mut groups: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for m in &report.molecules {
        groups
            .entry(m.heavy_atoms)
            .or_default()
            .push((m.best, median(&m.rmsds)));
    }
    let total: usize = groups.values().map(Vec::len).sum();
    let threshold = 0.01 * total as f64;
    groups
        .into_iter()
        .map(|(heavy_atoms, rows)| {
            let bests: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let medians: Vec<f64> = rows.iter().map(|r| r.1).collect();
            GroupRow {
                heavy_atoms,
                count: rows.len(),
                mean_best: bests.iter().sum::<f64>() / bests.len() as f64,
                std_best: population_std(&bests),
                mean_median: medians.iter().sum::<f64>() / medians.len() as f64,
                std_median: population_std(&medians),
                omitted: (rows.len() as f64) < threshold,
            }
        })
        .collect()
}

/// Per-molecule composition and size statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MoleculeStats {
    pub id: String,
    pub atoms: usize,
    pub heavy_atoms: usize,
    pub distinct_elements: usize,
    pub bonds: usize,
    pub rotatable_bonds: usize,
    /// None when an element is outside the built-in mass table.
    pub mass: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetStats {
    pub element_counts: BTreeMap<String, usize>,
    pub molecules: Vec<MoleculeStats>,
}

/// Rotatable bonds: acyclic single bonds whose endpoints are both heavy
/// atoms with at least two heavy neighbors. Approximate by design.
pub fn rotatable_bond_count(entry: &DatasetEntry) -> usize {
    let graph = &entry.graph;
    let cycle_mask = graph.cycle_bond_mask();
    let heavy_neighbors = graph.heavy_neighbor_counts();
    graph
        .bonds()
        .iter()
        .zip(&cycle_mask)
        .filter(|(b, &in_cycle)| {
            !in_cycle
                && b.order == BondOrder::Single
                && graph.atoms()[b.i].is_heavy()
                && graph.atoms()[b.j].is_heavy()
                && heavy_neighbors[b.i] >= 2
                && heavy_neighbors[b.j] >= 2
        })
        .count()
}

pub fn dataset_stats(dataset: &Dataset) -> DatasetStats {
    let mut element_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut molecules = Vec::with_capacity(dataset.entries.len());
    for entry in &dataset.entries {
        let mut distinct: BTreeMap<&str, usize> = BTreeMap::new();
        let mut mass = Some(0.0f64);
        for atom in entry.graph.atoms() {
            *element_counts.entry(atom.element.clone()).or_default() += 1;
            *distinct.entry(atom.element.as_str()).or_default() += 1;
            mass = match (mass, atomic_mass(&atom.element)) {
                (Some(acc), Some(m)) => Some(acc + m),
                _ => None,
            };
        }
        molecules.push(MoleculeStats {
            id: entry.id.clone(),
            atoms: entry.graph.atom_count(),
            heavy_atoms: entry.graph.heavy_count(),
            distinct_elements: distinct.len(),
            bonds: entry.graph.bonds().len(),
            rotatable_bonds: rotatable_bond_count(entry),
            mass,
        });
    }
    DatasetStats { element_counts, molecules }
}

/// Baseline conformations: coordinates drawn i.i.d. from a centered normal
/// with standard deviation `scale * M^(1/3)`. Always succeeds.
pub fn random_baseline(
    atom_count: usize,
    s: usize,
    rng: &mut ChaCha8Rng,
    scale: f64,
) -> Vec<Conformation> {
    let sigma = scale * (atom_count as f64).cbrt();
    (0..s)
        .map(|_| {
            let coords = (0..atom_count)
                .map(|_| {
                    let mut p = [0.0; 3];
                    for c in &mut p {
                        let e: f64 = rng.sample(StandardNormal);
                        *c = sigma * e;
                    }
                    p
                })
                .collect();
            Conformation::new(coords).expect("finite normal draws")
        })
        .collect()
}

pub fn per_molecule_csv(report: &MethodReport) -> String {
    let mut out = String::from("id,heavy_atoms,mean,std,best\n");
    for m in &report.molecules {
        let _ = writeln!(out, "{},{},{},{},{}", m.id, m.heavy_atoms, m.mean, m.std, m.best);
    }
    out
}

pub fn aggregate_csv(reports: &[MethodReport]) -> String {
    let mut out = String::from(
        "method,median_of_mean,median_of_std,median_of_best,success_per_test_set,success_per_molecule\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method,
            r.median_of_mean,
            r.median_of_std,
            r.median_of_best,
            r.success_per_test_set,
            r.success_per_molecule
        );
    }
    out
}

pub fn diversity_csv(reports: &[DiversityReport]) -> String {
    let mut out = String::from("method,pairs,mean,std\n");
    for r in reports {
        let _ = writeln!(out, "{},{},{},{}", r.method, r.pairs, r.mean, r.std);
    }
    out
}

pub fn grouped_csv(groups: &[GroupRow]) -> String {
    let mut out = String::from("heavy_atoms,count,mean_best,std_best,mean_median,std_median\n");
    for g in groups.iter().filter(|g| !g.omitted) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            g.heavy_atoms, g.count, g.mean_best, g.std_best, g.mean_median, g.std_median
        );
    }
    out
}

pub fn element_counts_csv(stats: &DatasetStats) -> String {
    let mut out = String::from("element,count\n");
    for (element, count) in &stats.element_counts {
        let _ = writeln!(out, "{},{}", element, count);
    }
    out
}

pub fn molecule_stats_csv(stats: &DatasetStats) -> String {
    let mut out =
        String::from("id,atoms,heavy_atoms,distinct_elements,bonds,rotatable_bonds,mass\n");
    for m in &stats.molecules {
        let mass = m.mass.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.id, m.atoms, m.heavy_atoms, m.distinct_elements, m.bonds, m.rotatable_bonds, mass
        );
    }
    out
}

#[cfg(test)]
mod tests;
