use super::*;
use crate::molgraph::{
    write_molblock, Atom, Bond, Conformation, Dataset, FilterProfile, MolecularGraph,
};
use rand::{Rng, SeedableRng};

fn two_atom(length: f64) -> Conformation {
    Conformation::new(vec![[length / 2.0, 0.0, 0.0], [-length / 2.0, 0.0, 0.0]]).unwrap()
}

fn dataset_from(mols: Vec<(MolecularGraph, Conformation)>) -> Dataset {
    let mut sdf = String::new();
    for (k, (g, c)) in mols.iter().enumerate() {
        sdf.push_str(&write_molblock(&format!("mol{}", k), g, c));
    }
    let sources = vec![("test.sdf".to_string(), sdf)];
    Dataset::ingest(&sources, &FilterProfile::open()).unwrap().dataset
}

fn carbon_pair() -> MolecularGraph {
    MolecularGraph::new(
        vec![Atom::new("C"), Atom::new("C")],
        vec![Bond { i: 0, j: 1, order: BondOrder::Single }],
    )
    .unwrap()
}

fn chain(elements: &[&str]) -> MolecularGraph {
    MolecularGraph::new(
        elements.iter().map(|e| Atom::new(*e)).collect(),
        (1..elements.len())
            .map(|i| Bond { i: i - 1, j: i, order: BondOrder::Single })
            .collect(),
    )
    .unwrap()
}

fn samples_for(id: &str, confs: Vec<Conformation>, requested: usize) -> MethodSamples {
    let mut by_molecule = BTreeMap::new();
    by_molecule.insert(id.to_string(), confs);
    MethodSamples { method: "test".into(), requested, by_molecule }
}

#[test]
fn per_molecule_statistics_match_hand_values() {
    // two-atom molecules aligned on the x axis: rmsd = |L_sample - L_ref| / 2
    let dataset = dataset_from(vec![(carbon_pair(), two_atom(2.0))]);
    let id = dataset.entries[0].id.clone();
    let method = samples_for(&id, vec![two_atom(2.2), two_atom(2.4), two_atom(2.6)], 3);
    let ids = vec![id];
    let reports = eval_methods(&[method], &dataset, &ids).unwrap();
    let m = &reports[0].molecules[0];
    assert!((m.rmsds[0] - 0.1).abs() < 1e-12);
    assert!((m.rmsds[1] - 0.2).abs() < 1e-12);
    assert!((m.rmsds[2] - 0.3).abs() < 1e-12);
    assert!((m.mean - 0.2).abs() < 1e-12);
    assert!((m.best - 0.1).abs() < 1e-12);
    assert!((m.std - 0.081_649_658_092_772_6).abs() < 1e-12);
    assert_eq!(reports[0].success_per_test_set, 1.0);
    assert_eq!(reports[0].success_per_molecule, 1.0);
}

#[test]
fn perfect_samples_give_zero_statistics() {
    let dataset = dataset_from(vec![(carbon_pair(), two_atom(2.0))]);
    let id = dataset.entries[0].id.clone();
    let reference = dataset.entries[0].conformation.clone();
    let method = samples_for(&id, vec![reference.clone(), reference], 2);
    let ids = vec![id];
    let reports = eval_methods(&[method], &dataset, &ids).unwrap();
    let m = &reports[0].molecules[0];
    assert!(m.mean < 1e-9 && m.std < 1e-9 && m.best < 1e-9);
    assert!(reports[0].median_of_mean < 1e-9);
}

#[test]
fn medians_match_a_sort_and_select_oracle() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut mols = Vec::new();
    for _ in 0..5 {
        let m = 4;
        let graph = chain(&["C", "N", "O", "C"]);
        let coords: Vec<[f64; 3]> = (0..m)
            .map(|_| {
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ]
            })
            .collect();
        mols.push((graph, Conformation::new(coords).unwrap()));
    }
    let dataset = dataset_from(mols);
    let ids: Vec<String> = dataset.entries.iter().map(|e| e.id.clone()).collect();

    let mut by_molecule = BTreeMap::new();
    for id in &ids {
        let confs: Vec<Conformation> = (0..4)
            .map(|_| {
                Conformation::new(
                    (0..4)
                        .map(|_| {
                            [
                                rng.random_range(-2.0..2.0),
                                rng.random_range(-2.0..2.0),
                                rng.random_range(-2.0..2.0),
                            ]
                        })
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        by_molecule.insert(id.clone(), confs);
    }
    let method = MethodSamples { method: "rand".into(), requested: 4, by_molecule };
    let reports = eval_methods(&[method], &dataset, &ids).unwrap();
    let r = &reports[0];

    // independent sort-and-select median plus direct mean/std/best recompute
    let oracle_median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
    };
    let mut means = Vec::new();
    let mut stds = Vec::new();
    let mut bests = Vec::new();
    for m in &r.molecules {
        let mean = m.rmsds.iter().sum::<f64>() / m.rmsds.len() as f64;
        assert!((m.mean - mean).abs() < 1e-12);
        let var = m.rmsds.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m.rmsds.len() as f64;
        assert!((m.std - var.sqrt()).abs() < 1e-12);
        let best = m.rmsds.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((m.best - best).abs() < 1e-12);
        assert!(m.best <= m.mean + 1e-15);
        means.push(mean);
        stds.push(var.sqrt());
        bests.push(best);
    }
    assert!((r.median_of_mean - oracle_median(means)).abs() < 1e-12);
    assert!((r.median_of_std - oracle_median(stds)).abs() < 1e-12);
    assert!((r.median_of_best - oracle_median(bests)).abs() < 1e-12);
}

#[test]
fn medians_are_invariant_to_molecule_order() {
    let mut values = vec![0.4, 0.1, 0.9, 0.3];
    let a = median(&values);
    values.reverse();
    assert_eq!(a, median(&values));
    values.swap(0, 2);
    assert_eq!(a, median(&values));
    // even length averages the middle pair
    assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
    assert_eq!(median(&[5.0]), 5.0);
}

#[test]
fn missing_molecule_restricts_both_methods_to_common_set() {
    let dataset = dataset_from(vec![
        (carbon_pair(), two_atom(2.0)),
        (carbon_pair(), two_atom(3.0)),
    ]);
    let id0 = dataset.entries[0].id.clone();
    let id1 = dataset.entries[1].id.clone();
    let ids = vec![id0.clone(), id1.clone()];

    let mut full = BTreeMap::new();
    full.insert(id0.clone(), vec![two_atom(2.2)]);
    full.insert(id1.clone(), vec![two_atom(4.0)]);
    let method_a = MethodSamples { method: "a".into(), requested: 1, by_molecule: full };

    let mut partial = BTreeMap::new();
    partial.insert(id0.clone(), vec![two_atom(2.4)]);
    let method_b = MethodSamples { method: "b".into(), requested: 1, by_molecule: partial };

    let reports = eval_methods(&[method_a, method_b], &dataset, &ids).unwrap();
    // only molecule 0 is commonly successful, so the medians ignore
    // molecule 1 even for the method that produced it
    assert_eq!(reports[0].common_ids, vec![id0.clone()]);
    assert!((reports[0].median_of_mean - 0.1).abs() < 1e-12);
    assert!((reports[1].median_of_mean - 0.2).abs() < 1e-12);
    assert_eq!(reports[0].success_per_test_set, 1.0);
    assert_eq!(reports[1].success_per_test_set, 0.5);
    // per-molecule rows still cover everything the method produced
    assert_eq!(reports[0].molecules.len(), 2);

    let bogus = vec!["nope".to_string()];
    assert!(matches!(
        eval_methods(&[], &dataset, &bogus),
        Err(EvalError::NoMolecules)
    ));
}

#[test]
fn unknown_reference_id_is_an_error() {
    let dataset = dataset_from(vec![(carbon_pair(), two_atom(2.0))]);
    let method = samples_for("ghost", vec![two_atom(2.0)], 1);
    let ids = vec!["ghost".to_string()];
    assert!(matches!(
        eval_methods(&[method], &dataset, &ids),
        Err(EvalError::MissingReference(_))
    ));
}

#[test]
fn diversity_hand_values() {
    let dataset = dataset_from(vec![(carbon_pair(), two_atom(2.0))]);
    let id = dataset.entries[0].id.clone();
    let ids = vec![id.clone()];

    // identical samples: zero diversity
    let same = samples_for(&id, vec![two_atom(2.0), two_atom(2.0), two_atom(2.0)], 3);
    let d = diversity(&same, &dataset, &ids).unwrap();
    assert_eq!(d.pairs, 3);
    assert!(d.mean < 1e-12 && d.std < 1e-12);

    // exactly two samples: one pair, std over a single value is zero
    let pair = samples_for(&id, vec![two_atom(2.0), two_atom(4.0)], 2);
    let d = diversity(&pair, &dataset, &ids).unwrap();
    assert_eq!(d.pairs, 1);
    assert!((d.mean - 1.0).abs() < 1e-12);
    assert_eq!(d.std, 0.0);

    // lengths 2, 4, 8 give pairwise rmsds {1, 2, 3}: mean 2
    let three = samples_for(&id, vec![two_atom(2.0), two_atom(4.0), two_atom(8.0)], 3);
    let d = diversity(&three, &dataset, &ids).unwrap();
    assert_eq!(d.pairs, 3);
    assert!((d.mean - 2.0).abs() < 1e-12);
    assert!((d.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);

    // single sample molecules are skipped
    let lone = samples_for(&id, vec![two_atom(2.0)], 1);
    let d = diversity(&lone, &dataset, &ids).unwrap();
    assert_eq!(d.pairs, 0);
    assert_eq!(d.mean, 0.0);
}

fn fake_report(group_sizes: &[(usize, usize)]) -> MethodReport {
    // (heavy_atoms, count) pairs expanded into per-molecule rows
    let mut molecules = Vec::new();
    let mut k = 0;
    for &(heavy, count) in group_sizes {
        for _ in 0..count {
            molecules.push(MoleculeEval {
                id: format!("m{:05}", k),
                heavy_atoms: heavy,
                rmsds: vec![0.5, 1.5],
                mean: 1.0,
                std: 0.5,
                best: 0.5,
            });
            k += 1;
        }
    }
    MethodReport {
        method: "fake".into(),
        molecules,
        median_of_mean: 1.0,
        median_of_std: 0.5,
        median_of_best: 0.5,
        success_per_test_set: 1.0,
        success_per_molecule: 1.0,
        common_ids: Vec::new(),
    }
}

#[test]
fn grouping_respects_the_small_group_omission_rule() {
    // sizes {100, 100, 1}: the singleton falls below 1% of the population
    let groups = group_by_heavy_atoms(&fake_report(&[(3, 100), (4, 100), (9, 1)]));
    assert_eq!(groups.len(), 3);
    let total: usize = groups.iter().map(|g| g.count).sum();
    assert_eq!(total, 201, "pre-omission totals conserve the molecule count");
    assert!(!groups[0].omitted && !groups[1].omitted);
    assert!(groups[2].omitted);

    // uniform sizes keep everything
    let groups = group_by_heavy_atoms(&fake_report(&[(5, 7)]));
    assert_eq!(groups.len(), 1);
    assert!(!groups[0].omitted);
    assert_eq!(groups[0].count, 7);
    assert!((groups[0].mean_median - 1.0).abs() < 1e-15);
}

#[test]
fn dataset_stats_hand_values() {
    // methane: one heavy atom, no rotatable bonds, mass ~ 16.04
    let methane = MolecularGraph::new(
        vec![
            Atom::new("C"),
            Atom::new("H"),
            Atom::new("H"),
            Atom::new("H"),
            Atom::new("H"),
        ],
        (1..5).map(|i| Bond { i: 0, j: i, order: BondOrder::Single }).collect(),
    )
    .unwrap();
    let methane_conf = Conformation::new(vec![
        [0.0, 0.0, 0.0],
        [0.629, 0.629, 0.629],
        [-0.629, -0.629, 0.629],
        [-0.629, 0.629, -0.629],
        [0.629, -0.629, -0.629],
    ])
    .unwrap();
    // ethane: the central C-C bond fails the two-heavy-neighbor rule
    let ethane = chain(&["C", "C", "H", "H"]);
    let ethane_conf = Conformation::new(vec![
        [0.0, 0.0, 0.0],
        [1.54, 0.0, 0.0],
        [-0.5, 0.9, 0.0],
        [2.0, -0.9, 0.0],
    ])
    .unwrap();
    // butane-like heavy chain: exactly one rotatable bond (the middle one)
    let butane = chain(&["C", "C", "C", "C"]);
    let butane_conf = Conformation::new(vec![
        [0.0, 0.0, 0.0],
        [1.5, 0.0, 0.0],
        [3.0, 0.0, 0.0],
        [4.5, 0.0, 0.0],
    ])
    .unwrap();

    let dataset = dataset_from(vec![
        (methane, methane_conf),
        (ethane, ethane_conf),
        (butane, butane_conf),
    ]);
    let stats = dataset_stats(&dataset);

    let m = &stats.molecules[0];
    assert_eq!(m.heavy_atoms, 1);
    assert_eq!(m.rotatable_bonds, 0);
    assert!((m.mass.unwrap() - 16.043).abs() < 0.01);

    assert_eq!(stats.molecules[1].rotatable_bonds, 0);
    assert_eq!(stats.molecules[2].rotatable_bonds, 1);

    // per-molecule element counts sum to the atom counts
    let total_atoms: usize = stats.molecules.iter().map(|m| m.atoms).sum();
    let counted: usize = stats.element_counts.values().sum();
    assert_eq!(total_atoms, counted);
}

#[test]
fn random_baseline_is_total_and_seeded() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let a = random_baseline(6, 5, &mut rng, 1.0);
    assert_eq!(a.len(), 5);
    for conf in &a {
        assert_eq!(conf.len(), 6);
        assert!(conf.coords().iter().flatten().all(|x| x.is_finite()));
    }
    let mut rng2 = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let b = random_baseline(6, 5, &mut rng2, 1.0);
    assert_eq!(a, b);
}

#[test]
fn zero_scale_baseline_rmsd_is_the_reference_spread() {
    // all atoms at the origin: the aligned rmsd against a centered
    // reference equals the root-mean-square atom norm
    let reference = Conformation::new(vec![
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 2.0, 0.0],
        [0.0, -2.0, 0.0],
    ])
    .unwrap();
    let graph = chain(&["C", "C", "C", "C"]);
    let dataset = dataset_from(vec![(graph, reference.clone())]);
    let entry = &dataset.entries[0];

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let sample = random_baseline(4, 1, &mut rng, 0.0).remove(0);
    assert!(sample.coords().iter().flatten().all(|&x| x == 0.0));
    let got = heavy_aligned_rmsd(&sample, entry).unwrap();
    let expect = (reference.coords().iter().map(|p| p.iter().map(|x| x * x).sum::<f64>()).sum::<f64>()
        / 4.0)
        .sqrt();
    assert!((got - expect).abs() < 1e-12);
}

#[test]
fn hydrogens_do_not_affect_reported_rmsds() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let heavy_ref = two_atom(2.0);
    let heavy_sample = two_atom(2.8);

    // same two carbons plus two hydrogens at arbitrary coordinates
    let with_h = MolecularGraph::new(
        vec![Atom::new("C"), Atom::new("C"), Atom::new("H"), Atom::new("H")],
        vec![
            Bond { i: 0, j: 1, order: BondOrder::Single },
            Bond { i: 0, j: 2, order: BondOrder::Single },
            Bond { i: 1, j: 3, order: BondOrder::Single },
        ],
    )
    .unwrap();
    let mut rand_point = || {
        [
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        ]
    };
    let ref_coords: Vec<[f64; 3]> = heavy_ref
        .coords()
        .iter()
        .copied()
        .chain([rand_point(), rand_point()])
        .collect();
    let sample_coords: Vec<[f64; 3]> = heavy_sample
        .coords()
        .iter()
        .copied()
        .chain([rand_point(), rand_point()])
        .collect();

    let bare = dataset_from(vec![(carbon_pair(), heavy_ref)]);
    let padded = dataset_from(vec![(with_h, Conformation::new(ref_coords).unwrap())]);

    let bare_rmsd = heavy_aligned_rmsd(&heavy_sample, &bare.entries[0]).unwrap();
    let padded_rmsd = heavy_aligned_rmsd(
        &Conformation::new(sample_coords).unwrap(),
        &padded.entries[0],
    )
    .unwrap();
    assert!((bare_rmsd - padded_rmsd).abs() < 1e-12);
    assert!((bare_rmsd - 0.4).abs() < 1e-12);
}

#[test]
fn csv_emitters_have_stable_headers() {
    let report = fake_report(&[(3, 2)]);
    assert!(per_molecule_csv(&report).starts_with("id,heavy_atoms,mean,std,best\n"));
    assert!(aggregate_csv(std::slice::from_ref(&report)).starts_with("method,median_of_mean"));
    let d = DiversityReport { method: "x".into(), pairs: 1, mean: 0.5, std: 0.0 };
    assert!(diversity_csv(&[d]).contains("x,1,0.5,0"));
    let groups = group_by_heavy_atoms(&report);
    assert!(grouped_csv(&groups).starts_with("heavy_atoms,count,"));
}
