use super::*;
use crate::autodiff::{grad_check, FnModel};
use crate::molgraph::{featurize, Atom, Bond, BondOrder, MolecularGraph, Vocabulary};
use std::collections::BTreeMap;

fn fixed_vocab() -> Vocabulary {
    Vocabulary {
        elements: vec!["C".into(), "H".into(), "N".into(), "O".into()],
    }
}

fn toy_config(m_rounds: usize, d_h: usize, d_f: usize) -> ModelConfig {
    ModelConfig {
        mpnn: MpnnConfig { rounds: m_rounds, hidden_dim: d_h, head_dim: d_f },
        node_feature_dim: fixed_vocab().node_feature_dim(),
        edge_feature_dim: 5,
    }
}

/// Random chain molecule over the fixed vocabulary with random coordinates.
fn toy_molecule(m: usize, seed: u64) -> (MolecularGraph, GraphFeatures, Conformation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let elements = ["C", "H", "N", "O"];
    let atoms: Vec<Atom> = (0..m)
        .map(|_| Atom::new(elements[rng.random_range(0..elements.len())]))
        .collect();
    let bonds: Vec<Bond> = (1..m)
        .map(|i| Bond { i: rng.random_range(0..i), j: i, order: BondOrder::Single })
        .collect();
    let graph = MolecularGraph::new(atoms, bonds).unwrap();
    let feats = featurize(&graph, &fixed_vocab()).unwrap();
    let coords: Vec<[f64; 3]> = (0..m)
        .map(|_| {
            [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ]
        })
        .collect();
    (graph, feats, Conformation::new(coords).unwrap())
}

fn toy_model(cfg: &ModelConfig, seed: u64) -> ModelParams {
    ModelParams::init(cfg.clone(), fixed_vocab().fingerprint(), seed).unwrap()
}

fn gaussian_from(tape: &mut Tape, mean: &[f64], log_var: &[f64], rows: usize, cols: usize) -> GaussianSet {
    let m = tape.constant(Tensor::matrix(rows, cols, mean.to_vec()).unwrap());
    let lv = tape.constant(Tensor::matrix(rows, cols, log_var.to_vec()).unwrap());
    GaussianSet { mean: m, log_var: lv }
}

#[test]
fn prior_with_zero_head_weights_is_standard_normal() {
    let cfg = toy_config(2, 4, 5);
    let mut model = toy_model(&cfg, 1);
    for name in ["prior.head.w1", "prior.head.w2", "prior.head.w_mu", "prior.head.w_logvar"] {
        let t = model.store.get_mut(name).unwrap();
        let shape = t.shape().to_vec();
        *t = Tensor::zeros(&shape);
    }
    let (_, feats, _) = toy_molecule(5, 2);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let nets = Networks::resolve(&bound).unwrap();
    let p = prior_forward::<ChaCha8Rng>(&mut tape, &nets, &cfg, &feats, Dropout::Inference).unwrap();
    assert_eq!(tape.shape(p.mean), &[5, 4]);
    assert_eq!(tape.shape(p.log_var), &[5, 4]);
    assert!(p.mean_values(&tape).data().iter().all(|&x| x == 0.0));
    assert!(p.variance_values(&tape).data().iter().all(|&v| v == 1.0));
}

#[test]
fn prior_is_permutation_equivariant() {
    let cfg = toy_config(2, 3, 4);
    let model = toy_model(&cfg, 3);
    let (graph, feats, _) = toy_molecule(4, 4);
    let m = 4;

    let run = |f: &GraphFeatures| {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let nets = Networks::resolve(&bound).unwrap();
        let p = prior_forward::<ChaCha8Rng>(&mut tape, &nets, &cfg, f, Dropout::Inference).unwrap();
        (p.mean_values(&tape), p.variance_values(&tape))
    };
    let (mean, var) = run(&feats);

    // relabel atoms: new index of old atom i is perm[i]
    let perm = [3usize, 1, 0, 2];
    let mut atoms_p = vec![Atom::new("C"); m];
    for (&pi, a) in perm.iter().zip(graph.atoms()) {
        atoms_p[pi] = a.clone();
    }
    let bonds_p: Vec<Bond> = graph
        .bonds()
        .iter()
        .map(|b| Bond { i: perm[b.i], j: perm[b.j], order: b.order })
        .collect();
    let graph_p = MolecularGraph::new(atoms_p, bonds_p).unwrap();
    let feats_p = featurize(&graph_p, &fixed_vocab()).unwrap();
    let (mean_p, var_p) = run(&feats_p);

    for (i, &pi) in perm.iter().enumerate() {
        for c in 0..cfg.latent_dim() {
            assert!((mean.get2(i, c) - mean_p.get2(pi, c)).abs() < 1e-9);
            assert!((var.get2(i, c) - var_p.get2(pi, c)).abs() < 1e-9);
        }
    }
}

#[test]
fn posterior_is_invariant_to_rigid_motion_of_the_reference() {
    let cfg = toy_config(2, 4, 5);
    let model = toy_model(&cfg, 5);
    let (_, feats, reference) = toy_molecule(5, 6);

    let rot = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.4);
    let moved = Conformation::new(
        reference
            .coords()
            .iter()
            .map(|&[x, y, z]| {
                let v = rot * nalgebra::Vector3::new(x, y, z) + nalgebra::Vector3::new(5.0, -2.0, 1.0);
                [v.x, v.y, v.z]
            })
            .collect(),
    )
    .unwrap();

    let run = |conf: &Conformation| {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let nets = Networks::resolve(&bound).unwrap();
        let q = posterior_forward::<ChaCha8Rng>(&mut tape, &nets, &cfg, &feats, conf, Dropout::Inference)
            .unwrap();
        (q.mean_values(&tape), q.variance_values(&tape))
    };
    let (mean_a, var_a) = run(&reference);
    let (mean_b, var_b) = run(&moved);
    for (a, b) in mean_a.data().iter().zip(mean_b.data()) {
        assert!((a - b).abs() < 1e-9);
    }
    for (a, b) in var_a.data().iter().zip(var_b.data()) {
        assert!((a - b).abs() < 1e-9);
    }

    // a genuinely different geometry changes the posterior
    let (_, _, other) = toy_molecule(5, 7);
    let (mean_c, _) = run(&other);
    assert_ne!(mean_a.data(), mean_c.data());
    assert_eq!(mean_a.shape(), &[5, 4]);
}

#[test]
fn likelihood_with_zero_latents_equals_unconditioned_pass() {
    let cfg = toy_config(2, 4, 5);
    let model = toy_model(&cfg, 8);
    let (_, feats, _) = toy_molecule(4, 9);

    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let nets = Networks::resolve(&bound).unwrap();
    let zeros = tape.constant(Tensor::zeros(&[4, 4]));
    let with_zero =
        likelihood_forward::<ChaCha8Rng>(&mut tape, &nets, &cfg, &feats, zeros, Dropout::Inference)
            .unwrap();

    let h = run_mpnn(&mut tape, &nets.likelihood, &cfg.mpnn, &feats.node, &feats.edge, None, None)
        .unwrap();
    let unconditioned =
        gaussian_head::<ChaCha8Rng>(&mut tape, &nets.likelihood, h, 3, Dropout::Inference).unwrap();

    assert_eq!(with_zero.mean_values(&tape), unconditioned.mean_values(&tape));
    assert_eq!(tape.shape(with_zero.mean), &[4, 3]);
}

#[test]
fn decode_from_shared_base_matches_full_forward() {
    let cfg = toy_config(2, 4, 5);
    let model = toy_model(&cfg, 50);
    let (_, feats, _) = toy_molecule(5, 51);
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let z_data: Vec<f64> = (0..20).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let nets = Networks::resolve(&bound).unwrap();
    let z1 = tape.constant(Tensor::matrix(5, 4, z_data.clone()).unwrap());
    let full = likelihood_forward::<ChaCha8Rng>(&mut tape, &nets, &cfg, &feats, z1, Dropout::Inference)
        .unwrap();

    let base = init_states(&mut tape, &nets.likelihood, &feats.node, &feats.edge, None, None)
        .unwrap();
    let z2 = tape.constant(Tensor::matrix(5, 4, z_data).unwrap());
    let reused = decode_latents::<ChaCha8Rng>(&mut tape, &nets, &cfg, &base, z2, Dropout::Inference)
        .unwrap();
    assert_eq!(full.mean_values(&tape), reused.mean_values(&tape));
}

#[test]
fn likelihood_variance_is_always_one() {
    let cfg = toy_config(3, 4, 5);
    let model = toy_model(&cfg, 10);
    let (_, feats, _) = toy_molecule(6, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let nets = Networks::resolve(&bound).unwrap();
    let z_data: Vec<f64> = (0..24).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let z = tape.constant(Tensor::matrix(6, 4, z_data).unwrap());
    let x = likelihood_forward::<ChaCha8Rng>(&mut tape, &nets, &cfg, &feats, z, Dropout::Inference)
        .unwrap();
    assert!(x.variance_values(&tape).data().iter().all(|&v| v == 1.0));
    assert!(!model.store.contains("likelihood.head.w_logvar"));
}

#[test]
fn kl_diag_hand_values() {
    let mut tape = Tape::new();
    // identical distributions
    let q = gaussian_from(&mut tape, &[0.3, -1.0, 2.0], &[0.1, -0.4, 0.9], 1, 3);
    let kl = kl_diag(&mut tape, &q, &q).unwrap();
    assert_eq!(tape.value(kl).item(), 0.0);

    // N(1,1) vs N(0,1) -> 0.5
    let q1 = gaussian_from(&mut tape, &[1.0], &[0.0], 1, 1);
    let p1 = gaussian_from(&mut tape, &[0.0], &[0.0], 1, 1);
    let kl = kl_diag(&mut tape, &q1, &p1).unwrap();
    assert!((tape.value(kl).item() - 0.5).abs() < 1e-15);

    // shifting both means leaves the divergence unchanged
    let q2 = gaussian_from(&mut tape, &[1.7, -0.3], &[0.2, -0.7], 1, 2);
    let p2 = gaussian_from(&mut tape, &[0.4, 0.9], &[-0.1, 0.3], 1, 2);
    let base = kl_diag(&mut tape, &q2, &p2).unwrap();
    let shift = 13.25;
    let q3 = gaussian_from(&mut tape, &[1.7 + shift, -0.3 + shift], &[0.2, -0.7], 1, 2);
    let p3 = gaussian_from(&mut tape, &[0.4 + shift, 0.9 + shift], &[-0.1, 0.3], 1, 2);
    let shifted = kl_diag(&mut tape, &q3, &p3).unwrap();
    assert!((tape.value(base).item() - tape.value(shifted).item()).abs() < 1e-12);

    // shape mismatch is an error
    let q4 = gaussian_from(&mut tape, &[0.0; 4], &[0.0; 4], 2, 2);
    assert!(kl_diag(&mut tape, &q4, &p2).is_err());
}

#[test]
fn kl_unconditional_hand_values() {
    let mut tape = Tape::new();
    let standard = gaussian_from(&mut tape, &[0.0; 6], &[0.0; 6], 2, 3);
    let kl = kl_unconditional(&mut tape, &standard).unwrap();
    assert_eq!(tape.value(kl).item(), 0.0);

    // one component with mean m contributes m^2 / 2
    let m = 1.75;
    let p = gaussian_from(&mut tape, &[0.0, m, 0.0], &[0.0; 3], 1, 3);
    let kl = kl_unconditional(&mut tape, &p).unwrap();
    assert!((tape.value(kl).item() - m * m / 2.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..25 {
        let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = gaussian_from(&mut tape, &mean, &lv, 2, 2);
        let kl = kl_unconditional(&mut tape, &g).unwrap();
        assert!(tape.value(kl).item() >= 0.0);
    }
}

/// Independent log-density of a diagonal Gaussian, used as the MC oracle.
fn normal_logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((xi, mi), vi)| -(xi - mi).powi(2) / (2.0 * vi) - (2.0 * std::f64::consts::PI * vi).sqrt().ln())
        .sum()
}

#[test]
fn kl_diag_matches_monte_carlo_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for case in 0..5 {
        let dims = 3;
        let q_mean: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.5..1.5)).collect();
        let q_lv: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p_mean: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.5..1.5)).collect();
        let p_lv: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q_var: Vec<f64> = q_lv.iter().map(|x| x.exp()).collect();
        let p_var: Vec<f64> = p_lv.iter().map(|x| x.exp()).collect();

        let mut tape = Tape::new();
        let q = gaussian_from(&mut tape, &q_mean, &q_lv, 1, dims);
        let p = gaussian_from(&mut tape, &p_mean, &p_lv, 1, dims);
        let kl_node = kl_diag(&mut tape, &q, &p).unwrap();
        let analytic = tape.value(kl_node).item();

        let n = 200_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut z = vec![0.0; dims];
        for _ in 0..n {
            for d in 0..dims {
                let e: f64 = rng.sample(StandardNormal);
                z[d] = q_mean[d] + q_var[d].sqrt() * e;
            }
            let w = normal_logpdf(&z, &q_mean, &q_var) - normal_logpdf(&z, &p_mean, &p_var);
            sum += w;
            sum_sq += w * w;
        }
        let est = sum / n as f64;
        let std_err = ((sum_sq / n as f64 - est * est) / n as f64).sqrt();
        assert!(
            (analytic - est).abs() <= 3.0 * std_err,
            "case {}: analytic {} vs mc {} +- {}",
            case,
            analytic,
            est,
            std_err
        );
    }
}

#[test]
fn gaussian_loglik_hand_values_and_oracle() {
    let m = 4;
    let mut tape = Tape::new();
    let mean: Vec<f64> = (0..3 * m).map(|k| 0.1 * k as f64).collect();
    let g = gaussian_from(&mut tape, &mean, &vec![0.0; 3 * m], m, 3);
    let x = tape.constant(Tensor::matrix(m, 3, mean.clone()).unwrap());
    let ll = gaussian_loglik(&mut tape, x, &g).unwrap();
    let expect = -((3 * m) as f64) * (2.0 * std::f64::consts::PI).sqrt().ln();
    assert!((tape.value(ll).item() - expect).abs() < 1e-12);

    // one coordinate off by one lowers the log density by exactly 1/2
    let mut off = mean.clone();
    off[5] += 1.0;
    let x_off = tape.constant(Tensor::matrix(m, 3, off).unwrap());
    let ll_off = gaussian_loglik(&mut tape, x_off, &g).unwrap();
    assert!((tape.value(ll_off).item() - (expect - 0.5)).abs() < 1e-12);

    // random case against an independently coded density sum
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mean_r: Vec<f64> = (0..3 * m).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lv_r: Vec<f64> = (0..3 * m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x_r: Vec<f64> = (0..3 * m).map(|_| rng.random_range(-2.0..2.0)).collect();
    let g_r = gaussian_from(&mut tape, &mean_r, &lv_r, m, 3);
    let xv = tape.constant(Tensor::matrix(m, 3, x_r.clone()).unwrap());
    let ll_r = gaussian_loglik(&mut tape, xv, &g_r).unwrap();
    let var_r: Vec<f64> = lv_r.iter().map(|x| x.exp()).collect();
    let oracle = normal_logpdf(&x_r, &mean_r, &var_r);
    assert!((tape.value(ll_r).item() - oracle).abs() < 1e-12);
}

#[test]
fn aligned_loglik_absorbs_rigid_motion_and_dominates_unaligned() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let m = 5;
    for _ in 0..10 {
        let mean: Vec<f64> = (0..3 * m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ref_coords: Vec<[f64; 3]> = (0..m)
            .map(|_| {
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ]
            })
            .collect();
        let reference = Conformation::new(ref_coords).unwrap();

        let mut tape = Tape::new();
        let g = gaussian_from(&mut tape, &mean, &vec![0.0; 3 * m], m, 3);
        let (ll, alignment) = aligned_loglik(&mut tape, &g, &reference).unwrap();
        assert!(alignment.transform.is_proper(1e-9));

        // moving the reference rigidly does not change the score
        let rot = nalgebra::Rotation3::from_euler_angles(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.0..3.0),
        );
        let moved = Conformation::new(
            reference
                .coords()
                .iter()
                .map(|&[x, y, z]| {
                    let v = rot * nalgebra::Vector3::new(x, y, z)
                        + nalgebra::Vector3::new(3.0, -1.0, 7.0);
                    [v.x, v.y, v.z]
                })
                .collect(),
        )
        .unwrap();
        let (ll_moved, _) = aligned_loglik(&mut tape, &g, &moved).unwrap();
        assert!((tape.value(ll).item() - tape.value(ll_moved).item()).abs() < 1e-9);

        // alignment can only reduce residuals at unit variance
        let mut flat = Vec::with_capacity(3 * m);
        for p in reference.coords() {
            flat.extend_from_slice(p);
        }
        let raw = tape.constant(Tensor::matrix(m, 3, flat).unwrap());
        let ll_unaligned = gaussian_loglik(&mut tape, raw, &g).unwrap();
        assert!(tape.value(ll).item() >= tape.value(ll_unaligned).item() - 1e-12);
    }
}

#[test]
fn aligned_loglik_perfect_reconstruction_value() {
    let (_, _, reference) = toy_molecule(6, 17);
    let mut flat = Vec::new();
    for p in reference.coords() {
        flat.extend_from_slice(p);
    }
    let mut tape = Tape::new();
    let g = gaussian_from(&mut tape, &flat, &[0.0; 18], 6, 3);
    let (ll, alignment) = aligned_loglik(&mut tape, &g, &reference).unwrap();
    let expect = -18.0 * (2.0 * std::f64::consts::PI).sqrt().ln();
    assert!((tape.value(ll).item() - expect).abs() < 1e-9);
    assert!(alignment.rmsd < 1e-9);
}

fn run_elbo(
    model: &ModelParams,
    cfg: &ModelConfig,
    feats: &GraphFeatures,
    reference: &Conformation,
    alpha: f64,
    training: bool,
    seed: u64,
) -> (ElboBreakdown, Tape, ElboTerms) {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let nets = Networks::resolve(&bound).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms =
        elbo_loss(&mut tape, &nets, cfg, feats, reference, alpha, 0.2, training, &mut rng).unwrap();
    let breakdown = terms.breakdown(&tape);
    (breakdown, tape, terms)
}

#[test]
fn elbo_with_alpha_zero_is_recon_minus_kl() {
    let cfg = toy_config(2, 4, 5);
    let model = toy_model(&cfg, 18);
    let (_, feats, reference) = toy_molecule(5, 19);
    let (b, _, _) = run_elbo(&model, &cfg, &feats, &reference, 0.0, true, 7);
    assert_eq!(b.total, b.recon_loglik - b.kl_post_prior);
    assert!(b.kl_post_prior >= 0.0);
    assert!(b.kl_prior_uncond >= 0.0);
}

#[test]
fn elbo_breakdown_recomposes_to_total() {
    let cfg = toy_config(2, 4, 5);
    let model = toy_model(&cfg, 20);
    let (_, feats, reference) = toy_molecule(5, 21);
    let alpha = 1e-5;
    let (b, _, _) = run_elbo(&model, &cfg, &feats, &reference, alpha, true, 8);
    let recomposed = b.recon_loglik + -b.kl_post_prior + (-alpha * b.kl_prior_uncond);
    assert!((b.total - recomposed).abs() <= 1e-12);
}

#[test]
fn elbo_is_deterministic_under_a_fixed_seed() {
    let cfg = toy_config(2, 4, 5);
    let model = toy_model(&cfg, 22);
    let (_, feats, reference) = toy_molecule(5, 23);
    let (a, _, _) = run_elbo(&model, &cfg, &feats, &reference, 1e-5, true, 9);
    let (b, _, _) = run_elbo(&model, &cfg, &feats, &reference, 1e-5, true, 9);
    assert_eq!(a, b);
    let (c, _, _) = run_elbo(&model, &cfg, &feats, &reference, 1e-5, true, 10);
    assert_ne!(a.total, c.total);
}

#[test]
fn copied_posterior_weights_zero_the_posterior_prior_kl() {
    let cfg = toy_config(2, 4, 5);
    let mut model = toy_model(&cfg, 24);

    // make the posterior compute exactly what the prior computes: copy all
    // prior weights and zero the distance row of the edge embedding
    let prior_names: Vec<String> = model
        .store
        .names()
        .filter(|n| n.starts_with("prior."))
        .map(str::to_string)
        .collect();
    for name in prior_names {
        let post_name = name.replacen("prior.", "posterior.", 1);
        if name == "prior.u_edge" {
            let prior_t = model.store.get(&name).unwrap().clone();
            let d_e = prior_t.shape()[0];
            let width = prior_t.shape()[1];
            let mut data = prior_t.data().to_vec();
            data.extend(std::iter::repeat_n(0.0, width)); // distance row
            let widened = Tensor::matrix(d_e + 1, width, data).unwrap();
            *model.store.get_mut(&post_name).unwrap() = widened;
        } else {
            let t = model.store.get(&name).unwrap().clone();
            *model.store.get_mut(&post_name).unwrap() = t;
        }
    }

    let (_, feats, reference) = toy_molecule(5, 25);
    // dropout must be off or the two networks draw different masks
    let (b, _, _) = run_elbo(&model, &cfg, &feats, &reference, 1e-5, false, 11);
    assert_eq!(b.kl_post_prior, 0.0);
}

#[test]
fn elbo_gradients_match_finite_differences_with_dropout_active() {
    let cfg = toy_config(2, 4, 5);
    let model = toy_model(&cfg, 26);
    let (_, feats, reference) = toy_molecule(4, 27);
    let cfg2 = cfg.clone();

    let eval = move |store: &ParamStore, want_grads: bool| -> Result<(f64, BTreeMap<String, Tensor>), VaeError> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let nets = Networks::resolve(&bound)?;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let terms =
            elbo_loss(&mut tape, &nets, &cfg2, &feats, &reference, 1e-5, 0.2, true, &mut rng)?;
        let loss = tape.scale(terms.total, -1.0)?;
        let value = tape.value(loss).item();
        if want_grads {
            let grads = tape.backward(loss)?;
            Ok((value, bound.grads_by_name(&grads)))
        } else {
            Ok((value, BTreeMap::new()))
        }
    };
    let eval2 = eval.clone();
    let modelfn = FnModel {
        value: move |p: &ParamStore| eval(p, false).map(|(v, _)| v),
        grads: move |p: &ParamStore| eval2(p, true),
    };
    let report = grad_check(&modelfn, &model.store, 1e-4).unwrap();
    assert!(report.max_rel_err < 1e-4, "{}", report);
}

#[test]
fn sampling_is_seeded_and_shape_correct() {
    let cfg = toy_config(2, 4, 5);
    let model = toy_model(&cfg, 28);
    let (_, feats, _) = toy_molecule(6, 29);

    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let a = sample_conformations(&model, &feats, 8, &mut rng, LatentDraw::Stochastic).unwrap();
    assert_eq!(a.len(), 8);
    for conf in &a {
        assert_eq!(conf.len(), 6);
        assert!(conf.coords().iter().flatten().all(|x| x.is_finite()));
    }

    let mut rng2 = ChaCha8Rng::seed_from_u64(30);
    let b = sample_conformations(&model, &feats, 8, &mut rng2, LatentDraw::Stochastic).unwrap();
    assert_eq!(a, b);

    // distinct samples in the stochastic mode
    assert_ne!(a[0], a[1]);
}

#[test]
fn degenerate_prior_draw_collapses_samples() {
    let cfg = toy_config(2, 4, 5);
    let model = toy_model(&cfg, 31);
    let (_, feats, _) = toy_molecule(5, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let samples = sample_conformations(&model, &feats, 5, &mut rng, LatentDraw::PriorMean).unwrap();
    for s in &samples[1..] {
        assert_eq!(s, &samples[0]);
    }
}

#[test]
fn elbo_is_a_lower_bound_on_quadrature_log_evidence() {
    // single atom, d_z = 1: the marginal over the scalar latent is tractable
    // by quadrature, and the stochastic objective must stay below it
    let vocab = fixed_vocab();
    let cfg = ModelConfig {
        mpnn: MpnnConfig { rounds: 2, hidden_dim: 1, head_dim: 3 },
        node_feature_dim: vocab.node_feature_dim(),
        edge_feature_dim: 5,
    };
    let model = toy_model(&cfg, 34);
    let graph = MolecularGraph::new(vec![Atom::new("C")], vec![]).unwrap();
    let feats = featurize(&graph, &vocab).unwrap();
    let reference = Conformation::new(vec![[0.4, -1.2, 0.7]]).unwrap();

    // prior parameters for the single latent
    let (p_mean, p_var) = {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let nets = Networks::resolve(&bound).unwrap();
        let p = prior_forward::<ChaCha8Rng>(&mut tape, &nets, &cfg, &feats, Dropout::Inference)
            .unwrap();
        (p.mean_values(&tape).data()[0], p.variance_values(&tape).data()[0])
    };

    // trapezoid quadrature of E_{z~P(Z|G)}[ exp(aligned loglik) ]
    let lo = p_mean - 8.0 * p_var.sqrt();
    let hi = p_mean + 8.0 * p_var.sqrt();
    let steps = 2000usize;
    let dz = (hi - lo) / steps as f64;
    let mut integral = 0.0;
    for k in 0..=steps {
        let zv = lo + k as f64 * dz;
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let nets = Networks::resolve(&bound).unwrap();
        let z = tape.constant(Tensor::matrix(1, 1, vec![zv]).unwrap());
        let x = likelihood_forward::<ChaCha8Rng>(&mut tape, &nets, &cfg, &feats, z, Dropout::Inference)
            .unwrap();
        let (ll, _) = aligned_loglik(&mut tape, &x, &reference).unwrap();
        let prior_pdf = (-(zv - p_mean).powi(2) / (2.0 * p_var)).exp()
            / (2.0 * std::f64::consts::PI * p_var).sqrt();
        let weight = if k == 0 || k == steps { 0.5 } else { 1.0 };
        integral += weight * tape.value(ll).item().exp() * prior_pdf * dz;
    }
    let log_evidence = integral.ln();

    for (alpha, seed) in [(0.0, 40u64), (1e-5, 41), (1.0, 42)] {
        let (b, _, _) = run_elbo(&model, &cfg, &feats, &reference, alpha, false, seed);
        assert!(
            b.total <= log_evidence + 1e-9,
            "alpha {}: elbo {} exceeds log evidence {}",
            alpha,
            b.total,
            log_evidence
        );
    }
}

#[test]
fn trained_style_elbo_improves_on_reconstruction_quality() {
    // smoke link between the objective and the geometry: a model whose
    // likelihood mean equals the reference after alignment scores higher
    // than a random model (both at unit variance)
    let cfg = toy_config(2, 4, 5);
    let model = toy_model(&cfg, 43);
    let (_, feats, reference) = toy_molecule(5, 44);
    let (random_model_b, _, _) = run_elbo(&model, &cfg, &feats, &reference, 0.0, false, 45);

    let mut flat = Vec::new();
    for p in reference.coords() {
        flat.extend_from_slice(p);
    }
    let mut tape = Tape::new();
    let perfect = gaussian_from(&mut tape, &flat, &[0.0; 15], 5, 3);
    let (ll, _) = aligned_loglik(&mut tape, &perfect, &reference).unwrap();
    assert!(tape.value(ll).item() > random_model_b.recon_loglik);
}
