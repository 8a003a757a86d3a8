//! The three-distribution conditional VAE over molecular graphs: a prior
//! P(Z|G), an approximate posterior Q(Z|G,X*) conditioned on the reference
//! geometry through its distance matrix, and a likelihood P(X|Z,G) whose
//! output variance is fixed to one. Training maximizes the reconstruction
//! term of the reference conformation after rigid alignment to the predicted
//! means, minus the posterior/prior KL, minus a small KL pulling the prior
//! toward a standard normal.

use crate::align::{kabsch_align, Alignment};
use crate::autodiff::{AdError, BoundParams, ParamStore, StoreError, Tape, Tensor, Value};
use crate::molgraph::{distance_matrix, pair_list, Conformation, GraphFeatures};
use crate::mpnn::{
    self, gaussian_head, init_network_params, init_shared_node_embedding, init_states,
    message_pass_round, run_mpnn, Dropout, MpnnConfig, MpnnError, NetWeights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;

pub use crate::mpnn::GaussianSet;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug)]
pub enum VaeError {
    Mpnn(MpnnError),
    Ad(AdError),
    Align(crate::align::AlignError),
    Store(StoreError),
    Shape(String),
}

impl fmt::Display for VaeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VaeError::Mpnn(e) => write!(f, "{}", e),
            VaeError::Ad(e) => write!(f, "{}", e),
            VaeError::Align(e) => write!(f, "{}", e),
            VaeError::Store(e) => write!(f, "{}", e),
            VaeError::Shape(msg) => write!(f, "shape mismatch: {}", msg),
        }
    }
}

impl std::error::Error for VaeError {}

impl From<MpnnError> for VaeError {
    fn from(e: MpnnError) -> Self {
        VaeError::Mpnn(e)
    }
}

impl From<AdError> for VaeError {
    fn from(e: AdError) -> Self {
        VaeError::Ad(e)
    }
}

impl From<crate::align::AlignError> for VaeError {
    fn from(e: crate::align::AlignError) -> Self {
        VaeError::Align(e)
    }
}

impl From<StoreError> for VaeError {
    fn from(e: StoreError) -> Self {
        VaeError::Store(e)
    }
}

/// Architecture plus the feature dimensions the weights were built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mpnn: MpnnConfig,
    pub node_feature_dim: usize,
    pub edge_feature_dim: usize,
}

impl ModelConfig {
    pub fn latent_dim(&self) -> usize {
        self.mpnn.latent_dim()
    }
}

/// All learnable weights of the three networks plus the shared node
/// embedding, tied to the vocabulary they were initialized against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab_fingerprint: String,
    pub store: ParamStore,
}

impl ModelParams {
    /// Glorot-initialized weights, zero biases, deterministic under `seed`.
    /// The likelihood head has no log-variance transform: its output
    /// variance is fixed to one during training and inference.
    pub fn init(config: ModelConfig, vocab_fingerprint: String, seed: u64) -> Result<Self, VaeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d_h = config.mpnn.hidden_dim;
        let d_z = config.latent_dim();
        init_shared_node_embedding(&mut store, config.node_feature_dim, d_h, &mut rng);
        init_network_params(&mut store, "prior", &config.mpnn, config.edge_feature_dim, d_z, true, &mut rng)?;
        init_network_params(
            &mut store,
            "posterior",
            &config.mpnn,
            config.edge_feature_dim + 1,
            d_z,
            true,
            &mut rng,
        )?;
        init_network_params(&mut store, "likelihood", &config.mpnn, config.edge_feature_dim, 3, false, &mut rng)?;
        Ok(ModelParams { config, vocab_fingerprint, store })
    }
}

/// The three networks' weights resolved on one tape.
pub struct Networks {
    pub prior: NetWeights,
    pub posterior: NetWeights,
    pub likelihood: NetWeights,
}

impl Networks {
    pub fn resolve(bound: &BoundParams) -> Result<Self, VaeError> {
        Ok(Networks {
            prior: NetWeights::resolve(bound, "prior", true)?,
            posterior: NetWeights::resolve(bound, "posterior", true)?,
            likelihood: NetWeights::resolve(bound, "likelihood", false)?,
        })
    }
}

/// P(Z|G): message passing over the bare graph, Gaussian head of width d_z.
pub fn prior_forward<R: Rng>(
    tape: &mut Tape,
    nets: &Networks,
    cfg: &ModelConfig,
    feats: &GraphFeatures,
    dropout: Dropout<'_, R>,
) -> Result<GaussianSet, VaeError> {
    let h = run_mpnn(tape, &nets.prior, &cfg.mpnn, &feats.node, &feats.edge, None, None)?;
    Ok(gaussian_head(tape, &nets.prior, h, cfg.latent_dim(), dropout)?)
}

/// Q(Z|G,X*): like the prior, but every edge input carries the reference
/// distance for its pair, so the posterior sees the geometry.
pub fn posterior_forward<R: Rng>(
    tape: &mut Tape,
    nets: &Networks,
    cfg: &ModelConfig,
    feats: &GraphFeatures,
    reference: &Conformation,
    dropout: Dropout<'_, R>,
) -> Result<GaussianSet, VaeError> {
    let m = feats.node.shape()[0];
    if reference.len() != m {
        return Err(VaeError::Shape(format!(
            "reference has {} atoms, graph has {}",
            reference.len(),
            m
        )));
    }
    let d = distance_matrix(reference);
    let distances: Vec<f64> = pair_list(m).into_iter().map(|(i, j)| d.get2(i, j)).collect();
    let h = run_mpnn(
        tape,
        &nets.posterior,
        &cfg.mpnn,
        &feats.node,
        &feats.edge,
        None,
        Some(&distances),
    )?;
    Ok(gaussian_head(tape, &nets.posterior, h, cfg.latent_dim(), dropout)?)
}

/// P(X|Z,G): latents are added to the embedded node features; the output
/// variance is fixed to one (the head carries no log-variance transform).
pub fn likelihood_forward<R: Rng>(
    tape: &mut Tape,
    nets: &Networks,
    cfg: &ModelConfig,
    feats: &GraphFeatures,
    latents: Value,
    dropout: Dropout<'_, R>,
) -> Result<GaussianSet, VaeError> {
    let base = init_states(tape, &nets.likelihood, &feats.node, &feats.edge, None, None)?;
    decode_latents(tape, nets, cfg, &base, latents, dropout)
}

/// Decode one latent set through the likelihood network from prebuilt
/// initial states (`h0 = U_node . v`, shared edge matrices). Sampling loops
/// call this repeatedly without re-embedding the edges.
pub fn decode_latents<R: Rng>(
    tape: &mut Tape,
    nets: &Networks,
    cfg: &ModelConfig,
    base: &mpnn::NodeStates,
    latents: Value,
    dropout: Dropout<'_, R>,
) -> Result<GaussianSet, VaeError> {
    let m = tape.shape(base.h)[0];
    if tape.shape(latents) != [m, cfg.latent_dim()] {
        return Err(VaeError::Shape(format!(
            "latents {:?}, expected [{}, {}]",
            tape.shape(latents),
            m,
            cfg.latent_dim()
        )));
    }
    let h0 = tape.add(base.h, latents)?;
    let mut states = base.with_h(h0);
    for _ in 0..cfg.mpnn.rounds {
        states = message_pass_round(tape, &nets.likelihood, &states)?;
    }
    Ok(gaussian_head(tape, &nets.likelihood, states.h, 3, dropout)?)
}

fn numel(tape: &Tape, v: Value) -> usize {
    tape.shape(v).iter().product()
}

/// Analytic KL divergence between two factorized Gaussians, summed over all
/// nodes and components.
pub fn kl_diag(tape: &mut Tape, q: &GaussianSet, p: &GaussianSet) -> Result<Value, VaeError> {
    if tape.shape(q.mean) != tape.shape(p.mean) {
        return Err(VaeError::Shape(format!(
            "kl between {:?} and {:?}",
            tape.shape(q.mean),
            tape.shape(p.mean)
        )));
    }
    let n = numel(tape, q.mean) as f64;
    let diff_lv = tape.sub(q.log_var, p.log_var)?;
    let term_log = tape.scale(diff_lv, -0.5)?; // log(sigma_p / sigma_q)
    let ratio = tape.exp(diff_lv)?; // sigma_q^2 / sigma_p^2
    let term_ratio = tape.scale(ratio, 0.5)?;
    let mean_diff = tape.sub(q.mean, p.mean)?;
    let mean_sq = tape.mul(mean_diff, mean_diff)?;
    let neg_lvp = tape.scale(p.log_var, -1.0)?;
    let inv_var_p = tape.exp(neg_lvp)?;
    let weighted = tape.mul(mean_sq, inv_var_p)?;
    let term_mean = tape.scale(weighted, 0.5)?;
    let s = tape.add(term_log, term_ratio)?;
    let s = tape.add(s, term_mean)?;
    let total = tape.sum(s)?;
    Ok(tape.add_scalar(total, -0.5 * n)?)
}

/// KL from a Gaussian set to the standard normal of the same shape.
pub fn kl_unconditional(tape: &mut Tape, p: &GaussianSet) -> Result<Value, VaeError> {
    let shape = tape.shape(p.mean).to_vec();
    let count: usize = shape.iter().product();
    let zeros_mean = tape.constant(Tensor::new(shape.clone(), vec![0.0; count])?);
    let zeros_lv = tape.constant(Tensor::new(shape, vec![0.0; count])?);
    let standard = GaussianSet { mean: zeros_mean, log_var: zeros_lv };
    kl_diag(tape, p, &standard)
}

/// Log density of `x` under the factorized Gaussian set, summed over nodes
/// and components.
pub fn gaussian_loglik(tape: &mut Tape, x: Value, g: &GaussianSet) -> Result<Value, VaeError> {
    if tape.shape(x) != tape.shape(g.mean) {
        return Err(VaeError::Shape(format!(
            "observations {:?} vs gaussian {:?}",
            tape.shape(x),
            tape.shape(g.mean)
        )));
    }
    let n = numel(tape, x) as f64;
    let diff = tape.sub(g.mean, x)?;
    let sq = tape.mul(diff, diff)?;
    let neg_lv = tape.scale(g.log_var, -1.0)?;
    let precision = tape.exp(neg_lv)?;
    let quad = tape.mul(sq, precision)?;
    let term_quad = tape.scale(quad, -0.5)?;
    let term_norm = tape.scale(g.log_var, -0.5)?;
    let s = tape.add(term_quad, term_norm)?;
    let total = tape.sum(s)?;
    Ok(tape.add_scalar(total, -0.5 * n * LN_2PI)?)
}

/// Post-alignment likelihood: rigidly align the reference onto the predicted
/// mean conformation (all atoms), then score the aligned reference under the
/// predicted Gaussians. The transform is recomputed per call and carries no
/// gradient.
pub fn aligned_loglik(
    tape: &mut Tape,
    predicted: &GaussianSet,
    reference: &Conformation,
) -> Result<(Value, Alignment), VaeError> {
    let shape = tape.shape(predicted.mean);
    if shape.len() != 2 || shape[1] != 3 || shape[0] != reference.len() {
        return Err(VaeError::Shape(format!(
            "predicted mean {:?} vs reference with {} atoms",
            shape,
            reference.len()
        )));
    }
    let mean = tape.value(predicted.mean);
    let target = Conformation::new(
        (0..reference.len())
            .map(|i| [mean.get2(i, 0), mean.get2(i, 1), mean.get2(i, 2)])
            .collect(),
    )
    .map_err(|_| VaeError::Shape("predicted mean is not finite".into()))?;
    let mask = vec![true; reference.len()];
    let alignment = kabsch_align(reference, &target, &mask)?;

    let mut aligned = Vec::with_capacity(reference.len() * 3);
    for p in alignment.aligned_reference.coords() {
        aligned.extend_from_slice(p);
    }
    let aligned_const = tape.constant(Tensor::matrix(reference.len(), 3, aligned)?);
    let ll = gaussian_loglik(tape, aligned_const, predicted)?;
    Ok((ll, alignment))
}

/// Graph nodes of the per-molecule objective, still on the tape.
pub struct ElboTerms {
    pub recon: Value,
    pub kl_post_prior: Value,
    pub kl_prior_uncond: Value,
    pub total: Value,
}

/// Scalar snapshot of the objective parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon_loglik: f64,
    pub kl_post_prior: f64,
    pub kl_prior_uncond: f64,
    pub total: f64,
}

impl ElboTerms {
    pub fn breakdown(&self, tape: &Tape) -> ElboBreakdown {
        ElboBreakdown {
            recon_loglik: tape.value(self.recon).item(),
            kl_post_prior: tape.value(self.kl_post_prior).item(),
            kl_prior_uncond: tape.value(self.kl_prior_uncond).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// Single-sample (K = 1) stochastic objective for one molecule:
/// `recon - KL(Q || P) - alpha * KL(P || N(0, I))`. Latent noise is drawn
/// from `rng`; dropout masks are drawn only when `training` is set.
/// Call order of the networks (posterior, prior, likelihood) fixes the rng
/// stream so a seeded rng reproduces the pass exactly.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss(
    tape: &mut Tape,
    nets: &Networks,
    cfg: &ModelConfig,
    feats: &GraphFeatures,
    reference: &Conformation,
    alpha: f64,
    dropout_rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ElboTerms, VaeError> {
    let m = feats.node.shape()[0];
    let d_z = cfg.latent_dim();

    let q = if training {
        posterior_forward(tape, nets, cfg, feats, reference, Dropout::Training { rate: dropout_rate, rng })?
    } else {
        posterior_forward::<ChaCha8Rng>(tape, nets, cfg, feats, reference, Dropout::Inference)?
    };

    let noise_data: Vec<f64> = (0..m * d_z).map(|_| rng.sample(StandardNormal)).collect();
    let noise = Tensor::matrix(m, d_z, noise_data)?;
    let q_var = tape.exp(q.log_var)?;
    let z = tape.reparam_sample(q.mean, q_var, &noise)?;

    let p = if training {
        prior_forward(tape, nets, cfg, feats, Dropout::Training { rate: dropout_rate, rng })?
    } else {
        prior_forward::<ChaCha8Rng>(tape, nets, cfg, feats, Dropout::Inference)?
    };

    let x = if training {
        likelihood_forward(tape, nets, cfg, feats, z, Dropout::Training { rate: dropout_rate, rng })?
    } else {
        likelihood_forward::<ChaCha8Rng>(tape, nets, cfg, feats, z, Dropout::Inference)?
    };

    let (recon, _) = aligned_loglik(tape, &x, reference)?;
    let kl_post_prior = kl_diag(tape, &q, &p)?;
    let kl_prior_uncond = kl_unconditional(tape, &p)?;

    let neg_kl = tape.scale(kl_post_prior, -1.0)?;
    let partial = tape.add(recon, neg_kl)?;
    let reg = tape.scale(kl_prior_uncond, -alpha)?;
    let total = tape.add(partial, reg)?;

    Ok(ElboTerms { recon, kl_post_prior, kl_prior_uncond, total })
}

/// How latents are drawn at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentDraw {
    /// Z ~ P(Z|G) via the reparameterized sample.
    Stochastic,
    /// Z = prior mean; every sample becomes identical (degenerate-prior hook).
    PriorMean,
}

/// Draw `s` conformations: sample latents from the prior, decode each with
/// the likelihood network, and take the mean set as the conformation (the
/// likelihood variance is fixed to one and never sampled from). Succeeds for
/// every featurizable graph.
pub fn sample_conformations(
    model: &ModelParams,
    feats: &GraphFeatures,
    s: usize,
    rng: &mut ChaCha8Rng,
    draw: LatentDraw,
) -> Result<Vec<Conformation>, VaeError> {
    let m = feats.node.shape()[0];
    let d_z = model.config.latent_dim();
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let nets = Networks::resolve(&bound)?;

    let prior = prior_forward::<ChaCha8Rng>(&mut tape, &nets, &model.config, feats, Dropout::Inference)?;
    let prior_var = tape.exp(prior.log_var)?;
    // the decoder's node embedding and edge matrices are sample-independent
    let base = init_states(&mut tape, &nets.likelihood, &feats.node, &feats.edge, None, None)?;

    let mut out = Vec::with_capacity(s);
    for _ in 0..s {
        let noise_data: Vec<f64> = match draw {
            LatentDraw::Stochastic => (0..m * d_z).map(|_| rng.sample(StandardNormal)).collect(),
            LatentDraw::PriorMean => vec![0.0; m * d_z],
        };
        let noise = Tensor::matrix(m, d_z, noise_data)?;
        let z = tape.reparam_sample(prior.mean, prior_var, &noise)?;
        let x = decode_latents::<ChaCha8Rng>(
            &mut tape,
            &nets,
            &model.config,
            &base,
            z,
            Dropout::Inference,
        )?;
        let mean = x.mean_values(&tape);
        let coords: Vec<[f64; 3]> =
            (0..m).map(|i| [mean.get2(i, 0), mean.get2(i, 1), mean.get2(i, 2)]).collect();
        out.push(Conformation::new(coords).map_err(|_| {
            VaeError::Shape("sampled conformation is not finite".into())
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
