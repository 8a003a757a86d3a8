//! Message passing network: edge-conditioned neighbor aggregation, GRU node
//! updates with weights shared across rounds, and the two-layer Gaussian
//! output head.
//!
//! Node states are `[M, d_h]` matrices; every unordered pair carries a fixed
//! `d_h x d_h` hidden matrix obtained by a linear embedding of its edge
//! features. Rounds update node states only, never edge states.

use crate::autodiff::{AdError, BoundParams, ParamStore, StoreError, Tape, Tensor, Value};
use crate::molgraph::pair_list;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpnnConfig {
    /// Message passing rounds (L).
    pub rounds: usize,
    /// Node hidden width (d_h); also the per-node latent width.
    pub hidden_dim: usize,
    /// Hidden width of the two-layer output head (d_f).
    pub head_dim: usize,
}

impl MpnnConfig {
    pub fn latent_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn validate(&self) -> Result<(), MpnnError> {
        if self.rounds < 1 || self.hidden_dim < 1 || self.head_dim < 1 {
            return Err(MpnnError::BadConfig(*self));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum MpnnError {
    BadConfig(MpnnConfig),
    Ad(AdError),
    Store(StoreError),
}

impl fmt::Display for MpnnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MpnnError::BadConfig(c) => write!(
                f,
                "invalid mpnn config: rounds={}, hidden_dim={}, head_dim={}",
                c.rounds, c.hidden_dim, c.head_dim
            ),
            MpnnError::Ad(e) => write!(f, "{}", e),
            MpnnError::Store(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for MpnnError {}

impl From<AdError> for MpnnError {
    fn from(e: AdError) -> Self {
        MpnnError::Ad(e)
    }
}

impl From<StoreError> for MpnnError {
    fn from(e: StoreError) -> Self {
        MpnnError::Store(e)
    }
}

/// Dropout behavior for the output head. Masks are drawn from the passed
/// stream in call order, so a fixed seed reproduces the exact masks.
pub enum Dropout<'a, R: Rng> {
    Inference,
    Training { rate: f64, rng: &'a mut R },
}

/// Register one network's weights under `prefix`. The `shared.u_node`
/// embedding is registered once via [`init_shared_node_embedding`] and used
/// by every network. Exactly one J/GRU weight set exists per network no
/// matter how many rounds run.
pub fn init_network_params(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &MpnnConfig,
    edge_input_dim: usize,
    out_dim: usize,
    with_logvar_head: bool,
    rng: &mut impl Rng,
) -> Result<(), MpnnError> {
    cfg.validate()?;
    let dh = cfg.hidden_dim;
    let df = cfg.head_dim;

    insert_glorot(store, format!("{}.u_edge", prefix), edge_input_dim, dh * dh, rng);
    insert_glorot(store, format!("{}.j.w", prefix), 2 * dh, dh, rng);
    store.insert(format!("{}.j.b", prefix), Tensor::zeros(&[dh]));
    for gate in ["z", "r", "h"] {
        insert_glorot(store, format!("{}.gru.w_{}", prefix, gate), dh, dh, rng);
        insert_glorot(store, format!("{}.gru.u_{}", prefix, gate), dh, dh, rng);
        store.insert(format!("{}.gru.b_{}", prefix, gate), Tensor::zeros(&[dh]));
    }
    insert_glorot(store, format!("{}.head.w1", prefix), dh, df, rng);
    store.insert(format!("{}.head.b1", prefix), Tensor::zeros(&[df]));
    insert_glorot(store, format!("{}.head.w2", prefix), df, df, rng);
    store.insert(format!("{}.head.b2", prefix), Tensor::zeros(&[df]));
    insert_glorot(store, format!("{}.head.w_mu", prefix), df, out_dim, rng);
    store.insert(format!("{}.head.b_mu", prefix), Tensor::zeros(&[out_dim]));
    if with_logvar_head {
        insert_glorot(store, format!("{}.head.w_logvar", prefix), df, out_dim, rng);
        store.insert(format!("{}.head.b_logvar", prefix), Tensor::zeros(&[out_dim]));
    }
    Ok(())
}

fn insert_glorot(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut impl Rng) {
    let t = crate::autodiff::glorot_uniform(rows, cols, rng).expect("glorot shape");
    store.insert(name, t);
}

/// Node embedding shared by the prior, likelihood, and posterior networks.
pub fn init_shared_node_embedding(
    store: &mut ParamStore,
    node_feature_dim: usize,
    hidden_dim: usize,
    rng: &mut impl Rng,
) {
    let t = crate::autodiff::glorot_uniform(node_feature_dim, hidden_dim, rng)
        .expect("glorot shape");
    store.insert("shared.u_node", t);
}

struct GruWeights {
    w_z: Value,
    u_z: Value,
    b_z: Value,
    w_r: Value,
    u_r: Value,
    b_r: Value,
    w_h: Value,
    u_h: Value,
    b_h: Value,
}

struct HeadWeights {
    w1: Value,
    b1: Value,
    w2: Value,
    b2: Value,
    w_mu: Value,
    b_mu: Value,
    logvar: Option<(Value, Value)>,
}

/// One network's weights resolved as leaves on a tape.
pub struct NetWeights {
    u_node: Value,
    u_edge: Value,
    j_w: Value,
    j_b: Value,
    gru: GruWeights,
    head: HeadWeights,
}

impl NetWeights {
    pub fn resolve(
        bound: &BoundParams,
        prefix: &str,
        with_logvar_head: bool,
    ) -> Result<Self, MpnnError> {
        let v = |name: String| bound.value(&name);
        let logvar = if with_logvar_head {
            Some((
                v(format!("{}.head.w_logvar", prefix))?,
                v(format!("{}.head.b_logvar", prefix))?,
            ))
        } else {
            None
        };
        Ok(NetWeights {
            u_node: bound.value("shared.u_node")?,
            u_edge: v(format!("{}.u_edge", prefix))?,
            j_w: v(format!("{}.j.w", prefix))?,
            j_b: v(format!("{}.j.b", prefix))?,
            gru: GruWeights {
                w_z: v(format!("{}.gru.w_z", prefix))?,
                u_z: v(format!("{}.gru.u_z", prefix))?,
                b_z: v(format!("{}.gru.b_z", prefix))?,
                w_r: v(format!("{}.gru.w_r", prefix))?,
                u_r: v(format!("{}.gru.u_r", prefix))?,
                b_r: v(format!("{}.gru.b_r", prefix))?,
                w_h: v(format!("{}.gru.w_h", prefix))?,
                u_h: v(format!("{}.gru.u_h", prefix))?,
                b_h: v(format!("{}.gru.b_h", prefix))?,
            },
            head: HeadWeights {
                w1: v(format!("{}.head.w1", prefix))?,
                b1: v(format!("{}.head.b1", prefix))?,
                w2: v(format!("{}.head.w2", prefix))?,
                b2: v(format!("{}.head.b2", prefix))?,
                w_mu: v(format!("{}.head.w_mu", prefix))?,
                b_mu: v(format!("{}.head.b_mu", prefix))?,
                logvar,
            },
        })
    }
}

/// Node hidden states plus the fixed per-pair edge matrices.
pub struct NodeStates {
    /// `[M, d_h]` node hidden vectors.
    pub h: Value,
    /// `[P, d_h * d_h]` edge hidden matrices; constant across rounds.
    pub edge_h: Value,
    pairs: Vec<(usize, usize)>,
}

impl NodeStates {
    /// Same edge matrices with replaced node states; lets callers reuse one
    /// edge embedding across many decoder passes.
    pub fn with_h(&self, h: Value) -> NodeStates {
        NodeStates { h, edge_h: self.edge_h, pairs: self.pairs.clone() }
    }
}

/// Per-node Gaussian parameters produced by a network head. The variance is
/// kept as log-variance so it is strictly positive by construction.
#[derive(Clone, Copy, Debug)]
pub struct GaussianSet {
    /// `[M, k]` means.
    pub mean: Value,
    /// `[M, k]` log variances.
    pub log_var: Value,
}

impl GaussianSet {
    pub fn mean_values(&self, tape: &Tape) -> Tensor {
        tape.value(self.mean).clone()
    }

    /// Variances, `exp(log_var)` elementwise.
    pub fn variance_values(&self, tape: &Tape) -> Tensor {
        let lv = tape.value(self.log_var);
        Tensor::new(lv.shape().to_vec(), lv.data().iter().map(|x| x.exp()).collect())
            .expect("same shape")
    }
}

fn linear(tape: &mut Tape, x: Value, w: Value, b: Value) -> Result<Value, AdError> {
    let xw = tape.matmul(x, w)?;
    tape.broadcast_add(xw, b)
}

/// Initial states: `h0 = U_node . v (+ optional extra term)` per node and
/// `edge_h = U_edge . [e ; optional per-pair scalar]` per pair.
pub fn init_states(
    tape: &mut Tape,
    weights: &NetWeights,
    node_features: &Tensor,
    edge_features: &Tensor,
    extra_node_term: Option<Value>,
    extra_edge_input: Option<&[f64]>,
) -> Result<NodeStates, MpnnError> {
    let m = node_features.shape()[0];
    let pairs = pair_list(m);

    let nf = tape.constant(node_features.clone());
    let mut h = tape.matmul(nf, weights.u_node)?;
    if let Some(z) = extra_node_term {
        h = tape.add(h, z)?;
    }

    let edge_input = match extra_edge_input {
        None => edge_features.clone(),
        Some(per_pair) => {
            let p = edge_features.shape()[0];
            let d_e = edge_features.shape()[1];
            if per_pair.len() != p {
                return Err(MpnnError::Ad(AdError::Shape(format!(
                    "extra edge input has {} entries for {} pairs",
                    per_pair.len(),
                    p
                ))));
            }
            let mut data = Vec::with_capacity(p * (d_e + 1));
            for (row, &extra) in edge_features.data().chunks_exact(d_e).zip(per_pair) {
                data.extend_from_slice(row);
                data.push(extra);
            }
            Tensor::matrix(p, d_e + 1, data)?
        }
    };
    let ef = tape.constant(edge_input);
    let edge_h = tape.matmul(ef, weights.u_edge)?;

    Ok(NodeStates { h, edge_h, pairs })
}

/// One weight-shared round: aggregate neighbor messages through the edge
/// matrices, combine with the node's own state through the linear layer J,
/// then apply the GRU update `h' = (1 - z) . h + z . h~`.
pub fn message_pass_round(
    tape: &mut Tape,
    weights: &NetWeights,
    states: &NodeStates,
) -> Result<NodeStates, MpnnError> {
    let h = states.h;
    let agg = tape.edge_aggregate(states.edge_h, h, &states.pairs)?;
    let j_in = tape.concat_cols(h, agg)?;
    let msg = linear(tape, j_in, weights.j_w, weights.j_b)?;

    let gru = &weights.gru;
    let gate = |tape: &mut Tape, w: Value, u: Value, b: Value| -> Result<Value, AdError> {
        let mw = tape.matmul(msg, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(mw, hu)?;
        tape.broadcast_add(s, b)
    };
    let z_pre = gate(tape, gru.w_z, gru.u_z, gru.b_z)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, gru.w_r, gru.u_r, gru.b_r)?;
    let r = tape.sigmoid(r_pre)?;

    let rh = tape.mul(r, h)?;
    let mw = tape.matmul(msg, gru.w_h)?;
    let rhu = tape.matmul(rh, gru.u_h)?;
    let cand_pre = tape.add(mw, rhu)?;
    let cand_biased = tape.broadcast_add(cand_pre, gru.b_h)?;
    let cand = tape.tanh(cand_biased)?;

    let shape = tape.shape(h).to_vec();
    let ones = tape.constant(Tensor::new(shape.clone(), vec![1.0; shape[0] * shape[1]])?);
    let one_minus_z = tape.sub(ones, z)?;
    let keep = tape.mul(one_minus_z, h)?;
    let take = tape.mul(z, cand)?;
    let h_new = tape.add(keep, take)?;

    Ok(NodeStates { h: h_new, edge_h: states.edge_h, pairs: states.pairs.clone() })
}

/// Initialize then run `rounds` weight-shared message passing rounds;
/// returns the final `[M, d_h]` node vectors.
pub fn run_mpnn(
    tape: &mut Tape,
    weights: &NetWeights,
    cfg: &MpnnConfig,
    node_features: &Tensor,
    edge_features: &Tensor,
    extra_node_term: Option<Value>,
    extra_edge_input: Option<&[f64]>,
) -> Result<Value, MpnnError> {
    cfg.validate()?;
    let mut states = init_states(
        tape,
        weights,
        node_features,
        edge_features,
        extra_node_term,
        extra_edge_input,
    )?;
    for _ in 0..cfg.rounds {
        states = message_pass_round(tape, weights, &states)?;
    }
    Ok(states.h)
}

fn apply_dropout<R: Rng>(
    tape: &mut Tape,
    x: Value,
    dropout: &mut Dropout<'_, R>,
) -> Result<Value, AdError> {
    match dropout {
        Dropout::Inference => Ok(x),
        Dropout::Training { rate, rng } => {
            if *rate == 0.0 {
                return Ok(x);
            }
            let shape = tape.shape(x).to_vec();
            let n: usize = shape.iter().product();
            let keep_scale = 1.0 / (1.0 - *rate);
            let mask_data: Vec<f64> = (0..n)
                .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep_scale })
                .collect();
            let mask = tape.constant(Tensor::new(shape, mask_data)?);
            tape.mul(x, mask)
        }
    }
}

/// Two-layer tanh head producing per-node mean and log-variance. Dropout is
/// applied after each hidden layer during training only. Heads without a
/// log-variance transform (the likelihood network) emit log-variance zero,
/// i.e. unit variance.
pub fn gaussian_head<R: Rng>(
    tape: &mut Tape,
    weights: &NetWeights,
    h_final: Value,
    out_dim: usize,
    mut dropout: Dropout<'_, R>,
) -> Result<GaussianSet, MpnnError> {
    let head = &weights.head;
    let l1 = linear(tape, h_final, head.w1, head.b1)?;
    let a1 = tape.tanh(l1)?;
    let a1 = apply_dropout(tape, a1, &mut dropout)?;
    let l2 = linear(tape, a1, head.w2, head.b2)?;
    let a2 = tape.tanh(l2)?;
    let a2 = apply_dropout(tape, a2, &mut dropout)?;

    let mean = linear(tape, a2, head.w_mu, head.b_mu)?;
    let log_var = match head.logvar {
        Some((w, b)) => linear(tape, a2, w, b)?,
        None => {
            let m = tape.shape(h_final)[0];
            tape.constant(Tensor::zeros(&[m, out_dim]))
        }
    };
    if tape.shape(mean) != [tape.shape(h_final)[0], out_dim] {
        return Err(MpnnError::Ad(AdError::Shape(format!(
            "head produced {:?}, expected [{}, {}]",
            tape.shape(mean),
            tape.shape(h_final)[0],
            out_dim
        ))));
    }
    Ok(GaussianSet { mean, log_var })
}
