//! Client local training and server aggregation.
//!
//! A round starts from the broadcast [`ServerState`]. Each selected client
//! runs [`client_round`]: K local steps of (optionally sharpness-aware)
//! gradient descent on its regularized objective, mixing in the broadcast
//! global update as client momentum, and reports its displacement
//! `Δp = w_end − w_start` as a [`ClientUpdate`]. The server combines the
//! displacements with [`vanilla_aggregate`] or [`normalized_aggregate`] and
//! applies [`global_step`].
//!
//! Sign convention: aggregates of displacements point downhill. The
//! harness negates the aggregate into a gradient-signed global update
//! before calling [`global_step`], which subtracts it, so
//! `w^{t+1} = w^t + η_g · aggregate(Δp)`. The stored momentum is that
//! gradient-signed update; clients rescale it by `1/(K̄·η_l)` to gradient
//! units, where `K̄` is the mean step count of the round that produced it.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Shard};
use crate::error::{Error, Result};
use crate::hyperbolic::batch_regularizer;
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::nn::{cross_entropy, forward_tape, Batch, Gradient, MlpSpec, ParamVector};
use crate::rng::Stream;

/// Norm below which a vector is treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta_l: f64,
    pub eta_g: f64,
    pub alpha: f64,
    pub rho: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub beta: f64,
    pub mu_prox: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            eta_l: 0.1,
            eta_g: 1.0,
            alpha: 0.1,
            rho: 0.5,
            gamma: 0.005,
            sigma: 10_000.0,
            beta: 1.0,
            mu_prox: 0.1,
            weight_decay: 5e-4,
            lr_decay: 0.998,
        }
    }
}

impl HyperParams {
    /// Returns the first violated range constraint as `(field, expected)`.
    pub fn violation(&self) -> Option<(&'static str, &'static str)> {
        let checks: [(&str, bool, &str); 10] = [
            ("eta_l", self.eta_l > 0.0, "> 0"),
            ("eta_g", self.eta_g > 0.0, "> 0"),
            ("alpha", self.alpha > 0.0 && self.alpha <= 1.0, "in (0, 1]"),
            ("rho", self.rho >= 0.0, ">= 0"),
            ("gamma", self.gamma >= 0.0, ">= 0"),
            ("sigma", self.sigma > 0.0, "> 0"),
            ("beta", self.beta > 0.0, "> 0"),
            ("mu_prox", self.mu_prox >= 0.0, ">= 0"),
            ("weight_decay", self.weight_decay >= 0.0, ">= 0"),
            ("lr_decay", self.lr_decay > 0.0 && self.lr_decay <= 1.0, "in (0, 1]"),
        ];
        checks
            .into_iter()
            .find(|(_, ok, _)| !ok)
            .map(|(name, _, expected)| (name, expected))
    }

    pub fn validate(&self) -> Result<()> {
        match self.violation() {
            Some((name, expected)) => Err(Error::Config(format!("{name} must be {expected}"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "fedcm")]
    FedCM,
    #[serde(rename = "mofedsam")]
    MoFedSAM,
    #[serde(rename = "fedmrur_n")]
    FedMrurN,
    #[serde(rename = "fedmrur_h")]
    FedMrurH,
    #[serde(rename = "fedmrur")]
    FedMrur,
}

/// Which mechanisms a variant switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Features {
    pub sam: bool,
    pub momentum: bool,
    pub regularizer: bool,
    pub normalized: bool,
    pub prox: bool,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 7] = [
        AlgorithmKind::FedAvg,
        AlgorithmKind::FedProx,
        AlgorithmKind::FedCM,
        AlgorithmKind::MoFedSAM,
        AlgorithmKind::FedMrurN,
        AlgorithmKind::FedMrurH,
        AlgorithmKind::FedMrur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::FedAvg => "fedavg",
            AlgorithmKind::FedProx => "fedprox",
            AlgorithmKind::FedCM => "fedcm",
            AlgorithmKind::MoFedSAM => "mofedsam",
            AlgorithmKind::FedMrurN => "fedmrur_n",
            AlgorithmKind::FedMrurH => "fedmrur_h",
            AlgorithmKind::FedMrur => "fedmrur",
        }
    }

    pub fn features(self) -> Features {
        use AlgorithmKind::*;
        Features {
            sam: matches!(self, MoFedSAM | FedMrurN | FedMrurH | FedMrur),
            momentum: matches!(self, FedCM | MoFedSAM | FedMrurN | FedMrurH | FedMrur),
            regularizer: matches!(self, FedMrurH | FedMrur),
            normalized: matches!(self, FedMrurN | FedMrur),
            prox: matches!(self, FedProx),
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        AlgorithmKind::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown algorithm: {s}")))
    }
}

/// Server-side aggregation scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Vanilla,
    Normalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub global_params: ParamVector,
    /// Last global update Δ^t (gradient-signed), broadcast as client momentum.
    pub momentum: Vec<f64>,
    /// Mean local step count of the round that produced `momentum`.
    pub momentum_steps: f64,
    pub round: usize,
}

impl ServerState {
    pub fn new(global_params: ParamVector) -> Self {
        let n = global_params.len();
        Self {
            global_params,
            momentum: vec![0.0; n],
            momentum_steps: 1.0,
            round: 0,
        }
    }
}

/// One client's displacement over a round with its cached norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    delta: Vec<f64>,
    norm: f64,
}

impl ClientUpdate {
    pub fn new(delta: Vec<f64>) -> Self {
        let norm = norm(&delta);
        Self { delta, norm }
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }
}

/// `w + ρ·g/‖g‖`, or `w` unchanged when `ρ = 0` or the gradient vanishes.
pub fn sam_perturb(params: &[f64], grad: &[f64], rho: f64) -> ParamVector {
    let mut out = params.to_vec();
    let g = norm(grad);
    if rho > 0.0 && g > DEGENERATE_NORM {
        axpy(rho / g, grad, &mut out);
    }
    ParamVector::new(out)
}

/// A differentiable per-client objective driven by [`local_steps`].
pub trait LocalObjective {
    type Batch;

    fn value_and_grad(&self, w: &[f64], batch: &Self::Batch) -> Result<(f64, Gradient)>;
}

/// The client's objective for a network: mean cross-entropy, plus
/// `γ·R(local, global)` when the regularizer is on, plus `μ/2‖w − w_g‖²`
/// for the proximal variant, plus `λ/2‖w‖²` weight decay.
pub struct MlpObjective<'a> {
    pub spec: &'a MlpSpec,
    pub global_params: &'a [f64],
    pub hp: &'a HyperParams,
    pub features: Features,
}

/// A minibatch together with the frozen global model's representation of it.
pub struct PreparedBatch {
    pub batch: Batch,
    pub global_rep: Option<Matrix>,
}

impl MlpObjective<'_> {
    fn regularized(&self) -> bool {
        self.features.regularizer && self.hp.gamma != 0.0
    }

    pub fn prepare(&self, batch: Batch) -> Result<PreparedBatch> {
        let global_rep = if self.regularized() {
            Some(
                forward_tape(self.global_params, self.spec, &batch.features)?
                    .representation()
                    .clone(),
            )
        } else {
            None
        };
        Ok(PreparedBatch { batch, global_rep })
    }
}

impl LocalObjective for MlpObjective<'_> {
    type Batch = PreparedBatch;

    fn value_and_grad(&self, w: &[f64], pb: &PreparedBatch) -> Result<(f64, Gradient)> {
        let tape = forward_tape(w, self.spec, &pb.batch.features)?;
        let (mut value, dlogits) = cross_entropy(tape.logits(), &pb.batch.labels)?;
        let rep_grad = match &pb.global_rep {
            Some(zg) => {
                let (r, mut g) =
                    batch_regularizer(tape.representation(), zg, self.hp.beta, self.hp.sigma)?;
                value += self.hp.gamma * r;
                for v in g.as_mut_slice() {
                    *v *= self.hp.gamma;
                }
                Some(g)
            }
            None => None,
        };
        let mut grad = tape.backward(w, self.spec, Some(&dlogits), rep_grad.as_ref())?;
        if self.features.prox && self.hp.mu_prox != 0.0 {
            let mu = self.hp.mu_prox;
            let mut sq = 0.0;
            for ((g, &wi), &gi) in grad.iter_mut().zip(w).zip(self.global_params) {
                let d = wi - gi;
                *g += mu * d;
                sq += d * d;
            }
            value += 0.5 * mu * sq;
        }
        if self.hp.weight_decay != 0.0 {
            let wd = self.hp.weight_decay;
            axpy(wd, w, &mut grad);
            value += 0.5 * wd * dot(w, w);
        }
        Ok((value, grad))
    }
}

/// Gradient of the client objective at `local` on one batch, with the
/// global model frozen at `global_params`.
pub fn local_objective_grad(
    local: &[f64],
    global_params: &[f64],
    spec: &MlpSpec,
    batch: &Batch,
    hp: &HyperParams,
    features: Features,
) -> Result<(f64, Gradient)> {
    if local.len() != global_params.len() {
        return Err(Error::Shape(format!(
            "local model has {} parameters, global {}",
            local.len(),
            global_params.len()
        )));
    }
    let obj = MlpObjective {
        spec,
        global_params,
        hp,
        features,
    };
    let pb = obj.prepare(batch.clone())?;
    obj.value_and_grad(local, &pb)
}

/// Update rule for one local step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRule {
    pub eta_l: f64,
    pub alpha: f64,
    pub rho: f64,
    pub sam: bool,
    pub momentum: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutcome {
    pub params: Vec<f64>,
    /// Objective value at the last step's evaluation point.
    pub last_value: f64,
    pub steps: usize,
}

/// Runs one local step per batch:
/// `g = ∇F(w̃)` with `w̃ = w + ρ∇F(w)/‖∇F(w)‖` under SAM (else `w̃ = w`),
/// `v = α·g + (1−α)·m` under momentum (else `v = g`), `w ← w − η_l·v`.
pub fn local_steps<O: LocalObjective>(
    objective: &O,
    start: &[f64],
    momentum_term: &[f64],
    rule: StepRule,
    batches: impl IntoIterator<Item = O::Batch>,
) -> Result<LocalOutcome> {
    let mut w = start.to_vec();
    let mut last_value = f64::NAN;
    let mut steps = 0;
    for batch in batches {
        let (value, grad) = objective.value_and_grad(&w, &batch)?;
        let mut v = if rule.sam {
            let perturbed = sam_perturb(&w, &grad, rule.rho);
            objective.value_and_grad(&perturbed, &batch)?.1
        } else {
            grad
        };
        if rule.momentum && rule.alpha < 1.0 {
            for (vi, &mi) in v.iter_mut().zip(momentum_term) {
                *vi = rule.alpha * *vi + (1.0 - rule.alpha) * mi;
            }
        }
        axpy(-rule.eta_l, &v, &mut w);
        last_value = value;
        steps += 1;
    }
    Ok(LocalOutcome {
        params: w,
        last_value,
        steps,
    })
}

/// Minibatch schedule for local training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalSchedule {
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl LocalSchedule {
    /// K: local epochs times batches per shard pass.
    pub fn steps(&self, shard_len: usize) -> usize {
        self.local_epochs * shard_len.div_ceil(self.batch_size)
    }

    /// Index batches: each epoch reshuffles the shard and slices it.
    pub fn plan(&self, shard: &[usize], rng: &mut Stream) -> Vec<Vec<usize>> {
        let mut order = shard.to_vec();
        let mut out = Vec::with_capacity(self.steps(shard.len()));
        for _ in 0..self.local_epochs {
            order.shuffle(rng);
            out.extend(order.chunks(self.batch_size).map(<[usize]>::to_vec));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientOutcome {
    pub update: ClientUpdate,
    pub last_loss: f64,
    pub steps: usize,
}

/// One client's full round of local training starting from the broadcast state.
#[allow(clippy::too_many_arguments)]
pub fn client_round(
    data: &Dataset,
    shard: &Shard,
    server: &ServerState,
    spec: &MlpSpec,
    hp: &HyperParams,
    features: Features,
    eta_l: f64,
    schedule: LocalSchedule,
    rng: &mut Stream,
) -> Result<ClientOutcome> {
    if shard.indices.is_empty() {
        return Err(Error::Config("client shard is empty".into()));
    }
    if schedule.batch_size == 0 || schedule.local_epochs == 0 {
        return Err(Error::Config("batch_size and local_epochs must be >= 1".into()));
    }
    let objective = MlpObjective {
        spec,
        global_params: &server.global_params,
        hp,
        features,
    };
    let plan = schedule.plan(&shard.indices, rng);
    let batches = plan
        .iter()
        .map(|idx| objective.prepare(data.batch(idx)?))
        .collect::<Result<Vec<_>>>()?;

    let scale = 1.0 / (server.momentum_steps * eta_l);
    let momentum_term: Vec<f64> = server.momentum.iter().map(|m| m * scale).collect();
    let rule = StepRule {
        eta_l,
        alpha: hp.alpha,
        rho: hp.rho,
        sam: features.sam,
        momentum: features.momentum,
    };
    let out = local_steps(&objective, &server.global_params, &momentum_term, rule, batches)?;
    let delta = out
        .params
        .iter()
        .zip(server.global_params.iter())
        .map(|(a, b)| a - b)
        .collect();
    Ok(ClientOutcome {
        update: ClientUpdate::new(delta),
        last_loss: out.last_value,
        steps: out.steps,
    })
}

fn summed(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Config("no client updates to aggregate".into()))?;
    let mut sum = vec![0.0; first.delta.len()];
    for u in updates {
        if u.delta.len() != sum.len() {
            return Err(Error::Shape(format!(
                "client updates of length {} and {}",
                sum.len(),
                u.delta.len()
            )));
        }
        axpy(1.0, &u.delta, &mut sum);
    }
    Ok(sum)
}

/// Arithmetic mean of the client updates.
pub fn vanilla_aggregate(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let mut sum = summed(updates)?;
    let s = updates.len() as f64;
    for v in &mut sum {
        *v /= s;
    }
    Ok(sum)
}

/// Direction of the summed updates with norm equal to the mean update norm.
/// A (numerically) zero sum yields the zero vector.
pub fn normalized_aggregate(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let mut sum = summed(updates)?;
    let sum_norm = norm(&sum);
    if sum_norm <= DEGENERATE_NORM {
        return Ok(vec![0.0; sum.len()]);
    }
    let mean_norm = updates.iter().map(|u| u.norm).sum::<f64>() / updates.len() as f64;
    let scale = mean_norm / sum_norm;
    for v in &mut sum {
        *v *= scale;
    }
    Ok(sum)
}

pub fn aggregate(kind: Aggregation, updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    match kind {
        Aggregation::Vanilla => vanilla_aggregate(updates),
        Aggregation::Normalized => normalized_aggregate(updates),
    }
}

/// `Σ‖Δᵢ‖ / ‖ΣΔᵢ‖`; `None` when the sum vanishes or there are no updates.
pub fn compute_dt(updates: &[ClientUpdate]) -> Option<f64> {
    let sum = summed(updates).ok()?;
    let sum_norm = norm(&sum);
    if sum_norm <= DEGENERATE_NORM {
        return None;
    }
    Some(updates.iter().map(|u| u.norm).sum::<f64>() / sum_norm)
}

/// Mean cosine similarity over unordered pairs of non-degenerate updates.
pub fn pairwise_cosine(updates: &[ClientUpdate]) -> Option<f64> {
    let usable: Vec<&ClientUpdate> = updates
        .iter()
        .filter(|u| u.norm > DEGENERATE_NORM)
        .collect();
    if usable.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, a) in usable.iter().enumerate() {
        for b in &usable[i + 1..] {
            let c = dot(&a.delta, &b.delta) / (a.norm * b.norm);
            total += c.clamp(-1.0, 1.0);
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

/// `w^{t+1} = w^t − η_g·delta`; `delta` becomes the broadcast momentum.
pub fn global_step(server: ServerState, delta: &[f64], eta_g: f64) -> Result<ServerState> {
    if delta.len() != server.global_params.len() {
        return Err(Error::Shape(format!(
            "global update has {} entries, model {}",
            delta.len(),
            server.global_params.len()
        )));
    }
    let mut params = server.global_params;
    axpy(-eta_g, delta, &mut params);
    Ok(ServerState {
        global_params: params,
        momentum: delta.to_vec(),
        momentum_steps: server.momentum_steps,
        round: server.round + 1,
    })
}
