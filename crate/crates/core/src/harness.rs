//! Seeded round loop.
//!
//! A [`Simulation`] owns the datasets, client shards and server state.
//! Each round it samples participants, fans their local training out to a
//! rayon pool, aggregates the displacements in client-id order and applies
//! the global step. All randomness comes from [`derive_rng`] streams keyed
//! on `(master_seed, round, client_id)`, so output does not depend on the
//! number of worker threads.

use rand::seq::index;
use rayon::prelude::*;

use crate::config::{DatasetKind, RunConfig};
use crate::data::{gen_synthetic_split, load_idx, Dataset, Shard};
use crate::error::{Error, Result};
use crate::fl::{
    aggregate, client_round, compute_dt, global_step, pairwise_cosine, vanilla_aggregate,
    Aggregation, ClientOutcome, Features, HyperParams, LocalSchedule, ServerState,
};
use crate::linalg::norm;
use crate::nn::{cross_entropy, forward, init_params, MlpSpec, ParamVector};
use crate::rng::{derive_rng, Stream, SERVER_CLIENT};

/// Env var capping the worker pool.
pub const THREADS_ENV: &str = "FEDSIM_THREADS";

/// Metrics for one communication round. `None` marks an undefined value.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// Mean over participants of their last local objective value.
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    /// Norm of the aggregated update actually applied.
    pub global_update_norm: f64,
    /// Norm of the plain mean of the same client updates.
    pub vanilla_update_norm: f64,
    pub d_t: Option<f64>,
    pub mean_pairwise_cosine: Option<f64>,
    pub effective_eta_l: f64,
    pub participants: usize,
    pub mean_local_steps: f64,
}

/// `max(1, round(ratio·P))` distinct clients, sorted.
pub fn sample_clients(num_clients: usize, ratio: f64, rng: &mut Stream) -> Vec<usize> {
    let k = ((ratio * num_clients as f64).round() as usize).clamp(1, num_clients);
    let mut ids = index::sample(rng, num_clients, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Accuracy (argmax, ties to the lowest class) and mean cross-entropy.
pub fn evaluate(params: &[f64], spec: &MlpSpec, test: &Dataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let out = forward(params, spec, &test.as_batch())?;
    let (loss, _) = cross_entropy(&out.logits, test.labels())?;
    let mut correct = 0usize;
    for (r, &y) in test.labels().iter().enumerate() {
        let row = out.logits.row(r);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok((correct as f64 / test.len() as f64, loss))
}

/// Worker count from `FEDSIM_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n > 0)
}

/// Loads train and test sets, standardizing both with train moments if enabled.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = load_raw(cfg)?;
    if cfg.standardize {
        let (mean, std) = train.feature_moments();
        train.standardize_with(&mean, &std)?;
        test.standardize_with(&mean, &std)?;
    }
    Ok((train, test))
}

fn load_raw(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let (train, test) = gen_synthetic_split(
                cfg.num_classes,
                cfg.dim,
                cfg.per_class,
                cfg.test_per_class,
                cfg.spread,
                cfg.data_seed(),
            )?;
            let test = test.ok_or_else(|| {
                Error::Config("test_per_class must be >= 1 for synthetic data".into())
            })?;
            Ok((train, test))
        }
        DatasetKind::Idx => {
            let need = |p: &Option<std::path::PathBuf>, key: &str| {
                p.clone()
                    .ok_or_else(|| Error::Config(format!("dataset \"idx\" needs {key}")))
            };
            let train = load_idx(
                need(&cfg.train_images, "train_images")?,
                need(&cfg.train_labels, "train_labels")?,
            )?;
            let test = load_idx(
                need(&cfg.test_images, "test_images")?,
                need(&cfg.test_labels, "test_labels")?,
            )?;
            Ok((train, test))
        }
    }
}

pub struct Simulation {
    cfg: RunConfig,
    spec: MlpSpec,
    hp: HyperParams,
    features: Features,
    aggregation: Aggregation,
    schedule: LocalSchedule,
    train: Dataset,
    test: Dataset,
    shards: Vec<Shard>,
    server: ServerState,
}

impl Simulation {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        if let Some((key, expected)) = cfg.violation() {
            return Err(Error::Config(format!("{key} must be {expected}")));
        }
        let spec = cfg.model()?;
        let (train, test) = load_datasets(&cfg)?;
        if spec.input_dim() != train.dim() || test.dim() != train.dim() {
            return Err(Error::Config(format!(
                "layer_sizes starts with {} but data has {} features",
                spec.input_dim(),
                train.dim()
            )));
        }
        if spec.num_classes() < train.num_classes().max(test.num_classes()) {
            return Err(Error::Config(format!(
                "layer_sizes ends with {} outputs but data has {} classes",
                spec.num_classes(),
                train.num_classes()
            )));
        }
        let shards = cfg
            .partition_spec()
            .apply(train.labels(), train.num_classes(), 1)?;
        let server = ServerState::new(init_params(&spec, cfg.init_seed()));
        Ok(Self {
            hp: cfg.hyper(),
            features: cfg.features(),
            aggregation: cfg.aggregation(),
            schedule: cfg.schedule(),
            spec,
            train,
            test,
            shards,
            server,
            cfg,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    /// `η_l · decay^t`.
    pub fn eta_l_at(&self, round: usize) -> f64 {
        self.hp.eta_l * self.hp.lr_decay.powi(round as i32)
    }

    /// Runs one communication round on the current rayon pool.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let t = self.server.round;
        let eta_l = self.eta_l_at(t);
        let mut sampler = derive_rng(self.cfg.master_seed, t as u64, SERVER_CLIENT);
        let selected = sample_clients(
            self.cfg.num_clients,
            self.cfg.participation_ratio,
            &mut sampler,
        );

        let server = &self.server;
        let outcomes: Vec<ClientOutcome> = selected
            .par_iter()
            .map(|&id| {
                let mut rng = derive_rng(self.cfg.master_seed, t as u64, id as u64);
                client_round(
                    &self.train,
                    &self.shards[id],
                    server,
                    &self.spec,
                    &self.hp,
                    self.features,
                    eta_l,
                    self.schedule,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;

        let updates: Vec<_> = outcomes.iter().map(|o| o.update.clone()).collect();
        let applied = aggregate(self.aggregation, &updates)?;
        let vanilla = match self.aggregation {
            Aggregation::Vanilla => applied.clone(),
            Aggregation::Normalized => vanilla_aggregate(&updates)?,
        };
        let s = outcomes.len() as f64;
        let mean_steps = outcomes.iter().map(|o| o.steps as f64).sum::<f64>() / s;
        let train_loss = outcomes.iter().map(|o| o.last_loss).sum::<f64>() / s;

        // Displacements point downhill; the global update is gradient-signed.
        let global_update: Vec<f64> = applied.iter().map(|v| -v).collect();
        let prev = std::mem::replace(
            &mut self.server,
            ServerState::new(ParamVector::zeros(0)),
        );
        let mut next = global_step(prev, &global_update, self.hp.eta_g)?;
        next.momentum_steps = mean_steps;
        self.server = next;
        if !self.server.global_params.is_finite() {
            return Err(Error::Divergence { round: t });
        }

        let evaluate_now = (t + 1).is_multiple_of(self.cfg.eval_every) || t + 1 == self.cfg.rounds;
        let (test_accuracy, test_loss) = if evaluate_now {
            let (a, l) = evaluate(&self.server.global_params, &self.spec, &self.test)?;
            (Some(a), Some(l))
        } else {
            (None, None)
        };

        Ok(RoundMetrics {
            round: t,
            train_loss,
            test_accuracy,
            test_loss,
            global_update_norm: norm(&applied),
            vanilla_update_norm: norm(&vanilla),
            d_t: compute_dt(&updates),
            mean_pairwise_cosine: pairwise_cosine(&updates),
            effective_eta_l: eta_l,
            participants: outcomes.len(),
            mean_local_steps: mean_steps,
        })
    }
}

/// Output of a full run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub final_params: ParamVector,
    /// Global parameters after each round, when requested.
    pub trajectory: Vec<ParamVector>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses `FEDSIM_THREADS` or all logical cores.
    pub threads: Option<usize>,
    pub keep_trajectory: bool,
}

pub fn run_with(cfg: &RunConfig, opts: RunOptions) -> Result<RunOutput> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = opts.threads.or_else(threads_from_env) {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut sim = Simulation::new(cfg.clone())?;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut trajectory = Vec::new();
    pool.install(|| -> Result<()> {
        for _ in 0..cfg.rounds {
            metrics.push(sim.step()?);
            if opts.keep_trajectory {
                trajectory.push(sim.server.global_params.clone());
            }
        }
        Ok(())
    })?;
    Ok(RunOutput {
        metrics,
        final_params: sim.server.global_params,
        trajectory,
    })
}

pub fn run(cfg: &RunConfig) -> Result<Vec<RoundMetrics>> {
    Ok(run_with(cfg, RunOptions::default())?.metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::AlgorithmKind;
    use crate::linalg::Matrix;
    use crate::nn::loss_and_grad;
    use std::collections::HashSet;

    fn small_cfg() -> RunConfig {
        RunConfig {
            layer_sizes: vec![4, 6, 3],
            num_classes: 3,
            dim: 4,
            per_class: 20,
            test_per_class: 5,
            spread: 1.0,
            num_clients: 6,
            participation_ratio: 0.5,
            batch_size: 5,
            rounds: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn sampling_sizes_and_determinism() {
        let all = sample_clients(7, 1.0, &mut derive_rng(1, 0, SERVER_CLIENT));
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        let ids = sample_clients(200, 0.05, &mut derive_rng(1, 3, SERVER_CLIENT));
        assert_eq!(ids.len(), 10);
        assert_eq!(ids.iter().collect::<HashSet<_>>().len(), 10);
        assert_eq!(ids, sample_clients(200, 0.05, &mut derive_rng(1, 3, SERVER_CLIENT)));
        assert_eq!(sample_clients(10, 0.01, &mut derive_rng(1, 3, 0)).len(), 1);
    }

    #[test]
    fn zero_params_evaluate_to_class_zero_frequency() {
        let spec = MlpSpec::new(vec![2, 3, 4]).unwrap();
        let labels = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let test = Dataset::new(Matrix::zeros(8, 2), labels, 4).unwrap();
        let p = ParamVector::zeros(spec.num_params());
        let (acc, loss) = evaluate(&p, &spec, &test).unwrap();
        assert_eq!(acc, 0.25);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert_eq!(evaluate(&p, &spec, &test).unwrap(), (acc, loss));
    }

    #[test]
    fn separable_single_sample() {
        let spec = MlpSpec::new(vec![1, 2]).unwrap();
        // logits = (x, -x)
        let p = vec![1.0, -1.0, 0.0, 0.0];
        let test = Dataset::new(Matrix::from_vec(1, 1, vec![2.0]).unwrap(), vec![0], 2).unwrap();
        assert_eq!(evaluate(&p, &spec, &test).unwrap().0, 1.0);
    }

    #[test]
    fn learning_rate_schedule() {
        let sim = Simulation::new(RunConfig {
            eta_l: 0.1,
            lr_decay: 0.998,
            ..small_cfg()
        })
        .unwrap();
        assert!((sim.eta_l_at(100) - 0.1 * 0.998f64.powf(100.0)).abs() < 1e-15);
        assert!((sim.eta_l_at(100) - 0.08186).abs() < 1e-5);
    }

    #[test]
    fn fedavg_one_round_is_one_sgd_step() {
        let cfg = RunConfig {
            algorithm: AlgorithmKind::FedAvg,
            num_clients: 1,
            participation_ratio: 1.0,
            batch_size: 1000,
            rounds: 1,
            eta_g: 1.0,
            weight_decay: 0.0,
            ..small_cfg()
        };
        let sim = Simulation::new(cfg.clone()).unwrap();
        let w0 = sim.server().global_params.clone();
        let batch = sim.train_set().as_batch();
        let (_, g, _) = loss_and_grad(&w0, sim.spec(), &batch).unwrap();
        let out = run_with(&cfg, RunOptions::default()).unwrap();
        for ((w1, w), gi) in out.final_params.iter().zip(w0.iter()).zip(g.iter()) {
            assert!((w1 - (w - cfg.eta_l * gi)).abs() < 1e-14);
        }
        assert_eq!(out.metrics[0].participants, 1);
        assert_eq!(out.metrics[0].mean_local_steps, 1.0);
    }

    #[test]
    fn thread_count_does_not_change_metrics() {
        let cfg = small_cfg();
        let one = run_with(&cfg, RunOptions { threads: Some(1), keep_trajectory: true }).unwrap();
        let four = run_with(&cfg, RunOptions { threads: Some(4), keep_trajectory: true }).unwrap();
        assert_eq!(one.metrics, four.metrics);
        assert_eq!(one.trajectory, four.trajectory);
        for m in &one.metrics {
            if let Some(dt) = m.d_t {
                assert!(dt >= 1.0 && dt <= m.participants as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn mismatched_model_rejected() {
        let cfg = RunConfig {
            layer_sizes: vec![5, 6, 3],
            ..small_cfg()
        };
        assert!(matches!(Simulation::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = RunConfig {
            algorithm: AlgorithmKind::FedAvg,
            eta_l: 1e200,
            eta_g: 1e200,
            spread: 50.0,
            rounds: 50,
            ..small_cfg()
        };
        assert!(matches!(run(&cfg), Err(Error::Divergence { .. })));
    }
}
