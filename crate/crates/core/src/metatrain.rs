//! Episodic meta-training of the inference network: query NLL after
//! rectification, differentiated through the unrolled solver, minimised with
//! Adam under a step learning-rate schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{evaluate, Method as EvalMethod, Protocol};
use crate::episodes::{episode_seed, random_rotation, sample_episode, Episode, FeatureDataset, Mode};
use crate::error::{Error, Result};
use crate::gradnet::{GradNetConfig, GradNetParams, PairInputs, SampleSet};
use crate::numerics::{Tape, Tensor};
use crate::odeflow::{rectify_tensor, Method, SolveConfig};
use crate::protoclassify::{classify_tensor, init_prototypes, nll_loss, DEFAULT_GAMMA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Episodes whose gradients are averaged per parameter update.
    pub batch_size: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub mode: Mode,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    /// Zero-based epochs at whose start the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub seed: u64,
    pub gamma: f64,
    pub solver: SolveConfig,
    /// Validation episodes per epoch when a validation split is supplied.
    pub val_episodes: usize,
    /// Apply a fresh random rotation to the features of every training
    /// episode, so the network cannot key on base-class directions.
    pub rotate_episodes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            episodes_per_epoch: 200,
            batch_size: 1,
            n_way: 5,
            k_shot: 1,
            m_query: 15,
            mode: Mode::Transductive,
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            lr_decay_factor: 0.1,
            lr_decay_epochs: vec![10, 15],
            seed: 0,
            gamma: DEFAULT_GAMMA,
            solver: SolveConfig { method: Method::Rk4, integral_time: 40.0, num_steps: 10, record_trajectory: false },
            val_episodes: 100,
            rotate_episodes: false,
        }
    }
}

impl TrainConfig {
    /// Training at desk scale: 20 epochs of 200 rotated episodes with five
    /// queries per class, a 4-step training solver, lr 1e-3 decayed once.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            m_query: 5,
            learning_rate: 1e-3,
            lr_decay_epochs: vec![13],
            solver: SolveConfig { method: Method::Rk4, integral_time: 40.0, num_steps: 4, record_trajectory: false },
            val_episodes: 0,
            rotate_episodes: true,
            ..Self::default()
        }
    }

    /// Long schedule: 50 epochs, lr 1e-4, weight
    /// decay 5e-4, decay by 0.1 at epochs 15, 30 and 40.
    pub fn full() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            lr_decay_factor: 0.1,
            lr_decay_epochs: vec![15, 30, 40],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.n_way == 0 || self.k_shot == 0 || self.m_query == 0 {
            return bad("n_way, k_shot and m_query must be >= 1");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        self.solver.validate()
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }
}

/// Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates dropped because of a non-finite gradient.
    pub skipped: usize,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self { m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, skipped: 0 }
    }
}

/// One bias-corrected Adam update with decoupled weight decay `lr * wd * theta`.
/// Returns `false`, leaving everything untouched, if any gradient is non-finite.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return Ok(false);
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((theta, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let update = (*m / c1) / ((*v / c2).sqrt() + state.eps);
        *theta -= lr * (update + weight_decay * *theta);
    }
    Ok(true)
}

/// Query NLL after rectification, built on `tape` with `net` as the weights.
pub fn episode_loss_tensor<'t>(
    tape: &'t Tape,
    net: &crate::gradnet::BoundGradNet<'t>,
    net_cfg: &GradNetConfig,
    ep: &Episode,
    solver: &SolveConfig,
    gamma: f64,
) -> Result<Tensor<'t>> {
    let samples = SampleSet::from_episode(ep, net_cfg.max_ways)?;
    let inputs = PairInputs::new(tape, &samples, ep.n_way(), net_cfg.max_ways)?;
    let p0 = tape.constant_matrix(&init_prototypes(ep)?.prototypes)?;
    let (p, _) = rectify_tensor(net, net_cfg, &inputs, p0, solver)?;
    let query = tape.constant_matrix(ep.query())?;
    nll_loss(classify_tensor(query, p, gamma)?, ep.query_labels())
}

/// Loss value and flattened parameter gradient (canonical block order).
pub fn episode_loss(
    params: &GradNetParams,
    net_cfg: &GradNetConfig,
    ep: &Episode,
    solver: &SolveConfig,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let net = params.bind(&tape)?;
    let loss = episode_loss_tensor(&tape, &net, net_cfg, ep, solver, gamma)?;
    let grads = tape.backward(loss)?;
    Ok((loss.item(), net.flat_gradient(&grads)))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_accuracy: Option<f64>,
    pub divergences: usize,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,mean_loss,val_accuracy,divergences";

    /// Missing validation accuracy is written as `nan`.
    pub fn to_csv(&self) -> String {
        let val = self.val_accuracy.map_or_else(|| "nan".to_string(), |a| a.to_string());
        format!("{},{},{},{},{}", self.epoch, self.lr, self.mean_loss, val, self.divergences)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GradNetParams,
    pub log: Vec<EpochRecord>,
    pub divergences: usize,
    pub skipped_updates: usize,
}

pub fn log_to_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from(EpochRecord::CSV_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Seed from which the initial network weights are drawn.
pub fn init_seed(seed: u64) -> u64 {
    episode_seed(seed, u64::MAX)
}

pub fn train(base: &FeatureDataset, val: Option<&FeatureDataset>, net_cfg: &GradNetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(base, val, net_cfg, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
///
/// Episode gradients within a batch may be computed in parallel; they are
/// summed in episode order, so results do not depend on the thread count.
pub fn train_with(
    base: &FeatureDataset,
    val: Option<&FeatureDataset>,
    net_cfg: &GradNetConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net_cfg.validate()?;
    if base.dim() != net_cfg.feature_dim {
        return Err(Error::Config(format!("data dimension {} but network expects {}", base.dim(), net_cfg.feature_dim)));
    }
    if cfg.n_way > net_cfg.max_ways {
        return Err(Error::Config(format!("n_way {} exceeds max_ways {}", cfg.n_way, net_cfg.max_ways)));
    }
    // Fail on capacity before spending any compute.
    sample_episode(base, cfg.n_way, cfg.k_shot, cfg.m_query, cfg.mode, 0)?;

    let mut params = GradNetParams::init(net_cfg, &mut ChaCha8Rng::seed_from_u64(init_seed(cfg.seed)))?;
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut total_divergences = 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        let mut divergences = 0usize;
        let first = (epoch * cfg.episodes_per_epoch) as u64;
        let indices: Vec<u64> = (0..cfg.episodes_per_epoch as u64).map(|i| first + i).collect();
        for batch in indices.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| {
                    let seed = episode_seed(cfg.seed, i);
                    let mut ep = sample_episode(base, cfg.n_way, cfg.k_shot, cfg.m_query, cfg.mode, seed)?;
                    if cfg.rotate_episodes {
                        let r = random_rotation(ep.dim(), episode_seed(seed, 0));
                        ep = ep.rotated(&r)?;
                    }
                    episode_loss(&params, net_cfg, &ep, &cfg.solver, cfg.gamma)
                })
                .collect();
            let mut grad = vec![0.0; flat.len()];
            let mut used = 0usize;
            for r in results {
                match r {
                    Ok((loss, g)) => {
                        loss_sum += loss;
                        counted += 1;
                        used += 1;
                        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    Err(Error::Divergence { .. } | Error::NonFinite { .. }) => divergences += 1,
                    Err(e) => return Err(e),
                }
            }
            if used == 0 {
                continue;
            }
            grad.iter_mut().for_each(|g| *g /= used as f64);
            if adam_step(&mut flat, &grad, &mut adam, lr, cfg.weight_decay)? {
                params.assign_flat(&flat)?;
            }
        }
        let val_accuracy = match val {
            Some(v) if cfg.val_episodes > 0 => {
                let protocol = Protocol {
                    n_way: cfg.n_way,
                    k_shot: cfg.k_shot,
                    m_query: cfg.m_query,
                    mode: cfg.mode,
                    episodes: cfg.val_episodes,
                    seed: episode_seed(cfg.seed ^ 0x5641_4c49_4441_5445, epoch as u64),
                    gamma: cfg.gamma,
                };
                let method = EvalMethod::MetaNode { params: &params, net: net_cfg, solver: &cfg.solver };
                Some(evaluate(v, &protocol, &method)?.mean_accuracy)
            }
            _ => None,
        };
        total_divergences += divergences;
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss: if counted > 0 { loss_sum / counted as f64 } else { f64::NAN },
            val_accuracy,
            divergences,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome { params, log, divergences: total_divergences, skipped_updates: adam.skipped })
}
