//! Evaluation protocol and diagnostics: accuracy with a normal-approximation
//! 95% interval, prototype-bias and gradient-bias similarities, and accuracy
//! as a function of integral time.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episodes::{episode_seed, sample_episode, Episode, FeatureDataset, Mode};
use crate::error::{Error, Result};
use crate::gradnet::{gradnet_field, GradNetConfig, GradNetParams};
use crate::numerics::{cosine, Matrix};
use crate::odeflow::{rectify, SolveConfig, Trajectory};
use crate::protoclassify::{averaged_gradient, classify, gda_optimize, init_prototypes, mean_loss, real_prototypes, PrototypeState, DEFAULT_GAMMA};

/// Which episodes to draw and how to score them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub mode: Mode,
    pub episodes: usize,
    pub seed: u64,
    pub gamma: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self { n_way: 5, k_shot: 1, m_query: 15, mode: Mode::Transductive, episodes: 600, seed: 0, gamma: DEFAULT_GAMMA }
    }
}

impl Protocol {
    /// The `i`-th episode; the same index always yields the same episode.
    pub fn episode(&self, ds: &FeatureDataset, i: usize) -> Result<Episode> {
        sample_episode(ds, self.n_way, self.k_shot, self.m_query, self.mode, episode_seed(self.seed, i as u64))
    }

    fn check(&self, ds: &FeatureDataset) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("at least one episode is required".into()));
        }
        self.episode(ds, 0).map(|_| ())
    }
}

/// How the final prototypes are produced.
#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    /// Support means, unchanged.
    Mean,
    /// Gradient descent on the support loss.
    Gda { eta: f64, steps: usize },
    /// Mean prototypes rectified by the learned flow.
    MetaNode { params: &'a GradNetParams, net: &'a GradNetConfig, solver: &'a SolveConfig },
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Mean => "mean",
            Method::Gda { .. } => "gda",
            Method::MetaNode { .. } => "metanode",
        }
    }

    pub fn prototypes(&self, ep: &Episode, gamma: f64) -> Result<PrototypeState> {
        match *self {
            Method::Mean => init_prototypes(ep),
            Method::Gda { eta, steps } => {
                let p0 = init_prototypes(ep)?;
                gda_optimize(&p0, ep.support(), ep.support_labels(), eta, steps, gamma)
            }
            Method::MetaNode { params, net, solver } => Ok(rectify(params, net, ep, solver)?.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub num_episodes: usize,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub per_episode_accuracies: Vec<f64>,
    /// Mean query NLL under the final prototypes.
    pub mean_loss: f64,
}

impl EvalReport {
    pub fn from_episodes(method: &str, accuracies: Vec<f64>, losses: &[f64]) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::EmptySet { what: "evaluation episodes" });
        }
        let (mean, ci) = mean_and_ci95(&accuracies);
        Ok(Self {
            method: method.to_string(),
            num_episodes: accuracies.len(),
            mean_accuracy: mean,
            ci95_halfwidth: ci,
            per_episode_accuracies: accuracies,
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
        })
    }

    /// `episode,accuracy` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,accuracy\n");
        for (i, a) in self.per_episode_accuracies.iter().enumerate() {
            writeln!(out, "{i},{a}").unwrap();
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "method: {}\nepisodes: {}\naccuracy: {:.2}% +- {:.2}%\nmean query loss: {:.4}\n",
            self.method,
            self.num_episodes,
            100.0 * self.mean_accuracy,
            100.0 * self.ci95_halfwidth,
            self.mean_loss
        )
    }
}

/// Mean and `1.96 * sd / sqrt(n)` with the sample (n - 1) standard deviation.
/// The half-width is 0 for a single value.
pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Fraction of rows whose arg-max column equals the label.
pub fn accuracy(probabilities: &Matrix, labels: &[usize]) -> f64 {
    let hits = probabilities
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
            best.0 == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Evaluates with an arbitrary prototype builder. Episodes run in parallel;
/// results are collected in episode order.
pub fn evaluate_with(
    ds: &FeatureDataset,
    protocol: &Protocol,
    name: &str,
    build: impl Fn(&Episode) -> Result<PrototypeState> + Sync,
) -> Result<EvalReport> {
    if protocol.m_query == 0 {
        return Err(Error::Config("m_query must be >= 1 for evaluation".into()));
    }
    protocol.check(ds)?;
    let scored: Vec<(f64, f64)> = (0..protocol.episodes)
        .into_par_iter()
        .map(|i| {
            let ep = protocol.episode(ds, i)?;
            let p = build(&ep)?;
            let probs = classify(ep.query(), &p, protocol.gamma)?;
            let loss = mean_loss(ep.query(), ep.query_labels(), &p, protocol.gamma)?;
            Ok((accuracy(&probs, ep.query_labels()), loss))
        })
        .collect::<Result<_>>()?;
    let (acc, losses): (Vec<f64>, Vec<f64>) = scored.into_iter().unzip();
    EvalReport::from_episodes(name, acc, &losses)
}

pub fn evaluate(ds: &FeatureDataset, protocol: &Protocol, method: &Method<'_>) -> Result<EvalReport> {
    evaluate_with(ds, protocol, method.name(), |ep| method.prototypes(ep, protocol.gamma))
}

/// Mean cosine similarity of initial and of rectified prototypes to the
/// real (support plus query) class means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBias {
    pub sim_initial: f64,
    pub sim_optimal: f64,
    pub episodes: usize,
}

fn row_cosines(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    a.iter_rows()
        .zip(b.iter_rows())
        .map(|(x, y)| cosine(x, y).ok_or(Error::DegenerateVector { what: "prototype" }))
        .collect()
}

pub fn prototype_bias(ds: &FeatureDataset, protocol: &Protocol, method: &Method<'_>) -> Result<PrototypeBias> {
    protocol.check(ds)?;
    let per_episode: Vec<(f64, f64)> = (0..protocol.episodes)
        .into_par_iter()
        .map(|i| {
            let ep = protocol.episode(ds, i)?;
            let real = real_prototypes(&ep)?;
            let p0 = init_prototypes(&ep)?;
            let pm = method.prototypes(&ep, protocol.gamma)?;
            let c0 = row_cosines(&p0.prototypes, &real.prototypes)?;
            let cm = row_cosines(&pm.prototypes, &real.prototypes)?;
            let n = c0.len() as f64;
            Ok((c0.iter().sum::<f64>() / n, cm.iter().sum::<f64>() / n))
        })
        .collect::<Result<_>>()?;
    let n = per_episode.len() as f64;
    Ok(PrototypeBias {
        sim_initial: per_episode.iter().map(|p| p.0).sum::<f64>() / n,
        sim_optimal: per_episode.iter().map(|p| p.1).sum::<f64>() / n,
        episodes: per_episode.len(),
    })
}

/// Similarity of the support-averaged gradient and of the inferred flow to
/// the gradient computed from all labelled samples, at the mean prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientBias {
    pub sim_averaged: f64,
    /// `None` when no network was supplied.
    pub sim_inferred: Option<f64>,
    pub episodes: usize,
    /// Episodes dropped because one of the gradients was exactly zero.
    pub excluded: usize,
}

fn flat_cosine(a: &Matrix, b: &Matrix) -> Option<f64> {
    cosine(a.as_slice(), b.as_slice())
}

/// All support and query rows of an episode with their labels.
pub fn labelled_samples(ep: &Episode) -> Result<(Matrix, Vec<usize>)> {
    let mut data = ep.support().as_slice().to_vec();
    data.extend_from_slice(ep.query().as_slice());
    let mut labels = ep.support_labels().to_vec();
    labels.extend_from_slice(ep.query_labels());
    Ok((Matrix::new(labels.len(), ep.dim(), data)?, labels))
}

/// Cosines at `p(0)`; the flow `dp/dt` is a descent direction, so it is
/// compared with the negated real gradient.
pub fn gradient_bias(
    ds: &FeatureDataset,
    protocol: &Protocol,
    network: Option<(&GradNetParams, &GradNetConfig)>,
) -> Result<GradientBias> {
    protocol.check(ds)?;
    let per_episode: Vec<Option<(f64, Option<f64>)>> = (0..protocol.episodes)
        .into_par_iter()
        .map(|i| {
            let ep = protocol.episode(ds, i)?;
            let p0 = init_prototypes(&ep)?;
            let (all, labels) = labelled_samples(&ep)?;
            let real = averaged_gradient(&p0, &all, &labels, protocol.gamma)?;
            let avg = averaged_gradient(&p0, ep.support(), ep.support_labels(), protocol.gamma)?;
            let Some(sim_avg) = flat_cosine(&avg, &real) else {
                return Ok(None);
            };
            let sim_inf = match network {
                None => None,
                Some((params, cfg)) => {
                    let flow = gradnet_field(params, cfg, &ep, &p0.prototypes, 0.0)?;
                    let neg_real = Matrix::new(real.rows(), real.cols(), real.as_slice().iter().map(|v| -v).collect())?;
                    match flat_cosine(&flow, &neg_real) {
                        Some(c) => Some(c),
                        None => return Ok(None),
                    }
                }
            };
            Ok(Some((sim_avg, sim_inf)))
        })
        .collect::<Result<_>>()?;
    let used: Vec<(f64, Option<f64>)> = per_episode.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::EmptySet { what: "episodes with non-zero gradients" });
    }
    let n = used.len() as f64;
    Ok(GradientBias {
        sim_averaged: used.iter().map(|u| u.0).sum::<f64>() / n,
        sim_inferred: network.map(|_| used.iter().map(|u| u.1.unwrap()).sum::<f64>() / n),
        episodes: used.len(),
        excluded: per_episode.len() - used.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub time: f64,
    pub num_steps: usize,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub mean_loss: f64,
}

/// Solver settings for integral time `t`, keeping the step size of `base`.
pub fn solver_for_time(base: &SolveConfig, t: f64) -> SolveConfig {
    let h = base.step_size();
    SolveConfig {
        integral_time: t,
        num_steps: ((t / h).round() as usize).max(1),
        ..base.clone()
    }
}

/// Accuracy and loss at each integral time. Every time point sees the same
/// episodes.
pub fn convergence_curve(
    ds: &FeatureDataset,
    protocol: &Protocol,
    params: &GradNetParams,
    net: &GradNetConfig,
    solver: &SolveConfig,
    times: &[f64],
) -> Result<Vec<ConvergencePoint>> {
    if times.is_empty() {
        return Err(Error::Config("no integral times given".into()));
    }
    if times.iter().any(|t| !(*t > 0.0)) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("integral times must be positive and increasing".into()));
    }
    times
        .iter()
        .map(|&t| {
            let s = solver_for_time(solver, t);
            let report = evaluate(ds, protocol, &Method::MetaNode { params, net, solver: &s })?;
            Ok(ConvergencePoint {
                time: t,
                num_steps: s.num_steps,
                mean_accuracy: report.mean_accuracy,
                ci95_halfwidth: report.ci95_halfwidth,
                mean_loss: report.mean_loss,
            })
        })
        .collect()
}

pub fn convergence_csv(points: &[ConvergencePoint]) -> String {
    let mut out = String::from("time,num_steps,accuracy,ci95,loss\n");
    for p in points {
        writeln!(out, "{},{},{},{},{}", p.time, p.num_steps, p.mean_accuracy, p.ci95_halfwidth, p.mean_loss).unwrap();
    }
    out
}

/// Recorded prototype path for episode `index` of the protocol.
pub fn trajectory(
    ds: &FeatureDataset,
    protocol: &Protocol,
    index: usize,
    params: &GradNetParams,
    net: &GradNetConfig,
    solver: &SolveConfig,
) -> Result<Trajectory> {
    let ep = protocol.episode(ds, index)?;
    let s = SolveConfig { record_trajectory: true, ..solver.clone() };
    let (_, traj) = rectify(params, net, &ep, &s)?;
    Ok(traj.expect("recording was requested"))
}
