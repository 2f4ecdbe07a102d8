//! Fixed-step Euler and RK4 solvers for the prototype ODE, and the
//! rectification map `p(0) -> p(M)` driven by the inference network.
//!
//! The same solver runs on tape tensors (training: gradients flow through the
//! unrolled steps) and on plain matrices (inference: each field evaluation
//! gets its own short-lived tape, so memory does not grow with step count).

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::gradnet::{gradnet_forward, BoundGradNet, GradNetConfig, GradNetParams, PairInputs, SampleSet};
use crate::numerics::{Matrix, Tape, Tensor};
use crate::protoclassify::{init_prototypes, PrototypeState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    #[default]
    Rk4,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Self::Euler),
            "rk4" => Ok(Self::Rk4),
            other => Err(Error::Config(format!("unknown solver method '{other}' (expected euler or rk4)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub method: Method,
    /// Terminal time `M`.
    pub integral_time: f64,
    pub num_steps: usize,
    pub record_trajectory: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self { method: Method::Rk4, integral_time: 40.0, num_steps: 40, record_trajectory: false }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be >= 1".into()));
        }
        if !(self.integral_time > 0.0 && self.integral_time.is_finite()) {
            return Err(Error::Config("integral_time must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.integral_time / self.num_steps as f64
    }

    /// Time of the `i`-th grid point.
    pub fn time_at(&self, i: usize) -> f64 {
        if i == self.num_steps {
            self.integral_time
        } else {
            self.integral_time * i as f64 / self.num_steps as f64
        }
    }
}

/// Recorded states, `num_steps + 1` of them including both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Matrix>,
}

impl Trajectory {
    /// CSV with a `t,k,v0,...` header and one line per (time, prototype).
    pub fn to_csv(&self) -> String {
        let d = self.states.first().map_or(0, |m| m.cols());
        let mut out = String::from("t,k");
        for j in 0..d {
            write!(out, ",v{j}").unwrap();
        }
        out.push('\n');
        for (t, state) in self.times.iter().zip(&self.states) {
            for (k, row) in state.iter_rows().enumerate() {
                write!(out, "{t},{k}").unwrap();
                for v in row {
                    write!(out, ",{v}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }
}

/// What the solver needs from a state: `self + a * x`, and a value snapshot.
pub trait OdeState: Sized + Clone {
    fn axpy(&self, a: f64, x: &Self) -> Result<Self>;
    fn snapshot(&self) -> Matrix;
}

impl OdeState for Matrix {
    fn axpy(&self, a: f64, x: &Self) -> Result<Self> {
        if (self.rows(), self.cols()) != (x.rows(), x.cols()) {
            return Err(Error::Dimension { op: "ode step", detail: "field output shape differs from state".into() });
        }
        let data = self.as_slice().iter().zip(x.as_slice()).map(|(s, v)| s + a * v).collect();
        let out = Matrix::new(self.rows(), self.cols(), data)?;
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "ode step" });
        }
        Ok(out)
    }

    fn snapshot(&self) -> Matrix {
        self.clone()
    }
}

impl OdeState for Tensor<'_> {
    fn axpy(&self, a: f64, x: &Self) -> Result<Self> {
        self.add(x.scale(a)?)
    }

    fn snapshot(&self) -> Matrix {
        self.to_matrix()
    }
}

fn step<S: OdeState>(field: &mut impl FnMut(&S, f64) -> Result<S>, method: Method, p: &S, t: f64, h: f64) -> Result<S> {
    match method {
        Method::Euler => p.axpy(h, &field(p, t)?),
        Method::Rk4 => {
            let half = 0.5 * h;
            let k1 = field(p, t)?;
            let k2 = field(&p.axpy(half, &k1)?, t + half)?;
            let k3 = field(&p.axpy(half, &k2)?, t + half)?;
            let k4 = field(&p.axpy(h, &k3)?, t + h)?;
            let sum = k1.axpy(2.0, &k2)?.axpy(2.0, &k3)?.axpy(1.0, &k4)?;
            p.axpy(h / 6.0, &sum)
        }
    }
}

/// Integrates `dp/dt = field(p, t)` from `t = 0` to `t = M`.
///
/// A non-finite value anywhere in step `i` (including inside the field) is
/// reported as `Divergence { step: i }`.
pub fn solve<S: OdeState>(
    mut field: impl FnMut(&S, f64) -> Result<S>,
    p0: &S,
    cfg: &SolveConfig,
) -> Result<(S, Option<Trajectory>)> {
    cfg.validate()?;
    let h = cfg.step_size();
    let mut traj = cfg.record_trajectory.then(|| Trajectory {
        times: vec![0.0],
        states: vec![p0.snapshot()],
    });
    let mut p = p0.clone();
    for i in 0..cfg.num_steps {
        p = step(&mut field, cfg.method, &p, cfg.time_at(i), h).map_err(|e| match e {
            Error::NonFinite { .. } | Error::Divergence { .. } => Error::Divergence { step: i },
            other => other,
        })?;
        if let Some(tr) = traj.as_mut() {
            tr.times.push(cfg.time_at(i + 1));
            tr.states.push(p.snapshot());
        }
    }
    Ok((p, traj))
}

/// Solves the prototype ODE on `tape` so that the result stays differentiable
/// with respect to the network parameters and `p0`.
pub fn rectify_tensor<'t>(
    net: &BoundGradNet<'t>,
    net_cfg: &GradNetConfig,
    inputs: &PairInputs<'t>,
    p0: Tensor<'t>,
    solve_cfg: &SolveConfig,
) -> Result<(Tensor<'t>, Option<Trajectory>)> {
    solve(|p: &Tensor<'t>, t| gradnet_forward(net, net_cfg, inputs, *p, t), &p0, solve_cfg)
}

/// Mean prototypes of `ep`, moved to time `M` along the learned field. The
/// adaptation set follows `ep.mode`.
pub fn rectify(
    params: &GradNetParams,
    net_cfg: &GradNetConfig,
    ep: &Episode,
    solve_cfg: &SolveConfig,
) -> Result<(PrototypeState, Option<Trajectory>)> {
    let p0 = init_prototypes(ep)?;
    let samples = SampleSet::from_episode(ep, net_cfg.max_ways)?;
    let n_way = ep.n_way();
    let field = |p: &Matrix, t: f64| -> Result<Matrix> {
        let tape = Tape::new();
        let net = params.bind(&tape)?;
        let inputs = PairInputs::new(&tape, &samples, n_way, net_cfg.max_ways)?;
        let p = tape.constant_matrix(p)?;
        Ok(gradnet_forward(&net, net_cfg, &inputs, p, t)?.to_matrix())
    };
    let (p, traj) = solve(field, &p0.prototypes, solve_cfg)?;
    Ok((PrototypeState::new(p, solve_cfg.integral_time), traj))
}
