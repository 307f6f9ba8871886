//! Deterministic reverse samplers, one per trajectory.
//!
//! * naive: Euler integration of `dx/dt = v` from pure noise at `t = 1`.
//! * EBR and DDBM: implied-noise re-bridging. At each grid time the clean
//!   endpoint is predicted, the noise that would explain the current state
//!   is recovered, and the next state is rebuilt on the same bridge:
//!
//! ```text
//! ẑ  = x − σ_t·v(x, σ_t; c)
//! ε̂  = (x − (1 − σ_t)·signal_t(ẑ, z_deg)) / σ_t
//! x' = (1 − σ_t')·signal_t'(ẑ, z_deg) + σ_t'·ε̂
//! ```
//!
//! This update is one faithful realization of a DDIM-like bridge sampler.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{clean_from_velocity, Backbone};
use crate::bridges::{Trajectory, TrajectoryKind};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// First grid time for the DDBM sampler. `σ(1) = 0`, so the exact endpoint
/// carries no noise to recover.
pub const DDBM_START: f64 = 0.98;

/// A velocity oracle `v(x, t)`. `t` is the time passed to the backbone.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;

    /// Backbone evaluations spent so far.
    fn evaluations(&self) -> u64;
}

/// The frozen backbone under one context, or the running average over
/// several contexts.
pub struct Conditioned<'a> {
    backbone: &'a Backbone,
    contexts: Vec<Tensor>,
    calls: Cell<u64>,
}

impl<'a> Conditioned<'a> {
    pub fn new(backbone: &'a Backbone, contexts: Vec<Tensor>) -> Result<Self> {
        if contexts.is_empty() {
            return Err(Error::invalid("velocity mixing needs at least one context"));
        }
        let shape = backbone.context_shape();
        if let Some(bad) = contexts.iter().find(|c| c.shape() != shape) {
            return Err(Error::Shape {
                op: "mix_velocities",
                lhs: shape.to_vec(),
                rhs: bad.shape().to_vec(),
            });
        }
        Ok(Self {
            backbone,
            contexts,
            calls: Cell::new(0),
        })
    }

    pub fn single(backbone: &'a Backbone, context: Tensor) -> Result<Self> {
        Self::new(backbone, vec![context])
    }

    pub fn contexts(&self) -> &[Tensor] {
        &self.contexts
    }
}

impl VelocityField for Conditioned<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mut velocities = Vec::with_capacity(self.contexts.len());
        for c in &self.contexts {
            velocities.push(self.backbone.velocity(x, t, c)?);
            self.calls.set(self.calls.get() + 1);
        }
        average(&velocities)
    }

    fn evaluations(&self) -> u64 {
        self.calls.get()
    }
}

/// `(1/K)·Σ v_k` as a running mean in list order. Entries already equal to
/// the running mean are skipped, so `K` identical inputs return the first
/// one bitwise.
pub fn average(velocities: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = velocities
        .split_first()
        .ok_or_else(|| Error::invalid("cannot average an empty velocity list"))?;
    let mut mean = first.data().to_vec();
    for (k, v) in rest.iter().enumerate() {
        if v.shape() != first.shape() {
            return Err(Error::Shape {
                op: "average",
                lhs: first.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let count = (k + 2) as f64;
        for (m, &x) in mean.iter_mut().zip(v.data()) {
            if x != *m {
                *m += (x - *m) / count;
            }
        }
    }
    Tensor::new(first.shape().to_vec(), mean)
}

/// `(1/K)·Σ_k v(x, t; c_k)` for the given contexts.
pub fn mix_velocities(contexts: &[Tensor], backbone: &Backbone, x: &Tensor, t: f64) -> Result<Tensor> {
    Conditioned::new(backbone, contexts.to_vec())?.velocity(x, t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub trajectory: Trajectory,
    pub steps: usize,
    pub seed: u64,
    grid: Option<Vec<f64>>,
}

impl SamplerConfig {
    pub fn new(trajectory: Trajectory, steps: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("sampler needs at least one step"));
        }
        Ok(Self {
            trajectory,
            steps,
            seed,
            grid: None,
        })
    }

    pub fn from_kind(kind: TrajectoryKind, t0: f64, eta: f64, steps: usize, seed: u64) -> Result<Self> {
        Self::new(Trajectory::from_kind(kind, t0, eta)?, steps, seed)
    }

    /// Replaces the uniform grid. The grid must be strictly decreasing, start
    /// at [`SamplerConfig::start_time`] and end at 0.
    pub fn with_grid(mut self, grid: Vec<f64>) -> Result<Self> {
        let start = self.start_time();
        let ok = grid.len() >= 2
            && grid[0] == start
            && *grid.last().expect("len >= 2") == 0.0
            && grid.windows(2).all(|w| w[0] > w[1]);
        if !ok {
            return Err(Error::invalid(format!(
                "time grid must decrease strictly from {start} to 0"
            )));
        }
        self.steps = grid.len() - 1;
        self.grid = Some(grid);
        Ok(self)
    }

    pub fn start_time(&self) -> f64 {
        match self.trajectory {
            Trajectory::Naive => 1.0,
            Trajectory::Ebr(s) => s.t0,
            Trajectory::Ddbm(_) => DDBM_START,
        }
    }

    /// Decreasing times `t_N, …, t_0 = 0`.
    pub fn grid(&self) -> Vec<f64> {
        if let Some(g) = &self.grid {
            return g.clone();
        }
        let start = self.start_time();
        let n = self.steps;
        (0..=n).rev().map(|i| start * (i as f64 / n as f64)).collect()
    }
}

/// One visited state: trajectory time, backbone time, state.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub time: f64,
    pub model_time: f64,
    pub state: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Restoration {
    pub output: Tensor,
    pub trace: Vec<TraceStep>,
    pub nfe: u64,
}

fn start_noise(config: &SamplerConfig, dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Tensor::randn(vec![dim], 1.0, &mut rng)
}

/// Euler integration from `t_N = 1` along the grid.
pub fn restore_naive(z_deg: &Tensor, field: &dyn VelocityField, config: &SamplerConfig) -> Result<Restoration> {
    if config.trajectory != Trajectory::Naive {
        return Err(Error::invalid("restore_naive needs the naive trajectory"));
    }
    let grid = config.grid();
    let eps = start_noise(config, z_deg.len());
    let mut x = crate::bridges::naive_state(z_deg, grid[0], &eps)?;
    let before = field.evaluations();
    let mut trace = Vec::with_capacity(config.steps);
    for w in grid.windows(2) {
        let (t, next) = (w[0], w[1]);
        trace.push(TraceStep {
            time: t,
            model_time: t,
            state: x.clone(),
        });
        let v = field.velocity(&x, t)?;
        x = Tensor::lincomb(1.0, &x, -(t - next), &v)?;
    }
    Ok(Restoration {
        output: x,
        trace,
        nfe: field.evaluations() - before,
    })
}

/// The start state of a bridge sampler: the flow form at the first grid time
/// with `z_deg` standing in for the unknown clean endpoint.
fn bridge_start(z_deg: &Tensor, config: &SamplerConfig, t: f64) -> Result<Tensor> {
    let eps = start_noise(config, z_deg.len());
    let form = config.trajectory.flow_form(z_deg, z_deg, t)?;
    Tensor::lincomb(1.0 - form.sigma, &form.signal, form.sigma, &eps)
}

fn restore_bridge(z_deg: &Tensor, field: &dyn VelocityField, config: &SamplerConfig) -> Result<Restoration> {
    let trajectory = &config.trajectory;
    let grid = config.grid();
    let mut x = bridge_start(z_deg, config, grid[0])?;
    let before = field.evaluations();
    let mut trace = Vec::with_capacity(config.steps);
    let mut prediction = None;
    for w in grid.windows(2) {
        let (t, next) = (w[0], w[1]);
        let sigma = trajectory.backbone_time(t);
        if sigma <= 0.0 {
            return Err(Error::invalid(format!(
                "bridge sampler reached zero noise at interior time {t}"
            )));
        }
        trace.push(TraceStep {
            time: t,
            model_time: sigma,
            state: x.clone(),
        });
        let v = field.velocity(&x, sigma)?;
        let z_hat = clean_from_velocity(&x, sigma, &v)?;
        if next == 0.0 {
            x = z_hat.clone();
        } else {
            let here = trajectory.flow_form(&z_hat, z_deg, t)?;
            let implied = Tensor::lincomb(1.0, &x, -(1.0 - here.sigma), &here.signal)?.scale(1.0 / here.sigma)?;
            let there = trajectory.flow_form(&z_hat, z_deg, next)?;
            x = Tensor::lincomb(1.0 - there.sigma, &there.signal, there.sigma, &implied)?;
        }
        prediction = Some(z_hat);
    }
    Ok(Restoration {
        output: prediction.expect("grid has at least one step"),
        trace,
        nfe: field.evaluations() - before,
    })
}

/// Implied-noise re-bridging on the EBR trajectory from `(1 − T0)·z_deg + T0·ε`.
pub fn restore_ebr(z_deg: &Tensor, field: &dyn VelocityField, config: &SamplerConfig) -> Result<Restoration> {
    if !matches!(config.trajectory, Trajectory::Ebr(_)) {
        return Err(Error::invalid("restore_ebr needs the EBR trajectory"));
    }
    restore_bridge(z_deg, field, config)
}

/// Implied-noise re-bridging on the Brownian bridge from [`DDBM_START`].
pub fn restore_ddbm(z_deg: &Tensor, field: &dyn VelocityField, config: &SamplerConfig) -> Result<Restoration> {
    if !matches!(config.trajectory, Trajectory::Ddbm(_)) {
        return Err(Error::invalid("restore_ddbm needs the DDBM trajectory"));
    }
    restore_bridge(z_deg, field, config)
}

/// Dispatches on the configured trajectory.
pub fn restore(z_deg: &Tensor, field: &dyn VelocityField, config: &SamplerConfig) -> Result<Restoration> {
    match config.trajectory {
        Trajectory::Naive => restore_naive(z_deg, field, config),
        Trajectory::Ebr(_) => restore_ebr(z_deg, field, config),
        Trajectory::Ddbm(_) => restore_ddbm(z_deg, field, config),
    }
}
