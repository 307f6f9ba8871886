//! Training-state constructions.
//!
//! Every construction emits a state of the flow-matching form
//! `(1 − σ)·signal + σ·ε`, where `σ` is the time fed to the frozen backbone:
//!
//! * naive: signal `z_deg`, `σ = t`, `t ∈ [0, 1]`
//! * DDBM (Brownian bridge, reparameterized): signal `a_t z_deg + b_t z_clean`,
//!   `σ = s_t / (1 + s_t)`, `t ∈ [0, 1]`
//! * EBR: signal `(1 − t/T0) z_clean + (t/T0) z_deg`, `σ = t`, `t ∈ [0, T0]`

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn check_unit(t: f64, hi: f64, what: &str) -> Result<()> {
    if !(0.0..=hi).contains(&t) || !t.is_finite() {
        return Err(Error::invalid(format!("{what}: t = {t} outside [0, {hi}]")));
    }
    Ok(())
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `(1 − t)·z_deg + t·ε`
pub fn naive_state(z_deg: &Tensor, t: f64, noise: &Tensor) -> Result<Tensor> {
    check_unit(t, 1.0, "naive_state")?;
    check_same("naive_state", z_deg, noise)?;
    Tensor::lincomb(1.0 - t, z_deg, t, noise)
}

/// Flow-form noise coefficient `σ = s / (1 + s)`, chosen so `(1 − σ)·s = σ`.
pub fn ddbm_sigma(s: f64) -> Result<f64> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::invalid(format!("ddbm_sigma: s = {s} must be finite and >= 0")));
    }
    Ok(s / (1.0 + s))
}

/// Brownian-bridge coefficients `a_t = t`, `b_t = 1 − t`,
/// `s_t = η·sqrt(t(1 − t))`; pinned at both ends, widest at `t = 1/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdbmSchedule {
    pub eta: f64,
}

impl Default for DdbmSchedule {
    fn default() -> Self {
        Self { eta: 1.0 }
    }
}

impl DdbmSchedule {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::invalid(format!("ddbm eta must be positive, got {eta}")));
        }
        Ok(Self { eta })
    }

    /// Weight on the degraded endpoint.
    pub fn a(&self, t: f64) -> f64 {
        t
    }

    /// Weight on the clean endpoint.
    pub fn b(&self, t: f64) -> f64 {
        1.0 - t
    }

    pub fn s(&self, t: f64) -> f64 {
        self.eta * (t * (1.0 - t)).max(0.0).sqrt()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        let s = self.s(t);
        s / (1.0 + s)
    }
}

/// Reparameterized bridge state `(1 − σ_t)(a_t z_deg + b_t z_clean) + σ_t ε`
/// and its noise coefficient `σ_t`.
pub fn ddbm_state(
    z_clean: &Tensor,
    z_deg: &Tensor,
    t: f64,
    noise: &Tensor,
    schedule: &DdbmSchedule,
) -> Result<(Tensor, f64)> {
    check_unit(t, 1.0, "ddbm_state")?;
    check_same("ddbm_state", z_clean, z_deg)?;
    check_same("ddbm_state", z_clean, noise)?;
    let sigma = ddbm_sigma(schedule.s(t))?;
    let signal = Tensor::lincomb(schedule.a(t), z_deg, schedule.b(t), z_clean)?;
    Ok((Tensor::lincomb(1.0 - sigma, &signal, sigma, noise)?, sigma))
}

/// Monotone noisy-degraded → clean bridge with horizon `T0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EbrSchedule {
    pub t0: f64,
}

impl Default for EbrSchedule {
    fn default() -> Self {
        Self { t0: 0.4 }
    }
}

impl EbrSchedule {
    pub fn new(t0: f64) -> Result<Self> {
        if !(t0 > 0.0 && t0 <= 1.0) {
            return Err(Error::invalid(format!("T0 must lie in (0, 1], got {t0}")));
        }
        Ok(Self { t0 })
    }

    /// Mixing weight on the degraded endpoint, `t / T0`.
    pub fn lambda(&self, t: f64) -> f64 {
        t / self.t0
    }

    /// Noise coefficient, which is simply `t`.
    pub fn noise_scale(&self, t: f64) -> f64 {
        t
    }
}

/// `(1 − t)·[(1 − t/T0)·z_clean + (t/T0)·z_deg] + t·ε` for `t ∈ [0, T0]`.
pub fn ebr_state(
    z_clean: &Tensor,
    z_deg: &Tensor,
    t: f64,
    noise: &Tensor,
    schedule: &EbrSchedule,
) -> Result<Tensor> {
    check_unit(t, schedule.t0, "ebr_state")?;
    check_same("ebr_state", z_clean, z_deg)?;
    check_same("ebr_state", z_clean, noise)?;
    let lambda = schedule.lambda(t);
    let signal = Tensor::lincomb(1.0 - lambda, z_clean, lambda, z_deg)?;
    Tensor::lincomb(1.0 - t, &signal, t, noise)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrajectoryKind {
    Naive,
    Ddbm,
    Ebr,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 3] = [TrajectoryKind::Naive, TrajectoryKind::Ddbm, TrajectoryKind::Ebr];

    pub fn label(self) -> &'static str {
        match self {
            TrajectoryKind::Naive => "naive",
            TrajectoryKind::Ddbm => "ddbm",
            TrajectoryKind::Ebr => "ebr",
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

impl FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(TrajectoryKind::Naive),
            "ddbm" => Ok(TrajectoryKind::Ddbm),
            "ebr" => Ok(TrajectoryKind::Ebr),
            other => Err(Error::invalid(format!(
                "unknown trajectory `{other}` (expected naive, ddbm or ebr)"
            ))),
        }
    }
}

/// A state construction with its schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trajectory {
    Naive,
    Ddbm(DdbmSchedule),
    Ebr(EbrSchedule),
}

/// A state split into its flow-form parts.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowForm {
    pub signal: Tensor,
    pub sigma: f64,
}

impl Trajectory {
    pub fn from_kind(kind: TrajectoryKind, t0: f64, eta: f64) -> Result<Self> {
        Ok(match kind {
            TrajectoryKind::Naive => Trajectory::Naive,
            TrajectoryKind::Ddbm => Trajectory::Ddbm(DdbmSchedule::new(eta)?),
            TrajectoryKind::Ebr => Trajectory::Ebr(EbrSchedule::new(t0)?),
        })
    }

    pub fn kind(&self) -> TrajectoryKind {
        match self {
            Trajectory::Naive => TrajectoryKind::Naive,
            Trajectory::Ddbm(_) => TrajectoryKind::Ddbm,
            Trajectory::Ebr(_) => TrajectoryKind::Ebr,
        }
    }

    /// Upper end of the valid time range.
    pub fn max_time(&self) -> f64 {
        match self {
            Trajectory::Naive | Trajectory::Ddbm(_) => 1.0,
            Trajectory::Ebr(s) => s.t0,
        }
    }

    /// Time fed to the backbone at trajectory time `t`.
    pub fn backbone_time(&self, t: f64) -> f64 {
        match self {
            Trajectory::Naive | Trajectory::Ebr(_) => t,
            Trajectory::Ddbm(s) => s.sigma(t),
        }
    }

    /// Uniform draw over the valid time range.
    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.random_range(0.0..=self.max_time())
    }

    /// Signal component and noise coefficient at time `t`.
    pub fn flow_form(&self, z_clean: &Tensor, z_deg: &Tensor, t: f64) -> Result<FlowForm> {
        check_unit(t, self.max_time(), "flow_form")?;
        check_same("flow_form", z_clean, z_deg)?;
        Ok(match self {
            Trajectory::Naive => FlowForm {
                signal: z_deg.clone(),
                sigma: t,
            },
            Trajectory::Ddbm(s) => FlowForm {
                signal: Tensor::lincomb(s.a(t), z_deg, s.b(t), z_clean)?,
                sigma: ddbm_sigma(s.s(t))?,
            },
            Trajectory::Ebr(s) => FlowForm {
                signal: Tensor::lincomb(1.0 - s.lambda(t), z_clean, s.lambda(t), z_deg)?,
                sigma: t,
            },
        })
    }

    /// Training state at time `t` and the backbone time to pair it with.
    pub fn state(&self, z_clean: &Tensor, z_deg: &Tensor, t: f64, noise: &Tensor) -> Result<(Tensor, f64)> {
        match self {
            Trajectory::Naive => Ok((naive_state(z_deg, t, noise)?, t)),
            Trajectory::Ddbm(s) => ddbm_state(z_clean, z_deg, t, noise, s),
            Trajectory::Ebr(s) => Ok((ebr_state(z_clean, z_deg, t, noise, s)?, t)),
        }
    }
}
