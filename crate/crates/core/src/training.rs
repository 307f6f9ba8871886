//! Prompt optimization against the frozen backbone.
//!
//! All three objectives share one loss: build a state on the chosen
//! trajectory, predict the clean endpoint with `ẑ₀ = z − σ·v(z, σ; c)`, and
//! penalize `‖ẑ₀ − z_clean‖²`. They differ only in which states they visit.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::Backbone;
use crate::bridges::{Trajectory, TrajectoryKind};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Bindings, Graph, NamedTensors, OptimizerState, Tensor};
use crate::prompts::{encode, Conditioner, Prompt, PromptBank, VariantTag};
use crate::toyworld::{DegradationKind, PairedSample};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub trajectory: TrajectoryKind,
    pub variant: VariantTag,
    pub degradation: DegradationKind,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub t0: f64,
    /// Brownian-bridge noise scale for the DDBM trajectory.
    pub eta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectoryKind::Ebr,
            variant: VariantTag::Embedding,
            degradation: DegradationKind::Veil,
            iterations: 1000,
            batch_size: 2,
            learning_rate: 5e-4,
            t0: 0.4,
            eta: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.variant == VariantTag::Text {
            return Err(Error::invalid("text prompts are fixed; choose a trainable variant"));
        }
        self.trajectory()?;
        Ok(())
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        Trajectory::from_kind(self.trajectory, self.t0, self.eta)
    }
}

/// Per-sample randomness for one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingDraw {
    pub t: f64,
    pub noise: Tensor,
}

impl TrainingDraw {
    pub fn sample<R: Rng + ?Sized>(trajectory: &Trajectory, dim: usize, rng: &mut R) -> Self {
        let t = trajectory.sample_time(rng);
        let noise: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            t,
            noise: Tensor::from_parts(vec![dim], noise),
        }
    }
}

fn check_batch(batch: &[&PairedSample], draws: &[TrainingDraw]) -> Result<()> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty training batch"))?;
    if batch.iter().any(|s| s.kind() != first.kind()) {
        return Err(Error::invalid("batch mixes degradation kinds"));
    }
    if draws.len() != batch.len() {
        return Err(Error::invalid(format!(
            "{} draws for a batch of {}",
            draws.len(),
            batch.len()
        )));
    }
    Ok(())
}

/// Loss value and gradients with respect to the prompt's trainable tensors.
#[derive(Clone, Debug)]
pub struct LossAndGradients {
    pub loss: f64,
    pub gradients: NamedTensors,
}

fn evaluate(
    trajectory: &Trajectory,
    batch: &[&PairedSample],
    draws: &[TrainingDraw],
    prompt: &Prompt,
    backbone: &Backbone,
    conditioner: &Conditioner,
    with_gradients: bool,
) -> Result<LossAndGradients> {
    check_batch(batch, draws)?;
    let n = backbone.config().input_dim;
    let mut states = Vec::with_capacity(batch.len());
    let mut times = Vec::with_capacity(batch.len());
    for (sample, draw) in batch.iter().zip(draws) {
        let (state, time) = trajectory.state(&sample.clean, &sample.degraded, draw.t, &draw.noise)?;
        states.push(state);
        times.push(time);
    }
    let state_refs: Vec<&Tensor> = states.iter().collect();
    let clean_refs: Vec<&Tensor> = batch.iter().map(|s| &s.clean).collect();
    let z = Tensor::stack_rows(&state_refs)?;
    let target = Tensor::stack_rows(&clean_refs)?;
    if z.cols() != n {
        return Err(Error::Shape {
            op: "prompt_loss",
            lhs: vec![batch.len(), n],
            rhs: z.shape().to_vec(),
        });
    }
    let time_scale: Vec<f64> = times.iter().flat_map(|&t| std::iter::repeat_n(t, n)).collect();

    let mut g = Graph::new();
    let w = backbone.declare(&mut g, false)?;
    let ctx = prompt.build_context(&mut g, conditioner, backbone.e_null(), with_gradients)?;
    let z_node = g.constant(z);
    let v = backbone.build_velocity(&mut g, &w, z_node, &times, ctx)?;
    let scale = g.constant(Tensor::new(vec![batch.len(), n], time_scale)?);
    let step = g.mul(scale, v)?;
    let prediction = g.sub(z_node, step)?;
    let target = g.constant(target);
    let mse = g.mse(prediction, target)?;
    let loss = g.scale(mse, n as f64)?;

    let mut bindings = Bindings::new();
    backbone.bind(&mut bindings);
    prompt.bind(&mut bindings);
    let value = g.forward(&bindings, loss)?.data()[0];
    let gradients = if with_gradients {
        g.backward(&Tensor::scalar(1.0)?)?
    } else {
        NamedTensors::new()
    };
    Ok(LossAndGradients { loss: value, gradients })
}

/// Mean over the batch of `‖ẑ₀(state, time; c) − z_clean‖²`.
pub fn prompt_loss(
    trajectory: &Trajectory,
    batch: &[&PairedSample],
    draws: &[TrainingDraw],
    prompt: &Prompt,
    backbone: &Backbone,
    conditioner: &Conditioner,
) -> Result<f64> {
    Ok(evaluate(trajectory, batch, draws, prompt, backbone, conditioner, false)?.loss)
}

/// [`prompt_loss`] plus its gradient with respect to the prompt parameters.
pub fn prompt_loss_with_gradients(
    trajectory: &Trajectory,
    batch: &[&PairedSample],
    draws: &[TrainingDraw],
    prompt: &Prompt,
    backbone: &Backbone,
    conditioner: &Conditioner,
) -> Result<LossAndGradients> {
    if prompt.tag() == VariantTag::Text {
        return Err(Error::invalid("text prompts have no gradients"));
    }
    evaluate(trajectory, batch, draws, prompt, backbone, conditioner, true)
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub loss_curve: Vec<f64>,
    pub prompt: Prompt,
    pub wall_time: Duration,
    pub backbone_hash_before: u64,
    pub backbone_hash_after: u64,
    pub encoder_hash_before: u64,
    pub encoder_hash_after: u64,
    /// For residual prompts: whether the untrained prompt reproduced the
    /// null context bitwise. `None` for other variants.
    pub gate_zero_neutral: Option<bool>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss_curve[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_curve.last().expect("iterations >= 1")
    }

    /// Mean of the last `window` losses, a less noisy end-of-run figure.
    pub fn tail_mean(&self, window: usize) -> f64 {
        let w = window.clamp(1, self.loss_curve.len());
        let tail = &self.loss_curve[self.loss_curve.len() - w..];
        tail.iter().sum::<f64>() / w as f64
    }

    pub fn frozen_contract_held(&self) -> bool {
        self.backbone_hash_before == self.backbone_hash_after
            && self.encoder_hash_before == self.encoder_hash_after
    }
}

/// Optimizes a fresh prompt for `config.degradation` on `train_set`, stores
/// it in `bank`, and verifies the backbone and encoder were left untouched.
pub fn train_prompt(
    config: &TrainConfig,
    train_set: &[PairedSample],
    bank: &mut PromptBank,
    backbone: &Backbone,
    conditioner: &Conditioner,
) -> Result<TrainReport> {
    config.validate()?;
    let backbone_hash_before = backbone.weights().verify_frozen()?;
    let encoder_hash_before = conditioner.hash();
    let pool: Vec<&PairedSample> = train_set
        .iter()
        .filter(|s| s.kind() == config.degradation)
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid(format!(
            "training set has no `{}` samples",
            config.degradation
        )));
    }
    let trajectory = config.trajectory()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let e_null = backbone.e_null();
    let mut prompt = Prompt::initial(config.variant, config.degradation, conditioner, e_null, &mut rng)?;
    let gate_zero_neutral = (config.variant == VariantTag::Residual)
        .then(|| encode(&prompt, conditioner, e_null).map(|c| c.bitwise_eq(e_null)))
        .transpose()?;

    let mut params = prompt.trainable_parameters()?;
    let mut opt = OptimizerState::new(AdamConfig::default().with_learning_rate(config.learning_rate))?;
    let dim = backbone.config().input_dim;
    let mut loss_curve = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let batch: Vec<&PairedSample> = (0..config.batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let draws: Vec<TrainingDraw> = (0..config.batch_size)
            .map(|_| TrainingDraw::sample(&trajectory, dim, &mut rng))
            .collect();
        let step = match prompt_loss_with_gradients(&trajectory, &batch, &draws, &prompt, backbone, conditioner) {
            Ok(s) if s.loss.is_finite() => s,
            Ok(_) | Err(Error::NonFinite(_)) => return Err(Error::Diverged { iteration }),
            Err(e) => return Err(e),
        };
        loss_curve.push(step.loss);
        opt.step(&mut params, &step.gradients)
            .map_err(|_| Error::Diverged { iteration })?;
        prompt.set_parameters(&params)?;
    }

    let backbone_hash_after = backbone.weights().hash();
    if backbone_hash_after != backbone_hash_before {
        return Err(Error::HashMismatch {
            before: backbone_hash_before,
            after: backbone_hash_after,
        });
    }
    let encoder_hash_after = conditioner.hash();
    if encoder_hash_after != encoder_hash_before {
        return Err(Error::HashMismatch {
            before: encoder_hash_before,
            after: encoder_hash_after,
        });
    }
    let prompt = prompt.quantized();
    bank.insert(prompt.clone());
    Ok(TrainReport {
        config: *config,
        loss_curve,
        prompt,
        wall_time: started.elapsed(),
        backbone_hash_before,
        backbone_hash_after,
        encoder_hash_before,
        encoder_hash_after,
        gate_zero_neutral,
    })
}
