//! The frozen generative prior: a small velocity network `v(z_t, t; context)`
//! with one single-head cross-attention block, pretrained by flow matching on
//! clean toy images and then frozen.
//!
//! Layout, for a batch of `B` states:
//!
//! ```text
//! h   = relu([z, emb(t), 1] · W_in)
//! q   = h · W_q                  k, v = context · W_k, context · W_v
//! h   = layer_norm(h + softmax(q kᵀ / √A) v · W_o)
//! h   = relu([h, emb(t), 1] · W_i)     for each hidden layer
//! out = [h, 1] · W_out + ([emb(t), 1] · w_skip) · z
//! ```
//!
//! The scalar skip gain lets the network pass the state through at full
//! rank, which the narrow hidden layers cannot.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{hash_named, AdamConfig, Bindings, Graph, NamedTensors, NodeId, OptimizerState, Tensor};
use crate::prompts::Conditioner;
use crate::toyworld::{draw_image, ShapeClass};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub context_tokens: usize,
    pub context_dim: usize,
    pub attention_dim: usize,
    pub time_embed_dim: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: 256,
            hidden_dim: 128,
            hidden_layers: 2,
            context_tokens: 8,
            context_dim: 32,
            attention_dim: 64,
            time_embed_dim: 16,
            pretrain_steps: 5000,
            pretrain_batch: 32,
            pretrain_lr: 1e-3,
            seed: 17,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.hidden_dim,
            self.hidden_layers,
            self.context_tokens,
            self.context_dim,
            self.attention_dim,
            self.pretrain_batch,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid(format!("backbone dims must be >= 1: {self:?}")));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("time_embed_dim must be even and >= 2"));
        }
        if !(self.pretrain_lr > 0.0) {
            return Err(Error::invalid("pretrain_lr must be positive"));
        }
        Ok(())
    }

    fn side(&self) -> Result<usize> {
        let side = (self.input_dim as f64).sqrt().round() as usize;
        if side * side != self.input_dim {
            return Err(Error::invalid(format!(
                "input_dim {} is not a square image size",
                self.input_dim
            )));
        }
        Ok(side)
    }
}

pub const E_NULL: &str = "backbone.e_null";
const W_IN: &str = "backbone.in";
const W_Q: &str = "backbone.query";
const W_K: &str = "backbone.key";
const W_V: &str = "backbone.value";
const W_O: &str = "backbone.attn_out";
const W_OUT: &str = "backbone.out";
const W_SKIP: &str = "backbone.skip";

fn hidden_name(i: usize) -> String {
    format!("backbone.hidden.{i}")
}

/// Named weights plus a write lock. Once frozen, every write is refused and
/// the content hash recorded at freeze time can be re-verified.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    tensors: NamedTensors,
    frozen_hash: Option<u64>,
}

impl BackboneWeights {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> &NamedTensors {
        &self.tensors
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.frozen_hash.is_some() {
            return Err(Error::Frozen(name.to_string()));
        }
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no backbone weight `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_weight",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_hash.is_some()
    }

    pub fn frozen_hash(&self) -> Option<u64> {
        self.frozen_hash
    }

    pub fn hash(&self) -> u64 {
        hash_named(&self.tensors)
    }

    /// Rounds weights to `f32` precision (the on-disk precision), then locks
    /// them and records their hash.
    pub fn freeze(&mut self) -> u64 {
        if let Some(h) = self.frozen_hash {
            return h;
        }
        for t in self.tensors.values_mut() {
            *t = t.quantize_f32();
        }
        let h = self.hash();
        self.frozen_hash = Some(h);
        h
    }

    /// Confirms the weights still hash to the value recorded at freeze time.
    pub fn verify_frozen(&self) -> Result<u64> {
        let before = self
            .frozen_hash
            .ok_or_else(|| Error::invalid("backbone is not frozen"))?;
        let after = self.hash();
        if before != after {
            return Err(Error::HashMismatch { before, after });
        }
        Ok(after)
    }
}

/// Graph handles for the backbone weights.
pub struct WeightNodes {
    w_in: NodeId,
    query: NodeId,
    key: NodeId,
    value: NodeId,
    attn_out: NodeId,
    hidden: Vec<NodeId>,
    out: NodeId,
    skip: NodeId,
}

#[derive(Debug)]
pub struct Backbone {
    config: BackboneConfig,
    weights: BackboneWeights,
    evaluations: AtomicU64,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            weights: self.weights.clone(),
            evaluations: AtomicU64::new(0),
        }
    }
}

impl Backbone {
    /// Randomly initialized, unfrozen weights. `e_null` becomes part of the
    /// weights and is covered by the freeze hash.
    pub fn init(config: BackboneConfig, e_null: Tensor) -> Result<Self> {
        config.validate()?;
        if e_null.shape() != [config.context_tokens, config.context_dim] {
            return Err(Error::Shape {
                op: "backbone_init",
                lhs: vec![config.context_tokens, config.context_dim],
                rhs: e_null.shape().to_vec(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let BackboneConfig {
            input_dim: n,
            hidden_dim: h,
            attention_dim: a,
            context_dim: d,
            time_embed_dim: e,
            ..
        } = config;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let mut tensors = NamedTensors::new();
        tensors.insert(W_IN.into(), Tensor::randn(vec![n + e + 1, h], he(n + e + 1), &mut rng));
        tensors.insert(W_Q.into(), Tensor::randn(vec![h, a], (1.0 / h as f64).sqrt(), &mut rng));
        tensors.insert(W_K.into(), Tensor::randn(vec![d, a], (1.0 / d as f64).sqrt(), &mut rng));
        tensors.insert(W_V.into(), Tensor::randn(vec![d, a], (1.0 / d as f64).sqrt(), &mut rng));
        tensors.insert(W_O.into(), Tensor::randn(vec![a, h], (1.0 / a as f64).sqrt(), &mut rng));
        for i in 0..config.hidden_layers {
            tensors.insert(hidden_name(i), Tensor::randn(vec![h + e + 1, h], he(h + e + 1), &mut rng));
        }
        tensors.insert(W_OUT.into(), Tensor::randn(vec![h + 1, n], 0.1 * (1.0 / h as f64).sqrt(), &mut rng));
        tensors.insert(W_SKIP.into(), Tensor::zeros(vec![e + 1, 1]));
        tensors.insert(E_NULL.into(), e_null);
        Ok(Self {
            config,
            weights: BackboneWeights {
                tensors,
                frozen_hash: None,
            },
            evaluations: AtomicU64::new(0),
        })
    }

    /// Rebuilds a backbone from stored tensors. The caller supplies the hash
    /// recorded at freeze time; a mismatch is an error.
    pub fn from_frozen(config: BackboneConfig, tensors: NamedTensors, recorded_hash: u64) -> Result<Self> {
        config.validate()?;
        let e_null = tensors
            .get(E_NULL)
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing backbone e_null".into()))?;
        let reference = Self::init(config, e_null)?;
        for (name, t) in reference.weights.tensors() {
            match tensors.get(name) {
                Some(loaded) if loaded.shape() == t.shape() => {}
                Some(loaded) => {
                    return Err(Error::Checkpoint(format!(
                        "weight `{name}` has shape {:?}, config expects {:?}",
                        loaded.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing weight `{name}`"))),
            }
        }
        if tensors.len() != reference.weights.tensors.len() {
            return Err(Error::Checkpoint("unexpected extra backbone weights".into()));
        }
        let weights = BackboneWeights {
            tensors,
            frozen_hash: Some(recorded_hash),
        };
        weights.verify_frozen()?;
        Ok(Self {
            config,
            weights,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn weights(&self) -> &BackboneWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut BackboneWeights {
        &mut self.weights
    }

    pub fn e_null(&self) -> &Tensor {
        &self.weights.tensors[E_NULL]
    }

    pub fn context_shape(&self) -> [usize; 2] {
        [self.config.context_tokens, self.config.context_dim]
    }

    /// Number of `velocity` calls served so far, counted per call.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Declares the weights as graph inputs. Bind them with [`Backbone::bind`].
    pub fn declare(&self, g: &mut Graph, differentiable: bool) -> Result<WeightNodes> {
        let w = &self.weights.tensors;
        let mut decl = |name: &str| g.input(name, w[name].shape().to_vec(), differentiable);
        Ok(WeightNodes {
            w_in: decl(W_IN)?,
            query: decl(W_Q)?,
            key: decl(W_K)?,
            value: decl(W_V)?,
            attn_out: decl(W_O)?,
            hidden: (0..self.config.hidden_layers)
                .map(|i| decl(&hidden_name(i)))
                .collect::<Result<_>>()?,
            out: decl(W_OUT)?,
            skip: decl(W_SKIP)?,
        })
    }

    pub fn bind<'a>(&'a self, bindings: &mut Bindings<'a>) {
        for (name, t) in &self.weights.tensors {
            if name != E_NULL {
                bindings.bind(name.clone(), t);
            }
        }
    }

    /// Appends the velocity network. `z` is `B × n`, `times` holds one
    /// backbone time per row, `context` is `L × D`.
    pub fn build_velocity(
        &self,
        g: &mut Graph,
        w: &WeightNodes,
        z: NodeId,
        times: &[f64],
        context: NodeId,
    ) -> Result<NodeId> {
        let rows = g.shape(z)[0];
        if g.shape(z) != [rows, self.config.input_dim] || times.len() != rows {
            return Err(Error::Shape {
                op: "velocity",
                lhs: vec![times.len(), self.config.input_dim],
                rhs: g.shape(z).to_vec(),
            });
        }
        if g.shape(context) != self.context_shape() {
            return Err(Error::Shape {
                op: "velocity context",
                lhs: self.context_shape().to_vec(),
                rhs: g.shape(context).to_vec(),
            });
        }
        let temb = g.time_embedding(times, self.config.time_embed_dim)?;
        let ones = g.constant(Tensor::full(vec![rows, 1], 1.0));

        let x = g.concat(&[z, temb, ones], 1)?;
        let h = g.matmul(x, w.w_in)?;
        let h = g.relu(h)?;

        let q = g.matmul(h, w.query)?;
        let k = g.matmul(context, w.key)?;
        let v = g.matmul(context, w.value)?;
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, 1.0 / (self.config.attention_dim as f64).sqrt())?;
        let attn = g.softmax_rows(scores)?;
        let mixed = g.matmul(attn, v)?;
        let update = g.matmul(mixed, w.attn_out)?;
        let h = g.add(h, update)?;
        let mut h = g.layer_norm(h, 1e-5)?;

        for &wi in &w.hidden {
            let x = g.concat(&[h, temb, ones], 1)?;
            let pre = g.matmul(x, wi)?;
            h = g.relu(pre)?;
        }
        let x = g.concat(&[h, ones], 1)?;
        let out = g.matmul(x, w.out)?;

        let gate_in = g.concat(&[temb, ones], 1)?;
        let gain = g.matmul(gate_in, w.skip)?;
        let spread = g.constant(Tensor::full(vec![1, self.config.input_dim], 1.0));
        let gain = g.matmul(gain, spread)?;
        let skip = g.mul(gain, z)?;
        g.add(out, skip)
    }

    /// `v(z_t, t; context)`. Accepts a single state `[n]` or a batch `[B, n]`
    /// sharing one time and context; returns the same shape.
    pub fn velocity(&self, z_t: &Tensor, t: f64, context: &Tensor) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("velocity: t = {t} outside [0, 1]")));
        }
        if context.shape() != self.context_shape() {
            return Err(Error::Shape {
                op: "velocity context",
                lhs: self.context_shape().to_vec(),
                rhs: context.shape().to_vec(),
            });
        }
        let single = z_t.shape().len() == 1;
        let batch = if single {
            z_t.clone().reshape(vec![1, z_t.len()])?
        } else {
            z_t.clone()
        };
        let rows = batch.shape()[0];
        let mut g = Graph::new();
        let w = self.declare(&mut g, false)?;
        let z = g.constant(batch);
        let ctx = g.constant(context.clone());
        let out = self.build_velocity(&mut g, &w, z, &vec![t; rows], ctx)?;
        let mut bindings = Bindings::new();
        self.bind(&mut bindings);
        let v = g.forward(&bindings, out)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        if single {
            v.reshape(z_t.shape().to_vec())
        } else {
            Ok(v)
        }
    }

    /// `ẑ₀ = z_t − t·v(z_t, t; context)`
    pub fn clean_prediction(&self, z_t: &Tensor, t: f64, context: &Tensor) -> Result<Tensor> {
        let v = self.velocity(z_t, t, context)?;
        clean_from_velocity(z_t, t, &v)
    }
}

/// `z_t − t·v`, shared by every sampler.
pub fn clean_from_velocity(z_t: &Tensor, t: f64, v: &Tensor) -> Result<Tensor> {
    Tensor::lincomb(1.0, z_t, -t, v)
}

/// Pretraining result: the frozen backbone and one loss value per step.
pub struct Pretrained {
    pub backbone: Backbone,
    pub losses: Vec<f64>,
}

/// Flow-matching pretraining on clean toy images:
/// minimize `‖v((1 − t) z₀ + t ε, t; c) − (ε − z₀)‖²` with `t ~ U[0, 1]`.
/// Half of every batch sees the null context, the rest sees the encoded
/// class name, so the cross-attention pathway carries information.
pub fn pretrain(config: BackboneConfig, conditioner: &Conditioner) -> Result<Pretrained> {
    config.validate()?;
    let side = config.side()?;
    if conditioner.context_shape() != [config.context_tokens, config.context_dim] {
        return Err(Error::invalid("conditioner context shape does not match backbone config"));
    }
    let e_null = conditioner.null_context()?;
    let class_contexts: Vec<Tensor> = ShapeClass::ALL
        .iter()
        .map(|c| conditioner.encode_text(c.token()))
        .collect::<Result<_>>()?;

    let mut backbone = Backbone::init(config, e_null.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5_5A5A);
    let mut opt = OptimizerState::new(AdamConfig::default().with_learning_rate(config.pretrain_lr))?;
    let mut params: NamedTensors = backbone
        .weights
        .tensors
        .iter()
        .filter(|(name, _)| name.as_str() != E_NULL)
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();

    let n = config.input_dim;
    let batch = config.pretrain_batch;
    let mut losses = Vec::with_capacity(config.pretrain_steps);
    for step in 0..config.pretrain_steps {
        // Group rows by context: index 0 = null, 1.. = classes.
        let mut groups: Vec<Vec<(Tensor, Tensor, f64)>> = vec![Vec::new(); 1 + ShapeClass::ALL.len()];
        for _ in 0..batch {
            let class_idx = rng.random_range(0..ShapeClass::ALL.len());
            let clean = draw_image(side, ShapeClass::ALL[class_idx], &mut rng);
            let t: f64 = rng.random_range(0.0..=1.0);
            let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let noise = Tensor::new(vec![n], noise)?;
            let group = if rng.random_bool(0.5) { 0 } else { 1 + class_idx };
            let state = Tensor::lincomb(1.0 - t, &clean, t, &noise)?;
            let target = noise.sub(&clean)?;
            groups[group].push((state, target, t));
        }

        let mut g = Graph::new();
        let w = backbone.declare(&mut g, true)?;
        let mut total: Option<NodeId> = None;
        for (gi, rows) in groups.iter().enumerate().filter(|(_, r)| !r.is_empty()) {
            let ctx = if gi == 0 { &e_null } else { &class_contexts[gi - 1] };
            let states: Vec<&Tensor> = rows.iter().map(|r| &r.0).collect();
            let targets: Vec<&Tensor> = rows.iter().map(|r| &r.1).collect();
            let times: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let z = g.constant(Tensor::stack_rows(&states)?);
            let target = g.constant(Tensor::stack_rows(&targets)?);
            let ctx = g.constant(ctx.clone());
            let v = backbone.build_velocity(&mut g, &w, z, &times, ctx)?;
            let mse = g.mse(v, target)?;
            let weighted = g.scale(mse, rows.len() as f64 / batch as f64)?;
            total = Some(match total {
                None => weighted,
                Some(acc) => g.add(acc, weighted)?,
            });
        }
        let total = total.expect("batch is non-empty");
        let mut bindings = Bindings::new();
        bindings.bind_all(&params);
        let loss = match g.forward(&bindings, total) {
            Ok(l) => l.data()[0],
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { iteration: step }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: step });
        }
        losses.push(loss);
        let grads = g.backward(&Tensor::scalar(1.0)?)?;
        opt.step(&mut params, &grads)
            .map_err(|_| Error::Diverged { iteration: step })?;
    }

    for (name, t) in params {
        backbone.weights.set(&name, t)?;
    }
    backbone.weights.freeze();
    Ok(Pretrained { backbone, losses })
}
