//! Conditioning pathways into the frozen backbone.
//!
//! A toy tokenizer and frozen text encoder stand in for a real language
//! stack. Prompts reach the backbone's cross-attention context in one of four
//! ways: a fixed symbolic text prompt, optimized token embeddings fed through
//! the encoder, a directly optimized context matrix, or a gated low-rank
//! residual on top of the null context.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{hash_named, Bindings, Graph, NamedTensors, NodeId, Tensor};
use crate::toyworld::DegradationKind;

/// The 64-symbol vocabulary. Index 0 is the padding symbol.
pub const VOCAB: [&str; 64] = [
    "<pad>", "REMOVE", "HAZE", "VEIL", "FOG", "RAIN", "STRIPE", "STRIPES", "NOISE", "BLUR", "SHARPEN",
    "DARK", "LOW", "LIGHT", "BRIGHTEN", "GAMMA", "RESTORE", "CLEAN", "CLEAR", "IMAGE", "PHOTO", "MAKE",
    "THE", "THIS", "AND", "FROM", "A", "OF", "TO", "IT", "DISK", "BAR", "CROSS", "CIRCLE", "LINE",
    "SHAPE", "HIGH", "QUALITY", "SHARP", "DETAIL", "CONTRAST", "ENHANCE", "FIX", "DENOISE", "DEBLUR",
    "DEHAZE", "DERAIN", "LOWLIGHT", "NATURAL", "SCENE", "BACKGROUND", "FOREGROUND", "BLACK", "WHITE",
    "GRAY", "SMOOTH", "EDGE", "CENTER", "SMALL", "LARGE", "BRIGHT", "DIM", "SOFT", "HARD",
];

pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConditionerConfig {
    /// Context length `L`.
    pub tokens: usize,
    /// Token-embedding width `D_in`.
    pub token_dim: usize,
    /// Context width `D`.
    pub context_dim: usize,
    pub encoder_hidden: usize,
    pub seed: u64,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            token_dim: 16,
            context_dim: 32,
            encoder_hidden: 32,
            seed: 0x7e57,
        }
    }
}

/// Symbol lookup plus a frozen embedding table and positional table.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    table: Tensor,
    positions: Tensor,
}

impl Tokenizer {
    pub fn token_ids(&self, text: &str) -> Result<Vec<usize>> {
        let len = self.positions.shape()[0];
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(|word| {
                let upper = word.to_ascii_uppercase();
                VOCAB
                    .iter()
                    .position(|v| *v == upper)
                    .ok_or(Error::UnknownToken(word.to_string()))
            })
            .collect::<Result<_>>()?;
        if ids.len() > len {
            return Err(Error::invalid(format!(
                "prompt has {} tokens but context length is {len}",
                ids.len()
            )));
        }
        Ok(ids.into_iter().chain(std::iter::repeat(PAD)).take(len).collect())
    }

    /// Token embeddings `τ(c)`, an `L × D_in` matrix.
    pub fn embed(&self, text: &str) -> Result<Tensor> {
        let ids = self.token_ids(text)?;
        self.embed_ids(&ids)
    }

    pub fn embed_ids(&self, ids: &[usize]) -> Result<Tensor> {
        let (len, dim) = (self.positions.shape()[0], self.positions.shape()[1]);
        if ids.len() != len || ids.iter().any(|&i| i >= VOCAB.len()) {
            return Err(Error::invalid(format!("bad token id list {ids:?}")));
        }
        let mut data = Vec::with_capacity(len * dim);
        for (pos, &id) in ids.iter().enumerate() {
            data.extend(
                self.table
                    .row(id)
                    .iter()
                    .zip(self.positions.row(pos))
                    .map(|(a, b)| a + b),
            );
        }
        Tensor::new(vec![len, dim], data)
    }
}

/// Frozen two-layer MLP applied to each token row, `(L × D_in) → (L × D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    hidden: Tensor,
    output: Tensor,
}

impl TextEncoder {
    fn build(&self, g: &mut Graph, tokens: NodeId) -> Result<NodeId> {
        let rows = g.shape(tokens)[0];
        let ones = g.constant(Tensor::full(vec![rows, 1], 1.0));
        let x = g.concat(&[tokens, ones], 1)?;
        let w1 = g.constant(self.hidden.clone());
        let h = g.matmul(x, w1)?;
        let h = g.relu(h)?;
        let h = g.concat(&[h, ones], 1)?;
        let w2 = g.constant(self.output.clone());
        g.matmul(h, w2)
    }
}

/// Tokenizer and text encoder together; both frozen at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioner {
    config: ConditionerConfig,
    tokenizer: Tokenizer,
    encoder: TextEncoder,
}

impl Conditioner {
    pub fn new(config: ConditionerConfig) -> Result<Self> {
        let ConditionerConfig {
            tokens,
            token_dim,
            context_dim,
            encoder_hidden,
            seed,
        } = config;
        if tokens == 0 || token_dim == 0 || context_dim == 0 || encoder_hidden == 0 {
            return Err(Error::invalid(format!("conditioner dims must be >= 1: {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Stored at f32 precision so a checkpoint round trip is exact.
        let table = Tensor::randn(vec![VOCAB.len(), token_dim], 1.0, &mut rng).quantize_f32();
        let positions = Tensor::randn(vec![tokens, token_dim], 0.5, &mut rng).quantize_f32();
        let hidden = Tensor::randn(
            vec![token_dim + 1, encoder_hidden],
            (2.0 / (token_dim + 1) as f64).sqrt(),
            &mut rng,
        )
        .quantize_f32();
        let output = Tensor::randn(
            vec![encoder_hidden + 1, context_dim],
            (1.0 / (encoder_hidden + 1) as f64).sqrt(),
            &mut rng,
        )
        .quantize_f32();
        Ok(Self {
            config,
            tokenizer: Tokenizer { table, positions },
            encoder: TextEncoder { hidden, output },
        })
    }

    pub fn config(&self) -> &ConditionerConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn context_shape(&self) -> [usize; 2] {
        [self.config.tokens, self.config.context_dim]
    }

    pub fn token_shape(&self) -> [usize; 2] {
        [self.config.tokens, self.config.token_dim]
    }

    /// Appends the encoder to `g`, reading tokens from `tokens`.
    pub fn build_encoder(&self, g: &mut Graph, tokens: NodeId) -> Result<NodeId> {
        if g.shape(tokens) != self.token_shape() {
            return Err(Error::Shape {
                op: "text_encoder",
                lhs: self.token_shape().to_vec(),
                rhs: g.shape(tokens).to_vec(),
            });
        }
        self.encoder.build(g, tokens)
    }

    /// `TE(U)` for a token-embedding matrix.
    pub fn encode_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let u = g.constant(tokens.clone());
        if g.shape(u) != self.token_shape() {
            return Err(Error::Shape {
                op: "text_encoder",
                lhs: self.token_shape().to_vec(),
                rhs: tokens.shape().to_vec(),
            });
        }
        let out = self.encoder.build(&mut g, u)?;
        g.forward(&Bindings::new(), out)
    }

    /// `TE(τ(c))`
    pub fn encode_text(&self, text: &str) -> Result<Tensor> {
        self.encode_tokens(&self.tokenizer.embed(text)?)
    }

    /// The null-text context `TE(τ(""))`.
    pub fn null_context(&self) -> Result<Tensor> {
        self.encode_text("")
    }

    pub fn tensors(&self) -> NamedTensors {
        NamedTensors::from([
            ("conditioner.table".to_string(), self.tokenizer.table.clone()),
            ("conditioner.positions".to_string(), self.tokenizer.positions.clone()),
            ("conditioner.hidden".to_string(), self.encoder.hidden.clone()),
            ("conditioner.output".to_string(), self.encoder.output.clone()),
        ])
    }

    pub fn from_tensors(tensors: &NamedTensors, seed: u64) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let table = get("conditioner.table")?;
        let positions = get("conditioner.positions")?;
        let hidden = get("conditioner.hidden")?;
        let output = get("conditioner.output")?;
        let config = ConditionerConfig {
            tokens: positions.shape()[0],
            token_dim: positions.shape()[1],
            context_dim: output.cols(),
            encoder_hidden: hidden.cols(),
            seed,
        };
        let consistent = table.shape() == [VOCAB.len(), config.token_dim]
            && hidden.shape() == [config.token_dim + 1, config.encoder_hidden]
            && output.shape() == [config.encoder_hidden + 1, config.context_dim];
        if !consistent {
            return Err(Error::Checkpoint("conditioner tensors have inconsistent shapes".into()));
        }
        Ok(Self {
            config,
            tokenizer: Tokenizer { table, positions },
            encoder: TextEncoder { hidden, output },
        })
    }

    pub fn hash(&self) -> u64 {
        hash_named(&self.tensors())
    }
}

/// Which conditioning pathway a prompt uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantTag {
    Text,
    TokenSpace,
    Embedding,
    Residual,
}

impl VariantTag {
    pub fn label(self) -> &'static str {
        match self {
            VariantTag::Text => "text",
            VariantTag::TokenSpace => "token",
            VariantTag::Embedding => "embedding",
            VariantTag::Residual => "residual",
        }
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

impl FromStr for VariantTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" => Ok(VariantTag::Text),
            "token" | "token-space" | "tokens" => Ok(VariantTag::TokenSpace),
            "embedding" | "embedding-space" => Ok(VariantTag::Embedding),
            "residual" => Ok(VariantTag::Residual),
            other => Err(Error::invalid(format!(
                "unknown prompt variant `{other}` (expected text, token, embedding or residual)"
            ))),
        }
    }
}

pub const RESIDUAL_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum PromptVariant {
    /// Fixed symbolic prompt, encoded as `TE(τ(c))`.
    Text(String),
    /// Token embeddings `U` (`L × D_in`) fed through the frozen encoder.
    TokenSpace(Tensor),
    /// Context matrix `p` (`L × D`) used as-is.
    Embedding(Tensor),
    /// `e_null + g ⊙ (A·B)` with `A: L × ρ`, `B: ρ × D` and per-token gates
    /// `g` stored as an `L × 1` column.
    Residual { left: Tensor, right: Tensor, gate: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub kind: DegradationKind,
    pub variant: PromptVariant,
}

const P_TOKENS: &str = "prompt.tokens";
const P_CONTEXT: &str = "prompt.context";
const P_LEFT: &str = "prompt.left";
const P_RIGHT: &str = "prompt.right";
const P_GATE: &str = "prompt.gate";

impl Prompt {
    pub fn text(kind: DegradationKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            variant: PromptVariant::Text(text.into()),
        }
    }

    /// Starting point for optimization. Every trainable variant starts at
    /// the null context: token-space from the all-padding tokens, embedding
    /// space from `e_null` itself, and the residual with its gates at zero.
    pub fn initial<R: Rng + ?Sized>(
        tag: VariantTag,
        kind: DegradationKind,
        conditioner: &Conditioner,
        e_null: &Tensor,
        rng: &mut R,
    ) -> Result<Self> {
        let [len, dim] = conditioner.context_shape();
        let variant = match tag {
            VariantTag::Text => {
                return Err(Error::invalid("text prompts have no initial state to optimize"))
            }
            VariantTag::TokenSpace => PromptVariant::TokenSpace(conditioner.tokenizer.embed("")?),
            VariantTag::Embedding => PromptVariant::Embedding(e_null.clone()),
            VariantTag::Residual => PromptVariant::Residual {
                left: Tensor::randn(vec![len, RESIDUAL_RANK], 0.5, rng),
                right: Tensor::randn(vec![RESIDUAL_RANK, dim], 0.5, rng),
                gate: Tensor::zeros(vec![len, 1]),
            },
        };
        Ok(Self { kind, variant })
    }

    pub fn tag(&self) -> VariantTag {
        match self.variant {
            PromptVariant::Text(_) => VariantTag::Text,
            PromptVariant::TokenSpace(_) => VariantTag::TokenSpace,
            PromptVariant::Embedding(_) => VariantTag::Embedding,
            PromptVariant::Residual { .. } => VariantTag::Residual,
        }
    }

    /// Exactly the tensors an optimizer may update.
    pub fn trainable_parameters(&self) -> Result<NamedTensors> {
        let mut out = NamedTensors::new();
        match &self.variant {
            PromptVariant::Text(_) => {
                return Err(Error::invalid("text prompts have no trainable parameters"))
            }
            PromptVariant::TokenSpace(u) => {
                out.insert(P_TOKENS.into(), u.clone());
            }
            PromptVariant::Embedding(p) => {
                out.insert(P_CONTEXT.into(), p.clone());
            }
            PromptVariant::Residual { left, right, gate } => {
                out.insert(P_LEFT.into(), left.clone());
                out.insert(P_RIGHT.into(), right.clone());
                out.insert(P_GATE.into(), gate.clone());
            }
        }
        Ok(out)
    }

    /// The prompt with every trainable value rounded to `f32`, the precision
    /// it has once stored.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        match &mut out.variant {
            PromptVariant::Text(_) => {}
            PromptVariant::TokenSpace(t) | PromptVariant::Embedding(t) => *t = t.quantize_f32(),
            PromptVariant::Residual { left, right, gate } => {
                *left = left.quantize_f32();
                *right = right.quantize_f32();
                *gate = gate.quantize_f32();
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_parameters()
            .map(|p| p.values().map(Tensor::len).sum())
            .unwrap_or(0)
    }

    /// Replaces the trainable tensors; names and shapes must match.
    pub fn set_parameters(&mut self, params: &NamedTensors) -> Result<()> {
        let current = self.trainable_parameters()?;
        if current.len() != params.len() {
            return Err(Error::invalid("parameter set does not match prompt variant"));
        }
        for (name, t) in &current {
            let new = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing prompt parameter `{name}`")))?;
            if new.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "set_parameters",
                    lhs: t.shape().to_vec(),
                    rhs: new.shape().to_vec(),
                });
            }
        }
        match &mut self.variant {
            PromptVariant::Text(_) => unreachable!("rejected by trainable_parameters"),
            PromptVariant::TokenSpace(u) => *u = params[P_TOKENS].clone(),
            PromptVariant::Embedding(p) => *p = params[P_CONTEXT].clone(),
            PromptVariant::Residual { left, right, gate } => {
                *left = params[P_LEFT].clone();
                *right = params[P_RIGHT].clone();
                *gate = params[P_GATE].clone();
            }
        }
        Ok(())
    }

    /// Appends the pathway from prompt parameters to an `L × D` context node.
    /// Parameters become graph inputs named as in [`Prompt::trainable_parameters`];
    /// bind them with [`Prompt::bind`].
    pub fn build_context(
        &self,
        g: &mut Graph,
        conditioner: &Conditioner,
        e_null: &Tensor,
        differentiable: bool,
    ) -> Result<NodeId> {
        let [len, dim] = conditioner.context_shape();
        let node = match &self.variant {
            PromptVariant::Text(text) => {
                let y = g.constant(conditioner.tokenizer.embed(text)?);
                conditioner.build_encoder(g, y)?
            }
            PromptVariant::TokenSpace(u) => {
                let u = g.input(P_TOKENS, u.shape().to_vec(), differentiable)?;
                conditioner.build_encoder(g, u)?
            }
            PromptVariant::Embedding(p) => g.input(P_CONTEXT, p.shape().to_vec(), differentiable)?,
            PromptVariant::Residual { left, right, gate } => {
                let a = g.input(P_LEFT, left.shape().to_vec(), differentiable)?;
                let b = g.input(P_RIGHT, right.shape().to_vec(), differentiable)?;
                let gate = g.input(P_GATE, gate.shape().to_vec(), differentiable)?;
                let r = g.matmul(a, b)?;
                let ones = g.constant(Tensor::full(vec![1, dim], 1.0));
                let gates = g.matmul(gate, ones)?;
                let gated = g.mul(gates, r)?;
                let null = g.constant(e_null.clone());
                g.add(null, gated)?
            }
        };
        if g.shape(node) != [len, dim] {
            return Err(Error::Shape {
                op: "prompt_context",
                lhs: vec![len, dim],
                rhs: g.shape(node).to_vec(),
            });
        }
        Ok(node)
    }

    pub fn bind<'a>(&'a self, bindings: &mut Bindings<'a>) {
        match &self.variant {
            PromptVariant::Text(_) => {}
            PromptVariant::TokenSpace(u) => {
                bindings.bind(P_TOKENS, u);
            }
            PromptVariant::Embedding(p) => {
                bindings.bind(P_CONTEXT, p);
            }
            PromptVariant::Residual { left, right, gate } => {
                bindings.bind(P_LEFT, left).bind(P_RIGHT, right).bind(P_GATE, gate);
            }
        }
    }
}

/// The context matrix a prompt feeds to the backbone.
pub fn encode(prompt: &Prompt, conditioner: &Conditioner, e_null: &Tensor) -> Result<Tensor> {
    if e_null.shape() != conditioner.context_shape() {
        return Err(Error::Shape {
            op: "encode",
            lhs: conditioner.context_shape().to_vec(),
            rhs: e_null.shape().to_vec(),
        });
    }
    if let PromptVariant::Embedding(p) = &prompt.variant {
        if p.shape() != conditioner.context_shape() {
            return Err(Error::Shape {
                op: "encode",
                lhs: conditioner.context_shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        return Ok(p.clone());
    }
    let mut g = Graph::new();
    let out = prompt.build_context(&mut g, conditioner, e_null, false)?;
    let mut bindings = Bindings::new();
    prompt.bind(&mut bindings);
    g.forward(&bindings, out)
}

/// Learned prompts keyed by degradation kind, at most one per kind.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptBank {
    prompts: BTreeMap<DegradationKind, Prompt>,
}

impl PromptBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `prompt` under its kind, returning the prompt it replaced.
    pub fn insert(&mut self, prompt: Prompt) -> Option<Prompt> {
        self.prompts.insert(prompt.kind, prompt)
    }

    pub fn get(&self, kind: DegradationKind) -> Option<&Prompt> {
        self.prompts.get(&kind)
    }

    pub fn require(&self, kind: DegradationKind) -> Result<&Prompt> {
        self.get(kind).ok_or_else(|| {
            let available: Vec<_> = self.kinds().map(|k| k.label()).collect();
            Error::invalid(format!(
                "no prompt for `{kind}` in bank (available: {})",
                if available.is_empty() { "none".to_string() } else { available.join(", ") }
            ))
        })
    }

    pub fn kinds(&self) -> impl Iterator<Item = DegradationKind> + '_ {
        self.prompts.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prompt> {
        self.prompts.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Conditioner, Tensor) {
        let c = Conditioner::new(ConditionerConfig::default()).unwrap();
        let e = c.null_context().unwrap();
        (c, e)
    }

    #[test]
    fn tokenizer_pads_and_rejects() {
        let (c, _) = setup();
        let ids = c.tokenizer().token_ids("remove HAZE").unwrap();
        assert_eq!(ids.len(), 8);
        assert_eq!(&ids[..3], &[1, 2, PAD]);
        assert!(matches!(c.tokenizer().token_ids("REMOVE SMOG"), Err(Error::UnknownToken(w)) if w == "SMOG"));
        assert!(c.tokenizer().token_ids("A A A A A A A A A").is_err());
    }

    #[test]
    fn gate_zero_is_null_context_bitwise() {
        let (c, e) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Prompt::initial(VariantTag::Residual, DegradationKind::Veil, &c, &e, &mut rng).unwrap();
        assert!(encode(&p, &c, &e).unwrap().bitwise_eq(&e));
    }

    #[test]
    fn embedding_passthrough() {
        let (c, e) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::randn(vec![8, 32], 1.0, &mut rng);
        let prompt = Prompt {
            kind: DegradationKind::Blur,
            variant: PromptVariant::Embedding(p.clone()),
        };
        assert!(encode(&prompt, &c, &e).unwrap().bitwise_eq(&p));
        let bad = Prompt {
            kind: DegradationKind::Blur,
            variant: PromptVariant::Embedding(Tensor::zeros(vec![8, 31])),
        };
        assert!(encode(&bad, &c, &e).is_err());
    }

    #[test]
    fn token_space_matches_text_when_tokens_agree() {
        let (c, e) = setup();
        let text = Prompt::text(DegradationKind::Veil, "REMOVE HAZE");
        let tokens = Prompt {
            kind: DegradationKind::Veil,
            variant: PromptVariant::TokenSpace(c.tokenizer().embed("REMOVE HAZE").unwrap()),
        };
        let a = encode(&text, &c, &e).unwrap();
        let b = encode(&tokens, &c, &e).unwrap();
        assert!(a.bitwise_eq(&b));
        // The untouched token-space start is the null context.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init = Prompt::initial(VariantTag::TokenSpace, DegradationKind::Veil, &c, &e, &mut rng).unwrap();
        assert!(encode(&init, &c, &e).unwrap().bitwise_eq(&e));
        assert!(!a.bitwise_eq(&e));
    }

    #[test]
    fn unknown_token_propagates() {
        let (c, e) = setup();
        assert!(matches!(
            encode(&Prompt::text(DegradationKind::Veil, "MAKE IT SPARKLE"), &c, &e),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn trainable_parameter_sets() {
        let (c, e) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let emb = Prompt::initial(VariantTag::Embedding, DegradationKind::Veil, &c, &e, &mut rng).unwrap();
        let params = emb.trainable_parameters().unwrap();
        assert_eq!(params.len(), 1);
        assert_eq!(params[P_CONTEXT].shape(), &[8, 32]);

        let res = Prompt::initial(VariantTag::Residual, DegradationKind::Veil, &c, &e, &mut rng).unwrap();
        let params = res.trainable_parameters().unwrap();
        let shapes: Vec<_> = params.values().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 1], vec![8, 4], vec![4, 32]]);
        // L·ρ + ρ·D + L = 32 + 128 + 8 < L·D = 256
        assert_eq!(res.parameter_count(), 8 * 4 + 4 * 32 + 8);
        assert!(res.parameter_count() < emb.parameter_count());

        assert!(Prompt::text(DegradationKind::Veil, "CLEAR").trainable_parameters().is_err());
    }

    #[test]
    fn set_parameters_checks_shapes() {
        let (c, e) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = Prompt::initial(VariantTag::Embedding, DegradationKind::Gamma, &c, &e, &mut rng).unwrap();
        let mut params = p.trainable_parameters().unwrap();
        params.insert(P_CONTEXT.into(), Tensor::zeros(vec![2, 2]));
        assert!(p.set_parameters(&params).is_err());
        params.insert(P_CONTEXT.into(), Tensor::full(vec![8, 32], 0.5));
        p.set_parameters(&params).unwrap();
        assert_eq!(encode(&p, &c, &e).unwrap().data()[0], 0.5);
    }

    #[test]
    fn bank_keeps_one_prompt_per_kind() {
        let mut bank = PromptBank::new();
        assert!(bank.insert(Prompt::text(DegradationKind::Veil, "DEHAZE")).is_none());
        let old = bank.insert(Prompt::text(DegradationKind::Veil, "REMOVE HAZE")).unwrap();
        assert_eq!(old.variant, PromptVariant::Text("DEHAZE".into()));
        assert_eq!(bank.len(), 1);
        let err = bank.require(DegradationKind::Blur).unwrap_err().to_string();
        assert!(err.contains("veil"), "{err}");
    }

    #[test]
    fn conditioner_round_trips_through_tensors() {
        let (c, _) = setup();
        let back = Conditioner::from_tensors(&c.tensors(), c.config().seed).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }
}
