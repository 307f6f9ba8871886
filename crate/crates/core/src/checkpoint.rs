//! Binary tensor checkpoints.
//!
//! ```text
//! "BPRM" | version u16 | count u32
//! per tensor: name_len u32 | name utf-8 | rank u32 | dims u32 × rank | f32 × numel
//! checksum u64  (first 8 bytes of SHA-256 over everything before it)
//! ```
//!
//! All integers and reals are little-endian. Metadata travels as ordinary
//! tensors under `meta.*`; 64-bit values are split into four 16-bit limbs so
//! they survive the 32-bit payload exactly.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::numerics::{digest_u64, NamedTensors, Tensor};
use crate::prompts::{Conditioner, Prompt, PromptBank, PromptVariant, PAD, VOCAB};
use crate::toyworld::DegradationKind;

pub const MAGIC: &[u8; 4] = b"BPRM";
pub const VERSION: u16 = 1;

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(bytes);
    digest_u64(h)
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(tensors: &NamedTensors) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, tensors.len(), "tensor count")?;
    for (name, t) in tensors {
        put_u32(&mut out, name.len(), "name length")?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len(), "rank")?;
        for &d in t.shape() {
            put_u32(&mut out, d, "dimension")?;
        }
        for &v in t.data() {
            let x = v as f32;
            if !x.is_finite() {
                return Err(Error::Checkpoint(format!("`{name}` holds {v}, not representable as f32")));
            }
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// One header entry: name and shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u16,
    pub entries: Vec<Entry>,
    pub checksum: u64,
}

fn parse(bytes: &[u8], keep_values: bool) -> Result<(Header, NamedTensors)> {
    if bytes.len() < MAGIC.len() + 2 + 4 + 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    let actual = checksum(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let v = r.take(2)?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    let mut tensors = NamedTensors::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        if keep_values {
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape.clone(), data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        entries.push(Entry { name, shape });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes before checksum".into()));
    }
    Ok((
        Header {
            version,
            entries,
            checksum: stored,
        },
        tensors,
    ))
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors> {
    parse(bytes, true).map(|(_, t)| t)
}

/// Names, shapes and checksum, without materializing payloads.
pub fn header(bytes: &[u8]) -> Result<Header> {
    parse(bytes, false).map(|(h, _)| h)
}

pub fn save(path: &Path, tensors: &NamedTensors) -> Result<u64> {
    let bytes = encode(tensors)?;
    fs::write(path, &bytes)?;
    Ok(checksum(&bytes))
}

pub fn load(path: &Path) -> Result<NamedTensors> {
    decode(&fs::read(path)?)
}

/// `u64` as four 16-bit limbs, least significant first.
pub fn limbs(v: u64) -> Tensor {
    let data = (0..4).map(|i| ((v >> (16 * i)) & 0xFFFF) as f64).collect();
    Tensor::new(vec![4], data).expect("four finite limbs")
}

pub fn from_limbs(t: &Tensor) -> Result<u64> {
    if t.shape() != [4] {
        return Err(Error::Checkpoint(format!("limb tensor has shape {:?}", t.shape())));
    }
    let mut v = 0u64;
    for (i, &x) in t.data().iter().enumerate() {
        if !(0.0..65536.0).contains(&x) || x.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("bad limb {x}")));
        }
        v |= (x as u64) << (16 * i);
    }
    Ok(v)
}

const META_DIMS: &str = "meta.backbone.dims";
const META_SEED: &str = "meta.backbone.seed";
const META_LR: &str = "meta.backbone.lr";
pub const META_HASH: &str = "meta.backbone.hash";
const META_COND_SEED: &str = "meta.conditioner.seed";

fn small(v: usize) -> Result<f64> {
    if v >= 1 << 24 {
        return Err(Error::Checkpoint(format!("config value {v} does not fit the 32-bit payload")));
    }
    Ok(v as f64)
}

/// The frozen backbone, its conditioner and the metadata needed to rebuild
/// both.
pub fn backbone_tensors(backbone: &Backbone, conditioner: &Conditioner) -> Result<NamedTensors> {
    let hash = backbone.weights().verify_frozen()?;
    let c = backbone.config();
    let dims = [
        c.input_dim,
        c.hidden_dim,
        c.hidden_layers,
        c.context_tokens,
        c.context_dim,
        c.attention_dim,
        c.time_embed_dim,
        c.pretrain_steps,
        c.pretrain_batch,
    ]
    .iter()
    .map(|&d| small(d))
    .collect::<Result<Vec<_>>>()?;
    let mut out = backbone.weights().tensors().clone();
    out.extend(conditioner.tensors());
    out.insert(META_DIMS.into(), Tensor::vector(dims)?);
    out.insert(META_SEED.into(), limbs(c.seed));
    out.insert(META_LR.into(), limbs(c.pretrain_lr.to_bits()));
    out.insert(META_HASH.into(), limbs(hash));
    out.insert(META_COND_SEED.into(), limbs(conditioner.config().seed));
    Ok(out)
}

/// Rebuilds and hash-verifies a backbone bundle.
pub fn load_backbone(tensors: &NamedTensors) -> Result<(Backbone, Conditioner)> {
    let get = |name: &str| {
        tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))
    };
    let dims = get(META_DIMS)?;
    if dims.shape() != [9] {
        return Err(Error::Checkpoint("backbone dims have the wrong length".into()));
    }
    let d: Vec<usize> = dims.data().iter().map(|&x| x as usize).collect();
    let config = BackboneConfig {
        input_dim: d[0],
        hidden_dim: d[1],
        hidden_layers: d[2],
        context_tokens: d[3],
        context_dim: d[4],
        attention_dim: d[5],
        time_embed_dim: d[6],
        pretrain_steps: d[7],
        pretrain_batch: d[8],
        pretrain_lr: f64::from_bits(from_limbs(get(META_LR)?)?),
        seed: from_limbs(get(META_SEED)?)?,
    };
    let hash = from_limbs(get(META_HASH)?)?;
    let conditioner = Conditioner::from_tensors(tensors, from_limbs(get(META_COND_SEED)?)?)?;
    let weights: NamedTensors = tensors
        .iter()
        .filter(|(k, _)| k.starts_with("backbone."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let backbone = Backbone::from_frozen(config, weights, hash)?;
    Ok((backbone, conditioner))
}

fn text_ids(text: &str) -> Result<Vec<f64>> {
    let mut ids: Vec<f64> = text
        .split_whitespace()
        .map(|w| {
            let upper = w.to_ascii_uppercase();
            VOCAB
                .iter()
                .position(|v| *v == upper)
                .map(|i| i as f64)
                .ok_or(Error::UnknownToken(w.to_string()))
        })
        .collect::<Result<_>>()?;
    if ids.is_empty() {
        ids.push(PAD as f64);
    }
    Ok(ids)
}

/// Bank entries as `bank.<kind>.<variant>.<param>`; text prompts are stored
/// as vocabulary ids.
pub fn bank_tensors(bank: &PromptBank) -> Result<NamedTensors> {
    let mut out = NamedTensors::new();
    for prompt in bank.iter() {
        let prefix = format!("bank.{}.{}", prompt.kind.label(), prompt.tag().label());
        if let PromptVariant::Text(text) = &prompt.variant {
            out.insert(format!("{prefix}.ids"), Tensor::vector(text_ids(text)?)?);
            continue;
        }
        for (name, t) in prompt.trainable_parameters()? {
            let param = name.strip_prefix("prompt.").unwrap_or(&name);
            out.insert(format!("{prefix}.{param}"), t);
        }
    }
    Ok(out)
}

pub fn load_bank(tensors: &NamedTensors) -> Result<PromptBank> {
    let mut grouped: std::collections::BTreeMap<(String, String), NamedTensors> = Default::default();
    for (name, t) in tensors {
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["bank", kind, variant, param] => {
                grouped
                    .entry((kind.to_string(), variant.to_string()))
                    .or_default()
                    .insert(format!("prompt.{param}"), t.clone());
            }
            _ => return Err(Error::Checkpoint(format!("unexpected bank entry `{name}`"))),
        }
    }
    let mut bank = PromptBank::new();
    for ((kind, variant), params) in grouped {
        let kind: DegradationKind = kind.parse()?;
        let take = |n: &str| {
            params
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("bank entry `{kind}` lacks `{n}`")))
        };
        let variant = match variant.as_str() {
            "text" => {
                let ids = take("prompt.ids")?;
                let words: Vec<&str> = ids
                    .data()
                    .iter()
                    .map(|&i| i as usize)
                    .filter(|&i| i != PAD)
                    .map(|i| VOCAB.get(i).copied().ok_or_else(|| Error::Checkpoint(format!("bad token id {i}"))))
                    .collect::<Result<_>>()?;
                PromptVariant::Text(words.join(" "))
            }
            "token" => PromptVariant::TokenSpace(take("prompt.tokens")?),
            "embedding" => PromptVariant::Embedding(take("prompt.context")?),
            "residual" => PromptVariant::Residual {
                left: take("prompt.left")?,
                right: take("prompt.right")?,
                gate: take("prompt.gate")?,
            },
            other => return Err(Error::Checkpoint(format!("unknown prompt variant `{other}`"))),
        };
        let prompt = Prompt { kind, variant };
        if bank.insert(prompt).is_some() {
            return Err(Error::Checkpoint(format!("two prompts stored for `{kind}`")));
        }
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        NamedTensors::from([
            ("a".to_string(), Tensor::matrix(2, 3, vec![0.1, -2.5, 3.0, 1e-3, 7.0, -0.0]).unwrap()),
            ("b.c".to_string(), Tensor::vector(vec![42.0]).unwrap()),
        ])
    }

    #[test]
    fn layout_is_bit_exact() {
        let t = NamedTensors::from([("x".to_string(), Tensor::vector(vec![1.0, -2.0]).unwrap())]);
        let bytes = encode(&t).unwrap();
        let mut expected = b"BPRM".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'x');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        let sum = checksum(&expected);
        expected.extend_from_slice(&sum.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_and_header() {
        let t = sample();
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes).unwrap();
        for (k, v) in &t {
            assert_eq!(back[k].shape(), v.shape());
            assert!(back[k].bitwise_eq(&v.quantize_f32()));
        }
        let h = header(&bytes).unwrap();
        assert_eq!(h.entries.len(), 2);
        assert_eq!(h.entries[0].shape, vec![2, 3]);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
        assert!(decode(&bytes[..10]).is_err());
        let mut bad_magic = encode(&sample()).unwrap();
        bad_magic[0] = b'X';
        let n = bad_magic.len() - 8;
        let sum = checksum(&bad_magic[..n]);
        bad_magic[n..].copy_from_slice(&sum.to_le_bytes());
        assert!(decode(&bad_magic).is_err());
    }

    #[test]
    fn limbs_round_trip() {
        for v in [0, 1, 0xFFFF, 0x1234_5678_9ABC_DEF0, u64::MAX] {
            assert_eq!(from_limbs(&limbs(v)).unwrap(), v);
            let q = limbs(v).quantize_f32();
            assert_eq!(from_limbs(&q).unwrap(), v);
        }
    }

    #[test]
    fn bank_round_trip() {
        let mut bank = PromptBank::new();
        bank.insert(Prompt::text(DegradationKind::Stripe, "REMOVE STRIPES"));
        bank.insert(Prompt {
            kind: DegradationKind::Veil,
            variant: PromptVariant::Embedding(Tensor::matrix(1, 2, vec![0.5, 0.25]).unwrap()),
        });
        let back = load_bank(&decode(&encode(&bank_tensors(&bank).unwrap()).unwrap()).unwrap()).unwrap();
        assert_eq!(back, bank);
    }
}
