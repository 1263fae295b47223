//! Model configuration, the LATX weight container and random model
//! generation.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "LATX" | u32 version (=1) | u64 header_len | header_len bytes of UTF-8 JSON | blob
//! ```
//!
//! The JSON header is `{"config": {..}, "tensors": [{"name", "shape",
//! "dtype": "f32", "offset"}]}`. Offsets are byte offsets into the blob and
//! are multiples of 64. The header is padded with trailing spaces so the blob
//! itself starts on a 64-byte file boundary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"LATX";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 4 + 4 + 8;
const INIT_RANGE: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Bidirectional attention, pooler + classifier head.
    Encoder,
    /// Causal attention, language-model head at the last position.
    Decoder,
}

#[derive(Deserialize)]
struct RawConfig {
    num_layers: usize,
    hidden_size: usize,
    num_heads: usize,
    intermediate_size: Option<usize>,
    max_seq: usize,
    vocab_size: usize,
    #[serde(default = "default_labels")]
    num_labels: usize,
    #[serde(default = "default_mode")]
    mode: Mode,
    #[serde(default = "default_eps")]
    layer_norm_eps: f32,
}

fn default_labels() -> usize {
    2
}

fn default_mode() -> Mode {
    Mode::Encoder
}

fn default_eps() -> f32 {
    1e-12
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig")]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    pub num_labels: usize,
    pub mode: Mode,
    pub layer_norm_eps: f32,
}

impl TryFrom<RawConfig> for ModelConfig {
    type Error = Error;

    fn try_from(raw: RawConfig) -> Result<Self> {
        let cfg = ModelConfig {
            num_layers: raw.num_layers,
            hidden_size: raw.hidden_size,
            num_heads: raw.num_heads,
            intermediate_size: raw.intermediate_size.unwrap_or(4 * raw.hidden_size),
            max_seq: raw.max_seq,
            vocab_size: raw.vocab_size,
            num_labels: raw.num_labels,
            mode: raw.mode,
            layer_norm_eps: raw.layer_norm_eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ModelConfig {
    /// BERT-base shape: 12 layers, hidden 768, 12 heads, 512 positions.
    pub fn bert_base() -> Self {
        ModelConfig {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            intermediate_size: 3072,
            max_seq: 512,
            vocab_size: 30522,
            num_labels: 2,
            mode: Mode::Encoder,
            layer_norm_eps: 1e-12,
        }
    }

    /// Small config with the default 4x intermediate width.
    pub fn new(
        num_layers: usize,
        hidden_size: usize,
        num_heads: usize,
        max_seq: usize,
        vocab_size: usize,
        mode: Mode,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            num_layers,
            hidden_size,
            num_heads,
            intermediate_size: 4 * hidden_size,
            max_seq,
            vocab_size,
            num_labels: 2,
            mode,
            layer_norm_eps: 1e-12,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_layers == 0 {
            return fail("num_layers must be >= 1".into());
        }
        if self.num_heads == 0 || self.hidden_size == 0 {
            return fail("hidden_size and num_heads must be >= 1".into());
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.max_seq == 0 {
            return fail("max_seq must be >= 1".into());
        }
        if self.intermediate_size == 0 {
            return fail("intermediate_size must be >= 1".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be >= 1".into());
        }
        if self.mode == Mode::Encoder && self.num_labels == 0 {
            return fail("num_labels must be >= 1 for encoder models".into());
        }
        if !(self.layer_norm_eps >= 0.0 && self.layer_norm_eps.is_finite()) {
            return fail("layer_norm_eps must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Every tensor the config requires, in container order. The decoder LM
    /// head is optional (tied to `embed.word` when absent) and not listed.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden_size;
        let i = self.intermediate_size;
        let mut out = vec![
            ("embed.word".to_string(), vec![self.vocab_size, h]),
            ("embed.pos".to_string(), vec![self.max_seq, h]),
            ("embed.ln.g".to_string(), vec![h]),
            ("embed.ln.b".to_string(), vec![h]),
        ];
        for l in 0..self.num_layers {
            for p in ["q", "k", "v", "o"] {
                out.push((format!("enc.{l}.att.{p}.w"), vec![h, h]));
                out.push((format!("enc.{l}.att.{p}.b"), vec![h]));
            }
            out.push((format!("enc.{l}.ln1.g"), vec![h]));
            out.push((format!("enc.{l}.ln1.b"), vec![h]));
            out.push((format!("enc.{l}.ffn.w1"), vec![i, h]));
            out.push((format!("enc.{l}.ffn.b1"), vec![i]));
            out.push((format!("enc.{l}.ffn.w2"), vec![h, i]));
            out.push((format!("enc.{l}.ffn.b2"), vec![h]));
            out.push((format!("enc.{l}.ln2.g"), vec![h]));
            out.push((format!("enc.{l}.ln2.b"), vec![h]));
        }
        if self.mode == Mode::Encoder {
            out.push(("pooler.w".to_string(), vec![h, h]));
            out.push(("pooler.b".to_string(), vec![h]));
            out.push(("cls.w".to_string(), vec![self.num_labels, h]));
            out.push(("cls.b".to_string(), vec![self.num_labels]));
        }
        out
    }

    fn optional_tensors(&self) -> Vec<(String, Vec<usize>)> {
        match self.mode {
            Mode::Encoder => vec![],
            Mode::Decoder => vec![("lm_head.w".to_string(), vec![self.vocab_size, self.hidden_size])],
        }
    }

    /// Number of scalar parameters in the required tensors.
    pub fn parameter_count(&self) -> usize {
        self.tensor_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn into_matrix(self) -> Matrix {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => (1, self.data.len()),
        };
        Matrix::from_vec(r, c, self.data).expect("shape checked at construction")
    }

    fn bit_pattern(&self) -> impl Iterator<Item = u32> + '_ {
        self.data.iter().map(|v| v.to_bits())
    }
}

/// Named tensors keyed by layout name.
#[derive(Clone, Debug, Default)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl PartialEq for WeightStore {
    /// Bitwise comparison so that `-0.0 != 0.0` and NaN payloads count.
    fn eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| {
                ka == kb && a.shape == b.shape && a.bit_pattern().eq(b.bit_pattern())
            })
    }
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// Checks that every tensor the config needs is present with its exact
    /// shape, and that nothing unexpected is stored.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let required = config.tensor_layout();
        let optional = config.optional_tensors();
        for (name, shape) in required.iter().chain(&optional) {
            match self.tensors.get(name) {
                None if optional.iter().any(|(n, _)| n == name) => {}
                None => return Err(Error::MissingTensor(name.clone())),
                Some(t) if &t.shape != shape => {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        for name in self.tensors.keys() {
            if !required.iter().chain(&optional).any(|(n, _)| n == name) {
                return Err(Error::Header(format!("unexpected tensor `{name}`")));
            }
        }
        Ok(())
    }

    pub(crate) fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }
}

/// Fills every required tensor from a seeded ChaCha stream, uniform in
/// [-0.1, 0.1], in layout order.
pub fn generate_random_model(config: &ModelConfig, seed: u64) -> Result<WeightStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for (name, shape) in config.tensor_layout() {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        store.insert(name, Tensor { shape, data });
    }
    Ok(store)
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serialises the store into LATX bytes.
pub fn encode_model(config: &ModelConfig, store: &WeightStore) -> Result<Vec<u8>> {
    store.validate(config)?;
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0usize;
    let mut order = config.tensor_layout();
    order.extend(
        config
            .optional_tensors()
            .into_iter()
            .filter(|(n, _)| store.get(n).is_some()),
    );
    for (name, _) in &order {
        let t = store.get(name).expect("validated");
        offset = align_up(offset);
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset: offset as u64,
        });
        offset += t.data.len() * 4;
    }
    let mut header = serde_json::to_vec(&Header {
        config: config.clone(),
        tensors: entries,
    })?;
    let padded = align_up(PREAMBLE + header.len()) - PREAMBLE;
    header.resize(padded, b' ');

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let blob_start = out.len();
    for (name, _) in &order {
        let t = store.get(name).expect("validated");
        let at = blob_start + align_up(out.len() - blob_start);
        out.resize(at, 0);
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses LATX bytes and validates the tensor table against the embedded config.
pub fn decode_model(bytes: &[u8]) -> Result<(ModelConfig, WeightStore)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("file shorter than magic bytes".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated("incomplete preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let blob_start = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            Error::Truncated(format!(
                "header of {header_len} bytes exceeds file of {} bytes",
                bytes.len()
            ))
        })?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..blob_start])
        .map_err(|e| Error::Header(e.to_string()))?;
    let blob = &bytes[blob_start..];

    let mut store = WeightStore::new();
    for entry in header.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Header(format!(
                "tensor `{}` has unsupported dtype `{}`",
                entry.name, entry.dtype
            )));
        }
        if !(entry.offset as usize).is_multiple_of(ALIGN) {
            return Err(Error::Header(format!(
                "tensor `{}` offset {} is not {ALIGN}-byte aligned",
                entry.name, entry.offset
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(n * 4)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "tensor `{}` needs bytes {start}..{} of a {}-byte blob",
                    entry.name,
                    start + n * 4,
                    blob.len()
                ))
            })?;
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if store
            .insert(entry.name.clone(), Tensor { shape: entry.shape, data })
            .is_some()
        {
            return Err(Error::Header(format!("duplicate tensor `{}`", entry.name)));
        }
    }
    store.validate(&header.config)?;
    Ok((header.config, store))
}

pub fn save_model(config: &ModelConfig, store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(config, store)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelConfig, WeightStore)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
