//! Toy language encoder: hashed word tokens, a frozen embedding table with a
//! trainable low-rank delta, masked mean pooling and a projection into the
//! ego feature space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::util::rng_for;

const TABLE_STREAM: u64 = 0x454d_4230;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    /// Hashed vocabulary size `V`; id 0 is reserved for padding.
    pub vocab_size: usize,
    /// Token slots `L`.
    pub max_len: usize,
    /// Token state width `D_t`.
    pub text_dim: usize,
    /// Rank `r` of the trainable delta.
    pub rank: usize,
    /// Seed of the frozen embedding table.
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            max_len: 16,
            text_dim: 64,
            rank: 4,
            seed: 13,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("text.vocab_size", "must be >= 2"));
        }
        for (key, v) in [("text.max_len", self.max_len), ("text.text_dim", self.text_dim), ("text.rank", self.rank)] {
            if v == 0 {
                return Err(Error::config(key, "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBatch {
    /// `L` token ids, padded with 0.
    pub ids: Vec<usize>,
    /// 1 at real tokens, 0 at padding.
    pub mask: Vec<f64>,
    /// Words in the text before truncation.
    pub word_count: usize,
    pub empty: bool,
}

/// Lowercased words, split on anything that is not alphanumeric.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(word: &str) -> u64 {
    word.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn token_id(word: &str, vocab_size: usize) -> usize {
    1 + (fnv1a(word) % (vocab_size as u64 - 1)) as usize
}

pub fn tokenize(text: &str, config: &TextConfig) -> TokenBatch {
    let ws = words(text);
    let mut ids = vec![0; config.max_len];
    let mut mask = vec![0.0; config.max_len];
    for (slot, w) in ws.iter().take(config.max_len).enumerate() {
        ids[slot] = token_id(w, config.vocab_size);
        mask[slot] = 1.0;
    }
    TokenBatch {
        ids,
        mask,
        word_count: ws.len(),
        empty: ws.is_empty(),
    }
}

/// The frozen table `E₀ ~ N(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEmbedding {
    pub table: Matrix,
}

impl FrozenEmbedding {
    pub fn new(config: &TextConfig) -> Self {
        let mut rng = rng_for(&[config.seed, TABLE_STREAM]);
        Self {
            table: Matrix::gaussian(config.vocab_size, config.text_dim, 1.0, &mut rng),
        }
    }

    fn rows(&self, ids: &[usize]) -> Result<Matrix> {
        let mut out = Matrix::zeros(ids.len(), self.table.cols());
        for (r, &i) in ids.iter().enumerate() {
            if i >= self.table.rows() {
                return Err(Error::shape("encode", format!("token id {i} outside vocabulary")));
            }
            out.row_mut(r).copy_from_slice(self.table.row(i));
        }
        Ok(out)
    }
}

/// Handles of the trainable text tensors inside an adapter's store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextParams {
    /// `V × r`, zero at initialization.
    pub lora_a: ParamId,
    /// `r × D_t`.
    pub lora_b: ParamId,
    /// `W_p`, `D_t × D_e`.
    pub projection: ParamId,
}

impl TextParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &TextConfig,
        feature_dim: usize,
        rng: &mut R,
    ) -> Self {
        let lora_a = store.insert("text.lora_a", Matrix::zeros(config.vocab_size, config.rank));
        let b_scale = 1.0 / (config.rank as f64).sqrt();
        let lora_b = store.insert("text.lora_b", Matrix::uniform(config.rank, config.text_dim, b_scale, rng));
        let p_scale = 1.0 / (config.text_dim as f64).sqrt();
        let projection = store.insert(
            "text.projection",
            Matrix::uniform(config.text_dim, feature_dim, p_scale, rng),
        );
        Self {
            lora_a,
            lora_b,
            projection,
        }
    }
}

/// Token states `H_t[ℓ] = (E₀ + A·B)[id_ℓ]`, `L × D_t`.
pub fn encode(
    tape: &mut Tape,
    tokens: &TokenBatch,
    frozen: &FrozenEmbedding,
    store: &ParamStore,
    params: &TextParams,
) -> Result<Var> {
    let base = tape.constant(frozen.rows(&tokens.ids)?);
    let a_rows = tape.gather_param(params.lora_a, store.get(params.lora_a), &tokens.ids)?;
    let b = tape.param(params.lora_b, store.get(params.lora_b));
    let delta = tape.matmul(a_rows, b)?;
    tape.add(base, delta)
}

/// `v = (Σ m_ℓ H_t[ℓ] / Σ m_ℓ) · W_p`; an all-zero mask is a pooling error.
pub fn pool_and_project(
    tape: &mut Tape,
    states: Var,
    mask: &[f64],
    store: &ParamStore,
    params: &TextParams,
) -> Result<Var> {
    let pooled = tape.masked_mean(states, mask)?;
    let w = tape.param(params.projection, store.get(params.projection));
    tape.matmul(pooled, w)
}
