//! Hashed-token text encoder: embedding table, sinusoidal positions and a
//! small stack of self-attention layers.

use std::hash::Hasher;

use fnv::FnvHasher;
use ndarray::Array2;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, Dense, Init};

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn sinusoidal_positions(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let a = pos as f64 / rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[derive(Clone, Debug)]
struct Layer {
    attn: Attention,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    embed: ParamId,
    layers: Vec<Layer>,
    vocab: usize,
    channels: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, channels: usize, vocab: usize, depth: usize) -> Result<Self> {
        if vocab == 0 || channels == 0 {
            return Err(Error::Config("text encoder needs positive vocab and channels".into()));
        }
        let embed = store.add("text.embed", init.uniform(vocab, channels, 1.0));
        let layers = (0..depth)
            .map(|i| Layer {
                attn: Attention::new(store, init, &format!("text.layer{i}.attn"), channels),
                ff1: Dense::new(store, init, &format!("text.layer{i}.ff1"), channels, channels),
                ff2: Dense::new(store, init, &format!("text.layer{i}.ff2"), channels, channels),
            })
            .collect();
        Ok(Self {
            embed,
            layers,
            vocab,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn token_id(&self, token: &str) -> u32 {
        let mut h = FnvHasher::default();
        h.write(token.as_bytes());
        (h.finish() % self.vocab as u64) as u32
    }

    /// Token ids of `text`; empty or token-free text is an argument error.
    pub fn token_ids(&self, text: &str) -> Result<Vec<u32>> {
        let ids: Vec<u32> = tokenize(text).iter().map(|t| self.token_id(t)).collect();
        if ids.is_empty() {
            return Err(Error::Argument(format!("text {text:?} has no tokens")));
        }
        Ok(ids)
    }

    /// Token-level embedding `[L × C]`.
    pub fn forward_ids<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Argument("cannot encode an empty token sequence".into()));
        }
        let table = tape.param(store, self.embed);
        let emb = tape.gather_rows(table, ids);
        let pos = tape.constant(sinusoidal_positions(ids.len(), self.channels));
        let mut x = tape.add(emb, pos);
        for layer in &self.layers {
            x = layer.attn.forward(tape, store, x, x);
            let h = layer.ff1.forward(tape, store, x);
            let h = tape.relu(h);
            let h = layer.ff2.forward(tape, store, h);
            x = tape.add(x, h);
        }
        Ok(x)
    }

    /// Token-level `[L × C]` and mean-pooled `[1 × C]` embeddings.
    pub fn encode<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, text: &str) -> Result<(Var, Var)> {
        let ids = self.token_ids(text)?;
        let tokens = self.forward_ids(tape, store, &ids)?;
        let pooled = tape.mean_rows(tokens);
        Ok((tokens, pooled))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> (TextEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let e = TextEncoder::new(&mut store, &mut Init::new(4), 16, 512, 2).unwrap();
        (e, store)
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("The Mug's handle, 2x!"), vec!["the", "mug", "s", "handle", "2x"]);
    }

    #[test]
    fn shapes_and_pooling() {
        let (e, store) = enc();
        let sentence = (0..60).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let mut tape = Tape::new();
        let (tok, pooled) = e.encode(&mut tape, &store, &sentence).unwrap();
        assert_eq!(tape.shape(tok), (60, 16));
        assert_eq!(tape.shape(pooled), (1, 16));

        let (one, one_pooled) = e.encode(&mut tape, &store, "handle").unwrap();
        assert_eq!(tape.value(one).row(0), tape.value(one_pooled).row(0));
    }

    #[test]
    fn deterministic_and_rejects_empty() {
        let (e, store) = enc();
        let mut tape = Tape::new();
        let (a, _) = e.encode(&mut tape, &store, "grasp the handle").unwrap();
        let (b, _) = e.encode(&mut tape, &store, "grasp the handle").unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!(matches!(e.encode(&mut tape, &store, ""), Err(Error::Argument(_))));
        assert!(matches!(e.encode(&mut tape, &store, " ;.!"), Err(Error::Argument(_))));
    }
}
