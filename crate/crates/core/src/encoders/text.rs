//! Causal transformer text encoder producing unpooled hidden sequences.

use rand::Rng;

use crate::encoders::TokenSequence;
use crate::error::{Error, Result};
use crate::numerics::{AttnShape, Graph, ParameterStore, Real, Tensor, Var};

/// A length-`L` sequence of row vectors with a validity mask. Used for both
/// word-embedding sequences and hidden sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence<T> {
    pub values: Tensor<T>,
    pub mask: Vec<bool>,
}

pub type EmbeddingSequence<T> = Sequence<T>;
pub type HiddenSequence<T> = Sequence<T>;

impl<T: Real> Sequence<T> {
    pub fn len(&self) -> usize {
        self.values.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.values.row(i)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
}

impl TextEncoder {
    pub const PREFIX: &'static str = "text.";

    pub fn init_params<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        let d = self.d_model;
        store.init_normal(rng, "text.tok_emb", &[self.vocab_size, d], 0.3)?;
        store.init_normal(rng, "text.pos_emb", &[self.max_len, d], 0.1)?;
        for l in 0..self.layers {
            let p = format!("text.block{l}");
            store.init_layer_norm(&format!("{p}.ln1"), d)?;
            for m in ["q", "k", "v", "o"] {
                store.init_linear(rng, &format!("{p}.attn.{m}"), d, d)?;
            }
            store.init_layer_norm(&format!("{p}.ln2"), d)?;
            store.init_linear(rng, &format!("{p}.mlp.fc1"), d, 4 * d)?;
            store.init_linear(rng, &format!("{p}.mlp.fc2"), 4 * d, d)?;
        }
        store.init_layer_norm("text.ln_final", d)?;
        store.init_normal(rng, "text.pool_proj.w", &[d, d], 1.0 / (d as f64).sqrt())?;
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenSequence]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("no captions to embed"));
        }
        for t in tokens {
            if t.max_len() != self.max_len || t.ids().iter().any(|&i| i >= self.vocab_size) {
                return Err(Error::invalid(format!(
                    "token sequence of length {} does not fit encoder (L = {}, vocab = {})",
                    t.max_len(),
                    self.max_len,
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Word embedding plus positional embedding, `[B·L, d]`.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, ps: &ParameterStore<T>, tokens: &[TokenSequence]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = g.param(ps, "text.tok_emb")?;
        let ids: Vec<usize> = tokens.iter().flat_map(|t| t.ids().iter().copied()).collect();
        let words = g.gather_rows(table, &ids)?;
        let positions: Vec<usize> = tokens.iter().flat_map(|_| 0..self.max_len).collect();
        let pos = self.positional_rows(g, ps, &positions)?;
        g.add(words, pos)
    }

    /// Positional-embedding rows for the given indices.
    pub fn positional_rows<T: Real>(&self, g: &mut Graph<T>, ps: &ParameterStore<T>, positions: &[usize]) -> Result<Var> {
        let table = g.param(ps, "text.pos_emb")?;
        g.gather_rows(table, positions)
    }

    /// Causal transformer over `[B·L, d]` embeddings; output has the same shape.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, ps: &ParameterStore<T>, w: Var) -> Result<Var> {
        let (rows, cols) = g.value(w).dims2();
        if cols != self.d_model || rows % self.max_len != 0 {
            return Err(Error::ShapeMismatch {
                op: "encode_text",
                lhs: g.shape(w).to_vec(),
                rhs: vec![self.max_len, self.d_model],
            });
        }
        let shape = AttnShape {
            heads: self.heads,
            q_len: self.max_len,
            kv_len: self.max_len,
            causal: true,
        };
        let mut x = w;
        for l in 0..self.layers {
            let p = format!("text.block{l}");
            let h = layer_norm(g, ps, &format!("{p}.ln1"), x)?;
            let q = linear(g, ps, &format!("{p}.attn.q"), h)?;
            let k = linear(g, ps, &format!("{p}.attn.k"), h)?;
            let v = linear(g, ps, &format!("{p}.attn.v"), h)?;
            let a = g.attention(q, k, v, shape)?;
            let a = linear(g, ps, &format!("{p}.attn.o"), a)?;
            x = g.add(x, a)?;
            let h = layer_norm(g, ps, &format!("{p}.ln2"), x)?;
            let h = linear(g, ps, &format!("{p}.mlp.fc1"), h)?;
            let h = g.gelu(h);
            let h = linear(g, ps, &format!("{p}.mlp.fc2"), h)?;
            x = g.add(x, h)?;
        }
        layer_norm(g, ps, "text.ln_final", x)
    }

    /// Hidden vector at each caption's EOS index, linearly projected. This is
    /// a diagnostic path only; the denoiser consumes the unpooled sequence.
    pub fn pooled<T: Real>(&self, g: &mut Graph<T>, ps: &ParameterStore<T>, h: Var, tokens: &[TokenSequence]) -> Result<Var> {
        let idx: Vec<usize> = tokens
            .iter()
            .enumerate()
            .map(|(b, t)| b * self.max_len + t.eos_index())
            .collect();
        let last = g.gather_rows(h, &idx)?;
        let proj = g.param(ps, "text.pool_proj.w")?;
        g.matmul(last, proj)
    }

    pub fn embed_sequence<T: Real>(&self, ps: &ParameterStore<T>, tokens: &TokenSequence) -> Result<EmbeddingSequence<T>> {
        let mut g = Graph::new();
        let w = self.embed(&mut g, ps, std::slice::from_ref(tokens))?;
        Ok(Sequence {
            values: g.value(w).clone(),
            mask: tokens.mask(),
        })
    }

    pub fn encode_sequence<T: Real>(&self, ps: &ParameterStore<T>, w: &EmbeddingSequence<T>) -> Result<HiddenSequence<T>> {
        let mut g = Graph::new();
        let wv = g.constant(w.values.clone());
        let h = self.encode(&mut g, ps, wv)?;
        Ok(Sequence {
            values: g.value(h).clone(),
            mask: w.mask.clone(),
        })
    }

    pub fn pooled_embedding<T: Real>(&self, ps: &ParameterStore<T>, h: &HiddenSequence<T>, tokens: &TokenSequence) -> Result<Tensor<T>> {
        if !tokens.ids().contains(&crate::encoders::EOS) {
            return Err(Error::invalid("caption has no EOS token"));
        }
        let mut g = Graph::new();
        let hv = g.constant(h.values.clone());
        let p = self.pooled(&mut g, ps, hv, std::slice::from_ref(tokens))?;
        g.value(p).clone().reshape(&[self.d_model])
    }
}

pub(crate) fn linear<T: Real>(g: &mut Graph<T>, ps: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{prefix}.w"))?;
    let b = g.param(ps, &format!("{prefix}.b"))?;
    g.linear(x, w, Some(b))
}

pub(crate) fn layer_norm<T: Real>(g: &mut Graph<T>, ps: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(ps, &format!("{prefix}.g"))?;
    let beta = g.param(ps, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{Vocabulary, PAD};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (TextEncoder, ParameterStore<f64>, Vocabulary) {
        let vocab = Vocabulary::from_words("a dog on grass cat sand".split(' ')).unwrap();
        let enc = TextEncoder {
            vocab_size: vocab.len(),
            max_len: 8,
            d_model: 16,
            layers: 2,
            heads: 4,
        };
        let mut ps = ParameterStore::new();
        enc.init_params(&mut ps, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        (enc, ps, vocab)
    }

    #[test]
    fn embedding_rows_and_shape() {
        let (enc, ps, vocab) = setup();
        let a = enc.embed_sequence(&ps, &vocab.tokenize("a dog on grass", 8).unwrap()).unwrap();
        let b = enc.embed_sequence(&ps, &vocab.tokenize("a dog on sand", 8).unwrap()).unwrap();
        assert_eq!(a.values.shape(), &[8, 16]);
        for i in 0..4 {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_ne!(a.row(4), b.row(4));
        let tok = ps.get("text.tok_emb").unwrap();
        let pos = ps.get("text.pos_emb").unwrap();
        let want: Vec<f64> = tok.row(PAD).iter().zip(pos.row(7)).map(|(t, p)| t + p).collect();
        assert_eq!(a.row(7), &want[..]);
        assert_eq!(a.mask, vec![true, true, true, true, true, true, false, false]);
    }

    #[test]
    fn encoder_is_causal_and_length_preserving() {
        let (enc, ps, vocab) = setup();
        let w = enc.embed_sequence(&ps, &vocab.tokenize("a cat on sand", 8).unwrap()).unwrap();
        let h = enc.encode_sequence(&ps, &w).unwrap();
        assert_eq!(h.values.shape(), w.values.shape());
        assert_eq!(h.mask, w.mask);
        for k in 0..8 {
            let mut perturbed = w.clone();
            let mut data = perturbed.values.clone().into_data();
            for v in &mut data[k * 16..(k + 1) * 16] {
                *v += 0.7;
            }
            perturbed.values = Tensor::new(vec![8, 16], data).unwrap();
            let hp = enc.encode_sequence(&ps, &perturbed).unwrap();
            for i in 0..8 {
                assert_eq!(hp.row(i) == h.row(i), i < k, "k={k} i={i}");
            }
        }
    }

    #[test]
    fn pad_tail_does_not_reach_content() {
        let (enc, ps, vocab) = setup();
        let tokens = vocab.tokenize("a dog", 8).unwrap();
        let w = enc.embed_sequence(&ps, &tokens).unwrap();
        let mut data = w.values.clone().into_data();
        for v in &mut data[4 * 16..] {
            *v = -3.0;
        }
        let tail = Sequence {
            values: Tensor::new(vec![8, 16], data).unwrap(),
            mask: w.mask.clone(),
        };
        let h = enc.encode_sequence(&ps, &w).unwrap();
        let ht = enc.encode_sequence(&ps, &tail).unwrap();
        for i in 0..=tokens.eos_index() {
            assert_eq!(h.row(i), ht.row(i));
        }
    }

    #[test]
    fn pooled_vector_reads_eos_row() {
        let (enc, ps, vocab) = setup();
        let tokens = vocab.tokenize("cat", 8).unwrap();
        assert_eq!(tokens.eos_index(), 2);
        let w = enc.embed_sequence(&ps, &tokens).unwrap();
        let h = enc.encode_sequence(&ps, &w).unwrap();
        let pooled = enc.pooled_embedding(&ps, &h, &tokens).unwrap();
        let proj = ps.get("text.pool_proj.w").unwrap();
        for j in 0..16 {
            let want: f64 = (0..16).map(|i| h.row(2)[i] * proj.data()[i * 16 + j]).sum();
            assert!((pooled.data()[j] - want).abs() < 1e-12);
        }
        let again = enc.pooled_embedding(&ps, &h, &tokens).unwrap();
        assert!(again.bit_eq(&pooled));
    }

    #[test]
    fn rejects_mismatched_sequences() {
        let (enc, ps, vocab) = setup();
        let long = vocab.tokenize("a dog", 9).unwrap();
        assert!(enc.embed_sequence(&ps, &long).is_err());
    }
}
