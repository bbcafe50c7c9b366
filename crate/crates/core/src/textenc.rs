//! Word embeddings, one self-attention block and phrase pooling.

use dynprompt_autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::config::TextConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Attention, Ffn, Init, LayerNorm};

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: Ffn,
    pub dim: usize,
}

/// Sinusoidal position code `[m, dim]`.
pub fn position_encoding(m: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * dim];
    for pos in 0..m {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * freq;
            out[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

impl TextEncoder {
    pub fn new(init: &mut Init, prefix: &str, vocab_len: usize, cfg: &TextConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            embedding: init.uniform(&join(prefix, "embedding"), &[vocab_len, d], 1.0)?,
            ln1: LayerNorm::new(init, &join(prefix, "ln1"), d)?,
            attn: Attention::new(init, &join(prefix, "attn"), d, d, d, d, cfg.heads)?,
            ln2: LayerNorm::new(init, &join(prefix, "ln2"), d)?,
            ffn: Ffn::new(init, &join(prefix, "ffn"), d, 2 * d, d)?,
            dim: d,
        })
    }

    /// Word features `[M, C_t]` for a caption given as vocabulary ids.
    pub fn encode_words<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Validation("caption has no words".into()));
        }
        let table = g.param(s, self.embedding);
        let vocab = g.shape(table)[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Validation(format!("word id {bad} outside vocabulary of {vocab}")));
        }
        let e = g.gather_rows(table, ids)?;
        let pe = g.constant(Tensor::from_f64([ids.len(), self.dim], &position_encoding(ids.len(), self.dim))?);
        let x = g.add(e, pe)?;
        let h = self.ln1.forward(g, s, x)?;
        let a = self.attn.forward(g, s, h, h, None, false)?.out;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, s, x)?;
        let f = self.ffn.forward(g, s, h)?;
        Ok(g.add(x, f)?)
    }
}

/// Averaging matrix `[N, M]` whose row `j` is uniform over span `j`.
pub fn pooling_matrix(spans: &[[usize; 2]], m: usize) -> Result<Tensor<f64>> {
    let mut data = vec![0.0; spans.len() * m];
    for (j, &[a, b]) in spans.iter().enumerate() {
        if a >= b || b > m {
            return Err(Error::Validation(format!("phrase span [{a}, {b}) invalid for {m} words")));
        }
        let w = 1.0 / (b - a) as f64;
        data[j * m + a..j * m + b].iter_mut().for_each(|v| *v = w);
    }
    Ok(Tensor::new(vec![spans.len(), m], data)?)
}

/// Phrase embeddings `[N, C_t]`: each row is the mean of its span's words.
pub fn pool_phrases<T: Real>(g: &mut Graph<T>, words: Var, spans: &[[usize; 2]]) -> Result<Var> {
    let (m, c) = (g.shape(words)[0], g.shape(words)[1]);
    if spans.is_empty() {
        return Ok(g.constant(Tensor::zeros([0, c])));
    }
    let p = g.constant(pooling_matrix(spans, m)?.cast());
    Ok(g.matmul(p, words)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> (TextEncoder, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut Init::new(&mut store, 3), "text", 7, &TextConfig { dim: 8, heads: 2 }).unwrap();
        (enc, store)
    }

    #[test]
    fn one_word_shape() {
        let (enc, s) = encoder();
        let mut g = Graph::inference();
        let w = enc.encode_words(&mut g, &s, &[4]).unwrap();
        assert_eq!(g.shape(w), &[1, 8]);
    }

    #[test]
    fn unknown_id_is_rejected() {
        let (enc, s) = encoder();
        let mut g = Graph::inference();
        assert!(enc.encode_words(&mut g, &s, &[7]).is_err());
    }

    #[test]
    fn pooling_matches_worked_example() {
        let mut g = Graph::<f32>::inference();
        let w = g.constant(Tensor::from_f64([2, 2], &[1.0, 3.0, 3.0, 1.0]).unwrap());
        let p = pool_phrases(&mut g, w, &[[0, 2], [1, 2]]).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn empty_span_rejected() {
        assert!(pooling_matrix(&[[2, 2]], 4).is_err());
        assert!(pooling_matrix(&[[1, 5]], 4).is_err());
    }

    #[test]
    fn position_code_first_row() {
        let pe = position_encoding(2, 4);
        assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
    }
}
