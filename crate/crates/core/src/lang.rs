//! Tokenization, word embeddings, spatial coordinate features and the
//! per-word multimodal feature map.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reserved index for padding slots.
pub const PAD: usize = 0;
/// Reserved index for out-of-vocabulary tokens.
pub const UNK: usize = 1;

/// Number of spatial coordinate channels.
pub const SPATIAL_DIMS: usize = 8;

/// Case-folded token table with reserved indices 0 = PAD and 1 = UNK.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    map: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from an iterator of tokens; duplicates are collapsed, order of
    /// first appearance is kept.
    pub fn from_tokens<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut map = HashMap::new();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !map.contains_key(&w) {
                map.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Vocabulary { tokens, map }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    /// Index of a token, case-folded; unknown tokens map to UNK.
    pub fn lookup(&self, word: &str) -> usize {
        self.map.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    /// One token per line; line number equals index - 2 (0 and 1 reserved).
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens[2..].join("\n");
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(Self::from_tokens(
            text.lines().map(|l| l.trim()).filter(|l| !l.is_empty()),
        ))
    }
}

/// A tokenized expression padded to a fixed number of slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    indices: Vec<usize>,
    n_real: usize,
}

impl TokenSequence {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Indices of the real (non-PAD) tokens.
    pub fn valid(&self) -> &[usize] {
        &self.indices[..self.n_real]
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn n_max(&self) -> usize {
        self.indices.len()
    }

    /// Validity mask over all slots: n_real ones followed by zeros.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.indices.len()).map(|i| i < self.n_real).collect()
    }

    pub fn from_indices(valid: &[usize], n_max: usize) -> Result<Self> {
        if valid.is_empty() || valid.len() > n_max {
            return Err(Error::Input(format!(
                "token count {} outside 1..={}",
                valid.len(),
                n_max
            )));
        }
        let mut indices = valid.to_vec();
        indices.resize(n_max, PAD);
        Ok(TokenSequence {
            indices,
            n_real: valid.len(),
        })
    }
}

/// Lowercase, split on whitespace and punctuation, map through the
/// vocabulary (unknown -> UNK), truncate to `n_max`, pad with PAD.
pub fn tokenize(expr: &str, vocab: &Vocabulary, n_max: usize) -> Result<TokenSequence> {
    let lowered = expr.to_lowercase();
    let words: Vec<&str> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Err(Error::Input(format!("empty expression: {expr:?}")));
    }
    let valid: Vec<usize> = words.iter().take(n_max).map(|w| vocab.lookup(w)).collect();
    TokenSequence::from_indices(&valid, n_max)
}

/// Learnable word-embedding table; the PAD row is held at zero.
pub struct WordEmbedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub c_l: usize,
}

impl WordEmbedding {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        c_l: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut table = Tensor::rand_uniform(&[vocab_size, c_l], -0.08, 0.08, rng);
        table.data_mut()[..c_l].fill(T::zero()); // PAD row
        let table = store.add("embed.table", table);
        WordEmbedding {
            table,
            vocab_size,
            c_l,
        }
    }

    /// Re-zero the PAD row (e.g. after an optimizer step).
    pub fn enforce_pad_row<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c_l = self.c_l;
        store.get_mut(self.table).data_mut()[..c_l].fill(T::zero());
    }
}

/// Look up embedding rows for token indices: output is [len, C_l].
pub fn embed<T: Scalar>(g: &mut Graph<T>, table: Var, tokens: &[usize]) -> Result<Var> {
    g.gather_rows(table, tokens)
}

/// The 8-D spatial coordinate map, shaped [8, H, W].
///
/// For a cell at column x: channels 0..3 hold (2x/W - 1, (2x+1)/W - 1,
/// 2(x+1)/W - 1); channels 3..6 hold the analogous row features; channels
/// 6..8 hold (1/W, 1/H).
pub fn spatial_coords<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); SPATIAL_DIMS * h * w];
    let wf = w as f64;
    let hf = h as f64;
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let xf = x as f64;
            let yf = y as f64;
            let vals = [
                2.0 * xf / wf - 1.0,
                (2.0 * xf + 1.0) / wf - 1.0,
                2.0 * (xf + 1.0) / wf - 1.0,
                2.0 * yf / hf - 1.0,
                (2.0 * yf + 1.0) / hf - 1.0,
                2.0 * (yf + 1.0) / hf - 1.0,
                1.0 / wf,
                1.0 / hf,
            ];
            for (c, &v) in vals.iter().enumerate() {
                data[c * plane + p] = T::from_f64(v);
            }
        }
    }
    Tensor::new(vec![SPATIAL_DIMS, h, w], data).expect("spatial coord shape")
}

/// Concatenate (normalized visual, normalized word, spatial) per position
/// and word slot: output is [N, H, W, C_v + C_l + 8].
///
/// Rows of `e` belonging to PAD slots are zero and stay zero under the
/// eps-guarded normalization.
pub fn build_multimodal<T: Scalar>(g: &mut Graph<T>, v: Var, e: Var, s: Var) -> Result<Var> {
    let sv = g.shape(v).to_vec();
    let se = g.shape(e).to_vec();
    let ss = g.shape(s).to_vec();
    if sv.len() != 3 || se.len() != 2 || ss.len() != 3 {
        return Err(Error::Shape(format!(
            "build_multimodal expects v [C,H,W], e [N,C_l], s [8,H,W]; got {:?} {:?} {:?}",
            sv, se, ss
        )));
    }
    if ss[0] != SPATIAL_DIMS || ss[1] != sv[1] || ss[2] != sv[2] {
        return Err(Error::Shape(format!(
            "spatial map {:?} does not match visual {:?}",
            ss, sv
        )));
    }
    let (c_v, h, w) = (sv[0], sv[1], sv[2]);
    let (n, c_l) = (se[0], se[1]);
    let eps = T::from_f64(1e-12);

    let vn = g.l2_normalize(v, 0, eps)?;
    let vn = g.permute(vn, &[1, 2, 0])?; // [H,W,C_v]
    let vn = g.reshape(vn, &[1, h, w, c_v])?;
    let vn = g.broadcast_to(vn, &[n, h, w, c_v])?;

    let en = g.l2_normalize(e, 1, eps)?;
    let en = g.reshape(en, &[n, 1, 1, c_l])?;
    let en = g.broadcast_to(en, &[n, h, w, c_l])?;

    let sp = g.permute(s, &[1, 2, 0])?; // [H,W,8]
    let sp = g.reshape(sp, &[1, h, w, SPATIAL_DIMS])?;
    let sp = g.broadcast_to(sp, &[n, h, w, SPATIAL_DIMS])?;

    g.concat(&[vn, en, sp], 3)
}
