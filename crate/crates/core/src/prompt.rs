//! Antonym prompt pairs with a shared learnable context, and the frozen toy
//! text encoder that turns them into `M x d_tau` embeddings.
//!
//! A prompt is laid out as `<bos> ctx_1 .. ctx_L attr_1 .. attr_k <eos>`, so
//! `M = L + k + 2`. Context rows are injected straight into the token
//! embedding slots and are the only encoder-side parameters that can train.

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{seeded_rng, SeededRng};

pub const DEFAULT_CONTEXT_LEN: usize = 16;
pub const CONTEXT_INIT_STD: f64 = 0.02;
/// Begin and end markers wrapped around every prompt.
pub const MARKER_TOKENS: usize = 2;

const VOCAB: &[&str] = &[
    "<bos>", "<eos>", ".", ",", "!", "a", "an", "the", "of", "photo", "image", "picture", "good",
    "bad", "high", "low", "quality", "definition", "resolution", "sharp", "blurry", "clear",
    "noisy", "clean", "distorted", "excellent", "poor", "great", "terrible", "fine", "nice",
    "ugly", "best", "worst", "perfect",
];

const BOS: usize = 0;
const EOS: usize = 1;

/// Word-level vocabulary over a fixed word list.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            words: VOCAB.iter().map(|w| w.to_string()).collect(),
        }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Lowercases, splits on whitespace and peels `. , !` off as tokens.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for raw in text.split_whitespace() {
            let lower = raw.to_lowercase();
            let word = lower.trim_end_matches(['.', ',', '!']);
            let punct = &lower[word.len()..];
            if !word.is_empty() {
                ids.push(self.id(word).ok_or_else(|| Error::Tokenization(word.to_string()))?);
            }
            for p in punct.chars() {
                let p = p.to_string();
                ids.push(self.id(&p).ok_or(Error::Tokenization(p))?);
            }
        }
        if ids.is_empty() {
            return Err(Error::Tokenization(text.to_string()));
        }
        Ok(ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptMode {
    /// Average of the positive and negative prompt predictions.
    Antonym,
    /// Positive prompt only.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// Shared context plus fixed positive/negative attribute tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPair {
    /// `L x d_tau`, shared by both prompts.
    pub context: Array2<f64>,
    pub pos_tokens: Vec<usize>,
    pub neg_tokens: Vec<usize>,
    pub trainable: bool,
    pub mode: PromptMode,
}

impl PromptPair {
    pub fn context_len(&self) -> usize {
        self.context.nrows()
    }

    pub fn attribute(&self, which: Polarity) -> &[usize] {
        match which {
            Polarity::Positive => &self.pos_tokens,
            Polarity::Negative => &self.neg_tokens,
        }
    }

    /// Text length `M` of the prompt for `which`.
    pub fn text_len(&self, which: Polarity) -> usize {
        self.context_len() + self.attribute(which).len() + MARKER_TOKENS
    }

    /// Polarities consumed by the scoring path.
    pub fn polarities(&self) -> &'static [Polarity] {
        match self.mode {
            PromptMode::Antonym => &[Polarity::Positive, Polarity::Negative],
            PromptMode::Single => &[Polarity::Positive],
        }
    }
}

/// Tokenizes the attribute phrases and draws the context from `seed`.
pub fn build_prompt_pair(
    vocab: &Vocabulary,
    pos_text: &str,
    neg_text: &str,
    context_len: usize,
    d_tau: usize,
    seed: u64,
) -> Result<PromptPair> {
    if context_len == 0 {
        return Err(Error::Prompt("context length must be >= 1".into()));
    }
    let pos_tokens = vocab.tokenize(pos_text)?;
    let neg_tokens = vocab.tokenize(neg_text)?;
    if pos_tokens == neg_tokens {
        return Err(Error::Prompt(format!(
            "positive and negative attributes must differ (`{pos_text}` vs `{neg_text}`)"
        )));
    }
    let mut rng = seeded_rng(seed);
    let context = Array2::from_shape_simple_fn((context_len, d_tau), || {
        CONTEXT_INIT_STD * rng.sample::<f64, _>(StandardNormal)
    });
    Ok(PromptPair {
        context,
        pos_tokens,
        neg_tokens,
        trainable: true,
        mode: PromptMode::Antonym,
    })
}

/// Same pair, scored through the positive prompt only.
pub fn single_prompt_mode(pair: &PromptPair) -> PromptPair {
    PromptPair {
        mode: PromptMode::Single,
        ..pair.clone()
    }
}

/// Frozen toy text encoder: `gain * (token_embedding + position) * P^T` with
/// `P` a random orthogonal matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub vocab: Vocabulary,
    /// `|V| x d_tau`
    pub token_table: Array2<f64>,
    /// `max_len x d_tau`
    pub positions: Array2<f64>,
    /// `d_tau x d_tau`, orthogonal.
    pub projection: Array2<f64>,
    pub gain: f64,
}

impl TextEncoder {
    pub fn toy(d_tau: usize, max_len: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let vocab = Vocabulary::default();
        let token_table = gaussian((vocab.len(), d_tau), CONTEXT_INIT_STD, &mut rng);
        let positions = gaussian((max_len, d_tau), 0.01, &mut rng);
        let projection = random_orthogonal(d_tau, &mut rng);
        Self {
            vocab,
            token_table,
            positions,
            projection,
            gain: 1.0 / CONTEXT_INIT_STD,
        }
    }

    pub fn width(&self) -> usize {
        self.projection.nrows()
    }

    pub fn max_len(&self) -> usize {
        self.positions.nrows()
    }

    /// Input embedding rows of a prompt before the encoder body.
    fn input_rows(&self, pair: &PromptPair, which: Polarity) -> Result<Array2<f64>> {
        let m = pair.text_len(which);
        let d = self.width();
        if pair.context.ncols() != d {
            return Err(Error::shape(format!("context width {d}"), pair.context.ncols()));
        }
        if m > self.max_len() {
            return Err(Error::Prompt(format!(
                "prompt length {m} exceeds encoder maximum {}",
                self.max_len()
            )));
        }
        let l = pair.context_len();
        let mut rows = Array2::zeros((m, d));
        rows.row_mut(0).assign(&self.token_table.row(BOS));
        rows.slice_mut(s![1..=l, ..]).assign(&pair.context);
        for (j, &tok) in pair.attribute(which).iter().enumerate() {
            if tok >= self.token_table.nrows() {
                return Err(Error::Tokenization(format!("token id {tok}")));
            }
            rows.row_mut(l + 1 + j).assign(&self.token_table.row(tok));
        }
        rows.row_mut(m - 1).assign(&self.token_table.row(EOS));
        Ok(rows)
    }

    /// Gradient w.r.t. the shared context given the gradient w.r.t. the
    /// encoded matrix of one prompt.
    pub fn context_grad(&self, pair: &PromptPair, d_text: &Array2<f64>) -> Array2<f64> {
        let l = pair.context_len();
        d_text.slice(s![1..=l, ..]).dot(&self.projection) * self.gain
    }
}

/// `M x d_tau` embedding of the positive or negative prompt.
pub fn encode_prompt(pair: &PromptPair, which: Polarity, encoder: &TextEncoder) -> Result<Array2<f64>> {
    let rows = encoder.input_rows(pair, which)?;
    let m = rows.nrows();
    let with_pos = rows + encoder.positions.slice(s![..m, ..]);
    Ok(with_pos.dot(&encoder.projection.t()) * encoder.gain)
}

fn gaussian(shape: (usize, usize), std: f64, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || std * rng.sample::<f64, _>(StandardNormal))
}

/// Modified Gram-Schmidt on a Gaussian matrix.
pub(crate) fn random_orthogonal(n: usize, rng: &mut SeededRng) -> Array2<f64> {
    let mut m = gaussian((n, n), 1.0, rng);
    for i in 0..n {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m
}
