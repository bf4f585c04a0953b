//! Sliding-window perplexity and passkey retrieval.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SyntheticLanguage, SyntheticVocab};
use crate::error::{Error, Result};
use crate::model::transformer::{self, Inputs};
use crate::model::ParameterSet;
use crate::rope::{effective_rope, InterpolationStrategy, RopeParams};

/// Largest position index the phase computation is validated for.
pub const MAX_POSITION: usize = (1 << 31) - 1;

/// Anything that maps one token sequence with position indices to per-slot
/// next-token logits.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    fn sequence_logits(&self, tokens: &[u32], positions: &[usize]) -> Result<Array2<f64>>;
}

/// A trained parameter set evaluated under a (possibly different) interpolation.
pub struct EvalModel<'p> {
    params: &'p ParameterSet,
    rope: RopeParams,
}

impl<'p> EvalModel<'p> {
    /// Uses the interpolation stored in the model config.
    pub fn new(params: &'p ParameterSet) -> Result<Self> {
        Ok(Self {
            params,
            rope: params.config.rope()?,
        })
    }

    pub fn with_strategy(params: &'p ParameterSet, strategy: &InterpolationStrategy) -> Result<Self> {
        let base = RopeParams::new(params.config.head_dim(), params.config.rope_base)?;
        Ok(Self {
            params,
            rope: effective_rope(strategy, &base, params.config.train_window)?,
        })
    }
}

impl NextTokenScorer for EvalModel<'_> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn sequence_logits(&self, tokens: &[u32], positions: &[usize]) -> Result<Array2<f64>> {
        transformer::logits(
            self.params,
            &self.rope,
            &Inputs {
                tokens,
                positions,
                batch: 1,
                seq_len: tokens.len(),
            },
        )
    }
}

/// One evaluation window over prediction slots `start..end`; slots
/// `score_from..end` are counted. Slot `i` predicts token `i + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoringWindow {
    pub start: usize,
    pub end: usize,
    pub score_from: usize,
}

/// Windows at starts `0, stride, 2*stride, ..` until every slot in
/// `0..slots` has been scored once.
pub fn window_schedule(slots: usize, window: usize, stride: usize) -> Result<Vec<ScoringWindow>> {
    if window < 1 || stride < 1 || stride > window {
        return Err(Error::config(format!(
            "need 1 <= stride ({stride}) <= window ({window})"
        )));
    }
    let mut out = Vec::new();
    let mut scored = 0;
    let mut start = 0;
    while scored < slots {
        let end = (start + window).min(slots);
        out.push(ScoringWindow {
            start,
            end,
            score_from: scored,
        });
        scored = end;
        start += stride;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub scored_tokens: usize,
    pub windows: usize,
}

/// Perplexity of `tokens` scored window by window with positions `0..window`.
pub fn sliding_window_perplexity<M: NextTokenScorer>(
    model: &M,
    tokens: &[u32],
    eval_window: usize,
    stride: usize,
) -> Result<PerplexityReport> {
    if eval_window > MAX_POSITION {
        return Err(Error::config(format!("window {eval_window} exceeds {MAX_POSITION}")));
    }
    if tokens.len() < eval_window + 1 {
        return Err(Error::TextTooShort {
            needed: eval_window + 1,
            available: tokens.len(),
        });
    }
    let schedule = window_schedule(tokens.len() - 1, eval_window, stride)?;
    let mut total = 0.0;
    let mut scored = 0;
    for w in &schedule {
        let inputs = &tokens[w.start..w.end];
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let logits = model.sequence_logits(inputs, &positions)?;
        let skip = w.score_from - w.start;
        let targets = &tokens[w.score_from + 1..w.end + 1];
        let nll = transformer::token_nll(&logits.slice(ndarray::s![skip.., ..]), targets)?;
        total += nll.iter().sum::<f64>();
        scored += nll.len();
    }
    let mean_nll = total / scored as f64;
    Ok(PerplexityReport {
        perplexity: mean_nll.exp(),
        mean_nll,
        scored_tokens: scored,
        windows: schedule.len(),
    })
}

/// A synthetic retrieval prompt.
///
/// ```text
/// filler.. K d1..d5 filler.. Q K | d1..d5
/// ```
///
/// The prompt ends with the query marker and the key; the answer is the digit
/// sequence that followed the key's only earlier occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasskeyExample {
    pub prompt_tokens: Vec<u32>,
    pub passkey_digits: String,
    /// Index of the key marker that introduces the passkey.
    pub insert_position: usize,
    pub answer_tokens: Vec<u32>,
}

impl PasskeyExample {
    /// Prompt plus answer length.
    pub fn total_len(&self) -> usize {
        self.prompt_tokens.len() + self.answer_tokens.len()
    }
}

fn digit_tokens(vocab: &SyntheticVocab, digits: &str) -> Vec<u32> {
    digits
        .chars()
        .map(|c| vocab.digit(c.to_digit(10).expect("decimal digit")))
        .collect()
}

/// Smallest `total_len` accepted by [`make_passkey_example`].
pub fn min_passkey_len(lang: &SyntheticLanguage) -> usize {
    2 * lang.spec.value_digits + 4
}

/// Builds a prompt whose prompt-plus-answer length is `total_len`, with the
/// passkey statement at a uniformly random offset within the filler.
pub fn make_passkey_example<R: Rng + ?Sized>(
    total_len: usize,
    rng: &mut R,
    lang: &SyntheticLanguage,
) -> Result<PasskeyExample> {
    let vocab = lang.vocab();
    let digits = lang.spec.value_digits;
    if total_len < min_passkey_len(lang) {
        return Err(Error::config(format!(
            "passkey prompt length {total_len} below minimum {}",
            min_passkey_len(lang)
        )));
    }
    let filler = total_len - (2 * digits + 3);
    let passkey: String = (0..digits)
        .map(|_| char::from_digit(rng.random_range(0..10), 10).expect("digit"))
        .collect();
    let key = vocab.key(rng.random_range(0..vocab.key_count));
    let insert = rng.random_range(0..=filler);
    let answer = digit_tokens(vocab, &passkey);

    let mut stream = lang.table.stream(rng);
    let mut prompt = Vec::with_capacity(total_len);
    stream.fill(&lang.table, insert, &mut prompt, rng);
    prompt.push(key);
    prompt.extend_from_slice(&answer);
    stream.fill(&lang.table, filler - insert, &mut prompt, rng);
    prompt.push(vocab.query_marker());
    prompt.push(key);
    Ok(PasskeyExample {
        prompt_tokens: prompt,
        passkey_digits: passkey,
        insert_position: insert,
        answer_tokens: answer,
    })
}

/// Reads back the digit string that follows the first key statement.
pub fn extract_passkey(tokens: &[u32], vocab: &SyntheticVocab, digits: usize) -> Option<String> {
    (0..tokens.len()).find_map(|i| {
        let is_statement = vocab.is_key(tokens[i]) && (i == 0 || tokens[i - 1] != vocab.query_marker());
        let value = tokens.get(i + 1..i + 1 + digits)?;
        if !is_statement || !value.iter().all(|&t| t < SyntheticVocab::DIGITS) {
            return None;
        }
        value.iter().map(|&t| char::from_digit(t, 10)).collect()
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of the answer slot reproduces every digit.
///
/// Greedy decoding stays on the reference prefix as long as each step is
/// correct, so one forward pass over `prompt + answer[..n-1]` decides it.
pub fn passkey_success<M: NextTokenScorer>(model: &M, ex: &PasskeyExample) -> Result<bool> {
    let mut seq = ex.prompt_tokens.clone();
    seq.extend_from_slice(&ex.answer_tokens[..ex.answer_tokens.len() - 1]);
    let positions: Vec<usize> = (0..seq.len()).collect();
    let logits = model.sequence_logits(&seq, &positions)?;
    let first = ex.prompt_tokens.len() - 1;
    Ok(ex
        .answer_tokens
        .iter()
        .enumerate()
        .all(|(i, &t)| argmax(logits.row(first + i)) == t as usize))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PasskeyResult {
    pub length: usize,
    pub trials: usize,
    pub successes: usize,
    pub accuracy: f64,
}

pub fn passkey_sweep<M: NextTokenScorer, R: Rng + ?Sized>(
    model: &M,
    lang: &SyntheticLanguage,
    lengths: &[usize],
    trials: usize,
    rng: &mut R,
) -> Result<Vec<PasskeyResult>> {
    if trials < 1 {
        return Err(Error::config("passkey trials must be at least 1"));
    }
    lengths
        .iter()
        .map(|&length| {
            let mut successes = 0;
            for _ in 0..trials {
                let ex = make_passkey_example(length, rng, lang)?;
                successes += usize::from(passkey_success(model, &ex)?);
            }
            Ok(PasskeyResult {
                length,
                trials,
                successes,
                accuracy: successes as f64 / trials as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lang() -> SyntheticLanguage {
        SyntheticLanguage::new(SyntheticSpec::default()).unwrap()
    }

    #[test]
    fn schedule_scores_each_slot_once() {
        let w = window_schedule(12, 8, 4).unwrap();
        assert_eq!(
            w,
            vec![
                ScoringWindow { start: 0, end: 8, score_from: 0 },
                ScoringWindow { start: 4, end: 12, score_from: 8 },
            ]
        );
        assert_eq!(window_schedule(10, 10, 10).unwrap().len(), 1);
        assert!(window_schedule(10, 4, 5).is_err());
        assert!(window_schedule(10, 4, 0).is_err());
    }

    #[test]
    fn passkey_example_is_deterministic_and_consistent() {
        let lang = lang();
        let a = make_passkey_example(256, &mut ChaCha8Rng::seed_from_u64(8), &lang).unwrap();
        let b = make_passkey_example(256, &mut ChaCha8Rng::seed_from_u64(8), &lang).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total_len(), 256);
        assert_eq!(a.passkey_digits.len(), 5);
        let found = extract_passkey(&a.prompt_tokens, lang.vocab(), 5).unwrap();
        assert_eq!(found, a.passkey_digits);
        assert_eq!(a.answer_tokens, digit_tokens(lang.vocab(), &a.passkey_digits));
        assert!(lang.vocab().is_key(a.prompt_tokens[a.insert_position]));
        let q = lang.vocab().query_marker();
        assert_eq!(a.prompt_tokens[a.prompt_tokens.len() - 2], q);
    }

    #[test]
    fn passkey_too_short_is_config_error() {
        let lang = lang();
        assert!(matches!(
            make_passkey_example(10, &mut ChaCha8Rng::seed_from_u64(0), &lang),
            Err(Error::InvalidConfig(_))
        ));
        assert!(make_passkey_example(min_passkey_len(&lang), &mut ChaCha8Rng::seed_from_u64(0), &lang).is_ok());
    }

    #[test]
    fn passkey_digits_appear_once() {
        let lang = lang();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let ex = make_passkey_example(128, &mut rng, &lang).unwrap();
            let digit_slots = ex.prompt_tokens.iter().filter(|&&t| t < 10).count();
            assert_eq!(digit_slots, 5);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let row = ndarray::arr1(&[0.5, 2.0, 2.0, 1.0]);
        assert_eq!(argmax(row.view()), 1);
    }
}
