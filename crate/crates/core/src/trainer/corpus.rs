//! Deterministic synthetic corpora and batching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::CorpusKind;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// A token stream with a 90/5/5 train/valid/test split. Mixture corpora also
/// tag every token with the sub-language that produced it.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: usize,
    pub tokens: Vec<u32>,
    pub sublanguage: Vec<u8>,
    pub n_sublanguages: usize,
}

impl Corpus {
    pub fn split_bounds(&self, split: Split) -> (usize, usize) {
        let n = self.tokens.len();
        let train_end = n * 90 / 100;
        let valid_end = n * 95 / 100;
        match split {
            Split::Train => (0, train_end),
            Split::Valid => (train_end, valid_end),
            Split::Test => (valid_end, n),
        }
    }

    pub fn split_tokens(&self, split: Split) -> &[u32] {
        let (a, b) = self.split_bounds(split);
        &self.tokens[a..b]
    }

    /// Sub-language owning a token id (contiguous vocab ranges).
    pub fn sublanguage_of_token(&self, token: u32) -> usize {
        if self.n_sublanguages <= 1 {
            return 0;
        }
        let per = self.vocab / self.n_sublanguages;
        ((token as usize) / per).min(self.n_sublanguages - 1)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on the open unit interval.
    let u1 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Peaked per-state transition distributions over `width` symbols.
fn markov_table(rng: &mut ChaCha8Rng, width: usize) -> Vec<Vec<f64>> {
    (0..width)
        .map(|_| {
            let logits: Vec<f64> = (0..width).map(|_| 3.0 * normal(rng)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|e| e / sum).collect()
        })
        .collect()
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Generate a deterministic synthetic corpus.
///
/// - `markov`: one bigram language with peaked transitions.
/// - `copy`: blocks of 8 random tokens, each immediately repeated, so a model
///   with enough context can predict the second half of every block exactly.
/// - `mixture`: `sublanguages` disjoint Markov chains, each owning a
///   contiguous slice of the vocabulary, emitted in segments of 64 tokens.
pub fn make_corpus(kind: CorpusKind, size: usize, vocab: usize, seed: u64, sublanguages: usize) -> Result<Corpus> {
    if size == 0 {
        return Err(Error::InvalidParameter("corpus size must be at least 1".into()));
    }
    if vocab < 2 {
        return Err(Error::InvalidParameter(format!("vocab must be at least 2, got {vocab}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xC0_52);
    match kind {
        CorpusKind::Markov => {
            let table = markov_table(&mut rng, vocab);
            let mut tokens = Vec::with_capacity(size);
            let mut state = rng.random_range(0..vocab);
            for _ in 0..size {
                tokens.push(state as u32);
                state = sample_categorical(&mut rng, &table[state]);
            }
            Ok(Corpus { vocab, tokens, sublanguage: vec![0; size], n_sublanguages: 1 })
        }
        CorpusKind::Copy => {
            let block = 8;
            let mut tokens = Vec::with_capacity(size + 2 * block);
            while tokens.len() < size {
                let b: Vec<u32> = (0..block).map(|_| rng.random_range(0..vocab) as u32).collect();
                tokens.extend_from_slice(&b);
                tokens.extend_from_slice(&b);
            }
            tokens.truncate(size);
            Ok(Corpus { vocab, tokens, sublanguage: vec![0; size], n_sublanguages: 1 })
        }
        CorpusKind::Mixture => {
            let k = sublanguages;
            if k == 0 || vocab / k < 2 {
                return Err(Error::InvalidParameter(format!(
                    "mixture corpus needs vocab >= 2 per sub-language, got vocab {vocab} for {k}"
                )));
            }
            let per = vocab / k;
            let tables: Vec<Vec<Vec<f64>>> = (0..k).map(|_| markov_table(&mut rng, per)).collect();
            let segment = 64;
            let mut tokens = Vec::with_capacity(size + segment);
            let mut tags = Vec::with_capacity(size + segment);
            while tokens.len() < size {
                let lang = rng.random_range(0..k);
                let base = (lang * per) as u32;
                let mut state = rng.random_range(0..per);
                for _ in 0..segment {
                    tokens.push(base + state as u32);
                    tags.push(lang as u8);
                    state = sample_categorical(&mut rng, &tables[lang][state]);
                }
            }
            tokens.truncate(size);
            tags.truncate(size);
            Ok(Corpus { vocab, tokens, sublanguage: tags, n_sublanguages: k })
        }
    }
}

/// One training batch: `batch_size` windows of `seq_len` inputs with their
/// shifted targets, sampled uniformly from a split.
pub fn sample_batch(
    corpus: &Corpus,
    split: Split,
    batch_size: usize,
    seq_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let (start, end) = corpus.split_bounds(split);
    if end - start < seq_len + 1 {
        return Err(Error::EmptyBatch);
    }
    let mut inputs = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let s = rng.random_range(start..=(end - seq_len - 1));
        inputs.push(corpus.tokens[s..s + seq_len].iter().map(|&t| t as usize).collect());
        targets.push(corpus.tokens[s + 1..s + seq_len + 1].iter().map(|&t| t as usize).collect());
    }
    Ok((inputs, targets))
}

/// Deterministic non-overlapping evaluation windows covering a split.
pub fn eval_windows(corpus: &Corpus, split: Split, seq_len: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let (start, end) = corpus.split_bounds(split);
    let mut out = Vec::new();
    let mut s = start;
    while s + seq_len + 1 <= end {
        let inp = corpus.tokens[s..s + seq_len].iter().map(|&t| t as usize).collect();
        let tgt = corpus.tokens[s + 1..s + seq_len + 1].iter().map(|&t| t as usize).collect();
        out.push((inp, tgt));
        s += seq_len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_corpus() {
        let a = make_corpus(CorpusKind::Mixture, 5000, 64, 9, 4).unwrap();
        let b = make_corpus(CorpusKind::Mixture, 5000, 64, 9, 4).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.sublanguage, b.sublanguage);
    }

    #[test]
    fn copy_corpus_repeats_blocks() {
        let c = make_corpus(CorpusKind::Copy, 640, 2, 3, 0).unwrap();
        for chunk in c.tokens.chunks_exact(16) {
            assert_eq!(chunk[..8], chunk[8..]);
        }
        // In the language-model layout, targets are the shifted input by
        // construction.
        let (inp, tgt) =
            sample_batch(&c, Split::Train, 2, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (i, t) in inp.iter().zip(tgt.iter()) {
            assert_eq!(i[1..], t[..7]);
        }
    }

    #[test]
    fn bigram_model_beats_unigram_on_markov_corpus() {
        let c = make_corpus(CorpusKind::Markov, 50_000, 32, 11, 0).unwrap();
        let train = c.split_tokens(Split::Train);
        let valid = c.split_tokens(Split::Valid);
        let v = c.vocab;

        // Count models with add-one smoothing.
        let mut uni = vec![1.0f64; v];
        let mut bi = vec![vec![1.0f64; v]; v];
        for w in train.windows(2) {
            uni[w[1] as usize] += 1.0;
            bi[w[0] as usize][w[1] as usize] += 1.0;
        }
        let uni_total: f64 = uni.iter().sum();
        let bi_totals: Vec<f64> = bi.iter().map(|r| r.iter().sum()).collect();

        let mut uni_nll = 0.0;
        let mut bi_nll = 0.0;
        let mut count = 0.0;
        for w in valid.windows(2) {
            uni_nll -= (uni[w[1] as usize] / uni_total).ln();
            bi_nll -= (bi[w[0] as usize][w[1] as usize] / bi_totals[w[0] as usize]).ln();
            count += 1.0;
        }
        let uni_ppl = (uni_nll / count).exp();
        let bi_ppl = (bi_nll / count).exp();
        assert!(bi_ppl < uni_ppl, "bigram {bi_ppl} should beat unigram {uni_ppl}");
    }

    #[test]
    fn mixture_tokens_stay_in_their_sublanguage_range() {
        let c = make_corpus(CorpusKind::Mixture, 10_000, 64, 5, 4).unwrap();
        for (t, &lang) in c.tokens.iter().zip(c.sublanguage.iter()) {
            assert_eq!(c.sublanguage_of_token(*t), lang as usize);
        }
        // All four sub-languages appear.
        let mut seen = [false; 4];
        for &l in &c.sublanguage {
            seen[l as usize] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn splits_are_90_5_5() {
        let c = make_corpus(CorpusKind::Markov, 1000, 8, 0, 0).unwrap();
        assert_eq!(c.split_tokens(Split::Train).len(), 900);
        assert_eq!(c.split_tokens(Split::Valid).len(), 50);
        assert_eq!(c.split_tokens(Split::Test).len(), 50);
    }

    #[test]
    fn eval_windows_cover_split_without_overlap() {
        let c = make_corpus(CorpusKind::Markov, 1000, 8, 0, 0).unwrap();
        let windows = eval_windows(&c, Split::Valid, 16);
        assert_eq!(windows.len(), 50 / 16);
        for (inp, tgt) in &windows {
            assert_eq!(inp.len(), 16);
            assert_eq!(tgt.len(), 16);
        }
    }
}
