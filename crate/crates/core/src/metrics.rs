//! Character and word error rates.

use std::ops::{Add, AddAssign};

use crate::error::{HtrError, Result};

/// Decomposition of a minimal edit alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Error rate of the accumulated counts.
    pub fn rate(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(HtrError::Data("error rate undefined for empty references".into()));
        }
        Ok(self.distance() as f64 / self.ref_len as f64)
    }
}

impl Add for EditCounts {
    type Output = EditCounts;
    fn add(mut self, o: EditCounts) -> EditCounts {
        self += o;
        self
    }
}

impl AddAssign for EditCounts {
    fn add_assign(&mut self, o: EditCounts) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.ref_len += o.ref_len;
    }
}

impl std::iter::Sum for EditCounts {
    fn sum<I: Iterator<Item = EditCounts>>(iter: I) -> Self {
        iter.fold(EditCounts::default(), Add::add)
    }
}

/// Levenshtein alignment with unit costs. Among all minimal alignments the one
/// with the most substitutions is reported; insertions and deletions then
/// follow from the length difference, so swapping the arguments swaps them.
pub fn edit_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    // (distance, substitutions) per cell, ordered by min distance then max subs
    let mut d = vec![(0usize, 0usize); (n + 1) * w];
    for j in 0..=m {
        d[j] = (j, 0);
    }
    let better = |a: (usize, usize), b: (usize, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 > b.1);
    for i in 1..=n {
        d[i * w] = (i, 0);
        for j in 1..=m {
            let (pd, ps) = d[(i - 1) * w + j - 1];
            let mismatch = usize::from(reference[i - 1] != hyp[j - 1]);
            let mut best = (pd + mismatch, ps + mismatch);
            let ins = d[i * w + j - 1];
            let ins = (ins.0 + 1, ins.1);
            if better(ins, best) {
                best = ins;
            }
            let del = d[(i - 1) * w + j];
            let del = (del.0 + 1, del.1);
            if better(del, best) {
                best = del;
            }
            d[i * w + j] = best;
        }
    }
    let (dist, substitutions) = d[n * w + m];
    // dist = S + I + D and m = n - D + I
    let rest = dist - substitutions;
    let insertions = (rest + m - n) / 2;
    EditCounts {
        substitutions,
        insertions,
        deletions: rest - insertions,
        ref_len: n,
    }
}

pub fn char_counts(reference: &str, hyp: &str) -> EditCounts {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hyp.chars().collect();
    edit_counts(&r, &h)
}

pub fn word_counts(reference: &str, hyp: &str) -> EditCounts {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hyp.split_whitespace().collect();
    edit_counts(&r, &h)
}

fn corpus_counts<S: AsRef<str>>(
    refs: &[S],
    hyps: &[S],
    f: fn(&str, &str) -> EditCounts,
) -> Result<EditCounts> {
    if refs.len() != hyps.len() {
        return Err(HtrError::Data(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    Ok(refs.iter().zip(hyps).map(|(r, h)| f(r.as_ref(), h.as_ref())).sum())
}

/// Corpus character error rate; may exceed 1.
pub fn cer<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<f64> {
    corpus_counts(refs, hyps, char_counts)?.rate()
}

/// Corpus word error rate over whitespace-delimited tokens.
pub fn wer<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<f64> {
    corpus_counts(refs, hyps, word_counts)?.rate()
}

/// Running CER/WER totals over batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorTally {
    pub chars: EditCounts,
    pub words: EditCounts,
}

impl ErrorTally {
    pub fn push(&mut self, reference: &str, hyp: &str) {
        self.chars += char_counts(reference, hyp);
        self.words += word_counts(reference, hyp);
    }

    pub fn cer(&self) -> Result<f64> {
        self.chars.rate()
    }

    pub fn wer(&self) -> Result<f64> {
        self.words.rate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(s: usize, i: usize, d: usize, n: usize) -> EditCounts {
        EditCounts {
            substitutions: s,
            insertions: i,
            deletions: d,
            ref_len: n,
        }
    }

    #[test]
    fn edit_count_examples() {
        assert_eq!(char_counts("abc", "abc"), counts(0, 0, 0, 3));
        assert_eq!(char_counts("abc", "axc"), counts(1, 0, 0, 3));
        assert_eq!(char_counts("ab", ""), counts(0, 0, 2, 2));
        assert_eq!(char_counts("", "xy"), counts(0, 2, 0, 0));
    }

    #[test]
    fn tie_break_prefers_substitution_then_insertion() {
        // "ab" -> "ba": distance 2 reachable as 2 substitutions or ins+del
        assert_eq!(char_counts("ab", "ba"), counts(2, 0, 0, 2));
        // "a" -> "ba": one insertion, never sub+del
        assert_eq!(char_counts("a", "ba"), counts(0, 1, 0, 1));
    }

    #[test]
    fn cer_examples() {
        assert!((cer(&["abc"], &["axc"]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(cer(&["abc", "de"], &["abc", "de"]).unwrap(), 0.0);
        assert_eq!(cer(&["a"], &["abb"]).unwrap(), 2.0);
        assert!(cer(&[""], &["x"]).is_err());
        assert!(cer(&["a", "b"], &["a"]).is_err());
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["the cat"], &["the bat"]).unwrap(), 0.5);
        assert_eq!(wer(&["a b"], &["a b"]).unwrap(), 0.0);
        assert!((wer(&["a b c"], &["a c"]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(wer(&["   "], &["x"]).is_err());
    }

    #[test]
    fn tally_matches_corpus_functions() {
        let refs = ["hello world", "foo", "a b c"];
        let hyps = ["helo world", "fooo", "a c"];
        let mut t = ErrorTally::default();
        for (r, h) in refs.iter().zip(&hyps) {
            t.push(r, h);
        }
        assert_eq!(t.cer().unwrap(), cer(&refs, &hyps).unwrap());
        assert_eq!(t.wer().unwrap(), wer(&refs, &hyps).unwrap());
    }
}
