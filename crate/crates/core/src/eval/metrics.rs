use crate::autodiff::tensor::Tensor;
use crate::data::PhonemeBank;
use crate::error::{Error, Result};

/// Character error rate: unit-cost edit distance over the reference length.
pub fn cer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("character error rate needs a non-empty reference".into()));
    }
    Ok(strsim::generic_levenshtein(&Symbols(reference), &Symbols(hypothesis)) as f64 / reference.len() as f64)
}

/// Borrowed slice viewed as the iterable `strsim` expects.
struct Symbols<'a, T>(&'a [T]);

impl<'a, T> IntoIterator for &Symbols<'a, T> {
    type Item = &'a T;
    type IntoIter = std::slice::Iter<'a, T>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match,
    Substitute,
    /// A reference symbol missing from the hypothesis.
    Delete,
    /// A hypothesis symbol with no reference counterpart.
    Insert,
}

/// One step of a minimum-cost alignment. `reference` is the index of the
/// reference symbol consumed, or for insertions the index of the next one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignedOp {
    pub op: EditOp,
    pub reference: usize,
}

/// A minimum-cost edit script from `reference` to `hypothesis`. Ties prefer
/// match/substitute, then delete, then insert.
pub fn edit_alignment<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<AlignedOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[i * w + j] == d[(i - 1) * w + j - 1] + usize::from(!same) {
                let op = if same { EditOp::Match } else { EditOp::Substitute };
                ops.push(AlignedOp { op, reference: i - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i * w + j] == d[(i - 1) * w + j] + 1 {
            ops.push(AlignedOp {
                op: EditOp::Delete,
                reference: i - 1,
            });
            i -= 1;
        } else {
            ops.push(AlignedOp {
                op: EditOp::Insert,
                reference: i,
            });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Error rate restricted to the reference span `range`: substitutions and
/// deletions of span symbols plus insertions strictly inside the span, over
/// the span length.
pub fn span_error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T], range: std::ops::Range<usize>) -> Result<f64> {
    if range.is_empty() || range.end > reference.len() {
        return Err(Error::Contract(format!(
            "span {range:?} is empty or outside a reference of {}",
            reference.len()
        )));
    }
    let edits = edit_alignment(reference, hypothesis)
        .into_iter()
        .filter(|a| match a.op {
            EditOp::Match => false,
            EditOp::Substitute | EditOp::Delete => range.contains(&a.reference),
            EditOp::Insert => a.reference > range.start && a.reference < range.end,
        })
        .count();
    Ok(edits as f64 / range.len() as f64)
}

/// Decodes frames back to symbols: each run of `r` frames (the last run may be
/// shorter) is averaged and mapped to the nearest bank vector. Silence is
/// dropped, since references hold only phonemes.
pub fn frames_to_symbols(frames: &Tensor, bank: &PhonemeBank) -> Vec<usize> {
    let f = bank.dim();
    if frames.is_empty() {
        return Vec::new();
    }
    let r = bank.frames_per_phoneme;
    frames
        .data()
        .chunks(r * f)
        .map(|chunk| {
            let rows = chunk.len() / f;
            let mean: Vec<f64> = (0..f)
                .map(|k| (0..rows).map(|i| chunk[i * f + k]).sum::<f64>() / rows as f64)
                .collect();
            bank.nearest(&mean)
        })
        .filter(|&s| s != PhonemeBank::SILENCE)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::rng::SeededRng;
    use crate::data::{generate_toy_corpus, CorpusConfig};

    #[test]
    fn cer_examples() {
        assert_eq!(cer(b"abc", b"abc").unwrap(), 0.0);
        assert!((cer(b"abc", b"axc").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cer(b"ab", b"").unwrap(), 1.0);
        assert_eq!(cer(b"a", b"xyz").unwrap(), 3.0);
        assert!(cer::<u8>(b"", b"a").is_err());
    }

    #[test]
    fn alignment_cost_equals_distance() {
        let mut rng = SeededRng::new(1);
        for _ in 0..500 {
            let a: Vec<usize> = (0..rng.below(9)).map(|_| rng.below(3)).collect();
            let b: Vec<usize> = (0..rng.below(9)).map(|_| rng.below(3)).collect();
            let ops = edit_alignment(&a, &b);
            let cost = ops.iter().filter(|o| o.op != EditOp::Match).count();
            assert_eq!(cost, strsim::generic_levenshtein(&a, &b));
            assert_eq!(ops.iter().filter(|o| o.op != EditOp::Insert).count(), a.len());
            assert_eq!(ops.iter().filter(|o| o.op != EditOp::Delete).count(), b.len());
        }
    }

    #[test]
    fn span_errors_stay_in_their_span() {
        let reference = [1, 2, 3, 4, 5, 6];
        assert_eq!(span_error_rate(&reference, &[1, 2, 9, 9, 5, 6], 2..4).unwrap(), 1.0);
        assert_eq!(span_error_rate(&reference, &[1, 2, 9, 9, 5, 6], 0..2).unwrap(), 0.0);
        assert_eq!(span_error_rate(&reference, &[1, 2, 3, 7, 4, 5, 6], 2..4).unwrap(), 0.5);
        assert!(span_error_rate(&reference, &reference, 4..9).is_err());
    }

    #[test]
    fn clean_frames_decode_to_their_phonemes() {
        let cfg = CorpusConfig {
            train_per_language: 20,
            val_per_language: 0,
            test_per_language: 0,
            outlier_fraction: 0.3,
            ..CorpusConfig::default()
        };
        let corpus = generate_toy_corpus(&cfg, 5).unwrap();
        for u in &corpus.utterances {
            assert_eq!(frames_to_symbols(&u.frames, &corpus.bank), corpus.reference_phonemes(u), "{}", u.id);
        }
        assert!(frames_to_symbols(&Tensor::zeros(&[0, 8]), &corpus.bank).is_empty());
    }
}
