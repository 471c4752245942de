use ndarray::Array2;

use super::vocab::{Vocab, BOS_ID, EOS_ID, PAD_ID};
use crate::corpus::{ApeTriplet, ParallelPair};
use crate::error::{Error, Result};
use crate::qe::QeAnnotation;

/// One example in subword ids, unpadded.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub source: Vec<usize>,
    /// Empty for NMT examples.
    pub translation: Vec<usize>,
    /// Index of the first subword of each kept MT word within `translation`.
    pub word_starts: Vec<usize>,
    pub target: Vec<usize>,
    pub da: Option<f64>,
    /// OK/BAD class per kept MT word.
    pub word_tags: Vec<usize>,
}

/// Converts triplets and parallel pairs into [`Example`]s under a length limit.
pub struct ExampleBuilder<'a> {
    pub vocab: &'a Vocab,
    pub max_len: usize,
    pub strict: bool,
}

impl<'a> ExampleBuilder<'a> {
    fn limit(&self, mut ids: Vec<usize>, what: &str) -> Result<Vec<usize>> {
        if ids.len() > self.max_len {
            if self.strict {
                return Err(Error::Data(format!(
                    "{what} of {} subwords exceeds max_len {}",
                    ids.len(),
                    self.max_len
                )));
            }
            ids.truncate(self.max_len);
        }
        Ok(ids)
    }

    pub fn parallel(&self, pair: &ParallelPair, prefix: Option<&str>) -> Result<Example> {
        let mut words = Vec::new();
        if let Some(p) = prefix {
            if pair.source.first().map(String::as_str) != Some(p) {
                words.push(p.to_string());
            }
        }
        words.extend(pair.source.iter().cloned());
        Ok(Example {
            source: self.limit(self.vocab.encode_words(&words).0, "source")?,
            translation: Vec::new(),
            word_starts: Vec::new(),
            target: self.limit(self.vocab.encode_words(&pair.reference).0, "reference")?,
            da: None,
            word_tags: Vec::new(),
        })
    }

    /// `da` is passed through unchanged; callers normalize it.
    pub fn triplet(&self, t: &ApeTriplet, annotation: Option<&QeAnnotation>) -> Result<Example> {
        let (mt, starts) = self.vocab.encode_words(&t.translation);
        let mt = self.limit(mt, "translation")?;
        let kept = starts.iter().take_while(|&&s| s < mt.len()).count();
        let (da, word_tags) = match annotation {
            Some(a) => (
                a.da_score.filter(|_| a.da_available),
                a.word_tags[..kept].iter().map(|t| t.class()).collect(),
            ),
            None => (None, Vec::new()),
        };
        Ok(Example {
            source: self.limit(self.vocab.encode_words(&t.source).0, "source")?,
            translation: mt,
            word_starts: starts[..kept].to_vec(),
            target: self.limit(self.vocab.encode_words(&t.post_edit).0, "post-edit")?,
            da,
            word_tags,
        })
    }
}

/// Padded batch with masks. Decoder input is bos + target, decoder output
/// (`target_ids`) is target + eos; both share `target_mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source_ids: Array2<usize>,
    pub source_mask: Array2<bool>,
    pub translation_ids: Array2<usize>,
    pub translation_mask: Array2<bool>,
    pub decoder_input: Array2<usize>,
    pub target_ids: Array2<usize>,
    pub target_mask: Array2<bool>,
    pub da: Vec<f64>,
    pub da_mask: Vec<bool>,
    pub word_tags: Array2<usize>,
    pub word_mask: Array2<bool>,
    pub word_starts: Vec<Vec<usize>>,
}

fn pad(rows: &[Vec<usize>]) -> (Array2<usize>, Array2<bool>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = Array2::from_elem((rows.len(), width), PAD_ID);
    let mut mask = Array2::from_elem((rows.len(), width), false);
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            ids[[i, j]] = v;
            mask[[i, j]] = true;
        }
    }
    (ids, mask)
}

impl Batch {
    pub fn new(examples: &[Example]) -> Self {
        let col = |f: &dyn Fn(&Example) -> Vec<usize>| pad(&examples.iter().map(f).collect::<Vec<_>>());
        let (source_ids, source_mask) = col(&|e| e.source.clone());
        let (translation_ids, translation_mask) = col(&|e| e.translation.clone());
        let (decoder_input, target_mask) = col(&|e| {
            let mut v = vec![BOS_ID];
            v.extend(&e.target);
            v
        });
        let (target_ids, _) = col(&|e| {
            let mut v = e.target.clone();
            v.push(EOS_ID);
            v
        });
        let (word_tags, word_mask) = col(&|e| e.word_tags.clone());
        Batch {
            source_ids,
            source_mask,
            translation_ids,
            translation_mask,
            decoder_input,
            target_ids,
            target_mask,
            da: examples.iter().map(|e| e.da.unwrap_or(0.0)).collect(),
            da_mask: examples.iter().map(|e| e.da.is_some()).collect(),
            word_tags,
            word_mask,
            word_starts: examples.iter().map(|e| e.word_starts.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.source_ids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The unpadded entries of row `i`.
    pub fn row(&self, ids: &Array2<usize>, mask: &Array2<bool>, i: usize) -> Vec<usize> {
        ids.row(i)
            .iter()
            .zip(mask.row(i))
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(src: usize, tgt: usize) -> Example {
        Example {
            source: vec![7; src],
            translation: vec![8; src],
            word_starts: (0..src).collect(),
            target: vec![9; tgt],
            da: (tgt % 2 == 0).then_some(0.5),
            word_tags: vec![1; src],
        }
    }

    #[test]
    fn padding_and_masks_align() {
        let b = Batch::new(&[ex(3, 2), ex(1, 6)]);
        assert_eq!(b.target_ids.dim(), (2, 7));
        assert_eq!(b.decoder_input.dim(), (2, 7));
        assert_eq!(b.target_mask.row(0).iter().filter(|&&m| m).count(), 3);
        assert_eq!(b.row(&b.target_ids, &b.target_mask, 0), vec![9, 9, EOS_ID]);
        assert_eq!(b.row(&b.decoder_input, &b.target_mask, 1)[0], BOS_ID);
        assert_eq!(b.source_ids[[1, 2]], PAD_ID);
        assert!(!b.source_mask[[1, 2]]);
        assert_eq!(b.da_mask, vec![true, true]);
    }
}
