use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Vocabulary};
use crate::ctc::{LabelSequence, TokenId};

#[derive(Clone, Debug, PartialEq)]
pub struct SentencePair {
    /// 1-based line number in the input files.
    pub line: usize,
    pub source: Vec<TokenId>,
    pub target: LabelSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    pub lines: usize,
    /// Lines dropped because the source side was empty.
    pub dropped_empty_source: usize,
}

/// Tokenized sentence pairs, e.g. a teacher-distilled training set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub provenance: Vec<Provenance>,
}

impl ParallelCorpus {
    /// Pairs up source and target lines. Lines with an empty source side are
    /// dropped; empty targets are kept.
    pub fn from_lines<'a>(
        source: impl IntoIterator<Item = &'a str>,
        target: impl IntoIterator<Item = &'a str>,
        vocab: &Vocabulary,
    ) -> Result<(Self, usize), DataError> {
        let source: Vec<&str> = source.into_iter().collect();
        let target: Vec<&str> = target.into_iter().collect();
        if source.len() != target.len() {
            return Err(DataError::LineCountMismatch {
                source_lines: source.len(),
                target_lines: target.len(),
            });
        }
        let mut pairs = Vec::with_capacity(source.len());
        let mut dropped = 0;
        for (i, (s, t)) in source.iter().zip(&target).enumerate() {
            let src = vocab.tokenize(s);
            if src.is_empty() {
                dropped += 1;
                continue;
            }
            let target = LabelSequence::new(vocab.tokenize(t)).expect("tokenize never yields the blank id");
            pairs.push(SentencePair {
                line: i + 1,
                source: src,
                target,
            });
        }
        Ok((
            Self {
                pairs,
                provenance: Vec::new(),
            },
            dropped,
        ))
    }

    pub fn load(source_path: &Path, target_path: &Path, vocab: &Vocabulary) -> Result<Self, DataError> {
        let src = fs::read_to_string(source_path).map_err(|e| DataError::io(source_path, e))?;
        let tgt = fs::read_to_string(target_path).map_err(|e| DataError::io(target_path, e))?;
        let (mut corpus, dropped) = Self::from_lines(src.lines(), tgt.lines(), vocab)?;
        corpus.provenance.push(Provenance {
            source_path: source_path.to_path_buf(),
            target_path: target_path.to_path_buf(),
            lines: src.lines().count(),
            dropped_empty_source: dropped,
        });
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn max_source_len(&self) -> usize {
        self.pairs.iter().map(|p| p.source.len()).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_lines_and_drops_empty_sources() {
        let v = Vocabulary::from_tokens(["a", "b"]);
        let (c, dropped) = ParallelCorpus::from_lines(["a b", "", "b"], ["b a", "a", ""], &v).unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(c.len(), 2);
        assert_eq!(c.pairs[0].line, 1);
        assert_eq!(c.pairs[1].line, 3);
        assert!(c.pairs[1].target.is_empty());
    }

    #[test]
    fn mismatched_line_counts_fail() {
        let v = Vocabulary::reserved_only();
        assert!(matches!(
            ParallelCorpus::from_lines(["a"], ["a", "b"], &v),
            Err(DataError::LineCountMismatch { .. })
        ));
    }

    #[test]
    fn load_records_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s"), dir.path().join("t"));
        fs::write(&s, "a b\nb\n").unwrap();
        fs::write(&t, "b a\nb\n").unwrap();
        let v = Vocabulary::from_tokens(["a", "b"]);
        let c = ParallelCorpus::load(&s, &t, &v).unwrap();
        assert_eq!(c.provenance[0].lines, 2);
        assert_eq!(c.max_source_len(), 2);
    }
}
