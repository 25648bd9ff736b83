use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, ParallelCorpus, PAD};
use crate::ctc::{feasible, LabelSequence, TokenId};
use crate::numerics::SeqLayout;

/// Padded source matrix plus targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `size × t_max` ids, padded with [`PAD`].
    pub source: Vec<TokenId>,
    pub lengths: Vec<usize>,
    pub t_max: usize,
    pub targets: Vec<LabelSequence>,
    /// Corpus line of each sentence.
    pub lines: Vec<usize>,
}

impl Batch {
    /// Pads `sources` into a matrix; targets are left empty.
    pub fn from_sources(sources: &[&[TokenId]]) -> Self {
        let t_max = sources.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut source = Vec::with_capacity(t_max * sources.len());
        for s in sources {
            source.extend_from_slice(s);
            source.extend(std::iter::repeat_n(PAD, t_max - s.len()));
        }
        Self {
            source,
            lengths: sources.iter().map(|s| s.len()).collect(),
            t_max,
            targets: vec![LabelSequence::empty(); sources.len()],
            lines: (1..=sources.len()).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn layout(&self) -> SeqLayout {
        SeqLayout::new(self.t_max, self.lengths.clone())
    }

    pub fn source_row(&self, b: usize) -> &[TokenId] {
        &self.source[b * self.t_max..b * self.t_max + self.lengths[b]]
    }

    pub fn target_tokens(&self) -> usize {
        self.targets.iter().map(LabelSequence::len).sum()
    }

    /// Checks the pad and feasibility invariants for split factor `k`.
    pub fn audit(&self, k: usize) -> Result<(), String> {
        if self.source.len() != self.size() * self.t_max {
            return Err("source matrix size does not match the batch shape".into());
        }
        for b in 0..self.size() {
            let row = &self.source[b * self.t_max..(b + 1) * self.t_max];
            if row[self.lengths[b]..].iter().any(|&id| id != PAD) {
                return Err(format!("line {}: non-pad id beyond sentence end", self.lines[b]));
            }
            if !feasible(&self.targets[b], k * self.lengths[b]) {
                return Err(format!("line {}: infeasible target", self.lines[b]));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batching {
    pub batches: Vec<Batch>,
    /// Lines whose target cannot be aligned to `k · source_len` frames.
    pub skipped: Vec<usize>,
}

/// Buckets pairs by source length and packs each bucket greedily so that
/// `batch_size × longest_source ≤ max_tokens`. Infeasible pairs are skipped.
/// Order within a length and the final batch order are shuffled with `seed`.
pub fn make_batches(corpus: &ParallelCorpus, max_tokens: usize, k: usize, seed: u64) -> Result<Batching, DataError> {
    if k == 0 {
        return Err(DataError::Config("split factor must be at least 1".into()));
    }
    let mut skipped = Vec::new();
    let mut keep = Vec::with_capacity(corpus.len());
    for (i, pair) in corpus.pairs.iter().enumerate() {
        if pair.source.len() > max_tokens {
            return Err(DataError::Config(format!(
                "line {}: source of {} tokens exceeds the batch budget of {max_tokens}",
                pair.line,
                pair.source.len()
            )));
        }
        if feasible(&pair.target, k * pair.source.len()) {
            keep.push(i);
        } else {
            skipped.push(pair.line);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keep.shuffle(&mut rng);
    keep.sort_by_key(|&i| corpus.pairs[i].source.len());

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in keep {
        let len = corpus.pairs[i].source.len();
        let t_max = longest.max(len);
        if !current.is_empty() && (current.len() + 1) * t_max > max_tokens {
            groups.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);

    let batches = groups
        .into_iter()
        .map(|g| {
            let sources: Vec<&[TokenId]> = g.iter().map(|&i| corpus.pairs[i].source.as_slice()).collect();
            let mut batch = Batch::from_sources(&sources);
            batch.targets = g.iter().map(|&i| corpus.pairs[i].target.clone()).collect();
            batch.lines = g.iter().map(|&i| corpus.pairs[i].line).collect();
            batch
        })
        .collect();
    Ok(Batching { batches, skipped })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::SentencePair;

    fn corpus(specs: &[(usize, usize)]) -> ParallelCorpus {
        ParallelCorpus {
            pairs: specs
                .iter()
                .enumerate()
                .map(|(i, &(s, t))| SentencePair {
                    line: i + 1,
                    source: vec![3; s],
                    target: LabelSequence::new((0..t).map(|j| 3 + (j % 2) as TokenId).collect()).unwrap(),
                })
                .collect(),
            provenance: Vec::new(),
        }
    }

    #[test]
    fn greedy_fill_under_budget() {
        let c = corpus(&[(4, 2), (4, 2), (4, 2)]);
        let b = make_batches(&c, 8, 3, 0).unwrap();
        let mut sizes: Vec<usize> = b.batches.iter().map(Batch::size).collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 2]);
        assert!(b.skipped.is_empty());
    }

    #[test]
    fn infeasible_pairs_are_skipped() {
        let c = corpus(&[(1, 4), (2, 2)]);
        let b = make_batches(&c, 8, 3, 0).unwrap();
        assert_eq!(b.skipped, vec![1]);
        assert_eq!(b.batches.len(), 1);
        assert_eq!(b.batches[0].lines, vec![2]);
    }

    #[test]
    fn oversized_sentence_names_its_line() {
        let c = corpus(&[(2, 1), (9, 1)]);
        let err = make_batches(&c, 8, 3, 0).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn same_seed_same_order() {
        let c = corpus(&[(1, 1), (2, 1), (3, 1), (2, 2), (5, 1), (1, 0), (4, 3)]);
        let a = make_batches(&c, 6, 2, 9).unwrap();
        let b = make_batches(&c, 6, 2, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn padding_fills_past_sentence_end() {
        let b = Batch::from_sources(&[&[5, 6, 7], &[8]]);
        assert_eq!(b.source, vec![5, 6, 7, 8, PAD, PAD]);
        assert_eq!(b.source_row(1), &[8]);
        assert_eq!(b.layout(), SeqLayout::new(3, vec![3, 1]));
    }

    proptest! {
        #[test]
        fn every_pair_is_accounted_for(
            specs in prop::collection::vec((1usize..10, 0usize..12), 1..60),
            budget in 10usize..64,
            k in 1usize..4,
            seed in 0u64..100,
        ) {
            let c = corpus(&specs);
            let b = make_batches(&c, budget, k, seed).unwrap();
            let batched: usize = b.batches.iter().map(Batch::size).sum();
            prop_assert_eq!(batched + b.skipped.len(), c.len());
            for batch in &b.batches {
                prop_assert!(batch.size() * batch.t_max <= budget);
                prop_assert!(batch.audit(k).is_ok());
            }
        }
    }
}
