//! Synthetic parallel data for smoke training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyTask {
    /// Target equals the source.
    Copy,
    /// Target is the source read backwards.
    Reverse,
}

impl std::str::FromStr for ToyTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            other => Err(format!("unknown toy task `{other}` (expected copy or reverse)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub task: ToyTask,
    /// Number of distinct content symbols.
    pub symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            task: ToyTask::Reverse,
            symbols: 20,
            min_len: 3,
            max_len: 10,
        }
    }
}

impl ToySpec {
    fn symbol(i: usize) -> String {
        format!("s{i}")
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens((0..self.symbols).map(Self::symbol))
    }

    /// `n` (source, target) line pairs drawn from `seed`.
    pub fn generate(&self, n: usize, seed: u64) -> Vec<(String, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(self.min_len..=self.max_len);
                let mut words: Vec<String> = (0..len).map(|_| Self::symbol(rng.gen_range(0..self.symbols))).collect();
                let source = words.join(" ");
                if self.task == ToyTask::Reverse {
                    words.reverse();
                }
                (source, words.join(" "))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_pairs_are_reversed() {
        let spec = ToySpec::default();
        for (s, t) in spec.generate(50, 1) {
            let mut w: Vec<&str> = s.split(' ').collect();
            w.reverse();
            assert_eq!(w.join(" "), t);
            assert!((3..=10).contains(&w.len()));
        }
    }

    #[test]
    fn generation_is_seeded_and_in_vocabulary() {
        let spec = ToySpec {
            task: ToyTask::Copy,
            ..ToySpec::default()
        };
        let a = spec.generate(20, 7);
        assert_eq!(a, spec.generate(20, 7));
        assert_ne!(a, spec.generate(20, 8));
        let v = spec.vocabulary();
        assert_eq!(v.len(), 23);
        for (s, t) in a {
            assert_eq!(s, t);
            assert!(!v.tokenize(&s).contains(&super::super::UNK));
        }
    }
}
