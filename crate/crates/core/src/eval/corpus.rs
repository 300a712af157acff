use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Access categories used by the synthetic corpus, in group order.
pub const LABELS: [&str; 12] = [
    "cardiology",
    "finance",
    "legal",
    "patient-records",
    "engineering",
    "marketing",
    "research",
    "payroll",
    "security",
    "logistics",
    "support",
    "sales",
];

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Symbol pairs for the shared header filler; every group draws from all of them.
const FILLERS: [&[u8; 2]; 10] = [b"01", b"23", b"45", b"67", b"89", b"#$", b"%&", b"+-", b"<>", b"=~"];

/// Layout of the seeded synthetic corpora.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub groups: usize,
    pub docs_per_group: usize,
    pub months: usize,
    pub docs_per_month: usize,
    pub neutral_docs: usize,
    /// Distinct letters in each group's (or month's) lexicon.
    pub letters_per_group: usize,
    /// Content words per document, after the filler header.
    pub words_per_doc: usize,
    /// Filler header length range in bytes, inclusive.
    pub filler_min: usize,
    pub filler_max: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            groups: 8,
            docs_per_group: 28,
            months: 6,
            docs_per_month: 16,
            neutral_docs: 400,
            letters_per_group: 6,
            words_per_doc: 16,
            filler_min: 24,
            filler_max: 34,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub label: String,
    pub text: String,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let lexicons = self.groups.max(self.months);
        if self.groups < 2 || self.groups > LABELS.len() {
            return Err(Error::Config(format!("groups must be in 2..={}", LABELS.len())));
        }
        if self.letters_per_group < 2 || lexicons * self.letters_per_group > LETTERS.len() {
            return Err(Error::Config("letter slices must be disjoint and fit the alphabet".into()));
        }
        if self.filler_min > self.filler_max || self.words_per_doc == 0 {
            return Err(Error::Config("empty document layout".into()));
        }
        Ok(())
    }

    fn lexicon(&self, index: usize) -> &'static [u8] {
        let k = self.letters_per_group;
        &LETTERS[index * k..(index + 1) * k]
    }

    /// Per-group documents labelled with their access category.
    pub fn group_docs(&self) -> Result<Vec<CorpusDoc>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        for (g, label) in LABELS.iter().enumerate().take(self.groups) {
            for i in 0..self.docs_per_group {
                out.push(CorpusDoc {
                    doc_id: format!("{label}-{i:03}"),
                    label: label.to_string(),
                    text: self.document(&mut rng, self.lexicon(g)),
                });
            }
        }
        Ok(out)
    }

    /// Time-ordered documents, one disjoint lexicon per month.
    pub fn month_docs(&self) -> Result<Vec<CorpusDoc>> {
        self.validate()?;
        if self.months < 1 {
            return Err(Error::Config("months must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d6f_6e74_6873);
        let mut out = Vec::new();
        for m in 0..self.months {
            for i in 0..self.docs_per_month {
                out.push(CorpusDoc {
                    doc_id: format!("month{:02}-{i:03}", m + 1),
                    label: format!("month{:02}", m + 1),
                    text: self.document(&mut rng, self.lexicon(m)),
                });
            }
        }
        Ok(out)
    }

    /// Pretraining text, disjoint from every partition: each document draws
    /// its own random letter set, so the base model learns to tell letters
    /// apart without ever seeing a partition's lexicon as a unit.
    pub fn neutral_docs(&self) -> Result<Vec<Vec<u8>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6e_6575_7472_616c);
        Ok((0..self.neutral_docs)
            .map(|_| {
                let lexicon: Vec<u8> = LETTERS.choose_multiple(&mut rng, self.letters_per_group).copied().collect();
                self.document(&mut rng, &lexicon).into_bytes()
            })
            .collect())
    }

    fn document(&self, rng: &mut ChaCha8Rng, lexicon: &[u8]) -> String {
        let style = FILLERS.choose(rng).expect("fillers are non-empty");
        let filler_len = rng.random_range(self.filler_min..=self.filler_max);
        let mut text = String::new();
        while text.len() < filler_len {
            let w = rng.random_range(2..=4);
            text.extend((0..w).map(|_| char::from(*style.choose(rng).expect("pair"))));
            text.push(' ');
        }
        text.push_str(": ");
        for i in 0..self.words_per_doc {
            if i > 0 {
                text.push(' ');
            }
            let w = rng.random_range(2..=5);
            text.extend((0..w).map(|_| char::from(*lexicon.choose(rng).expect("lexicon"))));
        }
        text.push('.');
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_and_determinism() {
        let spec = CorpusSpec::default();
        let docs = spec.group_docs().unwrap();
        assert_eq!(docs.len(), spec.groups * spec.docs_per_group);
        assert_eq!(docs, spec.group_docs().unwrap());
        assert_eq!(spec.month_docs().unwrap().len(), spec.months * spec.docs_per_month);
        assert!(docs.iter().all(|d| d.text.len() + 2 <= 128));
    }

    #[test]
    fn group_lexicons_are_disjoint() {
        let spec = CorpusSpec::default();
        let docs = spec.group_docs().unwrap();
        for (a, b) in [(0, 1), (2, 7)] {
            let letters = |g: usize| -> std::collections::BTreeSet<char> {
                docs.iter()
                    .filter(|d| d.label == LABELS[g])
                    .flat_map(|d| d.text.split(": ").nth(1).unwrap().chars())
                    .filter(char::is_ascii_alphabetic)
                    .collect()
            };
            assert!(letters(a).is_disjoint(&letters(b)));
        }
    }
}
