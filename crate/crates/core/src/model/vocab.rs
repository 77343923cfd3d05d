use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub const PAD_ID: u32 = 0;
pub const UNKNOWN_ID: u32 = 1;

/// Word-level vocabulary; ids 0 and 1 are reserved for padding and unknown
/// tokens, the rest are assigned in sorted token order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    ids: BTreeMap<String, u32>,
    pub max_len: usize,
}

/// Lowercase and split on anything that is not alphanumeric.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Vocab {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_len: usize) -> Self {
        let tokens: BTreeSet<String> = corpus.into_iter().flat_map(words).collect();
        let ids = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, i as u32 + 2))
            .collect();
        Vocab { ids, max_len }
    }

    /// Number of ids including the two reserved ones.
    pub fn size(&self) -> usize {
        self.ids.len() + 2
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNKNOWN_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// Exactly `max_len` ids, truncated or right-padded.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out: Vec<u32> = words(text).take(self.max_len).map(|w| self.id(&w)).collect();
        out.resize(self.max_len, PAD_ID);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["No DR present", "severe DR, with drusen."], 6)
    }

    #[test]
    fn reserved_ids_and_density() {
        let v = vocab();
        assert_eq!(v.size(), 2 + 6);
        let mut ids: Vec<u32> = ["no", "dr", "present", "severe", "with", "drusen"].iter().map(|t| v.id(t)).collect();
        ids.sort_unstable();
        assert_eq!(ids, (2..8).collect::<Vec<_>>());
    }

    #[test]
    fn tokenize_cases() {
        let v = vocab();
        assert_eq!(v.tokenize(""), vec![PAD_ID; 6]);
        assert_eq!(v.tokenize("No DR"), v.tokenize("no dr"));
        assert_eq!(v.tokenize("glaucoma")[0], UNKNOWN_ID);
        assert_eq!(v.tokenize("dr dr dr dr dr dr dr dr").len(), 6);
        assert_eq!(v.tokenize("severe-DR!")[..2], [v.id("severe"), v.id("dr")]);
    }

    #[test]
    fn stable_given_corpus() {
        assert_eq!(vocab(), Vocab::build(["severe DR, with drusen.", "No DR present"], 6));
    }
}
