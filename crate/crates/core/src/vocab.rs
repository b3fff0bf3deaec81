//! Domain vocabularies and the platform-independent token-list hash.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::codec::TokenSequence;
use crate::error::{Error, Result};
use crate::preprocess::OTHER_TOKEN;

pub const BOS_TOKEN: &str = "_bos_";
pub const EOS_TOKEN: &str = "_eos_";
pub const BOS: usize = 0;
pub const EOS: usize = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a (64-bit) over each token's UTF-8 bytes followed by a `0xFF`
/// terminator. `0xFF` never occurs in UTF-8, so distinct token lists hash
/// distinct byte strings.
pub fn hash_tokens<S: AsRef<str>>(tokens: &[S]) -> u64 {
    let mut h = FNV_OFFSET;
    for t in tokens {
        for &b in t.as_ref().as_bytes().iter().chain(std::iter::once(&0xFFu8)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Token list of one domain: `_bos_`, `_eos_`, then the sorted token set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn from_token_set(token_set: &BTreeSet<String>) -> Self {
        let mut tokens = vec![BOS_TOKEN.to_owned(), EOS_TOKEN.to_owned()];
        tokens.extend(
            token_set
                .iter()
                .filter(|t| t.as_str() != BOS_TOKEN && t.as_str() != EOS_TOKEN)
                .cloned(),
        );
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn hash(&self) -> u64 {
        hash_tokens(&self.tokens)
    }

    /// Maps tokens to ids; unknown tokens go to `_other_` when present.
    pub fn encode_lossy(&self, seq: &TokenSequence) -> Vec<usize> {
        let other = self.id(OTHER_TOKEN);
        seq.tokens
            .iter()
            .filter_map(|t| self.id(t).or(other))
            .collect()
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<Vec<usize>> {
        seq.tokens
            .iter()
            .map(|t| {
                self.id(t).ok_or_else(|| Error::UnknownToken {
                    token: t.clone(),
                    domain: seq.domain_id.clone(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Frozen vectors, computed with an independent FNV-1a implementation.
    #[test]
    fn hash_vectors() {
        assert_eq!(hash_tokens::<&str>(&[]), 0xcbf29ce484222325);
        assert_eq!(hash_tokens(&["path", "cid", "_cid_"]), HASH_PATH_CID);
        assert_eq!(hash_tokens(&["a"]), HASH_A);
        assert_ne!(hash_tokens(&["ab"]), hash_tokens(&["a", "b"]));
    }

    const HASH_PATH_CID: u64 = 0xebe4_279a_17bc_25bb;
    const HASH_A: u64 = 0x089b_c907_b544_c769;

    #[test]
    fn vocab_layout() {
        let set: BTreeSet<String> = ["b", "a", "_other_"].iter().map(|s| s.to_string()).collect();
        let v = Vocab::from_token_set(&set);
        assert_eq!(v.tokens(), ["_bos_", "_eos_", "_other_", "a", "b"]);
        assert_eq!(v.id(BOS_TOKEN), Some(BOS));
        assert_eq!(v.id(EOS_TOKEN), Some(EOS));
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back.id("b"), Some(4));
    }

    #[test]
    fn encode_unknown() {
        let set: BTreeSet<String> = ["a", "_other_"].iter().map(|s| s.to_string()).collect();
        let v = Vocab::from_token_set(&set);
        let seq = TokenSequence::new("d", vec!["a".into(), "zz".into()]);
        assert_eq!(v.encode_lossy(&seq), vec![3, 2]);
        assert!(v.encode(&seq).is_err());
    }
}
