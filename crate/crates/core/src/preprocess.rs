//! Per-domain merging strategies.
//!
//! For every key with many distinct values a small character-class regex is
//! induced from a fixed candidate ladder. Matching values collapse into a
//! placeholder token; tokens outside the domain token set collapse into
//! `_other_`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, ParsedRequest, TokenSequence};
use crate::error::{Error, Result};

pub const OTHER_TOKEN: &str = "_other_";
pub const NUM_PLACEHOLDER: &str = "_num_";
pub const HEXNUM_PLACEHOLDER: &str = "_hexnum_";

/// What kind of numeral a character class denotes, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Numeral {
    Decimal,
    Hexadecimal,
}

/// One rung of the candidate ladder: `[chars]+`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRegex {
    pub id: String,
    /// Every character the class matches.
    pub char_class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeral: Option<Numeral>,
}

impl CandidateRegex {
    pub fn new(id: &str, char_class: &str, numeral: Option<Numeral>) -> Self {
        let chars: BTreeSet<char> = char_class.chars().collect();
        CandidateRegex {
            id: id.to_owned(),
            char_class: chars.into_iter().collect(),
            numeral,
        }
    }

    pub fn digits() -> Self {
        Self::new("digits", "0123456789", Some(Numeral::Decimal))
    }

    pub fn hex() -> Self {
        Self::new("hex", "0123456789abcdef", Some(Numeral::Hexadecimal))
    }

    pub fn letters() -> Self {
        Self::new("letters", "abcdefghijklmnopqrstuvwxyz", None)
    }

    pub fn alphanumeric() -> Self {
        Self::new("alnum", "0123456789abcdefghijklmnopqrstuvwxyz", None)
    }

    pub fn alphanumeric_punct() -> Self {
        Self::new("alnum_punct", "0123456789abcdefghijklmnopqrstuvwxyz._-", None)
    }

    /// The default ladder, smallest class first.
    pub fn default_ladder() -> Vec<Self> {
        vec![
            Self::digits(),
            Self::hex(),
            Self::letters(),
            Self::alphanumeric(),
            Self::alphanumeric_punct(),
        ]
    }

    pub fn class_size(&self) -> usize {
        self.char_class.chars().count()
    }

    pub fn matches_chars(&self, value: &str) -> bool {
        !value.is_empty() && value.chars().all(|c| self.char_class.contains(c))
    }

    /// Regex-style rendering of the class, e.g. `[0-9a-z]`.
    pub fn pattern(&self) -> String {
        let chars: Vec<char> = self.char_class.chars().collect();
        let mut out = String::from("[");
        let mut i = 0;
        while i < chars.len() {
            let mut j = i;
            while j + 1 < chars.len() && chars[j + 1] as u32 == chars[j] as u32 + 1 {
                j += 1;
            }
            if j >= i + 2 {
                out.push(chars[i]);
                out.push('-');
                out.push(chars[j]);
            } else {
                for c in &chars[i..=j] {
                    if *c == '-' || *c == ']' || *c == '\\' {
                        out.push('\\');
                    }
                    out.push(*c);
                }
            }
            i = j + 1;
        }
        out.push(']');
        out
    }
}

fn sort_ladder(candidates: &[CandidateRegex]) -> Vec<&CandidateRegex> {
    let mut sorted: Vec<&CandidateRegex> = candidates.iter().collect();
    sorted.sort_by(|a, b| a.class_size().cmp(&b.class_size()).then_with(|| a.id.cmp(&b.id)));
    sorted
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthConstraint {
    Exact(usize),
    AtLeast(usize),
}

impl LengthConstraint {
    pub fn admits(&self, len: usize) -> bool {
        match *self {
            LengthConstraint::Exact(n) => len == n,
            LengthConstraint::AtLeast(n) => len >= n,
        }
    }
}

/// Induced rule for one key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRule {
    pub key: String,
    pub char_class: CandidateRegex,
    pub length: LengthConstraint,
    pub placeholder: String,
}

impl KeyRule {
    pub fn matches(&self, value: &str) -> bool {
        self.char_class.matches_chars(value) && self.length.admits(value.chars().count())
    }

    pub fn regex(&self) -> String {
        let class = self.char_class.pattern();
        match self.length {
            LengthConstraint::Exact(n) => format!("{class}{{{n}}}"),
            LengthConstraint::AtLeast(n) => format!("{class}{{{n},}}"),
        }
    }
}

impl fmt::Display for KeyRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ {} -> {}", self.key, self.regex(), self.placeholder)
    }
}

/// Placeholder for a key merged under `class`.
pub fn placeholder_for(key: &str, class: &CandidateRegex) -> String {
    match class.numeral {
        Some(Numeral::Decimal) => NUM_PLACEHOLDER.to_owned(),
        Some(Numeral::Hexadecimal) => HEXNUM_PLACEHOLDER.to_owned(),
        None => {
            let name: String = key
                .chars()
                .map(|c| if codec::is_token_char(c) { c } else { '_' })
                .collect();
            format!("_{}_", name.trim_matches('_'))
        }
    }
}

/// Observed values per key, with multiplicity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValueTable {
    pub values: BTreeMap<String, BTreeMap<String, usize>>,
}

impl KeyValueTable {
    pub fn add(&mut self, key: &str, value: &str) {
        *self
            .values
            .entry(key.to_owned())
            .or_default()
            .entry(value.to_owned())
            .or_insert(0) += 1;
    }

    pub fn distinct(&self, key: &str) -> usize {
        self.values.get(key).map_or(0, BTreeMap::len)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn collect_key_values<'a, I>(corpus: I) -> KeyValueTable
where
    I: IntoIterator<Item = &'a ParsedRequest>,
{
    let mut table = KeyValueTable::default();
    for req in corpus {
        for (k, v) in &req.pairs {
            table.add(k, v);
        }
    }
    table
}

/// Picks the smallest candidate class that matches at least
/// `match_proportion` of the value occurrences, with a length constraint
/// derived from the matched values. `None` if no candidate qualifies.
pub fn generate_regex(
    key: &str,
    values: &BTreeMap<String, usize>,
    candidates: &[CandidateRegex],
    match_proportion: f64,
) -> Option<KeyRule> {
    let total: usize = values.values().sum();
    if total == 0 {
        return None;
    }
    for cand in sort_ladder(candidates) {
        let matched: Vec<(&String, usize)> = values
            .iter()
            .filter(|(v, _)| cand.matches_chars(v))
            .map(|(v, &n)| (v, n))
            .collect();
        let hits: usize = matched.iter().map(|(_, n)| n).sum();
        if (hits as f64) < match_proportion * total as f64 || hits == 0 {
            continue;
        }
        let lens: BTreeSet<usize> = matched.iter().map(|(v, _)| v.chars().count()).collect();
        let length = if lens.len() == 1 {
            LengthConstraint::Exact(*lens.iter().next().unwrap())
        } else {
            LengthConstraint::AtLeast(*lens.iter().next().unwrap())
        };
        return Some(KeyRule {
            key: key.to_owned(),
            placeholder: placeholder_for(key, cand),
            char_class: cand.clone(),
            length,
        });
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub distinct_value_threshold: usize,
    pub match_proportion: f64,
    pub low_frequency_threshold: usize,
    pub candidates: Vec<CandidateRegex>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            distinct_value_threshold: 64,
            match_proportion: 0.99,
            low_frequency_threshold: 5,
            candidates: CandidateRegex::default_ladder(),
        }
    }
}

/// Per-domain preprocessing strategy: key rules plus the token set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergingStrategy {
    pub domain_id: String,
    pub distinct_value_threshold: usize,
    pub match_proportion: f64,
    pub low_frequency_threshold: usize,
    pub rules: BTreeMap<String, KeyRule>,
    pub token_set: BTreeSet<String>,
}

impl MergingStrategy {
    /// Induces rules and the token set from a parsed training corpus.
    pub fn build<'a, I>(domain_id: &str, corpus: I, config: &StrategyConfig) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ParsedRequest>,
        I::IntoIter: Clone,
    {
        let corpus = corpus.into_iter();
        if corpus.clone().next().is_none() {
            return Err(Error::EmptyCorpus);
        }
        let table = collect_key_values(corpus.clone());
        let mut rules = BTreeMap::new();
        for (key, values) in &table.values {
            if values.len() < config.distinct_value_threshold {
                continue;
            }
            if let Some(rule) =
                generate_regex(key, values, &config.candidates, config.match_proportion)
            {
                rules.insert(key.clone(), rule);
            }
        }

        let mut strategy = MergingStrategy {
            domain_id: domain_id.to_owned(),
            distinct_value_threshold: config.distinct_value_threshold,
            match_proportion: config.match_proportion,
            low_frequency_threshold: config.low_frequency_threshold,
            rules,
            token_set: BTreeSet::new(),
        };

        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for req in corpus {
            for tok in strategy.merge(req) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut token_set: BTreeSet<String> = freq
            .into_iter()
            .filter(|(_, n)| *n >= config.low_frequency_threshold)
            .map(|(t, _)| t)
            .collect();
        token_set.extend(strategy.rules.values().map(|r| r.placeholder.clone()));
        token_set.insert(OTHER_TOKEN.to_owned());
        strategy.token_set = token_set;
        Ok(strategy)
    }

    /// Rule merging only, before the token-set closure.
    fn merge(&self, parsed: &ParsedRequest) -> Vec<String> {
        let mut tokens = Vec::new();
        for seg in &parsed.path_segments {
            tokens.extend(codec::raw_tokens(seg));
        }
        for (k, v) in &parsed.pairs {
            tokens.extend(codec::raw_tokens(k));
            match self.rules.get(k) {
                Some(rule) if rule.matches(v) => tokens.push(rule.placeholder.clone()),
                _ => tokens.extend(codec::raw_tokens(v)),
            }
        }
        tokens
    }

    /// Merges value tokens by rule, then maps everything outside the token
    /// set to `_other_`.
    pub fn apply(&self, parsed: &ParsedRequest) -> TokenSequence {
        let tokens = self.merge(parsed).into_iter().map(|t| self.close(t)).collect();
        TokenSequence::new(self.domain_id.clone(), tokens)
    }

    /// Token-set closure of an existing sequence. Output of [`apply`] is a
    /// fixed point.
    ///
    /// [`apply`]: MergingStrategy::apply
    pub fn remerge(&self, seq: &TokenSequence) -> TokenSequence {
        let tokens = seq
            .tokens
            .iter()
            .flat_map(|t| codec::split_fragment(t))
            .map(|t| self.close(t))
            .collect();
        TokenSequence::new(self.domain_id.clone(), tokens)
    }

    fn close(&self, token: String) -> String {
        if self.token_set.contains(&token) {
            token
        } else {
            OTHER_TOKEN.to_owned()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

pub fn build_strategy<'a, I>(domain_id: &str, corpus: I, config: &StrategyConfig) -> Result<MergingStrategy>
where
    I: IntoIterator<Item = &'a ParsedRequest>,
    I::IntoIter: Clone,
{
    MergingStrategy::build(domain_id, corpus, config)
}

pub fn apply_strategy(strategy: &MergingStrategy, parsed: &ParsedRequest) -> TokenSequence {
    strategy.apply(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{parse_request, RawRequest};
    use proptest::prelude::*;

    fn values(vs: &[&str]) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for v in vs {
            *m.entry(v.to_string()).or_insert(0) += 1;
        }
        m
    }

    fn parsed(urls: &[String]) -> Vec<ParsedRequest> {
        urls.iter().map(|u| parse_request(&RawRequest::get("d", u.as_str()))).collect()
    }

    #[test]
    fn collects_values_with_multiplicity() {
        let reqs = parsed(&[
            "/watch?vid=q0040fm4".into(),
            "/watch?vid=abc12345".into(),
            "/watch?vid=abc12345".into(),
        ]);
        let table = collect_key_values(&reqs);
        assert_eq!(table.values["vid"]["q0040fm4"], 1);
        assert_eq!(table.values["vid"]["abc12345"], 2);
        assert!(collect_key_values(&parsed(&["/a/b".into()])).is_empty());
    }

    #[test]
    fn vid_values_give_alnum_exact_8() {
        let vals = values(&["q0040fm4", "x9k2m1zz", "00aa11bb", "mm3n4p5q"]);
        let rule = generate_regex("vid", &vals, &CandidateRegex::default_ladder(), 0.99).unwrap();
        assert_eq!(rule.char_class.id, "alnum");
        assert_eq!(rule.length, LengthConstraint::Exact(8));
        assert_eq!(rule.regex(), "[0-9a-z]{8}");
        assert_eq!(rule.placeholder, "_vid_");
    }

    #[test]
    fn timestamps_give_decimal_exact_10() {
        let vals = values(&["1652301001", "1652301057", "1652302210"]);
        let rule =
            generate_regex("timestamp", &vals, &CandidateRegex::default_ladder(), 0.99).unwrap();
        assert_eq!(rule.char_class.id, "digits");
        assert_eq!(rule.length, LengthConstraint::Exact(10));
        assert_eq!(rule.regex(), "[0-9]{10}");
        assert_eq!(rule.placeholder, NUM_PLACEHOLDER);
    }

    #[test]
    fn mixed_lengths_give_minimum_length() {
        let vals = values(&["abcdefghij1", "abcdefghij1kl", "zzzzzzzzz9z"]);
        let rule = generate_regex("sid", &vals, &CandidateRegex::default_ladder(), 0.99).unwrap();
        assert_eq!(rule.char_class.id, "alnum");
        assert_eq!(rule.length, LengthConstraint::AtLeast(11));
        assert_eq!(rule.regex(), "[0-9a-z]{11,}");
    }

    #[test]
    fn digits_rejected_when_a_value_has_letters() {
        let vals = values(&["abc", "9"]);
        let ladder = vec![CandidateRegex::digits(), CandidateRegex::alphanumeric()];
        let rule = generate_regex("k", &vals, &ladder, 1.0).unwrap();
        assert_eq!(rule.char_class.id, "alnum");
        assert_eq!(rule.length, LengthConstraint::AtLeast(1));
        // with the full ladder hex is smaller than alnum and also matches both
        let rule = generate_regex("k", &vals, &CandidateRegex::default_ladder(), 1.0).unwrap();
        assert_eq!(rule.char_class.id, "hex");
        assert_eq!(rule.placeholder, HEXNUM_PLACEHOLDER);
    }

    #[test]
    fn no_candidate_when_proportion_not_met() {
        let vals = values(&["a b", "c|d", "9"]);
        assert!(generate_regex("k", &vals, &CandidateRegex::default_ladder(), 0.99).is_none());
    }

    #[test]
    fn relaxed_proportion_ignores_noise() {
        let mut vals = BTreeMap::new();
        for i in 0..199 {
            vals.insert(format!("{:06}", i), 1);
        }
        vals.insert("<script>".into(), 1);
        let rule = generate_regex("k", &vals, &CandidateRegex::default_ladder(), 0.99).unwrap();
        assert_eq!(rule.char_class.id, "digits");
        assert_eq!(rule.length, LengthConstraint::Exact(6));
    }

    #[test]
    fn pattern_rendering() {
        assert_eq!(CandidateRegex::hex().pattern(), "[0-9a-f]");
        assert_eq!(CandidateRegex::letters().pattern(), "[a-z]");
        assert_eq!(CandidateRegex::alphanumeric_punct().pattern(), r"[\-.0-9_a-z]");
    }

    fn vid_corpus() -> Vec<ParsedRequest> {
        let mut urls = Vec::new();
        for i in 0..200u32 {
            urls.push(format!("/watch?vid=q{:07}&page={}", i * 7919 % 10_000_000, i % 3));
        }
        urls.push("/watch?zqx=1".into());
        parsed(&urls)
    }

    #[test]
    fn rules_only_for_high_cardinality_keys() {
        let corpus = vid_corpus();
        let s = MergingStrategy::build("d", &corpus, &StrategyConfig::default()).unwrap();
        assert!(s.rules.contains_key("vid"));
        assert!(!s.rules.contains_key("page"));
        assert!(s.token_set.contains("_vid_"));
        assert!(s.token_set.contains("page"));
        assert!(s.token_set.contains("0"));
        assert!(!s.token_set.contains("zqx"));
        assert!(s.token_set.contains(OTHER_TOKEN));
    }

    #[test]
    fn applies_rules_and_other() {
        let corpus = vid_corpus();
        let s = MergingStrategy::build("d", &corpus, &StrategyConfig::default()).unwrap();
        let r = parse_request(&RawRequest::get("d", "/watch?vid=q0040fm4&page=2&zqx=qq"));
        assert_eq!(
            s.apply(&r).tokens,
            vec!["watch", "vid", "_vid_", "page", "2", "_other_", "_other_"]
        );
        // unmatched value under a ruled key stays literal, then falls to _other_
        let r = parse_request(&RawRequest::get("d", "/watch?vid=' union select password--"));
        let toks = s.apply(&r).tokens;
        assert_eq!(&toks[..2], ["watch", "vid"]);
        assert!(toks[2..].iter().all(|t| t == OTHER_TOKEN));
    }

    #[test]
    fn decimal_keys_share_num_placeholder() {
        let mut urls = Vec::new();
        for i in 0..100u64 {
            urls.push(format!(
                "/send?xxxx_code={}&bids={}&yyyyyy_code={}",
                i * i * 37 % 9973,
                i * 13 + 1,
                i * 101 + 5
            ));
        }
        let corpus = parsed(&urls);
        let s = MergingStrategy::build("d", &corpus, &StrategyConfig::default()).unwrap();
        let r = parse_request(&RawRequest::get("d", "/send?xxxx_code=8&bids=176&yyyyyy_code=186"));
        assert_eq!(
            s.apply(&r).joined(),
            "send xxxx_code _num_ bids _num_ yyyyyy_code _num_"
        );
    }

    #[test]
    fn strategy_serializes_deterministically() {
        let corpus = vid_corpus();
        let a = MergingStrategy::build("d", &corpus, &StrategyConfig::default()).unwrap();
        let b = MergingStrategy::build("d", &corpus, &StrategyConfig::default()).unwrap();
        let ja = serde_json::to_string_pretty(&a).unwrap();
        assert_eq!(ja, serde_json::to_string_pretty(&b).unwrap());
        let back: MergingStrategy = serde_json::from_str(&ja).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: Vec<ParsedRequest> = Vec::new();
        assert!(matches!(
            MergingStrategy::build("d", &empty, &StrategyConfig::default()),
            Err(Error::EmptyCorpus)
        ));
    }

    proptest! {
        #[test]
        fn chosen_class_is_minimal(vs in proptest::collection::vec("[0-9a-f]{1,6}|[a-z]{2,5}|[0-9]{3}", 1..30), p in 0.5f64..1.0) {
            let vals = values(&vs.iter().map(String::as_str).collect::<Vec<_>>());
            let ladder = CandidateRegex::default_ladder();
            let total: usize = vals.values().sum();
            if let Some(rule) = generate_regex("k", &vals, &ladder, p) {
                for cand in &ladder {
                    if cand.class_size() < rule.char_class.class_size() {
                        let hits: usize = vals.iter().filter(|(v, _)| cand.matches_chars(v)).map(|(_, n)| n).sum();
                        prop_assert!((hits as f64) < p * total as f64);
                    }
                }
            }
        }

        #[test]
        fn apply_is_closed_and_idempotent(
            ids in proptest::collection::vec(0u32..100_000, 80..120),
            probe in "[a-z0-9]{1,8}",
            noise in "[a-z]{1,4}",
        ) {
            let urls: Vec<String> = ids.iter().map(|i| format!("/item/view?id={i}&tab=main")).collect();
            let corpus = parsed(&urls);
            let s = MergingStrategy::build("d", &corpus, &StrategyConfig::default()).unwrap();
            let r = parse_request(&RawRequest::get("d", format!("/item/{noise}?id={probe}&tab={noise}")));
            let out = s.apply(&r);
            for t in &out.tokens {
                prop_assert!(s.token_set.contains(t));
                prop_assert_eq!(codec::split_fragment(t), vec![t.clone()]);
            }
            prop_assert_eq!(s.remerge(&out), out);
        }
    }
}
