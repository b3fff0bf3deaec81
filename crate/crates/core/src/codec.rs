//! Decoding of raw HTTP request records into paths, key/value pairs and
//! pre-merge token sequences.
//!
//! Only the URL (path and query string) and `application/x-www-form-urlencoded`
//! bodies are analysed. Headers, cookies and other body encodings are ignored.

use serde::{Deserialize, Serialize};

/// Suffix appended to raw tokens that would otherwise look like a placeholder
/// (`_..._`). Placeholders are produced only by token merging.
pub const RESERVED_SUFFIX: &str = "raw";

/// One HTTP request as it appears in an access log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRequest {
    #[serde(rename = "domain")]
    pub domain_id: String,
    #[serde(default)]
    pub method: String,
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_type: Option<String>,
}

impl RawRequest {
    pub fn get(domain: impl Into<String>, url: impl Into<String>) -> Self {
        RawRequest {
            domain_id: domain.into(),
            method: "GET".into(),
            url: url.into(),
            body: None,
            content_type: None,
        }
    }

    pub fn post_form(domain: impl Into<String>, url: impl Into<String>, body: impl Into<String>) -> Self {
        RawRequest {
            domain_id: domain.into(),
            method: "POST".into(),
            url: url.into(),
            body: Some(body.into()),
            content_type: None,
        }
    }

    /// Bodies are parsed when no content type is recorded or when it is
    /// form-urlencoded.
    fn has_form_body(&self) -> bool {
        match (&self.body, &self.content_type) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(_), Some(ct)) => ct
                .to_ascii_lowercase()
                .starts_with("application/x-www-form-urlencoded"),
        }
    }
}

/// A request decoded into path segments and ordered key/value pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRequest {
    pub path_segments: Vec<String>,
    pub pairs: Vec<(String, String)>,
    /// Malformed percent-escapes encountered while decoding. Never fatal.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Ordered lowercase tokens of one request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub domain_id: String,
    pub tokens: Vec<String>,
}

impl TokenSequence {
    pub fn new(domain_id: impl Into<String>, tokens: Vec<String>) -> Self {
        TokenSequence {
            domain_id: domain_id.into(),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Whether `c` is kept inside a token. Every ASCII character outside
/// `[a-z0-9_]` separates tokens, as does any whitespace.
pub fn is_token_char(c: char) -> bool {
    if c.is_ascii() {
        c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'
    } else {
        !c.is_whitespace()
    }
}

/// Placeholder tokens look like `_name_`.
pub fn is_placeholder(token: &str) -> bool {
    token.len() >= 2 && token.starts_with('_') && token.ends_with('_')
}

/// Lowercases and splits a decoded fragment on separators, dropping empty
/// fragments. No placeholder escaping happens here.
pub fn split_fragment(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !is_token_char(c))
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

fn escape_reserved(token: String) -> String {
    if is_placeholder(&token) {
        token + RESERVED_SUFFIX
    } else {
        token
    }
}

/// Splits a decoded fragment into raw tokens, escaping anything that would
/// collide with the placeholder namespace.
pub fn raw_tokens(text: &str) -> impl Iterator<Item = String> {
    split_fragment(text).into_iter().map(escape_reserved)
}

fn hex_val(b: u8) -> Option<u8> {
    match b {
        b'0'..=b'9' => Some(b - b'0'),
        b'a'..=b'f' => Some(b - b'a' + 10),
        b'A'..=b'F' => Some(b - b'A' + 10),
        _ => None,
    }
}

/// Percent-decodes `input` exactly once. Malformed escapes are copied
/// verbatim and reported in `warnings`. With `plus_as_space`, `+` decodes to
/// a space (form-urlencoded semantics).
pub fn percent_decode(input: &str, plus_as_space: bool, warnings: &mut Vec<String>) -> String {
    let bytes = input.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'%' => {
                let decoded = bytes
                    .get(i + 1)
                    .and_then(|&h| hex_val(h))
                    .zip(bytes.get(i + 2).and_then(|&l| hex_val(l)));
                match decoded {
                    Some((h, l)) => {
                        out.push(h << 4 | l);
                        i += 3;
                    }
                    None => {
                        let end = (i + 3).min(bytes.len());
                        warnings.push(format!(
                            "malformed percent-escape `{}`",
                            String::from_utf8_lossy(&bytes[i..end])
                        ));
                        out.push(b'%');
                        i += 1;
                    }
                }
            }
            b'+' if plus_as_space => {
                out.push(b' ');
                i += 1;
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    String::from_utf8_lossy(&out).into_owned()
}

/// Strips `scheme://host` when an absolute URL was logged.
fn strip_origin(url: &str) -> &str {
    if let Some(pos) = url.find("://") {
        let rest = &url[pos + 3..];
        match rest.find('/') {
            Some(slash) => &rest[slash..],
            None => "/",
        }
    } else {
        url
    }
}

fn parse_pairs(encoded: &str, out: &mut Vec<(String, String)>, warnings: &mut Vec<String>) {
    for part in encoded.split('&').filter(|p| !p.is_empty()) {
        let (key, value) = part.split_once('=').unwrap_or((part, ""));
        let key = percent_decode(key, true, warnings).to_lowercase();
        let value = percent_decode(value, true, warnings).to_lowercase();
        out.push((key, value));
    }
}

/// Decodes and parses a request into path segments and key/value pairs.
///
/// Query pairs come first, then body pairs, each in source order. Duplicate
/// keys are all kept.
pub fn parse_request(raw: &RawRequest) -> ParsedRequest {
    let mut warnings = Vec::new();
    let url = strip_origin(raw.url.trim());
    let url = url.split('#').next().unwrap_or("");
    let (path, query) = match url.split_once('?') {
        Some((p, q)) => (p, Some(q)),
        None => (url, None),
    };

    let mut path_segments = Vec::new();
    for seg in path.split('/').filter(|s| !s.is_empty()) {
        let decoded = percent_decode(seg, false, &mut warnings).to_lowercase();
        // a decoded "%2F" or space must not leave a separator inside a segment
        path_segments.extend(
            decoded
                .split(|c: char| c == '/' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(str::to_owned),
        );
    }

    let mut pairs = Vec::new();
    if let Some(q) = query {
        parse_pairs(q, &mut pairs, &mut warnings);
    }
    if raw.has_form_body() {
        if let Some(body) = &raw.body {
            parse_pairs(body.trim(), &mut pairs, &mut warnings);
        }
    }

    ParsedRequest {
        path_segments,
        pairs,
        warnings,
    }
}

/// Splits a parsed request into tokens: path tokens first, then for each pair
/// the key tokens followed by the value tokens.
pub fn tokenize(domain_id: &str, parsed: &ParsedRequest) -> TokenSequence {
    let mut tokens = Vec::new();
    for seg in &parsed.path_segments {
        tokens.extend(raw_tokens(seg));
    }
    for (k, v) in &parsed.pairs {
        tokens.extend(raw_tokens(k));
        tokens.extend(raw_tokens(v));
    }
    TokenSequence::new(domain_id, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(url: &str) -> ParsedRequest {
        parse_request(&RawRequest::get("d", url))
    }

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn parses_benign_send_request() {
        let p = parse("/send?xxxx_code=8&bids=176&yyyyyy_code=186");
        assert_eq!(p.path_segments, vec!["send"]);
        assert_eq!(
            p.pairs,
            pairs(&[("xxxx_code", "8"), ("bids", "176"), ("yyyyyy_code", "186")])
        );
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn decodes_percent_escape() {
        assert_eq!(parse("/a?q=%7B").pairs, pairs(&[("q", "{")]));
    }

    #[test]
    fn lowercases_everything() {
        let p = parse("/A/B?K=V");
        assert_eq!(p.path_segments, vec!["a", "b"]);
        assert_eq!(p.pairs, pairs(&[("k", "v")]));
    }

    #[test]
    fn decodes_exactly_once() {
        assert_eq!(parse("/a?q=%2520").pairs, pairs(&[("q", "%20")]));
    }

    #[test]
    fn malformed_escape_passes_through() {
        let p = parse("/a?q=%G1x&r=%4");
        assert_eq!(p.pairs, pairs(&[("q", "%g1x"), ("r", "%4")]));
        assert_eq!(p.warnings.len(), 2);
    }

    #[test]
    fn key_without_value_and_first_equals_wins() {
        let p = parse("/a?flag&k=v=w");
        assert_eq!(p.pairs, pairs(&[("flag", ""), ("k", "v=w")]));
    }

    #[test]
    fn duplicate_keys_are_kept_in_order() {
        let p = parse("/a?x=1&x=2");
        assert_eq!(p.pairs, pairs(&[("x", "1"), ("x", "2")]));
    }

    #[test]
    fn body_pairs_follow_query_pairs() {
        let raw = RawRequest::post_form("d", "/submit?a=1", "b=2&c=hello+world");
        let p = parse_request(&raw);
        assert_eq!(p.pairs, pairs(&[("a", "1"), ("b", "2"), ("c", "hello world")]));
    }

    #[test]
    fn non_form_body_ignored() {
        let mut raw = RawRequest::post_form("d", "/submit", "{\"a\":1}");
        raw.content_type = Some("application/json".into());
        assert!(parse_request(&raw).pairs.is_empty());
    }

    #[test]
    fn absolute_url_is_stripped() {
        let p = parse("https://example.com/Path/x?a=b");
        assert_eq!(p.path_segments, vec!["path", "x"]);
    }

    #[test]
    fn encoded_slash_does_not_survive_in_segment() {
        let p = parse("/a%2Fb/c%20d");
        assert_eq!(p.path_segments, vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn tokenizes_in_source_order() {
        let p = parse("/send?xxxx_code=8&bids=176");
        let t = tokenize("d", &p);
        assert_eq!(t.tokens, vec!["send", "xxxx_code", "8", "bids", "176"]);
    }

    #[test]
    fn punctuation_splits_keys_and_values() {
        let p = ParsedRequest {
            pairs: pairs(&[("a.b", "c-d")]),
            ..Default::default()
        };
        assert_eq!(tokenize("d", &p).tokens, vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn keeps_underscored_path_tokens_whole() {
        let p = parse("/watch_record_new/callback?x=1");
        assert_eq!(&tokenize("d", &p).tokens[..2], ["watch_record_new", "callback"]);
    }

    #[test]
    fn raw_placeholder_lookalikes_are_escaped() {
        let p = parse("/_num_?_other_=__");
        assert_eq!(
            tokenize("d", &p).tokens,
            vec!["_num_raw", "_other_raw", "__raw"]
        );
    }

    proptest! {
        #[test]
        fn splitting_is_idempotent(s in "\\PC{0,40}") {
            let once = split_fragment(&s);
            let again: Vec<String> = once.iter().flat_map(|t| split_fragment(t)).collect();
            prop_assert_eq!(&once, &again);
            for t in &once {
                prop_assert!(t.chars().all(is_token_char));
                prop_assert_eq!(t.to_lowercase(), t.clone());
            }
        }

        #[test]
        fn token_order_follows_source(
            segs in proptest::collection::vec("[a-z]{1,5}", 1..4),
            kvs in proptest::collection::vec(("[a-z]{1,5}", "[0-9]{1,5}"), 0..4),
        ) {
            let query: Vec<String> = kvs.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let url = format!("/{}?{}", segs.join("/"), query.join("&"));
            let t = tokenize("d", &parse(&url));
            let mut expected = segs.clone();
            for (k, v) in &kvs {
                expected.push(k.clone());
                expected.push(v.clone());
            }
            prop_assert_eq!(t.tokens, expected);
        }
    }
}
