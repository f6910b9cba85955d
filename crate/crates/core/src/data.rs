//! Corpus loading, vocabularies, logical-form preprocessing and copy
//! alignment.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::SeededRng;

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";

/// Longest logical form (in tokens, excluding EOS) the decoder can emit.
pub const MAX_TARGET_TOKENS: usize = 100;

/// Token inventory with UNK/BOS/EOS pinned at indices 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Orders tokens by descending frequency, ties broken lexicographically.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            if matches!(t, UNK_TOKEN | BOS_TOKEN | EOS_TOKEN) {
                continue;
            }
            *counts.entry(t).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Reserved entries followed by `tokens` in the given order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut list = vec![UNK_TOKEN.to_string(), BOS_TOKEN.to_string(), EOS_TOKEN.to_string()];
        list.extend(tokens);
        let mut v = Vocabulary {
            tokens: list,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn index_or_unk(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, reserved entries included.
    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 3
            || tokens[UNK] != UNK_TOKEN
            || tokens[BOS] != BOS_TOKEN
            || tokens[EOS] != EOS_TOKEN
        {
            return Err(Error::Config("vocabulary file lacks reserved header".into()));
        }
        let mut v = Vocabulary {
            tokens,
            index: HashMap::new(),
        };
        v.reindex();
        if v.index.len() != v.tokens.len() {
            return Err(Error::Config("vocabulary file has duplicate tokens".into()));
        }
        Ok(v)
    }
}

/// Where a corpus came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    GeoQuery,
    GeoQueryStripped,
    Overnight(String),
    Other(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::GeoQuery => write!(f, "GEOQUERY"),
            Provenance::GeoQueryStripped => write!(f, "GEOQUERY-S"),
            Provenance::Overnight(d) => write!(f, "OVERNIGHT:{d}"),
            Provenance::Other(s) => write!(f, "{s}"),
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "GEOQUERY" | "geoquery" => Provenance::GeoQuery,
            "GEOQUERY-S" | "geoquery-s" => Provenance::GeoQueryStripped,
            _ => match s.split_once(':') {
                Some((p, d)) if p.eq_ignore_ascii_case("overnight") => {
                    Provenance::Overnight(d.to_string())
                }
                _ => Provenance::Other(s.to_string()),
            },
        })
    }
}

/// Utterance/logical-form pair as read from disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<usize>,
    /// Target indices, EOS-terminated.
    pub y: Vec<usize>,
    pub x_surface: Vec<String>,
    /// Target surface tokens, ending with [`EOS_TOKEN`].
    pub y_surface: Vec<String>,
    /// `copy_matrix[j][i]` iff `y_surface[j] == x_surface[i]`.
    pub copy_matrix: Vec<Vec<bool>>,
    pub domain: Option<String>,
}

impl Example {
    pub fn new(
        source: &[String],
        target: &[String],
        src: &Vocabulary,
        tgt: &Vocabulary,
        domain: Option<String>,
    ) -> Self {
        let x_surface = source.to_vec();
        let mut y_surface = target.to_vec();
        y_surface.push(EOS_TOKEN.to_string());
        let ex = Example {
            x: x_surface.iter().map(|t| src.index_or_unk(t)).collect(),
            y: y_surface.iter().map(|t| tgt.index_or_unk(t)).collect(),
            x_surface,
            y_surface,
            copy_matrix: Vec::new(),
            domain,
        };
        annotate_copies(ex)
    }

    /// Target surface without the trailing EOS.
    pub fn target_tokens(&self) -> &[String] {
        &self.y_surface[..self.y_surface.len() - 1]
    }
}

/// Fills `copy_matrix` by exact surface-string equality.
pub fn annotate_copies(mut ex: Example) -> Example {
    ex.copy_matrix = ex
        .y_surface
        .iter()
        .map(|y| ex.x_surface.iter().map(|x| x == y).collect())
        .collect();
    ex
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub provenance: Provenance,
}

impl Corpus {
    /// Builds both vocabularies from `pairs` and indexes them.
    pub fn from_pairs(pairs: &[RawPair], provenance: Provenance) -> Self {
        let src = Vocabulary::build(pairs.iter().flat_map(|p| p.source.iter().map(String::as_str)));
        let tgt = Vocabulary::build(pairs.iter().flat_map(|p| p.target.iter().map(String::as_str)));
        Self::with_vocab(pairs, &src, &tgt, provenance)
    }

    /// Indexes `pairs` against existing vocabularies (held-out data).
    pub fn with_vocab(
        pairs: &[RawPair],
        src: &Vocabulary,
        tgt: &Vocabulary,
        provenance: Provenance,
    ) -> Self {
        let domain = match &provenance {
            Provenance::Overnight(d) => Some(d.clone()),
            _ => None,
        };
        Corpus {
            examples: pairs
                .iter()
                .map(|p| Example::new(&p.source, &p.target, src, tgt, domain.clone()))
                .collect(),
            src_vocab: src.clone(),
            tgt_vocab: tgt.clone(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn pairs(&self) -> Vec<RawPair> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| RawPair {
                source: e.x_surface.clone(),
                target: e.target_tokens().to_vec(),
                line: i + 1,
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        pairs_to_tsv(&self.pairs())
    }
}

pub fn pairs_to_tsv(pairs: &[RawPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.source.join(" "));
        out.push('\t');
        out.push_str(&p.target.join(" "));
        out.push('\n');
    }
    out
}

/// Parses `<utterance>\t<logical form>` lines.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<RawPair>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: &str| Error::Parse {
            path: origin.to_string(),
            line,
            msg: msg.to_string(),
        };
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() {
            return Err(err("empty line"));
        }
        let mut fields = raw.split('\t');
        let (Some(src), Some(tgt), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(err("expected exactly one tab separator"));
        };
        let source: Vec<String> = src.split_whitespace().map(str::to_string).collect();
        let target: Vec<String> = tgt.split_whitespace().map(str::to_string).collect();
        if source.is_empty() {
            return Err(err("empty utterance"));
        }
        if target.is_empty() {
            return Err(err("empty logical form"));
        }
        pairs.push(RawPair {
            source,
            target,
            line,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Empty(format!("{origin} contains no examples")));
    }
    Ok(pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<RawPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, &path.display().to_string())
}

/// Reads a TSV file and builds a corpus whose vocabularies come from it.
pub fn load_corpus(path: &Path, provenance: Provenance) -> Result<Corpus> {
    Ok(Corpus::from_pairs(&read_pairs(path)?, provenance))
}

fn is_variable(token: &str) -> bool {
    token.len() == 1 && token.as_bytes()[0].is_ascii_uppercase()
}

/// Renames single-capital-letter variables to `v0, v1, …` in order of
/// first occurrence.
pub fn debruijn_standardize(lf: &[String]) -> Vec<String> {
    let mut seen: Vec<&str> = Vec::new();
    lf.iter()
        .map(|t| {
            if !is_variable(t) {
                return t.clone();
            }
            let k = match seen.iter().position(|s| *s == t.as_str()) {
                Some(k) => k,
                None => {
                    seen.push(t);
                    seen.len() - 1
                }
            };
            format!("v{k}")
        })
        .collect()
}

/// Predicate → natural-language word table for GEOQUERY-S.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordMapping(BTreeMap<String, String>);

impl WordMapping {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('\t') else {
                return Err(Error::Parse {
                    path: "mapping".into(),
                    line: i + 1,
                    msg: "expected predicate<TAB>word".into(),
                });
            };
            map.insert(k.to_string(), v.to_string());
        }
        Ok(WordMapping(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn insert(&mut self, predicate: impl Into<String>, word: impl Into<String>) {
        self.0.insert(predicate.into(), word.into());
    }

    pub fn get(&self, predicate: &str) -> Option<&str> {
        self.0.get(predicate).map(String::as_str)
    }
}

/// Replaces underscore-bearing tokens by their mapped word, or drops the
/// underscores when the token is unmapped.
pub fn strip_logic_tokens(lf: &[String], mapping: &WordMapping) -> Vec<String> {
    lf.iter()
        .map(|t| {
            if !t.contains('_') {
                return t.clone();
            }
            match mapping.get(t) {
                Some(w) => w.to_string(),
                None => {
                    log::debug!("no mapping for {t}; removing underscores");
                    t.replace('_', "")
                }
            }
        })
        .collect()
}

/// Logical-form preprocessing applied before vocabularies are built.
#[derive(Debug, Clone, Default)]
pub struct Preprocess {
    pub debruijn: bool,
    pub strip: Option<WordMapping>,
    /// Run stripping before variable standardization instead of after.
    pub strip_first: bool,
}

impl Preprocess {
    pub fn apply(&self, lf: &[String]) -> Vec<String> {
        let standardize = |v: Vec<String>| {
            if self.debruijn {
                debruijn_standardize(&v)
            } else {
                v
            }
        };
        let strip = |v: Vec<String>| match &self.strip {
            Some(m) => strip_logic_tokens(&v, m),
            None => v,
        };
        if self.strip_first {
            standardize(strip(lf.to_vec()))
        } else {
            strip(standardize(lf.to_vec()))
        }
    }

    /// Preprocesses every target and drops pairs longer than the decode cap.
    pub fn apply_all(&self, pairs: &[RawPair]) -> Vec<RawPair> {
        pairs
            .iter()
            .filter_map(|p| {
                let target = self.apply(&p.target);
                if target.len() > MAX_TARGET_TOKENS {
                    log::warn!(
                        "line {}: logical form has {} tokens (cap {MAX_TARGET_TOKENS}); dropped",
                        p.line,
                        target.len()
                    );
                    return None;
                }
                Some(RawPair {
                    source: p.source.clone(),
                    target,
                    line: p.line,
                })
            })
            .collect()
    }
}

pub const GEOQUERY_TRAIN: usize = 680;
pub const GEOQUERY_TEST: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// First 680 lines train, remaining 200 test.
    StandardGeoQuery,
    Fraction { train: f64, seed: u64 },
}

impl std::str::FromStr for SplitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "standard:geoquery" {
            return Ok(SplitSpec::StandardGeoQuery);
        }
        let bad = || Error::Config(format!("bad split spec {s:?}"));
        let rest = s.strip_prefix("frac:").ok_or_else(bad)?;
        let (frac, seed) = match rest.split_once(",seed:") {
            Some((f, sd)) => (f, sd.parse::<u64>().map_err(|_| bad())?),
            None => (rest, 0),
        };
        let train: f64 = frac.parse().map_err(|_| bad())?;
        if !(0.0..=1.0).contains(&train) {
            return Err(bad());
        }
        Ok(SplitSpec::Fraction { train, seed })
    }
}

/// Disjoint, exhaustive partition of `pairs` into (train, test).
pub fn split_pairs(pairs: &[RawPair], spec: SplitSpec) -> Result<(Vec<RawPair>, Vec<RawPair>)> {
    match spec {
        SplitSpec::StandardGeoQuery => {
            let need = GEOQUERY_TRAIN + GEOQUERY_TEST;
            if pairs.len() != need {
                return Err(Error::Config(format!(
                    "standard GeoQuery split needs {need} examples, corpus has {}",
                    pairs.len()
                )));
            }
            Ok((
                pairs[..GEOQUERY_TRAIN].to_vec(),
                pairs[GEOQUERY_TRAIN..].to_vec(),
            ))
        }
        SplitSpec::Fraction { train, seed } => {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            SeededRng::new(seed, 0).shuffle(&mut order);
            let n_train = (train * pairs.len() as f64).round() as usize;
            let (a, b) = order.split_at(n_train.min(pairs.len()));
            let mut a = a.to_vec();
            let mut b = b.to_vec();
            a.sort_unstable();
            b.sort_unstable();
            Ok((
                a.into_iter().map(|i| pairs[i].clone()).collect(),
                b.into_iter().map(|i| pairs[i].clone()).collect(),
            ))
        }
    }
}

/// Splits a corpus; the train side rebuilds vocabularies from its own
/// examples and the test side is indexed against them.
pub fn split_corpus(corpus: &Corpus, spec: SplitSpec) -> Result<(Corpus, Corpus)> {
    let (train, test) = split_pairs(&corpus.pairs(), spec)?;
    let train_c = Corpus::from_pairs(&train, corpus.provenance.clone());
    let test_c = Corpus::with_vocab(
        &test,
        &train_c.src_vocab,
        &train_c.tgt_vocab,
        corpus.provenance.clone(),
    );
    Ok((train_c, test_c))
}
