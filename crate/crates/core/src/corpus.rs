//! Region-locked corpus ingestion, pseudo-translation for low-resource
//! languages, evaluation splits, and the region access guard.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::responses::{normalize_reply, ResponseSet};
use crate::text::normalize_and_split;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "EUR")]
    Eur,
    #[serde(rename = "NAM")]
    Nam,
    #[serde(rename = "LRL")]
    Lrl,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Region::Eur => "EUR",
            Region::Nam => "NAM",
            Region::Lrl => "LRL",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Region {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "EUR" => Ok(Region::Eur),
            "NAM" => Ok(Region::Nam),
            "LRL" => Ok(Region::Lrl),
            other => Err(Error::Config(format!("unknown region {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageReplyPair {
    pub message: String,
    pub reply: String,
    pub lang: String,
    pub region: Region,
}

#[derive(Debug, Clone)]
pub struct RegionShard {
    pub region: Region,
    pub languages: BTreeSet<String>,
    pub pairs: Vec<MessageReplyPair>,
    pub origin_path: String,
    pub public_auxiliary: bool,
    /// Lines skipped during ingestion (parse failures, empty texts, unknown
    /// language). Region mislabeling is a hard error instead.
    pub malformed_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ShardHeader {
    pub region: Region,
    pub languages: BTreeSet<String>,
    #[serde(default)]
    pub public_auxiliary: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub src: String,
    pub src_lang: String,
    pub tgt: String,
    pub tgt_lang: String,
}

/// Deterministic stand-in for a machine-translation system. Explicit entries
/// take precedence; the fallback suffix rule maps `token` to
/// `token_<suffix>`, which is injective and trivially invertible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLexicon {
    pub source_lang: String,
    pub target_lang: String,
    pub entries: BTreeMap<String, String>,
    pub fallback_suffix: Option<String>,
}

impl PseudoLexicon {
    pub fn suffix_rule(source_lang: &str, target_lang: &str) -> Self {
        PseudoLexicon {
            source_lang: source_lang.to_string(),
            target_lang: target_lang.to_string(),
            entries: BTreeMap::new(),
            fallback_suffix: Some(target_lang.to_string()),
        }
    }

    pub fn translate_token(&self, token: &str) -> Result<String> {
        if let Some(t) = self.entries.get(token) {
            return Ok(t.clone());
        }
        match &self.fallback_suffix {
            Some(sfx) => Ok(format!("{token}_{sfx}")),
            None => Err(Error::LexiconMiss {
                token: token.to_string(),
            }),
        }
    }

    /// Word-by-word translation over the normalized token stream.
    pub fn translate_text(&self, text: &str) -> Result<String> {
        let tokens = normalize_and_split(text);
        let translated: Result<Vec<String>> =
            tokens.iter().map(|t| self.translate_token(t)).collect();
        Ok(translated?.join(" "))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Load a shard file: one header line, then one JSON record per line.
/// Malformed lines are counted and skipped; a record carrying a region other
/// than `expected_region` aborts the load.
pub fn load_shard(path: &Path, expected_region: Region) -> Result<RegionShard> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Malformed {
            path: path.display().to_string(),
            line: 1,
            msg: "missing shard header".into(),
        })?
        .map_err(|e| io_err(path, e))?;
    let header: ShardHeader = serde_json::from_str(&header_line).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        line: 1,
        msg: format!("bad shard header: {e}"),
    })?;
    if header.region != expected_region && !header.public_auxiliary {
        return Err(Error::RegionViolation {
            shard: path.display().to_string(),
            shard_region: header.region.to_string(),
            stage_region: expected_region.to_string(),
        });
    }

    let mut pairs = Vec::new();
    let mut malformed = 0usize;
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: MessageReplyPair = match serde_json::from_str(&line) {
            Ok(p) => p,
            Err(_) => {
                malformed += 1;
                continue;
            }
        };
        if pair.region != header.region {
            return Err(Error::RegionViolation {
                shard: format!("{}:{}", path.display(), idx + 2),
                shard_region: pair.region.to_string(),
                stage_region: expected_region.to_string(),
            });
        }
        if normalize_and_split(&pair.message).is_empty()
            || normalize_and_split(&pair.reply).is_empty()
            || !header.languages.contains(&pair.lang)
        {
            malformed += 1;
            continue;
        }
        pairs.push(pair);
    }

    Ok(RegionShard {
        region: header.region,
        languages: header.languages,
        pairs,
        origin_path: path.display().to_string(),
        public_auxiliary: header.public_auxiliary,
        malformed_count: malformed,
    })
}

/// Parallel corpora are public task-agnostic data: plain JSON-lines, no header.
pub fn load_parallel(path: &Path) -> Result<Vec<ParallelPair>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pp: ParallelPair = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if pp.src_lang == pp.tgt_lang || pp.src.is_empty() || pp.tgt.is_empty() {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                line: idx + 1,
                msg: "invalid parallel pair".into(),
            });
        }
        out.push(pp);
    }
    Ok(out)
}

/// Monolingual auxiliary corpus for MLM: header {"languages", "public_auxiliary"}
/// then lines {"text", "lang"}.
#[derive(Debug, Clone)]
pub struct MonoCorpus {
    pub languages: BTreeSet<String>,
    pub texts: Vec<(String, String)>, // (lang, text)
    pub origin_path: String,
    pub public_auxiliary: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct MonoHeader {
    languages: BTreeSet<String>,
    #[serde(default)]
    public_auxiliary: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MonoLine {
    pub text: String,
    pub lang: String,
}

pub fn load_mono(path: &Path) -> Result<MonoCorpus> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Malformed {
            path: path.display().to_string(),
            line: 1,
            msg: "missing mono corpus header".into(),
        })?
        .map_err(|e| io_err(path, e))?;
    let header: MonoHeader = serde_json::from_str(&header_line).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        line: 1,
        msg: e.to_string(),
    })?;
    let mut texts = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MonoLine = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            line: idx + 2,
            msg: e.to_string(),
        })?;
        texts.push((rec.lang, rec.text));
    }
    Ok(MonoCorpus {
        languages: header.languages,
        texts,
        origin_path: path.display().to_string(),
        public_auxiliary: header.public_auxiliary,
    })
}

/// Translate one pair into a pseudo low-resource pair. Token count is
/// preserved and the output is deterministic.
pub fn pseudo_translate(
    pair: &MessageReplyPair,
    lexicon: &PseudoLexicon,
    target_lang: &str,
) -> Result<MessageReplyPair> {
    if pair.lang != lexicon.source_lang {
        return Err(Error::InvalidInput(format!(
            "pair language {} does not match lexicon source {}",
            pair.lang, lexicon.source_lang
        )));
    }
    if lexicon.target_lang != target_lang {
        return Err(Error::InvalidInput(format!(
            "lexicon targets {} but {} requested",
            lexicon.target_lang, target_lang
        )));
    }
    if normalize_and_split(&pair.message).is_empty() || normalize_and_split(&pair.reply).is_empty()
    {
        return Err(Error::InvalidInput(
            "cannot pseudo-translate an empty pair".into(),
        ));
    }
    Ok(MessageReplyPair {
        message: lexicon.translate_text(&pair.message)?,
        reply: lexicon.translate_text(&pair.reply)?,
        lang: target_lang.to_string(),
        region: Region::Lrl,
    })
}

#[derive(Debug, Clone)]
pub struct EvalSplit {
    /// Pairs whose reply is a member of the response set (GoldenMR).
    pub golden: Vec<MessageReplyPair>,
    /// Unrestricted pairs (GenMR).
    pub general: Vec<MessageReplyPair>,
    /// Remaining pairs, disjoint from both when a holdout seed is supplied.
    pub train: Vec<MessageReplyPair>,
    /// Set when golden_fraction was unreachable (too few matching replies).
    pub warning: bool,
}

/// Split a shard into golden / general / training pairs. With a holdout seed
/// the three index sets are pairwise disjoint; without one, `general` and
/// `train` both cover everything outside `golden`.
pub fn build_eval_sets(
    shard: &RegionShard,
    responses: &BTreeMap<String, ResponseSet>,
    golden_fraction: f64,
    holdout_seed: Option<u64>,
) -> Result<EvalSplit> {
    for lang in &shard.languages {
        match responses.get(lang) {
            Some(set) if !set.entries.is_empty() => {}
            _ => {
                return Err(Error::InvalidInput(format!(
                    "no responses for shard language {lang}"
                )))
            }
        }
    }
    let normalized_sets: BTreeMap<&String, BTreeSet<String>> = responses
        .iter()
        .map(|(lang, set)| {
            (
                lang,
                set.entries
                    .iter()
                    .map(|e| normalize_reply(&e.text))
                    .collect(),
            )
        })
        .collect();

    let mut matching: Vec<usize> = Vec::new();
    let mut rest: Vec<usize> = Vec::new();
    for (i, pair) in shard.pairs.iter().enumerate() {
        let is_golden = normalized_sets
            .get(&pair.lang)
            .is_some_and(|s| s.contains(&normalize_reply(&pair.reply)));
        if is_golden {
            matching.push(i);
        } else {
            rest.push(i);
        }
    }

    let want = (golden_fraction * shard.pairs.len() as f64).round() as usize;
    let warning = matching.len() < want;

    let take = |idx: &[usize]| -> Vec<MessageReplyPair> {
        idx.iter().map(|&i| shard.pairs[i].clone()).collect()
    };

    match holdout_seed {
        None => {
            let golden_idx: Vec<usize> = matching.iter().copied().take(want).collect();
            let rest_all: Vec<usize> = (0..shard.pairs.len())
                .filter(|i| !golden_idx.contains(i))
                .collect();
            Ok(EvalSplit {
                golden: take(&golden_idx),
                general: take(&rest_all),
                train: take(&rest_all),
                warning,
            })
        }
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut matching = matching;
            matching.shuffle(&mut rng);
            let golden_idx: Vec<usize> = matching.iter().copied().take(want).collect();
            let mut remaining: Vec<usize> = matching[golden_idx.len()..].to_vec();
            remaining.extend(rest);
            remaining.shuffle(&mut rng);
            let general_count = want.min(remaining.len());
            let general_idx = remaining[..general_count].to_vec();
            let train_idx = remaining[general_count..].to_vec();
            Ok(EvalSplit {
                golden: take(&golden_idx),
                general: take(&general_idx),
                train: take(&train_idx),
                warning,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Permit,
    Deny,
}

/// Region guard: a shard may be read by a stage iff regions match or the
/// shard is marked public-auxiliary. Checkpoints are exempt by construction
/// (they are not shards).
pub fn assert_region_access(stage_region: Region, shard: &RegionShard) -> Access {
    if shard.public_auxiliary || shard.region == stage_region {
        Access::Permit
    } else {
        Access::Deny
    }
}
