//! Tokenization, truncation, MLM/TLM masking, and character n-gram
//! language identification.
//!
//! The tokenizer is a hashed whitespace/punctuation splitter: ids are a pure
//! function of (token, hash seed, vocab size), so no vocabulary file needs to
//! travel with checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::ParallelPair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: u32,
    pub hash_seed: u64,
}

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const SEP: u32 = 3;
const NUM_SPECIAL: u32 = 4;

impl Vocabulary {
    pub fn new(size: u32, hash_seed: u64) -> Result<Self> {
        if size <= NUM_SPECIAL {
            return Err(Error::Config(format!(
                "vocab size {size} must exceed the {NUM_SPECIAL} special ids"
            )));
        }
        Ok(Vocabulary { size, hash_seed })
    }

    /// FNV-1a seeded hash into [NUM_SPECIAL, size); never collides with a
    /// special id.
    pub fn token_id(&self, token: &str) -> u32 {
        let mut h: u64 = 0xcbf29ce484222325 ^ self.hash_seed;
        for b in token.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        NUM_SPECIAL + (h % u64::from(self.size - NUM_SPECIAL)) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub lang: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSample {
    pub ids: Vec<u32>,
    pub target_id: u32,
    pub target_pos: usize,
    pub lang: String,
}

/// Unicode NFC + lowercase, then split into alphanumeric runs. Punctuation
/// and whitespace act as boundaries and are dropped.
pub fn normalize_and_split(text: &str) -> Vec<String> {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in lowered.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            cur.push(ch);
        } else if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

pub fn tokenize(text: &str, lang: &str, max_len: usize, vocab: &Vocabulary) -> TokenSequence {
    let ids = normalize_and_split(text)
        .iter()
        .take(max_len)
        .map(|t| vocab.token_id(t))
        .collect();
    TokenSequence {
        ids,
        lang: lang.to_string(),
    }
}

/// Replace one uniformly chosen position with MASK, remembering the target.
pub fn mask_single<R: Rng>(seq: &TokenSequence, rng: &mut R) -> Result<MaskedSample> {
    if seq.ids.is_empty() {
        return Err(Error::InvalidInput("cannot mask an empty sequence".into()));
    }
    let pos = rng.random_range(0..seq.ids.len());
    let mut ids = seq.ids.clone();
    let target_id = ids[pos];
    ids[pos] = MASK;
    Ok(MaskedSample {
        ids,
        target_id,
        target_pos: pos,
        lang: seq.lang.clone(),
    })
}

/// TLM sample: tokenize(source) + [SEP] + tokenize(target), masked at one
/// position that is never the SEP. Sides are truncated proportionally when
/// the concatenation would exceed `max_len`.
pub fn make_tlm_sample<R: Rng>(
    pp: &ParallelPair,
    vocab: &Vocabulary,
    max_len: usize,
    rng: &mut R,
) -> Result<MaskedSample> {
    let src = normalize_and_split(&pp.src);
    let tgt = normalize_and_split(&pp.tgt);
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::InvalidInput(
            "both sides of a parallel pair must be non-empty".into(),
        ));
    }
    let (mut src_len, mut tgt_len) = (src.len(), tgt.len());
    if src_len + tgt_len + 1 > max_len {
        let budget = max_len - 1;
        src_len = ((budget * src_len) / (src_len + tgt_len)).max(1);
        tgt_len = (budget - src_len).max(1);
        src_len = budget - tgt_len;
    }
    let mut ids: Vec<u32> = src[..src_len].iter().map(|t| vocab.token_id(t)).collect();
    let sep_pos = ids.len();
    ids.push(SEP);
    ids.extend(tgt[..tgt_len].iter().map(|t| vocab.token_id(t)));

    // draw over maskable positions only (everything but SEP)
    let maskable = ids.len() - 1;
    let mut pos = rng.random_range(0..maskable);
    if pos >= sep_pos {
        pos += 1;
    }
    let target_id = ids[pos];
    ids[pos] = MASK;
    Ok(MaskedSample {
        ids,
        target_id,
        target_pos: pos,
        lang: pp.src_lang.clone(),
    })
}

pub const UNKNOWN_LANG: &str = "UNKNOWN";

/// Character trigram frequency profiles with cosine similarity.
/// Ordered maps keep summation order fixed, so similarity scores are
/// reproducible across processes.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LanguageProfiles {
    pub profiles: BTreeMap<String, BTreeMap<String, f64>>,
}

fn trigram_counts(text: &str) -> BTreeMap<String, f64> {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    let chars: Vec<char> = lowered.chars().collect();
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    for w in chars.windows(3) {
        *counts.entry(w.iter().collect()).or_insert(0.0) += 1.0;
    }
    counts
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(k, va)| b.get(k).map(|vb| va * vb))
        .sum();
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl LanguageProfiles {
    /// Accumulate held-out monolingual text into the profile for `lang`.
    pub fn add_text(&mut self, lang: &str, text: &str) {
        let entry = self.profiles.entry(lang.to_string()).or_default();
        for (k, v) in trigram_counts(text) {
            *entry.entry(k).or_insert(0.0) += v;
        }
    }

    pub fn identify(&self, text: &str) -> (String, f64) {
        let query = trigram_counts(text);
        if query.is_empty() || self.profiles.is_empty() {
            return (UNKNOWN_LANG.to_string(), 0.0);
        }
        let mut best = (UNKNOWN_LANG.to_string(), 0.0);
        for (lang, profile) in &self.profiles {
            let sim = cosine(&query, profile);
            if sim > best.1 {
                best = (lang.clone(), sim);
            }
        }
        best
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.profiles).expect("profiles serialize");
        std::fs::write(path, json).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let profiles = serde_json::from_str(&raw).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(LanguageProfiles { profiles })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::new(30_000, 7).unwrap()
    }

    #[test]
    fn hello_world_is_two_ids() {
        let seq = tokenize("Hello, world", "en", 96, &vocab());
        assert_eq!(seq.ids.len(), 2);
        let again = tokenize("Hello, world", "en", 96, &vocab());
        assert_eq!(seq, again);
    }

    #[test]
    fn truncation_keeps_prefix() {
        let text = (0..120).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
        let seq = tokenize(&text, "en", 96, &vocab());
        assert_eq!(seq.ids.len(), 96);
        let full = tokenize(&text, "en", 120, &vocab());
        assert_eq!(&full.ids[..96], &seq.ids[..]);
    }

    #[test]
    fn token_ids_avoid_specials() {
        let v = vocab();
        for t in ["hello", "a", "", "mask", "pad", "the"] {
            assert!(v.token_id(t) >= NUM_SPECIAL);
            assert!(v.token_id(t) < v.size);
        }
    }

    #[test]
    fn mask_single_len1_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = TokenSequence { ids: vec![42], lang: "en".into() };
        let s = mask_single(&seq, &mut rng).unwrap();
        assert_eq!(s.target_pos, 0);
        assert_eq!(s.target_id, 42);
        assert_eq!(s.ids, vec![MASK]);
    }

    #[test]
    fn mask_single_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = TokenSequence { ids: (10..20).collect(), lang: "en".into() };
        let mut hits = [0usize; 10];
        for _ in 0..10_000 {
            let s = mask_single(&seq, &mut rng).unwrap();
            hits[s.target_pos] += 1;
            // invertibility
            let mut back = s.ids.clone();
            back[s.target_pos] = s.target_id;
            assert_eq!(back, seq.ids);
        }
        for h in hits {
            let f = h as f64 / 10_000.0;
            assert!((f - 0.1).abs() < 0.02, "position frequency {f}");
        }
    }

    #[test]
    fn mask_single_empty_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = TokenSequence { ids: vec![], lang: "en".into() };
        assert!(mask_single(&seq, &mut rng).is_err());
    }

    #[test]
    fn tlm_sample_concatenates_with_sep() {
        let pp = ParallelPair {
            src: "a b c".into(),
            src_lang: "en".into(),
            tgt: "w x y z".into(),
            tgt_lang: "zz".into(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = make_tlm_sample(&pp, &vocab(), 160, &mut rng).unwrap();
        assert_eq!(s.ids.len(), 8);
        assert_eq!(s.ids.iter().filter(|&&id| id == MASK).count(), 1);
        assert_eq!(s.ids[3], SEP);
    }

    #[test]
    fn tlm_never_masks_sep() {
        let pp = ParallelPair {
            src: "a b".into(),
            src_lang: "en".into(),
            tgt: "x y".into(),
            tgt_lang: "zz".into(),
        };
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let s = make_tlm_sample(&pp, &v, 160, &mut rng).unwrap();
            assert_ne!(s.target_pos, 2);
            assert_ne!(s.target_id, SEP);
        }
    }

    #[test]
    fn tlm_deterministic_under_seed() {
        let pp = ParallelPair {
            src: "one two three".into(),
            src_lang: "en".into(),
            tgt: "uno dos tres".into(),
            tgt_lang: "es".into(),
        };
        let v = vocab();
        let a = make_tlm_sample(&pp, &v, 160, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_tlm_sample(&pp, &v, 160, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tlm_truncates_proportionally() {
        let src = (0..30).map(|i| format!("s{i}")).collect::<Vec<_>>().join(" ");
        let tgt = (0..60).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
        let pp = ParallelPair {
            src,
            src_lang: "en".into(),
            tgt,
            tgt_lang: "zz".into(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = make_tlm_sample(&pp, &vocab(), 31, &mut rng).unwrap();
        assert_eq!(s.ids.len(), 31);
        // SEP sits at the truncated source boundary: 30/90 of the 30 budget
        assert_eq!(s.ids.iter().position(|&id| id == SEP), Some(10));
    }

    #[test]
    fn identify_empty_text() {
        let profiles = LanguageProfiles::default();
        assert_eq!(profiles.identify(""), (UNKNOWN_LANG.to_string(), 0.0));
    }

    #[test]
    fn identify_separates_synthetic_suffix_languages() {
        let mut p = LanguageProfiles::default();
        p.add_text("aa", "hello_aa there_aa how_aa are_aa you_aa");
        p.add_text("bb", "hello_bb there_bb how_bb are_bb you_bb");
        let (lang, conf) = p.identify("nice_aa day_aa friend_aa");
        assert_eq!(lang, "aa");
        assert!(conf > 0.3);
    }
}
