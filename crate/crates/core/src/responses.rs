//! Per-language response sets: frequency mining with LM penalties,
//! trans-creation into low-resource languages (penalties inherited), and
//! encoding-vector precompute.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{PseudoLexicon, RegionShard};
use crate::error::{Error, Result};
use crate::model::{quantize, ModelParams};
use crate::text::tokenize;

/// Lowercase + NFC + trim + collapse internal whitespace.
pub fn normalize_reply(text: &str) -> String {
    text.nfc()
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseEntry {
    pub text: String,
    pub lang: String,
    pub count: u64,
    /// log relative frequency when mined; inherited verbatim when
    /// trans-created. Always <= 0.
    pub lm_penalty: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vector: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSet {
    pub lang: String,
    pub entries: Vec<ResponseEntry>,
    pub total_count: u64,
}

/// Top-`cap` most frequent normalized replies for `lang` with count >=
/// `min_count`. Ties break lexicographically. Penalty = ln(count / total
/// reply occurrences of the language in the shard).
pub fn mine_responses(
    shard: &RegionShard,
    lang: &str,
    cap: usize,
    min_count: u64,
) -> Result<ResponseSet> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut total: u64 = 0;
    for pair in shard.pairs.iter().filter(|p| p.lang == lang) {
        *counts.entry(normalize_reply(&pair.reply)).or_insert(0) += 1;
        total += 1;
    }
    let mut ranked: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    if ranked.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no reply for language {lang} meets min_count {min_count}"
        )));
    }
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(cap);
    let entries = ranked
        .into_iter()
        .map(|(text, count)| ResponseEntry {
            text,
            lang: lang.to_string(),
            count,
            lm_penalty: (count as f64 / total as f64).ln(),
            vector: None,
        })
        .collect();
    Ok(ResponseSet {
        lang: lang.to_string(),
        entries,
        total_count: total,
    })
}

/// Entry-wise pseudo-translation of a mined set; penalty scores inherited
/// verbatim, counts carried for bookkeeping.
pub fn transcreate(
    source: &ResponseSet,
    lexicon: &PseudoLexicon,
    target_lang: &str,
) -> Result<ResponseSet> {
    if lexicon.target_lang != target_lang {
        return Err(Error::InvalidInput(format!(
            "lexicon targets {} but {} requested",
            lexicon.target_lang, target_lang
        )));
    }
    let entries: Result<Vec<ResponseEntry>> = source
        .entries
        .iter()
        .map(|e| {
            Ok(ResponseEntry {
                text: lexicon.translate_text(&e.text)?,
                lang: target_lang.to_string(),
                count: e.count,
                lm_penalty: e.lm_penalty,
                vector: None,
            })
        })
        .collect();
    Ok(ResponseSet {
        lang: target_lang.to_string(),
        entries: entries?,
        total_count: source.total_count,
    })
}

/// Fill each entry's encoding vector with the reply tower applied to its
/// text, rounded through f32 so the on-disk blob round-trips bit-exactly.
/// Idempotent.
pub fn precompute_vectors(params: &ModelParams, set: &mut ResponseSet) -> Result<()> {
    let vocab = params.config.vocab();
    let max_len = params.config.max_reply_len;
    for entry in &mut set.entries {
        let seq = tokenize(&entry.text, &entry.lang, max_len, &vocab);
        entry.vector = Some(params.encode(&seq)?.iter().map(|&v| quantize(v)).collect());
    }
    Ok(())
}

// --- persistence: entries.jsonl + vectors.bin + manifest.json --------------

#[derive(Debug, Serialize, Deserialize)]
struct SetManifest {
    lang: String,
    total_count: u64,
    entries: usize,
    hidden_dim: usize,
    blob_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryLine {
    text: String,
    lang: String,
    count: u64,
    lm_penalty: f64,
}

impl ResponseSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let hidden = self
            .entries
            .first()
            .and_then(|e| e.vector.as_ref())
            .map(|v| v.len())
            .unwrap_or(0);
        std::fs::create_dir_all(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let io = |p: &Path, e: std::io::Error| Error::Io {
            path: p.display().to_string(),
            source: e,
        };

        let jsonl_path = path.join("entries.jsonl");
        let mut f = std::fs::File::create(&jsonl_path).map_err(|e| io(&jsonl_path, e))?;
        let mut blob: Vec<u8> = Vec::new();
        for entry in &self.entries {
            let line = EntryLine {
                text: entry.text.clone(),
                lang: entry.lang.clone(),
                count: entry.count,
                lm_penalty: entry.lm_penalty,
            };
            writeln!(f, "{}", serde_json::to_string(&line).expect("entry"))
                .map_err(|e| io(&jsonl_path, e))?;
            if let Some(v) = &entry.vector {
                for x in v {
                    blob.extend_from_slice(&(*x as f32).to_le_bytes());
                }
            }
        }
        let blob_path = path.join("vectors.bin");
        std::fs::write(&blob_path, &blob).map_err(|e| io(&blob_path, e))?;
        let manifest = SetManifest {
            lang: self.lang.clone(),
            total_count: self.total_count,
            entries: self.entries.len(),
            hidden_dim: hidden,
            blob_sha256: format!("{:x}", Sha256::digest(&blob)),
        };
        let man_path = path.join("manifest.json");
        std::fs::write(
            &man_path,
            serde_json::to_string_pretty(&manifest).expect("manifest"),
        )
        .map_err(|e| io(&man_path, e))
    }

    pub fn load(path: &Path) -> Result<ResponseSet> {
        let io = |p: &Path, e: std::io::Error| Error::Io {
            path: p.display().to_string(),
            source: e,
        };
        let man_path = path.join("manifest.json");
        let manifest: SetManifest = serde_json::from_str(
            &std::fs::read_to_string(&man_path).map_err(|e| io(&man_path, e))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad response-set manifest: {e}")))?;
        let blob_path = path.join("vectors.bin");
        let blob = std::fs::read(&blob_path).map_err(|e| io(&blob_path, e))?;
        if format!("{:x}", Sha256::digest(&blob)) != manifest.blob_sha256 {
            return Err(Error::Checkpoint(
                "response-set vector blob checksum mismatch".into(),
            ));
        }
        let jsonl_path = path.join("entries.jsonl");
        let file = std::fs::File::open(&jsonl_path).map_err(|e| io(&jsonl_path, e))?;
        let mut entries = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io(&jsonl_path, e))?;
            let el: EntryLine = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                path: jsonl_path.display().to_string(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
            let vector = if manifest.hidden_dim > 0 {
                let start = idx * manifest.hidden_dim * 4;
                let end = start + manifest.hidden_dim * 4;
                if end > blob.len() {
                    return Err(Error::Checkpoint("vector blob truncated".into()));
                }
                Some(
                    blob[start..end]
                        .chunks_exact(4)
                        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                        .collect(),
                )
            } else {
                None
            };
            entries.push(ResponseEntry {
                text: el.text,
                lang: el.lang,
                count: el.count,
                lm_penalty: el.lm_penalty,
                vector,
            });
        }
        if entries.len() != manifest.entries {
            return Err(Error::Checkpoint(
                "response-set entry count does not match manifest".into(),
            ));
        }
        Ok(ResponseSet {
            lang: manifest.lang,
            entries,
            total_count: manifest.total_count,
        })
    }
}
