//! Seeded synthetic multilingual corpora with known cross-lingual alignment.
//!
//! A base "pivot" corpus of intent-structured message-reply pairs is
//! generated from pseudo-word pools; every other language is a deterministic
//! suffix transform of the pivot, so ground-truth alignment across languages
//! is exact and transfer can be measured directly.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    MessageReplyPair, MonoCorpus, ParallelPair, PseudoLexicon, Region, RegionShard,
};
use crate::error::{Error, Result};
use crate::trainer::PIVOT_LANG;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub intents: usize,
    pub pairs_per_lang: usize,
    pub eur_langs: Vec<String>,
    pub nam_langs: Vec<String>,
    pub lrl_langs: Vec<String>,
    pub parallel_per_lang: usize,
    pub mono_per_lang: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            intents: 12,
            pairs_per_lang: 200,
            eur_langs: vec!["aa".into(), "bb".into(), "cc".into()],
            nam_langs: vec!["dd".into(), "ee".into(), PIVOT_LANG.into()],
            lrl_langs: vec!["xx".into(), "yy".into()],
            parallel_per_lang: 80,
            mono_per_lang: 80,
        }
    }
}

const SYLLABLES: [&str; 16] = [
    "ba", "do", "ki", "lu", "mer", "nop", "qua", "ril", "sa", "tev", "ul", "vor", "wi", "xen",
    "yol", "zam",
];

/// Unique pseudo-word for a counter value; the syllable triple is a
/// bijection of the counter below 16^3.
fn word(counter: usize) -> String {
    format!(
        "{}{}{}",
        SYLLABLES[counter % 16],
        SYLLABLES[(counter / 16) % 16],
        SYLLABLES[(counter / 256) % 16]
    )
}

const MSG_WORDS_PER_INTENT: usize = 6;
const REPLY_WORDS_PER_INTENT: usize = 3;
const FILLER_WORDS: usize = 8;

struct IntentSpace {
    msg_pools: Vec<Vec<String>>,
    replies: Vec<String>,
    fillers: Vec<String>,
}

fn intent_space(intents: usize) -> IntentSpace {
    let msg_pools = (0..intents)
        .map(|i| {
            (0..MSG_WORDS_PER_INTENT)
                .map(|k| word(i * MSG_WORDS_PER_INTENT + k))
                .collect()
        })
        .collect();
    let replies = (0..intents)
        .map(|i| {
            (0..REPLY_WORDS_PER_INTENT)
                .map(|k| word(1000 + i * REPLY_WORDS_PER_INTENT + k))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let fillers = (0..FILLER_WORDS).map(|k| word(2000 + k)).collect();
    IntentSpace {
        msg_pools,
        replies,
        fillers,
    }
}

fn pivot_message(space: &IntentSpace, intent: usize, rng: &mut ChaCha8Rng) -> String {
    let pool = &space.msg_pools[intent];
    let n = rng.random_range(3..=5);
    let mut picked: Vec<String> = pool
        .choose_multiple(rng, n.min(pool.len()))
        .cloned()
        .collect();
    picked.push(space.fillers[rng.random_range(0..space.fillers.len())].clone());
    picked.shuffle(rng);
    picked.join(" ")
}

fn translate(text: &str, lang: &str) -> String {
    if lang == PIVOT_LANG {
        return text.to_string();
    }
    let lex = PseudoLexicon::suffix_rule(PIVOT_LANG, lang);
    lex.translate_text(text).expect("suffix rule is total")
}

#[derive(Debug)]
pub struct SynthData {
    pub eur: RegionShard,
    pub nam: RegionShard,
    pub lrl: RegionShard,
    pub parallel: Vec<ParallelPair>,
    pub mono: MonoCorpus,
}

fn gen_shard(
    cfg: &SynthConfig,
    space: &IntentSpace,
    region: Region,
    langs: &[String],
    rng: &mut ChaCha8Rng,
) -> RegionShard {
    let mut pairs = Vec::new();
    for lang in langs {
        for i in 0..cfg.pairs_per_lang {
            let intent = i % cfg.intents;
            let message = pivot_message(space, intent, rng);
            pairs.push(MessageReplyPair {
                message: translate(&message, lang),
                reply: translate(&space.replies[intent], lang),
                lang: lang.clone(),
                region,
            });
        }
    }
    RegionShard {
        region,
        languages: langs.iter().cloned().collect(),
        pairs,
        origin_path: format!("synth:{region}"),
        public_auxiliary: false,
        malformed_count: 0,
    }
}

/// Generate all corpora in memory. LRL shards hold pseudo-translated pairs
/// plus fresh pivot-language pairs (the pivot anchors stage 3).
pub fn generate(cfg: &SynthConfig, seed: u64) -> SynthData {
    let space = intent_space(cfg.intents);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let eur = gen_shard(cfg, &space, Region::Eur, &cfg.eur_langs, &mut rng);
    let nam = gen_shard(cfg, &space, Region::Nam, &cfg.nam_langs, &mut rng);
    let mut lrl_langs = cfg.lrl_langs.clone();
    lrl_langs.push(PIVOT_LANG.to_string());
    let lrl = gen_shard(cfg, &space, Region::Lrl, &lrl_langs, &mut rng);

    let all_langs: Vec<String> = cfg
        .eur_langs
        .iter()
        .chain(&cfg.nam_langs)
        .chain(&cfg.lrl_langs)
        .cloned()
        .collect();

    let mut parallel = Vec::new();
    for lang in all_langs.iter().filter(|l| l.as_str() != PIVOT_LANG) {
        for i in 0..cfg.parallel_per_lang {
            let intent = i % cfg.intents;
            let src = pivot_message(&space, intent, &mut rng);
            parallel.push(ParallelPair {
                tgt: translate(&src, lang),
                src,
                src_lang: PIVOT_LANG.into(),
                tgt_lang: lang.clone(),
            });
        }
    }

    let mut mono_langs: BTreeSet<String> = all_langs.iter().cloned().collect();
    mono_langs.insert(PIVOT_LANG.to_string());
    let mut texts = Vec::new();
    for lang in &mono_langs {
        for i in 0..cfg.mono_per_lang {
            let intent = i % cfg.intents;
            let base = pivot_message(&space, intent, &mut rng);
            texts.push((lang.clone(), translate(&base, lang)));
        }
    }
    let mono = MonoCorpus {
        languages: mono_langs,
        texts,
        origin_path: "synth:mono".into(),
        public_auxiliary: true,
    };

    SynthData {
        eur,
        nam,
        lrl,
        parallel,
        mono,
    }
}

fn write_file(path: &Path, lines: &[String]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.display().to_string(),
            source: e,
        })?;
    }
    let mut f = File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    for line in lines {
        writeln!(f, "{line}").map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

fn shard_lines(shard: &RegionShard) -> Vec<String> {
    let mut lines = vec![serde_json::json!({
        "region": shard.region.to_string(),
        "languages": shard.languages,
        "public_auxiliary": shard.public_auxiliary,
    })
    .to_string()];
    for pair in &shard.pairs {
        lines.push(serde_json::to_string(pair).expect("pair"));
    }
    lines
}

/// Write shards + public corpora under `dir`. Byte-identical for a fixed
/// seed and config.
pub fn write_all(cfg: &SynthConfig, seed: u64, dir: &Path) -> Result<SynthData> {
    let data = generate(cfg, seed);
    write_file(&dir.join("shards").join("eur.jsonl"), &shard_lines(&data.eur))?;
    write_file(&dir.join("shards").join("nam.jsonl"), &shard_lines(&data.nam))?;
    write_file(&dir.join("shards").join("lrl.jsonl"), &shard_lines(&data.lrl))?;

    let parallel_lines: Vec<String> = data
        .parallel
        .iter()
        .map(|p| serde_json::to_string(p).expect("parallel pair"))
        .collect();
    write_file(&dir.join("public").join("parallel.jsonl"), &parallel_lines)?;

    let mut mono_lines = vec![serde_json::json!({
        "languages": data.mono.languages,
        "public_auxiliary": true,
    })
    .to_string()];
    for (lang, text) in &data.mono.texts {
        mono_lines.push(serde_json::json!({ "text": text, "lang": lang }).to_string());
    }
    write_file(&dir.join("public").join("mono.jsonl"), &mono_lines)?;
    Ok(data)
}
