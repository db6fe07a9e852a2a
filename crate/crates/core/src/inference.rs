//! Penalty-biased scoring over precomputed response matrices, lexical-cluster
//! dedup, language routing, trigger policy, and the newline-delimited JSON
//! serving loop.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelParams};
use crate::responses::ResponseSet;
use crate::text::{normalize_and_split, tokenize, LanguageProfiles};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Weight of the LM penalty in the score.
    pub alpha: f64,
    /// Candidates kept before dedup.
    pub n1: usize,
    /// Final suggestions after dedup.
    pub n2: usize,
    pub max_msg_tokens: usize,
    pub lang_conf_threshold: f64,
    pub jaccard_threshold: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            alpha: 0.2,
            n1: 30,
            n2: 3,
            max_msg_tokens: 96,
            lang_conf_threshold: 0.3,
            jaccard_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LangResponses {
    pub texts: Vec<String>,
    pub matrix: Array2<f64>,
    pub penalties: Array1<f64>,
}

pub struct CompositeGraph {
    pub params: ModelParams,
    pub responses: BTreeMap<String, LangResponses>,
    pub profiles: LanguageProfiles,
    pub cfg: GraphConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub triggered: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub lang: String,
    pub responses: Vec<ScoredResponse>,
}

/// Connected components under Jaccard(token set a, token set b) >= threshold.
/// Returns a cluster id per input text; ids are assigned in first-seen order.
pub fn lexical_clusters(texts: &[String], threshold: f64) -> Vec<usize> {
    let sets: Vec<BTreeSet<String>> = texts
        .iter()
        .map(|t| normalize_and_split(t).into_iter().collect())
        .collect();
    let n = texts.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let inter = sets[i].intersection(&sets[j]).count();
            let union = sets[i].union(&sets[j]).count();
            let jaccard = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            if jaccard >= threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[rj.max(ri)] = rj.min(ri);
                }
            }
        }
    }
    let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
    (0..n)
        .map(|i| {
            let root = find(&mut parent, i);
            let next = relabel.len();
            *relabel.entry(root).or_insert(next)
        })
        .collect()
}

impl CompositeGraph {
    pub fn new(
        params: ModelParams,
        sets: &[ResponseSet],
        profiles: LanguageProfiles,
        cfg: GraphConfig,
    ) -> Result<Self> {
        let hidden = params.config.hidden_dim;
        let mut responses = BTreeMap::new();
        for set in sets {
            let n = set.entries.len();
            let mut matrix = Array2::zeros((n, hidden));
            let mut penalties = Array1::zeros(n);
            let mut texts = Vec::with_capacity(n);
            for (i, entry) in set.entries.iter().enumerate() {
                let v = entry.vector.as_ref().ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "response set {} has no precomputed vectors",
                        set.lang
                    ))
                })?;
                if v.len() != hidden {
                    return Err(Error::InvalidInput(format!(
                        "vector dimension {} does not match encoder hidden dim {hidden}",
                        v.len()
                    )));
                }
                matrix.row_mut(i).assign(&Array1::from_vec(v.clone()));
                penalties[i] = entry.lm_penalty;
                texts.push(entry.text.clone());
            }
            responses.insert(
                set.lang.clone(),
                LangResponses {
                    texts,
                    matrix,
                    penalties,
                },
            );
        }
        Ok(CompositeGraph {
            params,
            responses,
            profiles,
            cfg,
        })
    }

    /// Trigger policy: message length, detected language, identifier
    /// confidence.
    pub fn should_trigger(&self, message: &str) -> (bool, Option<String>, String, f64) {
        let token_count = normalize_and_split(message).len();
        if token_count > self.cfg.max_msg_tokens {
            return (false, Some("too_long".into()), String::new(), 0.0);
        }
        let (lang, conf) = self.profiles.identify(message);
        if !self.responses.contains_key(&lang) {
            return (false, Some("unsupported_language".into()), lang, conf);
        }
        if conf < self.cfg.lang_conf_threshold {
            return (false, Some("low_confidence".into()), lang, conf);
        }
        (true, None, lang, conf)
    }

    /// score[k] = dot(encode(message), vector_k) + alpha * penalty_k.
    pub fn score_all(&self, message: &str, lang: &str) -> Result<Array1<f64>> {
        let set = self.responses.get(lang).ok_or_else(|| {
            Error::InvalidInput(format!("language {lang} has no response set"))
        })?;
        let vocab = self.params.config.vocab();
        let seq = tokenize(message, lang, self.params.config.max_msg_len, &vocab);
        let u = self.params.encode(&seq)?;
        Ok(set.matrix.dot(&u) + &(self.cfg.alpha * &set.penalties))
    }

    /// Full response list for `lang`, sorted by descending score
    /// (ties break by set order).
    pub fn rank_responses(&self, message: &str, lang: &str) -> Result<Vec<(String, f64)>> {
        let scores = self.score_all(message, lang)?;
        let set = &self.responses[lang];
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        Ok(order
            .into_iter()
            .map(|i| (set.texts[i].clone(), scores[i]))
            .collect())
    }

    /// Top-N1 by score, lexical-cluster dedup, highest-scoring member per
    /// cluster in score order, first N2.
    pub fn final_responses(&self, message: &str, lang: &str) -> Result<Vec<String>> {
        Ok(self
            .final_scored(message, lang)?
            .into_iter()
            .map(|r| r.text)
            .collect())
    }

    fn final_scored(&self, message: &str, lang: &str) -> Result<Vec<ScoredResponse>> {
        let ranked = self.rank_responses(message, lang)?;
        let shortlist: Vec<(String, f64)> = ranked.into_iter().take(self.cfg.n1).collect();
        let texts: Vec<String> = shortlist.iter().map(|(t, _)| t.clone()).collect();
        let clusters = lexical_clusters(&texts, self.cfg.jaccard_threshold);
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (i, (text, score)) in shortlist.into_iter().enumerate() {
            if seen.insert(clusters[i]) {
                out.push(ScoredResponse { text, score });
                if out.len() == self.cfg.n2 {
                    break;
                }
            }
        }
        Ok(out)
    }

    pub fn predict(&self, message: &str) -> Result<Prediction> {
        let (triggered, reason, lang, _conf) = self.should_trigger(message);
        if !triggered {
            return Ok(Prediction {
                triggered: false,
                reason,
                lang,
                responses: vec![],
            });
        }
        let responses = self.final_scored(message, &lang)?;
        Ok(Prediction {
            triggered: true,
            reason: None,
            lang,
            responses,
        })
    }
}

// --- graph bundle on disk --------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct GraphManifest {
    cfg: GraphConfig,
    languages: Vec<String>,
}

/// Bundle layout: graph.json + checkpoint/ + responses/<lang>/ + profiles.json.
pub fn save_graph(
    path: &Path,
    ckpt: &Checkpoint,
    sets: &[ResponseSet],
    profiles: &LanguageProfiles,
    cfg: &GraphConfig,
) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    ckpt.save(&path.join("checkpoint"))?;
    for set in sets {
        set.save(&path.join("responses").join(&set.lang))?;
    }
    profiles.save(&path.join("profiles.json"))?;
    let manifest = GraphManifest {
        cfg: cfg.clone(),
        languages: sets.iter().map(|s| s.lang.clone()).collect(),
    };
    let p = path.join("graph.json");
    std::fs::write(&p, serde_json::to_string_pretty(&manifest).expect("manifest")).map_err(|e| {
        Error::Io {
            path: p.display().to_string(),
            source: e,
        }
    })
}

pub fn load_graph(path: &Path) -> Result<CompositeGraph> {
    let p = path.join("graph.json");
    let manifest: GraphManifest = serde_json::from_str(
        &std::fs::read_to_string(&p).map_err(|e| Error::Io {
            path: p.display().to_string(),
            source: e,
        })?,
    )
    .map_err(|e| Error::Checkpoint(format!("bad graph manifest: {e}")))?;
    let ckpt = Checkpoint::load(&path.join("checkpoint"))?;
    let mut sets = Vec::new();
    for lang in &manifest.languages {
        sets.push(ResponseSet::load(&path.join("responses").join(lang))?);
    }
    let profiles = LanguageProfiles::load(&path.join("profiles.json"))?;
    CompositeGraph::new(ckpt.params, &sets, profiles, manifest.cfg)
}

// --- serving ---------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ServeRequest {
    message: String,
}

/// Stateless request loop: one JSON object per line in, one per line out.
/// Malformed input yields an error object and the loop continues.
pub fn serve<R: BufRead, W: Write>(graph: &CompositeGraph, reader: R, mut writer: W) -> Result<()> {
    for line in reader.lines() {
        let line = line.map_err(|e| Error::Io {
            path: "<request stream>".into(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<ServeRequest>(&line) {
            Ok(req) => match graph.predict(&req.message) {
                Ok(p) => serde_json::to_string(&p).expect("prediction"),
                Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
            },
            Err(e) => serde_json::json!({ "error": format!("malformed request: {e}") }).to_string(),
        };
        writeln!(writer, "{reply}").map_err(|e| Error::Io {
            path: "<response stream>".into(),
            source: e,
        })?;
        writer.flush().map_err(|e| Error::Io {
            path: "<response stream>".into(),
            source: e,
        })?;
    }
    Ok(())
}
