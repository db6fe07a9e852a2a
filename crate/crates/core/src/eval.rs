//! MRR@15, weighted ROUGE, and cross-stage forgetting reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::MessageReplyPair;
use crate::error::{Error, Result};
use crate::inference::CompositeGraph;
use crate::model::ModelParams;
use crate::responses::{normalize_reply, ResponseSet};
use crate::text::{normalize_and_split, tokenize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mrr_cutoff: usize,
    /// ROUGE-1/2/3 weights, proportional to 1:2:3 and normalized to sum 1.
    pub rouge_weights: [f64; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mrr_cutoff: 15,
            rouge_weights: [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0],
        }
    }
}

/// Mean of 1/rank over examples; a golden reply absent from the top
/// `cutoff` contributes 0.
pub fn mrr(ranks: &[Option<usize>], cutoff: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidInput("mrr over an empty rank list".into()));
    }
    let total: f64 = ranks
        .iter()
        .map(|r| match r {
            Some(rank) if *rank >= 1 && *rank <= cutoff => 1.0 / *rank as f64,
            _ => 0.0,
        })
        .sum();
    Ok(total / ranks.len() as f64)
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut counts: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(|s| s.as_str()).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Recall-oriented n-gram overlap: clipped multiset intersection over the
/// reference's n-gram count. 0 when the reference has no n-grams.
pub fn rouge_n(reference: &str, candidate: &str, n: usize) -> f64 {
    let ref_tokens = normalize_and_split(reference);
    let cand_tokens = normalize_and_split(candidate);
    let ref_ngrams = ngrams(&ref_tokens, n);
    let total: usize = ref_ngrams.values().sum();
    if total == 0 {
        return 0.0;
    }
    let cand_ngrams = ngrams(&cand_tokens, n);
    let matched: usize = ref_ngrams
        .iter()
        .map(|(g, &c)| c.min(cand_ngrams.get(g).copied().unwrap_or(0)))
        .sum();
    matched as f64 / total as f64
}

/// Weighted ROUGE-1/2/3 of the best candidate (credit if any suggestion
/// matches the reference).
pub fn w_rouge(reference: &str, candidates: &[String], cfg: &EvalConfig) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("w_rouge needs at least one candidate".into()));
    }
    Ok(candidates
        .iter()
        .map(|cand| {
            (1..=3)
                .map(|n| cfg.rouge_weights[n - 1] * rouge_n(reference, cand, n))
                .sum::<f64>()
        })
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LangMetrics {
    pub lang: String,
    pub mrr: Option<f64>,
    pub w_rouge: Option<f64>,
    pub golden_count: usize,
    pub general_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub per_language: Vec<LangMetrics>,
}

/// Rank of the golden reply in the graph's scored response list (1-based),
/// or None when outside the cutoff or the language is unsupported.
pub fn golden_rank(
    graph: &CompositeGraph,
    pair: &MessageReplyPair,
    cutoff: usize,
) -> Result<Option<usize>> {
    let ranked = graph.rank_responses(&pair.message, &pair.lang)?;
    let target = normalize_reply(&pair.reply);
    for (i, (text, _)) in ranked.iter().take(cutoff).enumerate() {
        if normalize_reply(text) == target {
            return Ok(Some(i + 1));
        }
    }
    Ok(None)
}

/// MRR of an encoder against one response set, scoring directly
/// (dot product + alpha * penalty) without language routing.
pub fn mrr_on_pairs(
    params: &ModelParams,
    set: &ResponseSet,
    pairs: &[MessageReplyPair],
    cfg: &EvalConfig,
    alpha: f64,
) -> Result<f64> {
    let vocab = params.config.vocab();
    let targets: Vec<String> = set.entries.iter().map(|e| normalize_reply(&e.text)).collect();
    let mut ranks = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let seq = tokenize(&pair.message, &pair.lang, params.config.max_msg_len, &vocab);
        let u = params.encode(&seq)?;
        let mut scored: Vec<(usize, f64)> = set
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let v = e.vector.as_ref().expect("precomputed vectors");
                let dot: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                (i, dot + alpha * e.lm_penalty)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let want = normalize_reply(&pair.reply);
        ranks.push(
            scored
                .iter()
                .take(cfg.mrr_cutoff)
                .position(|(i, _)| targets[*i] == want)
                .map(|p| p + 1),
        );
    }
    mrr(&ranks, cfg.mrr_cutoff)
}

/// MRR and W_ROUGE over golden/general splits for one language.
pub fn evaluate_language(
    graph: &CompositeGraph,
    lang: &str,
    golden: &[MessageReplyPair],
    general: &[MessageReplyPair],
    cfg: &EvalConfig,
) -> Result<LangMetrics> {
    let mrr_value = if golden.is_empty() {
        None
    } else {
        let ranks: Result<Vec<Option<usize>>> = golden
            .iter()
            .map(|p| golden_rank(graph, p, cfg.mrr_cutoff))
            .collect();
        Some(mrr(&ranks?, cfg.mrr_cutoff)?)
    };
    let rouge_value = if general.is_empty() {
        None
    } else {
        let mut total = 0.0;
        for pair in general {
            let candidates = graph.final_responses(&pair.message, &pair.lang)?;
            total += if candidates.is_empty() {
                0.0
            } else {
                w_rouge(&pair.reply, &candidates, cfg)?
            };
        }
        Some(total / general.len() as f64)
    };
    Ok(LangMetrics {
        lang: lang.to_string(),
        mrr: mrr_value,
        w_rouge: rouge_value,
        golden_count: golden.len(),
        general_count: general.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub lang: String,
    pub metric: String,
    pub values: Vec<Option<f64>>,
    /// later minus earlier, per adjacent checkpoint pair; negative = forgetting
    pub deltas: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub checkpoints: Vec<String>,
    pub rows: Vec<ForgettingRow>,
}

/// Per-language metric trajectory across an ordered list of evaluated
/// checkpoints.
pub fn forgetting_report(reports: &[EvalReport]) -> Result<ForgettingReport> {
    if reports.len() < 2 {
        return Err(Error::InvalidInput(
            "forgetting analysis needs at least two checkpoints".into(),
        ));
    }
    let mut langs: Vec<String> = Vec::new();
    for r in reports {
        for lm in &r.per_language {
            if !langs.contains(&lm.lang) {
                langs.push(lm.lang.clone());
            }
        }
    }
    let mut rows = Vec::new();
    for lang in &langs {
        for metric in ["mrr", "w_rouge"] {
            let values: Vec<Option<f64>> = reports
                .iter()
                .map(|r| {
                    r.per_language.iter().find(|lm| &lm.lang == lang).and_then(|lm| {
                        if metric == "mrr" {
                            lm.mrr
                        } else {
                            lm.w_rouge
                        }
                    })
                })
                .collect();
            let deltas = values
                .windows(2)
                .map(|w| match (w[0], w[1]) {
                    (Some(a), Some(b)) => Some(b - a),
                    _ => None,
                })
                .collect();
            rows.push(ForgettingRow {
                lang: lang.clone(),
                metric: metric.to_string(),
                values,
                deltas,
            });
        }
    }
    Ok(ForgettingReport {
        checkpoints: reports.iter().map(|r| r.model.clone()).collect(),
        rows,
    })
}

/// Aligned plain-text table: Reg / Lang / Model / MRR / W_ROUGE.
pub fn format_table(region: &str, reports: &[EvalReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<5} {:<6} {:<18} {:>8} {:>9}\n",
        "Reg", "Lang", "Model", "MRR", "W_ROUGE"
    ));
    for report in reports {
        for lm in &report.per_language {
            let fmt = |v: Option<f64>| match v {
                Some(x) => format!("{x:.4}"),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "{:<5} {:<6} {:<18} {:>8} {:>9}\n",
                region,
                lm.lang,
                report.model,
                fmt(lm.mrr),
                fmt(lm.w_rouge)
            ));
        }
    }
    out
}
