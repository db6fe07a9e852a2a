//! The symmetric matching loss, masked-LM cross-entropy, and exact analytic
//! gradients for all three tasks (SR, MLM, TLM).
//!
//! The symmetric loss normalizes the diagonal similarity against both the
//! row (all replies for a message) and the column (all messages for a reply)
//! with the diagonal counted once. All loss math runs in log space via
//! log-sum-exp.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{GradMap, ModelParams};
use crate::text::{MaskedSample, TokenSequence, MASK};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub per_example: Vec<f64>,
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Multiset of log-similarities entering example i's normalizer: row i plus
/// column i with the diagonal counted once (2n-1 values).
fn normalizer_terms(logits: &Array2<f64>, i: usize) -> impl Iterator<Item = f64> + Clone + '_ {
    let n = logits.nrows();
    (0..n)
        .map(move |j| logits[[i, j]])
        .chain((0..n).filter(move |&k| k != i).map(move |k| logits[[k, i]]))
}

/// Per-example term: -log p(m_i, r_i) with in-batch negatives.
pub fn symmetric_loss(logits: &Array2<f64>) -> Result<LossValue> {
    let n = logits.nrows();
    if n == 0 || logits.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "similarity matrix must be square and non-empty, got {}x{}",
            n,
            logits.ncols()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "similarity logits".into(),
        });
    }
    let per_example: Vec<f64> = (0..n)
        .map(|i| logsumexp(normalizer_terms(logits, i)) - logits[[i, i]])
        .collect();
    let value = per_example.iter().sum::<f64>() / n as f64;
    Ok(LossValue { value, per_example })
}

/// d(mean symmetric loss)/d(logits).
pub fn symmetric_loss_grad(logits: &Array2<f64>) -> Result<Array2<f64>> {
    let n = logits.nrows();
    symmetric_loss(logits)?; // validates shape/finiteness
    let mut grad = Array2::<f64>::zeros((n, n));
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let lse = logsumexp(normalizer_terms(logits, i));
        for j in 0..n {
            grad[[i, j]] += scale * (logits[[i, j]] - lse).exp();
        }
        for k in 0..n {
            if k != i {
                grad[[k, i]] += scale * (logits[[k, i]] - lse).exp();
            }
        }
        grad[[i, i]] -= scale;
    }
    Ok(grad)
}

fn softmax_ce(logits: &Array1<f64>, target: usize) -> (f64, Array1<f64>) {
    let lse = logsumexp(logits.iter().copied());
    let loss = lse - logits[target];
    let mut dlogits = logits.mapv(|v| (v - lse).exp());
    dlogits[target] -= 1.0;
    (loss, dlogits)
}

/// Encode the masked sequence, apply the mask-prediction head, and take
/// softmax cross-entropy against the target id.
pub fn masked_lm_loss(params: &ModelParams, sample: &MaskedSample) -> Result<LossValue> {
    validate_sample(params, sample)?;
    let seq = TokenSequence {
        ids: sample.ids.clone(),
        lang: sample.lang.clone(),
    };
    let h = params.encode(&seq)?;
    let logits = params.mlm_logits(&h);
    let (loss, _) = softmax_ce(&logits, sample.target_id as usize);
    Ok(LossValue {
        value: loss,
        per_example: vec![loss],
    })
}

fn validate_sample(params: &ModelParams, sample: &MaskedSample) -> Result<()> {
    if sample.target_id >= params.config.vocab_size {
        return Err(Error::InvalidInput(format!(
            "target id {} out of vocab range",
            sample.target_id
        )));
    }
    if sample.ids.get(sample.target_pos) != Some(&MASK) {
        return Err(Error::InvalidInput(
            "masked sample does not carry MASK at target_pos".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Task {
    Sr,
    Mlm,
    Tlm,
}

#[derive(Debug, Clone)]
pub struct SrExample {
    pub message: TokenSequence,
    pub reply: TokenSequence,
}

#[derive(Debug, Clone)]
pub enum Batch {
    Sr(Vec<SrExample>),
    Masked(Task, Vec<MaskedSample>),
}

impl Batch {
    pub fn task(&self) -> Task {
        match self {
            Batch::Sr(_) => Task::Sr,
            Batch::Masked(t, _) => *t,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Batch::Sr(v) => v.len(),
            Batch::Masked(_, v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean task loss of a batch, without gradients (validation path).
pub fn batch_loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    match batch {
        Batch::Sr(examples) => {
            let logits = sr_logits(params, examples)?.0;
            Ok(symmetric_loss(&logits)?.value)
        }
        Batch::Masked(_, samples) => {
            if samples.is_empty() {
                return Err(Error::InvalidInput("empty masked batch".into()));
            }
            let mut total = 0.0;
            for s in samples {
                total += masked_lm_loss(params, s)?.value;
            }
            Ok(total / samples.len() as f64)
        }
    }
}

fn sr_logits(
    params: &ModelParams,
    examples: &[SrExample],
) -> Result<(Array2<f64>, Vec<crate::model::EncodeCache>, Vec<crate::model::EncodeCache>)> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("empty SR batch".into()));
    }
    let msg_caches: Result<Vec<_>> = examples
        .iter()
        .map(|e| params.encode_cached(&e.message))
        .collect();
    let reply_caches: Result<Vec<_>> = examples
        .iter()
        .map(|e| params.encode_cached(&e.reply))
        .collect();
    let (msg_caches, reply_caches) = (msg_caches?, reply_caches?);
    let n = examples.len();
    let mut logits = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            logits[[i, j]] = msg_caches[i].out.dot(&reply_caches[j].out);
        }
    }
    Ok((logits, msg_caches, reply_caches))
}

/// Exact analytic gradients of the batch's task loss with respect to every
/// unfrozen tensor. Frozen tensors receive no entry; unfrozen tensors the
/// task does not touch receive zeros.
pub fn gradients(params: &ModelParams, batch: &Batch) -> Result<(f64, GradMap)> {
    let mut grads = params.empty_grads();
    let loss = match batch {
        Batch::Sr(examples) => {
            let (logits, msg_caches, reply_caches) = sr_logits(params, examples)?;
            let loss = symmetric_loss(&logits)?.value;
            let g = symmetric_loss_grad(&logits)?;
            let n = examples.len();
            for i in 0..n {
                let mut du = Array1::<f64>::zeros(params.config.hidden_dim);
                for j in 0..n {
                    du.scaled_add(g[[i, j]], &reply_caches[j].out);
                }
                params.encode_backward(&msg_caches[i], &du, &mut grads);
            }
            for j in 0..n {
                let mut dv = Array1::<f64>::zeros(params.config.hidden_dim);
                for i in 0..n {
                    dv.scaled_add(g[[i, j]], &msg_caches[i].out);
                }
                params.encode_backward(&reply_caches[j], &dv, &mut grads);
            }
            loss
        }
        Batch::Masked(_, samples) => {
            if samples.is_empty() {
                return Err(Error::InvalidInput("empty masked batch".into()));
            }
            let scale = 1.0 / samples.len() as f64;
            let mut total = 0.0;
            for s in samples {
                validate_sample(params, s)?;
                let seq = TokenSequence {
                    ids: s.ids.clone(),
                    lang: s.lang.clone(),
                };
                let cache = params.encode_cached(&seq)?;
                let logits = params.mlm_logits(&cache.out);
                let (loss, mut dlogits) = softmax_ce(&logits, s.target_id as usize);
                total += loss;
                dlogits *= scale;
                if let Some(gh) = grads.get_mut("mlm_head") {
                    let mut view = gh.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                    for (i, &hv) in cache.out.iter().enumerate() {
                        let mut row = view.row_mut(i);
                        row.scaled_add(hv, &dlogits);
                    }
                }
                let dh = params.mlm_head().dot(&dlogits);
                params.encode_backward(&cache, &dh, &mut grads);
            }
            total * scale
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "batch loss".into(),
        });
    }
    for (name, g) in &grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
            });
        }
    }
    Ok((loss, grads))
}
