//! Adam optimization, multi-task batch alternation, the three-stage
//! continual pipeline, and the replay ablation.

use std::collections::BTreeSet;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    assert_region_access, Access, MessageReplyPair, MonoCorpus, ParallelPair, Region, RegionShard,
};
use crate::error::{Error, Result};
use crate::model::{quantize, Checkpoint, FreezeSelector, GradMap, ModelParams, RngState};
use crate::objectives::{batch_loss, gradients, Batch, SrExample, Task};
use crate::text::{make_tlm_sample, mask_single, tokenize};

pub const PIVOT_LANG: &str = "en";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxTask {
    None,
    Mlm,
    Tlm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub region: Region,
    pub sr_languages: BTreeSet<String>,
    pub auxiliary: AuxTask,
    /// Fraction of each epoch's mini-batches given to the auxiliary task.
    pub task_proportion: f64,
    pub peak_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze: FreezeSelector,
    pub use_adapters: bool,
    #[serde(default)]
    pub adapter_languages: BTreeSet<String>,
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.task_proportion) {
            return Err(Error::Config("task_proportion must be in [0,1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.use_adapters && self.freeze != FreezeSelector::AllExceptAdapters {
            return Err(Error::Config(
                "use_adapters requires the all_except_adapters freeze selector".into(),
            ));
        }
        if self.use_adapters && self.adapter_languages.is_empty() {
            return Err(Error::Config(
                "use_adapters requires adapter_languages".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: GradMap,
    pub v: GradMap,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, hyper: AdamHyper) -> Self {
        let zeros: GradMap = params
            .tensors
            .iter()
            .filter(|(_, t)| !t.frozen)
            .map(|(name, t)| (name.clone(), ArrayD::<f64>::zeros(t.data.shape())))
            .collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            hyper,
        }
    }
}

/// One AdamW step over exactly the unfrozen tensors. Updated values are
/// rounded through f32 so checkpoints stay bit-exact.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradMap,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let unfrozen: Vec<String> = params
        .tensors
        .iter()
        .filter(|(_, t)| !t.frozen)
        .map(|(n, _)| n.clone())
        .collect();
    if grads.len() != unfrozen.len() || unfrozen.iter().any(|n| !grads.contains_key(n)) {
        return Err(Error::InvalidInput(
            "gradient set must cover exactly the unfrozen tensors".into(),
        ));
    }
    state.t += 1;
    let h = state.hyper.clone();
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    for name in &unfrozen {
        let g = &grads[name];
        let tensor = &mut params.tensors[name];
        if g.shape() != tensor.data.shape() {
            return Err(Error::InvalidInput(format!(
                "gradient shape mismatch for {name}"
            )));
        }
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        ndarray::Zip::from(&mut tensor.data)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + h.eps) + h.weight_decay * *p;
                *p = quantize(*p - lr * update);
            });
    }
    Ok(())
}

/// Warmup for the first 10% of steps, then linear decay toward zero.
/// Piecewise linear with a single maximum equal to `peak`.
pub fn lr_schedule(step: usize, total_steps: usize, peak: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = ((total_steps as f64 * 0.1).ceil() as usize).max(1);
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warmup + 1) as f64
    }
}

/// Deterministic interleave: exactly round(proportion * total) auxiliary
/// batches per epoch, spread evenly from index 0.
pub fn batch_schedule(total: usize, proportion: f64) -> Vec<bool> {
    let aux_count = (proportion * total as f64).round() as usize;
    let mut schedule = vec![false; total];
    if aux_count == 0 {
        return schedule;
    }
    for j in 0..aux_count.min(total) {
        schedule[j * total / aux_count] = true;
    }
    schedule
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccessLogEntry {
    pub stage: String,
    pub epoch: usize,
    pub batch: usize,
    pub shard: String,
    pub region: String,
    pub public_auxiliary: bool,
}

impl AccessLogEntry {
    pub fn to_line(&self) -> String {
        format!(
            "stage={} epoch={} batch={} shard={} region={} public={}",
            self.stage, self.epoch, self.batch, self.shard, self.region, self.public_auxiliary
        )
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EpochLoss {
    pub sr: Option<f64>,
    pub aux: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub epoch_losses: Vec<EpochLoss>,
    /// Per-epoch validation SR loss per language.
    pub val_losses: Vec<std::collections::BTreeMap<String, f64>>,
    pub selected_epoch: usize,
    pub access_log: Vec<AccessLogEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct PublicCorpora {
    pub parallel: Vec<ParallelPair>,
    pub parallel_origin: String,
    pub mono: Option<MonoCorpus>,
}

struct TrainPool {
    /// (pair, shard origin index)
    pairs: Vec<(MessageReplyPair, usize)>,
    val: Vec<MessageReplyPair>,
}

fn split_pool(shards: &[RegionShard], langs: &BTreeSet<String>) -> TrainPool {
    let mut pairs = Vec::new();
    let mut val = Vec::new();
    let mut per_lang_seen: std::collections::BTreeMap<&str, usize> = Default::default();
    for (si, shard) in shards.iter().enumerate() {
        for pair in &shard.pairs {
            if !langs.contains(&pair.lang) {
                continue;
            }
            let seen = per_lang_seen.entry(pair.lang.as_str()).or_insert(0);
            *seen += 1;
            // every 10th pair of a language is validation holdout
            if *seen % 10 == 0 {
                val.push(pair.clone());
            } else {
                pairs.push((pair.clone(), si));
            }
        }
    }
    TrainPool { pairs, val }
}

fn sr_example(params: &ModelParams, pair: &MessageReplyPair) -> SrExample {
    let vocab = params.config.vocab();
    SrExample {
        message: tokenize(&pair.message, &pair.lang, params.config.max_msg_len, &vocab),
        reply: tokenize(&pair.reply, &pair.lang, params.config.max_reply_len, &vocab),
    }
}

fn build_aux_batch(
    params: &ModelParams,
    cfg: &StageConfig,
    public: &PublicCorpora,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let vocab = params.config.vocab();
    match cfg.auxiliary {
        AuxTask::None => unreachable!("aux batch requested with auxiliary=none"),
        AuxTask::Tlm => {
            if public.parallel.is_empty() {
                return Err(Error::Config(
                    "TLM auxiliary task requires a parallel corpus".into(),
                ));
            }
            let mut samples = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let pp = &public.parallel[rng.random_range(0..public.parallel.len())];
                samples.push(make_tlm_sample(pp, &vocab, params.config.max_msg_len, rng)?);
            }
            Ok(Batch::Masked(Task::Tlm, samples))
        }
        AuxTask::Mlm => {
            let mono = public.mono.as_ref().ok_or_else(|| {
                Error::Config("MLM auxiliary task requires a monolingual corpus".into())
            })?;
            if mono.texts.is_empty() {
                return Err(Error::Config("monolingual corpus is empty".into()));
            }
            let mut samples = Vec::with_capacity(cfg.batch_size);
            let mut attempts = 0;
            while samples.len() < cfg.batch_size {
                attempts += 1;
                if attempts > cfg.batch_size * 100 {
                    return Err(Error::Config(
                        "monolingual corpus yields no tokenizable text".into(),
                    ));
                }
                let (lang, text) = &mono.texts[rng.random_range(0..mono.texts.len())];
                let seq = tokenize(text, lang, params.config.max_msg_len, &vocab);
                if seq.ids.is_empty() {
                    continue;
                }
                samples.push(mask_single(&seq, rng)?);
            }
            Ok(Batch::Masked(Task::Mlm, samples))
        }
    }
}

/// Train one continual-learning stage on region-guarded shards, returning
/// the epoch checkpoint minimizing summed validation loss across languages.
pub fn train_stage(
    ckpt_in: &Checkpoint,
    cfg: &StageConfig,
    shards: &[RegionShard],
    public: &PublicCorpora,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    for shard in shards {
        if assert_region_access(cfg.region, shard) == Access::Deny {
            return Err(Error::RegionViolation {
                shard: shard.origin_path.clone(),
                shard_region: shard.region.to_string(),
                stage_region: cfg.region.to_string(),
            });
        }
    }
    if let Some(mono) = &public.mono {
        if !mono.public_auxiliary {
            return Err(Error::RegionViolation {
                shard: mono.origin_path.clone(),
                shard_region: "private".into(),
                stage_region: cfg.region.to_string(),
            });
        }
    }

    let mut params = ckpt_in.params.clone();
    if cfg.use_adapters {
        params.install_adapters(&cfg.adapter_languages, cfg.seed ^ 0xada9_7e55);
    }
    params.freeze(cfg.freeze)?;

    let mut report = TrainReport {
        stage: cfg.name.clone(),
        epoch_losses: Vec::new(),
        val_losses: Vec::new(),
        selected_epoch: 0,
        access_log: Vec::new(),
    };

    if cfg.epochs == 0 {
        let mut out = ckpt_in.clone();
        out.provenance.push(cfg.name.clone());
        return Ok((out, report));
    }

    let pool = split_pool(shards, &cfg.sr_languages);
    if pool.pairs.is_empty() {
        return Err(Error::Config(format!(
            "stage {} has no training pairs for its languages",
            cfg.name
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches_per_epoch = pool.pairs.len().div_ceil(cfg.batch_size);
    let schedule = if cfg.auxiliary == AuxTask::None {
        vec![false; batches_per_epoch]
    } else {
        batch_schedule(batches_per_epoch, cfg.task_proportion)
    };
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut opt = OptimizerState::new(&params, AdamHyper::default());

    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pool.pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0usize;
        let mut sr_sum = 0.0;
        let mut sr_n = 0usize;
        let mut aux_sum = 0.0;
        let mut aux_n = 0usize;

        for (b, &is_aux) in schedule.iter().enumerate() {
            let batch = if is_aux {
                report.access_log.push(AccessLogEntry {
                    stage: cfg.name.clone(),
                    epoch,
                    batch: b,
                    shard: if cfg.auxiliary == AuxTask::Tlm {
                        public.parallel_origin.clone()
                    } else {
                        public.mono.as_ref().map(|m| m.origin_path.clone()).unwrap_or_default()
                    },
                    region: "public".into(),
                    public_auxiliary: true,
                });
                build_aux_batch(&params, cfg, public, &mut rng)?
            } else {
                let mut examples = Vec::with_capacity(cfg.batch_size);
                let mut origins = BTreeSet::new();
                for _ in 0..cfg.batch_size.min(pool.pairs.len()) {
                    let (pair, si) = &pool.pairs[order[cursor % order.len()]];
                    cursor += 1;
                    origins.insert(*si);
                    examples.push(sr_example(&params, pair));
                }
                for si in origins {
                    report.access_log.push(AccessLogEntry {
                        stage: cfg.name.clone(),
                        epoch,
                        batch: b,
                        shard: shards[si].origin_path.clone(),
                        region: shards[si].region.to_string(),
                        public_auxiliary: shards[si].public_auxiliary,
                    });
                }
                Batch::Sr(examples)
            };

            let (loss, grads) = gradients(&params, &batch).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} (stage {} epoch {epoch} batch {b})", cfg.name),
                },
                other => other,
            })?;
            if is_aux {
                aux_sum += loss;
                aux_n += 1;
            } else {
                sr_sum += loss;
                sr_n += 1;
            }
            let lr = lr_schedule(step, total_steps, cfg.peak_lr);
            adam_step(&mut params, &grads, &mut opt, lr)?;
            step += 1;
        }

        report.epoch_losses.push(EpochLoss {
            sr: (sr_n > 0).then(|| sr_sum / sr_n as f64),
            aux: (aux_n > 0).then(|| aux_sum / aux_n as f64),
        });

        // summed validation SR loss across languages, equal weight
        let mut val = std::collections::BTreeMap::new();
        for lang in &cfg.sr_languages {
            let examples: Vec<SrExample> = pool
                .val
                .iter()
                .filter(|p| &p.lang == lang)
                .map(|p| sr_example(&params, p))
                .collect();
            if !examples.is_empty() {
                val.insert(lang.clone(), batch_loss(&params, &Batch::Sr(examples))?);
            }
        }
        let summed: f64 = val.values().sum();
        report.val_losses.push(val);
        let better = match &best {
            None => true,
            Some((b, _, _)) => summed < *b,
        };
        if pool.val.is_empty() || better {
            best = Some((summed, epoch, params.clone()));
        }
    }

    let (_, selected_epoch, best_params) = best.expect("at least one epoch ran");
    report.selected_epoch = selected_epoch;

    let mut provenance = ckpt_in.provenance.clone();
    provenance.push(cfg.name.clone());
    let out = Checkpoint {
        params: best_params,
        provenance,
        rng: RngState {
            seed: cfg.seed,
            word_pos: rng.get_word_pos().to_string(),
        },
    };
    Ok((out, report))
}

/// Replay ablation: continue SR-only training on earlier-region shards
/// (no pivot-language data), for forgetting analysis.
pub fn replay_stage(
    ckpt: &Checkpoint,
    replay_shards: &[RegionShard],
    cfg: &StageConfig,
) -> Result<(Checkpoint, TrainReport)> {
    if cfg.auxiliary != AuxTask::None {
        return Err(Error::Config("replay runs the SR task only".into()));
    }
    if cfg.sr_languages.contains(PIVOT_LANG) {
        return Err(Error::Config(
            "replay must not include the pivot language".into(),
        ));
    }
    train_stage(ckpt, cfg, replay_shards, &PublicCorpora::default())
}

/// Run an ordered list of stages, each consuming the previous checkpoint.
/// When a low-resource stage exists, the last high-resource stage must keep
/// the pivot language. Returns one checkpoint per stage (last = final).
pub fn run_pipeline(
    ckpt_in: &Checkpoint,
    stages: &[(StageConfig, Vec<RegionShard>)],
    public: &PublicCorpora,
) -> Result<(Vec<Checkpoint>, Vec<TrainReport>)> {
    if stages.is_empty() {
        return Err(Error::Config("pipeline needs at least one stage".into()));
    }
    let has_lrl = stages.iter().any(|(c, _)| c.region == Region::Lrl);
    if has_lrl {
        let last_hrl = stages.iter().rev().find(|(c, _)| c.region != Region::Lrl);
        match last_hrl {
            Some((c, _)) if c.sr_languages.contains(PIVOT_LANG) => {}
            _ => {
                return Err(Error::Config(format!(
                    "the final high-resource stage must include the pivot language {PIVOT_LANG}"
                )))
            }
        }
    }
    let mut ckpt = ckpt_in.clone();
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    for (cfg, shards) in stages {
        let (next, report) = train_stage(&ckpt, cfg, shards, public)?;
        ckpt = next;
        checkpoints.push(ckpt.clone());
        reports.push(report);
    }
    Ok((checkpoints, reports))
}
