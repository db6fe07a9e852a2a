//! End-to-end acceptance checks, one per numbered criterion. Each prints a
//! single PASS/FAIL line.

use std::collections::BTreeSet;
use std::io::Write as IoWrite;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unireply::config::RunConfig;
use unireply::corpus::{MessageReplyPair, PseudoLexicon, Region, RegionShard};
use unireply::eval::{mrr, mrr_on_pairs, w_rouge, EvalConfig};
use unireply::inference::{lexical_clusters, CompositeGraph, GraphConfig};
use unireply::model::{Checkpoint, FreezeSelector, ModelConfig, ModelParams};
use unireply::objectives::{batch_loss, gradients, symmetric_loss, Batch, SrExample, Task};
use unireply::responses::{
    mine_responses, normalize_reply, precompute_vectors, transcreate, ResponseEntry, ResponseSet,
};
use unireply::synth::{generate, write_all, SynthConfig, SynthData};
use unireply::text::{make_tlm_sample, mask_single, normalize_and_split, tokenize, LanguageProfiles};
use unireply::trainer::{
    adam_step, batch_schedule, replay_stage, run_pipeline, train_stage, AdamHyper, AuxTask,
    OptimizerState, PublicCorpora, StageConfig, TrainReport,
};

fn verdict(name: &str, ok: bool) {
    println!("{}: {name}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}");
}

fn within(start: Instant, budget: Duration, name: &str) {
    let took = start.elapsed();
    assert!(took < budget, "{name} exceeded budget: {took:?} > {budget:?}");
}

// --- shared fixtures --------------------------------------------------------

fn small_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 4000,
        embed_dim: 32,
        hidden_dim: 32,
        encoder_layers: 1,
        adapter_dim: 8,
        max_msg_len: 96,
        max_reply_len: 64,
        hash_seed: 17,
    }
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        intents: 8,
        pairs_per_lang: 120,
        eur_langs: vec!["aa".into(), "bb".into()],
        nam_langs: vec!["dd".into(), "en".into()],
        lrl_langs: vec!["xx".into(), "yy".into()],
        parallel_per_lang: 40,
        mono_per_lang: 40,
    }
}

fn stage(
    name: &str,
    region: Region,
    langs: &[&str],
    aux: AuxTask,
    peak_lr: f64,
    epochs: usize,
    seed: u64,
) -> StageConfig {
    StageConfig {
        name: name.into(),
        region,
        sr_languages: langs.iter().map(|s| s.to_string()).collect(),
        auxiliary: aux,
        task_proportion: 0.5,
        peak_lr,
        epochs,
        batch_size: 32,
        freeze: FreezeSelector::Embedding,
        use_adapters: false,
        adapter_languages: BTreeSet::new(),
        seed,
    }
}

fn public_of(data: &SynthData) -> PublicCorpora {
    PublicCorpora {
        parallel: data.parallel.clone(),
        parallel_origin: "synth:parallel".into(),
        mono: Some(data.mono.clone()),
    }
}

/// Train EUR -> NAM on the synthetic corpus, returning the stage-2 checkpoint.
fn train_through_stage2(data: &SynthData, model: ModelConfig) -> Checkpoint {
    let init = Checkpoint::new(ModelParams::init(model, 17).unwrap(), 17);
    let public = public_of(data);
    let stages = vec![
        (
            stage("EUR", Region::Eur, &["aa", "bb"], AuxTask::Mlm, 3e-3, 4, 11),
            vec![data.eur.clone()],
        ),
        (
            stage("NAM", Region::Nam, &["dd", "en"], AuxTask::Tlm, 2e-3, 4, 12),
            vec![data.nam.clone()],
        ),
    ];
    let (ckpts, _) = run_pipeline(&init, &stages, &public).unwrap();
    ckpts.into_iter().next_back().unwrap()
}

/// Mean MRR over a set of languages, each scored against its own response
/// set under the given encoder.
fn mean_mrr(
    params: &ModelParams,
    shard: &RegionShard,
    langs: &[&str],
    sets: &[(&str, ResponseSet)],
) -> f64 {
    let cfg = EvalConfig::default();
    let mut sum = 0.0;
    for lang in langs {
        let mut set = sets
            .iter()
            .find(|(l, _)| l == lang)
            .map(|(_, s)| s.clone())
            .unwrap();
        precompute_vectors(params, &mut set).unwrap();
        let pairs: Vec<MessageReplyPair> = shard
            .pairs
            .iter()
            .filter(|p| &p.lang == lang)
            .cloned()
            .collect();
        sum += mrr_on_pairs(params, &set, &pairs, &cfg, 0.2).unwrap();
    }
    sum / langs.len() as f64
}

fn lrl_sets(data: &SynthData) -> Vec<(&'static str, ResponseSet)> {
    let en = mine_responses(&data.nam, "en", 30, 1).unwrap();
    ["xx", "yy"]
        .into_iter()
        .map(|lang| {
            let lex = PseudoLexicon::suffix_rule("en", lang);
            (lang, transcreate(&en, &lex, lang).unwrap())
        })
        .collect()
}

fn nam_sets(data: &SynthData) -> Vec<(&'static str, ResponseSet)> {
    ["dd", "en"]
        .into_iter()
        .map(|lang| (lang, mine_responses(&data.nam, lang, 30, 1).unwrap()))
        .collect()
}

// --- 1. symmetric loss vs brute-force oracle --------------------------------

/// Literal Eq. 1: exponentiate, sum row and column, divide, -ln.
fn brute_force(logits: &Array2<f64>) -> f64 {
    let n = logits.nrows();
    let s = logits.mapv(f64::exp);
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| s[[i, j]]).sum();
        let col: f64 = (0..n).map(|k| s[[k, i]]).sum();
        total += -(s[[i, i]] / (row + col - s[[i, i]])).ln();
    }
    total / n as f64
}

#[test]
fn criterion_01_symmetric_loss_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut ok = true;
    for _ in 0..100 {
        let logits = Array2::from_shape_fn((8, 8), |_| rng.random_range(-5.0..5.0));
        let ours = symmetric_loss(&logits).unwrap().value;
        let oracle = brute_force(&logits);
        if (ours - oracle).abs() / oracle.abs().max(1e-300) >= 1e-10 {
            ok = false;
        }
    }
    within(start, Duration::from_secs(1), "criterion 1");
    verdict("eq1 log-space loss matches brute-force oracle on 100 random 8x8 batches", ok);
}

// --- 2. analytic gradients vs central finite differences --------------------

fn grad_check(params: &ModelParams, batch: &Batch) -> f64 {
    let (_, grads) = gradients(params, batch).unwrap();
    let mut params = params.clone();
    let h = 1e-4;
    let mut worst = 0.0f64;
    let names: Vec<String> = grads.keys().cloned().collect();
    for name in names {
        let len = params.tensors[&name].data.len();
        for idx in 0..len {
            let orig = params.tensors[&name].data.as_slice().unwrap()[idx];
            params.tensors[&name].data.as_slice_mut().unwrap()[idx] = orig + h;
            let plus = batch_loss(&params, batch).unwrap();
            params.tensors[&name].data.as_slice_mut().unwrap()[idx] = orig - h;
            let minus = batch_loss(&params, batch).unwrap();
            params.tensors[&name].data.as_slice_mut().unwrap()[idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = grads[&name].as_slice().unwrap()[idx];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn criterion_02_gradient_check() {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 40,
        embed_dim: 6,
        hidden_dim: 6,
        encoder_layers: 1,
        adapter_dim: 2,
        max_msg_len: 96,
        max_reply_len: 64,
        hash_seed: 3,
    };
    let mut params = ModelParams::init(cfg, 7).unwrap();
    params.install_adapters(&["xx".to_string()].into(), 8);
    let total: usize = params.tensors.values().map(|t| t.data.len()).sum();
    assert!(total <= 5000, "toy model has {total} params");
    let vocab = params.config.vocab();

    let sr = Batch::Sr(vec![
        SrExample {
            message: tokenize("good morning all", "xx", 96, &vocab),
            reply: tokenize("thanks so much", "xx", 64, &vocab),
        },
        SrExample {
            message: tokenize("see you later", "en", 96, &vocab),
            reply: tokenize("bye for now", "en", 64, &vocab),
        },
        SrExample {
            message: tokenize("lunch today maybe", "en", 96, &vocab),
            reply: tokenize("sounds great", "en", 64, &vocab),
        },
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mono = tokenize("one two three four five", "en", 96, &vocab);
    let mlm = Batch::Masked(
        Task::Mlm,
        vec![
            mask_single(&mono, &mut rng).unwrap(),
            mask_single(&tokenize("alpha beta gamma", "xx", 96, &vocab), &mut rng).unwrap(),
        ],
    );
    let pp = unireply::corpus::ParallelPair {
        src: "hello there friend".into(),
        src_lang: "en".into(),
        tgt: "hello_zz there_zz friend_zz".into(),
        tgt_lang: "zz".into(),
    };
    let tlm = Batch::Masked(
        Task::Tlm,
        vec![make_tlm_sample(&pp, &vocab, 96, &mut rng).unwrap()],
    );

    let mut ok = true;
    for (task, batch) in [("SR", &sr), ("MLM", &mlm), ("TLM", &tlm)] {
        let worst = grad_check(&params, batch);
        if worst >= 1e-5 {
            eprintln!("{task} worst relative gradient error {worst:e}");
            ok = false;
        }
    }
    within(start, Duration::from_secs(30), "criterion 2");
    verdict("SR/MLM/TLM analytic gradients match central finite differences", ok);
}

// --- 3. overfit convergence --------------------------------------------------

#[test]
fn criterion_03_overfit_64_pairs() {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 2000,
        embed_dim: 32,
        hidden_dim: 32,
        encoder_layers: 1,
        adapter_dim: 8,
        max_msg_len: 96,
        max_reply_len: 64,
        hash_seed: 17,
    };
    let mut params = ModelParams::init(cfg, 3).unwrap();
    let vocab = params.config.vocab();
    let pairs: Vec<MessageReplyPair> = (0..64)
        .map(|i| MessageReplyPair {
            message: format!("alpha{i} beta{i} gamma{i} delta{i}"),
            reply: format!("resp{i} tail{i}"),
            lang: "aa".into(),
            region: Region::Eur,
        })
        .collect();
    let shard = RegionShard {
        region: Region::Eur,
        languages: ["aa".to_string()].into(),
        pairs: pairs.clone(),
        origin_path: "mem".into(),
        public_auxiliary: false,
        malformed_count: 0,
    };
    let set = mine_responses(&shard, "aa", 64, 1).unwrap();
    let eval_cfg = EvalConfig {
        mrr_cutoff: 64,
        ..EvalConfig::default()
    };

    let mut opt = OptimizerState::new(&params, AdamHyper::default());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut reached = None;
    for epoch in 0..200 {
        let mut order: Vec<usize> = (0..64).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(16) {
            let batch = Batch::Sr(
                chunk
                    .iter()
                    .map(|&i| SrExample {
                        message: tokenize(&pairs[i].message, "aa", 96, &vocab),
                        reply: tokenize(&pairs[i].reply, "aa", 64, &vocab),
                    })
                    .collect(),
            );
            let (_, grads) = gradients(&params, &batch).unwrap();
            adam_step(&mut params, &grads, &mut opt, 3e-3).unwrap();
        }
        let mut scored = set.clone();
        precompute_vectors(&params, &mut scored).unwrap();
        let m = mrr_on_pairs(&params, &scored, &pairs, &eval_cfg, 0.0).unwrap();
        if m == 1.0 {
            reached = Some(epoch + 1);
            break;
        }
    }
    within(start, Duration::from_secs(60), "criterion 3");
    verdict(
        &format!(
            "training MRR reaches 1.0 on 64 pairs within 200 epochs (took {:?})",
            reached
        ),
        reached.is_some(),
    );
}

// --- 4. freeze / bit-identity -------------------------------------------------

fn bits(params: &ModelParams, name: &str) -> Vec<u64> {
    params.tensors[name].data.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn criterion_04_freeze_and_adapter_bit_identity() {
    let data = generate(&small_synth(), 21);
    let ckpt2 = train_through_stage2(&data, small_model());

    // (a) embedding frozen through both stages
    let init = ModelParams::init(small_model(), 17).unwrap();
    let embedding_ok = bits(&init, "embedding") == bits(&ckpt2.params, "embedding");

    // (b) ADP stage: everything except adapters frozen
    let mut adp_stage = stage(
        "LRL-ADP",
        Region::Lrl,
        &["xx", "yy"],
        AuxTask::None,
        5e-3,
        3,
        31,
    );
    adp_stage.use_adapters = true;
    adp_stage.freeze = FreezeSelector::AllExceptAdapters;
    adp_stage.adapter_languages = ["xx".to_string(), "yy".to_string()].into();
    let (ckpt3, _) =
        train_stage(&ckpt2, &adp_stage, &[data.lrl.clone()], &PublicCorpora::default()).unwrap();

    let mut base_ok = true;
    for (name, t) in &ckpt2.params.tensors {
        if !name.starts_with("adapter.") {
            let after = &ckpt3.params.tensors[name];
            if t.data.iter().zip(after.data.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                base_ok = false;
            }
        }
    }

    // HRL predictions exactly unchanged: encodings for non-adapter languages
    let vocab = ckpt2.params.config.vocab();
    let mut pred_ok = true;
    for pair in data.nam.pairs.iter().take(20) {
        let seq = tokenize(&pair.message, &pair.lang, 96, &vocab);
        let before = ckpt2.params.encode(&seq).unwrap();
        let after = ckpt3.params.encode(&seq).unwrap();
        if before
            .iter()
            .zip(after.iter())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            pred_ok = false;
        }
    }

    verdict(
        "frozen embedding bit-identical across stages; adapter stage leaves base tensors and HRL encodings bit-identical",
        embedding_ok && base_ok && pred_ok,
    );
}

// --- 5. multi-task schedule ---------------------------------------------------

#[test]
fn criterion_05_task_schedule() {
    let schedule = batch_schedule(10, 0.5);
    let alternating = schedule
        == vec![true, false, true, false, true, false, true, false, true, false];
    let count_ok = schedule.iter().filter(|&&b| b).count() == 5;
    verdict(
        "task_proportion 0.5 over 10 batches yields exactly 5 auxiliary batches, deterministically alternating",
        alternating && count_ok,
    );
}

// --- 6. region guard ----------------------------------------------------------

fn log_clean(report: &TrainReport, region: &str) -> bool {
    report
        .access_log
        .iter()
        .all(|e| e.public_auxiliary || e.region == region)
}

#[test]
fn criterion_06_region_guard() {
    // spawned CLI: NAM stage pointed at the EUR shard must exit with code 2
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        pairs_per_lang: 20,
        ..small_synth()
    };
    write_all(&synth, 5, dir.path()).unwrap();
    let mut run = RunConfig::default_for_synth(&synth, 5);
    run.model = small_model();
    for s in &mut run.stages {
        s.epochs = 1;
        s.sr_languages = match s.name.as_str() {
            "EUR" => vec!["aa".into(), "bb".into()],
            "NAM" => vec!["dd".into(), "en".into()],
            _ => vec!["xx".into(), "yy".into(), "en".into()],
        };
    }
    run.stages[1].shards = vec!["eur".into()]; // the violation
    let cfg_path = dir.path().join("bad.toml");
    run.save(&cfg_path).unwrap();
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_unireply"))
        .args(["train-stage", "--config"])
        .arg(&cfg_path)
        .args(["--stage", "NAM", "--out"])
        .arg(dir.path().join("out"))
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    let guard_ok = status.code() == Some(2);

    // public auxiliary corpora load in every region's stage
    let data = generate(&synth, 5);
    let public = public_of(&data);
    let (_, eur_report) = train_stage(
        &Checkpoint::new(ModelParams::init(small_model(), 1).unwrap(), 1),
        &stage("EUR", Region::Eur, &["aa", "bb"], AuxTask::Mlm, 1e-3, 1, 2),
        &[data.eur.clone()],
        &public,
    )
    .unwrap();
    let (_, lrl_report) = train_stage(
        &Checkpoint::new(ModelParams::init(small_model(), 1).unwrap(), 1),
        &stage("LRL", Region::Lrl, &["xx", "yy", "en"], AuxTask::Tlm, 1e-3, 1, 3),
        &[data.lrl.clone()],
        &public,
    )
    .unwrap();
    let public_ok = eur_report.access_log.iter().any(|e| e.public_auxiliary)
        && lrl_report.access_log.iter().any(|e| e.public_auxiliary);
    let log_ok = log_clean(&eur_report, "EUR") && log_clean(&lrl_report, "LRL");

    verdict(
        "cross-region shard access exits 2; public corpora load everywhere; access log is violation-free",
        guard_ok && public_ok && log_ok,
    );
}

// --- 7. transfer direction ----------------------------------------------------

#[test]
fn criterion_07_transfer_direction() {
    let start = Instant::now();
    let data = generate(&small_synth(), 21);
    let ckpt2 = train_through_stage2(&data, small_model());
    let public = public_of(&data);
    let sets = lrl_sets(&data);

    let mrr_stage2 = mean_mrr(&ckpt2.params, &data.lrl, &["xx", "yy"], &sets);

    // CL mode: full fine-tuning on pseudo-translated pairs + pivot
    let cl_stage = stage(
        "LRL-CL",
        Region::Lrl,
        &["xx", "yy", "en"],
        AuxTask::Tlm,
        2e-3,
        6,
        13,
    );
    let (ckpt_cl, _) = train_stage(&ckpt2, &cl_stage, &[data.lrl.clone()], &public).unwrap();
    let mrr_cl = mean_mrr(&ckpt_cl.params, &data.lrl, &["xx", "yy"], &sets);

    // ADP mode: adapters only, base frozen
    let mut adp_stage = stage(
        "LRL-ADP",
        Region::Lrl,
        &["xx", "yy"],
        AuxTask::None,
        5e-3,
        20,
        14,
    );
    adp_stage.use_adapters = true;
    adp_stage.freeze = FreezeSelector::AllExceptAdapters;
    adp_stage.adapter_languages = ["xx".to_string(), "yy".to_string()].into();
    let (ckpt_adp, _) =
        train_stage(&ckpt2, &adp_stage, &[data.lrl.clone()], &PublicCorpora::default()).unwrap();
    let mrr_adp = mean_mrr(&ckpt_adp.params, &data.lrl, &["xx", "yy"], &sets);

    eprintln!("LRL MRR: stage2={mrr_stage2:.4} CL={mrr_cl:.4} ADP={mrr_adp:.4}");
    within(start, Duration::from_secs(300), "criterion 7");
    verdict(
        &format!(
            "stage-3 CL lifts LRL MRR by >= 0.10 over stage 2 ({mrr_stage2:.3} -> {mrr_cl:.3}) and ADP >= CL ({mrr_adp:.3})"
        ),
        mrr_cl >= mrr_stage2 + 0.10 && mrr_adp >= mrr_cl,
    );
}

// --- 8. forgetting direction ---------------------------------------------------

#[test]
fn criterion_08_forgetting_direction() {
    let start = Instant::now();
    let data = generate(&small_synth(), 21);
    let ckpt2 = train_through_stage2(&data, small_model());
    let public = public_of(&data);
    let cl_stage = stage(
        "LRL-CL",
        Region::Lrl,
        &["xx", "yy", "en"],
        AuxTask::Tlm,
        2e-3,
        6,
        13,
    );
    let (ckpt3, _) = train_stage(&ckpt2, &cl_stage, &[data.lrl.clone()], &public).unwrap();

    let sets = nam_sets(&data);
    let before = mean_mrr(&ckpt3.params, &data.nam, &["dd", "en"], &sets);

    // +EUR replay: earlier-region data only, no pivot language
    let replay_cfg = stage("+EUR", Region::Eur, &["aa", "bb"], AuxTask::None, 3e-3, 4, 15);
    let (replayed, _) = replay_stage(&ckpt3, &[data.eur.clone()], &replay_cfg).unwrap();
    let after = mean_mrr(&replayed.params, &data.nam, &["dd", "en"], &sets);

    eprintln!("NAM MRR: pre-replay={before:.4} post-replay={after:.4}");
    within(start, Duration::from_secs(180), "criterion 8");
    verdict(
        &format!("+EUR replay strictly degrades NAM MRR ({before:.3} -> {after:.3})"),
        after < before,
    );
}

// --- 9. metric oracles ----------------------------------------------------------

#[test]
fn criterion_09_metric_oracles() {
    let cfg = EvalConfig::default();
    let mrr_ok = (mrr(&[Some(1), Some(2), Some(4)], 15).unwrap() - 7.0 / 12.0).abs() < 1e-15;
    let hand = w_rouge("a b c d", &["a b x d".to_string()], &cfg).unwrap();
    let rouge_ok = (hand - 0.2361).abs() < 1e-4;
    let identical = w_rouge("a b c d", &["a b c d".to_string()], &cfg).unwrap();
    let ident_ok = (identical - 1.0).abs() < 1e-12;
    verdict(
        "MRR[1,2,4]=7/12; W_ROUGE(a b c d | a b x d)=0.2361; identical text scores 1.0",
        mrr_ok && rouge_ok && ident_ok,
    );
}

// --- 10. inference pipeline -------------------------------------------------------

fn toy_graph(entries: Vec<(String, Vec<f64>, f64)>, alpha: f64) -> CompositeGraph {
    let params = ModelParams::init(
        ModelConfig {
            vocab_size: 600,
            embed_dim: 4,
            hidden_dim: 4,
            encoder_layers: 1,
            adapter_dim: 2,
            ..ModelConfig::default()
        },
        77,
    )
    .unwrap();
    let n = entries.len() as u64;
    let set = ResponseSet {
        lang: "en".into(),
        entries: entries
            .into_iter()
            .map(|(text, vector, lm_penalty)| ResponseEntry {
                text,
                lang: "en".into(),
                count: 1,
                lm_penalty,
                vector: Some(vector),
            })
            .collect(),
        total_count: n,
    };
    let mut profiles = LanguageProfiles::default();
    profiles.add_text("en", "hello there thanks so much see you soon ok great bye");
    CompositeGraph::new(
        params,
        &[set],
        profiles,
        GraphConfig {
            alpha,
            ..GraphConfig::default()
        },
    )
    .unwrap()
}

#[test]
fn criterion_10_inference_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    // 40 responses in ~10 lexical families so the top-30 shortlist contains
    // near-duplicates that dedup must collapse
    let entries: Vec<(String, Vec<f64>, f64)> = (0..40)
        .map(|i| {
            let family = i % 10;
            let text = if i < 10 {
                format!("family{family} core words here")
            } else {
                format!("family{family} core words here again{i}")
            };
            let vector: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            (text, vector, -((i % 7 + 1) as f64) / 4.0)
        })
        .collect();
    let graph = toy_graph(entries.clone(), 0.2);
    let out = graph.final_responses("hello there thanks", "en").unwrap();
    let n2_ok = out.len() <= 3 && !out.is_empty();
    let mut jaccard_ok = true;
    for i in 0..out.len() {
        for j in (i + 1)..out.len() {
            let a: BTreeSet<String> = normalize_and_split(&out[i]).into_iter().collect();
            let b: BTreeSet<String> = normalize_and_split(&out[j]).into_iter().collect();
            let inter = a.intersection(&b).count() as f64;
            let union = a.union(&b).count() as f64;
            if inter / union >= 0.5 {
                jaccard_ok = false;
            }
        }
    }
    let _ = lexical_clusters(&out, 0.5); // clusters of final outputs are all singletons
    // alpha = 0: ranking equals pure dot-product ranking
    let zero = toy_graph(entries.clone(), 0.0);
    let vocab = zero.params.config.vocab();
    let u = zero
        .params
        .encode(&tokenize("hello there thanks", "en", 96, &vocab))
        .unwrap();
    let mut by_dot: Vec<usize> = (0..entries.len()).collect();
    let dot = |i: usize| -> f64 {
        entries[i].1.iter().zip(u.iter()).map(|(a, b)| a * b).sum()
    };
    by_dot.sort_by(|&a, &b| dot(b).partial_cmp(&dot(a)).unwrap().then(a.cmp(&b)));
    let ranked = zero.rank_responses("hello there thanks", "en").unwrap();
    let dot_ok = ranked
        .iter()
        .zip(by_dot.iter())
        .all(|((text, _), &i)| *text == entries[i].0);
    // identical vectors rank by penalty when alpha > 0
    let tied = toy_graph(
        vec![
            ("rare".into(), vec![0.4, 0.1, -0.2, 0.3], -3.0),
            ("common".into(), vec![0.4, 0.1, -0.2, 0.3], -0.2),
        ],
        0.5,
    );
    let tied_rank = tied.rank_responses("hello there thanks", "en").unwrap();
    let penalty_ok = tied_rank[0].0 == "common";

    verdict(
        "top-30 -> dedup -> <=3 outputs with pairwise Jaccard < 0.5; alpha=0 equals dot ranking; penalty breaks ties",
        n2_ok && jaccard_ok && dot_ok && penalty_ok,
    );
}

// --- 11. determinism ---------------------------------------------------------------

fn full_pipeline(data: &SynthData) -> (Checkpoint, String) {
    let init = Checkpoint::new(ModelParams::init(small_model(), 17).unwrap(), 17);
    let public = public_of(data);
    let stages = vec![
        (
            stage("EUR", Region::Eur, &["aa", "bb"], AuxTask::Mlm, 3e-3, 2, 11),
            vec![data.eur.clone()],
        ),
        (
            stage("NAM", Region::Nam, &["dd", "en"], AuxTask::Tlm, 2e-3, 2, 12),
            vec![data.nam.clone()],
        ),
        (
            stage("LRL", Region::Lrl, &["xx", "yy", "en"], AuxTask::Tlm, 2e-3, 2, 13),
            vec![data.lrl.clone()],
        ),
    ];
    let (ckpts, _) = run_pipeline(&init, &stages, &public).unwrap();
    let final_ckpt = ckpts.into_iter().next_back().unwrap();

    // eval report against the trans-created response sets
    let eval_cfg = EvalConfig::default();
    let mut per_language = Vec::new();
    for (lang, set) in lrl_sets(data) {
        let mut set = set;
        precompute_vectors(&final_ckpt.params, &mut set).unwrap();
        let pairs: Vec<MessageReplyPair> = data
            .lrl
            .pairs
            .iter()
            .filter(|p| p.lang == lang)
            .cloned()
            .collect();
        let m = mrr_on_pairs(&final_ckpt.params, &set, &pairs, &eval_cfg, 0.2).unwrap();
        per_language.push((lang.to_string(), m));
    }
    let report = serde_json::to_string(&per_language).unwrap();
    (final_ckpt, report)
}

#[test]
fn criterion_11_determinism() {
    let data1 = generate(&small_synth(), 21);
    let data2 = generate(&small_synth(), 21);
    let (c1, r1) = full_pipeline(&data1);
    let (c2, r2) = full_pipeline(&data2);
    let mut tensors_ok = c1.params.tensors.len() == c2.params.tensors.len();
    for (name, t) in &c1.params.tensors {
        let other = &c2.params.tensors[name];
        if t.data.iter().zip(other.data.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            tensors_ok = false;
        }
    }
    // saved checkpoint blobs byte-identical
    let dir = tempfile::tempdir().unwrap();
    c1.save(&dir.path().join("a.ckpt")).unwrap();
    c2.save(&dir.path().join("b.ckpt")).unwrap();
    let blob_ok = std::fs::read(dir.path().join("a.ckpt/tensors.bin")).unwrap()
        == std::fs::read(dir.path().join("b.ckpt/tensors.bin")).unwrap();
    verdict(
        "two identically seeded pipeline runs give bit-identical checkpoints and eval reports",
        tensors_ok && blob_ok && r1 == r2,
    );
}

// --- 12. serving ----------------------------------------------------------------------

#[test]
fn criterion_12_serving() {
    // small but real graph bundle on disk
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        pairs_per_lang: 40,
        ..small_synth()
    };
    let data = generate(&synth, 9);
    let params = ModelParams::init(small_model(), 9).unwrap();
    let ckpt = Checkpoint::new(params, 9);
    let mut set = mine_responses(&data.eur, "aa", 30, 1).unwrap();
    precompute_vectors(&ckpt.params, &mut set).unwrap();
    let mut profiles = LanguageProfiles::default();
    for (lang, text) in &data.mono.texts {
        profiles.add_text(lang, text);
    }
    let graph_dir = dir.path().join("graph");
    unireply::inference::save_graph(&graph_dir, &ckpt, &[set], &profiles, &GraphConfig::default())
        .unwrap();

    let request = serde_json::json!({ "message": data.eur.pairs[0].message }).to_string();
    let mut child = std::process::Command::new(env!("CARGO_BIN_EXE_unireply"))
        .args(["serve", "--graph"])
        .arg(&graph_dir)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let req = request.clone();
    let writer = std::thread::spawn(move || {
        for i in 0..1000 {
            if i % 100 == 50 {
                stdin.write_all(b"{broken json\n").unwrap();
            }
            stdin.write_all(req.as_bytes()).unwrap();
            stdin.write_all(b"\n").unwrap();
        }
    });
    let out = child.wait_with_output().unwrap();
    writer.join().unwrap();
    let lines: Vec<&str> = std::str::from_utf8(&out.stdout).unwrap().lines().collect();
    let errors: Vec<&&str> = lines.iter().filter(|l| l.contains("\"error\"")).collect();
    let replies: Vec<&&str> = lines.iter().filter(|l| !l.contains("\"error\"")).collect();
    let stateless = replies.len() == 1000 && replies.iter().all(|r| **r == *replies[0]);
    let survived = errors.len() == 10 && out.status.success();
    let triggered = replies.first().map(|r| r.contains("\"triggered\":true")).unwrap_or(false);
    verdict(
        "serve answers 1000 identical requests identically, triggers, and survives malformed input",
        stateless && survived && triggered,
    );
}

// --- sanity: golden-rank plumbing used by the eval harness ------------------------

#[test]
fn golden_rank_matches_normalized_reply() {
    let data = generate(
        &SynthConfig {
            pairs_per_lang: 30,
            ..small_synth()
        },
        2,
    );
    let params = ModelParams::init(small_model(), 2).unwrap();
    let mut set = mine_responses(&data.eur, "aa", 30, 1).unwrap();
    precompute_vectors(&params, &mut set).unwrap();
    let mut profiles = LanguageProfiles::default();
    for (lang, text) in &data.mono.texts {
        profiles.add_text(lang, text);
    }
    let graph = CompositeGraph::new(params, &[set.clone()], profiles, GraphConfig::default()).unwrap();
    let pair = data
        .eur
        .pairs
        .iter()
        .find(|p| p.lang == "aa")
        .unwrap();
    let rank = unireply::eval::golden_rank(&graph, pair, 15).unwrap();
    assert!(rank.is_some());
    let ranked = graph.rank_responses(&pair.message, "aa").unwrap();
    assert_eq!(
        normalize_reply(&ranked[rank.unwrap() - 1].0),
        normalize_reply(&pair.reply)
    );
}
