use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use unireply::config::{Ablation, RunConfig, StageSpec, TrainMode};
use unireply::corpus::{load_mono, load_parallel, load_shard, PseudoLexicon, RegionShard};
use unireply::error::{Error, Result};
use unireply::eval::{
    evaluate_language, forgetting_report, format_table, EvalConfig, EvalReport,
};
use unireply::inference::{load_graph, save_graph, serve, CompositeGraph, GraphConfig};
use unireply::model::{Checkpoint, ModelParams};
use unireply::responses::{
    mine_responses, precompute_vectors, transcreate, ResponseEntry, ResponseSet,
};
use unireply::synth::{write_all, SynthConfig};
use unireply::text::LanguageProfiles;
use unireply::trainer::{replay_stage, run_pipeline, train_stage, PublicCorpora, TrainReport, PIVOT_LANG};

#[derive(Parser)]
#[command(name = "unireply", version, about = "Multilingual suggested-reply training and serving")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic region shards, public corpora, and a run config.
    Synth {
        /// Output data directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Take generator settings from an existing run config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a single named stage from the config.
    TrainStage {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: String,
        /// Input checkpoint; a fresh model is initialized when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Run every configured stage in order from a fresh model.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// cl (full fine-tuning, default) or adp (adapters on low-resource stages).
        #[arg(long)]
        mode: Option<String>,
        /// tlm=off or tlm=mlm.
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Continue a trained checkpoint on the replay stage (forgetting probe).
    Replay {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mine + transcreate response sets, precompute vectors, bundle a graph.
    BuildResponses {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the LM-penalty weight.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Score one or more graph bundles on the held-out splits.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Graph bundle directory; repeat for forgetting analysis.
        #[arg(long, required = true)]
        graph: Vec<PathBuf>,
        /// Write the full JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve newline-delimited JSON requests on stdin.
    Serve {
        #[arg(long)]
        graph: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { out, seed, config } => cmd_synth(&out, seed, config.as_deref()),
        Cmd::TrainStage {
            config,
            stage,
            ckpt,
            out,
            seed,
            ablate,
        } => cmd_train_stage(&config, &stage, ckpt.as_deref(), &out, seed, ablate),
        Cmd::Pipeline {
            config,
            out,
            mode,
            ablate,
            seed,
        } => cmd_pipeline(&config, &out, mode, ablate, seed),
        Cmd::Replay {
            config,
            ckpt,
            out,
            seed,
        } => cmd_replay(&config, &ckpt, &out, seed),
        Cmd::BuildResponses {
            config,
            ckpt,
            out,
            alpha,
        } => cmd_build_responses(&config, &ckpt, &out, alpha),
        Cmd::Eval { config, graph, out } => cmd_eval(&config, &graph, out.as_deref()),
        Cmd::Serve { graph } => {
            let g = load_graph(&graph)?;
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            serve(&g, stdin.lock(), stdout.lock())
        }
    }
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    mode: Option<String>,
    ablate: Option<String>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.apply_mode(m.parse::<TrainMode>()?)?;
    }
    if let Some(a) = ablate {
        cfg.apply_ablation(a.parse::<Ablation>()?);
    }
    Ok(cfg)
}

fn load_public(cfg: &RunConfig) -> Result<PublicCorpora> {
    let parallel_path = cfg.resolve(&cfg.data.parallel);
    Ok(PublicCorpora {
        parallel: load_parallel(&parallel_path)?,
        parallel_origin: parallel_path.display().to_string(),
        mono: Some(load_mono(&cfg.resolve(&cfg.data.mono))?),
    })
}

fn load_stage_shards(cfg: &RunConfig, spec: &StageSpec) -> Result<Vec<RegionShard>> {
    let region = spec.region()?;
    spec.shards
        .iter()
        .map(|key| load_shard(&cfg.shard_path(key), region))
        .collect()
}

fn fresh_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    Ok(Checkpoint::new(
        ModelParams::init(cfg.model.clone(), cfg.seed)?,
        cfg.seed,
    ))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.display().to_string(),
            source: e,
        })?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value).expect("json")).map_err(|e| {
        Error::Io {
            path: path.display().to_string(),
            source: e,
        }
    })
}

fn append_access_log(path: &Path, reports: &[&TrainReport]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    for report in reports {
        for entry in &report.access_log {
            writeln!(f, "{}", entry.to_line()).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
    }
    Ok(())
}

fn cmd_synth(out: &Path, seed: Option<u64>, config: Option<&Path>) -> Result<()> {
    let (synth, base_seed) = match config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            (cfg.synth.clone(), cfg.seed)
        }
        None => (SynthConfig::default(), 42),
    };
    let seed = seed.unwrap_or(base_seed);
    let data = write_all(&synth, seed, out)?;
    let run = RunConfig::default_for_synth(&synth, seed);
    run.save(&out.join("run.toml"))?;
    println!(
        "wrote {} EUR + {} NAM + {} LRL pairs, {} parallel sentences, {} mono lines to {}",
        data.eur.pairs.len(),
        data.nam.pairs.len(),
        data.lrl.pairs.len(),
        data.parallel.len(),
        data.mono.texts.len(),
        out.display()
    );
    println!("run config: {}", out.join("run.toml").display());
    Ok(())
}

fn cmd_train_stage(
    config: &Path,
    stage: &str,
    ckpt_in: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    ablate: Option<String>,
) -> Result<()> {
    let cfg = load_config(config, seed, None, ablate)?;
    let spec = cfg.stage(stage)?;
    let stage_cfg = spec.to_stage_config(cfg.seed)?;
    let shards = load_stage_shards(&cfg, spec)?;
    let public = load_public(&cfg)?;
    let ckpt = match ckpt_in {
        Some(p) => Checkpoint::load(p)?,
        None => fresh_checkpoint(&cfg)?,
    };
    let (trained, report) = train_stage(&ckpt, &stage_cfg, &shards, &public)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    trained.save(&out.join(format!("stage_{stage}.ckpt")))?;
    write_json(&out.join(format!("report_{stage}.json")), &report)?;
    append_access_log(&out.join("access_log.txt"), &[&report])?;
    println!(
        "stage {stage}: selected epoch {} of {}",
        report.selected_epoch,
        report.epoch_losses.len()
    );
    Ok(())
}

fn cmd_pipeline(
    config: &Path,
    out: &Path,
    mode: Option<String>,
    ablate: Option<String>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed, mode, ablate)?;
    if cfg.stages.is_empty() {
        return Err(Error::Config("config defines no stages".into()));
    }
    let mut stages = Vec::new();
    for spec in &cfg.stages {
        stages.push((spec.to_stage_config(cfg.seed)?, load_stage_shards(&cfg, spec)?));
    }
    let public = load_public(&cfg)?;
    let init = fresh_checkpoint(&cfg)?;
    let (checkpoints, reports) = run_pipeline(&init, &stages, &public)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    for ((spec, _), ckpt) in stages.iter().zip(&checkpoints) {
        ckpt.save(&out.join(format!("stage_{}.ckpt", spec.name)))?;
    }
    checkpoints
        .last()
        .expect("at least one stage")
        .save(&out.join("final.ckpt"))?;
    write_json(&out.join("reports.json"), &reports)?;
    append_access_log(&out.join("access_log.txt"), &reports.iter().collect::<Vec<_>>())?;
    for report in &reports {
        println!(
            "stage {}: selected epoch {} of {}",
            report.stage,
            report.selected_epoch,
            report.epoch_losses.len()
        );
    }
    println!("final checkpoint: {}", out.join("final.ckpt").display());
    Ok(())
}

fn cmd_replay(config: &Path, ckpt_in: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed, None, None)?;
    let spec = cfg
        .replay
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [replay] stage".into()))?;
    let stage_cfg = spec.to_stage_config(cfg.seed)?;
    let shards = load_stage_shards(&cfg, spec)?;
    let ckpt = Checkpoint::load(ckpt_in)?;
    let (trained, report) = replay_stage(&ckpt, &shards, &stage_cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    trained.save(&out.join("replay.ckpt"))?;
    write_json(&out.join("report_replay.json"), &report)?;
    append_access_log(&out.join("access_log.txt"), &[&report])?;
    println!(
        "replay {}: selected epoch {} of {}",
        report.stage,
        report.selected_epoch,
        report.epoch_losses.len()
    );
    Ok(())
}

/// Mine per-language sets from their home shards; low-resource languages get
/// trans-created pivot sets instead.
fn build_response_sets(cfg: &RunConfig, params: &ModelParams) -> Result<Vec<ResponseSet>> {
    let shards = [
        load_shard(&cfg.shard_path("eur"), "EUR".parse()?)?,
        load_shard(&cfg.shard_path("nam"), "NAM".parse()?)?,
        load_shard(&cfg.shard_path("lrl"), "LRL".parse()?)?,
    ];
    let pivot_home = shards
        .iter()
        .find(|s| s.languages.contains(PIVOT_LANG) && s.pairs.iter().any(|p| p.lang == PIVOT_LANG))
        .ok_or_else(|| Error::Config(format!("no shard carries pivot language {PIVOT_LANG}")))?;
    let pivot_set = mine_responses(pivot_home, PIVOT_LANG, cfg.responses.cap, cfg.responses.min_count)?;

    let mut sets: BTreeMap<String, ResponseSet> = BTreeMap::new();
    sets.insert(PIVOT_LANG.to_string(), pivot_set.clone());
    for shard in &shards {
        for lang in &shard.languages {
            if sets.contains_key(lang) {
                continue;
            }
            let set = if cfg.synth.lrl_langs.contains(lang) {
                let lexicon = PseudoLexicon::suffix_rule(PIVOT_LANG, lang);
                transcreate(&pivot_set, &lexicon, lang)?
            } else {
                mine_responses(shard, lang, cfg.responses.cap, cfg.responses.min_count)?
            };
            sets.insert(lang.clone(), set);
        }
    }
    let mut out: Vec<ResponseSet> = sets.into_values().collect();
    for set in &mut out {
        precompute_vectors(params, set)?;
    }
    Ok(out)
}

fn build_profiles(cfg: &RunConfig) -> Result<LanguageProfiles> {
    let mono = load_mono(&cfg.resolve(&cfg.data.mono))?;
    let mut profiles = LanguageProfiles::default();
    for (lang, text) in &mono.texts {
        profiles.add_text(lang, text);
    }
    Ok(profiles)
}

fn cmd_build_responses(
    config: &Path,
    ckpt_in: &Path,
    out: &Path,
    alpha: Option<f64>,
) -> Result<()> {
    let cfg = load_config(config, None, None, None)?;
    let ckpt = Checkpoint::load(ckpt_in)?;
    let sets = build_response_sets(&cfg, &ckpt.params)?;
    let profiles = build_profiles(&cfg)?;
    let graph_cfg = GraphConfig {
        alpha: alpha.unwrap_or(cfg.inference.alpha),
        ..cfg.inference.clone()
    };
    save_graph(out, &ckpt, &sets, &profiles, &graph_cfg)?;
    println!(
        "graph bundle at {} ({} languages, alpha={})",
        out.display(),
        sets.len(),
        graph_cfg.alpha
    );
    Ok(())
}

/// Response sets reconstructed from a loaded graph, for split construction.
fn graph_response_map(graph: &CompositeGraph) -> BTreeMap<String, ResponseSet> {
    graph
        .responses
        .iter()
        .map(|(lang, lr)| {
            let entries = lr
                .texts
                .iter()
                .enumerate()
                .map(|(i, text)| ResponseEntry {
                    text: text.clone(),
                    lang: lang.clone(),
                    count: 0,
                    lm_penalty: lr.penalties[i],
                    vector: None,
                })
                .collect();
            (
                lang.clone(),
                ResponseSet {
                    lang: lang.clone(),
                    entries,
                    total_count: 0,
                },
            )
        })
        .collect()
}

fn cmd_eval(config: &Path, graphs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, None, None, None)?;
    let eval_cfg = EvalConfig::default();
    let regions = [("EUR", "eur"), ("NAM", "nam"), ("LRL", "lrl")];

    let mut region_json = serde_json::Map::new();
    for (region_name, key) in regions {
        let shard = load_shard(&cfg.shard_path(key), region_name.parse()?)?;
        let mut reports: Vec<EvalReport> = Vec::new();
        for graph_path in graphs {
            let graph = load_graph(graph_path)?;
            let responses = graph_response_map(&graph);
            let split = unireply::corpus::build_eval_sets(
                &shard,
                &responses,
                cfg.eval.golden_fraction,
                cfg.eval.holdout_seed,
            )?;
            let mut per_language = Vec::new();
            for lang in &shard.languages {
                let golden: Vec<_> = split.golden.iter().filter(|p| &p.lang == lang).cloned().collect();
                let general: Vec<_> =
                    split.general.iter().filter(|p| &p.lang == lang).cloned().collect();
                per_language.push(evaluate_language(&graph, lang, &golden, &general, &eval_cfg)?);
            }
            reports.push(EvalReport {
                model: graph_path.display().to_string(),
                per_language,
            });
        }
        print!("{}", format_table(region_name, &reports));
        let forgetting = if reports.len() >= 2 {
            Some(forgetting_report(&reports)?)
        } else {
            None
        };
        region_json.insert(
            region_name.to_string(),
            serde_json::json!({ "reports": reports, "forgetting": forgetting }),
        );
    }
    if let Some(path) = out {
        write_json(path, &serde_json::Value::Object(region_json))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}
