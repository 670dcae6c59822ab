//! `retrain` — train and evaluate a sparse retriever against a RAG
//! environment.
//!
//! Every subcommand reads one TOML config (see `retrain.toml` emitted by
//! `gen-fixture`) plus a few flag overrides, writes its artifacts to the
//! configured paths, and exits 0 on success. Errors go to stderr as a
//! single JSON object.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use retrain_core::cache::ProbabilityCache;
use retrain_core::config::{load_all, Loaded, RunConfig};
use retrain_core::corpus::tokenize;
use retrain_core::encoder::init_params;
use retrain_core::harness::{evaluate, render_table, run_ablation, Arm, EvalReport, ExperimentInputs};
use retrain_core::index::{
    build_bag_index, load_index, save_index, InvertedIndex, RetrievalMode, SearchContext,
};
use retrain_core::labeler::{build_all_pools, load_pools, save_pools, Labeler, PoolRecord};
use retrain_core::synth::synthetic_world;
use retrain_core::trainer::{self, Checkpoint, TrainInputs};

#[derive(Parser)]
#[command(name = "retrain", version, about = "Sparse retriever training against a RAG environment")]
struct Cli {
    /// Path to the run configuration file.
    #[arg(long, global = true, default_value = "retrain.toml")]
    config: PathBuf,
    /// Override the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the number of training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the frozen bag-of-tokens index over the corpus.
    BuildIndex,
    /// Build offline pools and probability thresholds for training queries.
    BuildPools,
    /// Run the two-phase training loop.
    Train {
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split (IR@1 and 1-shot RAG).
    Eval {
        /// Checkpoint to evaluate; defaults to <checkpoint_dir>/final.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of documents placed in the generation context.
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Print ranked (doc_id, score) results for an ad-hoc query.
    Search {
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one ablation arm (or all of them) and emit per-epoch reports.
    Ablate {
        /// offline-only | online-only | offline+online | kl | no-rerank |
        /// periodic-reindex | all
        #[arg(long, default_value = "all")]
        arm: String,
    },
    /// Render the ablation/eval report log as a table.
    Report {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write the built-in synthetic corpus, queries, fixture, and a matching
    /// config file into a directory.
    GenFixture {
        #[arg(long, default_value = "fixture")]
        out: PathBuf,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let line = serde_json::json!({ "error": format!("{err:#}") });
        eprintln!("{line}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::GenFixture { out } = &cli.command {
        return gen_fixture(out);
    }
    let mut config = RunConfig::load(&cli.config)
        .with_context(|| format!("loading config {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = cli.epochs {
        config.train.epochs = epochs;
    }

    match cli.command {
        Command::BuildIndex => build_index_cmd(&config),
        Command::BuildPools => build_pools_cmd(&config),
        Command::Train { resume } => train_cmd(&config, resume),
        Command::Eval { checkpoint, shots } => eval_cmd(&config, checkpoint, shots),
        Command::Search { query, k, checkpoint } => search_cmd(&config, &query, k, checkpoint),
        Command::Ablate { arm } => ablate_cmd(&config, &arm),
        Command::Report { input } => report_cmd(&config, input),
        Command::GenFixture { .. } => unreachable!(),
    }
}

fn gen_fixture(out: &PathBuf) -> anyhow::Result<()> {
    let world = synthetic_world();
    let paths = world.write_files(out)?;
    let mut config = RunConfig::default();
    config.train = retrain_core::trainer::TrainConfig::desk_scale();
    config.vocab_max_size = 5000;
    config.eval.dataset_id = "synthetic".into();
    config.paths.corpus = paths.corpus;
    config.paths.train_queries = paths.train;
    config.paths.test_queries = paths.test;
    config.paths.mock_fixture = paths.fixture;
    for (field, name) in [
        (&mut config.paths.index, "bot_index.bin"),
        (&mut config.paths.pools, "pools.jsonl"),
        (&mut config.paths.cache, "prob_cache.jsonl"),
        (&mut config.paths.metrics, "metrics.jsonl"),
        (&mut config.paths.report, "report.jsonl"),
    ] {
        *field = out.join(name);
    }
    config.paths.checkpoint_dir = out.join("checkpoints");
    std::fs::create_dir_all(&config.paths.checkpoint_dir)?;
    let config_path = out.join("retrain.toml");
    config.save(&config_path)?;
    println!(
        "wrote {} documents, {} train / {} test queries, fixture, and {}",
        world.documents.len(),
        world.train_queries.len(),
        world.test_queries.len(),
        config_path.display()
    );
    Ok(())
}

fn build_index_cmd(config: &RunConfig) -> anyhow::Result<()> {
    let loaded = load_all(config)?;
    let index = build_bag_index(&loaded.datastore)?;
    if let Some(parent) = config.paths.index.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_index(&index, &config.paths.index)?;
    println!(
        "indexed {} documents over |V|={} into {}",
        index.doc_count(),
        index.dim(),
        config.paths.index.display()
    );
    Ok(())
}

fn load_or_build_index(config: &RunConfig, loaded: &Loaded) -> anyhow::Result<InvertedIndex> {
    if config.paths.index.exists() {
        Ok(load_index(&config.paths.index)?)
    } else {
        Ok(build_bag_index(&loaded.datastore)?)
    }
}

fn load_cache(config: &RunConfig) -> anyhow::Result<ProbabilityCache> {
    if config.paths.cache.exists() {
        Ok(ProbabilityCache::load(&config.paths.cache)?)
    } else {
        Ok(ProbabilityCache::new())
    }
}

fn build_pools_cmd(config: &RunConfig) -> anyhow::Result<()> {
    let loaded = load_all(config)?;
    let bot_index = load_or_build_index(config, &loaded)?;
    let cache = load_cache(config)?;
    let cached_before = cache.len();
    let params = init_params(
        config.train.seed,
        loaded.datastore.vocabulary.size(),
        config.train.hidden,
    );
    let labeler = Labeler::new(loaded.env.as_ref(), &cache, &loaded.datastore);
    let ctx = SearchContext {
        params: &params,
        datastore: &loaded.datastore,
        bot_index: &bot_index,
        parametric_index: None,
        mode: RetrievalMode::LateParametric,
        m: config.train.pool_size,
        k_sparse: config.train.k_sparse,
    };
    let (records, dropped) =
        build_all_pools(&labeler, &ctx, &loaded.train_queries, config.train.pool_size)?;
    for path in [&config.paths.pools, &config.paths.cache] {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_pools(&records, &config.paths.pools)?;
    cache.persist(&config.paths.cache)?;
    println!(
        "built pools for {} queries ({} dropped), cached {} probabilities ({} reused), {} env calls",
        records.len(),
        dropped.len(),
        cache.len(),
        cached_before,
        loaded.env.call_count()
    );
    Ok(())
}

fn train_cmd(config: &RunConfig, resume: Option<PathBuf>) -> anyhow::Result<()> {
    let loaded = load_all(config)?;
    let bot_index = load_or_build_index(config, &loaded)?;
    if !config.paths.pools.exists() {
        bail!(
            "pools file {} not found; run `retrain build-pools` first",
            config.paths.pools.display()
        );
    }
    let pools = load_pools(&config.paths.pools)?;
    let cache = load_cache(config)?;
    std::fs::create_dir_all(&config.paths.checkpoint_dir)?;
    let inputs = TrainInputs {
        datastore: &loaded.datastore,
        queries: &loaded.train_queries,
        pools: &pools,
        cache: &cache,
        env: loaded.env.as_ref(),
        bot_index: &bot_index,
        checkpoint_dir: Some(&config.paths.checkpoint_dir),
    };
    let outputs = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(&path)?;
            trainer::resume(&config.train, &inputs, ckpt, |_, _, _| {})?
        }
        None => trainer::train(&config.train, &inputs, |_, _, _| {})?,
    };

    if let Some(parent) = config.paths.metrics.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut metrics = std::fs::File::create(&config.paths.metrics)?;
    for line in &outputs.metrics_lines {
        writeln!(metrics, "{line}")?;
    }
    let final_path = config.paths.checkpoint_dir.join("final.json");
    Checkpoint {
        encoder: retrain_core::encoder::EncoderCheckpoint::from_params(
            &outputs.params,
            config.train.k_sparse,
        ),
        opt_state: outputs.opt_state.clone(),
        step: outputs.steps,
        config_hash: outputs.config_hash.clone(),
    }
    .save(&final_path)?;
    cache.persist(&config.paths.cache)?;
    println!(
        "trained {} steps; final checkpoint {}; metrics {}",
        outputs.steps,
        final_path.display(),
        config.paths.metrics.display()
    );
    Ok(())
}

fn load_checkpoint_params(
    config: &RunConfig,
    checkpoint: Option<PathBuf>,
) -> anyhow::Result<(retrain_core::encoder::EncoderParams, usize)> {
    let path = checkpoint.unwrap_or_else(|| config.paths.checkpoint_dir.join("final.json"));
    if !path.exists() {
        bail!("checkpoint {} not found; run `retrain train` first", path.display());
    }
    let ckpt = Checkpoint::load(&path)?;
    Ok(ckpt.encoder.into_params()?)
}

fn eval_cmd(
    config: &RunConfig,
    checkpoint: Option<PathBuf>,
    shots: Option<usize>,
) -> anyhow::Result<()> {
    let loaded = load_all(config)?;
    let bot_index = load_or_build_index(config, &loaded)?;
    let (params, k_sparse) = load_checkpoint_params(config, checkpoint)?;
    let ctx = SearchContext {
        params: &params,
        datastore: &loaded.datastore,
        bot_index: &bot_index,
        parametric_index: None,
        mode: config.train.retrieval_mode,
        m: config.train.m,
        k_sparse,
    };
    let shots = shots.unwrap_or(config.eval.shots);
    let mut report = evaluate(
        &ctx,
        loaded.env.as_ref(),
        &loaded.test_queries,
        &config.eval.dataset_id,
        &config.train.hash(),
    )?;
    if shots != 1 {
        let rag = retrain_core::harness::eval_rag(&ctx, loaded.env.as_ref(), &loaded.test_queries, shots)?;
        println!("rag@{shots}-shot accuracy: {:.4} ({} errored)", rag.accuracy, rag.errored);
        report.per_query = rag.per_query;
        report.rag_accuracy_1shot = rag.accuracy;
        report.errored = rag.errored;
    }
    if let Some(parent) = config.paths.report.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&config.paths.report)?;
    let line = serde_json::json!({"arm": "eval", "epoch": config.train.epochs - 1, "report": report});
    writeln!(file, "{line}")?;
    println!(
        "{}",
        render_table(&[("eval".to_string(), config.train.epochs - 1, &report)])
    );
    Ok(())
}

fn search_cmd(
    config: &RunConfig,
    query_text: &str,
    k: usize,
    checkpoint: Option<PathBuf>,
) -> anyhow::Result<()> {
    let loaded = load_all(config)?;
    let bot_index = load_or_build_index(config, &loaded)?;
    let final_ckpt = config.paths.checkpoint_dir.join("final.json");
    let (params, k_sparse) = if checkpoint.is_some() || final_ckpt.exists() {
        load_checkpoint_params(config, checkpoint)?
    } else {
        log::warn!("no checkpoint found, searching with untrained parameters");
        (
            init_params(config.train.seed, loaded.datastore.vocabulary.size(), config.train.hidden),
            config.train.k_sparse,
        )
    };
    let tokens = tokenize(query_text, &loaded.datastore.vocabulary);
    let ctx = SearchContext {
        params: &params,
        datastore: &loaded.datastore,
        bot_index: &bot_index,
        parametric_index: None,
        mode: config.train.retrieval_mode,
        m: config.train.m.max(k),
        k_sparse,
    };
    let hits = ctx.retrieve("adhoc", &tokens, k)?;
    for (doc_id, score) in &hits.entries {
        println!("{doc_id}\t{score:.6}");
    }
    Ok(())
}

fn ablate_cmd(config: &RunConfig, arm_name: &str) -> anyhow::Result<()> {
    let loaded = load_all(config)?;
    let bot_index = load_or_build_index(config, &loaded)?;
    if !config.paths.pools.exists() {
        bail!(
            "pools file {} not found; run `retrain build-pools` first",
            config.paths.pools.display()
        );
    }
    let pools: HashMap<String, PoolRecord> = load_pools(&config.paths.pools)?;
    let cache = load_cache(config)?;
    let arms: Vec<Arm> = if arm_name == "all" {
        Arm::ALL.to_vec()
    } else {
        vec![Arm::parse(arm_name)
            .with_context(|| format!("unknown ablation arm {arm_name:?}"))?]
    };
    let inputs = ExperimentInputs {
        datastore: &loaded.datastore,
        train_queries: &loaded.train_queries,
        test_queries: &loaded.test_queries,
        pools: &pools,
        cache: &cache,
        env: loaded.env.as_ref(),
        bot_index: &bot_index,
        dataset_id: &config.eval.dataset_id,
    };
    if let Some(parent) = config.paths.report.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&config.paths.report)?;
    let mut rows: Vec<(String, usize, EvalReport)> = Vec::new();
    for arm in arms {
        let run = run_ablation(arm, &config.train, &inputs, config.eval.eval_every)?;
        for (epoch, report) in &run.reports {
            let line = serde_json::json!({"arm": arm.name(), "epoch": epoch, "report": report});
            writeln!(file, "{line}")?;
            rows.push((arm.name().to_string(), *epoch, report.clone()));
        }
        println!(
            "{}: final rag@1 {:.4}",
            arm.name(),
            run.final_report().rag_accuracy_1shot
        );
    }
    let borrowed: Vec<(String, usize, &EvalReport)> =
        rows.iter().map(|(a, e, r)| (a.clone(), *e, r)).collect();
    println!("{}", render_table(&borrowed));
    cache.persist(&config.paths.cache)?;
    Ok(())
}

fn report_cmd(config: &RunConfig, input: Option<PathBuf>) -> anyhow::Result<()> {
    let path = input.unwrap_or_else(|| config.paths.report.clone());
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading report log {}", path.display()))?;
    let mut rows: Vec<(String, usize, EvalReport)> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let value: serde_json::Value = serde_json::from_str(line)?;
        let arm = value["arm"].as_str().unwrap_or("?").to_string();
        let epoch = value["epoch"].as_u64().unwrap_or(0) as usize;
        let report: EvalReport = serde_json::from_value(value["report"].clone())?;
        rows.push((arm, epoch, report));
    }
    let borrowed: Vec<(String, usize, &EvalReport)> =
        rows.iter().map(|(a, e, r)| (a.clone(), *e, r)).collect();
    print!("{}", render_table(&borrowed));
    Ok(())
}
