//! End-to-end run on the built-in synthetic world: build pools, train the
//! full method, and print per-epoch test accuracy next to the untrained
//! baseline.
//!
//! Run: `cargo run --release -p retrain-core --example synthetic_end_to_end`

use std::collections::HashMap;

use retrain_core::cache::ProbabilityCache;
use retrain_core::encoder::init_params;
use retrain_core::env::{EnvironmentClient, MockEnv, MockEnvSpec};
use retrain_core::harness::{evaluate_arm, run_ablation, Arm, ExperimentInputs};
use retrain_core::index::{build_bag_index, RetrievalMode, SearchContext};
use retrain_core::labeler::{build_all_pools, Labeler, PoolRecord};
use retrain_core::synth::load_synthetic;
use retrain_core::trainer::TrainConfig;

fn main() -> retrain_core::Result<()> {
    let t0 = std::time::Instant::now();
    let world = load_synthetic()?;
    let mut all_queries = world.train_queries.clone();
    all_queries.extend(world.test_queries.iter().cloned());
    let env = MockEnv::new(MockEnvSpec::default(), &world.datastore, &all_queries, &world.fixture)?;
    let bot_index = build_bag_index(&world.datastore)?;
    println!(
        "world: {} docs, vocab {}, {} train / {} test queries",
        world.datastore.len(),
        world.datastore.vocabulary.size(),
        world.train_queries.len(),
        world.test_queries.len()
    );

    let mut config = TrainConfig::desk_scale();
    if let Some(lr) = std::env::args().nth(1) {
        config.learning_rate = lr.parse().unwrap();
    }
    if let Some(wd) = std::env::args().nth(2) {
        config.weight_decay = wd.parse().unwrap();
    }
    if let Some(k) = std::env::args().nth(3) {
        config.k_sparse = k.parse().unwrap();
    }
    if let Some(h) = std::env::args().nth(4) {
        config.hidden = h.parse().unwrap();
    }
    if let Some(seed) = std::env::args().nth(5) {
        config.seed = seed.parse().unwrap();
    }
    println!(
        "config: lr={} wd={} k_sparse={} hidden={} epochs={} batch={}",
        config.learning_rate,
        config.weight_decay,
        config.k_sparse,
        config.hidden,
        config.epochs,
        config.batch_size
    );

    // Offline pools with the untrained encoder.
    let params0 = init_params(config.seed, world.datastore.vocabulary.size(), config.hidden);
    let cache = ProbabilityCache::new();
    let labeler = Labeler::new(&env, &cache, &world.datastore);
    let ctx = SearchContext {
        params: &params0,
        datastore: &world.datastore,
        bot_index: &bot_index,
        parametric_index: None,
        mode: RetrievalMode::LateParametric,
        m: config.pool_size,
        k_sparse: config.k_sparse,
    };
    let (records, dropped) = build_all_pools(&labeler, &ctx, &world.train_queries, config.pool_size)?;
    println!(
        "pools: {} built, {} dropped, {:.1}s, {} env calls",
        records.len(),
        dropped.len(),
        t0.elapsed().as_secs_f64(),
        env.call_count()
    );
    let pools: HashMap<String, PoolRecord> =
        records.into_iter().map(|r| (r.query_id.clone(), r)).collect();

    let inputs = ExperimentInputs {
        datastore: &world.datastore,
        train_queries: &world.train_queries,
        test_queries: &world.test_queries,
        pools: &pools,
        cache: &cache,
        env: &env,
        bot_index: &bot_index,
        dataset_id: "synthetic",
    };

    let baseline = evaluate_arm(Arm::OfflineOnline, &params0, &config, &inputs, &world.test_queries, None)?;
    println!(
        "untrained: ir@1 {:.3}  rag@1 {:.3}",
        baseline.ir_accuracy_at_1, baseline.rag_accuracy_1shot
    );
    let misleading: Vec<_> = world
        .test_queries
        .iter()
        .filter(|q| world.misleading_test_ids.contains(&q.id))
        .cloned()
        .collect();
    let base_sub = evaluate_arm(Arm::OfflineOnline, &params0, &config, &inputs, &misleading, None)?;
    println!(
        "untrained misleading subset: ir@1 {:.3}  rag@1 {:.3}",
        base_sub.ir_accuracy_at_1, base_sub.rag_accuracy_1shot
    );

    for arm in [Arm::OfflineOnline, Arm::OfflineOnly, Arm::OnlineOnly, Arm::Kl, Arm::NoRerank, Arm::PeriodicReindex] {
        let t = std::time::Instant::now();
        let run = run_ablation(arm, &config, &inputs, 4)?;
        let curve: Vec<String> = run
            .reports
            .iter()
            .map(|(e, r)| format!("{e}:{:.2}", r.rag_accuracy_1shot))
            .collect();
        println!(
            "{:<16} final ir {:.3} rag {:.3}  [{}]  ({:.1}s, {} steps)",
            arm.name(),
            run.final_report().ir_accuracy_at_1,
            run.final_report().rag_accuracy_1shot,
            curve.join(" "),
            t.elapsed().as_secs_f64(),
            run.outputs.steps,
        );
        if arm == Arm::OfflineOnline {
            let sub = evaluate_arm(arm, &run.outputs.params, &config, &inputs, &misleading, None)?;
            println!(
                "  -> misleading subset: ir {:.3} rag {:.3}",
                sub.ir_accuracy_at_1, sub.rag_accuracy_1shot
            );
            let on_train =
                evaluate_arm(arm, &run.outputs.params, &config, &inputs, &world.train_queries, None)?;
            println!("  -> train-set rag {:.3}", on_train.rag_accuracy_1shot);
            let losses: Vec<String> = run
                .outputs
                .metrics_lines
                .iter()
                .step_by(8)
                .map(|l| {
                    let v: serde_json::Value = serde_json::from_str(l).unwrap();
                    format!("{:.2}", v["loss"].as_f64().unwrap())
                })
                .collect();
            println!("  -> loss curve: {}", losses.join(" "));
        }
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
