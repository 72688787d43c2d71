//! Command line front end. Every command reads one TOML or JSON config
//! (`--config`), applies its flag overrides, prints a JSON result on stdout
//! and exits 0. Failures print a structured error on stderr and exit 1;
//! usage mistakes exit 2.

mod config;
mod pipeline;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use relana::agent::{AgentClient, HttpAgentClient};
use relana::base::{build_base_topology, init_base, BasePool};
use relana::dispatch::{decide, update_ema, Decision, PerfRegistry};
use relana::model::{build_topology, init_bundle, ModelBundle};
use relana::profile::{
    catalog_summary, derive_data_profile, emit_sql_fragments, validate_data_profile,
    validate_task_profile, DeriveConfig, TaskType,
};
use relana::report::{dataset_hash, explain, synthesize_report, top_k, ReportInputs};
use relana::store::{format_timestamp, load_dataset};
use relana::synth::generate;
use relana::train::{
    apply_hybrid_freeze, evaluate_base, evaluate_model, final_report_json, metric_as_score,
    predict_rows_model, pretrain_shared, sigmoid, train_base, train_task, train_task_lr_search,
    EpochStat, LR_GRID,
};

use config::RunConfig;
use pipeline::{eval_seed, load_checkpoint, metric_name, split_rows, write_json};

#[derive(Parser)]
#[command(name = "relana", version, about = "Relational data augmentation for tabular prediction")]
struct Cli {
    /// Run configuration file, TOML or JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset directory and print its catalog summary.
    Ingest {
        /// Directory with schema.json and the CSV files.
        dir: PathBuf,
    },
    /// Validate or derive profiles against the dataset catalog.
    Profile {
        #[command(subcommand)]
        action: ProfileCmd,
    },
    /// Probe every pooled base model and print the routing decision.
    Dispatch {
        /// Risk tolerance override.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Probe seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Self-supervised pretraining of the shared encoder stack.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and save the best checkpoint.
    Train(TrainArgs),
    /// Score rows with the saved checkpoint and write ranked predictions.
    Predict {
        /// Rows to score: train, valid, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output path override.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank context slots by mean recalibrated attention weight.
    Explain {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Assemble the markdown + JSON report pair.
    Report,
    /// Evaluate the saved checkpoint (or a pooled base model) on a split.
    Eval {
        #[arg(long, default_value = "valid")]
        split: String,
        /// Evaluate this pooled base model instead of the checkpoint.
        #[arg(long)]
        base: Option<String>,
        /// Record the resulting score into the dispatcher registry under
        /// this model id.
        #[arg(long)]
        record: Option<String>,
    },
    /// Generate a synthetic relational benchmark dataset.
    SynthData(SynthArgs),
}

#[derive(Subcommand)]
enum ProfileCmd {
    /// Check a task profile (and optionally a data profile) against the catalog.
    Validate {
        /// Task profile JSON; defaults to the configured task file.
        #[arg(long)]
        task: Option<PathBuf>,
        /// Data profile JSON to validate as well.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Derive a data profile from the catalog by walking key relations.
    Derive {
        /// Also print SQL fragments equivalent to the slice plan.
        #[arg(long)]
        emit_sql: bool,
        /// Write the derived profile here in addition to printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Train the configured [base] model alone and register it in the pool.
    #[arg(long)]
    base_only: bool,
    /// Wrap this pooled base model inside the relational model.
    #[arg(long, conflicts_with = "base_only")]
    with_base: Option<String>,
    /// Initialize encoder and message-passing weights from this pretrained
    /// checkpoint and keep them frozen.
    #[arg(long, conflicts_with = "base_only")]
    from_pretrained: Option<PathBuf>,
    /// Grid-search the learning rate instead of using the configured one.
    #[arg(long)]
    lr_search: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Stream per-epoch stats to stderr.
    #[arg(long)]
    progress: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write the dataset into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Where the label signal lives: target_only or neighbor_aggregate.
    #[arg(long)]
    signal: Option<String>,
    /// classification or regression.
    #[arg(long)]
    task: Option<String>,
    /// Add a second child relation carrying only noise.
    #[arg(long)]
    extra_relation: bool,
    /// Fraction of child rows timestamped after their seed's reference time.
    #[arg(long)]
    future_fraction: Option<f64>,
    #[arg(long)]
    min_orders: Option<usize>,
    #[arg(long)]
    max_orders: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let causes: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
            let payload = json!({"error": {"message": err.to_string(), "causes": causes}});
            eprintln!("{payload:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { dir } => cmd_ingest(&dir),
        Command::Profile { action } => match action {
            ProfileCmd::Validate { task, data } => cmd_profile_validate(&cfg, task, data),
            ProfileCmd::Derive { emit_sql, out } => cmd_profile_derive(&cfg, emit_sql, out),
        },
        Command::Dispatch { epsilon, seed } => cmd_dispatch(&cfg, epsilon, seed),
        Command::Pretrain { steps, seed } => cmd_pretrain(&cfg, steps, seed),
        Command::Train(args) => cmd_train(&cfg, args),
        Command::Predict { split, out } => cmd_predict(&cfg, &split, out),
        Command::Explain { split } => cmd_explain(&cfg, &split),
        Command::Report => cmd_report(&cfg),
        Command::Eval { split, base, record } => cmd_eval(&cfg, &split, base, record),
        Command::SynthData(args) => cmd_synth(&cfg, args),
    }
}

fn emit(value: &serde_json::Value) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if writeln!(out, "{value:#}").is_err() {
        // The reader went away (output piped into head and the like).
        std::process::exit(0);
    }
}

fn cmd_ingest(dir: &std::path::Path) -> Result<()> {
    let ds = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let rows: BTreeMap<&str, usize> =
        ds.tables.iter().map(|(name, t)| (name.as_str(), t.rows.len())).collect();
    emit(&json!({
        "catalog": catalog_summary(&ds.catalog),
        "rows": rows,
        "dangling_fks": ds.integrity.dangling,
    }));
    Ok(())
}

fn cmd_profile_validate(
    cfg: &RunConfig,
    task: Option<PathBuf>,
    data: Option<PathBuf>,
) -> Result<()> {
    let ds = load_dataset(&cfg.data_dir)
        .with_context(|| format!("loading dataset {}", cfg.data_dir.display()))?;
    let task_path = task.unwrap_or_else(|| cfg.task_file());
    let task_json: serde_json::Value = pipeline::read_json(&task_path)?;
    let profile = validate_task_profile(&task_json, &ds.catalog)
        .with_context(|| format!("task profile {}", task_path.display()))?;
    let mut out = json!({
        "task": profile,
        "signature": profile.signature(),
    });
    if let Some(path) = data {
        let data_json: serde_json::Value = pipeline::read_json(&path)?;
        let dp = validate_data_profile(&data_json, &ds.catalog)
            .with_context(|| format!("data profile {}", path.display()))?;
        out["data_profile"] = serde_json::to_value(&dp)?;
    }
    emit(&out);
    Ok(())
}

fn cmd_profile_derive(cfg: &RunConfig, emit_sql: bool, out: Option<PathBuf>) -> Result<()> {
    let ds = load_dataset(&cfg.data_dir)
        .with_context(|| format!("loading dataset {}", cfg.data_dir.display()))?;
    let task_path = cfg.task_file();
    let task_json: serde_json::Value = pipeline::read_json(&task_path)?;
    let task = validate_task_profile(&task_json, &ds.catalog)
        .with_context(|| format!("task profile {}", task_path.display()))?;
    let dc = DeriveConfig { max_hops: cfg.derive.max_hops, text_limit: cfg.derive.text_limit };
    let (profile, warnings) = derive_data_profile(&task, &ds, &dc)?;
    let mut payload = json!({
        "data_profile": profile,
        "warnings": warnings,
    });
    if emit_sql {
        payload["sql"] = serde_json::to_value(emit_sql_fragments(&ds.catalog, &profile)?)?;
    }
    if let Some(path) = out {
        write_json(&path, &serde_json::to_value(&profile)?)?;
    }
    emit(&payload);
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, args: SynthArgs) -> Result<()> {
    let mut scfg = cfg.synth.clone();
    if let Some(u) = args.users {
        scfg.users = u;
    }
    if let Some(s) = args.seed {
        scfg.seed = s;
    }
    if let Some(sig) = &args.signal {
        scfg.signal = serde_json::from_value(json!(sig))
            .map_err(|_| anyhow!("signal {sig:?}: expected target_only or neighbor_aggregate"))?;
    }
    if let Some(t) = &args.task {
        scfg.task = serde_json::from_value(json!(t))
            .map_err(|_| anyhow!("task {t:?}: expected classification or regression"))?;
    }
    if args.extra_relation {
        scfg.extra_relation = true;
    }
    if let Some(f) = args.future_fraction {
        scfg.future_fraction = f;
    }
    if let Some(m) = args.min_orders {
        scfg.min_orders = m;
    }
    if let Some(m) = args.max_orders {
        scfg.max_orders = m;
    }
    let ds = generate(&scfg);
    ds.write_to_dir(&args.out)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    let train_cutoff = format_timestamp(ds.train_cutoff);
    let valid_cutoff = format_timestamp(ds.valid_cutoff);
    write_json(
        &args.out.join("splits.json"),
        &json!({"train_cutoff": train_cutoff, "valid_cutoff": valid_cutoff}),
    )?;
    emit(&json!({
        "dir": args.out,
        "task_name": ds.task_profile["task_name"],
        "users": scfg.users,
        "train_cutoff": train_cutoff,
        "valid_cutoff": valid_cutoff,
    }));
    Ok(())
}

fn cmd_dispatch(cfg: &RunConfig, epsilon: Option<f64>, seed: Option<u64>) -> Result<()> {
    let wb = pipeline::open(cfg)?;
    let sets = pipeline::splits(cfg, &wb)?;
    let pool = BasePool::open(&cfg.pool_dir())?;
    let registry = PerfRegistry::load_or_default(&cfg.registry_path())?;
    let decision = decide(
        &pool,
        &registry,
        wb.slice.target(),
        &sets.train,
        &wb.labels,
        wb.task.task_type,
        &wb.task.signature(),
        epsilon.unwrap_or(cfg.dispatch.epsilon),
        seed.unwrap_or(cfg.train.seed),
    )?;
    let value = serde_json::to_value(&decision)?;
    write_json(&cfg.decision_path(), &value)?;
    emit(&value);
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, steps: Option<usize>, seed: Option<u64>) -> Result<()> {
    let wb = pipeline::open(cfg)?;
    let mut pcfg = cfg.pretrain.clone();
    if let Some(s) = steps {
        pcfg.steps = s;
    }
    if let Some(s) = seed {
        pcfg.seed = s;
    }
    let topo = build_topology(&wb.slice, &wb.rgraph, cfg.model, None, None, None)?;
    let mut bundle = init_bundle(topo, pcfg.seed)?;
    let outcome = pretrain_shared(&mut bundle, &[(&wb.slice, &wb.rgraph)], &pcfg)?;
    let path = cfg.pretrained_path();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    bundle.save(&path)?;
    emit(&json!({
        "checkpoint": path,
        "steps": pcfg.steps,
        "initial_loss": outcome.initial_loss,
        "final_loss": outcome.final_loss,
    }));
    Ok(())
}

fn cmd_train(cfg: &RunConfig, args: TrainArgs) -> Result<()> {
    let wb = pipeline::open(cfg)?;
    let sets = pipeline::splits(cfg, &wb)?;
    let task = wb.task.task_type;
    let mut tcfg = cfg.train.clone();
    if let Some(s) = args.seed {
        tcfg.seed = s;
    }
    if let Some(lr) = args.lr {
        tcfg.lr = lr;
    }
    if let Some(n) = args.epochs {
        tcfg.max_epochs = n;
    }
    let mut on_epoch = |stat: &EpochStat| {
        eprintln!("{}", relana::train::epoch_json(stat));
    };
    let progress: Option<&mut dyn FnMut(&EpochStat)> =
        if args.progress { Some(&mut on_epoch) } else { None };

    if args.base_only {
        let base_cfg = cfg
            .base
            .clone()
            .ok_or_else(|| anyhow!("train --base-only needs a [base] section in the config"))?;
        let id = base_cfg.id.clone();
        let topo =
            build_base_topology(&wb.slice, base_cfg, Some(task), Some(&wb.task.target_column))?;
        let mut bundle = init_base(topo, tcfg.seed);
        let outcome = train_base(&mut bundle, &wb.slice, &wb.labels, &sets, task, &tcfg, progress)?;
        let mut pool = BasePool::open(&cfg.pool_dir())?;
        if pool.list().iter().any(|e| e.id == id) {
            pool.update(&bundle, Some(&wb.task.task_name))?;
        } else {
            pool.register(&bundle, Some(&wb.task.task_name))?;
        }
        let report = final_report_json(&wb.task.signature(), &outcome, &tcfg);
        write_json(&cfg.artifacts.join(format!("train-base-{id}.json")), &report)?;
        emit(&report);
        return Ok(());
    }

    let mut attach_bundle = None;
    let attach = match &args.with_base {
        Some(id) => {
            let pool = BasePool::open(&cfg.pool_dir())?;
            let b = pool.load(id).with_context(|| format!("loading base {id:?} from the pool"))?;
            let a = b.topology.attach();
            attach_bundle = Some(b);
            Some(a)
        }
        None => None,
    };
    let topo = build_topology(
        &wb.slice,
        &wb.rgraph,
        cfg.model,
        Some(task),
        Some(&wb.task.target_column),
        attach,
    )?;
    let mut bundle = init_bundle(topo, tcfg.seed)?;
    if let Some(b) = &attach_bundle {
        b.merge_into(&mut bundle.store, true);
    }
    let pretrained = match &args.from_pretrained {
        Some(path) => {
            let pre = ModelBundle::load(path)
                .with_context(|| format!("loading pretrained {}", path.display()))?;
            let copied = bundle.store.load_values_from(&pre.store)?;
            Some(copied)
        }
        None => None,
    };
    apply_hybrid_freeze(&mut bundle.store, pretrained.is_some());

    let base_topo = attach_bundle.as_ref().map(|b| &b.topology);
    let outcome = if args.lr_search {
        train_task_lr_search(
            &mut bundle,
            base_topo,
            &wb.slice,
            &wb.rgraph,
            &wb.labels,
            &sets,
            task,
            &tcfg,
            &LR_GRID,
        )?
    } else {
        train_task(
            &mut bundle,
            base_topo,
            &wb.slice,
            &wb.rgraph,
            &wb.labels,
            &sets,
            task,
            &tcfg,
            progress,
        )?
    };
    let ckpt = cfg.checkpoint_path();
    if let Some(dir) = ckpt.parent() {
        std::fs::create_dir_all(dir)?;
    }
    bundle.save(&ckpt)?;
    let mut report = final_report_json(&wb.task.signature(), &outcome, &tcfg);
    report["checkpoint"] = json!(ckpt);
    if let Some(copied) = pretrained {
        report["pretrained_params"] = json!(copied);
    }
    write_json(&cfg.train_report_path(), &report)?;
    emit(&report);
    Ok(())
}

/// Scores in reporting space: probabilities for classification, raw outputs
/// for regression.
fn scored_outputs(task: TaskType, raw: Vec<f64>) -> Vec<f64> {
    match task {
        TaskType::Classification => raw.into_iter().map(sigmoid).collect(),
        TaskType::Regression => raw,
    }
}

fn cmd_predict(cfg: &RunConfig, split: &str, out: Option<PathBuf>) -> Result<()> {
    let wb = pipeline::open(cfg)?;
    let sets = pipeline::splits(cfg, &wb)?;
    let rows = split_rows(&sets, split)?;
    let (bundle, base) = load_checkpoint(cfg)?;
    let raw = predict_rows_model(
        &bundle,
        base.as_ref(),
        &wb.slice,
        &wb.rgraph,
        &rows,
        &cfg.train.sampler,
        eval_seed(cfg),
    )?;
    let scores = scored_outputs(wb.task.task_type, raw);
    let ranked = top_k(wb.slice.target(), &rows, &scores, rows.len());
    let payload = json!({
        "task": wb.task.task_name,
        "split": split,
        "score_space": match wb.task.task_type {
            TaskType::Classification => "probability",
            TaskType::Regression => "value",
        },
        "predictions": ranked,
    });
    let path = out.unwrap_or_else(|| cfg.predictions_path());
    write_json(&path, &payload)?;
    emit(&json!({"written": path, "rows": rows.len()}));
    Ok(())
}

fn cmd_explain(cfg: &RunConfig, split: &str) -> Result<()> {
    let wb = pipeline::open(cfg)?;
    let sets = pipeline::splits(cfg, &wb)?;
    let rows = split_rows(&sets, split)?;
    let (bundle, base) = load_checkpoint(cfg)?;
    let imps = explain(
        &bundle,
        base.as_ref(),
        &wb.slice,
        &wb.rgraph,
        &rows,
        &cfg.train.sampler,
        eval_seed(cfg),
    )?;
    let payload = json!({
        "task": wb.task.task_name,
        "split": split,
        "importances": imps,
    });
    write_json(&cfg.importances_path(), &payload)?;
    emit(&payload);
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, split: &str, base: Option<String>, record: Option<String>) -> Result<()> {
    let wb = pipeline::open(cfg)?;
    let sets = pipeline::splits(cfg, &wb)?;
    let rows = split_rows(&sets, split)?;
    let task = wb.task.task_type;
    let value = match &base {
        Some(id) => {
            let pool = BasePool::open(&cfg.pool_dir())?;
            let bundle = pool.load(id).with_context(|| format!("loading base {id:?}"))?;
            evaluate_base(&bundle, wb.slice.target(), &rows, &wb.labels, task)?
        }
        None => {
            let (bundle, base_topo) = load_checkpoint(cfg)?;
            evaluate_model(
                &bundle,
                base_topo.as_ref(),
                &wb.slice,
                &wb.rgraph,
                &rows,
                &wb.labels,
                task,
                &cfg.train.sampler,
                eval_seed(cfg),
            )?
        }
    };
    let mut payload = json!({
        "split": split,
        "metric": metric_name(task),
        "value": value,
    });
    if let Some(model_id) = record {
        let score = metric_as_score(task, value);
        let path = cfg.registry_path();
        let mut registry = PerfRegistry::load_or_default(&path)?;
        update_ema(&mut registry, &model_id, &wb.task.signature(), score, cfg.dispatch.beta)?;
        registry.save(&path)?;
        payload["recorded_score"] = json!(score);
        payload["registry"] = json!(path);
    }
    emit(&payload);
    Ok(())
}

fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let wb = pipeline::open(cfg)?;
    let sets = pipeline::splits(cfg, &wb)?;
    let (bundle, base) = load_checkpoint(cfg)?;
    let task = wb.task.task_type;
    let seed = eval_seed(cfg);

    let mut metrics = BTreeMap::new();
    for (name, rows) in [("valid", &sets.valid), ("test", &sets.test)] {
        if rows.iter().any(|&r| wb.labels[r].is_some()) {
            let value = evaluate_model(
                &bundle,
                base.as_ref(),
                &wb.slice,
                &wb.rgraph,
                rows,
                &wb.labels,
                task,
                &cfg.train.sampler,
                seed,
            )?;
            metrics.insert(format!("{}_{name}", metric_name(task)), value);
        }
    }

    let rows = split_rows(&sets, &cfg.report.split)?;
    let raw = predict_rows_model(
        &bundle,
        base.as_ref(),
        &wb.slice,
        &wb.rgraph,
        &rows,
        &cfg.train.sampler,
        seed,
    )?;
    let scores = scored_outputs(task, raw);
    let predictions = top_k(wb.slice.target(), &rows, &scores, cfg.report.top_k);
    let importances = explain(
        &bundle,
        base.as_ref(),
        &wb.slice,
        &wb.rgraph,
        &rows,
        &cfg.train.sampler,
        seed,
    )?;

    let decision: Option<Decision> = if cfg.decision_path().exists() {
        Some(pipeline::read_json(&cfg.decision_path())?)
    } else {
        None
    };
    let hash = dataset_hash(&wb.slice);
    let inputs = ReportInputs {
        task: &wb.task,
        decision: decision.as_ref(),
        metrics: &metrics,
        predictions: &predictions,
        importances: &importances,
        dataset_hash: &hash,
        seed: cfg.train.seed,
        config: serde_json::to_value(cfg)?,
    };
    let client = HttpAgentClient::from_env().ok();
    let report =
        synthesize_report(&inputs, client.as_ref().map(|c| c as &dyn AgentClient));

    let md_path = cfg.artifacts.join(format!("{}.report.md", wb.task.task_name));
    let json_path = cfg.artifacts.join(format!("{}.report.json", wb.task.task_name));
    if let Some(dir) = md_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&md_path, &report.markdown)
        .with_context(|| format!("writing {}", md_path.display()))?;
    write_json(&json_path, &report.json)?;
    emit(&json!({"markdown": md_path, "json": json_path}));
    Ok(())
}
