//! Subcommand implementations.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use ibrec::checkpoint::{self, Checkpoint};
use ibrec::config::RunConfig;
use ibrec::encoder::mad;
use ibrec::eval::{group_eval, rank_metrics, run_ablation, run_noise_study, run_sweep};
use ibrec::graph::{self, ingest, normalize_adjacency, split, InteractionGraph};
use ibrec::trainer::{train as train_model, EpochRecord};

use crate::error::CliError;
use crate::reports::{metric_cells, metric_columns, Report};
use crate::{Protocol, OUTPUT_DIR_VAR};

fn open_dataset(path: &Path) -> Result<InteractionGraph, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::input(format!("cannot open dataset {}: {e}", path.display())))?;
    Ok(ingest(BufReader::new(file))?)
}

/// Loads a run configuration, applies the output-directory override, and
/// checks it.
fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let mut run = RunConfig::load(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_VAR) {
        run.data.output_dir = PathBuf::from(dir);
    }
    run.validate()?;
    if run.data.dataset.as_os_str().is_empty() {
        return Err(CliError::input("config is missing the data dataset path"));
    }
    Ok(run)
}

fn ensure_output_dir(run: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&run.data.output_dir).map_err(|e| {
        CliError::input(format!(
            "cannot create output directory {}: {e}",
            run.data.output_dir.display()
        ))
    })
}

pub fn stats(path: &Path) -> Result<(), CliError> {
    let graph = open_dataset(path)?;
    let s = graph::stats(&graph);
    println!("users\titems\tinteractions\tdensity");
    println!("{}\t{}\t{}\t{:.1e}", s.users, s.items, s.interactions, s.density);
    Ok(())
}

pub fn train(config_path: &Path) -> Result<(), CliError> {
    let run = load_config(config_path)?;
    let graph = open_dataset(&run.data.dataset)?;
    ensure_output_dir(&run)?;

    for &seed in &run.seeds {
        let mut cfg = run.train.clone();
        cfg.seed = seed;
        let (train_graph, _) = split(&graph, run.data.test_fraction, seed)?;
        let outcome = train_model(&train_graph, &cfg)?;

        let log_path = run.data.output_dir.join(format!("train-log-seed{seed}.tsv"));
        let mut log_file = File::create(&log_path)?;
        writeln!(log_file, "{}", EpochRecord::TSV_HEADER)?;
        for record in &outcome.log {
            writeln!(log_file, "{}", record.to_tsv())?;
        }

        let ckpt_run = RunConfig { seeds: vec![seed], train: cfg, ..run.clone() };
        let ckpt_path = run.data.output_dir.join(format!("checkpoint-seed{seed}.txt"));
        checkpoint::save_file(&Checkpoint { run: ckpt_run, params: outcome.params }, &ckpt_path)?;

        let last = outcome.log.last().expect("at least one epoch");
        println!(
            "seed {seed}: {} epochs, final loss {}, checkpoint {}",
            outcome.log.len(),
            last.l_total,
            ckpt_path.display()
        );
    }
    Ok(())
}

pub fn eval(checkpoint_path: &Path) -> Result<(), CliError> {
    let ckpt = checkpoint::load_file(checkpoint_path)?;
    let graph = open_dataset(&ckpt.run.data.dataset)?;
    if graph.n_users() != ckpt.params.n_users || graph.n_items() != ckpt.params.n_items {
        return Err(CliError::input(format!(
            "checkpoint was trained on {}x{} nodes but the dataset has {}x{}",
            ckpt.params.n_users,
            ckpt.params.n_items,
            graph.n_users(),
            graph.n_items()
        )));
    }
    let (train_graph, holdout) =
        split(&graph, ckpt.run.data.test_fraction, ckpt.run.train.seed)?;
    let adjacency = normalize_adjacency(&train_graph);
    let embeddings = ckpt.params.final_embeddings(&adjacency)?;
    let ks = &ckpt.run.protocol.eval_ks;
    let report = rank_metrics(&embeddings, &train_graph, &holdout, ks)?;
    let spread = mad(&embeddings)?;

    let variant = checkpoint_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    println!("variant\tgroup\tmetric\tvalue");
    for (k, v) in &report.recall {
        println!("{variant}\tall\trecall@{k}\t{v}");
    }
    for (k, v) in &report.ndcg {
        println!("{variant}\tall\tndcg@{k}\t{v}");
    }
    println!("{variant}\tall\tmad\t{spread}");
    println!("{variant}\tall\tevaluated-users\t{}", report.evaluated_users);
    println!("{variant}\tall\tskipped-users\t{}", report.skipped_users);
    Ok(())
}

pub fn experiment(protocol: Protocol, config_path: &Path) -> Result<(), CliError> {
    let run = load_config(config_path)?;
    let graph = open_dataset(&run.data.dataset)?;
    ensure_output_dir(&run)?;
    let ks = &run.protocol.eval_ks;

    let (name, report) = match protocol {
        Protocol::Ablation => ("ablation", ablation_report(&run, &graph, ks)?),
        Protocol::Noise => ("noise", noise_report(&run, &graph, ks)?),
        Protocol::Groups => ("groups", groups_report(&run, &graph, ks)?),
        Protocol::HyperparamSweep => {
            ("hyperparam-sweep", sweep_report(&run, &graph, ks)?)
        }
    };
    let path = run.data.output_dir.join(format!("report-{name}.tsv"));
    report.write_tsv(&path)?;
    report.print_aligned();
    println!("report written to {}", path.display());
    Ok(())
}

fn ablation_report(
    run: &RunConfig,
    graph: &InteractionGraph,
    ks: &[usize],
) -> Result<Report, CliError> {
    let mut header = vec!["seed".to_string(), "variant".to_string()];
    header.extend(metric_columns(ks));
    header.push("mad".into());
    let mut report = Report::new(header);
    for &seed in &run.seeds {
        let mut cfg = run.train.clone();
        cfg.seed = seed;
        let (train_graph, holdout) = split(graph, run.data.test_fraction, seed)?;
        let outcomes = run_ablation(&train_graph, &holdout, &cfg, &run.protocol.variants, ks)?;
        for o in outcomes {
            let mut row = vec![seed.to_string(), o.variant.to_string()];
            row.extend(metric_cells(&o.report, ks));
            row.push(o.mad.to_string());
            report.push(row);
        }
    }
    Ok(report)
}

fn noise_report(
    run: &RunConfig,
    graph: &InteractionGraph,
    ks: &[usize],
) -> Result<Report, CliError> {
    let mut header = vec!["seed".to_string(), "variant".to_string(), "ratio".to_string()];
    header.extend(metric_columns(ks));
    header.extend(ks.iter().map(|k| format!("deg-recall@{k}")));
    let mut report = Report::new(header);
    for &seed in &run.seeds {
        let mut cfg = run.train.clone();
        cfg.seed = seed;
        let (train_graph, holdout) = split(graph, run.data.test_fraction, seed)?;
        let study = run_noise_study(
            &train_graph,
            &holdout,
            &cfg,
            &run.protocol.variants,
            &run.protocol.noise_ratios,
            ks,
            seed,
        )?;
        for cell in study.cells {
            let mut row =
                vec![seed.to_string(), cell.variant.to_string(), cell.ratio.to_string()];
            row.extend(metric_cells(&cell.report, ks));
            row.extend(ks.iter().map(|k| cell.degradation[k].to_string()));
            report.push(row);
        }
    }
    Ok(report)
}

fn groups_report(
    run: &RunConfig,
    graph: &InteractionGraph,
    ks: &[usize],
) -> Result<Report, CliError> {
    let mut header = vec![
        "seed".to_string(),
        "axis".to_string(),
        "bucket".to_string(),
        "members".to_string(),
    ];
    header.extend(metric_columns(ks));
    let mut report = Report::new(header);
    for &seed in &run.seeds {
        let mut cfg = run.train.clone();
        cfg.seed = seed;
        let (train_graph, holdout) = split(graph, run.data.test_fraction, seed)?;
        let outcome = train_model(&train_graph, &cfg)?;
        let adjacency = normalize_adjacency(&train_graph);
        let embeddings = outcome.params.final_embeddings(&adjacency)?;
        for &axis in &run.protocol.group_axes {
            let groups = group_eval(
                &embeddings,
                &train_graph,
                &holdout,
                axis,
                &run.protocol.group_boundaries,
                ks,
            )?;
            for g in groups {
                let mut row = vec![
                    seed.to_string(),
                    axis.to_string(),
                    g.label(),
                    g.members.to_string(),
                ];
                row.extend(ks.iter().map(|k| g.recall[k].to_string()));
                row.extend(ks.iter().map(|k| g.ndcg[k].to_string()));
                report.push(row);
            }
        }
    }
    Ok(report)
}

fn sweep_report(
    run: &RunConfig,
    graph: &InteractionGraph,
    ks: &[usize],
) -> Result<Report, CliError> {
    let mut header =
        vec!["seed".to_string(), "parameter".to_string(), "value".to_string()];
    header.extend(metric_columns(ks));
    let mut report = Report::new(header);
    for &seed in &run.seeds {
        let mut cfg = run.train.clone();
        cfg.seed = seed;
        let (train_graph, holdout) = split(graph, run.data.test_fraction, seed)?;
        let cells = run_sweep(
            &train_graph,
            &holdout,
            &cfg,
            run.protocol.sweep_parameter,
            &run.protocol.sweep_values,
            ks,
        )?;
        for cell in cells {
            let mut row = vec![
                seed.to_string(),
                run.protocol.sweep_parameter.to_string(),
                cell.value.to_string(),
            ];
            row.extend(metric_cells(&cell.report, ks));
            report.push(row);
        }
    }
    Ok(report)
}
