use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use admp::centrality::Metric;
use admp::dataset::{
    build_synthetic, depth_sweep, load_dataset, planted_source, save_dataset, sweep_config,
    write_sweep_csv, Dataset, PlantedSpec, SyntheticSpec,
};
use admp::graph::{NormAdjacency, SplitKind};
use admp::harness::{evaluate_policy, prediction_cube, run_seeds, SeedRun};
use admp::model::{load_checkpoint, save_checkpoint, Flavor};
use admp::policy::{apply_policy, write_exit_trace};
use admp::report::{mean_std, percent_pm, Table};
use admp::train::{write_metrics_csv, Paradigm, TrainConfig};
use admp::Error;

#[derive(Parser)]
#[command(
    name = "admp",
    version,
    about = "Adaptive-depth message passing for node classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over a list of seeds and report per-exit test accuracy
    Train(TrainArgs),
    /// Learn centrality exit policies from trained checkpoints
    Policy(PolicyArgs),
    /// Export a centrality vector as CSV
    Centrality(CentralityArgs),
    /// Build a merged sparse/dense synthetic dataset
    Synth(SynthArgs),
    /// Accuracy per region of standalone networks of increasing depth
    Sweep(SweepArgs),
}

#[derive(Args)]
struct DatasetArg {
    /// Dataset directory, or a name looked up under $ADMP_DATA_DIR
    #[arg(long)]
    dataset: String,
}

#[derive(Args)]
struct OutArg {
    /// Output directory
    #[arg(long, env = "ADMP_OUT_DIR", default_value = "admp-out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    dataset: DatasetArg,
    #[command(flatten)]
    out: OutArg,
    /// TOML file with training settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    paradigm: Option<Paradigm>,
    #[arg(long)]
    flavor: Option<Flavor>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Number of seeds
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
}

#[derive(Args)]
struct PolicyArgs {
    #[command(flatten)]
    dataset: DatasetArg,
    /// Output directory of `admp train`; every seed-* checkpoint in it is used
    #[arg(long)]
    run: PathBuf,
    /// degree, kcore, pagerank, walk or all
    #[arg(long, default_value = "kcore")]
    metric: String,
    /// Candidate cluster counts; the best on validation is kept
    #[arg(long, value_delimiter = ',', default_value = "5")]
    clusters: Vec<usize>,
}

#[derive(Args)]
struct CentralityArgs {
    #[command(flatten)]
    dataset: DatasetArg,
    #[arg(long, default_value = "kcore")]
    metric: Metric,
    /// CSV path; stdout if absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Source dataset directory (or name), or `planted`
    #[arg(long, default_value = "planted")]
    source: String,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Core number at or above which a node is dense (default: median)
    #[arg(long)]
    threshold: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset with region masks; a planted synthetic graph if absent
    #[arg(long)]
    dataset: Option<String>,
    #[command(flatten)]
    out: OutArg,
    #[arg(long, default_value_t = 10)]
    max_depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Nodes in the planted synthetic graph
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

fn resolve_dataset(name: &str) -> Result<PathBuf, Error> {
    let direct = PathBuf::from(name);
    if direct.is_dir() {
        return Ok(direct);
    }
    if let Some(root) = std::env::var_os("ADMP_DATA_DIR") {
        let under = Path::new(&root).join(name);
        if under.is_dir() {
            return Ok(under);
        }
    }
    // let the loader report the missing manifest with its path
    Ok(direct)
}

fn open_dataset(name: &str) -> Result<Dataset, Error> {
    let dir = resolve_dataset(name)?;
    info!("loading {}", dir.display());
    Ok(load_dataset(&dir)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn dataset_stem(name: &str) -> String {
    Path::new(name)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_toml(&fs::read_to_string(path)?)?,
        None => TrainConfig::preset(&dataset_stem(&args.dataset.dataset)).unwrap_or_default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(
        paradigm,
        flavor,
        layers,
        hidden,
        lr,
        dropout,
        weight_decay,
        epochs,
        patience
    );
    cfg.validate()?;
    Ok(cfg)
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let cfg = train_config(&args)?;
    if args.seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let ds = open_dataset(&args.dataset.dataset)?;
    let g = &ds.graph;
    let seeds: Vec<u64> = (args.first_seed..args.first_seed + args.seeds).collect();
    info!(
        "{} {} L={} hidden={} lr={} dropout={} on {} seeds",
        cfg.paradigm,
        cfg.flavor,
        cfg.layers,
        cfg.hidden,
        cfg.lr,
        cfg.dropout,
        seeds.len()
    );
    let runs = run_seeds(g, &cfg, &seeds)?;

    let out = &args.out.out;
    let mut long = String::from("seed,layer,split,accuracy\n");
    let mut by_layer = vec![[Vec::new(), Vec::new()]; cfg.layers + 1];
    let mut oracle = Vec::new();
    for run in &runs {
        let dir = seed_dir(out, run.seed);
        save_checkpoint(&run.params, run.seed, &dir.join("checkpoint"))?;
        let mut metrics = Vec::new();
        write_metrics_csv(&run.report.metrics, &mut metrics)?;
        write_file(&dir.join("metrics.csv"), &metrics)?;
        let mut stages = Vec::new();
        run.report.ledger.write_csv(&mut stages)?;
        write_file(&dir.join("stages.csv"), &stages)?;
        for (i, split) in [SplitKind::Val, SplitKind::Test].into_iter().enumerate() {
            for (layer, acc) in run.layer_accuracy(g, split)?.into_iter().enumerate() {
                long.push_str(&format!("{},{layer},{},{acc}\n", run.seed, split.name()));
                by_layer[layer][i].push(acc);
            }
        }
        oracle.push(run.oracle(g, SplitKind::Test)?);
    }
    write_file(&out.join("accuracy.csv"), long.as_bytes())?;

    let mut table = Table::new(["layer", "val", "test"]);
    let mut csv = String::from("layer,val_mean,val_std,test_mean,test_std\n");
    for (layer, [val, test]) in by_layer.iter().enumerate() {
        table.push([layer.to_string(), percent_pm(val), percent_pm(test)]);
        let ((vm, vs), (tm, ts)) = (mean_std(val), mean_std(test));
        csv.push_str(&format!("{layer},{vm},{vs},{tm},{ts}\n"));
    }
    table.push(["oracle".to_string(), String::new(), percent_pm(&oracle)]);
    let (om, os) = mean_std(&oracle);
    csv.push_str(&format!("oracle,,,{om},{os}\n"));
    write_file(&out.join("per_layer.csv"), csv.as_bytes())?;
    print!("{}", table.render());
    Ok(())
}

fn load_runs(run_dir: &Path, ds: &Dataset) -> Result<Vec<SeedRun>, Error> {
    let mut seeds: Vec<u64> = fs::read_dir(run_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("seed-")?.parse().ok())
        .collect();
    seeds.sort_unstable();
    if seeds.is_empty() {
        return Err(Error::Usage(format!(
            "no seed-* checkpoints under {}",
            run_dir.display()
        )));
    }
    seeds
        .into_iter()
        .map(|seed| {
            let (params, saved_seed) =
                load_checkpoint(&seed_dir(run_dir, seed).join("checkpoint"))?;
            let adj = NormAdjacency::new(&ds.graph, params.flavor().norm_kind());
            let cube = prediction_cube(&params, &ds.graph, &adj)?;
            Ok(SeedRun {
                seed: saved_seed,
                params,
                report: Default::default(),
                cube,
            })
        })
        .collect()
}

fn cmd_policy(args: PolicyArgs) -> Result<(), Error> {
    let metrics: Vec<Metric> = if args.metric.eq_ignore_ascii_case("all") {
        Metric::ALL.to_vec()
    } else {
        vec![args.metric.parse()?]
    };
    if args.clusters.is_empty() || args.clusters.contains(&0) {
        return Err(Error::Usage("--clusters needs positive counts".into()));
    }
    let ds = open_dataset(&args.dataset.dataset)?;
    let g = &ds.graph;
    let runs = load_runs(&args.run, &ds)?;
    let test = g.mask(SplitKind::Test);

    let mut table = Table::new(["policy", "clusters", "test"]);
    let mut csv = String::from("seed,policy,clusters,val_accuracy,test_accuracy\n");
    for metric in metrics {
        let mut accs = Vec::new();
        let mut chosen = Vec::new();
        for run in &runs {
            let res = evaluate_policy(run, g, metric, &args.clusters)?;
            let dir = seed_dir(&args.run, run.seed);
            res.tuned
                .policy
                .save(&dir.join(format!("policy-{metric}.txt")))?;
            let outcome = apply_policy(&run.cube, &res.tuned.policy, &res.tuned.buckets)?;
            let mut trace = Vec::new();
            write_exit_trace(&outcome, &res.tuned.buckets, g.labels(), test, &mut trace)?;
            write_file(&dir.join(format!("exit-trace-{metric}.csv")), &trace)?;
            csv.push_str(&format!(
                "{},{metric},{},{},{}\n",
                run.seed, res.tuned.policy.n_buckets, res.tuned.val_accuracy, res.test_accuracy
            ));
            accs.push(res.test_accuracy);
            chosen.push(res.tuned.policy.n_buckets.to_string());
        }
        chosen.dedup();
        table.push([metric.to_string(), chosen.join("/"), percent_pm(&accs)]);
    }
    let mut oracle = Vec::new();
    for run in &runs {
        let acc = run.oracle(g, SplitKind::Test)?;
        csv.push_str(&format!("{},oracle,,,{acc}\n", run.seed));
        oracle.push(acc);
    }
    table.push(["oracle".to_string(), String::new(), percent_pm(&oracle)]);
    write_file(&args.run.join("policy.csv"), csv.as_bytes())?;
    print!("{}", table.render());
    Ok(())
}

fn cmd_centrality(args: CentralityArgs) -> Result<(), Error> {
    let ds = open_dataset(&args.dataset.dataset)?;
    let cv = args.metric.compute(&ds.graph)?;
    let mut csv = String::from("node_id,value\n");
    for (v, x) in cv.values.iter().enumerate() {
        csv.push_str(&format!("{v},{x}\n"));
    }
    match &args.out {
        Some(path) => write_file(path, csv.as_bytes()),
        None => Ok(io::stdout().write_all(csv.as_bytes())?),
    }
}

fn planted_synthetic(n: usize, seed: u64, threshold: Option<usize>) -> Result<Dataset, Error> {
    // the source holds 1.5x the requested nodes per region so sampling has room
    let per_region = (n / 2 * 3).div_ceil(2).max(2);
    let source = planted_source(&PlantedSpec {
        n_dense: per_region,
        n_sparse: per_region,
        seed,
        ..PlantedSpec::default()
    })?;
    let spec = SyntheticSpec {
        n_total: n,
        threshold,
        seed,
        ..SyntheticSpec::default()
    };
    Ok(build_synthetic(&source, &spec)?)
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let ds = if args.source == "planted" {
        planted_synthetic(args.n, args.seed, args.threshold)?
    } else {
        let source = open_dataset(&args.source)?;
        let spec = SyntheticSpec {
            n_total: args.n,
            threshold: args.threshold,
            seed: args.seed,
            ..SyntheticSpec::default()
        };
        let mut ds = build_synthetic(&source.graph, &spec)?;
        ds.name = format!("synthetic-{}", dataset_stem(&args.source));
        ds
    };
    let manifest = save_dataset(&ds, &args.out)?;
    println!(
        "{}: {} nodes, {} edges, {} features, {} classes",
        args.out.display(),
        manifest.n_nodes,
        manifest.n_edges,
        manifest.n_features,
        manifest.n_classes
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Error> {
    let ds = match &args.dataset {
        Some(name) => open_dataset(name)?,
        None => planted_synthetic(args.n, args.seed, None)?,
    };
    let mut cfg = sweep_config(args.seed);
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(hidden, lr, dropout, epochs, patience);
    cfg.validate()?;
    let rows = depth_sweep(&ds, args.max_depth, &cfg)?;
    let mut csv = Vec::new();
    write_sweep_csv(&rows, &mut csv)?;
    let path = args.out.out.join("sweep.csv");
    write_file(&path, &csv)?;

    let regions: Vec<String> = ds
        .regions
        .as_ref()
        .map(|r| r.names.clone())
        .unwrap_or_default();
    let mut table = Table::new(std::iter::once("depth".to_string()).chain(regions.iter().cloned()));
    for chunk in rows.chunks(regions.len().max(1)) {
        let mut row = vec![chunk[0].depth.to_string()];
        row.extend(chunk.iter().map(|r| format!("{:.2}", 100.0 * r.accuracy)));
        table.push(row);
    }
    print!("{}", table.render());
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Policy(a) => cmd_policy(a),
        Command::Centrality(a) => cmd_centrality(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
