//! Command-line surface: dataset generation, training, evaluation,
//! prediction, benchmarking, and the dense-oracle self-check.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical failure.

use clap::{Args, Parser, Subcommand};
use ssgpvae::config::{ExperimentConfig, Task};
use ssgpvae::data::{
    eval_view, gen_rotating, gen_spatiotemporal, load_dataset, save_dataset, DataLayout,
};
use ssgpvae::error::{Error, Result};
use ssgpvae::evaluate::{evaluate, write_eval_report};
use ssgpvae::kalman::predict_at;
use ssgpvae::kernel::KernelFamily;
use ssgpvae::mat::Mat;
use ssgpvae::nn::Checkpoint;
use ssgpvae::stats::{derive_rng, draw_standard_normal};
use ssgpvae::train::train;
use std::io::Write as _;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "ssgpvae",
    about = "Linear-time state-space GP variational autoencoder",
    version
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 = bit-exact determinism; results are identical
    /// across thread counts anyway because reductions are index-ordered).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generates the synthetic datasets for the configured task.
    Gen,
    /// Trains a model and writes metrics.csv + checkpoint.json.
    Train(TrainArgs),
    /// Scores a checkpoint on a dataset (RMSE, IW-NLL, NLPD).
    Eval(EvalArgs),
    /// Writes posterior reconstructions/imputations for a dataset.
    Predict(PredictArgs),
    /// Times filter+smooth across sequence lengths, emitting CSV.
    Benchmark(BenchArgs),
    /// Runs the dense-vs-Markovian equivalence suite.
    OracleCheck,
}

#[derive(Args)]
struct TrainArgs {
    /// Training split (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Optional held-out split scored by IW-NLL after each epoch.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Resume from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to score.
    #[arg(long)]
    data: PathBuf,
    /// Conditioning grid for spatiotemporal scoring.
    #[arg(long)]
    context_data: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "512,1024,2048,4096")]
    t_grid: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value = "matern32")]
    family: String,
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let n = n.max(1);
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized");
        }
    }
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .ok_or_else(|| Error::InvalidArgument("--out is required for this command".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn rebuild_model_from_checkpoint(
    ck: &Checkpoint,
    data_d_y: usize,
    span: f64,
) -> Result<(ExperimentConfig, ssgpvae::model::Model)> {
    let cfg: ExperimentConfig = serde_json::from_value(ck.meta.clone())
        .map_err(|e| Error::Parse(format!("checkpoint metadata: {e}")))?;
    let model = cfg.build_model(data_d_y, span)?;
    ck.check_layout(model.layout())?;
    Ok((cfg, model))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen => {
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cli)?;
            match cfg.run.task {
                Task::Spatiotemporal => {
                    let b = gen_spatiotemporal(
                        cfg.data.n_locations,
                        cfg.data.t_len,
                        cfg.data.d_y,
                        cfg.run.seed,
                    )?;
                    save_dataset(&b.train, &dir.join("train.jsonl"))?;
                    save_dataset(&b.heldout, &dir.join("heldout.jsonl"))?;
                    ssgpvae::data::export_csv(&b.train, &dir.join("train.csv"))?;
                    println!(
                        "wrote {} training and {} held-out locations to {}",
                        b.train.sequences.len(),
                        b.heldout.sequences.len(),
                        dir.display()
                    );
                }
                task => {
                    let b = gen_rotating(
                        cfg.data.num_train,
                        cfg.data.num_test,
                        cfg.data.t_len,
                        cfg.data.period,
                        cfg.data.d_y,
                        cfg.run.seed,
                    )?;
                    let (train_ds, test_ds) = match task {
                        Task::Clean => (b.clean_train, b.clean_test),
                        Task::Corrupt => (b.corrupt_train, b.corrupt_test),
                        Task::Missing => (b.missing_train, b.missing_test),
                        Task::Spatiotemporal => unreachable!(),
                    };
                    save_dataset(&train_ds, &dir.join("train.jsonl"))?;
                    save_dataset(&test_ds, &dir.join("test.jsonl"))?;
                    ssgpvae::data::export_csv(&train_ds, &dir.join("train.csv"))?;
                    println!(
                        "wrote {} train / {} test sequences to {}",
                        train_ds.sequences.len(),
                        test_ds.sequences.len(),
                        dir.display()
                    );
                }
            }
            Ok(())
        }
        Command::Train(args) => {
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cli)?;
            let data = load_dataset(&args.data)?;
            let eval_data = args.eval_data.as_ref().map(|p| load_dataset(p)).transpose()?;
            let outcome = train(
                &cfg,
                &data,
                eval_data.as_ref(),
                Some(dir.as_path()),
                args.resume.as_deref(),
            )?;
            let last = outcome.metrics.last().expect("at least one epoch");
            println!(
                "trained {} epochs; final elbo per sequence {:.4}",
                outcome.metrics.len(),
                last.elbo
            );
            if let Some(nll) = outcome.eval_nll.last() {
                println!("held-out IW-NLL {nll:.4}");
            }
            Ok(())
        }
        Command::Eval(args) => {
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cli)?;
            let data = load_dataset(&args.data)?;
            let ck = Checkpoint::load(&args.checkpoint)?;
            let (_ck_cfg, model) =
                rebuild_model_from_checkpoint(&ck, data.meta.d_y, data.time_span())?;
            let context = args
                .context_data
                .as_ref()
                .map(|p| load_dataset(p))
                .transpose()?;
            let report = evaluate(
                &model,
                &ck.params,
                &data,
                context.as_ref(),
                cfg.run.task,
                cfg.train.k_eval,
                cfg.run.seed,
            )?;
            write_eval_report(&dir.join("eval_metrics.csv"), &report)?;
            println!("rmse {:.6}", report.rmse);
            if let Some(rm) = report.rmse_missing {
                println!("rmse_missing {rm:.6}");
            }
            if let Some(nlpd) = report.nlpd {
                println!("nlpd {nlpd:.6}");
            } else {
                println!("iw_nll {:.4}", report.nll);
            }
            Ok(())
        }
        Command::Predict(args) => {
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cli)?;
            let data = load_dataset(&args.data)?;
            if data.meta.layout != DataLayout::Temporal {
                return Err(Error::InvalidArgument(
                    "predict currently targets temporal datasets; use eval for spatiotemporal scoring"
                        .into(),
                ));
            }
            let ck = Checkpoint::load(&args.checkpoint)?;
            let (_c, model) = rebuild_model_from_checkpoint(&ck, data.meta.d_y, data.time_span())?;
            let k = cfg.train.k_eval;
            let mut file =
                std::io::BufWriter::new(std::fs::File::create(dir.join("predictions.jsonl"))?);
            for i in 0..data.sequences.len() {
                let view = eval_view(&data, i);
                let seen: Vec<(f64, Vec<f64>)> = view
                    .times
                    .iter()
                    .zip(&view.y_input)
                    .zip(&view.missing)
                    .filter(|(_, &m)| !m)
                    .map(|((t, y), _)| (*t, y.clone()))
                    .collect();
                let times: Vec<f64> = seen.iter().map(|(t, _)| *t).collect();
                let inputs: Vec<Vec<f64>> = seen.into_iter().map(|(_, y)| y).collect();
                let sites = model.sites(&ck.params, &times, &inputs)?;
                let channels = model.state_spaces(&ck.params);
                let marg = predict_at(&channels, &sites, &view.times)?;
                let mut rng = derive_rng(cfg.run.seed, &[0x9D, i as u64]);
                let y_mean: Vec<Vec<f64>> = (0..view.times.len())
                    .map(|t| {
                        let mut acc = vec![0.0; data.meta.d_y];
                        for _ in 0..k {
                            let z: Vec<f64> = (0..model.latent_channels())
                                .map(|c| {
                                    marg.mean[t][c]
                                        + marg.var[t][c].max(0.0).sqrt()
                                            * draw_standard_normal(&mut rng)
                                })
                                .collect();
                            let y_hat = model.decode_plain(&ck.params, &Mat::col(z));
                            for (a, v) in acc.iter_mut().zip(y_hat.data()) {
                                *a += v;
                            }
                        }
                        acc.into_iter().map(|v| v / k as f64).collect()
                    })
                    .collect();
                let line = serde_json::json!({
                    "seq": i,
                    "times": view.times,
                    "y_mean": y_mean,
                    "z_mean": marg.mean,
                    "z_var": marg.var,
                });
                writeln!(file, "{line}")?;
            }
            file.flush()?;
            println!("wrote predictions for {} sequences", data.sequences.len());
            Ok(())
        }
        Command::Benchmark(args) => {
            let dir = out_dir(&cli)?;
            let family = KernelFamily::parse(&args.family)?;
            let t_grid: Vec<usize> = args
                .t_grid
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::Parse(format!("t-grid entry '{s}': {e}")))
                })
                .collect::<Result<_>>()?;
            let seed = cli.seed.unwrap_or(0);
            let rows = ssgpvae::bench::benchmark(family, &t_grid, args.repeats, seed)?;
            ssgpvae::bench::write_benchmark_csv(&dir.join("benchmark.csv"), &rows)?;
            for r in &rows {
                println!("T={:5}  d={}  median {:.6}s  p90 {:.6}s", r.t, r.d, r.median_s, r.p90_s);
            }
            Ok(())
        }
        Command::OracleCheck => {
            let seed = cli.seed.unwrap_or(0);
            let report = ssgpvae::oracle::oracle_check(seed)?;
            println!("max rel error, smoothed moments : {:.3e}", report.max_rel_moments);
            println!("max rel error, log partition    : {:.3e}", report.max_rel_logz);
            println!("max rel error, spatiotemporal   : {:.3e}", report.max_rel_st);
            if report.passes() {
                println!("oracle check PASSED");
                Ok(())
            } else {
                Err(Error::Numerical(
                    "oracle check exceeded tolerance (1e-6 temporal, 1e-5 spatiotemporal)".into(),
                ))
            }
        }
    }
}
