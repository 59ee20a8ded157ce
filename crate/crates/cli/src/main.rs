use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use flowda_core::dynamics::Trajectory;
use flowda_core::flow::{load_checkpoint, save_checkpoint, CheckpointMeta};
use flowda_core::harness::{
    build_assimilator, config_template, generate_data, init_model, read_records, run_cycling, run_noise_sweep,
    run_single_step, run_stage1, run_stage2, summarize, summary_json, write_report, AbortNote, Assimilator,
    ExperimentConfig, LocationMode, Record, Summary,
};
use flowda_core::io::{read_trajectory, write_trajectory};
use flowda_core::obs::ObservationSet;
use flowda_core::train::IterationStats;
use flowda_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "flowda",
    version,
    about = "Flow-matching data assimilation on toy chaotic dynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Master seed. Training commands also use it as `train.seed`; gen-data
    /// uses it for the training trajectory and seed + 1 for the test one.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override, e.g. `--set flow.L=16`. Repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and held-out test trajectories.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Write `train.trj` and `test.trj` here instead of the configured paths.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Single-step flow-matching training from a fresh model.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: TrainIo,
    },
    /// Rollout fine-tuning starting from a first-stage checkpoint.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: TrainIo,
        /// Starting checkpoint [default: <output.dir>/stage1.ckpt].
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Assimilate one observation file into one background state.
    Assimilate {
        #[command(flatten)]
        common: Common,
        /// Trajectory file holding the background.
        #[arg(long)]
        background: PathBuf,
        /// State index inside the background file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Observation CSV with header `h,w,v0,...`.
        #[arg(long)]
        obs: PathBuf,
        /// Output trajectory file with the single analysis state.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Relative observation noise assumed by OI.
        #[arg(long, default_value_t = 0.0)]
        sigma_noise: f64,
    },
    /// Single-step assimilation at every evaluation time and rate.
    SingleStep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalIo,
    },
    /// Single-step assimilation over rates and observation-noise levels.
    NoiseSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalIo,
    },
    /// Cycling assimilation next to a free-running forecast.
    Cycle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalIo,
        /// Observation rate [default: experiment.cycle_alpha].
        #[arg(long)]
        alpha: Option<f64>,
        /// Relative observation noise [default: experiment.cycle_sigma_noise].
        #[arg(long)]
        sigma_noise: Option<f64>,
        /// Location mode [default: experiment.location_mode].
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Independent runs with seeds seed, seed + 1, ...
        #[arg(long, default_value_t = 1)]
        runs: u64,
    },
    /// Recompute the JSON summary of a records CSV.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        records: PathBuf,
        /// Summary path [default: records path with `.summary.json`].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print or write a fully commented default configuration.
    ConfigTemplate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainIo {
    /// Training trajectory [default: data.train_path].
    #[arg(long)]
    train: Option<PathBuf>,
    /// Output checkpoint [default: <output.dir>/stage{1,2}.ckpt].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log CSV [default: <output.dir>/train_stage{1,2}.csv].
    #[arg(long)]
    log: Option<PathBuf>,
    /// Iteration count, overriding the configured value.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct EvalIo {
    /// Test trajectory [default: data.test_path].
    #[arg(long)]
    test: Option<PathBuf>,
    /// Flow checkpoint [default: assimilator.checkpoint].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Records CSV [default: <output.dir>/<experiment>.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fixed,
    Shuffled,
    Both,
}

enum SeedUse {
    Evaluation,
    Training,
    Data,
}

fn load_config(common: &Common, seed_use: SeedUse) -> Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
        match seed_use {
            SeedUse::Evaluation => {}
            SeedUse::Training => overrides.push(format!("train.seed={s}")),
            SeedUse::Data => {
                overrides.push(format!("data.train_seed={s}"));
                overrides.push(format!("data.test_seed={}", s.wrapping_add(1)));
            }
        }
    }
    match &common.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => ExperimentConfig::from_overrides(&overrides),
    }
}

fn progress(stage: u32, total: usize) -> impl FnMut(u64, &IterationStats) {
    let every = (total / 20).max(1);
    let mut sum = 0.0;
    let mut count = 0usize;
    move |i: u64, s: &IterationStats| {
        sum += s.loss;
        count += 1;
        let n = i as usize + 1;
        if n.is_multiple_of(every) || n == total {
            eprintln!(
                "stage {stage}: {n}/{total} iterations, mean loss {:.5}",
                sum / count as f64
            );
            sum = 0.0;
            count = 0;
        }
    }
}

fn train(common: &Common, io: &TrainIo, stage: u32, init: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(common, SeedUse::Training)?;
    if let Some(n) = io.iterations {
        match stage {
            1 => cfg.train.iterations_stage1 = n,
            _ => cfg.train.iterations_stage2 = n,
        }
    }
    let train = read_trajectory(io.train.as_deref().unwrap_or(&cfg.data.train_path))?;
    if train.config.h != cfg.dynamics.h || train.config.w != cfg.dynamics.w || train.config.v() != cfg.dynamics.v() {
        return Err(Error::ShapeMismatch {
            dim: "training trajectory grid",
            expected: format!("{}x{}", cfg.dynamics.h, cfg.dynamics.w),
            actual: format!("{}x{}", train.config.h, train.config.w),
        });
    }
    let dir = &cfg.output.dir;
    let out = io.out.clone().unwrap_or_else(|| dir.join(format!("stage{stage}.ckpt")));
    let log = io
        .log
        .clone()
        .unwrap_or_else(|| dir.join(format!("train_stage{stage}.csv")));
    let started = Instant::now();
    let (mut model, mut meta) = match stage {
        1 => (init_model(&cfg, &train)?, CheckpointMeta::default()),
        _ => {
            let path = init.map(Path::to_path_buf).unwrap_or_else(|| dir.join("stage1.ckpt"));
            let (m, meta) = load_checkpoint(&path)?;
            if m.arch() != &cfg.arch() {
                return Err(Error::ArchMismatch(format!(
                    "{} was trained with a different architecture",
                    path.display()
                )));
            }
            (m, meta)
        }
    };
    let total = match stage {
        1 => cfg.train.iterations_stage1,
        _ => cfg.train.iterations_stage2,
    };
    let mut report = progress(stage, total);
    match stage {
        1 => run_stage1(&cfg, &train, &mut model, &mut meta, Some(&log), &mut report)?,
        _ => run_stage2(&cfg, &train, &mut model, &mut meta, Some(&log), &mut report)?,
    };
    save_checkpoint(&model, &meta, &out)?;
    eprintln!(
        "wrote {} ({} parameters, {:.1} s)",
        out.display(),
        model.param_count(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn eval_setup(common: &Common, eval: &EvalIo) -> Result<(ExperimentConfig, Trajectory, Assimilator)> {
    let cfg = load_config(common, SeedUse::Evaluation)?;
    let test = read_trajectory(eval.test.as_deref().unwrap_or(&cfg.data.test_path))?;
    let assim = build_assimilator(&cfg, eval.checkpoint.as_deref())?;
    Ok((cfg, test, assim))
}

fn finish_report(records: &[Record], path: &Path, aborted: &[AbortNote]) -> Result<()> {
    let summary = write_report(records, path, aborted)?;
    print_summary(&summary);
    eprintln!("wrote {} ({} records)", path.display(), records.len());
    Ok(())
}

fn print_summary(s: &Summary) {
    if s.empty {
        println!("(no records)");
        return;
    }
    println!("experiment    mode      alpha   sigma   variable  n     background  analysis    freerun");
    for g in &s.groups {
        let free = g
            .mean_rmse_freerun
            .map(|f| format!("{f:.5}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<13} {:<9} {:<7} {:<7} {:<9} {:<5} {:<11.5} {:<11.5} {}",
            g.experiment,
            g.location_mode,
            g.alpha,
            g.sigma_noise,
            g.variable,
            g.count,
            g.mean_rmse_background,
            g.mean_rmse_analysis,
            free
        );
    }
    for a in &s.aborted {
        println!(
            "aborted: seed {} ({}) at cycle {}: {}",
            a.seed, a.location_mode, a.cycle, a.message
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out_dir } => {
            let cfg = load_config(&common, SeedUse::Data)?;
            let (train_path, test_path) = match &out_dir {
                Some(d) => (d.join("train.trj"), d.join("test.trj")),
                None => (cfg.data.train_path.clone(), cfg.data.test_path.clone()),
            };
            let (train, test) = generate_data(&cfg)?;
            write_trajectory(&train, &train_path)?;
            write_trajectory(&test, &test_path)?;
            let s = train.stats();
            eprintln!(
                "wrote {} ({} states) and {} ({} states); climatological std {:?}",
                train_path.display(),
                train.len(),
                test_path.display(),
                test.len(),
                s.std()
            );
            Ok(())
        }
        Command::TrainStage1 { common, io } => train(&common, &io, 1, None),
        Command::TrainStage2 { common, io, init } => train(&common, &io, 2, init.as_deref()),
        Command::Assimilate {
            common,
            background,
            index,
            obs,
            out,
            checkpoint,
            sigma_noise,
        } => {
            let cfg = load_config(&common, SeedUse::Evaluation)?;
            let bg = read_trajectory(&background)?;
            let x_b = bg.states.get(index).ok_or_else(|| {
                Error::OutOfRange(format!("state {index} of {} in {}", bg.len(), background.display()))
            })?;
            let obs = ObservationSet::read_csv(&obs, x_b.variable_names().to_vec())?;
            let assim = build_assimilator(&cfg, checkpoint.as_deref())?;
            // Configured assimilators never read the truth argument.
            let x_a = assim.analyse(x_b, &obs, x_b, sigma_noise)?;
            write_trajectory(&Trajectory::new(vec![x_a], bg.config.clone(), bg.seed)?, &out)?;
            eprintln!(
                "wrote {} ({} observations assimilated with {})",
                out.display(),
                obs.len(),
                assim.name()
            );
            Ok(())
        }
        Command::SingleStep { common, eval } => {
            let (cfg, test, assim) = eval_setup(&common, &eval)?;
            let records = run_single_step(
                &assim,
                &test,
                test.stats(),
                &cfg.experiment,
                cfg.seed,
                cfg.output.record_wall_time,
            )?;
            finish_report(
                &records,
                &eval.out.unwrap_or_else(|| cfg.output.dir.join("single_step.csv")),
                &[],
            )
        }
        Command::NoiseSweep { common, eval } => {
            let (cfg, test, assim) = eval_setup(&common, &eval)?;
            let records = run_noise_sweep(
                &assim,
                &test,
                test.stats(),
                &cfg.experiment,
                cfg.seed,
                cfg.output.record_wall_time,
            )?;
            finish_report(
                &records,
                &eval.out.unwrap_or_else(|| cfg.output.dir.join("noise_sweep.csv")),
                &[],
            )
        }
        Command::Cycle {
            common,
            eval,
            alpha,
            sigma_noise,
            mode,
            runs,
        } => {
            let (cfg, test, assim) = eval_setup(&common, &eval)?;
            let p = &cfg.experiment;
            let alpha = alpha.unwrap_or(p.cycle_alpha);
            let sigma = sigma_noise.unwrap_or(p.cycle_sigma_noise);
            let modes = match mode {
                Some(ModeArg::Fixed) => vec![LocationMode::Fixed],
                Some(ModeArg::Shuffled) => vec![LocationMode::Shuffled],
                Some(ModeArg::Both) => vec![LocationMode::Fixed, LocationMode::Shuffled],
                None => vec![p.location_mode],
            };
            let jobs: Vec<(u64, LocationMode)> = (0..runs.max(1))
                .flat_map(|r| modes.iter().map(move |&m| (cfg.seed.wrapping_add(r), m)))
                .collect();
            let results = jobs
                .par_iter()
                .map(|&(seed, m)| {
                    run_cycling(
                        &assim,
                        &test,
                        test.stats(),
                        p,
                        alpha,
                        sigma,
                        m,
                        seed,
                        cfg.output.record_wall_time,
                    )
                    .map(|r| (seed, m, r))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut records = Vec::new();
            let mut aborted = Vec::new();
            for (seed, m, run) in results {
                records.extend(run.records);
                if let Some((cycle, message)) = run.aborted {
                    aborted.push(AbortNote {
                        seed,
                        location_mode: m.as_str().to_string(),
                        cycle,
                        message,
                    });
                }
            }
            finish_report(
                &records,
                &eval.out.unwrap_or_else(|| cfg.output.dir.join("cycle.csv")),
                &aborted,
            )
        }
        Command::Report { common, records, out } => {
            load_config(&common, SeedUse::Evaluation)?;
            let recs = read_records(&records)?;
            let summary = summarize(&recs);
            let out = out.unwrap_or_else(|| records.with_extension("summary.json"));
            let text = summary_json(&summary)?;
            std::fs::write(&out, text).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            print_summary(&summary);
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::ConfigTemplate { common, out } => {
            load_config(&common, SeedUse::Evaluation)?;
            let text = config_template();
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e }),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
