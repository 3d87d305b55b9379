//! Command-line front end. Every subcommand reads the same config file,
//! applies overrides, and writes into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use diffusion::Checkpoint;
use finetune::RunLogRow;

use crate::config::ExperimentConfig;
use crate::error::{Error, IoContext, Result};
use crate::experiment::{
    ablation_arms, ablation_report, final_reward, summarize_pairs, AblationArm, Arm, Experiment, GuidanceLevel, PairedRun,
    ABLATION_THRESHOLDS,
};
use crate::plot::charts_for_table;
use crate::runlog::{write_losscurve, write_runlog, RunLogWriter, Table};
use crate::stats::median;

pub const PRETRAINED: &str = "pretrained.ckpt";
pub const FINETUNED: &str = "finetuned.ckpt";

#[derive(Debug, Parser)]
#[command(name = "diffexp", about = "Toy laboratory for exploration in online diffusion fine-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Config file of `section.key = value` lines; defaults apply when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for single runs; replaces the seed list for compare and ablate.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory; overrides output.dir.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the denoiser; writes the checkpoint and loss curve.
    Pretrain,
    /// Fine-tune adapters on the training reward; writes the run log and checkpoints.
    Finetune,
    /// Score a checkpoint on seen and unseen conditions and tabulate the guidance trade-off.
    Eval,
    /// Module on/off and threshold sweep over the seed list.
    Ablate,
    /// Render SVG charts from CSV files (default: every CSV in the output directory).
    Plot { files: Vec<PathBuf> },
    /// Paired baseline versus configured-exploration runs over the seed list.
    Compare,
    /// Print every config key with its default and meaning.
    Keys,
}

/// Config with the file, overrides and CLI flags applied.
pub fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::parse(&fs::read_to_string(path).at(path)?)?,
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = args.seed {
        cfg.seeds.list.0 = vec![seed];
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Keys = cli.command {
        for k in ExperimentConfig::documentation() {
            println!("{} = {}\n    {}", k.key, k.default, k.doc);
        }
        return Ok(());
    }
    let cfg = load_config(&cli.common)?;
    let out = cfg.output_dir();
    if let Command::Plot { files } = &cli.command {
        return plot(&out, files);
    }
    let exp = Experiment::from_config(&cfg)?;
    match cli.command {
        Command::Pretrain => pretrain(&exp, &out),
        Command::Finetune => finetune(&exp, &out),
        Command::Eval => eval(&exp, &out),
        Command::Ablate => ablate(&exp, &out),
        Command::Compare => compare(&exp, &out),
        Command::Plot { .. } | Command::Keys => unreachable!("handled above"),
    }
}

/// Creates the output directory and records the effective config. Called
/// only once every input has been loaded, so failures leave no files.
fn prepare(exp: &Experiment, out: &Path) -> Result<()> {
    fs::create_dir_all(out).at(out)?;
    write(&out.join("config.txt"), &exp.config.canonical())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).at(path)
}

fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path).at(path)
}

fn load_checkpoint(exp: &Experiment, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    exp.check_checkpoint(&ckpt)?;
    Ok(ckpt)
}

/// `model.checkpoint` when set, else the first existing fallback in `out`.
fn resolve_checkpoint(exp: &Experiment, out: &Path, fallbacks: &[&str]) -> Result<Checkpoint> {
    let configured = &exp.config.model.checkpoint;
    let path = if configured.is_empty() {
        let candidates: Vec<PathBuf> = fallbacks.iter().map(|f| out.join(f)).collect();
        candidates
            .iter()
            .find(|p| p.exists())
            .cloned()
            .unwrap_or_else(|| candidates.last().cloned().expect("at least one fallback"))
    } else {
        PathBuf::from(configured)
    };
    load_checkpoint(exp, &path)
}

fn single_seed(exp: &Experiment) -> u64 {
    exp.seeds()[0]
}

fn render_charts(csv: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(csv).at(csv)?;
    let table = Table::parse(&text).at(csv)?;
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut written = Vec::new();
    for (suffix, chart) in charts_for_table(&table, &stem) {
        let name = if suffix.is_empty() { format!("{stem}.svg") } else { format!("{stem}_{suffix}.svg") };
        let path = csv.with_file_name(name);
        write(&path, &chart.to_svg())?;
        written.push(path);
    }
    Ok(written)
}

fn plot(out: &Path, files: &[PathBuf]) -> Result<()> {
    let files: Vec<PathBuf> = if files.is_empty() {
        let mut found: Vec<PathBuf> = fs::read_dir(out)
            .at(out)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        found.sort();
        found
    } else {
        files.to_vec()
    };
    if files.is_empty() {
        return Err(Error::Experiment(format!("no CSV files to plot in {}", out.display())));
    }
    for f in &files {
        for p in render_charts(f)? {
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn pretrain(exp: &Experiment, out: &Path) -> Result<()> {
    let seed = single_seed(exp);
    let (ckpt, report) = exp.pretrain(seed)?;
    prepare(exp, out)?;
    save(&ckpt, &out.join(PRETRAINED))?;
    let curve = out.join("losscurve.csv");
    write(&curve, &write_losscurve(&report.losses).at(&curve)?)?;
    render_charts(&curve)?;
    let eval = exp.evaluate(&ckpt.params)?;
    let text = format!(
        "pretraining seed {seed}\nsteps {}\nheld-out denoising loss {:.6} -> {:.6} (ratio {:.4})\n\
         seen reward {:.6e} ({:.4} of max)\nunseen reward {:.6e}\ncross reward {:.6}\ndiversity {:.3}\n",
        report.losses.len(),
        report.heldout_before,
        report.heldout_after,
        report.heldout_after / report.heldout_before,
        eval.seen_reward,
        eval.seen_reward / eval.max_reward,
        eval.unseen_reward,
        eval.cross_reward,
        eval.diversity,
    );
    write(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn finetune_report(exp: &Experiment, arm: Arm, seed: u64, log: &[RunLogRow], queries: u64) -> Result<String> {
    let max = exp.max_reward()?;
    let first = log.first().expect("a run logs at least one row");
    let last = log.last().expect("a run logs at least one row");
    Ok(format!(
        "fine-tuning: method {}, arm {arm}, seed {seed}\nreward queries {queries}\n\
         seen reward {:.6e} -> {:.6e} ({:.4} -> {:.4} of max)\nunseen reward {:.6e} -> {:.6e}\n\
         cross reward {:.6} -> {:.6}\ndiversity {:.3} -> {:.3}\n",
        exp.finetune.method,
        first.eval_seen_reward,
        last.eval_seen_reward,
        first.eval_seen_reward / max,
        last.eval_seen_reward / max,
        first.eval_unseen_reward,
        last.eval_unseen_reward,
        first.cross_reward,
        last.cross_reward,
        first.diversity,
        last.diversity,
    ))
}

/// One fine-tuning run streaming its log to `dir/runlog.csv`, optionally
/// saving a checkpoint at every tick.
fn run_arm(exp: &Experiment, base: &Checkpoint, arm: Arm, seed: u64, dir: &Path, tick_checkpoints: bool) -> Result<Vec<RunLogRow>> {
    fs::create_dir_all(dir).at(dir)?;
    let csv = dir.join("runlog.csv");
    let mut writer = RunLogWriter::create(&csv).at(&csv)?;
    let ckpt_dir = dir.join("checkpoints");
    if tick_checkpoints {
        fs::create_dir_all(&ckpt_dir).at(&ckpt_dir)?;
    }
    let mut failure: Option<Error> = None;
    let mut on_tick = |row: &RunLogRow, params: &diffusion::DenoiserParams| -> finetune::Result<()> {
        let mut step = || -> Result<()> {
            writer.append(row).at(&csv)?;
            if tick_checkpoints {
                let ckpt = Checkpoint {
                    timesteps: base.timesteps,
                    params: params.clone(),
                };
                save(&ckpt, &ckpt_dir.join(format!("iter_{:06}.ckpt", row.iteration)))?;
            }
            Ok(())
        };
        step().map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            finetune::Error::Config(msg)
        })
    };
    let result = exp.finetune(&base.params, arm, seed, &mut on_tick);
    if let Some(e) = failure {
        return Err(e);
    }
    let (params, outcome) = result?;
    if tick_checkpoints {
        save(
            &Checkpoint {
                timesteps: base.timesteps,
                params,
            },
            &dir.join(FINETUNED),
        )?;
    }
    Ok(outcome.log)
}

fn finetune(exp: &Experiment, out: &Path) -> Result<()> {
    let base = resolve_checkpoint(exp, out, &[PRETRAINED])?;
    prepare(exp, out)?;
    let arm = Arm::from_config(&exp.config);
    let seed = single_seed(exp);
    let log = run_arm(exp, &base, arm, seed, out, true)?;
    render_charts(&out.join("runlog.csv"))?;
    let queries = log.last().map_or(0, |r| r.reward_queries);
    let text = finetune_report(exp, arm, seed, &log, queries)?;
    write(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn eval(exp: &Experiment, out: &Path) -> Result<()> {
    let ckpt = resolve_checkpoint(exp, out, &[FINETUNED, PRETRAINED])?;
    prepare(exp, out)?;
    let e = exp.evaluate(&ckpt.params)?;
    let table = exp.reproduce_tradeoff(&ckpt.params)?;
    let tradeoff = out.join("tradeoff.csv");
    write(&tradeoff, &table.to_csv())?;
    let mut text = format!(
        "evaluation (exploration off, guidance scale {})\nseen reward {:.6e} ({:.4} of max)\nunseen reward {:.6e}\n\
         cross reward {:.6}\ndiversity {:.3}\n\nguidance trade-off on {} over {} seeds (mean diversity, mean quality)\n",
        exp.guidance.schedule.eval_scale,
        e.seen_reward,
        e.seen_reward / e.max_reward,
        e.unseen_reward,
        e.cross_reward,
        e.diversity,
        table.condition,
        exp.config.eval.tradeoff_seeds,
    );
    for level in [GuidanceLevel::ConstantLow, GuidanceLevel::Dynamic, GuidanceLevel::ConstantHigh] {
        let rows = table.level(level);
        let n = rows.len() as f64;
        text.push_str(&format!(
            "  {:<14} {:.3}  {:.4}\n",
            level.to_string(),
            rows.iter().map(|r| r.0).sum::<f64>() / n,
            rows.iter().map(|r| r.1).sum::<f64>() / n
        ));
    }
    write(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn compare(exp: &Experiment, out: &Path) -> Result<()> {
    let base = resolve_checkpoint(exp, out, &[PRETRAINED])?;
    prepare(exp, out)?;
    let (baseline, treatment) = (Arm::BASELINE, Arm::from_config(&exp.config));
    let mut runs = Vec::new();
    for &seed in exp.seeds() {
        let dir = out.join("compare").join(format!("seed_{seed}"));
        let b = run_arm(exp, &base, baseline, seed, &dir.join("baseline"), false)?;
        let t = run_arm(exp, &base, treatment, seed, &dir.join("treatment"), false)?;
        runs.push(PairedRun {
            seed,
            baseline: b,
            treatment: t,
        });
    }
    let summary = summarize_pairs(&runs, exp.max_reward()?);
    let text = summary.report(baseline, treatment);
    write(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn ablate(exp: &Experiment, out: &Path) -> Result<()> {
    let base = resolve_checkpoint(exp, out, &[PRETRAINED])?;
    prepare(exp, out)?;
    let mut arms = Vec::new();
    for arm in ablation_arms(&ABLATION_THRESHOLDS) {
        let mut finals = Vec::new();
        for &seed in exp.seeds() {
            let dir = out.join("ablate").join(arm.to_string()).join(format!("seed_{seed}"));
            finals.push(final_reward(&run_arm(exp, &base, arm, seed, &dir, false)?));
        }
        arms.push(AblationArm { arm, finals });
    }
    let max = exp.max_reward()?;
    let mut csv = String::from("arm,median_final_seen_reward\n");
    for a in &arms {
        csv.push_str(&format!("{},{}\n", a.arm, median(&a.finals)));
    }
    write(&out.join("ablation.csv"), &csv)?;
    let text = ablation_report(&arms, exp.seeds(), max);
    write(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Run log text of one in-memory run, for determinism checks.
pub fn runlog_text(log: &[RunLogRow]) -> Result<String> {
    write_runlog(log).at("<memory>")
}
