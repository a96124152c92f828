use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use mtloc::dataio::{read_config, DatasetIndex, RunConfig, Split, SplitData};
use mtloc::eval::{
    export_trajectory, ground_truth_predictions, integrate_odometry, parse_trajectory_csv, predict, summarize,
    trajectory_svg, SequencePredictions,
};
use mtloc::geometry::{CameraIntrinsics, Pose};
use mtloc::gradsuite::{run_suite, suite_tolerance, SuiteOptions};
use mtloc::networks::{load_checkpoint, Checkpoint, Task};
use mtloc::synthworld::{export_dataset, generate_scene, generate_trajectory};
use mtloc::trainer::{train_joint, train_single_task, JointInit};
use mtloc::Error;

const LOG_ENV: &str = "MTLOC_LOG";

#[derive(Parser)]
#[command(name = "mtloc", version, about = "Multitask visual localization on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Total frames, split evenly over the loops.
        #[arg(long, default_value_t = 300)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        loops: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train one stage on the training split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Starting checkpoints: one for a single task, or the loc, vo and
        /// seg checkpoints for joint training.
        #[arg(long, num_args = 1..)]
        init: Vec<PathBuf>,
        /// Joint training from a fresh initialization.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Evaluate a checkpoint and write a report, trajectory CSV and plot.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, required_unless_present = "ground_truth_fixture")]
        model: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Score the ground truth against itself.
        #[arg(long, hide = true)]
        ground_truth_fixture: bool,
    },
    /// Compare every gradient against central finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_wrong_backward: bool,
    },
    /// Draw a trajectory CSV as a top-down SVG.
    Plot {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            e => Failure::Data(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate {
            out,
            frames,
            loops,
            seed,
            size,
        } => cmd_generate(&out, frames, loops, seed, size),
        Command::Train {
            dataset,
            task,
            steps,
            config,
            out,
            init,
            from_scratch,
        } => cmd_train(&dataset, task, steps, config.as_deref(), &out, &init, from_scratch),
        Command::Eval {
            dataset,
            split,
            model,
            report,
            ground_truth_fixture,
        } => cmd_eval(&dataset, split, model.as_deref(), &report, ground_truth_fixture),
        Command::Gradcheck { inject_wrong_backward } => cmd_gradcheck(inject_wrong_backward),
        Command::Plot { trajectory, out } => cmd_plot(&trajectory, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `mtloc help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}

fn cmd_generate(out: &Path, frames: usize, loops: usize, seed: u64, size: usize) -> CmdResult {
    if frames == 0 || loops == 0 || !frames.is_multiple_of(loops) || frames / loops < 2 {
        return Err(Failure::Usage(format!(
            "--frames must be a positive multiple of --loops with at least 2 frames per loop (got {frames} frames, {loops} loops)"
        )));
    }
    if size < 2 {
        return Err(Failure::Usage(format!("--size must be at least 2, got {size}")));
    }
    let scene = generate_scene(seed);
    let traj = generate_trajectory(&scene, loops, frames / loops, seed)?;
    let index = export_dataset(&scene, &traj, &CameraIntrinsics::square(size), out)?;
    println!("dataset {}: {} frames, {size}x{size}, seed {seed}", out.display(), index.num_frames());
    for s in &index.sequences {
        println!("  {} {} {} frames", s.name, s.split.as_str(), s.frames.len());
    }
    Ok(())
}

fn load_split(dataset: &Path, split: Split) -> Result<(DatasetIndex, SplitData), Failure> {
    let index = DatasetIndex::load(dataset)?;
    let data = SplitData::load(&index, split)?;
    if data.sequences.is_empty() {
        return Err(Failure::Data(Error::Dataset(format!(
            "{} has no {} sequences",
            dataset.display(),
            split.as_str()
        ))));
    }
    Ok((index, data))
}

fn cmd_train(
    dataset: &Path,
    task: Task,
    steps: usize,
    config: Option<&Path>,
    out: &Path,
    init: &[PathBuf],
    from_scratch: bool,
) -> CmdResult {
    let cfg = match config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    let inits = init.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<Checkpoint>, _>>()?;
    if task == Task::Joint {
        if from_scratch && !inits.is_empty() {
            return Err(Failure::Usage("joint training takes either --from-scratch or --init, not both".into()));
        }
        if !from_scratch && inits.len() != 3 {
            return Err(Failure::Usage(format!(
                "joint training needs three --init checkpoints (loc, vo, seg) or --from-scratch, got {}",
                inits.len()
            )));
        }
    } else {
        if from_scratch {
            return Err(Failure::Usage("--from-scratch applies to joint training only".into()));
        }
        if inits.len() > 1 {
            return Err(Failure::Usage(format!("{task} training takes at most one --init, got {}", inits.len())));
        }
    }
    let (_, data) = load_split(dataset, Split::Train)?;
    let started = Instant::now();
    let output = if task == Task::Joint {
        let init = if from_scratch {
            JointInit::FromScratch
        } else {
            let find = |t: Task| -> Result<&Checkpoint, Failure> {
                let mut found = None;
                for c in &inits {
                    if c.task()? == t {
                        found = Some(c);
                    }
                }
                found.ok_or_else(|| Failure::Usage(format!("no `{t}` checkpoint among --init")))
            };
            JointInit::Pretrained {
                loc: find(Task::Loc)?,
                vo: find(Task::Vo)?,
                seg: find(Task::Seg)?,
            }
        };
        train_joint(&data, init, &cfg, steps)?
    } else {
        train_single_task(task, &data, &cfg, steps, inits.first())?
    };
    let (ckpt, trace) = output.write(out)?;
    let last = output.trace.rows.last().map(|r| format!("{:.6}", r.total)).unwrap_or_else(|| "-".into());
    println!(
        "{task}: {steps} steps in {:.1}s, final loss {last}; wrote {} and {}",
        started.elapsed().as_secs_f64(),
        ckpt.display(),
        trace.display()
    );
    Ok(())
}

fn with_suffix(report: &Path, suffix: &str) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    report.with_file_name(format!("{stem}{suffix}"))
}

/// Poses for the trajectory plot: global predictions, otherwise odometry
/// chained from the first ground-truth pose.
fn plotted_poses(p: &SequencePredictions) -> Option<Vec<Pose>> {
    match (&p.poses, &p.rels) {
        (Some(poses), _) => Some(poses.clone()),
        (None, Some(rels)) => p.gt_poses.first().map(|&s| integrate_odometry(s, rels)),
        _ => None,
    }
}

fn cmd_eval(dataset: &Path, split: Split, model: Option<&Path>, report: &Path, fixture: bool) -> CmdResult {
    let (_, data) = load_split(dataset, split)?;
    let (task, preds) = if fixture {
        (Task::Joint, ground_truth_predictions(&data))
    } else {
        let ckpt = load_checkpoint(model.expect("clap requires --model"))?;
        let task = ckpt.task()?;
        let m = ckpt.to_model()?;
        (task, predict(&m, task, &data)?)
    };
    let summary = summarize(&preds, data.classes.len())?;
    let mut r = summary.report(&data.classes, data.num_frames());
    r.push("task", task);
    r.push("split", split.as_str());
    r.write(report)?;
    let (mut pp, mut gg) = (Vec::new(), Vec::new());
    for p in &preds {
        if let Some(poses) = plotted_poses(p) {
            pp.extend(poses);
            gg.extend_from_slice(&p.gt_poses);
        }
    }
    if !pp.is_empty() {
        let csv = with_suffix(report, ".trajectory.csv");
        let svg = with_suffix(report, ".trajectory.svg");
        export_trajectory(&pp, &gg, &csv, Some(&svg))?;
    }
    print!("{}", r.to_text());
    Ok(())
}

fn cmd_gradcheck(inject: bool) -> CmdResult {
    let started = Instant::now();
    let groups = run_suite(SuiteOptions {
        inject_wrong_backward: inject,
    })?;
    let mut failing = Vec::new();
    for g in &groups {
        println!(
            "{:<12} {:>3} cases  max rel err {:.3e}  {}",
            g.group,
            g.cases.len(),
            g.max_rel_err(),
            if g.pass() { "ok" } else { "FAIL" }
        );
        failing.extend(g.failures().into_iter().map(|f| format!("{}/{f}", g.group)));
    }
    println!("tolerance {:e}, {:.1}s", suite_tolerance(), started.elapsed().as_secs_f64());
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failing.join(", ")))
    }
}

fn cmd_plot(trajectory: &Path, out: &Path) -> CmdResult {
    let text = std::fs::read_to_string(trajectory).map_err(|e| {
        Failure::Data(Error::Io {
            path: trajectory.to_path_buf(),
            source: e,
        })
    })?;
    let rows = parse_trajectory_csv(&text, trajectory)?;
    std::fs::write(out, trajectory_svg(&rows)).map_err(|e| {
        Failure::Data(Error::Io {
            path: out.to_path_buf(),
            source: e,
        })
    })?;
    println!("wrote {}", out.display());
    Ok(())
}
