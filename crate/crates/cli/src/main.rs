use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use tracing::info;
use tracing_subscriber::EnvFilter;

use mvtrack::calibration::{
    unmoved_cameras, CalibrationProblem, CalibrationResult, InitialGuess, PriorTrial,
};
use mvtrack::scene_io::{
    read_annotations, read_detections, read_poses, read_trajectories, write_plot_data, write_poses,
    write_trajectories, FileKind, SceneConfig, TrialManifest, Tuning,
};
use mvtrack::simulator::{
    reference, score_trajectories, write_trial, SyntheticScenario, DEFAULT_MATCH_RADIUS,
};
use mvtrack::tracker::track_trial;

/// Multi-camera 3D object tracking pipeline.
#[derive(Parser)]
#[command(name = "mvtrack", version)]
struct Cli {
    #[command(flatten)]
    tuning: TuningArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TuningArgs {
    /// Override a tuning value of the scene, e.g. `--set association_gate=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

impl TuningArgs {
    fn apply(&self, tuning: &mut Tuning) -> Result<()> {
        for o in &self.overrides {
            let (key, value) = o
                .split_once('=')
                .with_context(|| format!("tuning override `{o}` is not of the form key=value"))?;
            tuning.set(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic trial with ground truth and write its manifest.
    Simulate {
        /// Scenario file; the built-in reference scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Leave a camera out of the rendered trial.
        #[arg(long = "drop-camera", value_name = "ID")]
        drop_cameras: Vec<String>,
        /// Write the reference scenario definition here instead of rendering.
        #[arg(long, conflicts_with = "scenario")]
        export_scenario: Option<PathBuf>,
        #[arg(long, required_unless_present = "export_scenario")]
        out: Option<PathBuf>,
    },
    /// Solve camera poses and table offsets from the trial's annotations.
    Calibrate {
        manifest: PathBuf,
        /// Earlier trial whose poses are reused for cameras with identical annotations.
        #[arg(long)]
        previous_manifest: Option<PathBuf>,
    },
    /// Track objects in one or more calibrated trials.
    Track {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        /// Number of trials processed concurrently.
        #[arg(short = 'j', long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare a trial's trajectories with its ground truth.
    Score {
        manifest: PathBuf,
        /// Trajectory file; the trial's output when omitted.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MATCH_RADIUS)]
        match_radius: f64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_target(false)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Simulate {
            scenario,
            seed,
            drop_cameras,
            export_scenario,
            out,
        } => {
            if let Some(path) = export_scenario {
                reference::reference_scenario().save(path)?;
                println!("{}", path.display());
                return Ok(ExitCode::SUCCESS);
            }
            let out = out.as_deref().expect("required by clap");
            simulate(cli, scenario.as_deref(), *seed, drop_cameras, out)
        }
        Command::Calibrate {
            manifest,
            previous_manifest,
        } => calibrate(cli, manifest, previous_manifest.as_deref()),
        Command::Track { manifests, jobs } => track(cli, manifests, *jobs),
        Command::Score {
            manifest,
            trajectories,
            match_radius,
        } => score(manifest, trajectories.as_deref(), *match_radius),
    }
}

fn simulate(
    cli: &Cli,
    scenario: Option<&Path>,
    seed: Option<u64>,
    drop_cameras: &[String],
    out: &Path,
) -> Result<ExitCode> {
    let mut s = match scenario {
        Some(p) => SyntheticScenario::load(p)?,
        None => reference::reference_scenario(),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    for c in drop_cameras {
        if !s.cameras.contains_key(c) {
            bail!("scenario has no camera `{c}`");
        }
        s = s.without_camera(c);
    }
    cli.tuning.apply(&mut s.scene.tuning)?;
    let manifest = write_trial(&s, out)?;
    info!(
        cameras = s.cameras.len(),
        objects = s.objects.len(),
        frames = s.frame_count(),
        "trial written"
    );
    println!("{}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

struct Trial {
    manifest: TrialManifest,
    scene: SceneConfig,
}

fn load_trial(cli: &Cli, path: &Path) -> Result<Trial> {
    let manifest = TrialManifest::load(path)?;
    let mut scene = SceneConfig::load(&manifest.scene)?;
    cli.tuning.apply(&mut scene.tuning)?;
    Ok(Trial { manifest, scene })
}

fn trial_name(m: &TrialManifest) -> String {
    format!("s{:03}t{:02}", m.session, m.trial)
}

fn calibrate(cli: &Cli, path: &Path, previous: Option<&Path>) -> Result<ExitCode> {
    let Trial { manifest, scene } = load_trial(cli, path)?;
    if !manifest.annotations.is_file() {
        bail!(
            "annotation file {} not found; annotate the table corners first",
            manifest.annotations.display()
        );
    }
    let annotations = read_annotations(&manifest.annotations)?;

    let mut initial = InitialGuess::from_scene(&scene);
    let mut fixed = Default::default();
    if let Some(prev_path) = previous {
        let prev = TrialManifest::load(prev_path)?;
        let prev_poses = read_poses(&prev.poses_path())
            .with_context(|| format!("previous trial {} is not calibrated", prev_path.display()))?;
        initial.table_offsets.extend(prev_poses.table_offsets);
        let prior = PriorTrial {
            annotations: read_annotations(&prev.annotations)?,
            poses: prev_poses.cameras,
        };
        fixed = unmoved_cameras(&prior, &annotations);
        for camera in fixed.keys() {
            info!(camera = %camera, "skipped, unmoved");
        }
    }

    let problem = CalibrationProblem::new(&annotations, &scene)?;
    let result = problem.solve_with_fixed(&initial, &fixed)?;
    write_poses(&manifest.poses_path(), &result.poses, &result.table_offsets)?;
    print_calibration(&manifest, &result);
    if result.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "error: calibration did not converge (rms {:.3} px after {} iterations)",
            result.final_rms, result.iterations
        );
        Ok(ExitCode::from(2))
    }
}

fn print_calibration(manifest: &TrialManifest, result: &CalibrationResult) {
    for (camera, pose) in &result.poses {
        let res: Vec<_> = result
            .residuals
            .iter()
            .filter(|r| &r.camera == camera)
            .collect();
        let rms = if res.is_empty() {
            0.0
        } else {
            (res.iter().map(|r| r.du * r.du + r.dv * r.dv).sum::<f64>() / (2 * res.len()) as f64)
                .sqrt()
        };
        let status = if result.held_fixed.contains(camera) {
            " (skipped, unmoved)"
        } else if result.under_constrained.contains(camera) {
            " (under-constrained, initial guess kept)"
        } else {
            ""
        };
        println!(
            "{camera}: x={:.4} y={:.4} z={:.4} pan={:.4} tilt={:.4} roll={:.4} rms={rms:.3}px points={}{status}",
            pose.x,
            pose.y,
            pose.z,
            pose.pan,
            pose.tilt,
            pose.roll,
            res.len()
        );
    }
    for (rig, [x, y]) in &result.table_offsets {
        println!("{rig}: offset=({x:.4}, {y:.4})");
    }
    println!(
        "{}: {} cameras, rms {:.3} px, {} iterations -> {}",
        trial_name(manifest),
        result.poses.len(),
        result.final_rms,
        result.iterations,
        manifest.poses_path().display()
    );
}

fn track(cli: &Cli, manifests: &[PathBuf], jobs: usize) -> Result<ExitCode> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("creating the worker pool")?;
    let results: Vec<Result<String>> =
        pool.install(|| manifests.par_iter().map(|m| track_one(cli, m)).collect());
    let mut failed = false;
    for (path, r) in manifests.iter().zip(results) {
        match r {
            Ok(summary) => println!("{summary}"),
            Err(e) => {
                failed = true;
                eprintln!("error: {}: {e:#}", path.display());
            }
        }
    }
    Ok(if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn track_one(cli: &Cli, path: &Path) -> Result<String> {
    let Trial { manifest, scene } = load_trial(cli, path)?;
    let poses_path = manifest.poses_path();
    let poses = read_poses(&poses_path).with_context(|| {
        format!(
            "no camera poses at {}; run `mvtrack calibrate` first",
            poses_path.display()
        )
    })?;
    let streams = manifest
        .detections
        .iter()
        .map(|(camera, file)| {
            let mut s = read_detections(file, Some(&scene.classes))?;
            if s.camera_id != *camera {
                bail!("{} holds detections of camera `{}`, expected `{camera}`", file.display(), s.camera_id);
            }
            if s.skipped_unknown > 0 {
                tracing::warn!(camera = %camera, skipped = s.skipped_unknown, "detections of unknown classes skipped");
            }
            s.camera_id = camera.clone();
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = track_trial(&streams, &scene, &poses.cameras)?;
    let c = out.counters;
    info!(
        trial = %trial_name(&manifest),
        frames = c.frames,
        detections = c.detections,
        associated = c.associated,
        skipped_updates = c.skipped_updates,
        candidates = c.candidates,
        below_support = c.below_support,
        suppressed = c.suppressed,
        spawned = c.spawned,
        removed = c.removed_stale,
        deleted = c.deleted_converged,
        "tracking finished"
    );
    let traj = manifest.output_path(FileKind::Trajectories);
    write_trajectories(&traj, &out.records)?;
    write_plot_data(&manifest.output_path(FileKind::PlotData), &out.records)?;
    Ok(format!(
        "{}: {} tracklets from {} detections ({} associated, {} spawned) -> {}",
        trial_name(&manifest),
        out.records.len(),
        c.detections,
        c.associated,
        c.spawned,
        traj.display()
    ))
}

fn score(path: &Path, trajectories: Option<&Path>, match_radius: f64) -> Result<ExitCode> {
    let manifest = TrialManifest::load(path)?;
    let gt_path = manifest
        .ground_truth
        .clone()
        .context("the manifest names no ground truth file")?;
    let ground_truth = read_trajectories(&gt_path)?;
    let produced_path = trajectories
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest.output_path(FileKind::Trajectories));
    let produced = read_trajectories(&produced_path)?;
    let s = score_trajectories(&produced, &ground_truth, match_radius);
    for (id, o) in &s.objects {
        println!(
            "object {id} ({}): tracklets {:?}, rmse {:.4} m over {} samples",
            o.class_name, o.tracklets, o.rmse, o.samples
        );
    }
    println!(
        "{}: rmse {:.4} m, {} produced, {} matched objects of {}, {} ghosts, {} missed, {} extra fragments",
        trial_name(&manifest),
        s.rmse,
        s.produced,
        s.objects.len() - s.missed.len(),
        s.objects.len(),
        s.ghosts.len(),
        s.missed.len(),
        s.fragmentation
    );
    Ok(ExitCode::SUCCESS)
}
