//! Command-line front end: synthesize corpora, train, score, evaluate,
//! and dump flow diagnostics.
//!
//! Conventions: primary output is JSON on stdout, progress goes to
//! stderr. Exit 0 on success, 1 for usage-level problems (bad flags,
//! out-of-range arguments, degenerate inputs), 2 for data problems
//! (unreadable files, malformed formats, dimension mismatches).
//! Identical inputs and seeds give byte-identical outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dzl_core::metrics::{auc, average_precision};
use dzl_core::model::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig};
use dzl_core::optical_flow::{compute_flow, FlowParams};
use dzl_core::rng::derive_seed;
use dzl_core::scoring::{
    classify, dzl_score, score_corpus, training_set, youden_threshold, CallLabel, DzlScore,
    ZoneConfig,
};
use dzl_core::synth::{generate_corpus, load_corpus, SynthConfig};
use dzl_core::video_io::{load_clip, resize_clip, save_pgm, Frame, VideoClip};
use dzl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dzl", version, about = "Disarranged-zone learning for contrast-flow clips")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic contrast corpus with a ground-truth manifest.
    Synth(SynthArgs),
    /// Train a displacement detector on every clip in a manifest.
    Train(TrainArgs),
    /// Score one clip with a trained checkpoint.
    Score(ScoreArgs),
    /// Score a manifest against its ground truth and report AUC/AP.
    Eval(EvalArgs),
    /// Write flow magnitude and sampled vectors for one frame pair.
    FlowDebug(FlowDebugArgs),
}

/// Settings shared by every command. Each may also come from the
/// --config JSON file; explicit flags win over the file, the file wins
/// over built-in defaults.
#[derive(Args, Clone)]
struct Opts {
    /// Master RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file of defaults for the other flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// GRU hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    /// GRU layers in encoder and decoder.
    #[arg(long)]
    layers: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Shuffle repeats averaged into a score.
    #[arg(long)]
    repeats: Option<usize>,
    /// Abnormality threshold; a score strictly below it is called
    /// abnormal. Eval picks one by Youden's J when unset.
    #[arg(long)]
    threshold: Option<f64>,
    /// Flow-variance percentile for zone eligibility.
    #[arg(long)]
    percentile: Option<f64>,
    /// Zone points sampled per clip; feature dim is twice this. Score
    /// and eval take it from the checkpoint when unset.
    #[arg(long)]
    zone_k: Option<usize>,
    /// Square side clips are resized to before any processing.
    #[arg(long)]
    working_size: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Healthy clips to generate.
    #[arg(long)]
    normal: usize,
    /// Occluded clips to generate.
    #[arg(long)]
    abnormal: usize,
    /// Output directory for clips and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Occlusion severity range for abnormal clips, as "lo,hi".
    #[arg(long, default_value = "0.2,0.5", value_parser = parse_severity)]
    severity: (f64, f64),
    /// Frames per clip.
    #[arg(long)]
    frames: Option<usize>,
    /// Contrast front speed as vessel fraction per frame. Defaults to
    /// filling the vessel just at the last frame when --frames is set.
    #[arg(long)]
    front_speed: Option<f64>,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus manifest to train on (labels are ignored).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoint.ckpt, history.csv, run_config.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args)]
struct ScoreArgs {
    /// Clip to score (.dzlv file or directory of .pgm frames).
    #[arg(long)]
    clip: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus manifest with ground truth.
    #[arg(long)]
    manifest: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for scores.csv and summary.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args)]
struct FlowDebugArgs {
    /// Clip to inspect.
    #[arg(long)]
    clip: PathBuf,
    /// Flow is computed between this frame and the next.
    #[arg(long, default_value_t = 0)]
    frame_index: usize,
    /// Sample every Nth pixel into the vector CSV.
    #[arg(long, default_value_t = 8)]
    stride: usize,
    /// Output directory for flow_magnitude.pgm and flow_vectors.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: Opts,
}

fn parse_severity(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected \"lo,hi\", got {s:?}"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("bad lo: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("bad hi: {e}"))?;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(format!("severity range {lo},{hi} is not ordered"));
    }
    Ok((lo, hi))
}

/// Optional settings read from --config. Field names match the flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    epochs: Option<usize>,
    hidden: Option<usize>,
    layers: Option<usize>,
    learning_rate: Option<f64>,
    repeats: Option<usize>,
    threshold: Option<f64>,
    percentile: Option<f64>,
    zone_k: Option<usize>,
    working_size: Option<usize>,
}

/// Fully resolved settings; recorded next to every output.
#[derive(Debug, Clone, Serialize)]
struct RunConfig {
    seed: u64,
    working_size: usize,
    percentile: f64,
    zone_k: Option<usize>,
    repeats: usize,
    threshold: Option<f64>,
    epochs: usize,
    hidden: usize,
    layers: usize,
    learning_rate: f64,
    flow: FlowParams,
}

impl RunConfig {
    fn resolve(opts: &Opts) -> Result<RunConfig> {
        let file = match &opts.config {
            Some(path) => {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_slice::<FileConfig>(&bytes)?
            }
            None => FileConfig::default(),
        };
        Ok(RunConfig {
            seed: opts.seed.or(file.seed).unwrap_or(0),
            working_size: opts.working_size.or(file.working_size).unwrap_or(512),
            percentile: opts.percentile.or(file.percentile).unwrap_or(80.0),
            zone_k: opts.zone_k.or(file.zone_k),
            repeats: opts.repeats.or(file.repeats).unwrap_or(8),
            threshold: opts.threshold.or(file.threshold),
            epochs: opts.epochs.or(file.epochs).unwrap_or(100),
            hidden: opts.hidden.or(file.hidden).unwrap_or(64),
            layers: opts.layers.or(file.layers).unwrap_or(2),
            learning_rate: opts.learning_rate.or(file.learning_rate).unwrap_or(1e-3),
            flow: FlowParams::default(),
        })
    }

    fn zone_cfg(&self, fallback_k: Option<usize>) -> Result<ZoneConfig> {
        let k = self.zone_k.or(fallback_k).unwrap_or(100);
        Ok(ZoneConfig {
            percentile: self.percentile,
            k,
        })
    }
}

/// Wrapper written as run_config.json next to file-producing commands.
#[derive(Serialize)]
struct CommandRecord<'a, T: Serialize> {
    command: &'static str,
    args: T,
    config: &'a RunConfig,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Score(a) => cmd_score(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::FlowDebug(a) => cmd_flow_debug(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidParam(_) | Error::Degenerate(_) => 1,
                _ => 2,
            }
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_run_config<T: Serialize>(dir: &Path, record: &CommandRecord<T>) -> Result<()> {
    let json = serde_json::to_string_pretty(record)?;
    write_file(&dir.join("run_config.json"), json.as_bytes())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Load every manifest clip at the working size, in manifest order.
fn load_corpus_clips(
    manifest: &Path,
    working_size: usize,
) -> Result<Vec<(String, VideoClip, bool)>> {
    let entries = load_corpus(manifest)?;
    let mut clips = Vec::with_capacity(entries.len());
    for (entry, path) in entries {
        let clip = load_clip(&path)?;
        let clip = resize_clip(&clip, working_size, working_size)?;
        clips.push((file_stem(Path::new(&entry.file)), clip, entry.truth));
    }
    Ok(clips)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = RunConfig::resolve(&a.opts)?;
    let mut synth = SynthConfig {
        width: cfg.working_size,
        height: cfg.working_size,
        ..SynthConfig::default()
    };
    if let Some(frames) = a.frames {
        synth.frames = frames;
        // fill the vessel just at the final frame unless told otherwise
        synth.front_speed = 1.0 / (frames.max(2) - 1) as f64;
    }
    if let Some(speed) = a.front_speed {
        synth.front_speed = speed;
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let entries = generate_corpus(&synth, a.normal, a.abnormal, a.severity, cfg.seed, &a.out)?;
    eprintln!(
        "wrote {} clips ({} normal, {} abnormal) to {}",
        entries.len(),
        a.normal,
        a.abnormal,
        a.out.display()
    );

    #[derive(Serialize)]
    struct SynthRecord {
        normal: usize,
        abnormal: usize,
        severity: (f64, f64),
        synth: SynthConfig,
    }
    write_run_config(
        &a.out,
        &CommandRecord {
            command: "synth",
            args: SynthRecord {
                normal: a.normal,
                abnormal: a.abnormal,
                severity: a.severity,
                synth,
            },
            config: &cfg,
        },
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "clips": entries.len(),
            "manifest": a.out.join("manifest.json"),
        }))?
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::resolve(&a.opts)?;
    let zone_cfg = cfg.zone_cfg(None)?;
    let clips = load_corpus_clips(&a.manifest, cfg.working_size)?;
    eprintln!("loaded {} clips at {0}x{0} px", cfg.working_size);
    eprintln!("preparing {} training sequences", clips.len());

    let named: Vec<(String, VideoClip)> =
        clips.into_iter().map(|(id, clip, _)| (id, clip)).collect();
    let dataset = training_set(
        &named,
        &cfg.flow,
        &zone_cfg,
        true,
        derive_seed(cfg.seed, 0),
    )?;

    let train_cfg = TrainConfig {
        hidden: cfg.hidden,
        n_layers: cfg.layers,
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let outcome = train(&dataset, &train_cfg)?;
    for stats in &outcome.history {
        eprintln!(
            "epoch {:>3}: loss {:.6} accuracy {:.4}",
            stats.epoch, stats.mean_loss, stats.mean_accuracy
        );
    }

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let ck = Checkpoint {
        params: outcome.params,
        seed: cfg.seed,
        standardized: true,
    };
    let ck_path = a.out.join("checkpoint.ckpt");
    save_checkpoint(&ck, &ck_path)?;

    let mut history = String::from("epoch,mean_loss,mean_accuracy\n");
    for s in &outcome.history {
        history.push_str(&format!("{},{},{}\n", s.epoch, s.mean_loss, s.mean_accuracy));
    }
    write_file(&a.out.join("history.csv"), history.as_bytes())?;

    #[derive(Serialize)]
    struct TrainRecord {
        manifest: PathBuf,
        clips: usize,
        feature_dim: usize,
    }
    write_run_config(
        &a.out,
        &CommandRecord {
            command: "train",
            args: TrainRecord {
                manifest: a.manifest.clone(),
                clips: dataset.len(),
                feature_dim: 2 * zone_cfg.k,
            },
            config: &cfg,
        },
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "checkpoint": ck_path,
            "epochs": outcome.history.len(),
            "final_accuracy": outcome.history.last().map(|s| s.mean_accuracy),
        }))?
    );
    Ok(())
}

#[derive(Serialize)]
struct SeedReport {
    master: u64,
    zone: u64,
    repeats: Vec<u64>,
}

#[derive(Serialize)]
struct ScoreReport {
    clip: String,
    score: f64,
    repeats: Vec<f64>,
    call: CallLabel,
    threshold: f64,
    seeds: SeedReport,
    config: RunConfig,
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let cfg = RunConfig::resolve(&a.opts)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let zone_cfg = cfg.zone_cfg(Some(ck.params.feature_dim / 2))?;
    let clip = load_clip(&a.clip)?;
    let clip = resize_clip(&clip, cfg.working_size, cfg.working_size)?;

    let id = file_stem(&a.clip);
    let score = dzl_score(&id, &clip, &cfg.flow, &zone_cfg, &ck, cfg.repeats, cfg.seed)?;
    let threshold = cfg.threshold.unwrap_or(0.5);
    let call = classify(&score, threshold)?;

    let report = ScoreReport {
        clip: score.clip.clone(),
        score: score.score,
        repeats: score.repeats.clone(),
        call: call.call,
        threshold,
        seeds: SeedReport {
            master: cfg.seed,
            zone: derive_seed(cfg.seed, 0),
            repeats: (0..cfg.repeats)
                .map(|r| derive_seed(cfg.seed, 1 + r as u64))
                .collect(),
        },
        config: cfg,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    auc: f64,
    ap: f64,
    n: usize,
    n_normal: usize,
    n_abnormal: usize,
    threshold: f64,
    config: RunConfig,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = RunConfig::resolve(&a.opts)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let zone_cfg = cfg.zone_cfg(Some(ck.params.feature_dim / 2))?;
    let clips = load_corpus_clips(&a.manifest, cfg.working_size)?;
    eprintln!("scoring {} clips", clips.len());

    let truths: Vec<bool> = clips.iter().map(|(_, _, t)| *t).collect();
    let named: Vec<(String, VideoClip)> = clips
        .into_iter()
        .map(|(id, clip, _)| (id, clip))
        .collect();
    let scores: Vec<DzlScore> =
        score_corpus(&named, &cfg.flow, &zone_cfg, &ck, cfg.repeats, cfg.seed)?;
    let values: Vec<f64> = scores.iter().map(|s| s.score).collect();

    // abnormal clips should score low; they are the positive class
    let auc_value = auc(&values, &truths)?;
    let ap_value = average_precision(&values, &truths)?;
    let threshold = match cfg.threshold {
        Some(t) => t,
        None => youden_threshold(&values, &truths)?,
    };

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut csv = String::from("id,score,truth,call\n");
    for (s, &truth) in scores.iter().zip(&truths) {
        let call = if s.score < threshold { "abnormal" } else { "normal" };
        let truth = if truth { "abnormal" } else { "normal" };
        csv.push_str(&format!("{},{},{},{}\n", s.clip, s.score, truth, call));
    }
    write_file(&a.out.join("scores.csv"), csv.as_bytes())?;

    let summary = EvalSummary {
        auc: auc_value,
        ap: ap_value,
        n: values.len(),
        n_normal: truths.iter().filter(|&&t| !t).count(),
        n_abnormal: truths.iter().filter(|&&t| t).count(),
        threshold,
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    write_file(&a.out.join("summary.json"), json.as_bytes())?;
    println!("{json}");
    Ok(())
}

fn cmd_flow_debug(a: FlowDebugArgs) -> Result<()> {
    let cfg = RunConfig::resolve(&a.opts)?;
    if a.stride == 0 {
        return Err(Error::InvalidParam("stride must be at least 1".into()));
    }
    let clip = load_clip(&a.clip)?;
    let clip = resize_clip(&clip, cfg.working_size, cfg.working_size)?;
    if a.frame_index + 1 >= clip.len() {
        return Err(Error::InvalidParam(format!(
            "frame index {} out of range; clip has {} frames so the last pair starts at {}",
            a.frame_index,
            clip.len(),
            clip.len() - 2
        )));
    }
    let flow = compute_flow(
        &clip.frames()[a.frame_index],
        &clip.frames()[a.frame_index + 1],
        &cfg.flow,
    )?;

    let (w, h) = (flow.width(), flow.height());
    let mut mags = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(x, y);
            mags.push(dx.hypot(dy));
        }
    }
    let max_mag = mags.iter().cloned().fold(0.0, f64::max);
    let mean_mag = mags.iter().sum::<f64>() / mags.len() as f64;
    // max maps to white; an all-zero field stays black
    let normalized: Vec<f64> = if max_mag > 0.0 {
        mags.iter().map(|m| m / max_mag).collect()
    } else {
        mags.clone()
    };

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let pgm_path = a.out.join("flow_magnitude.pgm");
    save_pgm(&pgm_path, &Frame::new(w, h, normalized)?)?;

    let mut csv = String::from("x,y,dx,dy\n");
    for y in (0..h).step_by(a.stride) {
        for x in (0..w).step_by(a.stride) {
            let (dx, dy) = flow.at(x, y);
            csv.push_str(&format!("{x},{y},{dx},{dy}\n"));
        }
    }
    let csv_path = a.out.join("flow_vectors.csv");
    write_file(&csv_path, csv.as_bytes())?;

    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "clip": a.clip,
            "frame_index": a.frame_index,
            "width": w,
            "height": h,
            "mean_magnitude": mean_mag,
            "max_magnitude": max_mag,
            "magnitude_pgm": pgm_path,
            "vectors_csv": csv_path,
            "config": cfg,
        }))?
    );
    Ok(())
}
