//! `vrnet` command-line front end.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vrnet_core::checkpoint::Checkpoint;
use vrnet_core::config::RunConfig;
use vrnet_core::dataset;
use vrnet_core::eval::{self, EvalReport, ImageDetections, IouCounter};
use vrnet_core::gradsuite;
use vrnet_core::heads::Detection;
use vrnet_core::model::Sample;
use vrnet_core::mtl::Weighting;
use vrnet_core::radar::NormRanges;
use vrnet_core::render;
use vrnet_core::synth::{self, Adversity, SynthConfig};
use vrnet_core::train::{Trainer, LOG_VAR_PARAM};
use vrnet_core::{Error, Result};
use vrnet_tensor::FdOptions;

#[derive(Debug, Parser)]
#[command(name = "vrnet", version, about = "Vision-radar waterway perception: synth, train, eval, infer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Render prediction overlays for one scene.
    Infer(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// none, dark, fog or droplet.
    #[arg(long, default_value = "none")]
    adversity: Adversity,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    /// Comma-separated components to switch off.
    #[arg(long, value_delimiter = ',')]
    disable: Vec<String>,
    /// `uncertainty` or `manual:w_box,w_conf,w_cls,w_seg`.
    #[arg(long)]
    weighting: Option<Weighting>,
    /// Tab-separated per-step metrics.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving report.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Score the ground truth itself instead of model outputs.
    #[arg(long, hide = true)]
    oracle_predictions: bool,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn synth_cmd(a: SynthArgs) -> Result<i32> {
    let cfg = SynthConfig {
        size: a.size,
        adversity: a.adversity,
        ..SynthConfig::default()
    };
    let scenes = synth::generate_dataset(a.scenes, a.seed, &cfg)?;
    dataset::write_dataset(&scenes, &a.out)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(0)
}

fn load_samples(dir: &Path, frames: usize) -> Result<Vec<Sample>> {
    let scenes = dataset::read_dataset(dir)?;
    scenes
        .iter()
        .map(|s| Sample::from_scene(s, frames, &NormRanges::default()))
        .collect()
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(a.preset.as_deref().unwrap_or("desk"))?,
    };
    for name in &a.disable {
        *cfg.model.ablations.flag_mut(name.trim())? = false;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(w) = a.weighting {
        cfg.train.weighting = w;
    }
    cfg.validate()?;
    let data = load_samples(&a.data, cfg.model.revp_frames())?;
    let mut trainer = Trainer::new(&cfg.model, cfg.train.clone())?;
    let history = match &a.log {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(io(p))?);
            let h = trainer.run(&data, Some(&mut w))?;
            w.flush().map_err(io(p))?;
            h
        }
        None => trainer.run(&data, None)?,
    };
    Checkpoint::from_store(&trainer.store, Some(&cfg.to_text())).save(&a.out)?;
    match (history.first(), history.last()) {
        (Some(f), Some(l)) => println!("trained {} steps: total {:.4} -> {:.4}", history.len(), f.total, l.total),
        _ => println!("trained 0 steps"),
    }
    println!("checkpoint written to {}", a.out.display());
    Ok(0)
}

/// Model and parameters restored from a checkpoint with an embedded config.
fn restore(path: &Path) -> Result<(RunConfig, Trainer)> {
    let ck = Checkpoint::load(path)?;
    let text = ck
        .config_text()
        .ok_or_else(|| Error::Checkpoint(format!("{}: no embedded config", path.display())))??;
    let cfg = RunConfig::parse(&text)?;
    let mut trainer = Trainer::new(&cfg.model, cfg.train.clone())?;
    ck.apply_to(&mut trainer.store)?;
    debug_assert!(trainer.store.id(LOG_VAR_PARAM).is_some());
    Ok((cfg, trainer))
}

fn class_names(c_seg: usize) -> Vec<String> {
    (0..c_seg).map(|c| format!("class{c}")).collect()
}

fn oracle_detections(s: &Sample) -> Vec<Detection> {
    s.gts
        .iter()
        .map(|g| Detection {
            class_id: g.class_id,
            score: 1.0,
            x1: g.bbox[0],
            y1: g.bbox[1],
            x2: g.bbox[2],
            y2: g.bbox[3],
        })
        .collect()
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    let (cfg, trainer) = restore(&a.ckpt)?;
    let data = load_samples(&a.data, cfg.model.revp_frames())?;
    let c_seg = cfg.model.c_seg;
    let mut images = Vec::with_capacity(data.len());
    let mut counter = IouCounter::new(cfg.model.seg_classes());
    for s in &data {
        let (preds, mask) = if a.oracle_predictions {
            (oracle_detections(s), s.mask.clone())
        } else {
            let p = trainer.model.predict(&trainer.store, &s.image, &s.revp)?;
            (p.detections, p.mask)
        };
        counter.add(&mask, &s.mask);
        images.push(ImageDetections {
            preds,
            gts: s.gts.clone(),
        });
    }
    let det = eval::eval_map(&images, c_seg);
    let report = EvalReport::new(&det, &counter.metrics(c_seg), &class_names(c_seg));
    print!("{}", report.table());
    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    let path = a.out.join("report.json");
    fs::write(&path, report.to_json()).map_err(io(&path))?;
    Ok(0)
}

fn infer_cmd(a: InferArgs) -> Result<i32> {
    let (cfg, trainer) = restore(&a.ckpt)?;
    let scene = dataset::read_scene(&a.scene)?;
    let sample = Sample::from_scene(&scene, cfg.model.revp_frames(), &NormRanges::default())?;
    let pred = trainer.model.predict(&trainer.store, &sample.image, &sample.revp)?;
    let (h, w) = (scene.height, scene.width);
    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    let mut boxes = render::to_rgb8(&scene.image, h, w);
    render::draw_boxes(&mut boxes, w, h, &pred.detections);
    render::write_png(&a.out.join("boxes.png"), w, h, &boxes)?;
    let mut mask = render::to_rgb8(&scene.image, h, w);
    render::blend_mask(&mut mask, &pred.mask, cfg.model.c_seg);
    render::write_png(&a.out.join("mask.png"), w, h, &mask)?;
    println!("{} detections; overlays in {}", pred.detections.len(), a.out.display());
    Ok(0)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<i32> {
    let opts = FdOptions {
        samples_per_param: a.samples,
        seed: a.seed,
        ..FdOptions::default()
    };
    let cases = gradsuite::run_suite(&opts)?;
    let mut failed = 0;
    for c in &cases {
        let ok = c.passed(opts.tolerance);
        failed += usize::from(!ok);
        println!(
            "{:<20} {}  max_rel_err={:.3e}  coords={}  {:.2}s",
            c.name,
            if ok { "PASS" } else { "FAIL" },
            c.report.max_rel_err,
            c.report.coordinates(),
            c.seconds
        );
    }
    Ok(i32::from(failed > 0))
}
