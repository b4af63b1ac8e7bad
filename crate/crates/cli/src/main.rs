use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use egdnet_core::data::{
    center_crop_resize, load_dataset, read_ppm, save_dataset, synth_generate, write_dpt, write_ppm,
    DepthSample,
};
use egdnet_core::gradsuite;
use egdnet_core::model::EgdNet;
use egdnet_core::nn::Mode;
use egdnet_core::train::{evaluate, train, Checkpoint, RelDenominator, RunConfig};
use egdnet_core::Tensor;

#[derive(Parser)]
#[command(name = "egdnet", version, about = "Edge-guided monocular depth estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file on a PPM/DPT dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Predict depth for one image.
    Infer(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print the parameter count of a config.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a procedural dataset.
    SynthGen(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Single-threaded, bitwise reproducible run.
    #[arg(long)]
    deterministic: bool,
    /// Augmentation worker threads (ignored with --deterministic).
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// ground_truth or prediction
    #[arg(long, default_value = "ground_truth")]
    rel_denominator: RelDenominator,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the edge probability map (half resolution, grayscale).
    #[arg(long)]
    edge: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run a single named case.
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// List case names and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// WxH, both divisible by 16.
    #[arg(long, default_value = "64x48", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    Ok((w, h))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Params { config } => cmd_params(config.as_deref()),
        Command::SynthGen(a) => cmd_synth(a),
    }
}

/// Loads a dataset, bringing raw 640x480 captures to the model frame.
fn load_for(dir: &Path, width: usize, height: usize) -> Result<Vec<DepthSample>> {
    let mut out = Vec::new();
    for s in load_dataset(dir)? {
        let mut s = s?;
        if (s.width, s.height) != (width, height) && (s.width, s.height) == (640, 480) && (width, height) == (320, 240) {
            s = center_crop_resize(&s)?;
        }
        if (s.width, s.height) != (width, height) {
            bail!(
                "{}: sample {} is {}x{} but the model expects {width}x{height}",
                dir.display(),
                out.len(),
                s.width,
                s.height
            );
        }
        out.push(s);
    }
    if out.is_empty() {
        bail!("{}: no samples found", dir.display());
    }
    Ok(out)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let data = load_for(&a.data, cfg.model.input_width, cfg.model.input_height)?;
    let model = EgdNet::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.txt"), cfg.to_kv_text())
        .with_context(|| format!("writing config to {}", a.out.display()))?;
    log::info!("{} samples, {} parameters", data.len(), model.count_params());
    let workers = if a.deterministic { 1 } else { a.workers.max(1) };
    let t = Instant::now();
    let outcome = train(&model, &cfg.train, &data, Some(&a.out), workers, |_| {})?;
    log::info!("{} steps in {:.1}s", outcome.steps, t.elapsed().as_secs_f64());
    let report = evaluate(&model, &data, cfg.train.rel_denominator)?;
    println!("training set:\n{report}");
    for p in &outcome.written {
        log::debug!("wrote {}", p.display());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<EgdNet<f32>> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.build_model::<f32>().with_context(|| format!("restoring {}", path.display()))?;
    Ok(model)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let data = load_for(&a.data, model.cfg.input_width, model.cfg.input_height)?;
    let report = evaluate(&model, &data, a.rel_denominator)?;
    println!("{report}");
    println!("{}", report.to_json());
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (w, h) = (model.cfg.input_width, model.cfg.input_height);
    let (rgb, iw, ih) = read_ppm(&a.image)?;
    let rgb = if (iw, ih) == (w, h) {
        rgb
    } else if (iw, ih) == (640, 480) && (w, h) == (320, 240) {
        let s = DepthSample::new(iw, ih, rgb, vec![1.0; iw * ih])?;
        center_crop_resize(&s)?.rgb
    } else {
        bail!("{}: image is {iw}x{ih} but the model expects {w}x{h}", a.image.display());
    };
    let x = Tensor::<f32>::from_vec(rgb, &[1, 3, h, w])?;
    let out = model.forward(&x, Mode::Eval)?;
    let depth = out.depth.clamp(model.cfg.depth_min, model.cfg.depth_max);
    write_dpt(&a.out, depth.data(), w, h)?;
    if let Some(path) = a.edge {
        let p = out.edge_logits.sigmoid();
        write_ppm(&path, &p.data().repeat(3), w / 2, h / 2)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let cases = match &a.op {
        Some(name) => vec![gradsuite::find(name).with_context(|| format!("no gradient case named `{name}`"))?],
        None => gradsuite::cases(),
    };
    if a.list {
        for c in &cases {
            println!("{:<22} {:?}", c.name, c.kind);
        }
        return Ok(());
    }
    let t = Instant::now();
    let mut failed = 0;
    for c in &cases {
        let s = c.run_many(a.instances, a.seed)?;
        println!("{s}");
        for f in &s.failures {
            println!("    {f}");
        }
        failed += usize::from(!s.pass);
    }
    println!("{} cases, {failed} failed, {:.1}s", cases.len(), t.elapsed().as_secs_f64());
    if failed > 0 {
        bail!("{failed} gradient case(s) failed");
    }
    Ok(())
}

fn cmd_params(config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let model = EgdNet::<f32>::new(cfg.model, 0)?;
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (name, shape, kind) in model.layout() {
        if kind != egdnet_core::nn::EntryKind::Trainable {
            continue;
        }
        let group = name.split('.').take(2).collect::<Vec<_>>().join(".");
        let n: usize = shape.iter().product();
        match groups.last_mut() {
            Some((g, c)) if *g == group => *c += n,
            _ => groups.push((group, n)),
        }
    }
    for (g, n) in &groups {
        println!("{g:<20} {n:>10}");
    }
    println!("{:<20} {:>10}", "total", model.count_params());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let (w, h) = a.size;
    let samples = synth_generate(a.seed, a.count, w, h)?;
    save_dataset(&a.out, &samples)?;
    println!("wrote {} samples ({w}x{h}) to {}", samples.len(), a.out.display());
    Ok(())
}

