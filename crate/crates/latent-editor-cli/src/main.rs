//! Command-line pipeline: scene synthesis, initialization training, editing,
//! rendering, and evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration problem.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latent_editor::checkpoint::{load_checkpoint, save_checkpoint};
use latent_editor::config::RunConfig;
use latent_editor::delta::Mask;
use latent_editor::diffusion::backends::{
    ExternalDenoiser, IdentityDenoiser, OracleEditDenoiser, Saturation,
};
use latent_editor::diffusion::Denoiser;
use latent_editor::edit::{
    directional_similarity, edit_psnr, metrics, split_prompt, EditConfig, EditSession,
    RandomProjectionEmbedder,
};
use latent_editor::error::Error;
use latent_editor::field::train::FitConfig;
use latent_editor::field::{
    fit, render_view, FieldState, OptimizerState, RenderConfig,
};
use latent_editor::refine::AdapterWeights;
use latent_editor::scene::io::{load_scene, write_pgm, write_rgb_png, write_scene, write_tensor, Dtype};
use latent_editor::scene::{synth_scene, Codec, SceneDataset, SceneSpec};

#[derive(Parser)]
#[command(name = "latent-editor", version, about)]
struct Cli {
    /// Configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for every stochastic component.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory (meaning depends on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Denoiser backend: oracle_edit, identity, or external.
    #[arg(long, global = true)]
    backend: Option<String>,

    /// Override single config keys, e.g. `--set edit.mu=0.3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory.
    Synth(SynthArgs),
    /// Train field and adapter on a scene (model initialization).
    Init(InitArgs),
    /// Edit a scene with text prompts via iterative dataset update.
    Edit(EditArgs),
    /// Render latent maps (and decoded images) for the scene's cameras.
    Render(RenderArgs),
    /// Compare two checkpoints over a scene.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene family (currently `box`).
    #[arg(long, default_value = "box")]
    spec: String,
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 48)]
    width: usize,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Total training steps (defaults to `init.steps` from the config).
    #[arg(long)]
    steps: Option<u64>,
    /// Train without the refinement loss.
    #[arg(long)]
    no_adapter: bool,
    /// Resume from an existing checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Initialization checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Editing instruction; clauses joined by "and" become separate edits.
    #[arg(long)]
    prompts: String,
    /// Write one PGM per prompt per dataset update into this directory.
    #[arg(long)]
    dump_masks: Option<PathBuf>,
    /// Total editing iterations (defaults to `edit.iterations`).
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Render only every n-th view.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    /// Prompt pair for directional similarity under the mock embedder.
    #[arg(long)]
    prompt_before: Option<String>,
    #[arg(long)]
    prompt_after: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Format(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.apply_override(key.trim(), value.trim())?;
    }
    if let Some(name) = &cli.backend {
        cfg.backend.name = name.clone();
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf, Error> {
    cli.out
        .clone()
        .ok_or_else(|| Error::config("this command needs --out DIR"))
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Synth(args) => cmd_synth(&cli, args),
        Command::Init(args) => cmd_init(&cli, &config, args),
        Command::Edit(args) => cmd_edit(&cli, &config, args),
        Command::Render(args) => cmd_render(&cli, &config, args),
        Command::Eval(args) => cmd_eval(&cli, &config, args),
    }
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<(), Error> {
    let out = out_dir(cli)?;
    let spec = SceneSpec::named(&args.spec, args.views, args.height, args.width)?;
    // Bad view counts are a configuration problem at this surface.
    let ds = synth_scene(&spec, cli.seed).map_err(|e| match e {
        Error::Validation(msg) => Error::Config(msg),
        other => other,
    })?;
    write_scene(&out, &ds)?;
    println!(
        "wrote scene {:?}: {} views of {}x{} latents",
        out,
        ds.n_views(),
        args.height,
        args.width
    );
    Ok(())
}

fn adapter_seed(seed: u64) -> u64 {
    seed ^ 0xadaf
}

fn cmd_init(cli: &Cli, config: &RunConfig, args: &InitArgs) -> Result<(), Error> {
    let out = out_dir(cli)?;
    let mut dataset = load_scene(&args.scene)?;
    let steps = args.steps.unwrap_or(config.init.steps);
    let mut phases = config.init_phases(steps)?;
    if args.no_adapter {
        for p in phases.iter_mut() {
            p.weights.lambda_f = 0.0;
        }
    }

    let (mut field, mut adapter, mut opt, precondition) = match &args.resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir, config.train.lr_field, config.train.lr_camera)?;
            ckpt.apply_to_cameras(dataset.cameras_mut())?;
            let opt = ckpt.opt.ok_or_else(|| {
                Error::config("checkpoint has no optimizer state; cannot resume")
            })?;
            (ckpt.field, ckpt.adapter, opt, false)
        }
        None => {
            let field = FieldState::init(config.field_arch()?, cli.seed);
            let adapter = AdapterWeights::init(config.adapter.channels, adapter_seed(cli.seed))?;
            let opt = OptimizerState::new(
                &field,
                &adapter,
                dataset.n_views(),
                config.train.lr_field,
                config.train.lr_camera,
            );
            (field, adapter, opt, true)
        }
    };

    let fit_cfg = FitConfig {
        steps,
        patch_size: config.train.patch_size,
        samples_per_ray: config.train.samples_per_ray,
        background: config.train.background,
        stratified: config.train.stratified,
        phases,
        seed: cli.seed,
        lr_field: config.train.lr_field,
        lr_camera: config.train.lr_camera,
        lr_final_fraction: config.train.lr_final_fraction,
        precondition,
    };
    let mut last_print = std::time::Instant::now();
    fit(
        &mut field,
        &mut adapter,
        &mut dataset,
        &mut opt,
        &fit_cfg,
        |step, report| {
            if step == 0 || last_print.elapsed().as_secs() >= 5 {
                println!(
                    "step {step}: loss_r {:.6} loss_f {:.6} loss_reg {:.6}",
                    report.loss_r, report.loss_f, report.loss_reg
                );
                last_print = std::time::Instant::now();
            }
        },
    )?;
    save_checkpoint(&out, &field, &adapter, dataset.cameras(), Some(&opt), cli.seed)?;
    println!("wrote checkpoint {:?} at step {}", out, field.step_count);
    Ok(())
}

struct PromptBackends {
    backends: Vec<Box<dyn Denoiser>>,
}

fn build_backends(
    config: &RunConfig,
    dataset: &SceneDataset,
    n_prompts: usize,
) -> Result<PromptBackends, Error> {
    let mut backends: Vec<Box<dyn Denoiser>> = Vec::with_capacity(n_prompts);
    match config.backend.name.as_str() {
        "oracle_edit" => {
            let regions = dataset.ground_truth_edit_region.clone().ok_or_else(|| {
                Error::config("oracle_edit backend needs a scene with ground-truth edit regions")
            })?;
            for _ in 0..n_prompts {
                let mut oracle = OracleEditDenoiser::with_regions(
                    regions.clone(),
                    config.oracle.direction,
                    config.oracle.magnitude,
                )?;
                if config.oracle.target > 0.0 {
                    oracle = oracle.saturating(Saturation {
                        target: config.oracle.target,
                        s_text: config.guidance.s_text,
                        schedule: config.noise_schedule()?,
                    });
                }
                backends.push(Box::new(oracle));
            }
        }
        "identity" => {
            for _ in 0..n_prompts {
                backends.push(Box::new(IdentityDenoiser::new()));
            }
        }
        "external" => {
            for _ in 0..n_prompts {
                backends.push(Box::new(ExternalDenoiser::spawn(
                    &config.backend.external_command,
                )?));
            }
        }
        other => return Err(Error::config(format!("unknown backend {other:?}"))),
    }
    Ok(PromptBackends { backends })
}

fn cmd_edit(cli: &Cli, config: &RunConfig, args: &EditArgs) -> Result<(), Error> {
    let out = out_dir(cli)?;
    let dataset = load_scene(&args.scene)?;
    let ckpt = load_checkpoint(&args.ckpt, config.train.lr_field, config.train.lr_camera)?;
    let mut dataset = dataset;
    ckpt.apply_to_cameras(dataset.cameras_mut())?;

    let prompts = split_prompt(&args.prompts)?;
    println!("editing with {} prompt(s): {:?}", prompts.len(), prompts);
    let holders = build_backends(config, &dataset, prompts.len())?;
    let backends: Vec<&dyn Denoiser> = holders.backends.iter().map(|b| b.as_ref()).collect();

    let iterations = args.iterations.unwrap_or(config.edit.iterations);
    let edit_cfg = EditConfig {
        editing_rate: config.edit.editing_rate,
        mask_threshold: config.edit.mu,
        guidance: config.guidance(),
        edit_iterations: iterations,
        phase_schedule: config.edit_phases(iterations)?,
        refresh_mask_each_edit: config.edit.refresh_mask_each_edit,
        ddim_steps: config.edit.ddim_steps,
        samples_per_ray: config.train.samples_per_ray,
        background: config.train.background,
        patch_size: config.train.patch_size,
        stratified: config.train.stratified,
    };
    edit_cfg.validate()?;
    let sched = config.noise_schedule()?;

    if let Some(dir) = &args.dump_masks {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::create_dir_all(&out)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("session.log"))?);

    let mut session = EditSession::new(
        ckpt.field,
        ckpt.adapter,
        dataset,
        config.train.lr_field,
        config.train.lr_camera,
    );
    let interval = config.train.checkpoint_interval;
    let mut last_print = std::time::Instant::now();
    while session.step < edit_cfg.edit_iterations {
        let record = session.step(&prompts, &backends, &edit_cfg, &sched, cli.seed)?;
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        if let (Some(dir), Some(masks)) = (&args.dump_masks, &session.last_du_masks) {
            for (j, mask) in masks.iter().enumerate() {
                write_pgm(
                    &dir.join(format!("mask_step{:06}_prompt{j}.pgm", record.step)),
                    &mask.data,
                )?;
            }
        }
        if record.step == 0 || last_print.elapsed().as_secs() >= 5 {
            println!(
                "iter {}: phase {} loss_r {:.6} du_view {:?}",
                record.step, record.phase, record.loss_r, record.du_view
            );
            last_print = std::time::Instant::now();
        }
        if interval > 0 && session.step % interval == 0 && session.step < edit_cfg.edit_iterations
        {
            save_checkpoint(
                &out.join(format!("step_{:07}", session.step)),
                &session.field,
                &session.adapter,
                session.dataset.cameras(),
                None,
                cli.seed,
            )?;
        }
    }
    log.flush()?;
    save_checkpoint(
        &out,
        &session.field,
        &session.adapter,
        session.dataset.cameras(),
        None,
        cli.seed,
    )?;
    println!(
        "edited: {} dataset updates over {} iterations; checkpoint in {:?}",
        session.du_count(),
        edit_cfg.edit_iterations,
        out
    );
    Ok(())
}

fn render_all(
    field: &FieldState,
    adapter: &AdapterWeights,
    dataset: &SceneDataset,
    config: &RunConfig,
) -> Result<Vec<latent_editor::scene::LatentImage>, Error> {
    let shape = dataset.latent_shape();
    let rcfg = RenderConfig {
        samples_per_ray: config.train.samples_per_ray,
        background_latent: config.train.background,
        stratified: false,
        seed: 0,
    };
    (0..dataset.n_views())
        .map(|v| render_view(field, Some(adapter), dataset.camera(v), &rcfg, shape, v))
        .collect()
}

fn cmd_render(cli: &Cli, config: &RunConfig, args: &RenderArgs) -> Result<(), Error> {
    let out = out_dir(cli)?;
    let mut dataset = load_scene(&args.scene)?;
    let ckpt = load_checkpoint(&args.ckpt, config.train.lr_field, config.train.lr_camera)?;
    ckpt.apply_to_cameras(dataset.cameras_mut())?;
    std::fs::create_dir_all(&out)?;

    let shape = dataset.latent_shape();
    let rcfg = RenderConfig {
        samples_per_ray: config.train.samples_per_ray,
        background_latent: config.train.background,
        stratified: false,
        seed: 0,
    };
    let codec = Codec::identity();
    let stride = args.stride.max(1);
    for v in (0..dataset.n_views()).step_by(stride) {
        let latent = render_view(
            &ckpt.field,
            Some(&ckpt.adapter),
            dataset.camera(v),
            &rcfg,
            shape,
            v,
        )?;
        println!("rendered latent frame {v} ({} rays)", shape.0 * shape.1);
        write_tensor(
            &out.join(format!("frame_{v:03}.lte")),
            &latent_raw(&latent),
            Dtype::F32,
        )?;
        let rgb = codec.decode(&latent.data)?;
        let clamped = rgb.mapv(|x| x.clamp(0.0, 1.0));
        write_rgb_png(&out.join(format!("frame_{v:03}.png")), &clamped)?;
        println!("decoded frame {v}");
    }
    Ok(())
}

fn latent_raw(img: &latent_editor::scene::LatentImage) -> latent_editor::scene::io::RawTensor {
    let (h, w, c) = img.data.dim();
    latent_editor::scene::io::RawTensor {
        dims: [h, w, c],
        rank: 3,
        data: img.data.iter().copied().collect(),
    }
}

fn cmd_eval(cli: &Cli, config: &RunConfig, args: &EvalArgs) -> Result<(), Error> {
    let dataset = load_scene(&args.scene)?;
    let before_ckpt = load_checkpoint(&args.before, config.train.lr_field, config.train.lr_camera)?;
    let after_ckpt = load_checkpoint(&args.after, config.train.lr_field, config.train.lr_camera)?;

    let mut ds_before = dataset.clone();
    before_ckpt.apply_to_cameras(ds_before.cameras_mut())?;
    let mut ds_after = dataset.clone();
    after_ckpt.apply_to_cameras(ds_after.cameras_mut())?;

    let before = render_all(&before_ckpt.field, &before_ckpt.adapter, &ds_before, config)?;
    let after = render_all(&after_ckpt.field, &after_ckpt.adapter, &ds_after, config)?;

    let mut per_view = Vec::new();
    let mut psnr_outside_sum = 0.0;
    let mut cosine_sum = 0.0;
    let mut cosine_count = 0usize;
    for v in 0..dataset.n_views() {
        let (psnr_outside, psnr_inside, cosine_inside) = match &dataset.ground_truth_edit_region {
            Some(regions) => {
                let inside = Mask::from_map(regions[v].clone(), 0.5)?;
                let outside = Mask::from_map(regions[v].mapv(|x| 1 - x), 0.5)?;
                let po = edit_psnr(&before[v], &after[v], Some(&outside))?;
                let pi = edit_psnr(&before[v], &after[v], Some(&inside))?;
                let cos = metrics::mean_masked_displacement(&before[v], &after[v], &inside)
                    .ok()
                    .and_then(|disp| metrics::cosine(&disp, &config.oracle.direction).ok());
                (po, Some(pi), cos)
            }
            None => (edit_psnr(&before[v], &after[v], None)?, None, None),
        };
        psnr_outside_sum += psnr_outside;
        if let Some(c) = cosine_inside {
            cosine_sum += c;
            cosine_count += 1;
        }
        per_view.push(serde_json::json!({
            "view": v,
            "psnr_outside": psnr_outside,
            "psnr_inside": psnr_inside,
            "cosine_inside": cosine_inside,
        }));
    }

    let directional = match (&args.prompt_before, &args.prompt_after) {
        (Some(pb), Some(pa)) => {
            let embedder = RandomProjectionEmbedder::new(64, cli.seed);
            let sim = directional_similarity(&embedder, &before[0], &after[0], pb, pa);
            sim.ok()
        }
        _ => None,
    };

    let metrics_json = serde_json::json!({
        "n_views": dataset.n_views(),
        "mean_psnr_outside": psnr_outside_sum / dataset.n_views() as f64,
        "mean_cosine_inside": if cosine_count > 0 { Some(cosine_sum / cosine_count as f64) } else { None },
        "directional_similarity": directional,
        "per_view": per_view,
    });
    let text = serde_json::to_string_pretty(&metrics_json)?;
    match &cli.out {
        Some(out) => {
            if let Some(parent) = Path::new(out).parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(out, &text)?;
            println!("wrote metrics to {out:?}");
        }
        None => println!("{text}"),
    }
    Ok(())
}
