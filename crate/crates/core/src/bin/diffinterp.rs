use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use diffinterp::backend::{backend_by_name, Image};
use diffinterp::diffusion::Motion;
use diffinterp::inversion::InversionConfig;
use diffinterp::metrics::RandomProjection;
use diffinterp::project::{apply_config_override, evaluate_projects, NodeFilter, Prompts, Session, PROJECT_FILE};
use diffinterp::service::{router, AppState};
use diffinterp::tree::{GenerationConfig, Scheme};

#[derive(Parser)]
#[command(name = "diffinterp", version, about = "Interpolate between two images with latent diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an interpolation sequence into a project directory.
    Generate(Box<GenerateArgs>),
    /// Score the frames of finished projects.
    Evaluate(EvaluateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    image_a: PathBuf,
    #[arg(long)]
    image_b: PathBuf,
    /// Number of intervals; frames 0..=N are written.
    #[arg(long)]
    frames: Option<usize>,
    /// ours, interpolate_only, interpolate_denoise, did or did_unshared.
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Smallest noise level as a fraction of the schedule.
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    /// Schedule length T.
    #[arg(long)]
    steps: Option<u32>,
    /// Candidates generated per node; the best-scoring one is kept.
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value = "")]
    negative_prompt: String,
    /// Condition on poses extracted from the inputs.
    #[arg(long, overrides_with = "no_pose")]
    pose: bool,
    #[arg(long)]
    no_pose: bool,
    /// `toy`, or `process` to run the worker in $DIFFINTERP_WORKER.
    #[arg(long, default_value = "toy")]
    backend: String,
    /// `zoom:<factor>` or `translate:<dx>,<dy>`.
    #[arg(long)]
    motion: Option<Motion>,
    /// Skip textual inversion and use the encoded prompts as they are.
    #[arg(long)]
    no_invert: bool,
    #[arg(long)]
    inversion_iterations: Option<usize>,
    #[arg(long)]
    inversion_lr: Option<f64>,
    /// Project directory; an existing project is resumed.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Completed project directories.
    #[arg(required = true)]
    projects: Vec<PathBuf>,
    /// Comma-separated schemes; all five when absent.
    #[arg(long, value_delimiter = ',')]
    schemes: Vec<Scheme>,
    #[arg(long, default_value = "toy")]
    backend: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Directory holding one subdirectory per project.
    #[arg(long, default_value = "projects")]
    root: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value = "toy")]
    backend: String,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => generate(*args),
        Command::Evaluate(args) => evaluate(args),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already embed their cause in the message
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn config_from_flags(args: &GenerateArgs) -> GenerationConfig {
    let mut c = GenerationConfig::default();
    if let Some(v) = args.frames {
        c.num_frames = v;
    }
    if let Some(v) = args.scheme {
        c.scheme = v;
    }
    if let Some(v) = args.t_min {
        c.t_min_frac = v;
    }
    if let Some(v) = args.t_max {
        c.t_max_frac = v;
    }
    if let Some(v) = args.steps {
        c.num_steps = v;
    }
    if let Some(v) = args.candidates {
        c.num_candidates = v;
    }
    if let Some(v) = args.seed {
        c.global_seed = v;
    }
    if let Some(v) = args.guidance {
        c.guidance_scale = v;
    }
    if args.no_pose {
        c.use_pose = false;
    }
    c.motion = args.motion;
    c
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let config = apply_config_override(&args.out, config_from_flags(&args))?;
    config.validate()?;
    let backend = backend_by_name(&args.backend)?;
    let mut session = if args.out.join(PROJECT_FILE).is_file() {
        tracing::info!("resuming project in {}", args.out.display());
        let mut s = Session::open(&args.out, backend)?;
        s.reconfigure(config)?;
        s
    } else {
        let a = load_image(&args.image_a)?;
        let b = load_image(&args.image_b)?;
        let inversion = (!args.no_invert).then(|| {
            let d = InversionConfig::default();
            InversionConfig {
                iterations: args.inversion_iterations.unwrap_or(d.iterations),
                learning_rate: args.inversion_lr.unwrap_or(d.learning_rate),
                seed: config.global_seed,
                ..d
            }
        });
        let prompts = Prompts {
            positive: args.prompt.clone(),
            negative: args.negative_prompt.clone(),
        };
        let id = args
            .out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "project".into());
        Session::create(&args.out, &id, &a, &b, prompts, config, inversion, backend)?
    };
    let mut last = -1.0;
    let summary = session.generate(&NodeFilter::All, &mut |p| {
        if p - last >= 0.1 || p >= 1.0 {
            tracing::info!("progress {:.0}%", p * 100.0);
            last = p;
        }
    })?;
    if !summary.complete {
        bail!("generation stopped before every frame was available");
    }
    println!(
        "{} frames in {} ({} nodes generated, {} reused)",
        session.project().config.num_frames + 1,
        args.out.display(),
        summary.generated.len(),
        summary.reused.len()
    );
    Ok(())
}

fn load_image(path: &Path) -> anyhow::Result<Image> {
    Image::load(path).context("reading input image")
}

fn evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let schemes = if args.schemes.is_empty() { Scheme::ALL.to_vec() } else { args.schemes };
    let backend = backend_by_name(&args.backend)?;
    let report = evaluate_projects(&args.projects, &schemes, backend, &RandomProjection::default(), args.seed)?;
    print!("{}", report.to_text());
    if let Some(path) = args.report {
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let backend = backend_by_name(&args.backend)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let state = AppState::start(&args.root, backend)?;
        let listener = tokio::net::TcpListener::bind(args.addr).await?;
        tracing::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}
