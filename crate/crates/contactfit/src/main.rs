use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use contactfit::assets::{write_assets, Bundle};
use contactfit::error::{AppError, Result};
use contactfit::gateway::{load_responses, CacheMode, Gateway, PromptTemplate, QuerySpec, Rect};
use contactfit::pipeline::{evaluate, parse_all, run_scene_file, GatewayOptions};
use contactfit::scene::{GroundTruth, Scene};
use contactfit::synth::{synth_scene, write_synthetic, SynthKind, SynthSpec};
use contactfit_core::body_model::PoseParams;
use contactfit_core::metrics::PCC_RADII_MM;
use contactfit_core::Mode;

#[derive(Parser)]
#[command(name = "contactfit", version, about = "Refine body poses with contact constraints read from model responses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Body model JSON; the built-in stick figure when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Region definitions JSON.
    #[arg(long)]
    regions: Option<PathBuf>,
    /// Pose prior JSON.
    #[arg(long)]
    prior: Option<PathBuf>,
}

impl ModelArgs {
    fn bundle(&self) -> Result<Bundle> {
        Bundle::load(self.model.as_deref(), self.regions.as_deref(), self.prior.as_deref())
    }
}

#[derive(Args, Clone)]
struct CacheArgs {
    /// Response cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Only read cached responses (default).
    #[arg(long, conflicts_with = "record")]
    replay: bool,
    /// Query the endpoint and overwrite the cache entry.
    #[arg(long)]
    record: bool,
}

impl CacheArgs {
    fn options(&self) -> Option<GatewayOptions> {
        let mode = if self.record { CacheMode::Record } else { CacheMode::Replay };
        self.cache.clone().map(|cache_dir| GatewayOptions { cache_dir, mode })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit one scene and write its output directory.
    Optimize {
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Partial config JSON laid over the mode defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cache: CacheArgs,
    },
    /// Fit several scenes in parallel.
    Batch {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cache: CacheArgs,
    },
    /// Sample responses for an image and store them in the cache.
    QueryLmm {
        #[arg(long)]
        image: PathBuf,
        /// x,y,w,h in pixels.
        #[arg(long)]
        crop: Option<Rect>,
        /// `two-person`, `one-person`, or a file with the system text.
        #[arg(long, default_value = "two-person")]
        prompt: String,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0.7)]
        temperature: f64,
        /// Cache directory.
        #[arg(long)]
        out: PathBuf,
        /// Read the entry instead of querying.
        #[arg(long)]
        replay: bool,
    },
    /// Parse responses into canonical constraint sets.
    Parse {
        /// JSON list of responses or a directory of samples.
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, value_parser = parse_mode, default_value = "two-person")]
        mode: Mode,
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a result directory against ground truth.
    Evaluate {
        /// Output directory holding params.json.
        #[arg(long)]
        pred: PathBuf,
        /// Scene file with ground truth, or a bare ground-truth file.
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic scene with fixture responses.
    Synth {
        #[arg(long)]
        kind: SynthKind,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write meshes for a params file.
    ExportObj {
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Directory for person<i>.obj.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in model, regions and prior as JSON.
    GenAssets {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown mode {s:?} (two-person or one-person)"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Optimize { scene, model, config, out, cache } => {
            let bundle = model.bundle()?;
            let result = run_scene_file(&scene, &bundle, config.as_deref(), cache.options().as_ref(), &out)?;
            log::info!("{}: backoff={} samples={}", result.report.scene_id, result.report.backoff, result.report.num_samples);
            if let Some(m) = &result.metrics {
                println!(
                    "{} pa-mpjpe {:.2} mm (per person {:.2}), pcc {:.3}",
                    result.report.scene_id, m.pa_mpjpe_joint, m.pa_mpjpe_per_person, m.pcc_avg
                );
            }
            Ok(())
        }
        Command::Batch { scenes, jobs, model, config, out, cache } => {
            let bundle = model.bundle()?;
            batch(&scenes, jobs.max(1), &bundle, config.as_deref(), cache.options().as_ref(), &out)
        }
        Command::QueryLmm { image, crop, prompt, n, temperature, out, replay } => {
            let mut template = match prompt.as_str() {
                "two-person" => PromptTemplate::for_mode(Mode::TwoPerson),
                "one-person" => PromptTemplate::for_mode(Mode::OnePerson),
                path => {
                    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
                    PromptTemplate { system_text: text, ..PromptTemplate::for_mode(Mode::TwoPerson) }
                }
            };
            template.n_samples = n;
            template.temperature = temperature;
            let bytes = std::fs::read(&image).map_err(|e| AppError::io(&image, e))?;
            let spec = QuerySpec::new(&bytes, crop, template)?;
            let mode = if replay { CacheMode::Replay } else { CacheMode::Record };
            let gateway = Gateway::from_env(&out, mode);
            let responses = gateway.sample(&spec)?;
            println!("{} {} samples", gateway.entry_dir(&spec.cache_key()).display(), responses.len());
            Ok(())
        }
        Command::Parse { responses, mode, regions, out } => {
            let bundle = Bundle::load(None, regions.as_deref(), None)?;
            let raw = load_responses(&responses)?;
            let (sets, warnings) = parse_all(&raw, &bundle, mode);
            for w in &warnings {
                log::warn!("{w}");
            }
            let canon: Vec<_> = sets.iter().map(|s| s.canonical(&bundle.registry)).collect();
            contactfit::io::write_json(&out, &canon)
        }
        Command::Evaluate { pred, gt, model, out } => {
            let bundle = model.bundle()?;
            let params: Vec<PoseParams> = contactfit::io::read_json(&pred.join("params.json"))?;
            let (mode, truth) = load_truth(&gt)?;
            if params.len() != mode.num_persons() {
                return Err(AppError::Validation(format!(
                    "prediction has {} person(s), ground truth {}",
                    params.len(),
                    mode.num_persons()
                )));
            }
            for p in &params {
                bundle.model.check_params(p)?;
            }
            let report = evaluate(&bundle, mode, &params, &truth, &PCC_RADII_MM)?;
            contactfit::io::write_json(&out, &report)
        }
        Command::Synth { kind, noise, seed, out } => {
            let bundle = Bundle::builtin()?;
            let synth = synth_scene(&bundle, SynthSpec { kind, noise, seed })?;
            write_synthetic(&out, &synth)
        }
        Command::ExportObj { params, model, out } => {
            let bundle = model.bundle()?;
            let params: Vec<PoseParams> = contactfit::io::read_json(&params)?;
            for (i, p) in params.iter().enumerate() {
                let posed = bundle.model.forward(p)?;
                contactfit::io::export_obj(&posed.vertices, bundle.model.faces(), &out.join(format!("person{i}.obj")))?;
            }
            Ok(())
        }
        Command::GenAssets { out } => write_assets(&out),
    }
}

fn load_truth(path: &Path) -> Result<(Mode, GroundTruth)> {
    let value: serde_json::Value = contactfit::io::read_json(path)?;
    if value.get("persons").is_some() {
        let scene = Scene::load(path)?;
        let gt = scene
            .gt
            .ok_or_else(|| AppError::Validation(format!("{}: scene has no ground truth", path.display())))?;
        return Ok((scene.mode, gt));
    }
    let gt: GroundTruth =
        serde_json::from_value(value).map_err(|e| AppError::Json { path: path.to_path_buf(), source: e })?;
    let mode = match gt.joints.len() {
        1 => Mode::OnePerson,
        2 => Mode::TwoPerson,
        n => return Err(AppError::Validation(format!("ground truth for {n} people"))),
    };
    Ok((mode, gt))
}

/// Scenes are claimed from a shared counter; the first failure decides the
/// exit status but every scene still runs.
fn batch(
    scenes: &[PathBuf],
    jobs: usize,
    bundle: &Bundle,
    config: Option<&Path>,
    gateway: Option<&GatewayOptions>,
    out: &Path,
) -> Result<()> {
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(usize, AppError)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(scenes.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(path) = scenes.get(i) else { break };
                match run_scene_file(path, bundle, config, gateway, out) {
                    Ok(o) => log::info!("{}: done", o.report.scene_id),
                    Err(e) => {
                        eprintln!("{}: {e}", path.display());
                        failures.lock().expect("failure list").push((i, e));
                    }
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("failure list");
    failures.sort_by_key(|(i, _)| *i);
    match failures.into_iter().next() {
        None => Ok(()),
        Some((_, e)) => Err(e),
    }
}
