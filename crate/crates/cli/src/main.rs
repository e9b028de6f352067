//! `free360` command line: panorama geometry utilities, single-question
//! scene-graph runs, and benchmark evaluation.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use free360_core::backend::{BackendOptions, BackendRegistry};
use free360_core::bench::{
    evaluate, load_dataset, shared_backend, BackendProvider, EvalOptions, StrategyOptions,
    StrategyRegistry,
};
use free360_core::geom::{rotation_matrix, CmpLayout, PixelBox};
use free360_core::image;
use free360_core::pipeline::{Pipeline, PipelineConfig, PromptTemplates};
use free360_core::reproject::{annotate, crop, erp_to_cmp, rotate_erp, ErpImage, Overlay};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

const API_KEY_ENV: &str = "FREE360_API_KEY";
const API_BASE_ENV: &str = "FREE360_API_BASE";

#[derive(Parser)]
#[command(
    name = "free360",
    version,
    about = "Scene-graph question answering and geometry tools for 360-degree panoramas"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an ERP panorama into the 4x3-cross cubemap layout.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Cube face edge in pixels; defaults to input width / 4.
        #[arg(long)]
        face_size: Option<u32>,
    },
    /// Rotate an ERP panorama so the given direction lands at the center.
    Rotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Longitude of the new center, in degrees.
        #[arg(long)]
        phi: f64,
        /// Latitude of the new center, in degrees.
        #[arg(long)]
        theta: f64,
    },
    /// Crop a box out of an image.
    Crop {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Box as x1,y1,x2,y2 in pixels.
        #[arg(long = "box")]
        bbox: String,
    },
    /// Draw labeled boxes with a color legend.
    Annotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Repeatable; format label:x1,y1,x2,y2.
        #[arg(long = "box", required = true)]
        boxes: Vec<String>,
        #[arg(long, default_value_t = 3)]
        stroke: u32,
    },
    /// Answer one question about an ERP panorama via the scene-graph pipeline.
    Ask {
        /// ERP panorama path.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        /// The four answer options, comma separated.
        #[arg(long)]
        options: String,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Write the serialized scene graph here.
        #[arg(long)]
        dump_graph: Option<PathBuf>,
        /// Write the scene graph as JSON here.
        #[arg(long)]
        dump_graph_json: Option<PathBuf>,
        /// Write pipeline step events as JSON lines here.
        #[arg(long)]
        run_log: Option<PathBuf>,
    },
    /// Evaluate an answering strategy over a benchmark manifest.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Report output directory (report.csv, report.md, run_log.jsonl).
        #[arg(long)]
        report: PathBuf,
        /// Answering strategy: free360 or direct.
        #[arg(long, default_value = "free360")]
        strategy: String,
        /// Comma-separated ablations: no-crop, no-rotate, no-evr.
        #[arg(long)]
        ablation: Option<String>,
        /// Worker pool size.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Backend kind: http or mock.
    #[arg(long, default_value = "http")]
    backend: String,
    /// Chat-completions base URL; defaults to $FREE360_API_BASE.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name passed to the endpoint.
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, default_value = API_KEY_ENV)]
    api_key_env: String,
    /// Mock script path (JSON array of matcher/response entries).
    #[arg(long)]
    script: Option<PathBuf>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    timeout_s: Option<u64>,
    /// Write a JSON-lines wire transcript here.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// JSON config file mirroring these options; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    /// Use the full image instead of entity crops in attribute extraction.
    #[arg(long)]
    no_crop: bool,
    /// Skip the pair-centering spherical rotation in relation detection.
    #[arg(long)]
    no_rotate: bool,
    /// Skip entity-view relation detection entirely.
    #[arg(long)]
    no_evr: bool,
    /// Cap on entity pairs in relation detection.
    #[arg(long)]
    max_pairs: Option<usize>,
    /// Directory of prompt template files (step1.txt, step2.txt, ...).
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Longest image side sent to the backend, in pixels.
    #[arg(long)]
    downscale: Option<u32>,
    /// Disable the direct-image fallback on CANNOT ANSWER.
    #[arg(long)]
    no_fallback: bool,
}

/// Optional JSON config mirroring the backend and pipeline flags; explicit
/// command-line flags take precedence over config values.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    backend: Option<String>,
    endpoint: Option<String>,
    model: Option<String>,
    api_key_env: Option<String>,
    script: Option<PathBuf>,
    timeout_s: Option<u64>,
    no_crop: Option<bool>,
    no_rotate: Option<bool>,
    no_evr: Option<bool>,
    max_pairs: Option<usize>,
    templates: Option<PathBuf>,
    downscale: Option<u32>,
    jobs: Option<usize>,
}

fn load_config(args: &BackendArgs) -> Result<ConfigFile> {
    match &args.config {
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display())),
        None => Ok(ConfigFile::default()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Convert {
            input,
            output,
            face_size,
        } => {
            let erp = ErpImage::load(&input)
                .with_context(|| format!("loading {}", input.display()))?;
            let face = face_size.unwrap_or(erp.width() / 4).max(1);
            let cmp = erp_to_cmp(&erp, &CmpLayout::new(face)?);
            cmp.save(&output)
                .with_context(|| format!("writing {}", output.display()))?;
            println!(
                "wrote {} ({}x{}, face {})",
                output.display(),
                cmp.width(),
                cmp.height(),
                face
            );
            Ok(())
        }
        Command::Rotate {
            input,
            output,
            phi,
            theta,
        } => {
            let erp = ErpImage::load(&input)
                .with_context(|| format!("loading {}", input.display()))?;
            let rot = rotation_matrix(phi.to_radians(), theta.to_radians());
            let out = rotate_erp(&erp, &rot.matrix);
            out.save(&output)
                .with_context(|| format!("writing {}", output.display()))?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Crop {
            input,
            output,
            bbox,
        } => {
            let img = image_open(&input)?;
            let bbox = parse_box(&bbox)?;
            let out = crop(&img, &bbox)?;
            out.save(&output)
                .with_context(|| format!("writing {}", output.display()))?;
            println!("wrote {} ({}x{})", output.display(), out.width(), out.height());
            Ok(())
        }
        Command::Annotate {
            input,
            output,
            boxes,
            stroke,
        } => {
            let img = image_open(&input)?;
            let mut overlay = Overlay::new();
            for spec in &boxes {
                let (label, bbox) = spec
                    .split_once(':')
                    .ok_or_else(|| anyhow!("expected label:x1,y1,x2,y2, got '{spec}'"))?;
                overlay.push(label, parse_box(bbox)?);
            }
            let out = annotate(&img, &overlay, stroke);
            out.save(&output)
                .with_context(|| format!("writing {}", output.display()))?;
            println!("wrote {} (legend: {})", output.display(), overlay.legend());
            Ok(())
        }
        Command::Ask {
            image,
            question,
            options,
            backend,
            pipeline,
            dump_graph,
            dump_graph_json,
            run_log,
        } => {
            let options = parse_options(&options)?;
            let erp = ErpImage::load(&image)
                .with_context(|| format!("loading {}", image.display()))?;
            let file = load_config(&backend)?;
            let backend = build_backend(&backend, &file)?;
            let config = pipeline_config(&pipeline, &file)?;
            let result = Pipeline::new(config)
                .run(backend.as_ref(), &erp, &question, &options)
                .map_err(|e| anyhow!("pipeline failed: {e}"))?;

            match result.answer_index {
                Some(i) => println!("answer: {}", ["A", "B", "C", "D"][i]),
                None => println!("answer: none (no option letter in the response)"),
            }
            println!("fallback: {}", result.used_fallback);
            let t = result.step_timings;
            println!(
                "timings_s: step1 {:.3}, step2 {:.3}, step3 {:.3}, step4 {:.3}, answer {:.3}",
                t.step1_s, t.step2_s, t.step3_s, t.step4_s, t.answer_s
            );
            println!("--- reasoning ---\n{}", result.reasoning);

            if let Some(path) = dump_graph {
                std::fs::write(&path, result.graph.serialize())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(path) = dump_graph_json {
                std::fs::write(&path, serde_json::to_string_pretty(&result.graph.to_json())?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(path) = run_log {
                let lines: Vec<String> = result
                    .events
                    .iter()
                    .map(|e| serde_json::to_string(e).expect("event serializes"))
                    .collect();
                std::fs::write(&path, lines.join("\n") + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Bench {
            manifest,
            backend,
            pipeline,
            report,
            strategy,
            ablation,
            jobs,
        } => {
            let samples = load_dataset(&manifest)?;
            let base_dir = manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));

            let file = load_config(&backend)?;
            let mut config = pipeline_config(&pipeline, &file)?;
            apply_ablations(&mut config, ablation.as_deref())?;
            let jobs = if jobs == 1 {
                file.jobs.unwrap_or(jobs)
            } else {
                jobs
            };

            let registry = StrategyRegistry::builtin();
            let needs_backend = strategy != "oracle";
            let provider = if needs_backend {
                Some(backend_provider(&backend, &file)?)
            } else {
                None
            };
            let answerer = registry.create(
                &strategy,
                &StrategyOptions {
                    backend: provider,
                    pipeline_config: config,
                },
            )?;

            let report_result = evaluate(
                &samples,
                answerer.as_ref(),
                &EvalOptions {
                    jobs: jobs.max(1),
                    base_dir,
                    report_dir: Some(report.clone()),
                },
            )?;
            println!("{}", report_result.overall_line());
            println!("reports in {}", report.display());
            Ok(())
        }
    }
}

fn image_open(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)
        .with_context(|| format!("loading {}", path.display()))?
        .to_rgb8())
}

fn parse_box(text: &str) -> Result<PixelBox> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| anyhow!("invalid box '{text}': {e}"))?;
    if parts.len() != 4 {
        bail!("box must have 4 numbers, got {}", parts.len());
    }
    Ok(PixelBox::new(parts[0], parts[1], parts[2], parts[3]))
}

fn parse_options(text: &str) -> Result<[String; 4]> {
    let parts: Vec<String> = text.split(',').map(|s| s.trim().to_string()).collect();
    let n = parts.len();
    parts
        .try_into()
        .map_err(|_| anyhow!("expected 4 comma-separated options, got {n}"))
}

fn pipeline_config(args: &PipelineArgs, file: &ConfigFile) -> Result<PipelineConfig> {
    let template_dir = args.templates.as_ref().or(file.templates.as_ref());
    let templates = match template_dir {
        Some(dir) => PromptTemplates::load_dir(dir)?,
        None => PromptTemplates::default(),
    };
    Ok(PipelineConfig {
        use_crop: !(args.no_crop || file.no_crop.unwrap_or(false)),
        use_rotate: !(args.no_rotate || file.no_rotate.unwrap_or(false)),
        use_evr: !(args.no_evr || file.no_evr.unwrap_or(false)),
        max_entity_pairs: args.max_pairs.or(file.max_pairs),
        templates,
        fallback_on_cannot_answer: !args.no_fallback,
        image_downscale_for_prompting: args.downscale.or(file.downscale),
        ..PipelineConfig::default()
    })
}

fn apply_ablations(config: &mut PipelineConfig, list: Option<&str>) -> Result<()> {
    let Some(list) = list else { return Ok(()) };
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "no-crop" => config.use_crop = false,
            "no-rotate" => config.use_rotate = false,
            "no-evr" => config.use_evr = false,
            other => bail!("unknown ablation '{other}' (expected no-crop, no-rotate, no-evr)"),
        }
    }
    Ok(())
}

/// Resolve backend options from flags, config file, and environment.
fn backend_options(args: &BackendArgs, file: &ConfigFile) -> Result<(String, BackendOptions)> {
    let kind = if args.backend == "http" {
        // "http" is the flag default; a config file may override it.
        file.backend.clone().unwrap_or_else(|| args.backend.clone())
    } else {
        args.backend.clone()
    };

    let mut options = BackendOptions {
        endpoint: args
            .endpoint
            .clone()
            .or_else(|| file.endpoint.clone())
            .or_else(|| std::env::var(API_BASE_ENV).ok()),
        model: args.model.clone().or_else(|| file.model.clone()),
        script_path: args.script.clone().or_else(|| file.script.clone()),
        timeout: args.timeout_s.or(file.timeout_s).map(Duration::from_secs),
        transcript_path: args.transcript.clone(),
        ..BackendOptions::default()
    };

    if kind == "http" {
        let key_env = file
            .api_key_env
            .as_deref()
            .filter(|_| args.api_key_env == API_KEY_ENV)
            .unwrap_or(&args.api_key_env);
        let key = std::env::var(key_env)
            .map_err(|_| anyhow!("API key environment variable {key_env} is not set"))?;
        options.api_key = Some(key);
        if options.endpoint.is_none() {
            bail!("http backend needs --endpoint or ${API_BASE_ENV}");
        }
        if options.model.is_none() {
            bail!("http backend needs --model");
        }
    }
    Ok((kind, options))
}

fn build_backend(
    args: &BackendArgs,
    file: &ConfigFile,
) -> Result<Arc<dyn free360_core::backend::Backend>> {
    let (kind, options) = backend_options(args, file)?;
    Ok(BackendRegistry::builtin().create(&kind, &options)?)
}

/// A provider for benchmark runs: scripted mocks are rebuilt per sample so
/// every sample replays the same dialogue; other backends are shared.
fn backend_provider(args: &BackendArgs, file: &ConfigFile) -> Result<BackendProvider> {
    let (kind, options) = backend_options(args, file)?;
    if kind == "mock" {
        // Validate the script once up front.
        BackendRegistry::builtin().create(&kind, &options)?;
        let mut per_sample = options;
        per_sample.transcript_path = None;
        Ok(Arc::new(move || {
            BackendRegistry::builtin()
                .create("mock", &per_sample)
                .map_err(|e| free360_core::bench::BenchError::Strategy(e.to_string()))
        }))
    } else {
        let backend = BackendRegistry::builtin().create(&kind, &options)?;
        Ok(shared_backend(backend))
    }
}
