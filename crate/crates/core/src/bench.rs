//! Benchmark harness: dataset ingestion, cyclic answer permutation, the
//! evaluation loop over pluggable answering strategies, and report
//! generation.
//!
//! Every sample expands into four permuted variants whose options are
//! cyclically rotated, so a strategy that always picks the same position
//! scores exactly 25% — answer-position bias is nulled by construction.
//! Permuted samples are independent work items evaluated by a bounded worker
//! pool; aggregation is a single-threaded reduce over results in input
//! order, so accuracy figures are independent of the job count.

use crate::backend::{Backend, BackendError, BackendRequest, BackendResponse, ImagePart};
use crate::geom::PixelBox;
use crate::pipeline::{
    format_options, parse_answer_letter, Pipeline, PipelineConfig, PipelineError,
};
use crate::reproject::ErpImage;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("sample '{id}': invalid {field}: {message}")]
    Load {
        id: String,
        field: &'static str,
        message: String,
    },
    #[error("unknown strategy '{0}'")]
    UnknownStrategy(String),
    #[error("strategy error: {0}")]
    Strategy(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<PipelineError> for BenchError {
    fn from(e: PipelineError) -> Self {
        BenchError::Strategy(e.to_string())
    }
}

impl From<BackendError> for BenchError {
    fn from(e: BackendError) -> Self {
        BenchError::Strategy(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

/// The seven benchmark subtasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subtask {
    #[serde(rename = "FP-IR")]
    FpIr,
    #[serde(rename = "FP-IC")]
    FpIc,
    #[serde(rename = "PP-IR")]
    PpIr,
    #[serde(rename = "PP-IC")]
    PpIc,
    #[serde(rename = "SR-Os")]
    SrOs,
    #[serde(rename = "SR-OV")]
    SrOv,
    #[serde(rename = "DG")]
    Dg,
}

impl Subtask {
    pub const ALL: [Subtask; 7] = [
        Subtask::FpIr,
        Subtask::FpIc,
        Subtask::PpIr,
        Subtask::PpIc,
        Subtask::SrOs,
        Subtask::SrOv,
        Subtask::Dg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Subtask::FpIr => "FP-IR",
            Subtask::FpIc => "FP-IC",
            Subtask::PpIr => "PP-IR",
            Subtask::PpIc => "PP-IC",
            Subtask::SrOs => "SR-Os",
            Subtask::SrOv => "SR-OV",
            Subtask::Dg => "DG",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Subtask> {
        Subtask::ALL.into_iter().find(|s| s.as_str() == tag)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabeledBox {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

/// One benchmark sample: an image, a question, and four options.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct VqaSample {
    pub id: String,
    pub image_path: String,
    pub question: String,
    pub options: [String; 4],
    pub answer_index: usize,
    pub subtask: Subtask,
    /// Optional ERP-frame boxes of question-relevant entities.
    pub boxes: Option<Vec<LabeledBox>>,
}

#[derive(Debug, Deserialize)]
struct RawSample {
    id: String,
    image_path: String,
    question: String,
    options: Vec<String>,
    answer_index: usize,
    subtask: String,
    #[serde(default)]
    boxes: Option<Vec<LabeledBox>>,
}

/// Load and validate a JSON manifest (an array of samples).
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Vec<VqaSample>, BenchError> {
    let path = manifest_path.as_ref();
    let data = std::fs::read_to_string(path)
        .map_err(|e| BenchError::Manifest(format!("{}: {e}", path.display())))?;
    let raw: Vec<RawSample> =
        serde_json::from_str(&data).map_err(|e| BenchError::Manifest(e.to_string()))?;

    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(raw.len());
    for r in raw {
        if !seen.insert(r.id.clone()) {
            return Err(BenchError::Load {
                id: r.id,
                field: "id",
                message: "duplicate sample id".into(),
            });
        }
        let options: [String; 4] = r.options.try_into().map_err(|v: Vec<String>| {
            BenchError::Load {
                id: r.id.clone(),
                field: "options",
                message: format!("expected exactly 4 options, got {}", v.len()),
            }
        })?;
        let distinct: HashSet<&String> = options.iter().collect();
        if distinct.len() != 4 {
            return Err(BenchError::Load {
                id: r.id,
                field: "options",
                message: "options must be distinct".into(),
            });
        }
        if r.answer_index > 3 {
            return Err(BenchError::Load {
                id: r.id,
                field: "answer_index",
                message: format!("must be 0..=3, got {}", r.answer_index),
            });
        }
        let subtask = Subtask::from_tag(&r.subtask).ok_or_else(|| BenchError::Load {
            id: r.id.clone(),
            field: "subtask",
            message: format!("unknown subtask tag '{}'", r.subtask),
        })?;
        if r.question.trim().is_empty() {
            return Err(BenchError::Load {
                id: r.id,
                field: "question",
                message: "question must not be empty".into(),
            });
        }
        samples.push(VqaSample {
            id: r.id,
            image_path: r.image_path,
            question: r.question,
            options,
            answer_index: r.answer_index,
            subtask,
            boxes: r.boxes,
        });
    }
    Ok(samples)
}

/// One cyclic variant of a sample: rotation `r` moves option `i` to position
/// `(i + r) mod 4`, so the correct option text is preserved while its
/// position changes.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PermutedSample {
    pub base_id: String,
    pub rotation: u8,
    pub image_path: String,
    pub question: String,
    pub subtask: Subtask,
    pub options: [String; 4],
    pub answer_index: usize,
}

pub fn cyclic_permute(sample: &VqaSample) -> [PermutedSample; 4] {
    std::array::from_fn(|r| {
        let mut options: [String; 4] = Default::default();
        for (i, option) in sample.options.iter().enumerate() {
            options[(i + r) % 4] = option.clone();
        }
        PermutedSample {
            base_id: sample.id.clone(),
            rotation: r as u8,
            image_path: sample.image_path.clone(),
            question: sample.question.clone(),
            subtask: sample.subtask,
            options,
            answer_index: (sample.answer_index + r) % 4,
        }
    })
}

// ---------------------------------------------------------------------------
// Answering strategies
// ---------------------------------------------------------------------------

/// Work item handed to a strategy: the permuted sample plus its resolved
/// image path. Honest strategies must not read `sample.answer_index`; the
/// oracle strategy exists precisely to do so in harness self-tests.
pub struct EvalItem<'a> {
    pub sample: &'a PermutedSample,
    pub image_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerOutcome {
    pub answer_index: Option<usize>,
    /// Model-side latency (summed backend latencies), so mock-backed runs
    /// report a deterministic zero.
    pub latency: Duration,
    pub used_fallback: bool,
}

/// A strategy mapping (image, question, options) to an answer.
pub trait Answerer: Send + Sync {
    fn name(&self) -> &'static str;
    fn answer(&self, item: &EvalItem) -> Result<AnswerOutcome, BenchError>;
}

/// Produces a backend per evaluation item. Scripted mocks are recreated per
/// item so each sample replays the same dialogue; stateless backends hand
/// out one shared instance.
pub type BackendProvider = Arc<dyn Fn() -> Result<Arc<dyn Backend>, BenchError> + Send + Sync>;

/// Provider that returns the same backend every time.
pub fn shared_backend(backend: Arc<dyn Backend>) -> BackendProvider {
    Arc::new(move || Ok(backend.clone()))
}

/// Wraps a backend and tallies response latencies, so strategies can report
/// model-side time per sample.
struct TalliedBackend {
    inner: Arc<dyn Backend>,
    total: Mutex<Duration>,
}

impl TalliedBackend {
    fn new(inner: Arc<dyn Backend>) -> Self {
        Self {
            inner,
            total: Mutex::new(Duration::ZERO),
        }
    }

    fn total(&self) -> Duration {
        *self.total.lock().expect("tally lock")
    }
}

impl Backend for TalliedBackend {
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let response = self.inner.complete(request)?;
        *self.total.lock().expect("tally lock") += response.latency;
        Ok(response)
    }
}

/// Test-only strategy that reads the ground-truth index; always correct.
pub struct OracleAnswerer;

impl Answerer for OracleAnswerer {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn answer(&self, item: &EvalItem) -> Result<AnswerOutcome, BenchError> {
        Ok(AnswerOutcome {
            answer_index: Some(item.sample.answer_index),
            latency: Duration::ZERO,
            used_fallback: false,
        })
    }
}

/// Always answers the same option position; used to verify bias nulling.
pub struct ConstantAnswerer(pub usize);

impl Answerer for ConstantAnswerer {
    fn name(&self) -> &'static str {
        "constant"
    }

    fn answer(&self, _item: &EvalItem) -> Result<AnswerOutcome, BenchError> {
        Ok(AnswerOutcome {
            answer_index: Some(self.0 % 4),
            latency: Duration::ZERO,
            used_fallback: false,
        })
    }
}

/// Baseline: ask the question directly on the image, no scene graph.
pub struct DirectAnswerer {
    provider: BackendProvider,
    config: PipelineConfig,
}

impl DirectAnswerer {
    pub fn new(provider: BackendProvider, config: PipelineConfig) -> Self {
        Self { provider, config }
    }
}

impl Answerer for DirectAnswerer {
    fn name(&self) -> &'static str {
        "direct"
    }

    fn answer(&self, item: &EvalItem) -> Result<AnswerOutcome, BenchError> {
        let backend = TalliedBackend::new((self.provider)()?);
        let img = image::open(&item.image_path)
            .map_err(|e| BenchError::Strategy(format!("image load failed: {e}")))?
            .to_rgb8();
        let part = ImagePart::from_rgb(&img)?;
        let prompt = self
            .config
            .templates
            .qa_image
            .replace("{question}", &item.sample.question)
            .replace("{options}", &format_options(&item.sample.options));
        let request =
            BackendRequest::user("qa_direct", prompt, Some(part), self.config.max_output_tokens);
        let response = backend.complete(&request)?;
        Ok(AnswerOutcome {
            answer_index: parse_answer_letter(&response.text),
            latency: backend.total(),
            used_fallback: false,
        })
    }
}

/// The full scene-graph pipeline as a benchmark strategy.
pub struct Free360Answerer {
    provider: BackendProvider,
    config: PipelineConfig,
    cache: Mutex<HashMap<PathBuf, Arc<ErpImage>>>,
}

/// Loaded panoramas kept around between permuted variants of a sample.
const IMAGE_CACHE_CAP: usize = 8;

impl Free360Answerer {
    pub fn new(provider: BackendProvider, config: PipelineConfig) -> Self {
        Self {
            provider,
            config,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn load_erp(&self, path: &Path) -> Result<Arc<ErpImage>, BenchError> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(path) {
            return Ok(hit.clone());
        }
        let erp = Arc::new(
            ErpImage::load(path)
                .map_err(|e| BenchError::Strategy(format!("panorama load failed: {e}")))?,
        );
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() >= IMAGE_CACHE_CAP {
            cache.clear();
        }
        cache.insert(path.to_path_buf(), erp.clone());
        Ok(erp)
    }
}

impl Answerer for Free360Answerer {
    fn name(&self) -> &'static str {
        "free360"
    }

    fn answer(&self, item: &EvalItem) -> Result<AnswerOutcome, BenchError> {
        let backend = TalliedBackend::new((self.provider)()?);
        let erp = self.load_erp(&item.image_path)?;
        let pipeline = Pipeline::new(self.config.clone());
        let result = pipeline.run(
            &backend,
            &erp,
            &item.sample.question,
            &item.sample.options,
        )?;
        Ok(AnswerOutcome {
            answer_index: result.answer_index,
            latency: backend.total(),
            used_fallback: result.used_fallback,
        })
    }
}

// ---------------------------------------------------------------------------
// Strategy registry
// ---------------------------------------------------------------------------

#[derive(Clone, Default)]
pub struct StrategyOptions {
    /// Backend provider; required by model-backed strategies.
    pub backend: Option<BackendProvider>,
    pub pipeline_config: PipelineConfig,
}

pub type StrategyFactory = fn(&StrategyOptions) -> Result<Box<dyn Answerer>, BenchError>;

/// Name-keyed registry of answering strategies.
pub struct StrategyRegistry {
    factories: BTreeMap<String, StrategyFactory>,
}

impl StrategyRegistry {
    /// Registry with the built-in `free360`, `direct`, and `oracle`
    /// strategies.
    pub fn builtin() -> Self {
        let mut registry = Self {
            factories: BTreeMap::new(),
        };
        registry.register("free360", |opts| {
            let provider = require_backend(opts)?;
            Ok(Box::new(Free360Answerer::new(
                provider,
                opts.pipeline_config.clone(),
            )))
        });
        registry.register("direct", |opts| {
            let provider = require_backend(opts)?;
            Ok(Box::new(DirectAnswerer::new(
                provider,
                opts.pipeline_config.clone(),
            )))
        });
        registry.register("oracle", |_| Ok(Box::new(OracleAnswerer)));
        registry
    }

    pub fn register(&mut self, name: &str, factory: StrategyFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(|s| s.as_str()).collect()
    }

    pub fn create(
        &self,
        name: &str,
        options: &StrategyOptions,
    ) -> Result<Box<dyn Answerer>, BenchError> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| BenchError::UnknownStrategy(name.to_string()))?;
        factory(options)
    }
}

fn require_backend(options: &StrategyOptions) -> Result<BackendProvider, BenchError> {
    options
        .backend
        .clone()
        .ok_or_else(|| BenchError::Strategy("this strategy requires a backend".into()))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Worker pool size; accuracy figures are identical for any value.
    pub jobs: usize,
    /// Directory image paths are resolved against (usually the manifest's).
    pub base_dir: PathBuf,
    /// Where to write `report.csv`, `report.md`, and `run_log.jsonl`.
    pub report_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            base_dir: PathBuf::from("."),
            report_dir: None,
        }
    }
}

/// Outcome of one permuted sample.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub id: String,
    pub rotation: u8,
    pub subtask: Subtask,
    pub predicted: Option<usize>,
    pub correct: bool,
    pub latency_s: f64,
    pub used_fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stats {
    pub n: usize,
    pub correct: usize,
    pub accuracy_pct: f64,
    pub mean_latency_s: f64,
}

/// Accuracy and latency aggregates in Table shape: one row per subtask, the
/// FP/PP/SR pair means, and the overall row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub strategy: String,
    pub subtasks: Vec<(Subtask, Stats)>,
    /// `FP`, `PP`, `SR` category rows; accuracy is the mean of the two
    /// subtask accuracies.
    pub categories: Vec<(&'static str, Stats)>,
    pub overall: Stats,
}

/// Expand samples via cyclic permutation, evaluate each permuted sample, and
/// aggregate. Failed or unanswered samples score zero and stay in the
/// denominator.
pub fn evaluate(
    samples: &[VqaSample],
    answerer: &dyn Answerer,
    options: &EvalOptions,
) -> Result<BenchReport, BenchError> {
    let permuted: Vec<PermutedSample> = samples.iter().flat_map(cyclic_permute).collect();

    let run_one = |sample: &PermutedSample| -> RunRecord {
        let item = EvalItem {
            sample,
            image_path: options.base_dir.join(&sample.image_path),
        };
        match answerer.answer(&item) {
            Ok(outcome) => RunRecord {
                id: sample.base_id.clone(),
                rotation: sample.rotation,
                subtask: sample.subtask,
                predicted: outcome.answer_index,
                correct: outcome.answer_index == Some(sample.answer_index),
                latency_s: outcome.latency.as_secs_f64(),
                used_fallback: outcome.used_fallback,
                error: None,
            },
            Err(error) => RunRecord {
                id: sample.base_id.clone(),
                rotation: sample.rotation,
                subtask: sample.subtask,
                predicted: None,
                correct: false,
                latency_s: 0.0,
                used_fallback: false,
                error: Some(error.to_string()),
            },
        }
    };

    let records: Vec<RunRecord> = if options.jobs <= 1 {
        permuted.iter().map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.jobs)
            .build()
            .map_err(|e| BenchError::Strategy(format!("worker pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            permuted.par_iter().map(run_one).collect()
        })
    };

    let report = aggregate(answerer.name(), &records);

    if let Some(dir) = &options.report_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), report.to_csv())?;
        std::fs::write(dir.join("report.md"), report.to_markdown())?;
        let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join("run_log.jsonl"))?);
        for record in &records {
            writeln!(
                log,
                "{}",
                serde_json::to_string(record).expect("record serializes")
            )?;
        }
    }
    Ok(report)
}

fn aggregate(strategy: &str, records: &[RunRecord]) -> BenchReport {
    let mut per_subtask: BTreeMap<&'static str, (usize, usize, f64)> = BTreeMap::new();
    for subtask in Subtask::ALL {
        per_subtask.insert(subtask.as_str(), (0, 0, 0.0));
    }
    for record in records {
        let entry = per_subtask
            .get_mut(record.subtask.as_str())
            .expect("all subtasks present");
        entry.0 += 1;
        entry.1 += record.correct as usize;
        entry.2 += record.latency_s;
    }

    let stats_of = |(n, correct, time): (usize, usize, f64)| Stats {
        n,
        correct,
        accuracy_pct: if n > 0 {
            correct as f64 / n as f64 * 100.0
        } else {
            0.0
        },
        mean_latency_s: if n > 0 { time / n as f64 } else { 0.0 },
    };

    let subtasks: Vec<(Subtask, Stats)> = Subtask::ALL
        .into_iter()
        .map(|s| (s, stats_of(per_subtask[s.as_str()])))
        .collect();

    let category = |name: &'static str, members: [Subtask; 2]| {
        let pair: Vec<&Stats> = subtasks
            .iter()
            .filter(|(s, _)| members.contains(s))
            .map(|(_, st)| st)
            .collect();
        let with_n: Vec<&&Stats> = pair.iter().filter(|s| s.n > 0).collect();
        let n: usize = pair.iter().map(|s| s.n).sum();
        let time: f64 = pair.iter().map(|s| s.mean_latency_s * s.n as f64).sum();
        let accuracy = if with_n.is_empty() {
            0.0
        } else {
            with_n.iter().map(|s| s.accuracy_pct).sum::<f64>() / with_n.len() as f64
        };
        (
            name,
            Stats {
                n,
                correct: pair.iter().map(|s| s.correct).sum(),
                accuracy_pct: accuracy,
                mean_latency_s: if n > 0 { time / n as f64 } else { 0.0 },
            },
        )
    };
    let categories = vec![
        category("FP", [Subtask::FpIr, Subtask::FpIc]),
        category("PP", [Subtask::PpIr, Subtask::PpIc]),
        category("SR", [Subtask::SrOs, Subtask::SrOv]),
    ];

    let total = records.len();
    let correct = records.iter().filter(|r| r.correct).count();
    let time: f64 = records.iter().map(|r| r.latency_s).sum();
    let overall = Stats {
        n: total,
        correct,
        accuracy_pct: if total > 0 {
            correct as f64 / total as f64 * 100.0
        } else {
            0.0
        },
        mean_latency_s: if total > 0 { time / total as f64 } else { 0.0 },
    };

    BenchReport {
        strategy: strategy.to_string(),
        subtasks,
        categories,
        overall,
    }
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subtask,n,accuracy,mean_inference_s\n");
        for (subtask, stats) in &self.subtasks {
            out.push_str(&format!(
                "{},{},{:.1},{:.3}\n",
                subtask.as_str(),
                stats.n,
                stats.accuracy_pct,
                stats.mean_latency_s
            ));
        }
        for (name, stats) in &self.categories {
            out.push_str(&format!(
                "{},{},{:.1},{:.3}\n",
                name, stats.n, stats.accuracy_pct, stats.mean_latency_s
            ));
        }
        out.push_str(&format!(
            "overall,{},{:.1},{:.3}\n",
            self.overall.n, self.overall.accuracy_pct, self.overall.mean_latency_s
        ));
        out
    }

    pub fn to_markdown(&self) -> String {
        let find = |s: Subtask| {
            self.subtasks
                .iter()
                .find(|(t, _)| *t == s)
                .map(|(_, st)| st.accuracy_pct)
                .unwrap_or(0.0)
        };
        let cat = |name: &str| {
            self.categories
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, st)| st.accuracy_pct)
                .unwrap_or(0.0)
        };
        let mut out = String::new();
        out.push_str(
            "| Strategy | FP-IR | FP-IC | FP Avg. | PP-IR | PP-IC | PP Avg. | SR-Os | SR-OV | SR Avg. | DG | Overall | Inf. Time (s) |\n",
        );
        out.push_str(
            "|---|---|---|---|---|---|---|---|---|---|---|---|---|\n",
        );
        out.push_str(&format!(
            "| {} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {:.3} |\n",
            self.strategy,
            find(Subtask::FpIr),
            find(Subtask::FpIc),
            cat("FP"),
            find(Subtask::PpIr),
            find(Subtask::PpIc),
            cat("PP"),
            find(Subtask::SrOs),
            find(Subtask::SrOv),
            cat("SR"),
            find(Subtask::Dg),
            self.overall.accuracy_pct,
            self.overall.mean_latency_s,
        ));
        out
    }

    /// One-line summary for terminals.
    pub fn overall_line(&self) -> String {
        format!(
            "{}: overall accuracy {:.1}% over {} permuted samples, mean inference {:.3} s",
            self.strategy, self.overall.accuracy_pct, self.overall.n, self.overall.mean_latency_s
        )
    }
}
