//! The four-step scene-graph pipeline and graph-based question answering.
//!
//! Given a panorama and a question, [`Pipeline::run`] converts the ERP image
//! to the cubemap cross, asks the backend to identify question-relevant
//! entities (step 1), describes each entity from its crop (step 2), infers
//! pairwise spatial relations on pair-centered rotated panoramas (step 3),
//! assigns each entity to a view node from its box center (step 4, no model
//! call), then answers the question from the serialized graph — falling back
//! to direct image QA when the model declares the graph insufficient.
//!
//! The three ablation switches (`use_crop`, `use_rotate`, `use_evr`) disable
//! the corresponding mechanism while keeping the rest of the flow intact.

use crate::backend::{Backend, BackendError, BackendRequest, ImagePart};
use crate::geom::{pair_center, view_of_pixel, CmpLayout, Face, GeomError, PixelBox};
use crate::graph::{sanitize_text, GraphError, SceneGraph};
use crate::reproject::{
    annotate, cmp_box_to_erp_box, erp_to_cmp, rotate_erp, transform_box_erp, CmpImage, ErpImage,
    Overlay, ReprojectError,
};
use image::imageops::FilterType;
use image::RgbImage;
use serde::Deserialize;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

/// Marker the model must output when the graph cannot answer the question.
pub const CANNOT_ANSWER: &str = "CANNOT ANSWER";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Reproject(#[from] ReprojectError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("prompt template error: {0}")]
    Template(String),
}

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

/// Per-step prompt texts with `{question}`, `{label}`, `{options}`,
/// `{graph}`, and `{legend}` placeholders.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub step1: String,
    pub step1_retry: String,
    pub step2: String,
    pub step3: String,
    pub qa: String,
    pub qa_image: String,
}

pub const DEFAULT_STEP1: &str = "\
Step 1 - entity identification.
You see a cubemap projection of a 360-degree photograph: the middle row shows \
the back, left, front and right views, with the top view above the front view \
and the bottom view below it.
List the visible entities that matter for answering the question below. For \
each entity give a short noun label and its bounding box as pixel coordinates \
[x1, y1, x2, y2] for the top-left and bottom-right corners.
Reply with a strict JSON array only, for example:
[{\"label\": \"person\", \"box\": [120, 340, 260, 720]}]
Reply with [] if nothing relevant is visible.
Question: {question}";

pub const DEFAULT_STEP1_RETRY: &str = "\
Your previous reply could not be parsed. Reply again with only a strict JSON \
array of objects with \"label\" and \"box\" fields, nothing else.
Question: {question}";

pub const DEFAULT_STEP2: &str = "\
Step 2 - attribute extraction.
The attached image shows one entity: {label}.
Describe it in one short phrase, focusing on details useful for the question \
below, such as colors, written text, patterns, logos or counts.
Question: {question}";

pub const DEFAULT_STEP3: &str = "\
Step 3 - spatial relation.
The attached 360-degree panorama highlights two entities with colored \
bounding boxes ({legend}).
In one short phrase, state the spatial relation of the first entity to the \
second, for example \"to the left of\", \"behind\" or \"on top of\".
Question: {question}";

pub const DEFAULT_QA: &str = "\
Answer a multiple-choice question about a 360-degree scene using the scene \
graph below. The graph lists entity and view nodes, their attributes, and \
their spatial relations.
{graph}
Question: {question}
Options:
{options}
Reason step by step over the graph, then give a final line of the form \
\"Answer: X\" where X is A, B, C or D. If the graph does not contain enough \
information to decide, reply with exactly CANNOT ANSWER.";

pub const DEFAULT_QA_IMAGE: &str = "\
Answer the multiple-choice question about the attached 360-degree image.
Question: {question}
Options:
{options}
Reason briefly, then give a final line of the form \"Answer: X\" where X is \
A, B, C or D.";

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            step1: DEFAULT_STEP1.into(),
            step1_retry: DEFAULT_STEP1_RETRY.into(),
            step2: DEFAULT_STEP2.into(),
            step3: DEFAULT_STEP3.into(),
            qa: DEFAULT_QA.into(),
            qa_image: DEFAULT_QA_IMAGE.into(),
        }
    }
}

impl PromptTemplates {
    /// Load templates from `<dir>/step1.txt`, `step1_retry.txt`, `step2.txt`,
    /// `step3.txt`, `qa.txt` and `qa_image.txt`; missing files keep their
    /// default text.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let dir = dir.as_ref();
        let mut templates = Self::default();
        for (name, slot) in [
            ("step1", &mut templates.step1),
            ("step1_retry", &mut templates.step1_retry),
            ("step2", &mut templates.step2),
            ("step3", &mut templates.step3),
            ("qa", &mut templates.qa),
            ("qa_image", &mut templates.qa_image),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                *slot = std::fs::read_to_string(&path)
                    .map_err(|e| PipelineError::Template(format!("{}: {e}", path.display())))?;
            }
        }
        Ok(templates)
    }
}

fn render(template: &str, fills: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in fills {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Format the four options as lettered lines.
pub fn format_options(options: &[String; 4]) -> String {
    options
        .iter()
        .zip(["A", "B", "C", "D"])
        .map(|(text, letter)| format!("{letter}. {text}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Extract the chosen option letter: the first standalone A-D after the
/// token `Answer`, else the last standalone A-D anywhere.
pub fn parse_answer_letter(text: &str) -> Option<usize> {
    let bytes = text.as_bytes();
    let standalone = |i: usize| {
        let before = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
        let after = i + 1 >= bytes.len() || !bytes[i + 1].is_ascii_alphanumeric();
        before && after
    };
    if let Some(pos) = text.find("Answer") {
        for (i, &c) in bytes.iter().enumerate().skip(pos + "Answer".len()) {
            if c.is_ascii_uppercase() && c <= b'D' && standalone(i) {
                return Some((c - b'A') as usize);
            }
        }
    }
    let mut last = None;
    for (i, &c) in bytes.iter().enumerate() {
        if c.is_ascii_uppercase() && c <= b'D' && standalone(i) {
            last = Some((c - b'A') as usize);
        }
    }
    last
}

// ---------------------------------------------------------------------------
// Configuration and results
// ---------------------------------------------------------------------------

/// Pipeline switches; the three `use_*` flags are the ablation toggles.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Step 2 prompts with entity crops; off sends the full image instead.
    pub use_crop: bool,
    /// Step 3 centers each pair by spherical rotation; off prompts on the
    /// original ERP image.
    pub use_rotate: bool,
    /// Step 4 assigns entity-view relations; off skips the step entirely.
    pub use_evr: bool,
    /// Upper bound on step-3 pairs; `None` processes every pair.
    pub max_entity_pairs: Option<usize>,
    pub templates: PromptTemplates,
    /// Re-ask on the image when the model outputs `CANNOT ANSWER`.
    pub fallback_on_cannot_answer: bool,
    /// Longest image side sent to the backend; geometry always runs at full
    /// resolution.
    pub image_downscale_for_prompting: Option<u32>,
    pub max_output_tokens: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            use_crop: true,
            use_rotate: true,
            use_evr: true,
            max_entity_pairs: None,
            templates: PromptTemplates::default(),
            fallback_on_cannot_answer: true,
            image_downscale_for_prompting: None,
            max_output_tokens: 1024,
        }
    }
}

/// Wall-clock seconds per pipeline step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepTimings {
    pub step1_s: f64,
    pub step2_s: f64,
    pub step3_s: f64,
    pub step4_s: f64,
    pub answer_s: f64,
}

impl StepTimings {
    pub fn total_s(&self) -> f64 {
        self.step1_s + self.step2_s + self.step3_s + self.step4_s + self.answer_s
    }
}

#[derive(Debug, Clone)]
pub struct QaResult {
    /// Chosen option (0–3), or `None` when no letter could be parsed.
    pub answer_index: Option<usize>,
    /// The model's final response text.
    pub reasoning: String,
    /// Whether the answer came from the direct-image fallback path.
    pub used_fallback: bool,
    pub step_timings: StepTimings,
    pub graph: SceneGraph,
    /// Step events as JSON values, one per line when written to a run log.
    pub events: Vec<serde_json::Value>,
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

pub struct Pipeline {
    config: PipelineConfig,
}

#[derive(Debug, Deserialize)]
struct RawDetection {
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Run the full pipeline for one question.
    pub fn run(
        &self,
        backend: &dyn Backend,
        erp: &ErpImage,
        question: &str,
        options: &[String; 4],
    ) -> Result<QaResult, PipelineError> {
        let mut events = Vec::new();
        let mut timings = StepTimings::default();

        let layout = CmpLayout::new((erp.width() / 4).max(1))?;
        let cmp = erp_to_cmp(erp, &layout);
        events.push(serde_json::json!({
            "event": "cmp_converted",
            "width": cmp.width(),
            "height": cmp.height(),
        }));

        // Step 1: entity identification on the CMP image.
        let started = Instant::now();
        let step1 = self.step1_identify(backend, &cmp, question, &mut events);
        timings.step1_s = started.elapsed().as_secs_f64();
        let mut graph = match step1 {
            Ok(graph) => graph,
            Err(error) => {
                events.push(serde_json::json!({
                    "event": "step1_failed",
                    "error": error.to_string(),
                }));
                let started = Instant::now();
                let mut result = self.direct_image_qa(
                    backend,
                    &cmp,
                    question,
                    options,
                    SceneGraph::new(),
                    "qa_fallback",
                )?;
                timings.answer_s = started.elapsed().as_secs_f64();
                result.step_timings = timings;
                result.events = events;
                result.events.push(serde_json::json!({
                    "event": "fallback",
                    "reason": "step1_failed",
                }));
                return Ok(result);
            }
        };

        // Transport entity boxes to the ERP frame for step 3.
        for id in graph.entity_ids().collect::<Vec<_>>() {
            let box_cmp = graph.entity(id)?.box_cmp;
            match cmp_box_to_erp_box(&box_cmp, &layout, erp.width(), erp.height()) {
                Ok(box_erp) => graph.set_box_erp(id, box_erp)?,
                Err(error) => events.push(serde_json::json!({
                    "event": "box_transport_failed",
                    "entity": graph.entity(id)?.display_name(),
                    "error": error.to_string(),
                })),
            }
        }

        let started = Instant::now();
        self.step2_attributes(backend, &mut graph, &cmp, question, &mut events);
        timings.step2_s = started.elapsed().as_secs_f64();

        let started = Instant::now();
        self.step3_inter_entity(backend, &mut graph, erp, question, &mut events);
        timings.step3_s = started.elapsed().as_secs_f64();

        let started = Instant::now();
        if self.config.use_evr {
            self.step4_entity_view(&mut graph, &layout, &mut events)?;
        }
        timings.step4_s = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let mut result = self.answer(backend, &graph, &cmp, question, options)?;
        timings.answer_s = started.elapsed().as_secs_f64();
        result.step_timings = timings;
        events.push(serde_json::json!({
            "event": "answered",
            "answer_index": result.answer_index,
            "used_fallback": result.used_fallback,
        }));
        result.events = events;
        Ok(result)
    }

    /// Step 1: prompt with the CMP image, parse the JSON detection list (one
    /// reformat retry), and build a fresh graph with indexed entities.
    fn step1_identify(
        &self,
        backend: &dyn Backend,
        cmp: &CmpImage,
        question: &str,
        events: &mut Vec<serde_json::Value>,
    ) -> Result<SceneGraph, PipelineError> {
        let (part, scale) = self.prompt_image(cmp.pixels())?;
        let prompt = render(&self.config.templates.step1, &[("question", question)]);
        let request = BackendRequest::user(
            "step1",
            prompt,
            Some(part.clone()),
            self.config.max_output_tokens,
        );
        let response = backend.complete(&request)?;

        let detections = match parse_step1_json(&response.text) {
            Some(d) => d,
            None => {
                events.push(serde_json::json!({ "event": "step1_retry" }));
                let retry_prompt =
                    render(&self.config.templates.step1_retry, &[("question", question)]);
                let retry = BackendRequest::user(
                    "step1:retry",
                    retry_prompt,
                    Some(part),
                    self.config.max_output_tokens,
                );
                let response = backend.complete(&retry)?;
                parse_step1_json(&response.text).ok_or_else(|| {
                    PipelineError::Template(format!(
                        "step 1 response is not a JSON detection list: {}",
                        response.text
                    ))
                })?
            }
        };

        let mut graph = SceneGraph::new();
        for det in detections {
            let raw = PixelBox::new(
                det.bbox[0] * scale,
                det.bbox[1] * scale,
                det.bbox[2] * scale,
                det.bbox[3] * scale,
            );
            match clamp_box_to_occupied(&raw, cmp.layout()) {
                Some(box_cmp) => {
                    let label = sanitize_text(&det.label);
                    if label.is_empty() {
                        events.push(serde_json::json!({
                            "event": "detection_dropped",
                            "reason": "empty label",
                        }));
                        continue;
                    }
                    graph.add_entity(&label, box_cmp)?;
                }
                None => events.push(serde_json::json!({
                    "event": "detection_dropped",
                    "label": det.label,
                    "reason": "box outside occupied cells",
                })),
            }
        }
        events.push(serde_json::json!({
            "event": "step1",
            "entities": graph.entities().len(),
        }));
        Ok(graph)
    }

    /// Step 2: one attribute prompt per entity, with its crop (or the full
    /// image when cropping is ablated). Backend failures leave the attribute
    /// empty and are logged.
    fn step2_attributes(
        &self,
        backend: &dyn Backend,
        graph: &mut SceneGraph,
        cmp: &CmpImage,
        question: &str,
        events: &mut Vec<serde_json::Value>,
    ) {
        for id in graph.entity_ids().collect::<Vec<_>>() {
            let (name, box_cmp) = {
                let e = graph.entity(id).expect("id from entity_ids");
                (e.display_name(), e.box_cmp)
            };
            let outcome = (|| -> Result<String, PipelineError> {
                let image = if self.config.use_crop {
                    cmp.crop(&box_cmp)?
                } else {
                    cmp.pixels().clone()
                };
                let (part, _) = self.prompt_image(&image)?;
                let prompt = render(
                    &self.config.templates.step2,
                    &[("label", name.as_str()), ("question", question)],
                );
                let request = BackendRequest::user(
                    format!("step2:{name}"),
                    prompt,
                    Some(part),
                    self.config.max_output_tokens,
                );
                Ok(backend.complete(&request)?.text)
            })();
            match outcome {
                Ok(text) => {
                    let attribute = sanitize_text(&text);
                    graph
                        .set_attribute(id, &attribute)
                        .expect("sanitized attribute is safe");
                    events.push(serde_json::json!({
                        "event": "step2_attribute",
                        "entity": name,
                    }));
                }
                Err(error) => events.push(serde_json::json!({
                    "event": "step2_failed",
                    "entity": name,
                    "error": error.to_string(),
                })),
            }
        }
    }

    /// Step 3: for each entity pair (insertion order, bounded by
    /// `max_entity_pairs`), prompt on the pair-centered rotated panorama with
    /// a two-color overlay; failures skip the pair.
    fn step3_inter_entity(
        &self,
        backend: &dyn Backend,
        graph: &mut SceneGraph,
        erp: &ErpImage,
        question: &str,
        events: &mut Vec<serde_json::Value>,
    ) {
        let ids: Vec<_> = graph.entity_ids().collect();
        let budget = self.config.max_entity_pairs.unwrap_or(usize::MAX);
        let mut processed = 0usize;
        'pairs: for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                if processed >= budget {
                    break 'pairs;
                }
                processed += 1;
                let (id_a, id_b) = (ids[i], ids[j]);
                let pair_name = {
                    let a = graph.entity(id_a).expect("valid id");
                    let b = graph.entity(id_b).expect("valid id");
                    format!("{} / {}", a.display_name(), b.display_name())
                };
                match self.relate_pair(backend, graph, erp, question, id_a, id_b) {
                    Ok(predicate) => {
                        graph
                            .add_inter_entity_relation(id_a, &predicate, id_b)
                            .expect("pairs enumerated once and sanitized");
                        events.push(serde_json::json!({
                            "event": "step3_relation",
                            "pair": pair_name,
                        }));
                    }
                    Err(error) => events.push(serde_json::json!({
                        "event": "step3_pair_skipped",
                        "pair": pair_name,
                        "reason": error.to_string(),
                    })),
                }
            }
        }
    }

    fn relate_pair(
        &self,
        backend: &dyn Backend,
        graph: &SceneGraph,
        erp: &ErpImage,
        question: &str,
        id_a: crate::graph::EntityId,
        id_b: crate::graph::EntityId,
    ) -> Result<String, PipelineError> {
        let entity_a = graph.entity(id_a)?;
        let entity_b = graph.entity(id_b)?;
        let box_a = entity_a.box_erp.ok_or_else(|| {
            PipelineError::Reproject(ReprojectError::InvalidBox(format!(
                "{} has no ERP box",
                entity_a.display_name()
            )))
        })?;
        let box_b = entity_b.box_erp.ok_or_else(|| {
            PipelineError::Reproject(ReprojectError::InvalidBox(format!(
                "{} has no ERP box",
                entity_b.display_name()
            )))
        })?;

        let (image, draw_a, draw_b) = if self.config.use_rotate {
            let (_, rot) = pair_center(&box_a, &box_b, erp.width(), erp.height())?;
            let rotated = rotate_erp(erp, &rot.matrix);
            let ta = transform_box_erp(&box_a, &rot.matrix, erp.width(), erp.height())?;
            let tb = transform_box_erp(&box_b, &rot.matrix, erp.width(), erp.height())?;
            (rotated, ta, tb)
        } else {
            (erp.clone(), box_a, box_b)
        };

        let mut overlay = Overlay::new();
        overlay.push(entity_a.display_name(), draw_a);
        overlay.push(entity_b.display_name(), draw_b);
        let legend = overlay.legend();
        let annotated = annotate(image.pixels(), &overlay, stroke_for(erp.width()));
        let (part, _) = self.prompt_image(&annotated)?;

        let prompt = render(
            &self.config.templates.step3,
            &[("legend", legend.as_str()), ("question", question)],
        );
        let request = BackendRequest::user(
            format!(
                "step3:{}|{}",
                entity_a.display_name(),
                entity_b.display_name()
            ),
            prompt,
            Some(part),
            self.config.max_output_tokens,
        );
        let response = backend.complete(&request)?;
        Ok(sanitize_text(&response.text))
    }

    /// Step 4: deterministic entity-view assignment from box centers; no
    /// backend calls. Centers in a blank cell snap to the nearest occupied
    /// pixel of the box; a fully blank box leaves the entity unassigned.
    fn step4_entity_view(
        &self,
        graph: &mut SceneGraph,
        layout: &CmpLayout,
        events: &mut Vec<serde_json::Value>,
    ) -> Result<(), PipelineError> {
        for id in graph.entity_ids().collect::<Vec<_>>() {
            let (name, box_cmp) = {
                let e = graph.entity(id)?;
                (e.display_name(), e.box_cmp)
            };
            let (cx, cy) = box_cmp.center();
            let face = match view_of_pixel(cx, cy, layout) {
                Ok(face) => Some(face),
                Err(_) => nearest_occupied_face(&box_cmp, layout),
            };
            match face {
                Some(face) => {
                    graph.add_entity_view_relation(id, face)?;
                    events.push(serde_json::json!({
                        "event": "step4_view",
                        "entity": name,
                        "view": face.view_label(),
                    }));
                }
                None => events.push(serde_json::json!({
                    "event": "step4_unassigned",
                    "entity": name,
                })),
            }
        }
        Ok(())
    }

    /// Graph QA: prompt with the serialized graph (text only); on
    /// `CANNOT ANSWER` re-ask on the CMP image.
    fn answer(
        &self,
        backend: &dyn Backend,
        graph: &SceneGraph,
        cmp: &CmpImage,
        question: &str,
        options: &[String; 4],
    ) -> Result<QaResult, PipelineError> {
        let prompt = render(
            &self.config.templates.qa,
            &[
                ("graph", graph.serialize().as_str()),
                ("question", question),
                ("options", format_options(options).as_str()),
            ],
        );
        let request = BackendRequest::user("qa", prompt, None, self.config.max_output_tokens);
        let response = backend.complete(&request)?;

        if response.text.contains(CANNOT_ANSWER) && self.config.fallback_on_cannot_answer {
            return self.direct_image_qa(backend, cmp, question, options, graph.clone(), "qa_fallback");
        }

        Ok(QaResult {
            answer_index: parse_answer_letter(&response.text),
            reasoning: response.text,
            used_fallback: false,
            step_timings: StepTimings::default(),
            graph: graph.clone(),
            events: Vec::new(),
        })
    }

    /// Direct QA on the CMP image, used as the fallback path.
    fn direct_image_qa(
        &self,
        backend: &dyn Backend,
        cmp: &CmpImage,
        question: &str,
        options: &[String; 4],
        graph: SceneGraph,
        tag: &str,
    ) -> Result<QaResult, PipelineError> {
        let (part, _) = self.prompt_image(cmp.pixels())?;
        let prompt = render(
            &self.config.templates.qa_image,
            &[
                ("question", question),
                ("options", format_options(options).as_str()),
            ],
        );
        let request =
            BackendRequest::user(tag, prompt, Some(part), self.config.max_output_tokens);
        let response = backend.complete(&request)?;
        Ok(QaResult {
            answer_index: parse_answer_letter(&response.text),
            reasoning: response.text,
            used_fallback: true,
            step_timings: StepTimings::default(),
            graph,
            events: Vec::new(),
        })
    }

    /// Encode an image for prompting, downscaling to the configured longest
    /// side. Returns the part and the factor mapping prompt-image pixel
    /// coordinates back to full-resolution coordinates.
    fn prompt_image(&self, img: &RgbImage) -> Result<(ImagePart, f64), PipelineError> {
        let longest = img.width().max(img.height());
        match self.config.image_downscale_for_prompting {
            Some(max_side) if longest > max_side && max_side > 0 => {
                let factor = max_side as f64 / longest as f64;
                let w = ((img.width() as f64 * factor).round() as u32).max(1);
                let h = ((img.height() as f64 * factor).round() as u32).max(1);
                let resized = image::imageops::resize(img, w, h, FilterType::Triangle);
                Ok((
                    ImagePart::from_rgb(&resized)?,
                    img.width() as f64 / w as f64,
                ))
            }
            _ => Ok((ImagePart::from_rgb(img)?, 1.0)),
        }
    }
}

/// Stroke width for overlay outlines, scaled with the panorama.
fn stroke_for(width: u32) -> u32 {
    (width / 512).max(3)
}

/// Parse the step-1 response: the outermost JSON array of detections.
fn parse_step1_json(text: &str) -> Option<Vec<RawDetection>> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    if end < start {
        return None;
    }
    serde_json::from_str(&text[start..=end]).ok()
}

/// Clamp a detection box into the occupied area of the cross.
///
/// The box is intersected with every occupied cell and the intersections are
/// covered with one bounding box. If that cover would itself leak into a
/// blank cell (possible for boxes spanning an outer corner of the cross), the
/// largest single-cell intersection is used instead. Returns `None` when the
/// box misses every occupied cell.
fn clamp_box_to_occupied(bbox: &PixelBox, layout: &CmpLayout) -> Option<PixelBox> {
    let mut union: Option<PixelBox> = None;
    let mut biggest: Option<(f64, PixelBox)> = None;
    for face in Face::ALL {
        let Some(part) = bbox.intersect(&layout.face_cell(face)) else {
            continue;
        };
        union = Some(match union {
            None => part,
            Some(u) => PixelBox::new(
                u.x1.min(part.x1),
                u.y1.min(part.y1),
                u.x2.max(part.x2),
                u.y2.max(part.y2),
            ),
        });
        let area = part.width() * part.height();
        if biggest.is_none_or(|(best, _)| area > best) {
            biggest = Some((area, part));
        }
    }
    let union = union?;
    if box_within_occupied(&union, layout) {
        Some(union)
    } else {
        biggest.map(|(_, part)| part)
    }
}

/// Whether every grid cell the box touches is occupied.
fn box_within_occupied(bbox: &PixelBox, layout: &CmpLayout) -> bool {
    let f = layout.face_size() as f64;
    let cell_of = |v: f64, max: u32| ((v / f) as u32).min(max - 1);
    let c1 = cell_of(bbox.x1, 4);
    let c2 = cell_of((bbox.x2 - 1e-9).max(bbox.x1), 4);
    let r1 = cell_of(bbox.y1, 3);
    let r2 = cell_of((bbox.y2 - 1e-9).max(bbox.y1), 3);
    for col in c1..=c2 {
        for row in r1..=r2 {
            if layout.face_at_cell(col, row).is_none() {
                return false;
            }
        }
    }
    true
}

/// Nearest occupied pixel of the box to its center, by face priority on ties.
fn nearest_occupied_face(bbox: &PixelBox, layout: &CmpLayout) -> Option<Face> {
    let (cx, cy) = bbox.center();
    let mut best: Option<(f64, Face)> = None;
    for face in Face::ALL {
        let Some(part) = bbox.intersect(&layout.face_cell(face)) else {
            continue;
        };
        let nx = cx.clamp(part.x1, part.x2);
        let ny = cy.clamp(part.y1, part.y2);
        let d2 = (nx - cx).powi(2) + (ny - cy).powi(2);
        if best.is_none_or(|(bd, _)| d2 < bd) {
            best = Some((d2, face));
        }
    }
    best.map(|(_, face)| face)
}
