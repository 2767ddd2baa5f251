//! Warning generation: pick the pages the attention blocks focused on, build
//! the prompt for a vision-language model and collect its answer.

use std::path::PathBuf;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{page_sources, PageRecord, Sample};
use crate::model::{AttentionRanking, BlockKind, Prediction, Verdict};

/// Environment variable naming the generation endpoint (`stub` for the
/// built-in client).
pub const ENDPOINT_ENV: &str = "OOC_VLM_ENDPOINT";
pub const STUB_ENDPOINT: &str = "stub";
/// Placeholder the generation model replaces with the submitted image.
pub const IMAGE_MARKER: &str = "<Img><ImageHere></Img>";
/// Maximum number of content characters quoted per page.
pub const CONTENT_CHARS: usize = 400;
pub const STUB_PREFIX_CHARS: usize = 80;

const HEADER_INSTRUCTION: &str = "You are a tool for out-of-context detection, your task is to give reasons why the submitted image and the caption below are in the same context or not.";
const DIRECT_SEARCH_LEAD: &str = "An evidence retrieved using the caption to query the web, obtained because it contains an image with high similarity with the submitted image has title";
const INVERSE_SEARCH_LEAD: &str = "An evidence retrieved using the image to query the web, obtained because it contains a text with high similarity with the submitted caption has title";
const CONTENT_LEAD: &str = "and content of the paragraphs";

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("sample `{sample_id}` has no image_ref but the generation client requires the image")]
    MissingImage { sample_id: String },
    #[error("cannot read image {path}: {source}")]
    ImageRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("generation failed for `{}`: {message}", report.sample_id)]
    Generation {
        /// The report with prompt and links filled in and empty text.
        report: Box<WarningReport>,
        message: String,
    },
}

/// How a page entered the sample's evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalModality {
    /// Found by querying the web with the caption (visual evidence).
    DirectSearch,
    /// Found by querying the web with the image (textual evidence).
    InverseSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttendedPage {
    pub page: PageRecord,
    pub retrieval_modality: RetrievalModality,
    pub selecting_blocks: Vec<BlockKind>,
}

/// Top-1 source page of each attention block, deduplicated in block order.
pub fn select_attended_pages(ranking: &AttentionRanking, sample: &Sample) -> Vec<AttendedPage> {
    let sources = page_sources(sample);
    let mut out: Vec<AttendedPage> = Vec::new();
    for block in &ranking.blocks {
        if let Some(existing) = out.iter_mut().find(|p| p.page.page_id == block.page_id) {
            if !existing.selecting_blocks.contains(&block.block) {
                existing.selecting_blocks.push(block.block);
            }
            continue;
        }
        let Some(page) = sample.page(&block.page_id) else {
            continue;
        };
        let retrieval_modality = match sources.get(page.page_id.as_str()) {
            Some((true, false)) => RetrievalModality::DirectSearch,
            _ => RetrievalModality::InverseSearch,
        };
        out.push(AttendedPage {
            page: page.clone(),
            retrieval_modality,
            selecting_blocks: vec![block.block],
        });
    }
    out
}

/// First `max_chars` characters of `text`.
pub fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((idx, _)) => &text[..idx],
        None => text,
    }
}

/// Prompt for the generation model.
///
/// The likelihood slot carries the probability that the pair is in the same
/// context, i.e. `1 - p_class`; the verdict follows `p_class >= threshold`.
pub fn build_prompt(sample: &Sample, prediction: &Prediction, pages: &[AttendedPage]) -> String {
    let likelihood = 1.0 - prediction.p_class;
    let verdict = Verdict::from_probability(prediction.p_class, prediction.threshold_used);
    let mut prompt = format!(
        "{HEADER_INSTRUCTION} Submitted Image: {IMAGE_MARKER}. Caption: {}. The likelihood of the submitted image and the above caption being in the same context is {likelihood}, thus the pair is {verdict}",
        sample.caption_text
    );
    for p in pages {
        let lead = match p.retrieval_modality {
            RetrievalModality::DirectSearch => DIRECT_SEARCH_LEAD,
            RetrievalModality::InverseSearch => INVERSE_SEARCH_LEAD,
        };
        prompt.push('\n');
        prompt.push_str(&format!(
            "{lead} {} {CONTENT_LEAD} {}",
            p.page.title,
            truncate_chars(&p.page.content, CONTENT_CHARS)
        ));
    }
    prompt
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
}

pub trait GenerationClient: Send + Sync {
    /// Whether a request without an image must be refused.
    fn requires_image(&self) -> bool {
        false
    }

    /// Whether the image is sent when the sample has one.
    fn wants_image(&self) -> bool {
        false
    }

    fn generate(&self, request: &GenerationRequest, verdict: Verdict) -> Result<String, String>;
}

/// Deterministic offline client: `STUB[<verdict>]: ` followed by the first
/// 80 characters of the prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubClient;

impl GenerationClient for StubClient {
    fn generate(&self, request: &GenerationRequest, verdict: Verdict) -> Result<String, String> {
        Ok(format!(
            "STUB[{verdict}]: {}",
            truncate_chars(&request.prompt, STUB_PREFIX_CHARS)
        ))
    }
}

/// JSON-over-HTTP client: POSTs a [`GenerationRequest`] and reads a
/// [`GenerationResponse`].
#[derive(Debug, Clone)]
pub struct HttpClient {
    endpoint: String,
    agent: ureq::Agent,
    require_image: bool,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            require_image: false,
        }
    }

    pub fn requiring_image(mut self, require: bool) -> Self {
        self.require_image = require;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl GenerationClient for HttpClient {
    fn requires_image(&self) -> bool {
        self.require_image
    }

    fn wants_image(&self) -> bool {
        true
    }

    fn generate(&self, request: &GenerationRequest, _verdict: Verdict) -> Result<String, String> {
        let body = serde_json::to_value(request).map_err(|e| e.to_string())?;
        let resp = self
            .agent
            .post(&self.endpoint)
            .send_json(body)
            .map_err(|e| e.to_string())?;
        let parsed: GenerationResponse = resp.into_json().map_err(|e| e.to_string())?;
        Ok(parsed.text)
    }
}

/// Picks the endpoint: explicit value, then `OOC_VLM_ENDPOINT`, then the
/// config file value, then the stub.
pub fn resolve_endpoint(explicit: Option<&str>, config_value: Option<&str>) -> String {
    if let Some(e) = explicit {
        return e.to_string();
    }
    if let Ok(e) = std::env::var(ENDPOINT_ENV) {
        if !e.is_empty() {
            return e;
        }
    }
    config_value.unwrap_or(STUB_ENDPOINT).to_string()
}

pub fn client_for_endpoint(endpoint: &str, timeout: Duration) -> Box<dyn GenerationClient> {
    if endpoint == STUB_ENDPOINT {
        Box::new(StubClient)
    } else {
        Box::new(HttpClient::new(endpoint, timeout))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningReport {
    pub sample_id: String,
    pub prompt: String,
    pub verdict: Verdict,
    pub p_class: f64,
    pub generated_text: String,
    pub links: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Builds the prompt, queries `client` and assembles the report.
pub fn generate_warning(
    sample: &Sample,
    prediction: &Prediction,
    pages: &[AttendedPage],
    client: &dyn GenerationClient,
) -> Result<WarningReport, ExplainError> {
    let prompt = build_prompt(sample, prediction, pages);
    let mut links: Vec<String> = Vec::new();
    for p in pages {
        if !links.contains(&p.page.url) {
            links.push(p.page.url.clone());
        }
    }
    if client.requires_image() && sample.image_ref.is_none() {
        return Err(ExplainError::MissingImage {
            sample_id: sample.sample_id.clone(),
        });
    }
    let image_b64 = match (&sample.image_ref, client.wants_image()) {
        (Some(path), true) => {
            let bytes = std::fs::read(path).map_err(|source| ExplainError::ImageRead {
                path: PathBuf::from(path),
                source,
            })?;
            Some(base64::engine::general_purpose::STANDARD.encode(bytes))
        }
        _ => None,
    };
    let verdict = Verdict::from_probability(prediction.p_class, prediction.threshold_used);
    let mut report = WarningReport {
        sample_id: sample.sample_id.clone(),
        prompt,
        verdict,
        p_class: prediction.p_class,
        generated_text: String::new(),
        links,
        error: None,
    };
    let request = GenerationRequest {
        prompt: report.prompt.clone(),
        image_b64,
    };
    match client.generate(&request, verdict) {
        Ok(text) => {
            report.generated_text = text;
            Ok(report)
        }
        Err(message) => {
            report.error = Some(message.clone());
            Err(ExplainError::Generation {
                report: Box::new(report),
                message,
            })
        }
    }
}
