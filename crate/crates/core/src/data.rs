//! Samples, evidence, the on-disk archive format and a synthetic generator.
//!
//! An archive is a directory holding `manifest.json` and `samples.jsonl`.
//! Embeddings are stored as single-precision values written in their
//! shortest round-trip decimal form, so save/load is bit-exact.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing archive file {0}")]
    MissingFile(PathBuf),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("unsupported archive format_version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("{file} line {line}: malformed record: {message}")]
    Record {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("sample `{sample_id}`: field `{field}` has length {actual}, expected {expected}")]
    DimMismatch {
        sample_id: String,
        field: String,
        expected: usize,
        actual: usize,
    },
    #[error("sample `{sample_id}`: evidence references unknown page `{page_id}`")]
    DanglingPage { sample_id: String, page_id: String },
    #[error("sample `{sample_id}`: duplicate page_id `{page_id}`")]
    DuplicatePage { sample_id: String, page_id: String },
    #[error("sample `{sample_id}`: label must be 0 or 1, got {label}")]
    InvalidLabel { sample_id: String, label: u8 },
    #[error("sample `{sample_id}`: field `{field}` contains a non-finite value")]
    NonFinite { sample_id: String, field: String },
    #[error("manifest declares {declared} samples but archive holds {actual}")]
    CountMismatch { declared: usize, actual: usize },
    #[error("cannot aggregate a page with no sentence embeddings")]
    EmptyPage,
    #[error("sentence embedding {index} has length {actual}, expected {expected}")]
    RaggedSentences {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// A source web page. `embedding` is the mean of its sentence embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageRecord {
    pub page_id: String,
    pub url: String,
    pub title: String,
    pub content: String,
    pub embedding: Vec<f32>,
}

/// An image retrieved by searching the web with the query caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualEvidence {
    pub embedding: Vec<f32>,
    pub labels_embedding: Vec<f32>,
    pub page_id: String,
}

/// Text retrieved by searching the web with the query image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextualEvidence {
    pub embedding: Vec<f32>,
    pub page_id: String,
}

/// One (image, caption) query with everything retrieved for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub sample_id: String,
    pub image_embedding: Vec<f32>,
    pub caption_text: String,
    pub caption_embedding: Vec<f32>,
    pub labels_embedding: Vec<f32>,
    pub pair_embedding: Vec<f32>,
    pub visual_evidence: Vec<VisualEvidence>,
    pub textual_evidence: Vec<TextualEvidence>,
    pub pages: Vec<PageRecord>,
    /// 1 = falsified (out of context), 0 = pristine.
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl Sample {
    pub fn page(&self, page_id: &str) -> Option<&PageRecord> {
        self.pages.iter().find(|p| p.page_id == page_id)
    }

    pub fn is_falsified(&self) -> bool {
        self.label == 1
    }

    /// Checks embedding sizes, label range and page references.
    pub fn validate(&self, dims: &Dims) -> Result<(), DataError> {
        let id = &self.sample_id;
        let check = |field: &str, v: &[f32], expected: usize| -> Result<(), DataError> {
            if v.len() != expected {
                return Err(DataError::DimMismatch {
                    sample_id: id.clone(),
                    field: field.to_string(),
                    expected,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DataError::NonFinite {
                    sample_id: id.clone(),
                    field: field.to_string(),
                });
            }
            Ok(())
        };
        check("image_embedding", &self.image_embedding, dims.d_v)?;
        check("caption_embedding", &self.caption_embedding, dims.d_t)?;
        check("labels_embedding", &self.labels_embedding, dims.d_t)?;
        check("pair_embedding", &self.pair_embedding, dims.d_mm)?;
        for (i, e) in self.visual_evidence.iter().enumerate() {
            check(&format!("visual_evidence[{i}].embedding"), &e.embedding, dims.d_v)?;
            check(
                &format!("visual_evidence[{i}].labels_embedding"),
                &e.labels_embedding,
                dims.d_t,
            )?;
        }
        for (i, e) in self.textual_evidence.iter().enumerate() {
            check(&format!("textual_evidence[{i}].embedding"), &e.embedding, dims.d_t)?;
        }
        let mut seen = HashSet::new();
        for (i, p) in self.pages.iter().enumerate() {
            check(&format!("pages[{i}].embedding"), &p.embedding, dims.d_t)?;
            if !seen.insert(p.page_id.as_str()) {
                return Err(DataError::DuplicatePage {
                    sample_id: id.clone(),
                    page_id: p.page_id.clone(),
                });
            }
        }
        let refs = self
            .visual_evidence
            .iter()
            .map(|e| &e.page_id)
            .chain(self.textual_evidence.iter().map(|e| &e.page_id));
        for page_id in refs {
            if !seen.contains(page_id.as_str()) {
                return Err(DataError::DanglingPage {
                    sample_id: id.clone(),
                    page_id: page_id.clone(),
                });
            }
        }
        if self.label > 1 {
            return Err(DataError::InvalidLabel {
                sample_id: id.clone(),
                label: self.label,
            });
        }
        Ok(())
    }
}

/// Embedding sizes shared by every sample of an archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d_v: usize,
    pub d_t: usize,
    pub d_mm: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub d_v: usize,
    pub d_t: usize,
    pub d_mm: usize,
    pub split: Split,
    pub sample_count: usize,
    pub format_version: u32,
}

impl DatasetManifest {
    pub fn dims(&self) -> Dims {
        Dims {
            d_v: self.d_v,
            d_t: self.d_t,
            d_mm: self.d_mm,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.format_version != FORMAT_VERSION {
            return Err(DataError::UnsupportedVersion {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if self.d_v == 0 || self.d_t == 0 || self.d_mm == 0 {
            return Err(DataError::Manifest("dimensions must be positive".into()));
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads and validates an archive directory. Samples come back in file order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<Sample>), DataError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let samples_path = dir.join(SAMPLES_FILE);
    for p in [&manifest_path, &samples_path] {
        if !p.is_file() {
            return Err(DataError::MissingFile(p.clone()));
        }
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    manifest.validate()?;
    let dims = manifest.dims();

    let file = File::open(&samples_path).map_err(io_err(&samples_path))?;
    let mut samples = Vec::with_capacity(manifest.sample_count);
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&samples_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| DataError::Record {
            file: samples_path.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        sample.validate(&dims)?;
        samples.push(sample);
    }
    if samples.len() != manifest.sample_count {
        return Err(DataError::CountMismatch {
            declared: manifest.sample_count,
            actual: samples.len(),
        });
    }
    Ok((manifest, samples))
}

/// Writes an archive directory, creating it if needed. Output is
/// byte-deterministic for identical input.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    manifest: &DatasetManifest,
    samples: &[Sample],
) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = DatasetManifest {
        sample_count: samples.len(),
        ..manifest.clone()
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;

    let samples_path = dir.join(SAMPLES_FILE);
    let file = File::create(&samples_path).map_err(io_err(&samples_path))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s).expect("sample serializes");
        w.write_all(b"\n").map_err(io_err(&samples_path))?;
    }
    w.flush().map_err(io_err(&samples_path))?;
    Ok(())
}

/// Element-wise mean of sentence embeddings.
pub fn aggregate_page_embedding(sentences: &[Vec<f64>]) -> Result<Vec<f64>, DataError> {
    let first = sentences.first().ok_or(DataError::EmptyPage)?;
    let dim = first.len();
    let mut acc = vec![0.0; dim];
    for (index, s) in sentences.iter().enumerate() {
        if s.len() != dim {
            return Err(DataError::RaggedSentences {
                index,
                expected: dim,
                actual: s.len(),
            });
        }
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    let n = sentences.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Parameters for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub falsified_fraction: f64,
    pub d_v: usize,
    pub d_t: usize,
    pub d_mm: usize,
    /// Inclusive `(min, max)` number of items per evidence kind.
    pub evidence_count_range: (usize, usize),
    /// How strongly pristine evidence aligns with the query, in `[0, 1]`.
    pub correlation: f64,
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Train
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 100,
            falsified_fraction: 0.5,
            d_v: 32,
            d_t: 32,
            d_mm: 64,
            evidence_count_range: (1, 4),
            correlation: 0.9,
            seed: 0,
            split: Split::Train,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSynthSpec(m.to_string()));
        if !(0.0..=1.0).contains(&self.falsified_fraction) {
            return bad("falsified_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return bad("correlation must lie in [0, 1]");
        }
        if self.evidence_count_range.0 > self.evidence_count_range.1 {
            return bad("evidence_count_range min exceeds max");
        }
        if self.d_v == 0 || self.d_t == 0 || self.d_mm == 0 {
            return bad("dimensions must be positive");
        }
        Ok(())
    }
}

const SENTENCES_PER_PAGE: usize = 3;

fn unit_noise(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::tensor::norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `normalize(c * anchor + (1 - c) * noise)` with unit-norm noise.
fn mix(anchor: &[f64], c: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = unit_noise(anchor.len(), rng);
    let v: Vec<f64> = anchor
        .iter()
        .zip(&noise)
        .map(|(a, e)| c * a + (1.0 - c) * e)
        .collect();
    let n = crate::tensor::norm(&v);
    if n > 1e-9 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        noise
    }
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

fn synthetic_content(sample_id: &str, page_no: usize, rng: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 12] = [
        "officials", "reported", "a", "gathering", "near", "the", "river", "during", "annual",
        "ceremony", "witnesses", "described",
    ];
    let n_sentences = rng.gen_range(2..=12);
    let mut text = String::new();
    for s in 0..n_sentences {
        if s > 0 {
            text.push(' ');
        }
        let n_words = rng.gen_range(4..=10);
        let words: Vec<&str> = (0..n_words)
            .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
            .collect();
        text.push_str(&format!(
            "Paragraph {s} of page {page_no} for {sample_id}: {}.",
            words.join(" ")
        ));
    }
    text
}

/// Builds a deterministic synthetic dataset.
///
/// Pristine samples draw every evidence embedding (and their pages) close to
/// the corresponding query embedding; falsified samples draw them
/// independently. The pair embedding of pristine samples leans toward a fixed
/// hidden direction.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(DatasetManifest, Vec<Sample>), DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.correlation;
    let n_falsified = (spec.n_samples as f64 * spec.falsified_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..spec.n_samples)
        .map(|i| u8::from(i < n_falsified))
        .collect();
    labels.shuffle(&mut rng);
    let pair_direction = unit_noise(spec.d_mm, &mut rng);
    let (lo, hi) = spec.evidence_count_range;

    let mut samples = Vec::with_capacity(spec.n_samples);
    for (i, &label) in labels.iter().enumerate() {
        let pristine = label == 0;
        let sample_id = format!("synth-{}-{i:06}", spec.seed);
        let image = unit_noise(spec.d_v, &mut rng);
        let caption = unit_noise(spec.d_t, &mut rng);
        let labels_q = unit_noise(spec.d_t, &mut rng);
        let pair = if pristine {
            mix(&pair_direction, c, &mut rng)
        } else {
            unit_noise(spec.d_mm, &mut rng)
        };

        let mut draw = |anchor: &[f64], rng: &mut ChaCha8Rng| {
            if pristine {
                mix(anchor, c, rng)
            } else {
                unit_noise(anchor.len(), rng)
            }
        };

        let mut pages = Vec::new();
        let mut new_page = |rng: &mut ChaCha8Rng, draw: &mut dyn FnMut(&[f64], &mut ChaCha8Rng) -> Vec<f64>| {
            let k = pages.len();
            let page_id = format!("p{k}");
            let sentences: Vec<Vec<f64>> =
                (0..SENTENCES_PER_PAGE).map(|_| draw(&caption, rng)).collect();
            let embedding = aggregate_page_embedding(&sentences).expect("non-empty page");
            pages.push(PageRecord {
                url: format!("https://example.org/{sample_id}/{page_id}"),
                title: format!("Synthetic report {k} for {sample_id}"),
                content: synthetic_content(&sample_id, k, rng),
                embedding: to_f32(embedding),
                page_id: page_id.clone(),
            });
            page_id
        };

        let n_visual = rng.gen_range(lo..=hi);
        let mut visual_evidence = Vec::with_capacity(n_visual);
        for _ in 0..n_visual {
            let embedding = draw(&image, &mut rng);
            let labels_embedding = draw(&labels_q, &mut rng);
            let page_id = new_page(&mut rng, &mut draw);
            visual_evidence.push(VisualEvidence {
                embedding: to_f32(embedding),
                labels_embedding: to_f32(labels_embedding),
                page_id,
            });
        }
        let n_textual = rng.gen_range(lo..=hi);
        let mut textual_evidence = Vec::with_capacity(n_textual);
        for j in 0..n_textual {
            let embedding = draw(&caption, &mut rng);
            let shared = visual_evidence.get(j).filter(|_| rng.gen_bool(0.25));
            let page_id = match shared {
                Some(v) => v.page_id.clone(),
                None => new_page(&mut rng, &mut draw),
            };
            textual_evidence.push(TextualEvidence {
                embedding: to_f32(embedding),
                page_id,
            });
        }

        samples.push(Sample {
            caption_text: format!("Synthetic caption number {i} describing a public event"),
            image_embedding: to_f32(image),
            caption_embedding: to_f32(caption),
            labels_embedding: to_f32(labels_q),
            pair_embedding: to_f32(pair),
            visual_evidence,
            textual_evidence,
            pages,
            label,
            image_ref: None,
            sample_id,
        });
    }
    let manifest = DatasetManifest {
        d_v: spec.d_v,
        d_t: spec.d_t,
        d_mm: spec.d_mm,
        split: spec.split,
        sample_count: samples.len(),
        format_version: FORMAT_VERSION,
    };
    Ok((manifest, samples))
}

/// Index from page_id to the evidence kinds that reference it.
pub(crate) fn page_sources(sample: &Sample) -> HashMap<&str, (bool, bool)> {
    let mut map: HashMap<&str, (bool, bool)> = HashMap::new();
    for e in &sample.visual_evidence {
        map.entry(e.page_id.as_str()).or_default().0 = true;
    }
    for e in &sample.textual_evidence {
        map.entry(e.page_id.as_str()).or_default().1 = true;
    }
    map
}
