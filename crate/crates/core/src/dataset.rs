//! Sample ingestion, unknownization, and split assembly.
//!
//! Sample files are UTF-8 JSON Lines, one record per line, with unknown
//! top-level fields rejected. Unknownization deletes whole sentences from a
//! native sample's context and relabels it `Unknown`; the removed sentences
//! and their byte offsets are recorded so the original context can be
//! reconstructed exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{ftype_of, stable_seed, FType, Label, Origin, Sample};

/// Errors raised while loading, validating, or transforming sample sets.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    Schema { line: usize, detail: String },
    #[error("line {line}: duplicate sample id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("{path}: file contains no sample records")]
    EmptyInput { path: String },
    #[error("sample {id}: context has {have} deletable sentences, need more than {need} to delete {need}")]
    TooFewSentences {
        id: String,
        have: usize,
        need: usize,
    },
    #[error("sample {id}: only native samples can be unknownized")]
    NotNative { id: String },
    #[error("deletion count must be at least 1")]
    ZeroDeletionCount,
    #[error("sample {id}: sentence picker failed: {detail}")]
    PickerFailed { id: String, detail: String },
    #[error("sample {id}: malformed unknownized record: {detail}")]
    MalformedUnknownized { id: String, detail: String },
    #[error("pool has {have} {ftype} samples, need {need}")]
    InsufficientPool {
        ftype: FType,
        have: usize,
        need: usize,
    },
}

/// Per-(ftype, subcategory) sample counts plus provenance for a sample set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetManifest {
    /// Dataset name, or `"mixed"` when records span several datasets.
    pub name: String,
    pub total: usize,
    /// ftype -> subcategory (or `"-"`) -> count.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    /// SHA-256 of the serialized source content.
    pub source_digest: String,
}

/// A validated, manifest-carrying collection of samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub manifest: SetManifest,
}

impl SampleSet {
    /// Validates `samples` (ids unique and well formed, invariants hold) and
    /// derives the manifest. `source_digest` should identify the bytes the
    /// samples came from; pass [`content_digest`] output for in-memory sets.
    pub fn from_samples(samples: Vec<Sample>, source_digest: String) -> Result<Self, DatasetError> {
        let mut seen = BTreeSet::new();
        for (idx, sample) in samples.iter().enumerate() {
            let line = idx + 1;
            validate_sample(sample).map_err(|detail| DatasetError::Schema { line, detail })?;
            if !seen.insert(sample.id.clone()) {
                return Err(DatasetError::DuplicateId {
                    line,
                    id: sample.id.clone(),
                });
            }
        }
        let manifest = build_manifest(&samples, source_digest);
        Ok(SampleSet { samples, manifest })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn by_id(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Count of verifiable minus count of unverifiable samples.
    pub fn balance_delta(&self) -> i64 {
        let v = self
            .samples
            .iter()
            .filter(|s| ftype_of(s) == FType::Verifiable)
            .count() as i64;
        v - (self.samples.len() as i64 - v)
    }
}

fn build_manifest(samples: &[Sample], source_digest: String) -> SetManifest {
    let names: BTreeSet<&str> = samples.iter().map(|s| s.dataset.as_str()).collect();
    let name = match names.len() {
        0 => "empty".to_string(),
        1 => names.iter().next().unwrap().to_string(),
        _ => "mixed".to_string(),
    };
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for sample in samples {
        let sub = sample
            .subcategory
            .clone()
            .unwrap_or_else(|| "-".to_string());
        *counts
            .entry(ftype_of(sample).to_string())
            .or_default()
            .entry(sub)
            .or_default() += 1;
    }
    SetManifest {
        name,
        total: samples.len(),
        counts,
        source_digest,
    }
}

fn validate_sample(sample: &Sample) -> Result<(), String> {
    if sample.id.is_empty() {
        return Err("field `id` must be non-empty".to_string());
    }
    if sample.id.contains('|') || sample.id.contains('\n') {
        return Err(format!(
            "field `id` {:?} may not contain '|' or newlines",
            sample.id
        ));
    }
    if sample.context.is_empty() {
        return Err(format!(
            "sample {:?}: field `context` must be non-empty",
            sample.id
        ));
    }
    if sample.hypothesis.is_empty() {
        return Err(format!(
            "sample {:?}: field `hypothesis` must be non-empty",
            sample.id
        ));
    }
    match sample.origin {
        Origin::Unknownized => {
            if sample.gold != Label::Unknown {
                return Err(format!(
                    "sample {:?}: unknownized records must carry gold UNKNOWN",
                    sample.id
                ));
            }
            if sample
                .removed_sentences
                .as_ref()
                .is_none_or(|r| r.is_empty())
            {
                return Err(format!(
                    "sample {:?}: unknownized records must list removed_sentences",
                    sample.id
                ));
            }
        }
        Origin::Native => {
            if sample.removed_sentences.is_some() {
                return Err(format!(
                    "sample {:?}: native records may not carry removed_sentences",
                    sample.id
                ));
            }
        }
    }
    Ok(())
}

/// SHA-256 hex digest of arbitrary bytes; used for manifests.
pub fn content_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads a JSON Lines sample file. Blank lines are permitted and skipped;
/// everything else must parse, validate, and carry a unique id.
pub fn load_samples(path: &Path) -> Result<SampleSet, DatasetError> {
    let raw = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut samples = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(line).map_err(|e| DatasetError::Schema {
            line: line_no,
            detail: e.to_string(),
        })?;
        validate_sample(&sample).map_err(|detail| DatasetError::Schema {
            line: line_no,
            detail,
        })?;
        if seen.insert(sample.id.clone(), line_no).is_some() {
            return Err(DatasetError::DuplicateId {
                line: line_no,
                id: sample.id,
            });
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(DatasetError::EmptyInput {
            path: path.display().to_string(),
        });
    }
    let digest = content_digest(raw.as_bytes());
    let manifest = build_manifest(&samples, digest);
    Ok(SampleSet { samples, manifest })
}

/// Writes samples as JSON Lines. Output is byte-deterministic.
pub fn write_samples(samples: &[Sample], path: &Path) -> Result<(), DatasetError> {
    let mut out = String::new();
    for sample in samples {
        out.push_str(&serde_json::to_string(sample).expect("sample serialization cannot fail"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Serializes samples to the canonical JSON Lines byte form (for digests).
pub fn samples_to_jsonl(samples: &[Sample]) -> String {
    let mut out = String::new();
    for sample in samples {
        out.push_str(&serde_json::to_string(sample).expect("sample serialization cannot fail"));
        out.push('\n');
    }
    out
}

/// Splits `text` into a partition of sentence segments.
///
/// A segment ends after a run of sentence terminators (`.`, `!`, `?`)
/// followed by the maximal whitespace run, or after a bare newline; every
/// byte of the input belongs to exactly one segment, so concatenating the
/// segments reproduces the input. Lines therefore count as sentences in
/// fact-form contexts that enumerate one fact per line.
pub fn segment_sentences(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let len = text.len();
    let mut segments = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (_, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?') {
                j += 1;
            }
            let at_end = j >= chars.len();
            if at_end || chars[j].1.is_whitespace() {
                while j < chars.len() && chars[j].1.is_whitespace() {
                    j += 1;
                }
                let end = if j < chars.len() { chars[j].0 } else { len };
                segments.push(&text[start..end]);
                start = end;
                i = j;
            } else {
                // Terminator inside a token (for example "3.14"): not a boundary.
                i = j;
            }
        } else if c == '\n' {
            let end = if i + 1 < chars.len() {
                chars[i + 1].0
            } else {
                len
            };
            segments.push(&text[start..end]);
            start = end;
            i += 1;
        } else {
            i += 1;
        }
    }
    if start < len {
        segments.push(&text[start..]);
    }
    segments
}

/// Chooses which sentences [`unknownize`] deletes.
pub trait SentencePicker {
    /// Returns `count` distinct indices into `sentences` (deletable segments
    /// of the context, in document order).
    fn pick(&self, sample: &Sample, sentences: &[&str], count: usize)
        -> Result<Vec<usize>, String>;
}

enum StrategyKind<'a> {
    RandomSentences {
        count: usize,
        seed: u64,
    },
    ModelSelected {
        count: usize,
        picker: &'a dyn SentencePicker,
    },
}

/// How [`unknownize`] selects sentences to delete. Construction validates
/// that the deletion count is at least one.
pub struct DeletionStrategy<'a>(StrategyKind<'a>);

impl std::fmt::Debug for DeletionStrategy<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            StrategyKind::RandomSentences { count, seed } => f
                .debug_struct("RandomSentences")
                .field("count", &count)
                .field("seed", &seed)
                .finish(),
            StrategyKind::ModelSelected { count, .. } => f
                .debug_struct("ModelSelected")
                .field("count", &count)
                .finish_non_exhaustive(),
        }
    }
}

impl<'a> DeletionStrategy<'a> {
    /// Uniform seeded selection without replacement.
    pub fn random_sentences(count: usize, seed: u64) -> Result<Self, DatasetError> {
        if count == 0 {
            return Err(DatasetError::ZeroDeletionCount);
        }
        Ok(DeletionStrategy(StrategyKind::RandomSentences {
            count,
            seed,
        }))
    }

    /// Delegates selection to an external picker (for example a model call).
    pub fn model_selected(
        count: usize,
        picker: &'a dyn SentencePicker,
    ) -> Result<Self, DatasetError> {
        if count == 0 {
            return Err(DatasetError::ZeroDeletionCount);
        }
        Ok(DeletionStrategy(StrategyKind::ModelSelected {
            count,
            picker,
        }))
    }

    pub fn count(&self) -> usize {
        match self.0 {
            StrategyKind::RandomSentences { count, .. } => count,
            StrategyKind::ModelSelected { count, .. } => count,
        }
    }
}

/// Default number of sentences unknownization deletes.
pub const DEFAULT_DELETION_COUNT: usize = 2;

/// Deletes sentences from a native sample's context and relabels it
/// `Unknown`.
///
/// The output id gains a deterministic suffix encoding the byte offsets of
/// the removed sentences in the original context
/// (`{id}-unk-{offset}-{offset}`), `removed_sentences` lists the removed
/// texts in document order, and [`reinsert_removed`] reconstructs the
/// original context exactly from the output record alone.
pub fn unknownize(sample: &Sample, strategy: &DeletionStrategy) -> Result<Sample, DatasetError> {
    if sample.origin != Origin::Native {
        return Err(DatasetError::NotNative {
            id: sample.id.clone(),
        });
    }
    let count = strategy.count();
    let segments = segment_sentences(&sample.context);
    let candidates: Vec<usize> = segments
        .iter()
        .enumerate()
        .filter(|(_, seg)| seg.chars().any(|c| !c.is_whitespace()))
        .map(|(i, _)| i)
        .collect();
    if candidates.len() <= count {
        return Err(DatasetError::TooFewSentences {
            id: sample.id.clone(),
            have: candidates.len(),
            need: count,
        });
    }

    let mut chosen: Vec<usize> = match strategy.0 {
        StrategyKind::RandomSentences { count, seed } => {
            let stream = stable_seed(&[&seed.to_le_bytes(), b"unknownize", sample.id.as_bytes()]);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            rand::seq::index::sample(&mut rng, candidates.len(), count)
                .into_iter()
                .map(|k| candidates[k])
                .collect()
        }
        StrategyKind::ModelSelected { count, picker } => {
            let picked = picker
                .pick(
                    sample,
                    &candidates.iter().map(|&i| segments[i]).collect::<Vec<_>>(),
                    count,
                )
                .map_err(|detail| DatasetError::PickerFailed {
                    id: sample.id.clone(),
                    detail,
                })?;
            let distinct: BTreeSet<usize> = picked.iter().copied().collect();
            if picked.len() != count
                || distinct.len() != count
                || picked.iter().any(|&k| k >= candidates.len())
            {
                return Err(DatasetError::PickerFailed {
                    id: sample.id.clone(),
                    detail: format!("picker returned invalid indices {picked:?}"),
                });
            }
            picked.into_iter().map(|k| candidates[k]).collect()
        }
    };
    chosen.sort_unstable();

    let mut offsets = Vec::with_capacity(count);
    let mut removed = Vec::with_capacity(count);
    let mut kept = String::with_capacity(sample.context.len());
    let mut offset = 0usize;
    let mut next_removed = chosen.iter().peekable();
    for (idx, seg) in segments.iter().enumerate() {
        if next_removed.peek() == Some(&&idx) {
            next_removed.next();
            offsets.push(offset);
            removed.push(seg.to_string());
        } else {
            kept.push_str(seg);
        }
        offset += seg.len();
    }

    let mut id = sample.id.clone();
    id.push_str("-unk");
    for off in &offsets {
        id.push_str(&format!("-{off}"));
    }

    Ok(Sample {
        id,
        gold: Label::Unknown,
        origin: Origin::Unknownized,
        context: kept,
        removed_sentences: Some(removed),
        ..sample.clone()
    })
}

/// Byte offsets (in the original context) encoded in an unknownized id.
pub fn removal_offsets(sample: &Sample) -> Result<Vec<usize>, DatasetError> {
    let bad = |detail: &str| DatasetError::MalformedUnknownized {
        id: sample.id.clone(),
        detail: detail.to_string(),
    };
    let (_, suffix) = sample
        .id
        .rsplit_once("-unk-")
        .ok_or_else(|| bad("id carries no -unk- offset suffix"))?;
    let offsets: Result<Vec<usize>, _> = suffix.split('-').map(str::parse).collect();
    offsets.map_err(|_| bad("offset suffix is not a dash-separated list of integers"))
}

/// Reconstructs the original context of an unknownized sample by inserting
/// each removed sentence back at its recorded byte offset.
pub fn reinsert_removed(sample: &Sample) -> Result<String, DatasetError> {
    let bad = |detail: String| DatasetError::MalformedUnknownized {
        id: sample.id.clone(),
        detail,
    };
    let removed = sample
        .removed_sentences
        .as_ref()
        .ok_or_else(|| bad("record lists no removed_sentences".to_string()))?;
    let offsets = removal_offsets(sample)?;
    if offsets.len() != removed.len() {
        return Err(bad(format!(
            "{} recorded offsets but {} removed sentences",
            offsets.len(),
            removed.len()
        )));
    }
    let mut context = sample.context.clone();
    for (offset, text) in offsets.iter().zip(removed) {
        if *offset > context.len() || !context.is_char_boundary(*offset) {
            return Err(bad(format!(
                "offset {offset} is not a valid insertion point"
            )));
        }
        context.insert_str(*offset, text);
    }
    Ok(context)
}

/// Converts a seeded random half of the samples to unverifiable form.
///
/// Candidates are the native verifiable samples in id order; `len/2` of them
/// are drawn uniformly without replacement and passed through [`unknownize`]
/// with a random-sentences strategy of `removals` deletions. Every other
/// sample is returned untouched and the input order is preserved. The result
/// is deterministic in (samples, removals, seed): selection uses one derived
/// stream, and each conversion derives its own stream from the sample id.
pub fn unknownize_half(
    samples: &[Sample],
    removals: usize,
    seed: u64,
) -> Result<Vec<Sample>, DatasetError> {
    let need = samples.len() / 2;
    let mut candidates: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.origin == Origin::Native && ftype_of(s) == FType::Verifiable)
        .map(|(i, _)| i)
        .collect();
    candidates.sort_by(|&a, &b| samples[a].id.cmp(&samples[b].id));
    if candidates.len() < need {
        return Err(DatasetError::InsufficientPool {
            ftype: FType::Verifiable,
            have: candidates.len(),
            need,
        });
    }
    let strategy = DeletionStrategy::random_sentences(removals, seed)?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(stable_seed(&[&seed.to_le_bytes(), b"unknownize-half"]));
    let chosen: BTreeSet<usize> = rand::seq::index::sample(&mut rng, candidates.len(), need)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if chosen.contains(&i) {
                unknownize(s, &strategy)
            } else {
                Ok(s.clone())
            }
        })
        .collect()
}

/// Draws a split with `floor(target/2)` verifiable and `ceil(target/2)`
/// unverifiable samples, uniformly without replacement, and returns it
/// sorted by id. Selection is deterministic in (pool, target, seed).
pub fn build_balanced_split(
    pool: &[Sample],
    target_size: usize,
    seed: u64,
) -> Result<SampleSet, DatasetError> {
    let v_need = target_size / 2;
    let u_need = target_size - v_need;

    let mut by_ftype: BTreeMap<FType, Vec<&Sample>> = BTreeMap::new();
    for sample in pool {
        by_ftype.entry(ftype_of(sample)).or_default().push(sample);
    }
    let mut picked: Vec<Sample> = Vec::with_capacity(target_size);
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[&seed.to_le_bytes(), b"balanced-split"]));
    for (ftype, need) in [(FType::Verifiable, v_need), (FType::Unverifiable, u_need)] {
        let mut candidates = by_ftype.remove(&ftype).unwrap_or_default();
        candidates.sort_by(|a, b| a.id.cmp(&b.id));
        if candidates.len() < need {
            return Err(DatasetError::InsufficientPool {
                ftype,
                have: candidates.len(),
                need,
            });
        }
        for k in rand::seq::index::sample(&mut rng, candidates.len(), need) {
            picked.push(candidates[k].clone());
        }
    }
    picked.sort_by(|a, b| a.id.cmp(&b.id));
    let digest = content_digest(samples_to_jsonl(&picked).as_bytes());
    SampleSet::from_samples(picked, digest)
}

/// Descriptive counts over a sample set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub total: usize,
    pub by_dataset: BTreeMap<String, usize>,
    pub by_form: BTreeMap<String, usize>,
    pub by_ftype: BTreeMap<String, usize>,
    pub by_subcategory: BTreeMap<String, usize>,
    pub by_origin: BTreeMap<String, usize>,
}

/// Computes counts per dataset, form, ftype, subcategory, and origin.
pub fn dataset_stats(set: &SampleSet) -> DatasetStats {
    let mut stats = DatasetStats {
        total: set.samples.len(),
        by_dataset: BTreeMap::new(),
        by_form: BTreeMap::new(),
        by_ftype: BTreeMap::new(),
        by_subcategory: BTreeMap::new(),
        by_origin: BTreeMap::new(),
    };
    for s in &set.samples {
        *stats.by_dataset.entry(s.dataset.clone()).or_default() += 1;
        *stats.by_form.entry(s.form.to_string()).or_default() += 1;
        *stats.by_ftype.entry(ftype_of(s).to_string()).or_default() += 1;
        *stats
            .by_subcategory
            .entry(s.subcategory.clone().unwrap_or_else(|| "-".to_string()))
            .or_default() += 1;
        *stats
            .by_origin
            .entry(match s.origin {
                Origin::Native => "native".to_string(),
                Origin::Unknownized => "unknownized".to_string(),
            })
            .or_default() += 1;
    }
    stats
}
