//! Prompt templates, rendering, completion parsing, and guidance-label draws.
//!
//! Template texts are versioned assets compiled in from `templates/`; a store
//! can override any of them from a directory at run time. Every template is
//! identified by a [`TemplateId`] and declares its slot list, so positional
//! `{}` placeholders and named `{slot}` placeholders both resolve against the
//! same declaration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{Label, Rate, Sample};

/// Marker a scripted completion embeds when its `Unknown` justification is
/// meant to be judged valid. The scripted judge checks for containment.
pub const VALID_JUSTIFICATION_MARKER: &str = "the facts neither prove nor disprove the hypothesis";

/// Sentinel the validity judge emits for a sound justification.
pub const SENTINEL_VALID: &str = "__VALID__";
/// Sentinel the validity judge emits for an unsound justification.
pub const SENTINEL_INVALID: &str = "__INVALID__";

/// Errors raised while loading, rendering, or parsing prompts.
#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template}: no value supplied for slot {slot:?}")]
    MissingSlot { template: TemplateId, slot: String },
    #[error("template {template}: placeholder {placeholder:?} is not a declared slot")]
    UndeclaredSlot {
        template: TemplateId,
        placeholder: String,
    },
    #[error("template {template}: unclosed placeholder brace")]
    UnclosedPlaceholder { template: TemplateId },
    #[error("failed to read template override {path}: {source}")]
    OverrideIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The prompt templates the pipeline issues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    /// Neutral three-way first pass used by detection.
    DirectPredict,
    /// Short stimulation with an error reminder (story-form default).
    ConciseStim,
    /// Rule-heavy stimulation (fact-form default).
    DetailedStim,
    /// Stimulation variant that elicits an explicit reasoning process.
    RpElicit,
    /// Remind-then-guide turn that feeds a prior reasoning chain back.
    RtgWithRp,
    /// Remind-then-guide turn that presents an assigned label.
    RtgLabelGuide,
    /// Asks the model to justify an `Unknown` answer.
    JustifyUnknown,
    /// Asks the judge to classify the root cause of an error.
    RootCauseJudge,
}

impl TemplateId {
    pub const ALL: [TemplateId; 8] = [
        TemplateId::DirectPredict,
        TemplateId::ConciseStim,
        TemplateId::DetailedStim,
        TemplateId::RpElicit,
        TemplateId::RtgWithRp,
        TemplateId::RtgLabelGuide,
        TemplateId::JustifyUnknown,
        TemplateId::RootCauseJudge,
    ];

    /// Stable snake_case code used in tags, manifests, and file names.
    pub fn code(self) -> &'static str {
        match self {
            TemplateId::DirectPredict => "direct_predict",
            TemplateId::ConciseStim => "concise_stim",
            TemplateId::DetailedStim => "detailed_stim",
            TemplateId::RpElicit => "rp_elicit",
            TemplateId::RtgWithRp => "rtg_with_rp",
            TemplateId::RtgLabelGuide => "rtg_label_guide",
            TemplateId::JustifyUnknown => "justify_unknown",
            TemplateId::RootCauseJudge => "root_cause_judge",
        }
    }

    pub fn from_code(code: &str) -> Option<TemplateId> {
        TemplateId::ALL.into_iter().find(|t| t.code() == code)
    }

    /// Slot names in declaration order; positional `{}` placeholders resolve
    /// against this order.
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            TemplateId::DirectPredict => &["hypothesis", "facts"],
            TemplateId::ConciseStim => &["hypothesis", "facts", "answer"],
            TemplateId::DetailedStim => &["hypothesis", "facts"],
            TemplateId::RpElicit => &["hypothesis", "facts", "answer"],
            TemplateId::RtgWithRp => &["hypothesis", "facts", "answer", "prior_reasoning"],
            TemplateId::RtgLabelGuide => &["hypothesis", "facts", "assigned_label"],
            TemplateId::JustifyUnknown => &["hypothesis", "facts"],
            TemplateId::RootCauseJudge => {
                &["hypothesis", "facts", "gold", "answer", "prior_reasoning"]
            }
        }
    }

    /// Whether the template instructs the model to emit a
    /// `Reasoning Process: ... Conclusion: ...` response.
    pub fn expects_reasoning(self) -> bool {
        matches!(self, TemplateId::RpElicit | TemplateId::JustifyUnknown)
    }

    fn builtin_text(self) -> &'static str {
        match self {
            TemplateId::DirectPredict => include_str!("../templates/direct_predict.txt"),
            TemplateId::ConciseStim => include_str!("../templates/concise_stim.txt"),
            TemplateId::DetailedStim => include_str!("../templates/detailed_stim.txt"),
            TemplateId::RpElicit => include_str!("../templates/rp_elicit.txt"),
            TemplateId::RtgWithRp => include_str!("../templates/rtg_with_rp.txt"),
            TemplateId::RtgLabelGuide => include_str!("../templates/rtg_label_guide.txt"),
            TemplateId::JustifyUnknown => include_str!("../templates/justify_unknown.txt"),
            TemplateId::RootCauseJudge => include_str!("../templates/root_cause_judge.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Key under which the judge-validity prompt is tracked in digests.
pub const JUDGE_VALIDITY_KEY: &str = "judge_validity";

const JUDGE_VALIDITY_BUILTIN: &str = include_str!("../templates/judge_validity.txt");
const JUDGE_VALIDITY_SLOTS: &[&str] = &["hypothesis", "facts", "justification"];

/// Holds the template texts in force for a run, plus the judge-validity
/// prompt, and exposes their digests for the run manifest.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    texts: BTreeMap<TemplateId, String>,
    judge_validity: String,
}

impl TemplateStore {
    /// The compiled-in template set.
    pub fn builtin() -> Self {
        let texts = TemplateId::ALL
            .into_iter()
            .map(|id| (id, id.builtin_text().to_string()))
            .collect();
        TemplateStore {
            texts,
            judge_validity: JUDGE_VALIDITY_BUILTIN.to_string(),
        }
    }

    /// Builtin templates with any `<code>.txt` files found in `dir` replacing
    /// their compiled-in counterparts.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut store = TemplateStore::builtin();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.txt", id.code()));
            if path.exists() {
                let text =
                    std::fs::read_to_string(&path).map_err(|source| PromptError::OverrideIo {
                        path: path.display().to_string(),
                        source,
                    })?;
                store.texts.insert(id, text);
            }
        }
        let judge_path = dir.join(format!("{JUDGE_VALIDITY_KEY}.txt"));
        if judge_path.exists() {
            store.judge_validity =
                std::fs::read_to_string(&judge_path).map_err(|source| PromptError::OverrideIo {
                    path: judge_path.display().to_string(),
                    source,
                })?;
        }
        Ok(store)
    }

    pub fn text(&self, id: TemplateId) -> &str {
        &self.texts[&id]
    }

    pub fn judge_validity_text(&self) -> &str {
        &self.judge_validity
    }

    /// SHA-256 digest of every template text, keyed by template code.
    pub fn digests(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = self
            .texts
            .iter()
            .map(|(id, text)| (id.code().to_string(), hex_digest(text)))
            .collect();
        out.insert(
            JUDGE_VALIDITY_KEY.to_string(),
            hex_digest(&self.judge_validity),
        );
        out
    }
}

fn hex_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Values a render call may supply beyond the sample itself.
#[derive(Debug, Clone, Default)]
pub struct RenderCondition {
    /// Previously produced answer, rendered as its sentinel token.
    pub answer: Option<Label>,
    /// Guidance label assigned for a remind-then-guide turn.
    pub assigned_label: Option<Label>,
    /// Reasoning chain carried over from an earlier stage.
    pub prior_reasoning: Option<String>,
    /// Gold label, exposed only to judge-side templates.
    pub gold: Option<Label>,
}

/// A fully rendered prompt plus the slot values that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template: TemplateId,
    pub text: String,
    pub slots: BTreeMap<String, String>,
}

/// Renders `template` for `sample` under `condition`.
///
/// The facts slot receives the sample context, with any multiple-choice
/// options appended as a `Choices:` enumeration.
pub fn render(
    store: &TemplateStore,
    template: TemplateId,
    sample: &Sample,
    condition: &RenderCondition,
) -> Result<RenderedPrompt, PromptError> {
    let mut slots = BTreeMap::new();
    for &slot in template.slots() {
        let value = match slot {
            "hypothesis" => Some(sample.hypothesis.clone()),
            "facts" => Some(facts_block(sample)),
            "answer" => condition.answer.map(|l| l.sentinel().to_string()),
            "assigned_label" => condition.assigned_label.map(|l| l.sentinel().to_string()),
            "prior_reasoning" => condition.prior_reasoning.clone(),
            "gold" => condition.gold.map(|l| l.sentinel().to_string()),
            other => {
                return Err(PromptError::UndeclaredSlot {
                    template,
                    placeholder: other.to_string(),
                })
            }
        };
        let value = value.ok_or_else(|| PromptError::MissingSlot {
            template,
            slot: slot.to_string(),
        })?;
        slots.insert(slot.to_string(), value);
    }
    let text = substitute(store.text(template), template, template.slots(), &slots)?;
    Ok(RenderedPrompt {
        template,
        text,
        slots,
    })
}

/// Renders the judge-validity prompt for one justification.
pub fn render_judge_validity(
    store: &TemplateStore,
    sample: &Sample,
    justification: &str,
) -> Result<String, PromptError> {
    let template = TemplateId::RootCauseJudge; // error attribution only; text comes from the judge asset
    let mut slots = BTreeMap::new();
    slots.insert("hypothesis".to_string(), sample.hypothesis.clone());
    slots.insert("facts".to_string(), facts_block(sample));
    slots.insert("justification".to_string(), justification.to_string());
    substitute(
        store.judge_validity_text(),
        template,
        JUDGE_VALIDITY_SLOTS,
        &slots,
    )
}

fn facts_block(sample: &Sample) -> String {
    match &sample.choices {
        None => sample.context.clone(),
        Some(choices) if choices.is_empty() => sample.context.clone(),
        Some(choices) => {
            let mut out = sample.context.clone();
            out.push_str("\nChoices:");
            for (i, choice) in choices.iter().enumerate() {
                let letter = (b'A' + (i % 26) as u8) as char;
                out.push_str(&format!("\n{letter}. {choice}"));
            }
            out
        }
    }
}

/// Replaces `{}` and `{name}` placeholders in `text`. Positional placeholders
/// consume `slot_order` left to right; named placeholders must be declared.
fn substitute(
    text: &str,
    template: TemplateId,
    slot_order: &[&str],
    slots: &BTreeMap<String, String>,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len() + 256);
    let mut positional = slot_order.iter();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or(PromptError::UnclosedPlaceholder { template })?;
        let name = &after[..close];
        let slot = if name.is_empty() {
            positional
                .next()
                .copied()
                .ok_or_else(|| PromptError::UndeclaredSlot {
                    template,
                    placeholder: "{}".to_string(),
                })?
        } else {
            name
        };
        let value = slots.get(slot).ok_or_else(|| {
            if slot_order.contains(&slot) {
                PromptError::MissingSlot {
                    template,
                    slot: slot.to_string(),
                }
            } else {
                PromptError::UndeclaredSlot {
                    template,
                    placeholder: slot.to_string(),
                }
            }
        })?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Result of parsing one raw completion.
///
/// `label` is `None` when no sentinel token occurred anywhere in the text;
/// downstream treats that as an `Unknown` answer and counts the failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCompletion {
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

impl ParsedCompletion {
    /// The label to score: parse failures count as `Unknown`.
    pub fn effective_label(&self) -> Label {
        self.label.unwrap_or(Label::Unknown)
    }

    pub fn is_parse_failure(&self) -> bool {
        self.label.is_none()
    }
}

const REASONING_MARKER: &str = "Reasoning Process:";
const CONCLUSION_MARKER: &str = "Conclusion:";

/// Parses a raw completion: the sentinel occurring last in the text decides
/// the label (models often restate options before concluding).
///
/// When `expect_reasoning` is set and no `Reasoning Process:`/`Conclusion:`
/// scaffold is present, the whole body is taken as the reasoning.
pub fn parse_completion(raw: &str, expect_reasoning: bool) -> ParsedCompletion {
    let mut best: Option<(usize, Label)> = None;
    for label in [Label::Proved, Label::Disproved, Label::Unknown] {
        if let Some(pos) = raw.rfind(label.sentinel()) {
            if best.is_none_or(|(p, _)| pos > p) {
                best = Some((pos, label));
            }
        }
    }
    let (label, matched_token) = match best {
        Some((_, l)) => (Some(l), Some(l.sentinel().to_string())),
        None => (None, None),
    };

    let reasoning = extract_reasoning(raw).or_else(|| {
        if expect_reasoning && !raw.contains(REASONING_MARKER) {
            let body = raw.trim();
            (!body.is_empty()).then(|| body.to_string())
        } else {
            None
        }
    });

    ParsedCompletion {
        label,
        matched_token,
        reasoning,
    }
}

fn extract_reasoning(raw: &str) -> Option<String> {
    let start = raw.find(REASONING_MARKER)? + REASONING_MARKER.len();
    let rest = &raw[start..];
    let body = match rest.find(CONCLUSION_MARKER) {
        Some(end) => &rest[..end],
        None => rest,
    };
    let body = body.trim();
    (!body.is_empty()).then(|| body.to_string())
}

/// Parses the validity judge's completion; last sentinel wins, `None` when
/// neither token occurs.
pub fn parse_validity(raw: &str) -> Option<bool> {
    let valid = raw.rfind(SENTINEL_VALID);
    let invalid = raw.rfind(SENTINEL_INVALID);
    match (valid, invalid) {
        (Some(v), Some(i)) => Some(v > i),
        (Some(_), None) => Some(true),
        (None, Some(_)) => Some(false),
        (None, None) => None,
    }
}

/// A guidance-label draw for one remind-then-guide turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceDraw {
    pub label: Label,
    /// Whether the draw picked a label different from gold.
    pub misguided: bool,
}

/// Draws the guidance label: with probability `misguide_rate` one of the two
/// non-gold labels uniformly, otherwise gold. Exact rational probability.
pub fn assign_guidance_label<R: Rng>(
    gold: Label,
    misguide_rate: Rate,
    rng: &mut R,
) -> GuidanceDraw {
    let (numer, denom) = misguide_rate.parts();
    let misguided = rng.gen_ratio(numer as u32, denom as u32);
    let label = if misguided {
        let wrong = gold.others();
        wrong[rng.gen_range(0..2usize)]
    } else {
        gold
    };
    GuidanceDraw { label, misguided }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Origin, SampleForm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fact_sample() -> Sample {
        Sample {
            id: "fld-17".into(),
            dataset: "fld".into(),
            subcategory: None,
            form: SampleForm::Fact,
            context: "Metals conduct electricity. Copper is a metal.".into(),
            hypothesis: "Copper conducts electricity.".into(),
            choices: None,
            gold: Label::Proved,
            origin: Origin::Native,
            removed_sentences: None,
        }
    }

    fn story_sample() -> Sample {
        Sample {
            id: "arts-3".into(),
            dataset: "arts".into(),
            subcategory: Some("music".into()),
            form: SampleForm::Story,
            context: "The band rehearsed all night before the festival.".into(),
            hypothesis: "The band performed a jazz set.".into(),
            choices: Some(vec!["a jazz set".into(), "a rock set".into()]),
            gold: Label::Unknown,
            origin: Origin::Native,
            removed_sentences: None,
        }
    }

    #[test]
    fn concise_render_carries_facts_and_stimulation_wording() {
        let store = TemplateStore::builtin();
        let cond = RenderCondition {
            answer: Some(Label::Unknown),
            ..Default::default()
        };
        let p = render(&store, TemplateId::ConciseStim, &fact_sample(), &cond).unwrap();
        assert!(p.text.contains("Think twice before outputting"));
        assert!(p.text.contains("Copper is a metal."));
        assert!(p.text.contains("The answer is __UNKNOWN__"));
        assert_eq!(p.slots["answer"], "__UNKNOWN__");
    }

    #[test]
    fn rp_elicit_render_has_reasoning_scaffold() {
        let store = TemplateStore::builtin();
        let cond = RenderCondition {
            answer: Some(Label::Unknown),
            ..Default::default()
        };
        let p = render(&store, TemplateId::RpElicit, &story_sample(), &cond).unwrap();
        assert!(p
            .text
            .contains("Reasoning Process: [your step-by-step reasoning here]"));
        assert!(p
            .text
            .contains("Conclusion: __PROVED__, __DISPROVED__, or __UNKNOWN__"));
        // Story choices are enumerated into the facts block.
        assert!(p.text.contains("Choices:\nA. a jazz set\nB. a rock set"));
    }

    #[test]
    fn rtg_with_rp_requires_prior_reasoning() {
        let store = TemplateStore::builtin();
        let cond = RenderCondition {
            answer: Some(Label::Disproved),
            ..Default::default()
        };
        let err = render(&store, TemplateId::RtgWithRp, &fact_sample(), &cond).unwrap_err();
        match err {
            PromptError::MissingSlot { slot, .. } => assert_eq!(slot, "prior_reasoning"),
            other => panic!("expected MissingSlot, got {other:?}"),
        }
    }

    #[test]
    fn label_guide_renders_assigned_label_bit_exact() {
        let store = TemplateStore::builtin();
        let cond = RenderCondition {
            assigned_label: Some(Label::Disproved),
            ..Default::default()
        };
        let p = render(&store, TemplateId::RtgLabelGuide, &fact_sample(), &cond).unwrap();
        assert!(p.text.contains("The answer is __DISPROVED__"));
    }

    #[test]
    fn positional_placeholders_resolve_in_declared_order() {
        let slots: BTreeMap<String, String> = [
            ("hypothesis".to_string(), "H".to_string()),
            ("facts".to_string(), "F".to_string()),
        ]
        .into();
        let text = substitute(
            "h={} f={}",
            TemplateId::DirectPredict,
            TemplateId::DirectPredict.slots(),
            &slots,
        )
        .unwrap();
        assert_eq!(text, "h=H f=F");
    }

    #[test]
    fn parse_finds_bare_and_conclusion_sentinels() {
        let p = parse_completion("__UNKNOWN__", false);
        assert_eq!(p.label, Some(Label::Unknown));
        assert_eq!(p.matched_token.as_deref(), Some("__UNKNOWN__"));

        let p = parse_completion("Conclusion: __PROVED__", false);
        assert_eq!(p.label, Some(Label::Proved));
    }

    #[test]
    fn parse_last_sentinel_wins() {
        let raw =
            "Options are __PROVED__, __DISPROVED__, or __UNKNOWN__.\nConclusion: __DISPROVED__";
        let p = parse_completion(raw, false);
        assert_eq!(p.label, Some(Label::Disproved));
    }

    #[test]
    fn parse_extracts_reasoning_between_markers() {
        let raw = "Reasoning Process: The facts define that materials have properties, so the \
                   hypothesis follows.\nConclusion: __PROVED__";
        let p = parse_completion(raw, true);
        assert_eq!(p.label, Some(Label::Proved));
        assert_eq!(
            p.reasoning.as_deref(),
            Some("The facts define that materials have properties, so the hypothesis follows.")
        );
    }

    #[test]
    fn parse_without_sentinel_is_failure_and_keeps_body_as_reasoning() {
        let p = parse_completion("The answer might be PROVED, hard to say.", true);
        assert!(p.is_parse_failure());
        assert_eq!(p.effective_label(), Label::Unknown);
        assert_eq!(
            p.reasoning.as_deref(),
            Some("The answer might be PROVED, hard to say.")
        );

        let q = parse_completion("no tokens here", false);
        assert!(q.is_parse_failure());
        assert!(q.reasoning.is_none());
    }

    #[test]
    fn parse_is_case_sensitive_about_sentinels() {
        let p = parse_completion("conclusion: __proved__", false);
        assert!(p.is_parse_failure());
    }

    #[test]
    fn validity_parsing_distinguishes_nested_tokens() {
        assert_eq!(parse_validity("Verdict: __VALID__"), Some(true));
        assert_eq!(parse_validity("Verdict: __INVALID__"), Some(false));
        assert_eq!(parse_validity("__VALID__ no wait __INVALID__"), Some(false));
        assert_eq!(parse_validity("nothing"), None);
    }

    #[test]
    fn guidance_rate_zero_always_emits_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let draw = assign_guidance_label(Label::Proved, Rate::zero(), &mut rng);
            assert_eq!(draw.label, Label::Proved);
            assert!(!draw.misguided);
        }
    }

    #[test]
    fn guidance_rate_one_never_emits_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for gold in [Label::Proved, Label::Disproved, Label::Unknown] {
            for _ in 0..200 {
                let draw = assign_guidance_label(gold, Rate::one(), &mut rng);
                assert_ne!(draw.label, gold);
                assert!(draw.misguided);
            }
        }
    }

    #[test]
    fn guidance_draws_are_deterministic_per_seed() {
        let rate = Rate::new(2, 3).unwrap();
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| assign_guidance_label(Label::Disproved, rate, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn template_digests_cover_all_assets_and_are_stable() {
        let store = TemplateStore::builtin();
        let digests = store.digests();
        assert_eq!(digests.len(), TemplateId::ALL.len() + 1);
        assert!(digests.contains_key(JUDGE_VALIDITY_KEY));
        for (code, digest) in &digests {
            assert_eq!(digest.len(), 64, "digest for {code}");
        }
        assert_eq!(TemplateStore::builtin().digests(), digests);
    }

    #[test]
    fn overrides_replace_only_named_templates() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("concise_stim.txt"),
            "short {hypothesis} {facts} {answer}",
        )
        .unwrap();
        let store = TemplateStore::with_overrides(dir.path()).unwrap();
        assert!(store.text(TemplateId::ConciseStim).starts_with("short "));
        assert_eq!(
            store.text(TemplateId::DetailedStim),
            TemplateStore::builtin().text(TemplateId::DetailedStim)
        );
        assert_ne!(store.digests(), TemplateStore::builtin().digests());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn parse_never_panics(raw in ".*") {
                let _ = parse_completion(&raw, true);
                let _ = parse_completion(&raw, false);
            }

            #[test]
            fn last_sentinel_always_wins(
                prefix in "[a-z ]{0,40}",
                middle in "[a-z ]{1,40}",
                first_idx in 0usize..3,
                second_idx in 0usize..3,
            ) {
                let labels = [Label::Proved, Label::Disproved, Label::Unknown];
                let first = labels[first_idx];
                let second = labels[second_idx];
                let raw = format!("{prefix}{} {middle} {}", first.sentinel(), second.sentinel());
                let parsed = parse_completion(&raw, false);
                prop_assert_eq!(parsed.label, Some(second));
            }

            #[test]
            fn distinct_fillings_render_distinct_texts(
                h1 in "[a-zA-Z0-9 ]{1,30}", h2 in "[a-zA-Z0-9 ]{1,30}",
                f1 in "[a-zA-Z0-9 ]{1,40}", f2 in "[a-zA-Z0-9 ]{1,40}",
            ) {
                prop_assume!(h1 != h2 || f1 != f2);
                let store = TemplateStore::builtin();
                let mk = |h: &str, f: &str| {
                    let mut s = fact_sample();
                    s.hypothesis = h.to_string();
                    s.context = f.to_string();
                    render(&store, TemplateId::DirectPredict, &s, &RenderCondition::default())
                        .unwrap()
                        .text
                };
                prop_assert_ne!(mk(&h1, &f1), mk(&h2, &f2));
            }
        }
    }
}
