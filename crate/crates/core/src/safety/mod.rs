//! Do-not-answer policy and the answer guard.
//!
//! The guard is the only place an [`Decision::Answer`] is constructed. Its
//! text always comes from [`select_response`], so every answer is a verbatim
//! corpus answer carrying that entry's source URL.

pub mod audit;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::nlu::{select_response, tokenize, Classification, IntentModel};

pub use audit::{
    parse_records, replay, replay_bytes, verify_bytes, verify_chain, AuditError, AuditLog, AuditPayload, AuditRecord,
    ChainReport, DecisionSummary, ResponseKind, TranscriptTurn, GENESIS_DIGEST,
};

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.7;
const DEFAULT_POLICY: &str = include_str!("../../data/policy_default.toml");

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("confidence_threshold must lie in (0, 1], got {0}")]
    Threshold(f64),
    #[error("{0} must not be empty")]
    EmptyTemplates(&'static str),
    #[error("empty do-not-answer pattern at position {0}")]
    EmptyPattern(usize),
    #[error("cannot read policy: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse policy: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Contiguous run of lowercase tokens; `*` matches any one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnaPattern {
    source: String,
    tokens: Vec<String>,
}

impl DnaPattern {
    pub fn parse(pattern: &str) -> Self {
        let tokens = pattern
            .split_whitespace()
            .map(|t| if t == "*" { t.to_string() } else { tokenize(t).into_inner().concat() })
            .filter(|t| !t.is_empty())
            .collect();
        Self { source: pattern.to_string(), tokens }
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn matches(&self, utterance_tokens: &[String]) -> bool {
        if self.tokens.is_empty() || self.tokens.len() > utterance_tokens.len() {
            return false;
        }
        utterance_tokens
            .windows(self.tokens.len())
            .any(|w| w.iter().zip(&self.tokens).all(|(u, p)| p == "*" || u == p))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    #[serde(default = "default_threshold")]
    confidence_threshold: f64,
    #[serde(default)]
    dna_intents: Vec<String>,
    #[serde(default)]
    dna_patterns: Vec<String>,
    deflection_templates: Vec<String>,
    fallback_templates: Vec<String>,
}

impl TryFrom<PolicyFile> for SafetyPolicy {
    type Error = PolicyError;

    fn try_from(f: PolicyFile) -> Result<Self, PolicyError> {
        Self::new(f.confidence_threshold, f.dna_intents, f.dna_patterns, f.deflection_templates, f.fallback_templates)
    }
}

fn default_threshold() -> f64 {
    DEFAULT_CONFIDENCE_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(try_from = "PolicyFile")]
pub struct SafetyPolicy {
    confidence_threshold: f64,
    dna_intents: BTreeSet<String>,
    dna_patterns: Vec<DnaPattern>,
    deflection_templates: Vec<String>,
    fallback_templates: Vec<String>,
}

impl SafetyPolicy {
    pub fn new(
        confidence_threshold: f64,
        dna_intents: impl IntoIterator<Item = String>,
        dna_patterns: impl IntoIterator<Item = String>,
        deflection_templates: Vec<String>,
        fallback_templates: Vec<String>,
    ) -> Result<Self, PolicyError> {
        // NaN fails both comparisons
        if !(confidence_threshold > 0.0 && confidence_threshold <= 1.0) {
            return Err(PolicyError::Threshold(confidence_threshold));
        }
        if deflection_templates.is_empty() {
            return Err(PolicyError::EmptyTemplates("deflection_templates"));
        }
        if fallback_templates.is_empty() {
            return Err(PolicyError::EmptyTemplates("fallback_templates"));
        }
        let dna_patterns: Vec<DnaPattern> = dna_patterns.into_iter().map(|p| DnaPattern::parse(&p)).collect();
        if let Some(i) = dna_patterns.iter().position(|p| p.tokens.is_empty()) {
            return Err(PolicyError::EmptyPattern(i));
        }
        Ok(Self {
            confidence_threshold,
            dna_intents: dna_intents.into_iter().collect(),
            dna_patterns,
            deflection_templates,
            fallback_templates,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, PolicyError> {
        let f: PolicyFile = toml::from_str(text)?;
        Self::try_from(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The bundled policy (threshold 0.7, election-opinion patterns).
    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_POLICY).expect("bundled policy is valid")
    }

    pub fn with_threshold(&self, confidence_threshold: f64) -> Result<Self, PolicyError> {
        let mut p = self.clone();
        if !(confidence_threshold > 0.0 && confidence_threshold <= 1.0) {
            return Err(PolicyError::Threshold(confidence_threshold));
        }
        p.confidence_threshold = confidence_threshold;
        Ok(p)
    }

    pub fn confidence_threshold(&self) -> f64 {
        self.confidence_threshold
    }

    pub fn dna_intents(&self) -> &BTreeSet<String> {
        &self.dna_intents
    }

    pub fn dna_patterns(&self) -> &[DnaPattern] {
        &self.dna_patterns
    }

    pub fn deflection_templates(&self) -> &[String] {
        &self.deflection_templates
    }

    pub fn fallback_templates(&self) -> &[String] {
        &self.fallback_templates
    }

    /// First pattern matching the utterance, if any.
    pub fn matching_pattern(&self, utterance: &str) -> Option<&DnaPattern> {
        let toks = tokenize(utterance).into_inner();
        self.dna_patterns.iter().find(|p| p.matches(&toks))
    }

    fn rotate(list: &[String], rotation: u64) -> &str {
        &list[(rotation % list.len() as u64) as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum DnaRule {
    Pattern(String),
    Intent(String),
}

impl std::fmt::Display for DnaRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DnaRule::Pattern(p) => write!(f, "pattern:{p}"),
            DnaRule::Intent(i) => write!(f, "intent:{i}"),
        }
    }
}

/// The guard's verdict for one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Answer { intent: String, entry_id: String, answer: String, source_url: String, confidence: f64 },
    Deflect { rule: DnaRule, template: String },
    Fallback { template: String, top_confidence: Option<f64> },
}

impl Decision {
    pub fn is_answer(&self) -> bool {
        matches!(self, Decision::Answer { .. })
    }

    pub fn text(&self) -> &str {
        match self {
            Decision::Answer { answer, .. } => answer,
            Decision::Deflect { template, .. } => template,
            Decision::Fallback { template, .. } => template,
        }
    }
}

/// Decides whether a classified utterance may be answered.
///
/// Order: do-not-answer patterns and intents deflect regardless of
/// confidence; otherwise a top intent at or above the threshold is answered
/// verbatim; everything else falls back. `rotation` picks the template.
pub fn guard(
    classification: &Classification,
    utterance: &str,
    policy: &SafetyPolicy,
    model: &IntentModel,
    corpus: &Corpus,
    rotation: u64,
) -> Decision {
    let top = classification.top();

    let rule = policy
        .matching_pattern(utterance)
        .map(|p| DnaRule::Pattern(p.as_str().to_string()))
        .or_else(|| top.filter(|t| policy.dna_intents.contains(&t.intent)).map(|t| DnaRule::Intent(t.intent.clone())));
    if let Some(rule) = rule {
        return Decision::Deflect {
            rule,
            template: SafetyPolicy::rotate(&policy.deflection_templates, rotation).to_string(),
        };
    }

    let fallback = |top_confidence: Option<f64>| Decision::Fallback {
        template: SafetyPolicy::rotate(&policy.fallback_templates, rotation).to_string(),
        top_confidence: top_confidence.filter(|c| c.is_finite()),
    };
    let Some(top) = top else { return fallback(None) };
    if !(top.confidence.is_finite() && (0.0..=1.0).contains(&top.confidence)) {
        return fallback(None);
    }
    if top.confidence < policy.confidence_threshold {
        return fallback(Some(top.confidence));
    }
    match (select_response(model, corpus, &top.intent), model.entry_for(&top.intent)) {
        (Ok((answer, url)), Some(entry_id)) => Decision::Answer {
            intent: top.intent.clone(),
            entry_id: entry_id.to_string(),
            answer: answer.to_string(),
            source_url: url.to_string(),
            confidence: top.confidence,
        },
        // intent unknown to this model/corpus pair
        _ => fallback(Some(top.confidence)),
    }
}
