//! Randomized controlled trial harness: deterministic arm assignment, the
//! control arm's link-only responses, feedback collection, per-question rank
//! tests and health metrics.

pub mod metrics;
pub mod simulate;
pub mod stats;

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Corpus;
pub use crate::dialogue::Variant;
use crate::safety::Decision;

pub use metrics::{compute_metrics, ConfusionTrigger, HealthMetrics, SessionInfo, DEFAULT_CONFUSION_TOP_K};
pub use simulate::{simulate_rct, PopulationSpec, ScoreDistribution};
pub use stats::{mann_whitney, median, MannWhitney};

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sample is empty")]
    EmptySample,
    #[error("sample contains a non-finite value")]
    NonFiniteSample,
    #[error("decision is not an answer")]
    NotAnAnswer,
    #[error("invalid population spec: {0}")]
    InvalidSpec(String),
    #[error("feedback score {0} is outside 1..=5")]
    ScoreOutOfRange(i64),
    #[error("entry `{0}` is not in the corpus")]
    UnknownEntry(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub user_id: String,
    pub variant: Variant,
    pub seed: u64,
}

/// Experimental iff the least significant bit of
/// `SHA-256(seed as 8 little-endian bytes || user_id)` is 0.
pub fn assign(user_id: &str, seed: u64) -> Assignment {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(user_id.as_bytes());
    let digest = h.finalize();
    let variant = if digest[31] & 1 == 0 { Variant::Experimental } else { Variant::Control };
    Assignment { user_id: user_id.to_string(), variant, seed }
}

/// Control-arm rewrite of an answer: the page link only, never the body.
pub fn control_response(decision: &Decision, corpus: &Corpus) -> Result<String, EvalError> {
    let Decision::Answer { entry_id, .. } = decision else {
        return Err(EvalError::NotAnAnswer);
    };
    let entry = corpus.get(entry_id).ok_or_else(|| EvalError::UnknownEntry(entry_id.clone()))?;
    Ok(format!("You can find the official answer to this question on this page: {}", entry.source_url))
}

pub const MIN_SCORE: u8 = 1;
pub const MAX_SCORE: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub session_id: String,
    pub entry_id: String,
    pub variant: Variant,
    pub score: u8,
    pub timestamp: DateTime<Utc>,
}

impl FeedbackRecord {
    pub fn new(
        session_id: &str,
        entry_id: &str,
        variant: Variant,
        score: i64,
        corpus: &Corpus,
        timestamp: DateTime<Utc>,
    ) -> Result<Self, EvalError> {
        if !(MIN_SCORE as i64..=MAX_SCORE as i64).contains(&score) {
            return Err(EvalError::ScoreOutOfRange(score));
        }
        if corpus.get(entry_id).is_none() {
            return Err(EvalError::UnknownEntry(entry_id.to_string()));
        }
        Ok(Self {
            session_id: session_id.to_string(),
            entry_id: entry_id.to_string(),
            variant,
            score: score as u8,
            timestamp,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Effective,
    NotJustified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionStats {
    pub n_exp: usize,
    pub n_ctl: usize,
    pub median_exp: Option<f64>,
    pub median_ctl: Option<f64>,
    pub u_statistic: Option<f64>,
    /// Absent when either arm has no feedback.
    pub p_value: Option<f64>,
    pub exact: bool,
    pub significant: bool,
    /// Control ranks above experimental at the configured alpha.
    pub control_better: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RctReport {
    pub schema: String,
    pub seed: Option<u64>,
    pub alpha: f64,
    pub per_question: BTreeMap<String, QuestionStats>,
    pub questions_tested: usize,
    pub questions_significant: usize,
    pub verdict: Verdict,
    pub metrics: HealthMetrics,
}

pub const REPORT_SCHEMA: &str = "safechat-rct-report/v1";

impl RctReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-question comparison of experimental against control scores.
///
/// The verdict is `NotJustified` iff some question has the control arm
/// significantly ahead of the experimental arm at `alpha`.
pub fn build_report(
    feedback: &[FeedbackRecord],
    corpus: &Corpus,
    metrics: HealthMetrics,
    alpha: f64,
    seed: Option<u64>,
) -> RctReport {
    let mut scores: BTreeMap<&str, (Vec<f64>, Vec<f64>)> =
        corpus.entries().iter().map(|e| (e.id.as_str(), (Vec::new(), Vec::new()))).collect();
    for f in feedback {
        if let Some((exp, ctl)) = scores.get_mut(f.entry_id.as_str()) {
            match f.variant {
                Variant::Experimental => exp.push(f.score as f64),
                Variant::Control => ctl.push(f.score as f64),
            }
        }
    }
    let mut per_question = BTreeMap::new();
    for (id, (exp, ctl)) in scores {
        let test = mann_whitney(&exp, &ctl).ok();
        let significant = test.is_some_and(|t| t.p_value < alpha);
        let mean_u = (exp.len() * ctl.len()) as f64 / 2.0;
        let control_better = significant && test.is_some_and(|t| t.u_a < mean_u);
        per_question.insert(
            id.to_string(),
            QuestionStats {
                n_exp: exp.len(),
                n_ctl: ctl.len(),
                median_exp: median(&exp),
                median_ctl: median(&ctl),
                u_statistic: test.map(|t| t.u),
                p_value: test.map(|t| t.p_value),
                exact: test.is_some_and(|t| t.exact),
                significant,
                control_better,
            },
        );
    }
    let verdict = if per_question.values().any(|q| q.control_better) { Verdict::NotJustified } else { Verdict::Effective };
    RctReport {
        schema: REPORT_SCHEMA.to_string(),
        seed,
        alpha,
        questions_tested: per_question.values().filter(|q| q.p_value.is_some()).count(),
        questions_significant: per_question.values().filter(|q| q.significant).count(),
        per_question,
        verdict,
        metrics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FaqEntry;
    use chrono::NaiveDate;

    fn corpus() -> Corpus {
        Corpus::from_entries(
            vec![FaqEntry {
                id: "q1".into(),
                question: "How do I register?".into(),
                answer: "Register online at the portal.".into(),
                topic: "t".into(),
                source_url: "https://x.gov/reg".into(),
                last_updated: NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(),
            }],
            "T",
        )
        .unwrap()
    }

    #[test]
    fn assignment_is_deterministic_and_balanced() {
        assert_eq!(assign("user-1", 9), assign("user-1", 9));
        let exp = (0..10_000).filter(|i| assign(&format!("user-{i}"), 2024).variant == Variant::Experimental).count();
        let frac = exp as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "experimental fraction {frac}");
        let flips = (0..64).filter(|i| assign(&format!("u{i}"), 1).variant != assign(&format!("u{i}"), 2).variant).count();
        assert!(flips > 0);
    }

    #[test]
    fn control_response_links_only() {
        let c = corpus();
        let d = Decision::Answer {
            intent: "register".into(),
            entry_id: "q1".into(),
            answer: "Register online at the portal.".into(),
            source_url: "https://x.gov/reg".into(),
            confidence: 0.9,
        };
        let text = control_response(&d, &c).unwrap();
        assert!(text.contains("https://x.gov/reg"));
        assert!(!text.contains("Register online at the portal."));
        let fb = Decision::Fallback { template: "?".into(), top_confidence: None };
        assert!(matches!(control_response(&fb, &c), Err(EvalError::NotAnAnswer)));
    }

    #[test]
    fn feedback_validation() {
        let c = corpus();
        let now = Utc::now();
        assert!(FeedbackRecord::new("s", "q1", Variant::Control, 5, &c, now).is_ok());
        assert!(matches!(FeedbackRecord::new("s", "q1", Variant::Control, 9, &c, now), Err(EvalError::ScoreOutOfRange(9))));
        assert!(matches!(FeedbackRecord::new("s", "q1", Variant::Control, 0, &c, now), Err(EvalError::ScoreOutOfRange(0))));
        assert!(matches!(FeedbackRecord::new("s", "zz", Variant::Control, 3, &c, now), Err(EvalError::UnknownEntry(_))));
    }

    #[test]
    fn verdict_flags_control_ahead() {
        let c = corpus();
        let now = Utc::now();
        let mut fb = Vec::new();
        for _ in 0..6 {
            fb.push(FeedbackRecord::new("s", "q1", Variant::Experimental, 1, &c, now).unwrap());
            fb.push(FeedbackRecord::new("s", "q1", Variant::Control, 5, &c, now).unwrap());
        }
        let r = build_report(&fb, &c, HealthMetrics::default(), DEFAULT_ALPHA, None);
        assert_eq!(r.verdict, Verdict::NotJustified);
        assert!(r.per_question["q1"].control_better);

        let flipped: Vec<_> = fb
            .iter()
            .cloned()
            .map(|mut f| {
                f.score = 6 - f.score;
                f
            })
            .collect();
        let r = build_report(&flipped, &c, HealthMetrics::default(), DEFAULT_ALPHA, None);
        assert_eq!(r.verdict, Verdict::Effective);
        assert!(r.per_question["q1"].significant);
    }

    #[test]
    fn question_without_feedback_is_untested() {
        let r = build_report(&[], &corpus(), HealthMetrics::default(), DEFAULT_ALPHA, Some(1));
        assert_eq!(r.per_question["q1"].p_value, None);
        assert_eq!(r.questions_tested, 0);
        assert_eq!(r.verdict, Verdict::Effective);
    }
}
