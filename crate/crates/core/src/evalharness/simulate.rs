//! Synthetic RCT runs through the real dialogue pipeline.

use chrono::Utc;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, SessionInfo, DEFAULT_CONFUSION_TOP_K};
use super::{assign, build_report, EvalError, FeedbackRecord, RctReport, Variant, DEFAULT_ALPHA};
use crate::corpus::Corpus;
use crate::dialogue::{handle_turn, Session, SessionFactory, TurnContext, UtteranceLibrary};
use crate::nlu::IntentModel;
use crate::paraphrase::{paraphrase_corpus, ParaphraseProvider, RuleParaphraser, DEFAULT_K};
use crate::safety::{parse_records, AuditLog, ResponseKind, SafetyPolicy};

/// Weights for scores 1 through 5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreDistribution(pub [f64; 5]);

impl ScoreDistribution {
    /// Uniform over the listed scores.
    pub fn uniform(scores: &[u8]) -> Self {
        let mut w = [0.0; 5];
        for &s in scores {
            w[(s - 1) as usize] = 1.0;
        }
        Self(w)
    }

    fn validate(&self, name: &str) -> Result<(), EvalError> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) || self.0.iter().sum::<f64>() <= 0.0 {
            return Err(EvalError::InvalidSpec(format!("{name} needs non-negative weights with a positive sum")));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> u8 {
        let total: f64 = self.0.iter().sum();
        let mut x = rng.random::<f64>() * total;
        for (i, w) in self.0.iter().enumerate() {
            if x < *w {
                return i as u8 + 1;
            }
            x -= w;
        }
        // rounding at the top end
        self.0.iter().rposition(|w| *w > 0.0).unwrap_or(4) as u8 + 1
    }
}

fn default_questions_per_user() -> usize {
    10
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

/// Synthetic population for a simulated trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub users: usize,
    #[serde(default = "default_questions_per_user")]
    pub questions_per_user: usize,
    /// Chance a question is asked as one of its training paraphrases.
    #[serde(default)]
    pub paraphrase_probability: f64,
    /// Chance of an extra gibberish turn before a question.
    #[serde(default)]
    pub gibberish_probability: f64,
    /// Chance of an extra do-not-answer probe before a question.
    #[serde(default)]
    pub dna_probability: f64,
    /// Chance a session is opened and closed without a question.
    #[serde(default)]
    pub idle_probability: f64,
    /// Chance a user returns for a second session with one more question.
    #[serde(default)]
    pub return_probability: f64,
    pub experimental_scores: ScoreDistribution,
    pub control_scores: ScoreDistribution,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl PopulationSpec {
    pub fn new(users: usize, experimental: ScoreDistribution, control: ScoreDistribution) -> Self {
        Self {
            users,
            questions_per_user: default_questions_per_user(),
            paraphrase_probability: 0.0,
            gibberish_probability: 0.0,
            dna_probability: 0.0,
            idle_probability: 0.0,
            return_probability: 0.0,
            experimental_scores: experimental,
            control_scores: control,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.users == 0 {
            return Err(EvalError::InvalidSpec("users must be at least 1".into()));
        }
        if self.questions_per_user == 0 {
            return Err(EvalError::InvalidSpec("questions_per_user must be at least 1".into()));
        }
        for (name, p) in [
            ("paraphrase_probability", self.paraphrase_probability),
            ("gibberish_probability", self.gibberish_probability),
            ("dna_probability", self.dna_probability),
            ("idle_probability", self.idle_probability),
            ("return_probability", self.return_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(EvalError::InvalidSpec(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(EvalError::InvalidSpec("alpha must lie in (0, 1)".into()));
        }
        self.experimental_scores.validate("experimental_scores")?;
        self.control_scores.validate("control_scores")
    }
}

/// Everything a simulated trial produced.
#[derive(Debug)]
pub struct Simulation {
    pub report: RctReport,
    pub audit_log: Vec<u8>,
    pub sessions: Vec<SessionInfo>,
    pub feedback: Vec<FeedbackRecord>,
}

pub fn simulate_rct(
    corpus: &Corpus,
    model: &IntentModel,
    policy: &SafetyPolicy,
    spec: &PopulationSpec,
    seed: u64,
) -> Result<RctReport, EvalError> {
    run_simulation(corpus, model, policy, spec, seed).map(|s| s.report)
}

fn gibberish(rng: &mut impl Rng) -> String {
    let words = rng.random_range(1..=3);
    (0..words)
        .map(|_| {
            let len = rng.random_range(4..=8);
            (0..len).map(|_| rng.random_range(b'q'..=b'z') as char).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn run_simulation(
    corpus: &Corpus,
    model: &IntentModel,
    policy: &SafetyPolicy,
    spec: &PopulationSpec,
    seed: u64,
) -> Result<Simulation, EvalError> {
    spec.validate()?;
    let library = UtteranceLibrary::builtin();
    let ctx = TurnContext { model, corpus, policy, library: &library };
    let provider = RuleParaphraser::builtin();
    let k = if model.paraphrase_k() == 0 { DEFAULT_K } else { model.paraphrase_k() };
    let variants = paraphrase_corpus(&provider as &dyn ParaphraseProvider, corpus, k)
        .map_err(|e| EvalError::InvalidSpec(format!("cannot paraphrase corpus: {e}")))?;
    let probes: Vec<String> = policy.dna_patterns().iter().map(|p| p.as_str().replace('*', "really")).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factory = SessionFactory::new(seed);
    let mut audit = AuditLog::in_memory();
    let mut sessions = Vec::new();
    let mut feedback = Vec::new();
    let n_entries = corpus.len();

    for u in 0..spec.users {
        let user_id = format!("sim-user-{u:05}");
        let variant = assign(&user_id, seed).variant;
        let n_sessions = 1 + usize::from(rng.random::<f64>() < spec.return_probability);
        let picks: Vec<usize> = sample(&mut rng, n_entries, spec.questions_per_user.min(n_entries)).into_vec();

        for s in 0..n_sessions {
            let (mut session, _greeting) = factory.open_session(&library, variant);
            sessions.push(SessionInfo { session_id: session.session_id().to_string(), user_id: user_id.clone(), variant });
            let mut turn = |session: &mut Session, text: &str| {
                handle_turn(session, text, ctx, &mut audit).expect("in-memory audit append cannot fail")
            };
            if rng.random::<f64>() >= spec.idle_probability {
                let asked = if s == 0 { picks.clone() } else { vec![rng.random_range(0..n_entries)] };
                for idx in asked {
                    if rng.random::<f64>() < spec.gibberish_probability {
                        turn(&mut session, &gibberish(&mut rng));
                    }
                    if !probes.is_empty() && rng.random::<f64>() < spec.dna_probability {
                        let probe = &probes[rng.random_range(0..probes.len())];
                        turn(&mut session, probe);
                    }
                    let entry = &corpus.entries()[idx];
                    let utterance = if rng.random::<f64>() < spec.paraphrase_probability {
                        let v = variants[idx].variants();
                        v[rng.random_range(0..v.len())].clone()
                    } else {
                        entry.question.clone()
                    };
                    let response = turn(&mut session, &utterance);
                    if matches!(response.kind, ResponseKind::Answer | ResponseKind::Link) {
                        let answered = response.entry_id.expect("answers carry an entry id");
                        let dist = match variant {
                            Variant::Experimental => &spec.experimental_scores,
                            Variant::Control => &spec.control_scores,
                        };
                        let score = dist.draw(&mut rng);
                        if session.accept_feedback(&answered).is_ok() {
                            feedback.push(FeedbackRecord::new(
                                session.session_id(),
                                &answered,
                                variant,
                                score as i64,
                                corpus,
                                Utc::now(),
                            )?);
                        }
                    }
                }
            }
            turn(&mut session, "bye");
        }
    }

    let audit_log = audit.memory_bytes().unwrap_or_default().to_vec();
    let metrics = compute_metrics(&parse_records(&audit_log), &sessions, DEFAULT_CONFUSION_TOP_K);
    let report = build_report(&feedback, corpus, metrics, spec.alpha, Some(seed));
    Ok(Simulation { report, audit_log, sessions, feedback })
}
