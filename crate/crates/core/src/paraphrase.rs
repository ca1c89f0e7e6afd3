//! Training-variant generation for official questions.
//!
//! [`RuleParaphraser`] is the built-in deterministic provider: leading
//! question-template swaps and single-word synonym swaps driven by versioned
//! data tables, with wrapper/punctuation rewrites as padding so that any `k`
//! up to the padding budget is satisfiable.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{remove_stopwords, Corpus, FaqEntry};

pub const DEFAULT_K: usize = 3;

const TEMPLATES_V1: &str = include_str!("../data/paraphrase_templates_v1.tsv");
const SYNONYMS_V1: &str = include_str!("../data/synonyms_v1.tsv");

#[derive(Debug, Error)]
pub enum ParaphraseError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("paraphrase provider failed: {0}")]
    ProviderFailure(String),
    #[error("could only produce {produced} of {wanted} variants for entry `{entry_id}`")]
    Exhausted { entry_id: String, wanted: usize, produced: usize },
    #[error("invalid paraphrase set for `{entry_id}`: {reason}")]
    InvalidSet { entry_id: String, reason: String },
    #[error("table line {line}: {reason}")]
    BadTable { line: usize, reason: String },
}

/// Reworded variants of one official question. Carries the owning entry id
/// only, never an answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseSet {
    entry_id: String,
    variants: Vec<String>,
    provider: String,
}

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl ParaphraseSet {
    /// Validates the set invariants against the original question.
    pub fn new(entry: &FaqEntry, variants: Vec<String>, provider: impl Into<String>) -> Result<Self, ParaphraseError> {
        let bad = |reason: &str| ParaphraseError::InvalidSet { entry_id: entry.id.clone(), reason: reason.into() };
        if variants.is_empty() {
            return Err(bad("no variants"));
        }
        let original = norm(&entry.question);
        let mut seen = HashSet::new();
        for v in &variants {
            let n = norm(v);
            if n == original {
                return Err(bad("variant equals the original question"));
            }
            if !seen.insert(n) {
                return Err(bad("variants are not pairwise distinct"));
            }
        }
        Ok(Self { entry_id: entry.id.clone(), variants, provider: provider.into() })
    }

    pub fn entry_id(&self) -> &str {
        &self.entry_id
    }

    pub fn variants(&self) -> &[String] {
        &self.variants
    }

    /// Identity of the provider that produced the variants.
    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }
}

pub trait ParaphraseProvider: Send + Sync {
    fn name(&self) -> &str;

    fn paraphrase(&self, entry: &FaqEntry, k: usize) -> Result<ParaphraseSet, ParaphraseError>;
}

/// Deterministic template + synonym rewriter.
#[derive(Debug, Clone)]
pub struct RuleParaphraser {
    name: String,
    // leading phrase (lowercase tokens) -> replacements in table order
    templates: Vec<(Vec<String>, Vec<String>)>,
    synonyms: BTreeMap<String, Vec<String>>,
}

fn table_version(text: &str) -> Option<&str> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.split("version").nth(1))
        .map(str::trim)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

impl RuleParaphraser {
    pub fn builtin() -> Self {
        Self::from_tables(TEMPLATES_V1, SYNONYMS_V1).expect("bundled paraphrase tables are valid")
    }

    pub fn from_tables(templates: &str, synonyms: &str) -> Result<Self, ParaphraseError> {
        let mut tpl: Vec<(Vec<String>, Vec<String>)> = Vec::new();
        for (line, l) in data_lines(templates) {
            let (lead, repl) = l
                .split_once('\t')
                .ok_or_else(|| ParaphraseError::BadTable { line, reason: "expected two tab-separated columns".into() })?;
            let lead: Vec<String> = lead.split_whitespace().map(str::to_lowercase).collect();
            if lead.is_empty() || repl.trim().is_empty() {
                return Err(ParaphraseError::BadTable { line, reason: "empty column".into() });
            }
            match tpl.iter_mut().find(|(l, _)| *l == lead) {
                Some((_, rs)) => rs.push(repl.trim().to_string()),
                None => tpl.push((lead, vec![repl.trim().to_string()])),
            }
        }
        let mut syn = BTreeMap::new();
        for (line, l) in data_lines(synonyms) {
            let (word, alts) = l
                .split_once('\t')
                .ok_or_else(|| ParaphraseError::BadTable { line, reason: "expected two tab-separated columns".into() })?;
            let alts: Vec<String> = alts.split('|').map(|a| a.trim().to_string()).filter(|a| !a.is_empty()).collect();
            if alts.is_empty() {
                return Err(ParaphraseError::BadTable { line, reason: "no alternatives".into() });
            }
            syn.insert(word.trim().to_lowercase(), alts);
        }
        let name = format!(
            "rules/{}+{}",
            table_version(templates).unwrap_or("unversioned"),
            table_version(synonyms).unwrap_or("unversioned")
        );
        Ok(Self { name, templates: tpl, synonyms: syn })
    }

    fn template_rewrites(&self, words: &[&str]) -> Vec<String> {
        let lowered: Vec<String> = words.iter().map(|w| core_token(w).to_lowercase()).collect();
        let best = self
            .templates
            .iter()
            .filter(|(lead, _)| lead.len() < words.len() && lowered.starts_with(lead))
            .max_by_key(|(lead, _)| lead.len());
        match best {
            None => Vec::new(),
            Some((lead, repls)) => {
                let rest = words[lead.len()..].join(" ");
                repls
                    .iter()
                    .map(|r| {
                        let r: Vec<&str> = r.split_whitespace().map(|w| if w == "i" { "I" } else { w }).collect();
                        capitalize(&format!("{} {rest}", r.join(" ")))
                    })
                    .collect()
            }
        }
    }

    fn synonym_rewrites(&self, words: &[&str]) -> Vec<String> {
        let mut out = Vec::new();
        for (i, w) in words.iter().enumerate() {
            let core = core_token(w);
            let Some(alts) = self.synonyms.get(&core.to_lowercase()) else { continue };
            for alt in alts {
                let alt = if i == 0 { capitalize(alt) } else { alt.clone() };
                let replaced = w.replacen(core, &alt, 1);
                let mut ws: Vec<String> = words.iter().map(|s| s.to_string()).collect();
                ws[i] = replaced;
                out.push(ws.join(" "));
            }
        }
        out
    }
}

/// Token with leading/trailing non-alphanumerics removed.
fn core_token(w: &str) -> &str {
    w.trim_matches(|c: char| !c.is_alphanumeric())
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        // keep "I" and acronyms as written
        Some(c) if chars.clone().next().is_some_and(|n| n.is_lowercase()) => c.to_lowercase().chain(chars).collect(),
        Some(c) => std::iter::once(c).chain(chars).collect(),
        None => String::new(),
    }
}

fn padding_rewrites(question: &str) -> Vec<String> {
    let q = question.split_whitespace().collect::<Vec<_>>().join(" ");
    let bare = q.trim_end_matches(['?', '.', '!']).to_string();
    let mut out = vec![
        format!("Could you tell me {}?", lowercase_first(&bare)),
        format!("Please tell me: {q}"),
        format!("I would like to know {}.", lowercase_first(&bare)),
        format!("{bare}, please?"),
        bare.clone(),
    ];
    let words: Vec<&str> = bare.split(' ').collect();
    if let Some(i) = words.iter().position(|w| w.eq_ignore_ascii_case("the")) {
        let mut ws = words.clone();
        ws[i] = if i == 0 { "A" } else { "a" };
        out.push(format!("{}?", ws.join(" ")));
    } else if let Some(i) = words.iter().position(|w| w.eq_ignore_ascii_case("a")) {
        let mut ws = words.clone();
        ws[i] = if i == 0 { "The" } else { "the" };
        out.push(format!("{}?", ws.join(" ")));
    }
    out.push(format!("Question: {q}"));
    out
}

impl ParaphraseProvider for RuleParaphraser {
    fn name(&self) -> &str {
        &self.name
    }

    fn paraphrase(&self, entry: &FaqEntry, k: usize) -> Result<ParaphraseSet, ParaphraseError> {
        if k == 0 {
            return Err(ParaphraseError::InvalidK);
        }
        let words: Vec<&str> = entry.question.split_whitespace().collect();
        let tpl = self.template_rewrites(&words);
        let syn = self.synonym_rewrites(&words);

        // interleave so small k still mixes both rewrite kinds
        let mut candidates = Vec::new();
        for i in 0..tpl.len().max(syn.len()) {
            candidates.extend(tpl.get(i).cloned());
            candidates.extend(syn.get(i).cloned());
        }
        for t in &tpl {
            let tw: Vec<&str> = t.split_whitespace().collect();
            candidates.extend(self.synonym_rewrites(&tw).into_iter().take(1));
        }
        candidates.extend(padding_rewrites(&entry.question));

        let original = norm(&entry.question);
        let content: HashSet<String> = remove_stopwords(&entry.question).into_iter().collect();
        let mut seen = HashSet::new();
        let mut variants = Vec::with_capacity(k);
        for c in candidates {
            if variants.len() == k {
                break;
            }
            let n = norm(&c);
            if n.is_empty() || n == original || seen.contains(&n) {
                continue;
            }
            if !content.is_empty() && !remove_stopwords(&c).iter().any(|t| content.contains(t)) {
                continue;
            }
            seen.insert(n);
            variants.push(c);
        }
        if variants.len() < k {
            return Err(ParaphraseError::Exhausted { entry_id: entry.id.clone(), wanted: k, produced: variants.len() });
        }
        ParaphraseSet::new(entry, variants, self.name.clone())
    }
}

/// One set per corpus entry, in corpus order.
pub fn paraphrase_corpus(
    provider: &dyn ParaphraseProvider,
    corpus: &Corpus,
    k: usize,
) -> Result<Vec<ParaphraseSet>, ParaphraseError> {
    corpus.entries().iter().map(|e| provider.paraphrase(e, k)).collect()
}

/// `entry_id,variant` CSV with a header row.
pub fn to_csv(sets: &[ParaphraseSet]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["entry_id", "variant"]).expect("in-memory write");
    for s in sets {
        for v in &s.variants {
            w.write_record([s.entry_id.as_str(), v.as_str()]).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}
