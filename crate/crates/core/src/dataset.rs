//! Counterfactual prompt datasets: loading and validation, prompt
//! rewrites (premise, sentence structure, fact substitution), slicing, and
//! a synthetic fact world for toy models.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{Probe, TokenPair};
use crate::error::{MieError, Result};
use crate::intervention::AnchorContext;
use crate::tokenizer::{TokenId, Vocab};

pub const SLOT: &str = "{}";

/// Premises the prompt rewrite experiments cycle through.
pub const PREMISES: [&str; 10] = [
    "Redefine",
    "Repeat",
    "Define",
    "Update",
    "New fact",
    "Updated fact",
    "This is true",
    "The following is true",
    "Pretend the following is true",
    "Accept the following statement to be true",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub base_prompt: String,
    /// The prompt with two `{}` slots: the premise, then the object of the
    /// first sentence.
    pub template: String,
    pub target_true: String,
    pub target_new: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_category: Option<String>,
    /// Set when the object slot holds `target_true` instead of `target_new`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fact_substituted: bool,
}

/// Targets are stored with or without GPT-2's leading space; prompts are
/// always filled with the bare word.
pub fn bare(target: &str) -> &str {
    target.trim_start()
}

fn fill(template: &str, premise: &str, object: &str) -> Result<String> {
    let parts: Vec<&str> = template.split(SLOT).collect();
    if parts.len() != 3 {
        return Err(MieError::contract(format!(
            "template needs exactly two `{{}}` slots, found {}: {template:?}",
            parts.len() - 1
        )));
    }
    Ok(format!("{}{premise}{}{object}{}", parts[0], parts[1], parts[2]))
}

impl DatasetEntry {
    /// Builds the standard `Redefine: {base} {new}. {base}` entry.
    pub fn redefine(base_prompt: &str, target_true: &str, target_new: &str) -> Self {
        let template = format!("{SLOT}: {base_prompt} {SLOT}. {base_prompt}");
        let prompt = fill(&template, "Redefine", bare(target_new)).expect("two slots");
        Self {
            base_prompt: base_prompt.to_string(),
            template,
            target_true: target_true.to_string(),
            target_new: target_new.to_string(),
            prompt,
            subject: None,
            subject_category: None,
            answer_category: None,
            fact_substituted: false,
        }
    }

    /// The word currently filling the object slot.
    pub fn slot_object(&self) -> &str {
        if self.fact_substituted {
            bare(&self.target_true)
        } else {
            bare(&self.target_new)
        }
    }

    /// Recovers the premise by matching `prompt` against `template`.
    pub fn premise(&self) -> Result<&str> {
        let parts: Vec<&str> = self.template.split(SLOT).collect();
        if parts.len() != 3 {
            return Err(MieError::contract(format!(
                "template needs exactly two `{{}}` slots: {:?}",
                self.template
            )));
        }
        let tail = format!("{}{}{}", parts[1], self.slot_object(), parts[2]);
        self.prompt
            .strip_prefix(parts[0])
            .and_then(|p| p.strip_suffix(&tail))
            .ok_or_else(|| MieError::contract(format!("prompt {:?} does not match its template", self.prompt)))
    }

    /// Structural checks that need no vocabulary.
    pub fn check(&self) -> std::result::Result<(), String> {
        if bare(&self.target_true) == bare(&self.target_new) {
            return Err("target_true equals target_new".into());
        }
        if bare(&self.target_true).is_empty() || bare(&self.target_new).is_empty() {
            return Err("empty target".into());
        }
        if let Some(s) = &self.subject {
            if !self.base_prompt.contains(s.as_str()) {
                return Err(format!("subject {s:?} is not in base_prompt"));
            }
        }
        self.premise().map(|_| ()).map_err(|e| e.to_string())
    }

    /// Token ids of both targets, if each is a single token.
    pub fn token_pair(&self, vocab: &Vocab) -> Option<TokenPair> {
        Some(TokenPair {
            fact: vocab.single_token_id(bare(&self.target_true))?,
            cofa: vocab.single_token_id(bare(&self.target_new))?,
        })
    }
}

/// A validated entry ready to run through a model.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedEntry {
    pub tokens: Vec<TokenId>,
    pub pair: TokenPair,
    /// Anchors; `cofa` points at the object slot token, which holds the fact
    /// after substitution.
    pub anchors: AnchorContext,
}

impl TokenizedEntry {
    pub fn new(entry: &DatasetEntry, vocab: &Vocab) -> Result<Self> {
        let pair = entry.token_pair(vocab).ok_or_else(|| {
            MieError::contract(format!(
                "targets {:?}/{:?} are not single tokens",
                entry.target_true, entry.target_new
            ))
        })?;
        let tokens = vocab.encode(&entry.prompt);
        let slot = if entry.fact_substituted { pair.fact } else { pair.cofa };
        let anchors = AnchorContext::locate(vocab, &tokens, slot, pair.fact, entry.subject.as_deref())?;
        Ok(Self { tokens, pair, anchors })
    }

    pub fn probe(&self) -> Probe {
        Probe {
            tokens: self.tokens.clone(),
            pair: self.pair,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub accepted: Vec<DatasetEntry>,
    /// `(index in file, reason)` for entries whose targets are not single
    /// tokens under the vocabulary.
    pub rejected: Vec<(usize, String)>,
}

pub fn parse(json: &str) -> Result<Vec<DatasetEntry>> {
    let entries: Vec<DatasetEntry> = serde_json::from_str(json)?;
    for (i, e) in entries.iter().enumerate() {
        e.check().map_err(|reason| MieError::Validation { index: i, reason })?;
    }
    Ok(entries)
}

pub fn load(path: &Path) -> Result<Vec<DatasetEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| MieError::io(path, e))?;
    parse(&text)
}

/// Splits entries by whether both targets are single tokens.
pub fn filter_single_token(entries: Vec<DatasetEntry>, vocab: &Vocab) -> LoadReport {
    let mut report = LoadReport::default();
    for (i, e) in entries.into_iter().enumerate() {
        if e.token_pair(vocab).is_some() {
            report.accepted.push(e);
        } else {
            report.rejected.push((i, "target is not a single token".into()));
        }
    }
    report
}

pub fn save(entries: &[DatasetEntry], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(entries)?;
    std::fs::write(path, json + "\n").map_err(|e| MieError::io(path, e))
}

pub fn apply_premise(entries: &[DatasetEntry], premise: &str) -> Result<Vec<DatasetEntry>> {
    entries
        .iter()
        .map(|e| {
            let mut out = e.clone();
            out.prompt = fill(&e.template, premise, e.slot_object())?;
            Ok(out)
        })
        .collect()
}

/// Puts `target_true` in the object slot. Idempotent.
pub fn substitute_fact(entries: &[DatasetEntry]) -> Result<Vec<DatasetEntry>> {
    entries
        .iter()
        .map(|e| {
            let premise = e.premise()?;
            let mut out = e.clone();
            out.prompt = fill(&e.template, premise, bare(&e.target_true))?;
            out.fact_substituted = true;
            Ok(out)
        })
        .collect()
}

/// `(hinted, no_hint)`: hinted when `target_true` occurs verbatim
/// (case-sensitive) inside the subject.
pub fn split_hinted(entries: &[DatasetEntry]) -> Result<(Vec<DatasetEntry>, Vec<DatasetEntry>)> {
    let mut hinted = Vec::new();
    let mut no_hint = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let subject = e
            .subject
            .as_deref()
            .ok_or_else(|| MieError::contract(format!("entry {i} has no subject")))?;
        if subject.contains(bare(&e.target_true)) {
            hinted.push(e.clone());
        } else {
            no_hint.push(e.clone());
        }
    }
    Ok((hinted, no_hint))
}

/// Conjunctive category filter, optionally followed by a seeded subsample
/// (without replacement, original order kept) to exactly `truncate_to`.
pub fn filter_category(
    entries: &[DatasetEntry],
    subject_category: Option<&str>,
    answer_category: Option<&str>,
    truncate_to: Option<usize>,
    seed: u64,
) -> Result<Vec<DatasetEntry>> {
    let matches = |want: Option<&str>, have: &Option<String>| want.map_or(true, |w| have.as_deref() == Some(w));
    let kept: Vec<&DatasetEntry> = entries
        .iter()
        .filter(|e| matches(subject_category, &e.subject_category) && matches(answer_category, &e.answer_category))
        .collect();
    let Some(n) = truncate_to else {
        return Ok(kept.into_iter().cloned().collect());
    };
    if kept.len() < n {
        return Err(MieError::contract(format!(
            "cannot truncate to {n}: only {} entries match",
            kept.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, kept.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| kept[i].clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Normal,
    Consider,
    PeopleKnow,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Normal, Pattern::Consider, Pattern::PeopleKnow];

    fn lead(self, subject: &str) -> String {
        match self {
            Pattern::Normal => subject.to_string(),
            Pattern::Consider => format!("Consider {subject}. It"),
            Pattern::PeopleKnow => format!("Many people know {subject}. It"),
        }
    }

    /// The sentence up to, not including, the object.
    pub fn stem(self, s: &Structured) -> String {
        format!("{} {}", self.lead(&s.subject), s.relationship)
    }

    pub fn sentence(self, s: &Structured, object: &str) -> String {
        format!("{} {object}.", self.stem(s))
    }
}

impl std::str::FromStr for Pattern {
    type Err = MieError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(Pattern::Normal),
            "consider" => Ok(Pattern::Consider),
            "peopleknow" | "people_know" | "people-know" => Ok(Pattern::PeopleKnow),
            _ => Err(MieError::Parse(format!("unknown pattern `{s}`"))),
        }
    }
}

/// A base prompt split into its subject phrase and relationship.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Structured {
    pub subject: String,
    pub relationship: String,
}

/// The subject phrase runs from the start of `base_prompt` to the end of
/// the word containing the subject's first occurrence; the rest, after one
/// space, is the relationship. `subject + " " + relationship == base_prompt`.
pub fn decompose(entry: &DatasetEntry) -> std::result::Result<Structured, String> {
    let subject = entry.subject.as_deref().ok_or("no subject")?;
    if subject.is_empty() {
        return Err("empty subject".into());
    }
    let base = &entry.base_prompt;
    let start = base.find(subject).ok_or("subject not in base_prompt")?;
    let end = start + subject.len();
    let split = base[end..]
        .find(char::is_whitespace)
        .map(|i| end + i)
        .ok_or("nothing follows the subject")?;
    let rest = &base[split..];
    let relationship = rest.strip_prefix(' ').ok_or("subject not followed by a single space")?;
    if relationship.is_empty() || relationship.starts_with(char::is_whitespace) {
        return Err("relationship is empty or irregularly spaced".into());
    }
    Ok(Structured {
        subject: base[..split].to_string(),
        relationship: relationship.to_string(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub entries: Vec<DatasetEntry>,
    pub skipped: Vec<(usize, String)>,
}

/// Rewrites each prompt as `{premise}: {first sentence} {second stem}`; the
/// template is rewritten to match so the premise and slot remain editable.
pub fn apply_structure(entries: &[DatasetEntry], first: Pattern, second: Pattern) -> Result<StructureReport> {
    let mut report = StructureReport::default();
    for (i, e) in entries.iter().enumerate() {
        let s = match decompose(e) {
            Ok(s) => s,
            Err(reason) => {
                report.skipped.push((i, reason));
                continue;
            }
        };
        let premise = e.premise()?;
        let mut out = e.clone();
        out.template = format!("{SLOT}: {} {SLOT}. {}", first.stem(&s), second.stem(&s));
        out.prompt = fill(&out.template, premise, e.slot_object())?;
        report.entries.push(out);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub category: String,
}

impl Fact {
    pub fn base_prompt(&self) -> String {
        format!("{} {}", self.subject, self.relation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTable {
    pub facts: Vec<Fact>,
}

impl FactTable {
    /// Objects of one category, in table order.
    pub fn objects_in(&self, category: &str) -> Vec<&str> {
        self.facts
            .iter()
            .filter(|f| f.category == category)
            .map(|f| f.object.as_str())
            .collect()
    }
}

/// Word pools for the synthetic world. Each object category has its own
/// relation verb.
pub mod toy {
    pub const SUBJECTS: [&str; 32] = [
        "Abel", "Bria", "Cato", "Dara", "Eno", "Fenn", "Gila", "Hugo", "Ilse", "Joss", "Kai", "Lior", "Mina", "Nell",
        "Oren", "Pia", "Quin", "Rhea", "Saul", "Tova", "Ugo", "Vera", "Wren", "Xan", "Yara", "Zeno", "Ada", "Boaz",
        "Cleo", "Dov", "Esme", "Finn",
    ];
    pub const LANGUAGES: [&str; 16] = [
        "Latin", "Norse", "Welsh", "Greek", "Dutch", "Czech", "Farsi", "Hindi", "Malay", "Tamil", "Zulu", "Khmer",
        "Lao", "Thai", "Urdu", "Irish",
    ];
    pub const CITIES: [&str; 16] = [
        "Paris", "Oslo", "Rome", "Lima", "Kyiv", "Doha", "Riga", "Baku", "Bern", "Cork", "Nice", "Graz", "Pisa",
        "Turin", "Quito", "Sofia",
    ];
    pub const LANGUAGE_RELATION: &str = "speaks";
    pub const CITY_RELATION: &str = "visits";
    pub const FILLER: [&str; 7] = ["Redefine", "Consider", "It", "Many", "people", "know", "Repeat"];
}

/// A BPE vocabulary in which every toy subject (with and without a leading
/// space), object, relation and filler word is one token.
pub fn toy_vocab() -> Result<Vocab> {
    let mut words: Vec<String> = Vec::new();
    for s in toy::SUBJECTS {
        words.push(s.to_string());
        words.push(format!(" {s}"));
    }
    for o in toy::LANGUAGES.iter().chain(&toy::CITIES) {
        words.push(format!(" {o}"));
    }
    words.push(format!(" {}", toy::LANGUAGE_RELATION));
    words.push(format!(" {}", toy::CITY_RELATION));
    for f in toy::FILLER {
        words.push(f.to_string());
        words.push(format!(" {f}"));
    }
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    Vocab::bpe_from_words(&refs)
}

/// A random bijection from `n_facts` subjects to objects, half languages
/// and half cities, and one redefinition entry per fact whose counterfactual
/// is another object of the same category.
pub fn make_toy_dataset(n_facts: usize, vocab: &Vocab, seed: u64) -> Result<(FactTable, Vec<DatasetEntry>)> {
    let per_cat = toy::LANGUAGES.len().min(toy::CITIES.len());
    if n_facts > toy::SUBJECTS.len() || n_facts.div_ceil(2) > per_cat {
        return Err(MieError::contract(format!(
            "at most {} toy facts are available, {n_facts} requested",
            toy::SUBJECTS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects = toy::SUBJECTS.to_vec();
    subjects.shuffle(&mut rng);
    let mut langs = toy::LANGUAGES.to_vec();
    langs.shuffle(&mut rng);
    let mut cities = toy::CITIES.to_vec();
    cities.shuffle(&mut rng);
    let n_lang = n_facts.div_ceil(2);
    let mut facts = Vec::with_capacity(n_facts);
    for (i, s) in subjects.into_iter().take(n_facts).enumerate() {
        let (object, relation, category) = if i < n_lang {
            (langs[i], toy::LANGUAGE_RELATION, "language")
        } else {
            (cities[i - n_lang], toy::CITY_RELATION, "city")
        };
        facts.push(Fact {
            subject: s.to_string(),
            relation: relation.to_string(),
            object: object.to_string(),
            category: category.to_string(),
        });
    }
    for f in &facts {
        for word in [f.subject.as_str(), f.object.as_str()] {
            if vocab.single_token_id(word).is_none() {
                return Err(MieError::contract(format!("toy word {word:?} is not a single token")));
            }
        }
    }
    let table = FactTable { facts };
    let entries = (0..table.facts.len())
        .map(|i| toy_entry(&table, i, &mut rng))
        .collect();
    Ok((table, entries))
}

/// `n` redefinition entries drawn uniformly (with replacement) from the
/// table, each with a fresh counterfactual.
pub fn toy_entries(table: &FactTable, n: usize, seed: u64) -> Vec<DatasetEntry> {
    if table.facts.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let i = rng.gen_range(0..table.facts.len());
            toy_entry(table, i, &mut rng)
        })
        .collect()
}

/// A counterfactual object for fact `i`: same category when possible.
pub fn counterfactual_for<R: Rng>(table: &FactTable, i: usize, rng: &mut R) -> String {
    let f = &table.facts[i];
    let same: Vec<&str> = table
        .objects_in(&f.category)
        .into_iter()
        .filter(|o| *o != f.object)
        .collect();
    let pool: Vec<&str> = if same.is_empty() {
        table.facts.iter().map(|g| g.object.as_str()).filter(|o| *o != f.object).collect()
    } else {
        same
    };
    pool.choose(rng).map(|s| s.to_string()).unwrap_or_else(|| {
        let fallback = if f.category == "language" { &toy::LANGUAGES[..] } else { &toy::CITIES[..] };
        fallback.iter().find(|o| **o != f.object).expect("pools have several words").to_string()
    })
}

fn toy_entry<R: Rng>(table: &FactTable, i: usize, rng: &mut R) -> DatasetEntry {
    let f = &table.facts[i];
    let new = counterfactual_for(table, i, rng);
    let mut e = DatasetEntry::redefine(&f.base_prompt(), &f.object, &new);
    e.subject = Some(f.subject.clone());
    e.subject_category = Some("person".to_string());
    e.answer_category = Some(f.category.clone());
    e
}
