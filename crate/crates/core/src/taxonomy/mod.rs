//! Part taxonomy: semantic atoms, the taxonomy text format, atom sampling
//! and hybrid prompt rendering.
//!
//! A semantic atom is a `⟨part, subject⟩` pair tagged with its domain. The
//! taxonomy groups atoms as domain → parts → subjects; enumeration order is
//! always file order.

mod corpus;

pub use corpus::{generate_corpus, generate_record, Corpus, HybridPrompt, RenderConfig};

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::fnv1a64;

/// The shipped default taxonomy (6 domains, 8 parts each, 464 atoms).
pub const DEFAULT_TAXONOMY: &str = include_str!("../../data/taxonomy.txt");

pub const DOMAIN_COUNT: usize = 6;
pub const PARTS_PER_DOMAIN: usize = 8;
pub const MIN_SUBJECTS: usize = 6;
pub const MAX_SUBJECTS: usize = 19;
pub const MIN_ATOMS_PER_PROMPT: usize = 2;
pub const MAX_ATOMS_PER_PROMPT: usize = 4;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("cannot sample {k} atoms with distinct parts: only {available} distinct parts available")]
    InsufficientAtoms { k: usize, available: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Creature,
    Vehicle,
    Furniture,
    Plant,
    Electronics,
    Instrument,
}

impl Domain {
    pub const ALL: [Domain; DOMAIN_COUNT] = [
        Domain::Creature,
        Domain::Vehicle,
        Domain::Furniture,
        Domain::Plant,
        Domain::Electronics,
        Domain::Instrument,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Creature => "creature",
            Domain::Vehicle => "vehicle",
            Domain::Furniture => "furniture",
            Domain::Plant => "plant",
            Domain::Electronics => "electronics",
            Domain::Instrument => "instrument",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown domain `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticAtom {
    pub part: String,
    pub subject: String,
    pub domain: Domain,
}

impl SemanticAtom {
    pub fn new(part: impl Into<String>, subject: impl Into<String>, domain: Domain) -> Self {
        SemanticAtom { part: part.into(), subject: subject.into(), domain }
    }
}

impl fmt::Display for SemanticAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "⟨{}, {}⟩", self.part, self.subject)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartEntry {
    pub part_name: String,
    pub subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainEntry {
    pub name: Domain,
    pub prefix: String,
    pub parts: Vec<PartEntry>,
}

/// A parsed taxonomy. Construction does not validate: test taxonomies with
/// fewer domains or parts are legal values, only [`Taxonomy::validate`] and
/// [`load_taxonomy`] enforce the cardinality constraints.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    domains: Vec<DomainEntry>,
    atoms: Vec<SemanticAtom>,
    index: HashMap<SemanticAtom, usize>,
}

impl PartialEq for Taxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.domains == other.domains
    }
}

impl Taxonomy {
    pub fn from_domains(domains: Vec<DomainEntry>) -> Self {
        let atoms: Vec<SemanticAtom> = domains
            .iter()
            .flat_map(|d| {
                d.parts.iter().flat_map(move |p| {
                    p.subjects
                        .iter()
                        .map(move |s| SemanticAtom::new(p.part_name.clone(), s.clone(), d.name))
                })
            })
            .collect();
        let mut index = HashMap::with_capacity(atoms.len());
        for (i, a) in atoms.iter().enumerate() {
            index.entry(a.clone()).or_insert(i);
        }
        Taxonomy { domains, atoms, index }
    }

    /// The shipped default taxonomy.
    pub fn default_shipped() -> Self {
        Self::parse(DEFAULT_TAXONOMY).expect("shipped taxonomy parses")
    }

    pub fn domains(&self) -> &[DomainEntry] {
        &self.domains
    }

    pub fn domain(&self, name: Domain) -> Option<&DomainEntry> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// All atoms in file order.
    pub fn atoms(&self) -> &[SemanticAtom] {
        &self.atoms
    }

    /// Position of an atom in enumeration order.
    pub fn index_of(&self, atom: &SemanticAtom) -> Option<usize> {
        self.index.get(atom).copied()
    }

    pub fn contains(&self, atom: &SemanticAtom) -> bool {
        self.index.contains_key(atom)
    }

    /// Parses the taxonomy text format without validating cardinalities.
    ///
    /// ```text
    /// domain creature
    ///   prefix A creature
    ///   part head: lion, eagle, horse
    /// ```
    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        let mut domains: Vec<DomainEntry> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| TaxonomyError::Parse { line: lineno + 1, message };
            let (keyword, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            match keyword {
                "domain" => {
                    let name = Domain::from_str(rest).map_err(err)?;
                    domains.push(DomainEntry { name, prefix: String::new(), parts: Vec::new() });
                }
                "prefix" => {
                    let d = domains
                        .last_mut()
                        .ok_or_else(|| err("`prefix` before any `domain`".into()))?;
                    if !d.prefix.is_empty() {
                        return Err(err(format!("second prefix for domain {}", d.name)));
                    }
                    if rest.is_empty() {
                        return Err(err("empty prefix".into()));
                    }
                    d.prefix = rest.to_string();
                }
                "part" => {
                    let d = domains
                        .last_mut()
                        .ok_or_else(|| err("`part` before any `domain`".into()))?;
                    let (name, subjects) = rest
                        .split_once(':')
                        .ok_or_else(|| err("expected `part <name>: <subject>, ...`".into()))?;
                    let subjects: Vec<String> =
                        subjects.split(',').map(|s| s.trim().to_string()).collect();
                    if subjects.iter().any(|s| s.is_empty()) {
                        return Err(err("empty subject".into()));
                    }
                    d.parts.push(PartEntry { part_name: name.trim().to_string(), subjects });
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        if let Some(d) = domains.iter().find(|d| d.prefix.is_empty()) {
            return Err(TaxonomyError::Parse {
                line: text.lines().count(),
                message: format!("domain {} has no prefix", d.name),
            });
        }
        Ok(Self::from_domains(domains))
    }

    /// Checks the structural constraints; the error names the first one that
    /// fails.
    pub fn validate(&self) -> Result<(), TaxonomyError> {
        let fail = |m: String| Err(TaxonomyError::Validation(m));
        if self.domains.len() != DOMAIN_COUNT {
            return fail(format!("expected {DOMAIN_COUNT} domains, found {}", self.domains.len()));
        }
        let mut seen_domains = HashSet::new();
        for d in &self.domains {
            if !seen_domains.insert(d.name) {
                return fail(format!("domain {} appears more than once", d.name));
            }
        }
        for d in &self.domains {
            if d.parts.len() != PARTS_PER_DOMAIN {
                return fail(format!(
                    "domain {}: expected {PARTS_PER_DOMAIN} parts, found {}",
                    d.name,
                    d.parts.len()
                ));
            }
            let mut part_names = HashSet::new();
            for p in &d.parts {
                check_token(&p.part_name)
                    .map_err(|m| TaxonomyError::Validation(format!("domain {}: part {m}", d.name)))?;
                if !part_names.insert(p.part_name.as_str()) {
                    return fail(format!("domain {}: part `{}` listed twice", d.name, p.part_name));
                }
                let n = p.subjects.len();
                if !(MIN_SUBJECTS..=MAX_SUBJECTS).contains(&n) {
                    return fail(format!(
                        "domain {}, part `{}`: expected {MIN_SUBJECTS}..={MAX_SUBJECTS} subjects, found {n}",
                        d.name, p.part_name
                    ));
                }
                for s in &p.subjects {
                    check_token(s).map_err(|m| {
                        TaxonomyError::Validation(format!(
                            "domain {}, part `{}`: subject {m}",
                            d.name, p.part_name
                        ))
                    })?;
                }
            }
        }
        let mut pairs = HashSet::new();
        for a in &self.atoms {
            if !pairs.insert((a.part.as_str(), a.subject.as_str())) {
                return fail(format!("duplicate atom ({}, {})", a.part, a.subject));
            }
        }
        Ok(())
    }

    /// Atoms eligible for one prompt: either one domain or all of them.
    fn pool(&self, domain: Option<Domain>) -> Vec<&SemanticAtom> {
        self.atoms.iter().filter(|a| domain.is_none_or(|d| a.domain == d)).collect()
    }
}

fn check_token(s: &str) -> Result<(), String> {
    if s.is_empty() {
        return Err("is empty".into());
    }
    if s.trim() != s {
        return Err(format!("`{s}` has surrounding whitespace"));
    }
    if !s.is_ascii() || s.chars().any(|c| c.is_ascii_uppercase()) {
        return Err(format!("`{s}` is not lowercase ASCII"));
    }
    Ok(())
}

/// Reads, parses and validates a taxonomy file.
pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<Taxonomy, TaxonomyError> {
    let text = std::fs::read_to_string(path)?;
    let t = Taxonomy::parse(&text)?;
    t.validate()?;
    Ok(t)
}

/// All atoms in file order.
pub fn enumerate_atoms(taxonomy: &Taxonomy) -> Vec<SemanticAtom> {
    taxonomy.atoms().to_vec()
}

/// Draws `k` distinct atoms with pairwise distinct part names.
///
/// Without `mix_domains` a domain is chosen uniformly first and all atoms
/// come from it. Atoms are then drawn one at a time, uniformly over the
/// atoms whose part is not taken yet.
pub fn sample_atoms<R: Rng + ?Sized>(
    taxonomy: &Taxonomy,
    rng: &mut R,
    k: usize,
    mix_domains: bool,
) -> Result<Vec<SemanticAtom>, TaxonomyError> {
    if !(MIN_ATOMS_PER_PROMPT..=MAX_ATOMS_PER_PROMPT).contains(&k) {
        return Err(TaxonomyError::InvalidArgument(format!("k must be in 2..=4, got {k}")));
    }
    if taxonomy.domains.is_empty() {
        return Err(TaxonomyError::InsufficientAtoms { k, available: 0 });
    }
    let domain = if mix_domains {
        None
    } else {
        Some(taxonomy.domains[rng.random_range(0..taxonomy.domains.len())].name)
    };
    let pool = taxonomy.pool(domain);
    let available = pool.iter().map(|a| a.part.as_str()).collect::<HashSet<_>>().len();
    if available < k {
        return Err(TaxonomyError::InsufficientAtoms { k, available });
    }
    let mut picked: Vec<SemanticAtom> = Vec::with_capacity(k);
    for _ in 0..k {
        let eligible: Vec<&SemanticAtom> = pool
            .iter()
            .copied()
            .filter(|a| picked.iter().all(|p| p.part != a.part))
            .collect();
        picked.push(eligible[rng.random_range(0..eligible.len())].clone());
    }
    Ok(picked)
}

/// Renders the hybrid prompt template.
///
/// Two atoms join with " and ", three or four use a serial comma:
/// `"A creature with head of a lion, body of a horse, and tail of a peacock."`
///
/// # Panics
/// If `atoms` is empty.
pub fn render_prompt(prefix: &str, atoms: &[SemanticAtom]) -> String {
    assert!(!atoms.is_empty(), "render_prompt needs at least one atom");
    let items: Vec<String> =
        atoms.iter().map(|a| format!("{} of a {}", a.part, a.subject)).collect();
    let body = match items.as_slice() {
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
        [] => unreachable!(),
    };
    format!("{prefix} with {body}.")
}

/// Deterministic render seed of a prompt: FNV-1a 64 over its UTF-8 bytes.
pub fn derive_seed(text: &str) -> u64 {
    fnv1a64(text.as_bytes())
}
