//! Hybrid prompt corpus: JSONL records with derived render seeds.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, render_prompt, sample_atoms, SemanticAtom, Taxonomy, TaxonomyError};
use crate::exec::Exec;
use crate::seed::{mix_seed, rng_from};

/// Settings handed to the external text-to-image backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub resolution: u32,
    pub steps: u32,
    pub guidance_scale: f64,
    pub scheduler_shift: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { resolution: 1024, steps: 50, guidance_scale: 5.0, scheduler_shift: 3.0 }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), TaxonomyError> {
        if self.resolution == 0 || self.steps == 0 || self.guidance_scale.is_nan() || self.guidance_scale <= 0.0 {
            return Err(TaxonomyError::InvalidArgument(format!("invalid render config {self:?}")));
        }
        Ok(())
    }
}

/// One corpus line. Field order is the JSONL field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridPrompt {
    pub id: u64,
    pub prefix: String,
    pub domain_mix: bool,
    pub atoms: Vec<SemanticAtom>,
    pub text: String,
    pub seed: u64,
    pub render: RenderConfig,
}

impl HybridPrompt {
    /// Re-renders the text and seed from the atoms and compares.
    pub fn is_consistent(&self) -> bool {
        let text = render_prompt(&self.prefix, &self.atoms);
        text == self.text && derive_seed(&text) == self.seed
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub records: Vec<HybridPrompt>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TaxonomyError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.records.len() * 256);
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TaxonomyError> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Corpus { records })
    }
}

/// Generates record `id` in isolation.
///
/// The record's generator is seeded from `(master_seed, id)`, so records can
/// be produced in any order or in parallel.
pub fn generate_record(
    taxonomy: &Taxonomy,
    id: u64,
    master_seed: u64,
    mix_ratio: f64,
) -> Result<HybridPrompt, TaxonomyError> {
    let mut rng = rng_from(mix_seed(master_seed, id));
    let k = rng.random_range(2..=4usize);
    let domain_mix = rng.random_bool(mix_ratio);
    let atoms = sample_atoms(taxonomy, &mut rng, k, domain_mix)?;
    // mixed prompts take the prefix of their first atom's domain
    let prefix = taxonomy
        .domain(atoms[0].domain)
        .map(|d| d.prefix.clone())
        .expect("sampled atom belongs to a taxonomy domain");
    let text = render_prompt(&prefix, &atoms);
    let seed = derive_seed(&text);
    Ok(HybridPrompt { id, prefix, domain_mix, atoms, text, seed, render: RenderConfig::default() })
}

pub fn generate_corpus(
    taxonomy: &Taxonomy,
    n: usize,
    master_seed: u64,
    mix_ratio: f64,
    exec: Exec,
) -> Result<Corpus, TaxonomyError> {
    if n == 0 {
        return Err(TaxonomyError::InvalidArgument("corpus size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(TaxonomyError::InvalidArgument(format!(
            "mix_ratio must be in [0, 1], got {mix_ratio}"
        )));
    }
    let records = exec
        .map_range(n, |i| generate_record(taxonomy, i as u64, master_seed, mix_ratio))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus { records })
}
