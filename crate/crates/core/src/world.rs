//! Synthetic embedding world.
//!
//! Stands in for a real image-encoder space. Every atom gets a seeded unit
//! vector; a condition set composes into a target through four fixed slot
//! rotations, `target = normalize(Σ_i R_i e_i)`. The composition is order
//! sensitive and can be decoded back into its atoms, which gives the
//! evaluation stack a free ground truth.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::seed::{fnv1a64, gaussian_vec, mix_seed, rng_from};
use crate::taxonomy::{Corpus, SemanticAtom, Taxonomy, MAX_ATOMS_PER_PROMPT};

pub const DEFAULT_DIM: usize = 64;
pub const SLOT_COUNT: usize = MAX_ATOMS_PER_PROMPT;

/// Atom embeddings are redrawn until their |cosine| with every earlier atom
/// stays below this bound.
pub const MAX_ATOM_COHERENCE: f64 = 0.45;
const MAX_REDRAWS: u64 = 64;

/// Candidates per slot kept for the joint decoding search.
const DECODE_CANDIDATES: usize = 6;
const DECODE_SWEEPS: usize = 8;

const DATASET_MAGIC: &[u8; 4] = b"CHDS";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("atom {0} is not part of the world's taxonomy")]
    UnknownAtom(SemanticAtom),
    #[error("condition sets need 1..={SLOT_COUNT} slots, got {0}")]
    SlotCount(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error("malformed dataset cache: {0}")]
    MalformedCache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.0.iter_mut().for_each(|x| *x /= n);
        }
        self
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let n = self.norm() * other.norm();
        if n == 0.0 {
            0.0
        } else {
            self.dot(other) / n
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Encoder boundary. The synthetic world implements it; a real part encoder
/// could replace it without touching the prior.
pub trait PartEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, atom: &SemanticAtom) -> Result<Embedding, WorldError>;
}

/// Persisted form of a world; everything else is rederived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldHeader {
    pub world_seed: u64,
    pub d: usize,
}

#[derive(Debug, Clone)]
pub struct WorldSpec {
    world_seed: u64,
    d: usize,
    rotations: Vec<DMatrix<f64>>,
    atoms: Vec<SemanticAtom>,
    table: Vec<Embedding>,
    index: HashMap<SemanticAtom, usize>,
    /// `rotated[slot][atom] = R_slot · e_atom`
    rotated: Vec<Vec<Vec<f64>>>,
}

impl WorldSpec {
    pub fn new(world_seed: u64, d: usize, taxonomy: &Taxonomy) -> Result<Self, WorldError> {
        if d == 0 {
            return Err(WorldError::Invalid("dimension must be positive".into()));
        }
        if taxonomy.atom_count() == 0 {
            return Err(WorldError::Invalid("taxonomy has no atoms".into()));
        }
        let rotations: Vec<DMatrix<f64>> =
            (0..SLOT_COUNT).map(|i| slot_rotation(world_seed, d, i)).collect();
        let atoms = taxonomy.atoms().to_vec();
        let mut table: Vec<Embedding> = Vec::with_capacity(atoms.len());
        for atom in &atoms {
            let mut attempt = 0;
            let e = loop {
                let e = keyed_unit_vector(world_seed, d, atom, attempt);
                attempt += 1;
                let coherent = table.iter().any(|o| e.dot(o).abs() >= MAX_ATOM_COHERENCE);
                if !coherent || attempt >= MAX_REDRAWS {
                    break e;
                }
            };
            table.push(e);
        }
        let index = atoms.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        let rotated = rotations
            .iter()
            .map(|r| table.iter().map(|e| (r * nalgebra::DVector::from_column_slice(&e.0)).as_slice().to_vec()).collect())
            .collect();
        Ok(WorldSpec { world_seed, d, rotations, atoms, table, index, rotated })
    }

    pub fn from_header(header: WorldHeader, taxonomy: &Taxonomy) -> Result<Self, WorldError> {
        Self::new(header.world_seed, header.d, taxonomy)
    }

    pub fn header(&self) -> WorldHeader {
        WorldHeader { world_seed: self.world_seed, d: self.d }
    }

    pub fn world_seed(&self) -> u64 {
        self.world_seed
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn rotation(&self, slot: usize) -> &DMatrix<f64> {
        &self.rotations[slot]
    }

    pub fn atoms(&self) -> &[SemanticAtom] {
        &self.atoms
    }

    pub fn atom_embedding(&self, atom: &SemanticAtom) -> Result<&Embedding, WorldError> {
        self.index
            .get(atom)
            .map(|&i| &self.table[i])
            .ok_or_else(|| WorldError::UnknownAtom(atom.clone()))
    }

    pub fn condition_set(&self, atoms: &[SemanticAtom]) -> Result<ConditionSet, WorldError> {
        if atoms.is_empty() || atoms.len() > SLOT_COUNT {
            return Err(WorldError::SlotCount(atoms.len()));
        }
        let slots = atoms
            .iter()
            .map(|a| Ok((a.clone(), self.atom_embedding(a)?.clone())))
            .collect::<Result<Vec<_>, WorldError>>()?;
        Ok(ConditionSet { slots })
    }

    /// `normalize(Σ_i R_i · e_i)` over the slots of `cond`.
    pub fn compose_target(&self, cond: &ConditionSet) -> Embedding {
        self.compose_embeddings(cond.slots.iter().map(|(_, e)| e.as_slice()))
    }

    pub(crate) fn compose_embeddings<'a>(&self, slots: impl Iterator<Item = &'a [f64]>) -> Embedding {
        let mut acc = nalgebra::DVector::<f64>::zeros(self.d);
        for (i, e) in slots.enumerate() {
            acc += &self.rotations[i] * nalgebra::DVector::from_column_slice(e);
        }
        Embedding(acc.as_slice().to_vec()).normalized()
    }

    /// Recovers the `k` slot atoms of an embedding.
    ///
    /// Finds the assignment of distinct atoms to slots that maximizes
    /// `cosine(e, Σ_i R_i a_i)`: a joint search over the top matched-filter
    /// candidates of each slot, then coordinate sweeps where each slot in
    /// turn takes the argmax over all atoms with the other slots held fixed.
    /// Ties resolve to the earlier atom in taxonomy order.
    ///
    /// # Panics
    /// If `k` is 0 or larger than the slot count, or `e` has the wrong length.
    pub fn decode_parts(&self, e: &Embedding, k: usize) -> Vec<SemanticAtom> {
        self.decode_indices(e, k).into_iter().map(|i| self.atoms[i].clone()).collect()
    }

    pub(crate) fn decode_indices(&self, e: &Embedding, k: usize) -> Vec<usize> {
        assert!((1..=SLOT_COUNT).contains(&k), "decode_parts: k must be in 1..={SLOT_COUNT}");
        assert_eq!(e.dim(), self.d, "decode_parts: dimension mismatch");
        let n = self.atoms.len();
        // matched-filter scores per slot
        let scores: Vec<Vec<f64>> = (0..k)
            .map(|i| self.rotated[i].iter().map(|y| dot(y, &e.0)).collect())
            .collect();
        let m = DECODE_CANDIDATES.min(n);
        let cands: Vec<Vec<usize>> = scores
            .iter()
            .map(|s| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                idx.truncate(m);
                idx
            })
            .collect();

        let mut best = self.joint_search(&scores, &cands, k);
        for _ in 0..DECODE_SWEEPS {
            let mut changed = false;
            for i in 0..k {
                let mut others = vec![0.0; self.d];
                for (j, &a) in best.iter().enumerate() {
                    if j != i {
                        others.iter_mut().zip(&self.rotated[j][a]).for_each(|(o, y)| *o += y);
                    }
                }
                let other_score = dot(&others, &e.0);
                let other_sq = dot(&others, &others);
                let mut arg = best[i];
                let mut top = f64::NEG_INFINITY;
                for a in 0..n {
                    if best.iter().enumerate().any(|(j, &b)| j != i && b == a) {
                        continue;
                    }
                    let y = &self.rotated[i][a];
                    let norm_sq = other_sq + 2.0 * dot(&others, y) + dot(y, y);
                    let c = (other_score + scores[i][a]) / norm_sq.max(1e-300).sqrt();
                    if c > top {
                        top = c;
                        arg = a;
                    }
                }
                if arg != best[i] {
                    best[i] = arg;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        best
    }

    /// Exhaustive search over the candidate lattice, distinct atoms only.
    fn joint_search(&self, scores: &[Vec<f64>], cands: &[Vec<usize>], k: usize) -> Vec<usize> {
        // Gram entries between candidates of different slots
        let m = cands[0].len();
        let mut gram = vec![vec![vec![0.0; m * m]; k]; k];
        for i in 0..k {
            for j in (i + 1)..k {
                for (p, &a) in cands[i].iter().enumerate() {
                    for (q, &b) in cands[j].iter().enumerate() {
                        gram[i][j][p * m + q] = dot(&self.rotated[i][a], &self.rotated[j][b]);
                    }
                }
            }
        }
        let self_sq: Vec<Vec<f64>> = (0..k)
            .map(|i| cands[i].iter().map(|&a| dot(&self.rotated[i][a], &self.rotated[i][a])).collect())
            .collect();

        let mut pick = vec![0usize; k];
        let mut best_pick = vec![0usize; k];
        let mut best = f64::NEG_INFINITY;
        let total = m.pow(k as u32);
        for code in 0..total {
            let mut c = code;
            for p in pick.iter_mut() {
                *p = c % m;
                c /= m;
            }
            let atoms: Vec<usize> = (0..k).map(|i| cands[i][pick[i]]).collect();
            if (0..k).any(|i| (0..i).any(|j| atoms[i] == atoms[j])) {
                continue;
            }
            let mut num = 0.0;
            let mut norm_sq = 0.0;
            for i in 0..k {
                num += scores[i][atoms[i]];
                norm_sq += self_sq[i][pick[i]];
                for j in (i + 1)..k {
                    norm_sq += 2.0 * gram[i][j][pick[i] * m + pick[j]];
                }
            }
            let c = num / norm_sq.max(1e-300).sqrt();
            if c > best {
                best = c;
                best_pick.clone_from(&pick);
            }
        }
        (0..k).map(|i| cands[i][best_pick[i]]).collect()
    }
}

impl PartEncoder for WorldSpec {
    fn dim(&self) -> usize {
        self.d
    }

    fn encode(&self, atom: &SemanticAtom) -> Result<Embedding, WorldError> {
        self.atom_embedding(atom).cloned()
    }
}

/// Seeded Gaussian draw keyed by `(world_seed, domain, part, subject)`,
/// normalized. `attempt` salts redraws.
fn keyed_unit_vector(world_seed: u64, d: usize, atom: &SemanticAtom, attempt: u64) -> Embedding {
    let key = format!("{}/{}/{}", atom.domain, atom.part, atom.subject);
    let seed = mix_seed(mix_seed(world_seed, fnv1a64(key.as_bytes())), attempt);
    Embedding(gaussian_vec(&mut rng_from(seed), d)).normalized()
}

/// Orthogonal `d×d` matrix: QR of a seeded Gaussian matrix with the signs of
/// `diag(R)` folded into `Q`.
fn slot_rotation(world_seed: u64, d: usize, slot: usize) -> DMatrix<f64> {
    let seed = mix_seed(mix_seed(world_seed, 0x524f_5441_5445), slot as u64);
    let g = DMatrix::from_column_slice(d, d, &gaussian_vec(&mut rng_from(seed), d * d));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Ordered per-slot conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub slots: Vec<(SemanticAtom, Embedding)>,
}

impl ConditionSet {
    pub fn k(&self) -> usize {
        self.slots.len()
    }

    pub fn atoms(&self) -> Vec<SemanticAtom> {
        self.slots.iter().map(|(a, _)| a.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub cond: ConditionSet,
    pub target: Embedding,
}

/// One training pair per corpus record.
pub fn make_dataset(
    corpus: &Corpus,
    world: &WorldSpec,
    exec: Exec,
) -> Result<Vec<TrainingPair>, WorldError> {
    exec.map_slice(&corpus.records, |r| {
        let cond = world.condition_set(&r.atoms)?;
        let target = world.compose_target(&cond);
        Ok(TrainingPair { cond, target })
    })
    .into_iter()
    .collect()
}

/// Binary dataset cache.
///
/// Layout, all little-endian: magic `b"CHDS"`, `u32` version, `u32` d,
/// `u32` count, then `count` rows of `5d + 4` float32 values: the target
/// (`d`), four condition slots (`4d`, zero padded) and the slot mask (`4`).
pub fn write_dataset_cache<W: Write>(pairs: &[TrainingPair], d: usize, mut w: W) -> Result<(), WorldError> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    w.write_all(&(pairs.len() as u32).to_le_bytes())?;
    for p in pairs {
        if p.target.dim() != d {
            return Err(WorldError::DimensionMismatch { expected: d, got: p.target.dim() });
        }
        let mut row = Vec::with_capacity(5 * d + SLOT_COUNT);
        row.extend_from_slice(&p.target.0);
        row.extend(condition_block(&p.cond, d));
        for v in row {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rows of a dataset cache as `(target, condition block)`.
pub fn read_dataset_cache<R: Read>(mut r: R) -> Result<(usize, Vec<(Vec<f64>, Vec<f64>)>), WorldError> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if &head[0..4] != DATASET_MAGIC {
        return Err(WorldError::MalformedCache("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
    if word(4) != DATASET_VERSION {
        return Err(WorldError::MalformedCache(format!("unsupported version {}", word(4))));
    }
    let d = word(8) as usize;
    let count = word(12) as usize;
    let width = 5 * d + SLOT_COUNT;
    let mut buf = vec![0u8; width * 4];
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        let vals: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        rows.push((vals[..d].to_vec(), vals[d..].to_vec()));
    }
    Ok((d, rows))
}

/// `4d` slot values (zero padded) followed by the 4-entry presence mask.
pub fn condition_block(cond: &ConditionSet, d: usize) -> Vec<f64> {
    let mut block = vec![0.0; SLOT_COUNT * d + SLOT_COUNT];
    for (i, (_, e)) in cond.slots.iter().enumerate() {
        block[i * d..(i + 1) * d].copy_from_slice(&e.0);
        block[SLOT_COUNT * d + i] = 1.0;
    }
    block
}
