//! End-to-end run: corpus → dataset → train → sample → eval → report, with a
//! manifest of seeds and content digests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{GraderKind, RunConfig};
use crate::eval::{
    cmd_report, compositional_accuracy, fid, gaussian_stats, kid, parteval_extract, parteval_grade, parteval_questions,
    parteval_score, slot_match_rate, EvalReport, GradeRecord, GradeSubject, Grader, OracleGrader, RemoteGrader,
    RemoteGraderConfig, SampleScore,
};
use crate::exec::Exec;
use crate::nn::write_checkpoint;
use crate::prior::{train, PriorExample, PriorMeta, PriorModel, SampleOptions};
use crate::seed::{rng_from, sha256_hex};
use crate::taxonomy::{generate_corpus, load_taxonomy, Corpus, HybridPrompt, SemanticAtom, Taxonomy, DEFAULT_TAXONOMY};
use crate::world::{condition_block, make_dataset, write_dataset_cache, ConditionSet, Embedding, TrainingPair, WorldSpec};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Corpus,
    Dataset,
    Train,
    Sample,
    Eval,
    Report,
    Manifest,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().expect("stage is a string"))
    }
}

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

fn at<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError { stage, message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub taxonomy_sha256: String,
    /// Files under the output directory, sorted by path.
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(at(Stage::Manifest))?;
        serde_json::from_slice(&bytes).map_err(at(Stage::Manifest))
    }

    pub fn digest_map(&self) -> BTreeMap<&str, &str> {
        self.artifacts.iter().map(|a| (a.path.as_str(), a.sha256.as_str())).collect()
    }
}

/// One line of `samples.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<u64>,
    pub atoms: Vec<SemanticAtom>,
    pub cosine_to_oracle: f64,
    pub decoded_atoms: Vec<SemanticAtom>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub model: String,
    pub objective: String,
    pub heldout: usize,
    pub mean_cosine: f64,
    pub compositional_accuracy: f64,
    /// Part count → accuracy.
    pub accuracy_by_k: BTreeMap<usize, f64>,
    pub fid: f64,
    pub kid_mean: f64,
    pub kid_std: f64,
    /// Part count → PartEval score.
    pub parteval_by_k: BTreeMap<usize, f64>,
    pub first_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    pub metrics: Metrics,
}

/// Files written to one directory, with their digests.
struct ArtifactWriter {
    dir: PathBuf,
    written: Vec<Artifact>,
}

impl ArtifactWriter {
    fn write(&mut self, rel: &str, bytes: &[u8], stage: Stage) -> Result<(), PipelineError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(at(stage))?;
        }
        std::fs::write(&path, bytes).map_err(|e| PipelineError { stage, message: format!("{}: {e}", path.display()) })?;
        self.written.push(Artifact { path: rel.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }
}

pub fn resolve_taxonomy(path: Option<&Path>) -> Result<(Taxonomy, Vec<u8>), PipelineError> {
    match path {
        None => Ok((Taxonomy::default_shipped(), DEFAULT_TAXONOMY.as_bytes().to_vec())),
        Some(p) => {
            let tax = load_taxonomy(p).map_err(at(Stage::Config))?;
            let bytes = std::fs::read(p).map_err(at(Stage::Config))?;
            Ok((tax, bytes))
        }
    }
}

/// Everything the eval stage produces for a set of samples.
pub struct EvalOutputs {
    pub metrics: Metrics,
    pub samples: Vec<SampleRecord>,
    pub accuracy_report: EvalReport,
    pub parteval_reports: Vec<EvalReport>,
}

/// Scores generated embeddings against their held-out records.
pub fn evaluate(
    config: &RunConfig,
    world: &WorldSpec,
    heldout: &[(&HybridPrompt, &TrainingPair)],
    generated: &[Embedding],
    grader: &dyn Grader,
    exec: Exec,
) -> Result<EvalOutputs, PipelineError> {
    let err = at(Stage::Eval);
    let pairs: Vec<(Embedding, ConditionSet)> =
        generated.iter().zip(heldout).map(|(g, (_, p))| (g.clone(), p.cond.clone())).collect();
    let accuracy = compositional_accuracy(&pairs, world, exec).map_err(&err)?;
    let samples: Vec<SampleRecord> = exec.map_slice(&pairs, |(g, c)| SampleRecord {
        prompt_id: None,
        atoms: c.atoms(),
        cosine_to_oracle: 0.0,
        decoded_atoms: world.decode_parts(g, c.k()),
    });
    let samples: Vec<SampleRecord> = samples
        .into_iter()
        .zip(heldout)
        .zip(generated)
        .map(|((mut s, (r, p)), g)| {
            s.prompt_id = Some(r.id);
            s.cosine_to_oracle = g.cosine(&p.target);
            s
        })
        .collect();
    let mean_cosine = samples.iter().map(|s| s.cosine_to_oracle).sum::<f64>() / samples.len() as f64;

    let per_sample: Vec<SampleScore> = pairs
        .iter()
        .zip(heldout)
        .map(|((g, c), (r, _))| SampleScore { prompt_id: r.id, k: c.k(), score: slot_match_rate(g, c, world) })
        .collect();
    let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in &per_sample {
        by_k.entry(s.k).or_default().push(s.score);
    }
    let accuracy_by_k = by_k.into_iter().map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect();
    let accuracy_report = EvalReport::from_samples(&config.model, "compositional_accuracy", per_sample);

    let targets: Vec<Embedding> = heldout.iter().map(|(_, p)| p.target.clone()).collect();
    let fid_value = fid(&gaussian_stats(generated).map_err(&err)?, &gaussian_stats(&targets).map_err(&err)?)
        .map_err(&err)?;
    let (kid_mean, kid_std) = kid(
        generated,
        &targets,
        config.kid_subset_size,
        config.kid_subsets,
        &mut rng_from(config.kid_seed),
        exec,
    )
    .map_err(&err)?;

    // PartEval; question counts differ by part count, so each k is its own scale
    let mut graded: BTreeMap<usize, Vec<(u64, GradeRecord)>> = BTreeMap::new();
    for ((r, p), g) in heldout.iter().zip(generated) {
        let questions: Vec<_> =
            p.cond.atoms().iter().flat_map(|a| parteval_questions(&parteval_extract(a, None))).collect();
        let subject =
            GradeSubject { subject_ref: format!("{}/prompt-{}", config.model, r.id), generated: Some(g.clone()), k: p.cond.k() };
        let rec = parteval_grade(grader, &subject, &questions).map_err(&err)?;
        graded.entry(p.cond.k()).or_default().push((r.id, rec));
    }
    let mut parteval_by_k = BTreeMap::new();
    let mut parteval_reports = Vec::new();
    for (k, recs) in &graded {
        let records: Vec<GradeRecord> = recs.iter().map(|(_, r)| r.clone()).collect();
        let score = parteval_score(&records).map_err(&err)?;
        parteval_by_k.insert(*k, score);
        parteval_reports.push(EvalReport {
            model: config.model.clone(),
            metric: "parteval".into(),
            complexity: Some(*k),
            per_sample: recs.iter().map(|(id, r)| SampleScore { prompt_id: *id, k: *k, score: r.normalized }).collect(),
            final_score: score,
        });
    }

    let metrics = Metrics {
        model: config.model.clone(),
        objective: config.objective.to_string(),
        heldout: heldout.len(),
        mean_cosine,
        compositional_accuracy: accuracy,
        accuracy_by_k,
        fid: fid_value,
        kid_mean,
        kid_std,
        parteval_by_k,
        first_loss: f64::NAN,
        final_loss: f64::NAN,
    };
    Ok(EvalOutputs { metrics, samples, accuracy_report, parteval_reports })
}

pub fn make_grader<'a>(config: &RunConfig, world: &'a WorldSpec) -> Result<Box<dyn Grader + 'a>, PipelineError> {
    match config.grader {
        GraderKind::Oracle => Ok(Box::new(OracleGrader { world })),
        GraderKind::Remote => {
            let endpoint = config.grader_endpoint.clone().ok_or_else(|| PipelineError {
                stage: Stage::Config,
                message: "grader_endpoint is required for the remote grader".into(),
            })?;
            let mut rc = RemoteGraderConfig::new(endpoint);
            rc.cache_dir = config.grader_cache.clone();
            if let Some(var) = &config.grader_token_env {
                rc.token = Some(std::env::var(var).map_err(|_| PipelineError {
                    stage: Stage::Config,
                    message: format!("environment variable {var} is not set"),
                })?);
            }
            Ok(Box::new(RemoteGrader::new(rc)))
        }
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).expect("record serializes");
        out.push(b'\n');
    }
    out
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("value serializes");
    b.push(b'\n');
    b
}

/// Writes the report files of one eval run into `w`.
fn write_eval_outputs(w: &mut ArtifactWriter, out: &EvalOutputs) -> Result<(), PipelineError> {
    w.write("samples.jsonl", &jsonl(&out.samples), Stage::Eval)?;
    w.write("reports/compositional_accuracy.json", &pretty(&out.accuracy_report), Stage::Eval)?;
    for r in &out.parteval_reports {
        w.write(&format!("reports/parteval_{}part.json", r.complexity.unwrap_or(0)), &pretty(r), Stage::Eval)?;
    }
    for (name, reports) in
        [("compositional_accuracy", vec![out.accuracy_report.clone()]), ("parteval", out.parteval_reports.clone())]
    {
        let chart = cmd_report(&reports).map_err(at(Stage::Report))?;
        w.write(&format!("charts/{name}.csv"), chart.csv.as_bytes(), Stage::Report)?;
        w.write(&format!("charts/{name}.svg"), chart.svg.as_bytes(), Stage::Report)?;
    }
    Ok(())
}

/// Runs every stage into `config.out_dir`. `log` receives progress lines.
pub fn run_pipeline(config: &RunConfig, exec: Exec, log: &mut dyn FnMut(&str)) -> Result<PipelineOutcome, PipelineError> {
    config.validate().map_err(at(Stage::Config))?;
    let (tax, tax_bytes) = resolve_taxonomy(config.taxonomy.as_deref())?;
    let mut w = ArtifactWriter { dir: config.out_dir.clone(), written: Vec::new() };
    std::fs::create_dir_all(&w.dir).map_err(at(Stage::Config))?;

    log(&format!("corpus: {} records", config.corpus_n));
    let corpus = generate_corpus(&tax, config.corpus_n, config.corpus_seed, config.mix_ratio, exec)
        .map_err(at(Stage::Corpus))?;
    w.write("corpus.jsonl", &corpus.to_jsonl_bytes(), Stage::Corpus)?;

    log("dataset");
    let world = WorldSpec::new(config.world_seed, config.dim, &tax).map_err(at(Stage::Dataset))?;
    let pairs = make_dataset(&corpus, &world, exec).map_err(at(Stage::Dataset))?;
    let mut cache = Vec::new();
    write_dataset_cache(&pairs, config.dim, &mut cache).map_err(at(Stage::Dataset))?;
    w.write("dataset.bin", &cache, Stage::Dataset)?;

    log(&format!("train: {} {} steps on {} pairs", config.objective, config.steps, config.train_n));
    let examples: Vec<PriorExample> = pairs[..config.train_n].iter().map(PriorExample::from_pair).collect();
    let tc = config.train_config();
    let trained = train(&tc, &examples, exec).map_err(at(Stage::Train))?;
    let mut csv = Vec::new();
    trained.write_loss_csv(&mut csv).map_err(at(Stage::Train))?;
    w.write("loss.csv", &csv, Stage::Train)?;
    let model = PriorModel {
        meta: PriorMeta { objective: config.objective, world: world.header(), train: tc },
        net: trained.net.clone(),
    };
    let mut ckpt = Vec::new();
    write_checkpoint(&model.net, Some(&trained.adam), &mut ckpt).map_err(at(Stage::Train))?;
    w.write("prior.ckpt", &ckpt, Stage::Train)?;
    w.write("prior.ckpt.json", &pretty(&model.meta), Stage::Train)?;

    let start = config.train_n;
    let end = start + config.heldout_n;
    log(&format!("sample: {} held-out condition sets", config.heldout_n));
    let heldout: Vec<(&HybridPrompt, &TrainingPair)> =
        corpus.records[start..end].iter().zip(&pairs[start..end]).collect();
    let conds: Vec<Vec<f64>> = heldout.iter().map(|(_, p)| condition_block(&p.cond, config.dim)).collect();
    let opts = SampleOptions { n_steps: config.sample_steps, cfg_scale: config.cfg_scale, seed: config.sample_seed };
    let generated = model.sample(&conds, opts, exec);

    log("eval");
    let grader = make_grader(config, &world)?;
    let mut out = evaluate(config, &world, &heldout, &generated, grader.as_ref(), exec)?;
    out.metrics.first_loss = trained.losses[0];
    out.metrics.final_loss = trained.tail_mean(100);
    write_eval_outputs(&mut w, &out)?;
    w.write("metrics.json", &pretty(&out.metrics), Stage::Eval)?;

    let mut artifacts = w.written;
    artifacts.sort();
    let seeds = [
        ("corpus_seed", config.corpus_seed),
        ("world_seed", config.world_seed),
        ("train_seed", config.train_seed),
        ("sample_seed", config.sample_seed),
        ("kid_seed", config.kid_seed),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        seeds,
        taxonomy_sha256: sha256_hex(&tax_bytes),
        artifacts,
    };
    std::fs::write(config.out_dir.join(MANIFEST_FILE), pretty(&manifest)).map_err(at(Stage::Manifest))?;
    log(&format!(
        "done: cosine {:.4}, accuracy {:.4}",
        out.metrics.mean_cosine, out.metrics.compositional_accuracy
    ));
    Ok(PipelineOutcome { manifest, metrics: out.metrics })
}

/// Differences between the artifacts of a manifest and a rerun.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DigestDiff {
    pub changed: Vec<String>,
    pub missing: Vec<String>,
    pub extra: Vec<String>,
}

impl DigestDiff {
    pub fn between(expected: &Manifest, actual: &Manifest) -> Self {
        let (e, a) = (expected.digest_map(), actual.digest_map());
        let mut d = DigestDiff::default();
        for (path, digest) in &e {
            match a.get(path) {
                None => d.missing.push(path.to_string()),
                Some(other) if other != digest => d.changed.push(path.to_string()),
                _ => {}
            }
        }
        d.extra = a.keys().filter(|p| !e.contains_key(*p)).map(|p| p.to_string()).collect();
        d
    }

    pub fn is_empty(&self) -> bool {
        self.changed.is_empty() && self.missing.is_empty() && self.extra.is_empty()
    }
}

/// Reruns the configuration recorded in a manifest into `out_dir` and
/// compares digests. The taxonomy file must still hash to the recorded value.
pub fn rerun_manifest(
    manifest: &Manifest,
    out_dir: &Path,
    exec: Exec,
    log: &mut dyn FnMut(&str),
) -> Result<(PipelineOutcome, DigestDiff), PipelineError> {
    let (_, tax_bytes) = resolve_taxonomy(manifest.config.taxonomy.as_deref())?;
    if sha256_hex(&tax_bytes) != manifest.taxonomy_sha256 {
        return Err(PipelineError { stage: Stage::Config, message: "taxonomy digest differs from the manifest".into() });
    }
    let config = RunConfig { out_dir: out_dir.to_path_buf(), ..manifest.config.clone() };
    let outcome = run_pipeline(&config, exec, log)?;
    let diff = DigestDiff::between(manifest, &outcome.manifest);
    Ok((outcome, diff))
}

/// Looks up atoms written as `part:subject`.
pub fn parse_atoms(tax: &Taxonomy, spec: &str) -> Result<Vec<SemanticAtom>, String> {
    spec.split(',')
        .map(|item| {
            let (part, subject) =
                item.trim().split_once(':').ok_or_else(|| format!("`{item}` is not of the form part:subject"))?;
            tax.atoms()
                .iter()
                .find(|a| a.part == part.trim() && a.subject == subject.trim())
                .cloned()
                .ok_or_else(|| format!("no atom {}:{} in the taxonomy", part.trim(), subject.trim()))
        })
        .collect()
}

/// Reads a corpus file.
pub fn read_corpus(path: &Path) -> Result<Corpus, String> {
    let f = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Corpus::read_jsonl(std::io::BufReader::new(f)).map_err(|e| format!("{}: {e}", path.display()))
}

/// Writes eval outputs (samples, reports, charts, metrics) into `dir`.
pub fn write_eval_dir(dir: &Path, out: &EvalOutputs) -> Result<Vec<Artifact>, PipelineError> {
    let mut w = ArtifactWriter { dir: dir.to_path_buf(), written: Vec::new() };
    write_eval_outputs(&mut w, out)?;
    w.write("metrics.json", &pretty(&out.metrics), Stage::Eval)?;
    Ok(w.written)
}
