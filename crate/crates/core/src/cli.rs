//! The `chimera` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::config::{GraderKind, RunConfig};
use crate::eval::{cmd_report, EvalReport};
use crate::exec::Exec;
use crate::pipeline::{
    evaluate, make_grader, parse_atoms, read_corpus, rerun_manifest, resolve_taxonomy, run_pipeline, write_eval_dir,
    Manifest, SampleRecord,
};
use crate::prior::{train, Objective, PriorExample, PriorMeta, PriorModel, SampleOptions, TrainConfig};
use crate::taxonomy::{generate_corpus, load_taxonomy, Taxonomy};
use crate::world::{condition_block, make_dataset, WorldSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

fn existing_file(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("file not found: {s}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "chimera", version, about = "Part-compositional prior: corpus, training, sampling and evaluation")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Taxonomy tools.
    #[command(subcommand)]
    Taxonomy(TaxonomyCmd),
    /// Prompt corpus tools.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train or sample the prior.
    #[command(subcommand)]
    Prior(PriorCmd),
    /// Sample held-out corpus records from a checkpoint and score them.
    Eval(EvalArgs),
    /// Run every stage end to end, or rerun a manifest and verify digests.
    Pipeline(PipelineArgs),
    /// Merge report JSONs into a CSV table and an SVG chart.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum TaxonomyCmd {
    /// Parse and validate a taxonomy file.
    Validate {
        #[arg(value_parser = existing_file)]
        file: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Generate a JSONL prompt corpus.
    Gen(CorpusGenArgs),
}

#[derive(Debug, Args)]
pub struct CorpusGenArgs {
    /// Number of records.
    #[arg(long)]
    pub n: usize,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probability that a record mixes domains.
    #[arg(long, default_value_t = 0.5)]
    pub mix_ratio: f64,
    /// Output JSONL path.
    #[arg(long)]
    pub out: PathBuf,
    /// Taxonomy file (built-in default when omitted).
    #[arg(long, value_parser = existing_file)]
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum PriorCmd {
    /// Train a prior on the leading records of a corpus.
    Train(TrainArgs),
    /// Sample embeddings from a checkpoint.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// flow or diffusion.
    #[arg(long, default_value = "flow")]
    pub objective: Objective,
    /// Corpus JSONL.
    #[arg(long, value_parser = existing_file)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub world_seed: u64,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    /// Checkpoint path; metadata goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Train on the first N records (all when omitted).
    #[arg(long)]
    pub train_n: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "256,256,256")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub cond_dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Loss curve CSV (defaults to `<out>.loss.csv`).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long, value_parser = existing_file)]
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("condition").required(true).args(["prompt_id", "atoms"])))]
pub struct SampleArgs {
    #[arg(long, value_parser = existing_file)]
    pub ckpt: PathBuf,
    /// Condition on this corpus record (needs --corpus).
    #[arg(long, requires = "corpus")]
    pub prompt_id: Option<u64>,
    /// Condition on atoms written `part:subject,part:subject,...`.
    #[arg(long)]
    pub atoms: Option<String>,
    #[arg(long, value_parser = existing_file)]
    pub corpus: Option<PathBuf>,
    /// Sampler steps.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Guidance scale; 1 disables guidance.
    #[arg(long, default_value_t = 1.0)]
    pub cfg: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = existing_file)]
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_parser = existing_file)]
    pub ckpt: PathBuf,
    #[arg(long, value_parser = existing_file)]
    pub corpus: PathBuf,
    /// First held-out record.
    #[arg(long, default_value_t = 10_000)]
    pub start: usize,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Output directory for samples, reports, charts and metrics.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "prior")]
    pub model: String,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub cfg: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// oracle or remote.
    #[arg(long, default_value = "oracle")]
    pub grader: String,
    #[arg(long)]
    pub grader_endpoint: Option<String>,
    /// Environment variable holding the grader bearer token.
    #[arg(long)]
    pub grader_token_env: Option<String>,
    #[arg(long)]
    pub grader_cache: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub kid_subset_size: usize,
    #[arg(long, default_value_t = 10)]
    pub kid_subsets: usize,
    #[arg(long, value_parser = existing_file)]
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Key-value config file.
    #[arg(long, value_parser = existing_file)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = existing_file)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    pub objective: Option<Objective>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override any config key, `KEY=VALUE`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Rerun this manifest's configuration and verify artifact digests.
    #[arg(long, value_parser = existing_file, conflicts_with_all = ["config", "taxonomy", "objective", "steps", "overrides"])]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files.
    #[arg(required = true, value_parser = existing_file)]
    pub reports: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Base name of the written files.
    #[arg(long, default_value = "report")]
    pub name: String,
}

/// Help text of a (sub)command path, e.g. `&["prior", "train"]`.
///
/// ```
/// let h = chimera_core::cli::help_text(&["corpus", "gen"]);
/// for flag in ["--n", "--seed", "--mix-ratio", "--out"] {
///     assert!(h.contains(flag));
/// }
/// let h = chimera_core::cli::help_text(&["prior", "train"]);
/// for flag in ["--objective", "--corpus", "--world-seed", "--steps", "--out"] {
///     assert!(h.contains(flag));
/// }
/// let h = chimera_core::cli::help_text(&["prior", "sample"]);
/// for flag in ["--ckpt", "--prompt-id", "--atoms", "--steps", "--cfg"] {
///     assert!(h.contains(flag));
/// }
/// assert!(chimera_core::cli::help_text(&["taxonomy", "validate"]).contains("<FILE>"));
/// ```
pub fn help_text(path: &[&str]) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let mut cur = &mut cmd;
    for name in path {
        cur = cur.find_subcommand_mut(name).unwrap_or_else(|| panic!("no subcommand {name}"));
    }
    cur.render_long_help().to_string()
}

/// A failed command: exit code plus message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

fn runtime(message: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_RUNTIME, message: message.to_string() }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match dispatch(cli.command, exec, out, err) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command, exec: Exec, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Command::Taxonomy(TaxonomyCmd::Validate { file }) => {
            let t = load_taxonomy(&file).map_err(runtime)?;
            let parts: usize = t.domains().iter().map(|d| d.parts.len()).sum();
            writeln!(out, "ok: {} domains, {} parts, {} atoms", t.domains().len(), parts, t.atom_count())
                .map_err(runtime)?;
            Ok(())
        }
        Command::Corpus(CorpusCmd::Gen(a)) => {
            let (tax, _) = resolve_taxonomy(a.taxonomy.as_deref()).map_err(runtime)?;
            if !(0.0..=1.0).contains(&a.mix_ratio) {
                return Err(usage(format!("--mix-ratio must be in [0, 1], got {}", a.mix_ratio)));
            }
            if a.n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            let corpus = generate_corpus(&tax, a.n, a.seed, a.mix_ratio, exec).map_err(runtime)?;
            let f = std::fs::File::create(&a.out).map_err(|e| runtime(format!("{}: {e}", a.out.display())))?;
            corpus.write_jsonl(std::io::BufWriter::new(f)).map_err(runtime)?;
            writeln!(out, "wrote {} records to {}", corpus.len(), a.out.display()).map_err(runtime)?;
            Ok(())
        }
        Command::Prior(PriorCmd::Train(a)) => prior_train(a, exec, out, err),
        Command::Prior(PriorCmd::Sample(a)) => prior_sample(a, out),
        Command::Eval(a) => eval_cmd(a, exec, out),
        Command::Pipeline(a) => pipeline_cmd(a, exec, out, err),
        Command::Report(a) => {
            let reports = a.reports.iter().map(|p| EvalReport::load(p)).collect::<Result<Vec<_>, _>>().map_err(runtime)?;
            let r = cmd_report(&reports).map_err(runtime)?;
            std::fs::create_dir_all(&a.out).map_err(runtime)?;
            let csv = a.out.join(format!("{}.csv", a.name));
            let svg = a.out.join(format!("{}.svg", a.name));
            std::fs::write(&csv, &r.csv).map_err(runtime)?;
            std::fs::write(&svg, &r.svg).map_err(runtime)?;
            writeln!(out, "{} lines of `{}` -> {}, {}", r.lines.len(), r.metric, csv.display(), svg.display())
                .map_err(runtime)?;
            Ok(())
        }
    }
}

fn world_for(tax: &Taxonomy, meta: &PriorMeta) -> Result<WorldSpec, Failure> {
    WorldSpec::from_header(meta.world, tax).map_err(runtime)
}

fn prior_train(a: TrainArgs, exec: Exec, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let (tax, _) = resolve_taxonomy(a.taxonomy.as_deref()).map_err(runtime)?;
    let corpus = read_corpus(&a.corpus).map_err(runtime)?;
    let n = a.train_n.unwrap_or(corpus.len());
    if n == 0 || n > corpus.len() {
        return Err(usage(format!("--train-n must be in 1..={}", corpus.len())));
    }
    let world = WorldSpec::new(a.world_seed, a.dim, &tax).map_err(runtime)?;
    let pairs = make_dataset(&corpus, &world, exec).map_err(runtime)?;
    let examples: Vec<PriorExample> = pairs[..n].iter().map(PriorExample::from_pair).collect();
    let tc = TrainConfig {
        objective: a.objective,
        lr: a.lr,
        batch_size: a.batch_size,
        steps: a.steps,
        cond_dropout: a.cond_dropout,
        seed: a.seed,
        hidden: a.hidden,
        ..TrainConfig::default()
    };
    tc.validate().map_err(|e| usage(e.to_string()))?;
    let _ = writeln!(err, "training {} for {} steps on {} pairs", a.objective, a.steps, n);
    let trained = train(&tc, &examples, exec).map_err(runtime)?;
    let model = PriorModel { meta: PriorMeta { objective: a.objective, world: world.header(), train: tc }, net: trained.net.clone() };
    model.save(&a.out, Some(&trained.adam)).map_err(runtime)?;
    let csv_path = a.loss_csv.unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".loss.csv");
        s.into()
    });
    let f = std::fs::File::create(&csv_path).map_err(runtime)?;
    trained.write_loss_csv(std::io::BufWriter::new(f)).map_err(runtime)?;
    writeln!(
        out,
        "loss {:.4} -> {:.4}; checkpoint {}; curve {}",
        trained.losses[0],
        trained.tail_mean(100),
        a.out.display(),
        csv_path.display()
    )
    .map_err(runtime)?;
    Ok(())
}

fn prior_sample(a: SampleArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let (tax, _) = resolve_taxonomy(a.taxonomy.as_deref()).map_err(runtime)?;
    let model = PriorModel::load(&a.ckpt).map_err(runtime)?;
    let world = world_for(&tax, &model.meta)?;
    let (prompt_id, atoms) = match (a.prompt_id, a.atoms.as_deref()) {
        (Some(id), _) => {
            let corpus = read_corpus(a.corpus.as_deref().expect("clap enforces --corpus")).map_err(runtime)?;
            let r = corpus.records.get(id as usize).ok_or_else(|| usage(format!("--prompt-id {id} is out of range")))?;
            (Some(id), r.atoms.clone())
        }
        (None, Some(spec)) => (None, parse_atoms(&tax, spec).map_err(usage)?),
        (None, None) => unreachable!("clap requires one of --prompt-id and --atoms"),
    };
    let cond = world.condition_set(&atoms).map_err(|e| usage(e.to_string()))?;
    let opts = SampleOptions { n_steps: a.steps.max(1), cfg_scale: a.cfg, seed: a.seed };
    let e = model.sample(&[condition_block(&cond, world.dim())], opts, Exec::Sequential).pop().unwrap();
    let rec = SampleRecord {
        prompt_id,
        atoms: atoms.clone(),
        cosine_to_oracle: e.cosine(&world.compose_target(&cond)),
        decoded_atoms: world.decode_parts(&e, cond.k()),
    };
    writeln!(out, "{}", serde_json::to_string(&rec).map_err(runtime)?).map_err(runtime)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs, exec: Exec, out: &mut dyn Write) -> Result<(), Failure> {
    let grader = match a.grader.as_str() {
        "oracle" => GraderKind::Oracle,
        "remote" => GraderKind::Remote,
        other => return Err(usage(format!("--grader must be oracle or remote, got `{other}`"))),
    };
    if grader == GraderKind::Remote && a.grader_endpoint.is_none() {
        return Err(usage("--grader remote needs --grader-endpoint"));
    }
    let (tax, _) = resolve_taxonomy(a.taxonomy.as_deref()).map_err(runtime)?;
    let model = PriorModel::load(&a.ckpt).map_err(runtime)?;
    let world = world_for(&tax, &model.meta)?;
    let corpus = read_corpus(&a.corpus).map_err(runtime)?;
    let end = a.start + a.count;
    if a.count < 2 || end > corpus.len() {
        return Err(usage(format!("--start/--count select records outside 0..{}", corpus.len())));
    }
    let records = &corpus.records[a.start..end];
    let sub = crate::taxonomy::Corpus { records: records.to_vec() };
    let pairs = make_dataset(&sub, &world, exec).map_err(runtime)?;
    let heldout: Vec<_> = records.iter().zip(&pairs).collect();
    let conds: Vec<Vec<f64>> = pairs.iter().map(|p| condition_block(&p.cond, world.dim())).collect();
    let opts = SampleOptions { n_steps: a.steps.max(1), cfg_scale: a.cfg, seed: a.seed };
    let generated = model.sample(&conds, opts, exec);
    let cfg = RunConfig {
        model: a.model,
        objective: model.meta.objective,
        kid_subset_size: a.kid_subset_size.min(a.count),
        kid_subsets: a.kid_subsets,
        grader,
        grader_endpoint: a.grader_endpoint,
        grader_token_env: a.grader_token_env,
        grader_cache: a.grader_cache,
        ..RunConfig::default()
    };
    let g = make_grader(&cfg, &world).map_err(runtime)?;
    let results = evaluate(&cfg, &world, &heldout, &generated, g.as_ref(), exec).map_err(runtime)?;
    write_eval_dir(&a.out, &results).map_err(runtime)?;
    let m = &results.metrics;
    writeln!(
        out,
        "cosine {:.4}  accuracy {:.4}  fid {:.5}  kid {:.5} ± {:.5}",
        m.mean_cosine, m.compositional_accuracy, m.fid, m.kid_mean, m.kid_std
    )
    .map_err(runtime)?;
    Ok(())
}

fn resolve_run_config(a: &PipelineArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_file(p).map_err(|e| usage(format!("--config {}: {e}", p.display())))?;
    }
    if let Some(t) = &a.taxonomy {
        cfg.taxonomy = Some(t.clone());
    }
    if let Some(o) = a.objective {
        cfg.objective = o;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v).map_err(|e| usage(format!("--set: {e}")))?;
    }
    if let Some(t) = &cfg.taxonomy {
        if !t.is_file() {
            return Err(usage(format!("--taxonomy: file not found: {}", t.display())));
        }
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn pipeline_cmd(a: PipelineArgs, exec: Exec, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let mut log = |line: &str| {
        let _ = writeln!(err, "[pipeline] {line}");
    };
    if let Some(mp) = &a.manifest {
        let manifest = Manifest::load(mp).map_err(runtime)?;
        let dir = a.out.clone().unwrap_or_else(|| default_rerun_dir(mp));
        let (_, diff) = rerun_manifest(&manifest, &dir, exec, &mut log).map_err(runtime)?;
        if diff.is_empty() {
            writeln!(out, "verified: {} artifacts match {}", manifest.artifacts.len(), mp.display()).map_err(runtime)?;
            return Ok(());
        }
        return Err(runtime(format!(
            "digest mismatch: changed {:?}, missing {:?}, extra {:?}",
            diff.changed, diff.missing, diff.extra
        )));
    }
    let cfg = resolve_run_config(&a)?;
    let outcome = run_pipeline(&cfg, exec, &mut log).map_err(runtime)?;
    let m = &outcome.metrics;
    writeln!(
        out,
        "cosine {:.4}  accuracy {:.4}  fid {:.5}  kid {:.5} ± {:.5}  manifest {}",
        m.mean_cosine,
        m.compositional_accuracy,
        m.fid,
        m.kid_mean,
        m.kid_std,
        cfg.out_dir.join(crate::pipeline::MANIFEST_FILE).display()
    )
    .map_err(runtime)?;
    Ok(())
}

fn default_rerun_dir(manifest: &Path) -> PathBuf {
    let parent = manifest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut name = parent.file_name().map(|n| n.to_owned()).unwrap_or_else(|| "run".into());
    name.push("-rerun");
    parent.with_file_name(name)
}
