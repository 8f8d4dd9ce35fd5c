//! `procdit` command-line front end.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use procdit_core::agent::{refine_recipe, AgentMode};
use procdit_core::dit::{
    load_checkpoint, load_outputs, make_synthetic_dataset, sample, save_checkpoint, train_with, write_outputs,
    DitModel, Manifest, ModelConfig, SyntheticRecipe, TrainOptions,
};
use procdit_core::llm::Endpoint;
use procdit_core::metrics::{
    aggregate, evaluate_sequence, Embedder, EndpointEmbedder, LlmScorer, MetricReport, ToyEmbedder,
};
use procdit_core::regional::{build_step_mask, RegionalMask, StepMask};
use procdit_core::rope::RopeMode;
use procdit_core::text::{strip_step_tag, RecipeSpec};
use procdit_core::Error;
use serde_json::{json, Value};

use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// Unreadable or malformed input files.
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Core(Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input(_) => EXIT_IO,
            CliError::Core(e) => match e {
                Error::Io(_) | Error::Image(_) | Error::Schema(_) | Error::Checkpoint(_) => EXIT_IO,
                _ => EXIT_RUNTIME,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Input(_) => "input",
            CliError::Core(e) => e.kind(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "procdit",
    version,
    about = "Generate step-by-step image sequences with a small regional diffusion transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one image per recipe step from a single joint trajectory.
    Generate(GenerateArgs),
    /// Train a model with flow matching and write a checkpoint.
    Train(TrainArgs),
    /// Score generated sequences against references.
    Eval(EvalArgs),
    /// Print the step-region attention mask for given sizes.
    InspectMask(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    StepRegional,
    AllOnes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RopeArg {
    Flexible,
    Original,
}

impl From<RopeArg> for RopeMode {
    fn from(r: RopeArg) -> Self {
        match r {
            RopeArg::Flexible => RopeMode::Flexible,
            RopeArg::Original => RopeMode::Original,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Recipe JSON: {goal, summary?, steps: [{text, ingredients?}]}.
    pub recipe: Option<PathBuf>,
    /// Trained checkpoint to sample from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sample from random weights instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub untrained: bool,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the whole-description pass, in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of contextual step tokens, in [0, 1].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Sampler steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Recipe refinement before sampling: off, mock or an endpoint URL.
    #[arg(long)]
    pub agent: Option<String>,
    /// Disable cross-step context fusion of step tokens.
    #[arg(long)]
    pub no_cscc: bool,
    /// Attention mask of the regional pass.
    #[arg(long, value_enum)]
    pub mask: Option<MaskArg>,
    /// Position scheme for latent tokens in both passes.
    #[arg(long, value_enum)]
    pub rope: Option<RopeArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `synthetic:seed=S,count=C[,max_steps=M]` or a directory of sequences.
    #[arg(long)]
    pub dataset: String,
    /// Optimizer steps.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Checkpoint path; the loss log goes next to it as `<out>.log.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    /// Reuse one noise draw per example.
    #[arg(long)]
    pub fixed_noise: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A sequence directory (with manifest.json) or a directory of them.
    #[arg(long)]
    pub generated: PathBuf,
    /// Reference sequence(s), matched to generated ones by directory name.
    #[arg(long)]
    pub reference: PathBuf,
    /// `builtin` or an embedding endpoint URL.
    #[arg(long, default_value = "builtin")]
    pub embedder: String,
    /// Chat-model scoring: off, mock or an endpoint URL.
    #[arg(long, default_value = "off")]
    pub llm: String,
    /// Seed of the builtin embedder and the mock scorer.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Number of steps N.
    #[arg(long)]
    pub steps: usize,
    /// Text tokens per step: one value for all steps or N comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub text_lens: Vec<usize>,
    /// Latent tokens per region.
    #[arg(long)]
    pub region_tokens: usize,
    /// Machine-readable output.
    #[arg(long)]
    pub json: bool,
    /// Show the all-ones mask used by the whole-description pass instead.
    #[arg(long)]
    pub all_ones: bool,
    /// Also write the token-level matrix as a plain PBM image.
    #[arg(long)]
    pub token_pbm: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Train(a) => cmd_train(&a, out, err),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::InspectMask(a) => cmd_inspect_mask(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let report = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            let _ = writeln!(err, "{report}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn read_recipe(path: &Path) -> CliResult<RecipeSpec> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    RecipeSpec::from_json(&text).map_err(|e| match e {
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())).into(),
        other => other.into(),
    })
}

fn agent_mode(spec: &str) -> CliResult<Option<AgentMode>> {
    match spec {
        "off" => Ok(None),
        "mock" => Ok(Some(AgentMode::Mock)),
        url if url.starts_with("http://") || url.starts_with("https://") => {
            Ok(Some(AgentMode::Live(Endpoint::from_env(url))))
        }
        other => Err(CliError::Usage(format!("expected off, mock or a URL, got {other:?}"))),
    }
}

fn scorer(spec: &str, seed: u64) -> CliResult<Option<LlmScorer>> {
    Ok(agent_mode(spec)?.map(|m| match m {
        AgentMode::Mock => LlmScorer::Mock { seed },
        AgentMode::Live(e) => LlmScorer::Live(e),
    }))
}

fn embedder(spec: &str, seed: u64) -> CliResult<Box<dyn Embedder>> {
    match spec {
        "builtin" => Ok(Box::new(ToyEmbedder::new(seed))),
        url if url.starts_with("http://") || url.starts_with("https://") => Ok(Box::new(EndpointEmbedder::new(url))),
        other => Err(CliError::Usage(format!("expected builtin or a URL, got {other:?}"))),
    }
}

/// Overrides sampling settings of `model` with the file and flag values.
fn apply_sampling(model: &mut ModelConfig, file: &ModelConfig, a: &GenerateArgs, from_file: bool) {
    if from_file {
        let keep = model.clone();
        *model = ModelConfig {
            hidden: keep.hidden,
            heads: keep.heads,
            head_dim: keep.head_dim,
            depth: keep.depth,
            mlp_ratio: keep.mlp_ratio,
            patch_size: keep.patch_size,
            region_height: keep.region_height,
            region_width: keep.region_width,
            channels: keep.channels,
            text_encoder: keep.text_encoder,
            text_seed: keep.text_seed,
            ..file.clone()
        };
    }
    if let Some(s) = a.seed {
        model.seed = s;
    }
    if let Some(x) = a.alpha {
        model.alpha = x;
    }
    if let Some(x) = a.lambda {
        model.lambda = x;
    }
    if let Some(t) = a.steps {
        model.sampler_steps = t;
    }
    if a.no_cscc {
        model.cscc = false;
    }
    if let Some(m) = a.mask {
        model.regional_mask = match m {
            MaskArg::StepRegional => RegionalMask::StepRegional,
            MaskArg::AllOnes => RegionalMask::AllOnes,
        };
    }
    if let Some(r) = a.rope {
        model.regional_rope = r.into();
        model.base_rope = r.into();
    }
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> CliResult<()> {
    let run = load_config(a.config.as_deref())?;
    let recipe_path = a
        .recipe
        .clone()
        .or(run.recipe.clone())
        .ok_or_else(|| CliError::Usage("a recipe file is required".into()))?;
    let out_dir = a
        .out
        .clone()
        .or(run.out.clone())
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let checkpoint = a.checkpoint.clone().or(run.checkpoint.clone());
    if checkpoint.is_none() && !a.untrained {
        return Err(CliError::Usage(
            "pass --checkpoint, or --untrained to sample from random weights".into(),
        ));
    }
    let recipe = read_recipe(&recipe_path)?;

    let mut model = match checkpoint.as_deref().filter(|_| !a.untrained) {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if a.config.is_some() && run.model.architecture_hash() != ckpt.model.config.architecture_hash() {
                return Err(Error::Checkpoint(format!(
                    "{} does not match the architecture in the configuration file",
                    path.display()
                ))
                .into());
            }
            ckpt.model
        }
        None => {
            let mut cfg = run.model.clone();
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            DitModel::random(cfg)?
        }
    };
    let file_model = run.model.clone();
    apply_sampling(&mut model.config, &file_model, a, a.config.is_some());
    model.config.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let agent = a.agent.clone().or(run.agent.clone()).unwrap_or_else(|| "off".into());
    let recipe = match agent_mode(&agent)? {
        Some(mode) => refine_recipe(&recipe, &mode)?,
        None => recipe,
    };
    let result = sample(&model, &recipe, model.config.seed)?;
    let written = write_outputs(&out_dir, &result)?;
    let summary = json!({
        "out": written.dir,
        "images": written.manifest.per_step_files.len(),
        "manifest": written.manifest_file,
        "strip": written.strip_file,
        "base_only": written.manifest.base_only,
    });
    writeln!(out, "{summary}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(())
}

/// Parses `synthetic:seed=S,count=C[,max_steps=M]`.
pub fn parse_synthetic(spec: &str) -> CliResult<(u64, usize, usize)> {
    let body = spec
        .strip_prefix("synthetic:")
        .ok_or_else(|| CliError::Usage(format!("not a synthetic dataset spec: {spec}")))?;
    let (mut seed, mut count, mut max_steps) = (None, None, 5);
    for part in body.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value in dataset spec, got {part:?}")))?;
        let bad = |_| CliError::Usage(format!("invalid value for {k}: {v:?}"));
        match k.trim() {
            "seed" => seed = Some(v.trim().parse().map_err(bad)?),
            "count" => count = Some(v.trim().parse().map_err(bad)?),
            "max_steps" => max_steps = v.trim().parse().map_err(bad)?,
            other => return Err(CliError::Usage(format!("unknown dataset key {other:?}"))),
        }
    }
    let seed = seed.ok_or_else(|| CliError::Usage("dataset spec needs seed=".into()))?;
    let count = count.ok_or_else(|| CliError::Usage("dataset spec needs count=".into()))?;
    if count == 0 || max_steps < 2 {
        return Err(CliError::Usage("dataset needs count >= 1 and max_steps >= 2".into()));
    }
    Ok((seed, count, max_steps))
}

/// Sequence directories: `dir` itself if it holds a manifest, otherwise its
/// subdirectories that do, sorted by name.
fn sequence_dirs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if dir.join(procdit_core::dit::MANIFEST_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(procdit_core::dit::MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no manifest.json found"),
        ));
    }
    Ok(dirs)
}

fn load_dataset_dir(dir: &Path) -> CliResult<Vec<SyntheticRecipe>> {
    sequence_dirs(dir)?
        .iter()
        .map(|d| {
            let (manifest, images) = load_outputs(d)?;
            let images = images
                .iter()
                .map(|i| procdit_core::dit::image_to_tensor(i, 3))
                .collect::<Result<Vec<_>, _>>()?;
            if images.len() != manifest.recipe.steps.len() {
                return Err(Error::Schema(format!(
                    "{}: {} images for {} steps",
                    d.display(),
                    images.len(),
                    manifest.recipe.steps.len()
                ))
                .into());
            }
            Ok(SyntheticRecipe {
                recipe: manifest.recipe,
                primitives: Vec::new(),
                images,
            })
        })
        .collect()
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let run = load_config(a.config.as_deref())?;
    let mut model = match &a.resume {
        Some(path) => load_checkpoint(path)?.model,
        None => {
            let mut cfg = run.model.clone();
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            DitModel::initialized(cfg)?
        }
    };
    let cfg = model.config.clone();
    let dataset = if a.dataset.starts_with("synthetic:") {
        let (seed, count, max_steps) = parse_synthetic(&a.dataset)?;
        make_synthetic_dataset(seed, count, max_steps, cfg.region_height, cfg.region_width)
    } else {
        load_dataset_dir(Path::new(&a.dataset))?
    };
    let opts = TrainOptions {
        steps: a.steps,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        log_every: a.log_every,
        seed: a.seed.unwrap_or(cfg.seed),
        fixed_noise: a.fixed_noise,
        ..Default::default()
    };
    let report = train_with(&mut model, &dataset, &opts, |p| {
        let _ = writeln!(
            err,
            "{}",
            json!({"step": p.step, "loss": p.loss, "grad_norm": p.grad_norm})
        );
    })?;
    save_checkpoint(&a.out, &model, a.steps)?;
    let mut log_path = a.out.clone().into_os_string();
    log_path.push(".log.json");
    let log_path = PathBuf::from(log_path);
    let log = serde_json::to_string_pretty(&report).map_err(|e| Error::Schema(e.to_string()))?;
    fs::write(&log_path, log).map_err(|e| CliError::io(&log_path, e))?;
    let summary = json!({
        "checkpoint": a.out,
        "loss_log": log_path,
        "steps": a.steps,
        "initial_eval": report.initial_eval,
        "final_eval": report.final_eval,
    });
    writeln!(out, "{summary}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(())
}

fn captions(manifest: &Manifest) -> Vec<String> {
    manifest
        .recipe
        .steps
        .iter()
        .map(|s| strip_step_tag(&s.text).to_string())
        .collect()
}

/// Evaluates every generated sequence against its reference.
pub fn evaluate_dirs(
    generated: &Path,
    reference: &Path,
    embedder: &dyn Embedder,
    scorer: Option<&LlmScorer>,
) -> CliResult<Value> {
    let gen_dirs = sequence_dirs(generated)?;
    let single = gen_dirs.len() == 1 && gen_dirs[0] == generated;
    let mut reports: Vec<MetricReport> = Vec::new();
    for g in &gen_dirs {
        let r = if single {
            reference.to_path_buf()
        } else {
            reference.join(g.file_name().unwrap_or_default())
        };
        let (manifest, images) = load_outputs(g)?;
        let (_, ref_images) = load_outputs(&r)?;
        let id = g
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        reports.push(evaluate_sequence(
            &id,
            &images,
            &captions(&manifest),
            &ref_images,
            embedder,
            scorer,
        )?);
    }
    let agg = aggregate(&reports)?;
    Ok(json!({"reports": reports, "aggregate": agg}))
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let emb = embedder(&a.embedder, a.seed)?;
    let scorer = scorer(&a.llm, a.seed)?;
    let report = evaluate_dirs(&a.generated, &a.reference, emb.as_ref(), scorer.as_ref())?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Schema(e.to_string()))?;
    match &a.out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::io(path, e))?,
        None => writeln!(out, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?,
    }
    Ok(())
}

/// The mask described by inspect-mask flags.
pub fn inspect_mask(a: &InspectArgs) -> CliResult<StepMask> {
    let lens = match a.text_lens.as_slice() {
        [one] => vec![*one; a.steps],
        many if many.len() == a.steps => many.to_vec(),
        many => {
            return Err(CliError::Usage(format!(
                "--text-lens has {} values for {} steps",
                many.len(),
                a.steps
            )))
        }
    };
    let regions = vec![a.region_tokens; a.steps];
    let mask = if a.all_ones {
        StepMask::all_ones(&lens, &regions)
    } else {
        build_step_mask(&lens, &regions)
    };
    mask.map_err(|e| CliError::Usage(e.to_string()))
}

fn kind_label(kind: procdit_core::regional::BlockKind) -> String {
    use procdit_core::regional::BlockKind::*;
    match kind {
        StepText(n) => format!("step_text[{n}]"),
        RecipeText => "recipe_text".into(),
        Region(n) => format!("region[{n}]"),
        Latents => "latents".into(),
    }
}

fn cmd_inspect_mask(a: &InspectArgs, out: &mut dyn Write) -> CliResult<()> {
    let mask = inspect_mask(a)?;
    let b = mask.block_matrix();
    let t = mask.token_matrix();
    let rows: Vec<Vec<u8>> = (0..b.rows())
        .map(|i| (0..b.cols()).map(|j| b.get(i, j) as u8).collect())
        .collect();
    let row_sums: Vec<usize> = mask.extents().iter().map(|e| t.row_count(e.offset)).collect();
    let allowed: usize = (0..t.rows()).map(|r| t.row_count(r)).sum();
    if let Some(path) = &a.token_pbm {
        let mut pbm = format!("P1\n{} {}\n", t.cols(), t.rows());
        for r in 0..t.rows() {
            let line: Vec<&str> = (0..t.cols()).map(|c| if t.get(r, c) { "1" } else { "0" }).collect();
            pbm.push_str(&line.join(" "));
            pbm.push('\n');
        }
        fs::write(path, pbm).map_err(|e| CliError::io(path, e))?;
    }
    let io = |e| CliError::io(Path::new("<stdout>"), e);
    if a.json {
        let extents: Vec<Value> = mask
            .extents()
            .iter()
            .zip(&row_sums)
            .map(|(e, s)| json!({"block": kind_label(e.kind), "offset": e.offset, "len": e.len, "row_sum": s}))
            .collect();
        let doc = json!({
            "steps": a.steps,
            "block_matrix": rows,
            "extents": extents,
            "total_tokens": mask.total_tokens(),
            "allowed_pairs": allowed,
            "symmetric": t.is_symmetric(),
        });
        writeln!(out, "{doc}").map_err(io)?;
    } else {
        writeln!(out, "block matrix ({0}x{0}):", b.rows()).map_err(io)?;
        for r in &rows {
            let line: Vec<String> = r.iter().map(u8::to_string).collect();
            writeln!(out, "  {}", line.join(" ")).map_err(io)?;
        }
        writeln!(out, "blocks:").map_err(io)?;
        for (e, s) in mask.extents().iter().zip(&row_sums) {
            writeln!(
                out,
                "  {:<14} offset {:>5}  len {:>5}  row_sum {:>5}",
                kind_label(e.kind),
                e.offset,
                e.len,
                s
            )
            .map_err(io)?;
        }
        writeln!(
            out,
            "tokens: {} total, {} allowed pairs of {}",
            mask.total_tokens(),
            allowed,
            mask.total_tokens() * mask.total_tokens()
        )
        .map_err(io)?;
    }
    Ok(())
}
