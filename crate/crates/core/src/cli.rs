//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for bad arguments (usage is printed), 2 when
//! a command fails at runtime.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::assignment::{manhattan_cost, solve_lap, MatchStrategy};
use crate::checkpoint::{examples_to_checkpoint, load_params, save_params};
use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{decode_vision_tokens, ModelParameters, Role};
use crate::pipeline::{
    distill_record, sft_record, train_distill, train_teacher, MetricsRecord,
};

#[derive(Debug, Parser)]
#[command(name = "emkd", version, about = "Toy EM-KD distillation for compressed-vision decoders")]
pub struct Cli {
    /// JSON run configuration; absent keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the selected command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a generated split to a binary dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        /// Number of examples; defaults to the whole split.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the teacher with cross-entropy only.
    TrainTeacher {
        #[arg(long)]
        out: PathBuf,
        /// Metrics log; defaults to the checkpoint path with `.metrics.jsonl`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Distill a student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Print one metrics record for a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Score a student against this teacher with the distill weights.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Print the top-k vocabulary entries of every vision token.
    InspectVision {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        example_index: usize,
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
    /// Print teacher-student vision token assignments as JSON.
    MatchDump {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// A single eval example; defaults to the whole eval split.
        #[arg(long)]
        example_index: Option<usize>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn metrics_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| out.with_extension("metrics.jsonl"))
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn load_role(path: &Path, role: Role) -> Result<(ModelParameters, usize)> {
    let (p, step) = load_params(path)?;
    if p.config.role != role {
        return Err(Error::Config(format!(
            "{} holds a {:?} model, expected {role:?}",
            path.display(),
            p.config.role
        )));
    }
    Ok((p, step))
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData { out: path, split, count } => {
            if let Some(s) = cli.seed {
                cfg.data.base_seed = s;
            }
            let ds = Dataset::new(cfg.data.clone())?;
            let split = Split::from(*split);
            let n = count.unwrap_or(ds.split_len(split));
            let examples = (0..n)
                .map(|i| ds.generate_example(split, i))
                .collect::<Result<Vec<_>>>()?;
            examples_to_checkpoint(split, &examples).save(path)?;
        }
        Command::TrainTeacher { out: path, metrics } => {
            if let Some(s) = cli.seed {
                cfg.teacher_training.seed = s;
            }
            cfg.validate()?;
            let ds = Dataset::new(cfg.data.clone())?;
            let init = ModelParameters::init(&cfg.model_teacher, cfg.teacher_training.seed)?;
            let (params, records) = train_teacher(init, &ds, &cfg.teacher_training)?;
            save_params(&params, cfg.teacher_training.steps, path)?;
            write_metrics(&metrics_path(metrics, path), &records)?;
        }
        Command::Distill { teacher, out: path, metrics } => {
            if let Some(s) = cli.seed {
                cfg.distill.seed = s;
            }
            cfg.validate()?;
            let ds = Dataset::new(cfg.data.clone())?;
            let (teacher, _) = load_role(teacher, Role::Teacher)?;
            let init = ModelParameters::init(&cfg.model_student, cfg.distill.seed)?;
            let (student, records) = train_distill(&teacher, init, &ds, &cfg.distill)?;
            save_params(&student, cfg.distill.steps, path)?;
            write_metrics(&metrics_path(metrics, path), &records)?;
        }
        Command::Eval { model, teacher } => {
            let start = Instant::now();
            let ds = Dataset::new(cfg.data.clone())?;
            let (params, step) = load_params(model)?;
            let mut record = match teacher {
                Some(t) => {
                    let (teacher, _) = load_role(t, Role::Teacher)?;
                    distill_record(&teacher, &params, &ds, &cfg.distill, step, 0)?
                }
                None => sft_record(&params, &ds, cfg.teacher_training.batch_size, step, 0)?,
            };
            record.ms = start.elapsed().as_millis() as u64;
            writeln!(out, "{}", serde_json::to_string(&record)?)?;
        }
        Command::InspectVision { model, example_index, topk } => {
            let ds = Dataset::new(cfg.data.clone())?;
            let (params, _) = load_params(model)?;
            let ex = ds.generate_example(Split::Eval, *example_index)?;
            let decoded = decode_vision_tokens(&params, &ex, *topk)?;
            let cols = params.config.vision_tokens_out[1];
            for (i, top) in decoded.iter().enumerate() {
                let line = json!({ "row": i / cols, "col": i % cols, "top": top });
                writeln!(out, "{line}")?;
            }
        }
        Command::MatchDump { teacher, model, example_index } => {
            let ds = Dataset::new(cfg.data.clone())?;
            let (teacher, _) = load_params(teacher)?;
            let (student, _) = load_params(model)?;
            let indices: Vec<usize> = match example_index {
                Some(i) => vec![*i],
                None => (0..ds.split_len(Split::Eval)).collect(),
            };
            let hidden = cfg.distill.matcher == MatchStrategy::HungarianHidden;
            let mut dump = Vec::with_capacity(indices.len());
            for i in indices {
                let ex = ds.generate_example(Split::Eval, i)?;
                let (to, so) = (teacher.forward(&ex)?, student.forward(&ex)?);
                let (t, s) = if hidden {
                    (to.vision_hidden.value(), so.vision_hidden.value())
                } else {
                    (to.vision_logits.value(), so.vision_logits.value())
                };
                let a = solve_lap(&manhattan_cost(t, s)?)?;
                dump.push(json!({ "example": i, "pairs": a.pairs, "total_cost": a.total_cost }));
            }
            writeln!(out, "{}", serde_json::to_string(&dump)?)?;
        }
    }
    Ok(())
}
