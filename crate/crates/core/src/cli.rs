//! The `mom` command line: `train`, `profile`, `trace` and `analyze`.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use mom_tensor::no_grad;

use crate::analysis;
use crate::config::{ChunkPlan, ModelConfig, MomConfig};
use crate::io::{checkpoint, Corpus, RunConfig};
use crate::model::{ModelSpec, MomModel};
use crate::profiler::{self, Assume, CostQuery, CostReport};
use crate::routing::{Kind, RouterKind};
use crate::training::{decompose_vanilla, train_phase, TrainConfig};
use crate::MomError;

#[derive(Debug, Parser)]
#[command(name = "mom", about = "Mixture-of-Modules language models", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model. Without --phase a MoM is trained from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// 1 trains the vanilla warm-up model, 2 decomposes it into a MoM and continues.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: Option<u8>,
        /// Phase-1 checkpoint to start phase 2 from.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Analytical parameter, FLOP and memory estimates.
    Profile {
        /// Preset name or `d=..,heads=..,d_ff=..,len=..,vocab=..`.
        #[arg(long)]
        dims: String,
        #[arg(long)]
        plan: String,
        #[arg(long)]
        mom: String,
        #[arg(long)]
        seq_len: Option<usize>,
        /// Configuration to report percentage deltas against.
        #[arg(long)]
        baseline: Option<String>,
        /// `no_skip`, `all_skip` or `expected:<p>`.
        #[arg(long, default_value = "no_skip")]
        assume: String,
        #[arg(long, default_value = "gru")]
        router: String,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Record per-token routing decisions for a text file.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sequence length (defaults to the model's max_len).
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Transition matrices and module loads from a trace CSV.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        /// Directory for transitions.csv and loads.csv (defaults to the trace's directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Mom(#[from] MomError),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Mom(MomError::Config(_) | MomError::Parse { .. }) => 2,
            CliError::Mom(_) => 3,
        }
    }
}

type CliResult = std::result::Result<(), CliError>;

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            phase,
            init_from,
        } => train(&config, phase, init_from.as_deref(), out),
        Command::Profile {
            dims,
            plan,
            mom,
            seq_len,
            baseline,
            assume,
            router,
            csv,
        } => profile(&dims, &plan, &mom, seq_len, baseline.as_deref(), &assume, &router, csv.as_deref(), out),
        Command::Trace {
            ckpt,
            input,
            out: path,
            seq_len,
        } => trace(&ckpt, &input, &path, seq_len, out),
        Command::Analyze { trace, out_dir } => analyze(&trace, out_dir.as_deref(), out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> CliResult {
    writeln!(out, "{text}").map_err(|e| MomError::io("<stdout>", e))?;
    Ok(())
}

fn train(config: &Path, phase: Option<u8>, init_from: Option<&Path>, out: &mut dyn Write) -> CliResult {
    if phase == Some(2) && init_from.is_none() {
        return Err(CliError::Usage("--phase 2 requires --init-from <phase-1 checkpoint>".into()));
    }
    if phase != Some(2) && init_from.is_some() {
        return Err(CliError::Usage("--init-from is only used with --phase 2".into()));
    }
    let rc = RunConfig::load(config)?;
    let corpus = Corpus::load(&rc.corpus, rc.train.seq_len, rc.val_fraction, rc.train.seed)?;
    fs::create_dir_all(&rc.out_dir).map_err(|e| MomError::io(&rc.out_dir, e))?;

    let (model, name, cfg, phase_no) = match phase {
        Some(1) => {
            let spec = ModelSpec::vanilla(rc.model.config, rc.model.plan.layer_count(), rc.model.dtype);
            (MomModel::new(spec, rc.train.seed)?, "phase1", rc.train.clone(), 1)
        }
        Some(_) => {
            let (vanilla, _) = checkpoint::load_model(init_from.expect("checked above"))?;
            let model = decompose_vanilla(&vanilla, rc.model.clone(), rc.train.seed)?;
            let cfg = TrainConfig {
                total_steps: rc.phase2_steps,
                ..rc.train.clone()
            };
            (model, "phase2", cfg, 2)
        }
        None => (MomModel::new(rc.model.clone(), rc.train.seed)?, "scratch", rc.train.clone(), 1),
    };

    let ckpt_path = rc.out_dir.join(format!("{name}.ckpt"));
    let log_path = rc.out_dir.join(format!("{name}.metrics.log"));
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| MomError::io(&log_path, e))?;
    let meta = vec![("phase".to_string(), name.to_string())];
    let mut hook = |m: &MomModel, step: usize| {
        let mut meta = meta.clone();
        meta.push(("step".into(), step.to_string()));
        checkpoint::save_model(m, &ckpt_path, &meta)
    };
    let result = train_phase(&model, &corpus, &cfg, phase_no, &mut log, Some(&mut hook))?;
    let mut meta = meta.clone();
    meta.push(("step".into(), cfg.total_steps.to_string()));
    checkpoint::save_model(&model, &ckpt_path, &meta)?;
    match result.final_val_loss() {
        Some(v) => write_out(out, &format!("{name}: final val_loss={v:.6}"))?,
        None => write_out(out, &format!("{name}: no steps run"))?,
    }
    write_out(
        out,
        &format!(
            "unigram entropy baseline={:.6}\ncheckpoint {}\nmetrics {}",
            corpus.unigram_entropy(),
            ckpt_path.display(),
            log_path.display()
        ),
    )
}

fn parse_assume(s: &str) -> Result<Assume, MomError> {
    match s {
        "no_skip" => Ok(Assume::NoSkip),
        "all_skip" => Ok(Assume::AllSkip),
        _ => s
            .strip_prefix("expected:")
            .and_then(|p| p.parse().ok())
            .map(Assume::Expected)
            .ok_or_else(|| MomError::Config(format!("--assume must be no_skip, all_skip or expected:<p>, got {s:?}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn profile(
    dims: &str,
    plan: &str,
    mom: &str,
    seq_len: Option<usize>,
    baseline: Option<&str>,
    assume: &str,
    router: &str,
    csv: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult {
    let config = ModelConfig::parse_dims(dims)?;
    let plan: ChunkPlan = plan.parse()?;
    let router: RouterKind = router.parse()?;
    let assume = parse_assume(assume)?;
    let seq_len = seq_len.unwrap_or(config.max_len);
    let query = |m: &str| -> Result<CostReport, MomError> {
        let mom: MomConfig = m.parse()?;
        let mut q = CostQuery::new(config, plan.clone(), mom, seq_len);
        q.spec.router = router;
        q.assume = assume;
        profiler::estimate(&q)
    };
    let report = query(mom)?;
    write_out(out, &report.to_string())?;
    write_out(
        out,
        &format!(
            "backbone params {}  router params {}  router TFLOPs {:.4} (not included above)",
            report.backbone_params(),
            report.router_params,
            report.router_flops / 1e12
        ),
    )?;
    let mut reports = vec![report];
    if let Some(b) = baseline {
        let base = query(b)?;
        write_out(out, &format!("baseline {}", profiler::comparison_line(&base, &base)))?;
        write_out(out, &format!("config   {}", profiler::comparison_line(&reports[0], &base)))?;
        reports.push(base);
    }
    if let Some(path) = csv {
        let mut text = String::from(CostReport::csv_header());
        text.push('\n');
        for r in &reports {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| MomError::io(path, e))?;
    }
    Ok(())
}

fn trace(ckpt: &Path, input: &Path, path: &Path, seq_len: Option<usize>, out: &mut dyn Write) -> CliResult {
    let (model, _) = checkpoint::load_model(ckpt)?;
    let bytes = fs::read(input).map_err(|e| MomError::io(input, e))?;
    if bytes.is_empty() {
        return Err(MomError::Data(format!("{} is empty", input.display())).into());
    }
    let cfg = model.config();
    if let Some(&b) = bytes.iter().find(|&&b| (b as usize) >= cfg.vocab) {
        return Err(MomError::Data(format!("byte {b} does not fit a vocabulary of {}", cfg.vocab)).into());
    }
    let len = seq_len.unwrap_or(cfg.max_len).min(bytes.len());
    if len == 0 || len > cfg.max_len {
        return Err(MomError::Config(format!("--seq-len must be between 1 and {}", cfg.max_len)).into());
    }
    let batch = bytes.len() / len;
    let tokens = crate::io::corpus::byte_ids(&bytes[..batch * len]);
    let (_, t) = no_grad(|| model.forward(&tokens, batch))?;
    let records = analysis::records_from_trace(&t);
    let mut buf = Vec::new();
    analysis::write_trace_csv(&mut buf, &records)?;
    fs::write(path, buf).map_err(|e| MomError::io(path, e))?;
    write_out(
        out,
        &format!("{} records for {batch} sequences of {len} tokens -> {}", records.len(), path.display()),
    )
}

fn analyze(trace: &Path, out_dir: Option<&Path>, out: &mut dyn Write) -> CliResult {
    let file = fs::File::open(trace).map_err(|e| MomError::io(trace, e))?;
    let records = analysis::read_trace_csv(file)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| trace.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&dir).map_err(|e| MomError::io(&dir, e))?;
    let mut matrices = Vec::new();
    for kind in [Kind::Attention, Kind::Ffn] {
        if records.iter().any(|r| r.kind == kind) {
            let m = analysis::transition_matrix(&records, kind)?;
            let empty: Vec<String> = (0..m.size()).filter(|&i| !m.is_supported(i)).map(|i| i.to_string()).collect();
            if !empty.is_empty() {
                write_out(out, &format!("{kind}: rows without support: {}", empty.join(" ")))?;
            }
            matrices.push(m);
        }
    }
    let loads = analysis::load_stats(&records)?;
    for l in &loads {
        write_out(out, &format!("{}: skip rate {:.4}", l.kind, l.skip_rate))?;
    }
    let tpath = dir.join("transitions.csv");
    let lpath = dir.join("loads.csv");
    let mut buf = Vec::new();
    analysis::write_transitions_csv(&mut buf, &matrices)?;
    fs::write(&tpath, buf).map_err(|e| MomError::io(&tpath, e))?;
    let mut buf = Vec::new();
    analysis::write_loads_csv(&mut buf, &loads)?;
    fs::write(&lpath, buf).map_err(|e| MomError::io(&lpath, e))?;
    write_out(out, &format!("wrote {} and {}", tpath.display(), lpath.display()))
}
