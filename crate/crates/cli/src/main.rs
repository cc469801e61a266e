//! `shadowpeft`: train, evaluate and inspect shadow-adapted models.
//!
//! A training run writes three files into `--out`:
//! - `checkpoint.bin`, every named tensor in the binary checkpoint format;
//! - `config.toml`, the fully resolved run configuration;
//! - `metrics.jsonl`, one JSON object per evaluation with the fields
//!   `step`, `total`, `base_ce`, `shadow_ce`, `eval_acc`.
//!
//! `eval` and `generate` take such a run directory. Every subcommand is
//! deterministic given the configuration and seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use shadowpeft::checkpoint::{load, save};
use shadowpeft::config::SEED_ENV;
use shadowpeft::crossscale::{head_matrix, pinv_init_projection};
use shadowpeft::metrics::MetricsWriter;
use shadowpeft::numerics::rng::{normal_tensor, stream, Stream};
use shadowpeft::numerics::{from_matrix, to_matrix};
use shadowpeft::pipeline::ForwardCtx;
use shadowpeft::tasks::Target;
use shadowpeft::training::{accuracy, model_gradcheck, train, ParamBudget, MODEL_GRADCHECK_STEP};
use shadowpeft::{AdaptedModel, Method, ParamStore, RunConfig, Tensor};

const CHECKPOINT: &str = "checkpoint.bin";
const CONFIG: &str = "config.toml";
const METRICS: &str = "metrics.jsonl";
const PROJECTION: &str = "projection.bin";

/// Applied before user overrides so the whole-model check stays within
/// finite-difference resolution.
const GRADCHECK_PRESET: &[&str] = &[
    "base.layers=2",
    "base.hidden=8",
    "base.heads=2",
    "base.mlp_width=16",
    "injection.rank=2",
    "task.seq_len=8",
];
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "shadowpeft",
    version,
    about = "Shadow-network PEFT on a frozen toy transformer"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed and the SHADOWPEFT_SEED variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, global = true, value_enum)]
    inference_mode: Option<ModeArg>,
    /// `section.key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// 32-bit parameters and activations.
    #[arg(long, global = true)]
    f32: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Shadow,
    Lora,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Attached,
    Detached,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain and freeze the base, then train the adapter.
    Train,
    /// Accuracy of a trained run on its task's held-out split.
    Eval {
        /// Run directory written by `train`.
        run: PathBuf,
    },
    /// Greedy continuation of a prompt.
    Generate {
        run: PathBuf,
        /// Comma-separated token ids.
        #[arg(long, value_delimiter = ',', required = true)]
        prompt: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
    },
    /// Finite-difference check of the joint loss over every trainable tensor.
    Gradcheck {
        /// Standard deviation of the random values given to trainable
        /// tensors, so zero-initialized adapters do not hide gradients.
        #[arg(long, default_value_t = 0.5)]
        perturb: f64,
        /// Perturbs this tensor's analytic gradient (negative control).
        #[arg(long, value_name = "NAME")]
        corrupt: Option<String>,
    },
    /// Trainable counts per group, enumerated and closed form.
    Params,
    /// Pseudo-inverse projection between the LM heads of two checkpoints.
    PinvInit {
        /// Checkpoint (or run directory) holding the target `base.lm_head`.
        #[arg(long)]
        base: PathBuf,
        /// Checkpoint (or run directory) holding the shadow LM's `base.lm_head`.
        #[arg(long)]
        shadow: PathBuf,
    },
}

impl Cli {
    fn overrides(&self, preset: &[&str]) -> Vec<String> {
        let mut o: Vec<String> = preset.iter().map(|s| s.to_string()).collect();
        o.extend(self.overrides.iter().cloned());
        if let Some(m) = self.method {
            o.push(format!("method={}", m.to_possible_value().expect("named").get_name()));
        }
        if let Some(m) = self.inference_mode {
            o.push(format!(
                "inference_mode={}",
                m.to_possible_value().expect("named").get_name()
            ));
        }
        if self.f32 {
            o.push("precision=f32".into());
        }
        o
    }

    /// `--config` if given, else `fallback`.
    fn load_config(&self, fallback: Option<&Path>, preset: &[&str]) -> Result<RunConfig> {
        let path = self.config.as_deref().or(fallback);
        let env = std::env::var(SEED_ENV).ok();
        Ok(RunConfig::load(
            path,
            &self.overrides(preset),
            env.as_deref(),
            self.seed,
        )?)
    }
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT)
    } else {
        p.to_path_buf()
    }
}

fn print_json(v: serde_json::Value) {
    println!("{v}");
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let cfg = cli.load_config(None, &[])?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut prepared = cfg.prepare()?;
    if let Some(b) = &prepared.budget {
        eprintln!(
            "lora rank {} matched to shadow budget {} ({} params, gap {:.1}%)",
            b.rank,
            b.shadow_count,
            b.lora_count,
            100.0 * b.gap
        );
    }
    std::fs::write(cli.out.join(CONFIG), cfg.to_toml())?;
    let mut writer = MetricsWriter::create(&cli.out.join(METRICS))?;
    let outcome = train(
        &mut prepared.model,
        &prepared.task,
        &cfg.train,
        cfg.seed,
        cfg.inference_mode,
        |rec| {
            println!("{}", rec.to_line());
            writer.write(rec)
        },
    )?;
    save(&cli.out.join(CHECKPOINT), prepared.model.store())?;
    eprintln!(
        "final accuracy {:.4}; wrote {}",
        outcome.final_accuracy,
        cli.out.display()
    );
    Ok(())
}

fn restore(cli: &Cli, run: &Path) -> Result<(RunConfig, AdaptedModel)> {
    let config_file = run.is_dir().then(|| run.join(CONFIG));
    let cfg = cli.load_config(config_file.as_deref(), &[])?;
    let store = load(&checkpoint_path(run)).with_context(|| format!("loading {}", run.display()))?;
    let model = cfg.restore(store)?;
    Ok((cfg, model))
}

fn cmd_eval(cli: &Cli, run: &Path) -> Result<()> {
    let (cfg, model) = restore(cli, run)?;
    let task = cfg.task()?;
    let eval = task.eval_split();
    let mode = cfg.inference_mode;
    let acc = accuracy(&model, &eval, mode)?;
    // one instrumented forward to count base layer calls
    let first = &eval[0];
    let mut tape = model.tape();
    let bound = model.store().bind(&mut tape)?;
    let ctx = ForwardCtx::eval();
    let trace = match &first.target {
        Target::Lm(_) => model.lm_forward(&mut tape, &bound, &first.tokens, &ctx, mode)?.trace,
        Target::Cls { pad_mask, .. } => {
            model
                .cls_forward(&mut tape, &bound, &first.tokens, pad_mask, &ctx, mode)?
                .trace
        }
    };
    if mode == shadowpeft::InferenceMode::Detached && trace.base_layer_calls != 0 {
        bail!("detached forward called {} base layers", trace.base_layer_calls);
    }
    print_json(json!({
        "task": task.id(),
        "inference_mode": mode,
        "accuracy": acc,
        "examples": task.config.eval_size,
        "base_layer_calls": trace.base_layer_calls,
    }));
    Ok(())
}

fn cmd_generate(cli: &Cli, run: &Path, prompt: &[usize], max_new: usize) -> Result<()> {
    let (cfg, model) = restore(cli, run)?;
    let out = model.generate(prompt, max_new, cfg.inference_mode)?;
    let text: Vec<String> = out.iter().map(|t| t.to_string()).collect();
    println!("{}", text.join(","));
    Ok(())
}

/// Replaces every trainable tensor with N(0, std²) draws from the fixture stream.
fn perturb(store: &mut ParamStore, std: f64, seed: u64) {
    for (i, p) in store.iter_mut().enumerate().filter(|(_, p)| p.trainable()) {
        let dtype = p.tensor.dtype();
        let fresh: Tensor = normal_tensor(p.tensor.shape(), std, &mut stream(seed, Stream::Fixture, i as u64, 0));
        p.tensor = fresh.with_requires_grad(true).with_dtype(dtype);
    }
}

fn cmd_gradcheck(cli: &Cli, std: f64, corrupt: Option<&str>) -> Result<bool> {
    let cfg = cli.load_config(None, GRADCHECK_PRESET)?;
    let (store, base) = cfg.init_base()?;
    let (mut model, _) = cfg.attach(store, base)?;
    if std > 0.0 {
        perturb(model.store_mut(), std, cfg.seed);
    }
    let batch = cfg.task()?.train_batch(0, 0, 2);
    let g = model_gradcheck(&model, &batch, cfg.train.lambda, MODEL_GRADCHECK_STEP, corrupt)?;
    let pass = g.report.max_rel_err < GRADCHECK_TOL;
    print_json(json!({
        "pass": pass,
        "max_rel_err": g.report.max_rel_err,
        "tolerance": GRADCHECK_TOL,
        "step": MODEL_GRADCHECK_STEP,
        "worst_tensor": g.worst_name(),
        "tensors": g.names.len(),
        "elements": model.store().trainable_count(),
    }));
    if !pass {
        eprintln!(
            "gradient check failed: max rel err {:.3e} in {}",
            g.report.max_rel_err,
            g.worst_name().unwrap_or("?")
        );
    }
    Ok(pass)
}

fn cmd_params(cli: &Cli) -> Result<bool> {
    let cfg = cli.load_config(None, &[])?;
    let (store, base) = cfg.init_base()?;
    let (model, _) = cfg.attach(store, base)?;
    let enumerated = ParamBudget::enumerate(model.store());
    let closed = match model.method() {
        Method::Shadow => ParamBudget::shadow_closed_form(&cfg.base, &cfg.settings()?),
        Method::Lora => ParamBudget::lora_closed_form(&cfg.base, cfg.lora_rank()?.0),
    };
    let rows = [
        ("injection", enumerated.injection, closed.injection),
        ("update", enumerated.update, closed.update),
        ("shadow_backbone", enumerated.shadow_backbone, closed.shadow_backbone),
        ("projection", enumerated.projection, closed.projection),
        ("heads", enumerated.heads, closed.heads),
        ("lora", enumerated.lora, closed.lora),
        ("other", enumerated.other, closed.other),
        ("total", enumerated.total(), closed.total()),
    ];
    println!("{:<16} {:>12} {:>12}", "group", "enumerated", "formula");
    for (name, e, c) in rows {
        let flag = if e == c { "" } else { "  MISMATCH" };
        println!("{name:<16} {e:>12} {c:>12}{flag}");
    }
    Ok(enumerated == closed)
}

fn lm_head(path: &Path) -> Result<Tensor> {
    let store = load(&checkpoint_path(path)).with_context(|| format!("loading {}", path.display()))?;
    let id = store.id("base.lm_head")?;
    Ok(head_matrix(&store, id)?)
}

fn cmd_pinv_init(cli: &Cli, base: &Path, shadow: &Path) -> Result<()> {
    let w_lm = lm_head(base)?;
    let w_ref = lm_head(shadow)?;
    let init = pinv_init_projection(&w_lm, &w_ref)?;
    std::fs::create_dir_all(&cli.out)?;
    let mut store = ParamStore::new();
    // stored as Pᵀ, [d_s, d_t], matching `shadow.proj`
    let pt = from_matrix(&to_matrix(&init.p)?.transpose());
    store.insert("shadow.proj", pt, true)?;
    let path = cli.out.join(PROJECTION);
    save(&path, &store)?;
    print_json(json!({
        "projection": path.display().to_string(),
        "shape": init.p.shape(),
        "residual": init.residual,
        "relative_residual": init.residual / init.ref_norm.max(f64::MIN_POSITIVE),
        "lm_norm": init.lm_norm,
        "ref_norm": init.ref_norm,
    }));
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train => cmd_train(cli).map(|_| true),
        Command::Eval { run } => cmd_eval(cli, run).map(|_| true),
        Command::Generate { run, prompt, max_new } => cmd_generate(cli, run, prompt, *max_new).map(|_| true),
        Command::Gradcheck { perturb, corrupt } => cmd_gradcheck(cli, *perturb, corrupt.as_deref()),
        Command::Params => cmd_params(cli),
        Command::PinvInit { base, shadow } => cmd_pinv_init(cli, base, shadow).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
