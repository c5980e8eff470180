use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use relic_core::datagen::{generate_content_style, serialize_dataset, ContentStyleConfig};
use relic_core::harness::{
    hex, run_eval, run_pretrain, run_verify, Checkpoint, EvalKind, RunConfig, RunOptions, VerifyMode, VerifyOptions,
    CONFIG_FILE,
};
use relic_core::{Error, Result};

#[derive(Parser)]
#[command(name = "relic-lab", version, about = "Invariant-prediction self-supervised learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; unspecified keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Force the bit-reproducible single-threaded path.
    #[arg(long)]
    single_thread: bool,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Preset {
    Simclr,
    Relic,
    AmdimStyle,
    ByolStyle,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Simclr => "simclr",
            Preset::Relic => "relic",
            Preset::AmdimStyle => "amdim_style",
            Preset::ByolStyle => "byol_style",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic content/style dataset to a file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Train an encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop before this step, leaving a checkpoint.
        #[arg(long)]
        stop_at: Option<u64>,
        /// Override optimizer.total_steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate a checkpoint's frozen encoder.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_kind)]
        kind: EvalKind,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test set file overriding the configured one.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Brute-force and finite-difference verification.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode)]
        mode: VerifyMode,
        /// Fuzzed models to check.
        #[arg(long)]
        count: Option<u64>,
    },
    /// Print a checkpoint's header and tensor directory.
    InspectCheckpoint { path: PathBuf },
}

fn parse_kind(s: &str) -> std::result::Result<EvalKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<VerifyMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn resolve(common: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match common.config.as_deref().or(fallback) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = common.preset {
        cfg = cfg.with_preset(p.name())?;
    }
    if let Some(a) = common.alpha {
        cfg.objective.alpha = a;
    }
    if let Some(t) = common.tau {
        cfg.objective.tau = t;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(single_thread: bool) {
    let n = if single_thread {
        Some(1)
    } else {
        std::env::var("RELIC_LAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0)
    };
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, split } => {
            init_threads(common.single_thread);
            let cfg = resolve(&common, None)?;
            let out = common
                .out
                .ok_or_else(|| Error::Config("gen-data needs --out FILE".into()))?;
            let (n, seed) = match split {
                Split::Train => (cfg.data.generate.n_samples, cfg.data.train_seed),
                Split::Test => (cfg.data.test_samples, cfg.data.test_seed),
            };
            let gen = ContentStyleConfig {
                n_samples: n,
                ..cfg.data.generate.clone()
            };
            let ds = generate_content_style(&gen, common.seed.unwrap_or(seed))?;
            serialize_dataset(&ds, &out)?;
            println!("wrote {} images to {}", ds.len(), out.display());
        }
        Command::Pretrain {
            common,
            resume,
            stop_at,
            steps,
        } => {
            init_threads(common.single_thread);
            let mut cfg = resolve(&common, None)?;
            if let Some(s) = steps {
                cfg.optimizer.total_steps = s;
                cfg.validate()?;
            }
            let opts = RunOptions {
                single_thread: common.single_thread,
                resume,
                stop_at,
            };
            let s = run_pretrain(&cfg, &opts)?;
            println!("run directory  {}", s.run_dir.display());
            println!("step           {}", s.step);
            println!("checkpoint     {}", s.checkpoint.display());
            if let Some(l) = s.last_loss {
                println!("loss           {:.6} (contrastive {:.6}, penalty {:.6})", l.total, l.contrastive, l.penalty);
            }
        }
        Command::Eval {
            common,
            kind,
            checkpoint,
            dataset,
        } => {
            init_threads(common.single_thread);
            let sibling = checkpoint.parent().map(|d| d.join(CONFIG_FILE));
            let cfg = resolve(&common, sibling.as_deref())?;
            let o = run_eval(kind, &checkpoint, &cfg, dataset.as_deref(), common.single_thread)?;
            print!("{}", o.summary());
        }
        Command::Verify { common, mode, count } => {
            init_threads(common.single_thread);
            let mut opts = VerifyOptions {
                parallel: !common.single_thread,
                out_dir: common.out.clone(),
                ..VerifyOptions::default()
            };
            if let Some(s) = common.seed {
                opts.seed = s;
            }
            if let Some(c) = count {
                opts.fuzz_count = c;
            }
            let r = run_verify(mode, &opts)?;
            for g in &r.gradients {
                println!(
                    "{:<22} max rel {:.3e}  max abs {:.3e}  {}",
                    g.name,
                    g.max_rel_err,
                    g.max_abs_err,
                    if g.failures == 0 { "ok" } else { "FAIL" }
                );
            }
            println!("{}", r.headline());
            if let Some(c) = &r.counterexample {
                eprintln!("first counterexample:\n{c}");
            }
            return Ok(r.passed);
        }
        Command::InspectCheckpoint { path } => {
            let c = Checkpoint::load(&path)?;
            println!("version      {}", c.version);
            println!("step         {}", c.step);
            println!("config hash  {}", hex(&c.config_hash));
            println!("rng states   {}", c.rng_states.len());
            for (name, t) in &c.tensors {
                println!("  {name:<28} {:?}", t.shape());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
