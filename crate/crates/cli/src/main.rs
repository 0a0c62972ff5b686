mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use ef_target::bench::{beta_sweep, oracle_covariates, rate_study, replicate, split, train, EpochLog, RateConfig, RunConfig};
use ef_target::checks::{grad_checks, selfcheck, Check};
use ef_target::dgp::{export_csv, generate, ingest_csv, Dataset, DatasetMeta, DgpSpec, OracleValue};
use ef_target::estimators::estimate_report;
use ef_target::io::{write_atomic, write_json};
use ef_target::model::{Checkpoint, Model, TreatmentKind};
use ef_target::objective::{PolishReport, OVERLAP_CLAMP};
use ef_target::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "ef-target", version, about = "Targeted estimation of average dose canonical functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config document (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set loss.beta=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Progress on stderr; repeat for per-epoch detail.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and its oracle values.
    GenData {
        #[arg(long, default_value_t = 0)]
        rep: usize,
    },
    /// Train one model and write a checkpoint.
    Train {
        #[arg(long, default_value_t = 0)]
        rep: usize,
        /// Train on this CSV (`x1..xd,a,y`) instead of generated data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Plug-in, targeted and doubly robust estimates from a checkpoint.
    Estimate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Estimate on this CSV instead of regenerating the training data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Replicated plug-in versus targeted comparison.
    Eval,
    /// Error-versus-sample-size study with oracle and corrupted nuisances.
    RateStudy,
    /// Paired sweep over the regularization weight.
    BetaSweep {
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0])]
        betas: Vec<f64>,
    },
    /// Finite-difference checks of the loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Run the numerical invariant suite.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Serialize, Deserialize)]
struct CheckpointArtifact {
    config_hash: String,
    rep: usize,
    data_seed: u64,
    /// Where the training rows came from when not generated.
    data_path: Option<String>,
    checkpoint: Checkpoint,
}

#[derive(Serialize)]
struct TrainLog<'a> {
    config_hash: &'a str,
    rep: usize,
    data_seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    history: &'a [EpochLog],
    polish: Option<&'a PolishReport>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum Oracle {
    Binary { psi0: OracleValue, psi1: OracleValue, ate: OracleValue },
    Continuous { doses: Vec<f64>, psi: Vec<OracleValue> },
}

#[derive(Serialize)]
struct OracleArtifact<'a> {
    config_hash: String,
    rep: usize,
    data_seed: u64,
    dgp: &'a DgpSpec,
    dataset: &'a DatasetMeta,
    n: usize,
    oracle: Oracle,
}

#[derive(Serialize)]
struct CheckReport<'a> {
    passed: bool,
    checks: &'a [Check],
}

struct Ctx {
    out: PathBuf,
    verbose: u8,
}

impl Ctx {
    fn say(&self, level: u8, msg: impl AsRef<str>) {
        if self.verbose >= level {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let doc = config::load_with_overrides(cli.config.as_deref(), &cli.overrides)?
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let run: RunConfig = config::resolve(doc)?;
    run.validate()?;
    Ok(run)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn gen_data(cli: &Cli, ctx: &Ctx, rep: usize) -> Result<()> {
    let run = run_config(cli)?;
    let seed = run.rep_seed(rep);
    let (dgp, data) = generate(&run.dgp, seed)?;
    ctx.say(1, format!("generated {} rows (rep {rep}, seed {seed})", data.len()));
    let oracle = match run.dgp.treatment {
        TreatmentKind::Binary => {
            let x = oracle_covariates(&run, &data, run.eval.ate_oracle_rows);
            Oracle::Binary { psi0: dgp.adcf(x.view(), 0.0, run.seed), psi1: dgp.adcf(x.view(), 1.0, run.seed), ate: dgp.ate(x.view(), run.seed) }
        }
        TreatmentKind::Continuous => {
            let x = oracle_covariates(&run, &data, run.eval.curve_oracle_rows);
            let doses = run.eval.doses();
            let psi = doses.iter().map(|&a| dgp.adcf(x.view(), a, run.seed)).collect();
            Oracle::Continuous { doses, psi }
        }
    };
    export_csv(&data, &ctx.path("data.csv"))?;
    let art = OracleArtifact { config_hash: run.hash(), rep, data_seed: seed, dgp: &run.dgp, dataset: &data.meta, n: data.len(), oracle };
    write_json(&ctx.path("oracle.json"), &art)
}

fn training_data(run: &RunConfig, rep: usize, path: Option<&Path>) -> Result<(u64, Dataset)> {
    let seed = run.rep_seed(rep);
    match path {
        Some(p) => Ok((seed, ingest_csv(p, Some(run.dgp.treatment), Some(run.dgp.family))?)),
        None => Ok((seed, generate(&run.dgp, seed)?.1)),
    }
}

fn train_cmd(cli: &Cli, ctx: &Ctx, rep: usize, data_path: Option<&Path>) -> Result<()> {
    let run = run_config(cli)?;
    let (seed, data) = training_data(&run, rep, data_path)?;
    let sp = split(data.len(), run.fractions(), seed)?;
    ctx.say(1, format!("training on {} rows (train {}, val {}, test {})", data.len(), sp.train.len(), sp.val.len(), sp.test.len()));
    let out = train(&run, &run.loss, &data, &sp, &data.batch(), seed)?;
    for h in &out.history {
        ctx.say(2, format!("epoch {:>4}  train {:.6}  val base {:.6}", h.epoch, h.train_total, h.val_base));
    }
    let m = &out.model.meta;
    ctx.say(1, format!("stopped after {} epochs, best epoch {} (val base {:.6})", m.epochs_run, m.best_epoch, m.best_val_base_loss));
    let hash = run.hash();
    let log = TrainLog {
        config_hash: &hash,
        rep,
        data_seed: seed,
        n_train: sp.train.len(),
        n_val: sp.val.len(),
        n_test: sp.test.len(),
        history: &out.history,
        polish: out.polish.as_ref(),
    };
    let art = CheckpointArtifact {
        config_hash: hash.clone(),
        rep,
        data_seed: seed,
        data_path: data_path.map(|p| p.display().to_string()),
        checkpoint: out.model.to_checkpoint(),
    };
    write_json(&ctx.path("checkpoint.json"), &art)?;
    write_json(&ctx.path("train_log.json"), &log)
}

fn estimate_cmd(cli: &Cli, ctx: &Ctx, checkpoint: &Path, data_path: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(checkpoint).map_err(|e| Error::Data(format!("{}: {e}", checkpoint.display())))?;
    let art: CheckpointArtifact = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", checkpoint.display())))?;
    let model = Model::from_checkpoint(art.checkpoint)?;
    let run = match config::load_with_overrides(cli.config.as_deref(), &cli.overrides)? {
        Some(doc) => {
            let r: RunConfig = config::resolve(doc)?;
            r.validate()?;
            Some(r)
        }
        None => None,
    };
    let data = match (data_path, &run) {
        (Some(p), _) => ingest_csv(p, Some(model.treatment()), Some(model.family()))?,
        (None, Some(r)) => generate(&r.dgp, art.data_seed)?.1,
        (None, None) => return Err(Error::Config("estimate needs --data or a --config to regenerate the data".into())),
    };
    let (doses, clamp) = match &run {
        Some(r) => (r.eval.doses(), r.loss.overlap_clamp),
        None => (ef_target::bench::EvalConfig::default().doses(), OVERLAP_CLAMP),
    };
    let mut report = estimate_report(&model, &data, &doses, clamp)?;
    report.config_hash = Some(run.as_ref().map(|r| r.hash()).unwrap_or(art.config_hash));
    if let Some(ate) = &report.ate {
        ctx.say(1, format!("ate: plug-in {:.6}, targeted {:.6}, doubly robust {:.6}", ate.plugin, ate.tr, ate.dr));
    }
    if report.diagnostics.clamp_flagged || report.diagnostics.stationarity_warning {
        eprintln!("warning: {:?}", report.diagnostics);
    }
    write_json(&ctx.path("estimate.json"), &report)
}

fn report_checks(ctx: &Ctx, name: &str, checks: &[Check]) -> Result<()> {
    for c in checks {
        println!("{} {}{}", if c.passed { "PASS" } else { "FAIL" }, c.name, if c.detail.is_empty() { String::new() } else { format!(": {}", c.detail) });
    }
    let passed = checks.iter().all(|c| c.passed);
    write_json(&ctx.path(name), &CheckReport { passed, checks })?;
    if passed {
        Ok(())
    } else {
        let n = checks.iter().filter(|c| !c.passed).count();
        Err(Error::Numeric(format!("{n} of {} checks failed", checks.len())))
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let ctx = Ctx { out: cli.out.clone(), verbose: cli.verbose };
    match &cli.command {
        Command::GenData { rep } => gen_data(cli, &ctx, *rep),
        Command::Train { rep, data } => train_cmd(cli, &ctx, *rep, data.as_deref()),
        Command::Estimate { checkpoint, data } => estimate_cmd(cli, &ctx, checkpoint, data.as_deref()),
        Command::Eval => {
            let run = run_config(cli)?;
            ctx.say(1, format!("{} replications", run.replications));
            let table = replicate(&run)?;
            let text = table.to_text();
            print!("{text}");
            write_json(&ctx.path("results.json"), &table)?;
            write_text(&ctx.path("results.txt"), &text)
        }
        Command::BetaSweep { betas } => {
            let run = run_config(cli)?;
            let sweep = beta_sweep(&run, betas)?;
            let text = sweep.to_text();
            print!("{text}");
            write_json(&ctx.path("sweep.json"), &sweep)?;
            write_text(&ctx.path("sweep.txt"), &text)
        }
        Command::RateStudy => {
            let doc = config::load_with_overrides(cli.config.as_deref(), &cli.overrides)?
                .ok_or_else(|| Error::Config("rate-study needs --config".into()))?;
            let cfg: RateConfig = config::resolve(doc)?;
            let report = rate_study(&cfg)?;
            let text = report.to_text();
            print!("{text}");
            write_json(&ctx.path("rate.json"), &report)?;
            write_text(&ctx.path("rate.txt"), &text)
        }
        Command::Gradcheck { seed, tol } => report_checks(&ctx, "gradcheck.json", &grad_checks(*seed, *tol)?),
        Command::Selfcheck { seed } => {
            ctx.say(1, "running the invariant suite");
            report_checks(&ctx, "selfcheck.json", &selfcheck(*seed)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
