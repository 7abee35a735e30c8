use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use liftnet::diagnostics::{
    criticality, mpc, prediction_agreement, spectrum, DiagnosticsError, DEFAULT_CRITICAL_TOL,
    DEFAULT_MPC_THRESHOLD, DEFAULT_TAU,
};
use liftnet::experiments::data::load_table;
use liftnet::experiments::runner::{
    load_dataset, run_experiment, ExperimentConfig, ProcedureOutcome,
};
use liftnet::experiments::ExperimentError;
use liftnet::lifting::{
    merge_linear_layers, multi_layer_lift, verify_membership, LiftError, LiftPlan, LiftSidecar,
    MembershipReport,
};
use liftnet::linalg::LinalgError;
use liftnet::network::{
    load_weights, loss, save_weights, Dataset, NetworkError, NetworkParams, DEFAULT_HESSIAN_CAP,
};

#[derive(Parser)]
#[command(
    name = "liftnet",
    version,
    about = "Critical lifting of networks into deeper ones"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Output directory, created if absent.
    #[arg(short, long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct OptOutput {
    /// Directory for the JSON report; stdout only when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct NetData {
    /// Weight file.
    #[arg(long)]
    weights: PathBuf,
    /// Data: a CSV table (`x…` inputs with `y…` targets or a `label`
    /// column) or an experiment config whose training set is used.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from an experiment config (its procedure is ignored).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: Output,
    },
    /// Lift a network by one or more layers and verify every step.
    Lift {
        /// A lift plan or a list of plans applied in order.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        net: NetData,
        #[command(flatten)]
        out: Output,
    },
    /// Check that a network is a one-layer lift of another on the data.
    Verify {
        /// The shallower network.
        #[arg(long)]
        source: PathBuf,
        /// A lift plan, or a lift record written by `lift`.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        net: NetData,
        #[command(flatten)]
        out: OptOutput,
    },
    /// Fold effectively linear hidden layers into their successors.
    Merge {
        #[command(flatten)]
        net: NetData,
        #[arg(long, default_value_t = DEFAULT_MPC_THRESHOLD)]
        threshold: f64,
        #[command(flatten)]
        out: Output,
    },
    /// Per-layer minimal Pearson correlation.
    Mpc {
        #[command(flatten)]
        net: NetData,
        #[arg(long, default_value_t = DEFAULT_MPC_THRESHOLD)]
        threshold: f64,
        #[command(flatten)]
        out: OptOutput,
    },
    /// Finite-difference Hessian spectrum of the empirical risk.
    Hessian {
        #[command(flatten)]
        net: NetData,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Largest parameter count accepted.
        #[arg(long, default_value_t = DEFAULT_HESSIAN_CAP)]
        cap: usize,
        #[command(flatten)]
        out: OptOutput,
    },
    /// Gradient L1 norm against a tolerance.
    Criticality {
        #[command(flatten)]
        net: NetData,
        #[arg(long, default_value_t = DEFAULT_CRITICAL_TOL)]
        tol: f64,
        #[command(flatten)]
        out: OptOutput,
    },
    /// Fraction of inputs on which two classifiers predict the same class.
    Agreement {
        #[command(flatten)]
        net: NetData,
        /// The second network.
        #[arg(long)]
        other: PathBuf,
        #[command(flatten)]
        out: OptOutput,
    },
    /// Run an experiment config and write its bundle.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma-separated seeds, run in parallel into `seed-<s>/`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        out: Output,
    },
}

/// Exit status 2 marks a numerical failure, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.downcast_ref::<ExperimentError>()
            .map(ExperimentError::is_numerical)
            .or_else(|| e.downcast_ref::<LiftError>().map(LiftError::is_numerical))
            .or_else(|| {
                e.downcast_ref::<DiagnosticsError>()
                    .map(DiagnosticsError::is_numerical)
            })
            .or_else(|| {
                e.downcast_ref::<NetworkError>()
                    .map(NetworkError::is_numerical)
            })
            .or_else(|| {
                e.downcast_ref::<LinalgError>()
                    .map(LinalgError::is_numerical)
            })
            .or_else(|| e.downcast_ref::<NumericalFailure>().map(|_| true))
            .unwrap_or(false)
    });
    if numerical {
        2
    } else {
        1
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct NumericalFailure(String);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!(
                "{} already holds output; pass --force to overwrite",
                dir.display()
            );
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn report<T: Serialize>(out: &OptOutput, name: &str, value: &T) -> Result<()> {
    if let Some(dir) = &out.out {
        prepare_out(dir, out.force)?;
        write_json(&dir.join(name), value)?;
    }
    Ok(())
}

fn weights(path: &Path) -> Result<NetworkParams> {
    load_weights(path).with_context(|| format!("loading weights {}", path.display()))
}

fn dataset(path: &Path, classes: usize) -> Result<Dataset> {
    if !path.exists() {
        bail!("data file {} does not exist", path.display());
    }
    let is_json = path.extension().is_some_and(|e| e == "json");
    let data = if is_json {
        let cfg = ExperimentConfig::load(path)?;
        load_dataset(&cfg.dataset, cfg.loss)?.train
    } else {
        load_table(path, Some(classes).filter(|&c| c >= 2))?
    };
    Ok(data)
}

fn net_and_data(nd: &NetData) -> Result<(NetworkParams, Dataset)> {
    let p = weights(&nd.weights)?;
    let d = dataset(&nd.data, p.output_dim())?;
    if d.input_dim() != p.input_dim() || d.output_dim() != p.output_dim() {
        bail!(
            "network {:?} does not fit data with {} inputs and {} outputs",
            p.widths(),
            d.input_dim(),
            d.output_dim()
        );
    }
    Ok((p, d))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PlanFile {
    One(LiftPlan),
    Many(Vec<LiftPlan>),
    Record(LiftRecordFile),
    Sidecar(LiftSidecar),
}

impl PlanFile {
    fn plans(self) -> Vec<LiftPlan> {
        match self {
            PlanFile::One(p) => vec![p],
            PlanFile::Many(ps) => ps,
            PlanFile::Record(r) => r.steps.into_iter().map(|s| s.plan).collect(),
            PlanFile::Sidecar(s) => vec![s.plan],
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LiftRecordFile {
    steps: Vec<LiftSidecar>,
    verification: Vec<MembershipReport>,
    overall: bool,
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            prepare_out(&out.out, out.force)?;
            cfg.procedure = Default::default();
            let o = run_experiment(&cfg, Some(&out.out))?;
            let s = &o.summary;
            println!(
                "{}: {} epochs, final loss {:.6e}{}",
                s.name,
                s.epochs,
                s.final_loss,
                s.final_accuracy
                    .map(|a| format!(", accuracy {a:.4}"))
                    .unwrap_or_default()
            );
            println!("plateaus: {}", s.plateaus.len());
            Ok(())
        }
        Command::Lift { config, net, out } => {
            let plans = read_json::<PlanFile>(&config)?.plans();
            if plans.is_empty() {
                bail!("{} holds no lift plan", config.display());
            }
            let (p, d) = net_and_data(&net)?;
            let (lifted, records) = multi_layer_lift(&p, &d, &plans)?;
            let verification = records
                .iter()
                .map(|r| verify_membership(&r.source, &r.result, &d, &r.plan))
                .collect::<Result<Vec<_>, _>>()?;
            let overall = verification.iter().all(|v| v.overall);
            prepare_out(&out.out, out.force)?;
            let file = LiftRecordFile {
                steps: records.iter().map(|r| r.sidecar()).collect(),
                verification,
                overall,
            };
            write_json(&out.out.join("lift_record.json"), &file)?;
            println!("widths {:?} -> {:?}", p.widths(), lifted.widths());
            for (i, (r, v)) in records.iter().zip(&file.verification).enumerate() {
                println!(
                    "step {}: after layer {}, case {:?}, min margin {:.3e}, verified {}",
                    i + 1,
                    r.plan.insert_after,
                    r.case_taken,
                    v.min_margin,
                    v.overall
                );
            }
            println!("overall={overall}");
            if !overall {
                return Err(NumericalFailure(
                    "lifted network failed membership verification; weights not written".into(),
                )
                .into());
            }
            save_weights(&lifted, &out.out.join("weights.json"))?;
            Ok(())
        }
        Command::Verify {
            source,
            config,
            net,
            out,
        } => {
            let plans = read_json::<PlanFile>(&config)?.plans();
            let [plan] = plans.as_slice() else {
                bail!(
                    "verify checks one lift step; {} holds {}",
                    config.display(),
                    plans.len()
                );
            };
            let (lifted, d) = net_and_data(&net)?;
            let src = weights(&source)?;
            let v = verify_membership(&src, &lifted, &d, plan)?;
            println!("local-in-layer     {}", v.local_in_layer_ok);
            println!(
                "linearization      {} (min margin {:.3e}, {} violations)",
                v.linearization_ok,
                v.min_margin,
                v.violations.len()
            );
            println!(
                "output-preserving  {} (weight residual {:.3e}, bias residual {:.3e})",
                v.output_preserving_ok, v.weight_residual, v.bias_residual
            );
            println!("overall={}", v.overall);
            report(&out, "membership.json", &v)?;
            if !v.overall {
                return Err(NumericalFailure("membership verification failed".into()).into());
            }
            Ok(())
        }
        Command::Merge {
            net,
            threshold,
            out,
        } => {
            let (p, d) = net_and_data(&net)?;
            let (merged, rep) = merge_linear_layers(&p, &d, threshold)?;
            prepare_out(&out.out, out.force)?;
            save_weights(&merged, &out.out.join("weights.json"))?;
            write_json(&out.out.join("merge_report.json"), &rep)?;
            for s in &rep.steps {
                println!("merged layer {} (MPC {:.6})", s.layer, s.mpc);
            }
            println!(
                "widths {:?} -> {:?}; loss {:.6e} -> {:.6e}",
                p.widths(),
                rep.final_widths,
                loss(&p, &d)?,
                loss(&merged, &d)?
            );
            Ok(())
        }
        Command::Mpc {
            net,
            threshold,
            out,
        } => {
            let (p, d) = net_and_data(&net)?;
            let r = mpc(&p, &d, threshold)?;
            println!("layer  mpc       zero  constant");
            for l in &r.layers {
                let v = l.mpc.map_or("-".to_string(), |v| format!("{v:.6}"));
                let flag = if r.flagged.contains(&l.layer) {
                    "  *"
                } else {
                    ""
                };
                println!(
                    "{:>5}  {:<8}  {:>4}  {:>8}{flag}",
                    l.layer,
                    v,
                    l.zero_count(),
                    l.constant_count()
                );
            }
            println!("flagged (> {threshold}): {:?}", r.flagged);
            report(&out, "mpc_report.json", &r)
        }
        Command::Hessian { net, tau, cap, out } => {
            let (p, d) = net_and_data(&net)?;
            let s = spectrum(&p, &d, tau, cap)?;
            println!(
                "{} parameters: {} negative, {} zero, {} positive (tau {tau:e}); {:?}",
                s.eigenvalues.len(),
                s.negative,
                s.zero,
                s.positive,
                s.classification
            );
            if let (Some(lo), Some(hi)) = (s.eigenvalues.first(), s.eigenvalues.last()) {
                println!("smallest {lo:.6e}, largest {hi:.6e}");
            }
            report(&out, "spectrum.json", &s)?;
            if let Some(dir) = &out.out {
                let path = dir.join("eigenvalues.csv");
                let f = fs::File::create(&path)
                    .with_context(|| format!("writing {}", path.display()))?;
                s.write_csv(f)?;
            }
            Ok(())
        }
        Command::Criticality { net, tol, out } => {
            let (p, d) = net_and_data(&net)?;
            let c = criticality(&p, &d, tol)?;
            println!(
                "gradient L1 {:.6e} (tol {tol:e}): critical={}",
                c.grad_l1, c.is_critical
            );
            report(&out, "criticality.json", &c)
        }
        Command::Agreement { net, other, out } => {
            let (a, d) = net_and_data(&net)?;
            let b = weights(&other)?;
            let r = prediction_agreement(&a, &b, d.inputs())?;
            println!("agreement {:.4} over {} inputs", r.agreement, d.len());
            report(&out, "agreement.json", &r)
        }
        Command::Experiment {
            config,
            seed,
            seeds,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            prepare_out(&out.out, out.force)?;
            if seeds.is_empty() {
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                let o = run_experiment(&cfg, Some(&out.out))?;
                print_outcome(&cfg, &o.procedure, o.summary.final_loss);
                return Ok(());
            }
            let results: Vec<Result<()>> = std::thread::scope(|scope| {
                let handles: Vec<_> = seeds
                    .iter()
                    .map(|&s| {
                        let mut c = cfg.clone();
                        c.seed = s;
                        let dir = out.out.join(format!("seed-{s}"));
                        scope.spawn(move || -> Result<()> {
                            fs::create_dir_all(&dir)?;
                            let o = run_experiment(&c, Some(&dir))
                                .with_context(|| format!("seed {s}"))?;
                            print_outcome(&c, &o.procedure, o.summary.final_loss);
                            Ok(())
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("worker panicked"))))
                    .collect()
            });
            // report the first failure, after every seed has finished
            results.into_iter().collect()
        }
    }
}

fn print_outcome(cfg: &ExperimentConfig, outcome: &ProcedureOutcome, final_loss: f64) {
    println!(
        "{} seed {}: final loss {final_loss:.6e}",
        cfg.name, cfg.seed
    );
    match outcome {
        ProcedureOutcome::Train => {}
        ProcedureOutcome::PlateauMerge {
            events,
            reference_final_loss,
        } => {
            for e in events {
                println!(
                    "  plateau {}..{} level {:.4e}: flagged {:?}, merged to {:?}, loss {:.4e} (gap {:.3})",
                    e.plateau.start,
                    e.plateau.end,
                    e.plateau.level,
                    e.flagged,
                    e.merge.final_widths,
                    e.merged_loss,
                    e.rel_gap
                );
            }
            if let Some(r) = reference_final_loss {
                println!("  single-hidden-layer reference final loss {r:.4e}");
            }
        }
        ProcedureOutcome::SpectrumLifts { steps } => {
            for s in steps {
                println!(
                    "  {} lifts {:?}: grad L1 {:.2e}, negative {}, zero {}, positive {}",
                    s.lifts, s.widths, s.grad_l1, s.negative, s.zero, s.positive
                );
            }
        }
        ProcedureOutcome::BnSweep { runs, .. } => {
            for r in runs {
                println!(
                    "  gamma {:?}: {} epochs, mean MPC {:?}, plateau epochs {}",
                    r.gamma, r.epochs, r.mean_mpc, r.plateau_duration
                );
            }
        }
        ProcedureOutcome::DataSwitch { switch_loss, runs } => {
            println!("  switched at loss {switch_loss:.4e}");
            for r in runs {
                println!(
                    "  n {}: level {:.4e}, escape epoch {:?}",
                    r.n, r.level, r.escape_epoch
                );
            }
        }
        ProcedureOutcome::Prune { result } => match result {
            Some(r) => println!(
                "  pruned at epoch {} {:?} -> {:?}: agreement {:.4}",
                r.prune_epoch, r.flagged, r.merge.final_widths, r.agreement.agreement
            ),
            None => println!("  no layer was ever effectively linear; nothing pruned"),
        },
    }
}
