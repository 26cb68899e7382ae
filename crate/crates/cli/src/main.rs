mod args;

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::process::ExitCode;

use anyhow::{Context, Result};
use args::{ArgsError, Cli, Command};
use olit_core::balance::BalancePlan;
use olit_core::bundle::TrainOptions;
use olit_core::carttree::CartConfig;
use olit_core::cohortgen::{GeneratorConfig, CALIBRATION_TOLERANCE};
use olit_core::experiment::table1_text;
use olit_core::linmodel::LrConfig;
use olit_core::pipeline::{self, parse_targets, Cohort, PipelineError, RiskPolicy};
use olit_server::{ServeConfig, ServerError, SnapshotSource, ADMIN_TOKEN_ENV};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

/// Bad flag values found after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn grade_list(flag: &str, s: &str) -> Result<BTreeSet<u8>> {
    parse_targets(s).map_err(|e| usage(format!("--{flag}: {e}")))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return if p.is_internal() { EXIT_INTERNAL } else { EXIT_DATA };
        }
    }
    EXIT_DATA
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            if !(0.0..=1.0).contains(&a.rule_strength) {
                return Err(usage("--rule-strength must be in [0, 1]"));
            }
            let cfg = GeneratorConfig {
                n_students: a.n,
                seed: a.seed,
                rule_strength: a.rule_strength,
                course_start: a.course_start,
                ..GeneratorConfig::default()
            };
            std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            let report = pipeline::generate(&a.out, &cfg)?;
            for line in report.flagged() {
                let realized = line.realized_mean.map_or("none".into(), |m| format!("{m:.1}"));
                log::warn!(
                    "{} realized mean {realized} is more than {:.0}% from target {:.0}",
                    line.name,
                    CALIBRATION_TOLERANCE * 100.0,
                    line.target_mean
                );
            }
            println!("wrote {} students to {}", a.n, a.out.display());
        }
        Command::Ingest(a) => {
            let mut cal = pipeline::load_calendar(&a.calendar)?;
            if let Some(start) = a.course_start {
                cal.course_start = start;
            }
            let s = pipeline::ingest(&a.logs, &a.grades, &cal, a.mapping.as_deref(), &a.out)?;
            println!(
                "{} students, {} events ({} outside the course window, {} uncategorized), {} without final grade, {} with missing assignments",
                s.students, s.events, s.dropped_outside_window, s.other_events, s.unlabeled, s.missing_assignments
            );
        }
        Command::Train(a) => {
            if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
                return Err(usage("--train-fraction must be in (0, 1)"));
            }
            let cal = a.calendar.as_deref().map(pipeline::load_calendar).transpose()?;
            let opts = TrainOptions {
                balance: BalancePlan {
                    order: a.smote_order.into(),
                    k_neighbors: a.smote_k,
                    train_fraction: a.train_fraction,
                    seed: a.seed,
                },
                lr: LrConfig { l2_lambda: a.l2, ..LrConfig::default() },
                cart: CartConfig {
                    max_depth: a.max_depth,
                    min_samples_split: a.min_samples_split,
                    seed: a.seed,
                    ..CartConfig::default()
                },
                with_lr: !a.no_lr,
                ..TrainOptions::default()
            };
            let trained = pipeline::train(&a.features, &a.out, cal, &opts)?;
            for (key, r) in &trained.fit_reports {
                println!(
                    "lr {key:<9} iterations {:>4}  nll {:.4}  gradient {:.1e}  {}",
                    r.iterations,
                    r.final_nll,
                    r.final_gradient_norm,
                    if r.converged { "converged" } else { "not converged" }
                );
            }
            let b = &trained.bundle;
            for (name, e) in [("early", &b.early_evaluation), ("late", &b.late_evaluation)] {
                println!(
                    "tree {name} (weeks {}-{}): train accuracy {:.3}, test accuracy {:.3}",
                    e.first_week, e.last_week, e.train_accuracy, e.test_accuracy
                );
            }
            println!("wrote {}", a.out.display());
        }
        Command::Evaluate(a) => {
            let out = pipeline::evaluate(&a.features, &a.bundle, &a.out)?;
            print!("{}", table1_text(&out.table1));
            println!(
                "early tree: train accuracy {:.3}, test accuracy {:.3}",
                out.early_tree.train_accuracy, out.early_tree.test_accuracy
            );
            println!("wrote reports to {}", a.out.display());
        }
        Command::Predict(a) => {
            let policy = RiskPolicy { grades: grade_list("risk-grades", &a.risk_grades)? };
            let bundle = pipeline::load_model(&a.bundle)?;
            let cohort = Cohort::load(&bundle, &a.features)?;
            let records = pipeline::predict(&bundle, &cohort, a.student.as_deref(), &policy)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&records)?);
            } else {
                println!("{:<12} {:>9} {:<8} {:>5} {:>5}", "student", "predicted", "class", "risk", "final");
                for r in &records {
                    let fin = r.final_grade.map_or("-".into(), |g| g.to_string());
                    let risk = if r.risk_flag { "yes" } else { "no" };
                    println!(
                        "{:<12} {:>9} {:<8} {:>5} {:>5}",
                        r.student_id, r.predicted_grade, r.grade_class, risk, fin
                    );
                }
            }
        }
        Command::Strategy(a) => {
            let targets = grade_list("target", &a.target)?;
            let bundle = pipeline::load_model(&a.bundle)?;
            let cohort = Cohort::load(&bundle, &a.features)?;
            let out = pipeline::strategy(&bundle, &cohort, &a.student, &targets, a.week)?;
            if a.text {
                println!("{}", out.text);
            } else {
                println!("{}", serde_json::to_string_pretty(&out)?);
            }
        }
        Command::Serve(a) => {
            let cfg = ServeConfig {
                source: SnapshotSource { bundle: a.bundle, features: a.features },
                addr: SocketAddr::new(a.host, a.port),
                cors_origin: a.cors_origin,
                admin_token: std::env::var(ADMIN_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
                policy: RiskPolicy { grades: grade_list("risk-grades", &a.risk_grades)? },
            };
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            rt.block_on(olit_server::serve(cfg)).map_err(|e| match e {
                ServerError::Pipeline(p) => anyhow::Error::new(p),
                ServerError::BadOrigin(o) => usage(format!("--cors-origin: invalid origin {o:?}")),
                other => anyhow::Error::new(other),
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match args::parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(ArgsError::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
        Err(ArgsError::Config(msg)) => {
            eprintln!("error: config {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
