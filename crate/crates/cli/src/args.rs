use std::ffi::OsString;
use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use olit_core::balance::SmoteOrder;
use olit_core::config::parse_key_values;

#[derive(Debug, Parser)]
#[command(
    name = "olit",
    version,
    about = "Predict final grades from course activity logs and plan interventions",
    args_override_self = true
)]
pub struct Cli {
    /// key = value file with defaults for any flag of the chosen subcommand
    /// (explicit flags win)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Log progress to stderr
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort: logs.csv, grades.csv, manifest.json, calendar.cfg
    Generate(GenerateArgs),
    /// Turn a log export and a grades file into a feature matrix
    Ingest(IngestArgs),
    /// Fit the early and late trees and the weekly logistic models
    Train(TrainArgs),
    /// Write table1.csv, table1.txt, table2.csv and summary.csv
    Evaluate(EvaluateArgs),
    /// Predict final grades with the early tree
    Predict(PredictArgs),
    /// Minimal feature changes that move a student into a target grade
    Strategy(StrategyArgs),
    /// Serve the HTTP API
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of students
    #[arg(long, default_value_t = 107)]
    pub n: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Probability that a student's grade follows the embedded decision rules
    #[arg(long, default_value_t = 0.9)]
    pub rule_strength: f64,
    /// First day of week 1 (YYYY-MM-DD)
    #[arg(long, value_name = "DATE", default_value = "2020-01-06")]
    pub course_start: NaiveDate,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Log export (canonical header `student_id,timestamp,event_name` unless --mapping is given)
    #[arg(long, value_name = "FILE")]
    pub logs: PathBuf,
    /// Grades file
    #[arg(long, value_name = "FILE")]
    pub grades: PathBuf,
    /// Course calendar (key = value: course_start, n_weeks, mp_weeks, quiz_weeks, pr_weeks)
    #[arg(long, value_name = "FILE")]
    pub calendar: PathBuf,
    /// Replaces the calendar's course_start
    #[arg(long, value_name = "DATE")]
    pub course_start: Option<NaiveDate>,
    /// Column mapping for non-canonical log exports
    #[arg(long, value_name = "FILE")]
    pub mapping: Option<PathBuf>,
    /// Feature matrix to write
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SmoteOrderArg {
    /// Oversample the full data set, then split
    Paper,
    /// Split, then oversample the training part only
    TrainOnly,
}

impl From<SmoteOrderArg> for SmoteOrder {
    fn from(o: SmoteOrderArg) -> Self {
        match o {
            SmoteOrderArg::Paper => SmoteOrder::Paper,
            SmoteOrderArg::TrainOnly => SmoteOrder::TrainOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Feature matrix from `ingest`
    #[arg(long, value_name = "FILE")]
    pub features: PathBuf,
    /// Bundle to write (.olit.json)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Course calendar stored in the bundle; inferred from the columns if omitted
    #[arg(long, value_name = "FILE")]
    pub calendar: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SmoteOrderArg::Paper)]
    pub smote_order: SmoteOrderArg,
    /// Neighbours used by SMOTE
    #[arg(long, default_value_t = 5)]
    pub smote_k: usize,
    /// Share of students in the training part
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Seed for the split and oversampling
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Tree depth limit
    #[arg(long, default_value_t = 5)]
    pub max_depth: usize,
    /// Smallest node that may be split
    #[arg(long, default_value_t = 2)]
    pub min_samples_split: usize,
    /// L2 penalty of the logistic models
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    /// Skip the 27 weekly logistic models
    #[arg(long)]
    pub no_lr: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    pub features: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub bundle: PathBuf,
    /// Report directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    pub bundle: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub features: PathBuf,
    /// Only this student
    #[arg(long, value_name = "ID")]
    pub student: Option<String>,
    /// Grades flagged as at risk
    #[arg(long, value_name = "GRADES", default_value = "0,2")]
    pub risk_grades: String,
    /// Print JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct StrategyArgs {
    #[arg(long, value_name = "FILE")]
    pub bundle: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub features: PathBuf,
    #[arg(long, value_name = "ID")]
    pub student: String,
    /// Acceptable grades, comma separated
    #[arg(long, value_name = "GRADES", default_value = "4,5")]
    pub target: String,
    /// First week whose features may still change
    #[arg(long, value_name = "W", default_value_t = 4)]
    pub week: u32,
    /// Print only the rendered text
    #[arg(long)]
    pub text: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_name = "FILE")]
    pub bundle: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub features: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Browser origin allowed to call the API, e.g. http://localhost:5173
    #[arg(long, value_name = "ORIGIN")]
    pub cors_origin: Option<String>,
    /// Grades flagged as at risk
    #[arg(long, value_name = "GRADES", default_value = "0,2")]
    pub risk_grades: String,
}

#[derive(Debug)]
pub enum ArgsError {
    Clap(clap::Error),
    Config(String),
}

/// Position and value of `--config` in raw arguments.
fn find_config(args: &[OsString]) -> Option<(usize, PathBuf)> {
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return args.get(i + 1).map(|v| (i, PathBuf::from(v)));
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some((i, PathBuf::from(v)));
        }
    }
    None
}

/// Turns config entries into flags of `subcommand`, to be placed before the
/// user's own flags so those override them.
fn config_flags(text: &str, subcommand: &clap::Command) -> Result<Vec<OsString>, String> {
    let kv = parse_key_values(text).map_err(|e| e.to_string())?;
    let all = Cli::command();
    let mut out = Vec::new();
    for (key, value) in kv {
        let long = key.replace('_', "-");
        let known = all.get_subcommands().any(|s| s.get_arguments().any(|a| a.get_long() == Some(&long)));
        if !known {
            return Err(format!("unknown config key {key:?}"));
        }
        let Some(arg) = subcommand.get_arguments().find(|a| a.get_long() == Some(&long)) else {
            continue;
        };
        if arg.get_action().takes_values() {
            out.push(format!("--{long}").into());
            out.push(value.into());
        } else {
            match value.as_str() {
                "true" => out.push(format!("--{long}").into()),
                "false" => {}
                other => return Err(format!("config key {key:?} expects true or false, got {other:?}")),
            }
        }
    }
    Ok(out)
}

/// Parses arguments, applying `--config` entries with lower precedence
/// than flags given on the command line.
pub fn parse(args: Vec<OsString>) -> Result<Cli, ArgsError> {
    let Some((_, path)) = find_config(&args) else {
        return Cli::try_parse_from(args).map_err(ArgsError::Clap);
    };
    let cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    let Some(pos) = args.iter().position(|a| names.iter().any(|n| a == n.as_str())) else {
        return Cli::try_parse_from(args).map_err(ArgsError::Clap);
    };
    let sub = cmd.find_subcommand(args[pos].to_str().unwrap_or_default()).expect("matched by name");
    let text = std::fs::read_to_string(&path).map_err(|e| ArgsError::Config(format!("{}: {e}", path.display())))?;
    let extra = config_flags(&text, sub).map_err(|e| ArgsError::Config(format!("{}: {e}", path.display())))?;
    let mut spliced = args[..=pos].to_vec();
    spliced.extend(extra);
    spliced.extend_from_slice(&args[pos + 1..]);
    Cli::try_parse_from(spliced).map_err(ArgsError::Clap)
}
