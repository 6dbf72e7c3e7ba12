//! Command-line front end: `test`, `simulate` and `power`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, default_effects, render_text};
use crate::linalg::{contrast, Effect};
use crate::permutation::{PermutationPlan, DEFAULT_REPLICATES};
use crate::rng::DEFAULT_SEED;
use crate::simulate::{run_scenario_with, ScenarioConfig};
use crate::survdata::{load_csv, CsvOptions, Factor, FactorialLayout, StatusCoding};
use crate::theory::{power, LocalAlternative, PopulationConfig, PowerPrediction};
use crate::weights::WeightSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Parser)]
#[command(
    name = "casanova",
    version,
    about = "Permutation and Wald-type tests for factorial survival designs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test main effects and interactions on a CSV file.
    Test(TestArgs),
    /// Run a Monte-Carlo size or power study from a scenario file.
    Simulate(SimulateArgs),
    /// Predict local power from a population file.
    Power(PowerArgs),
}

#[derive(Debug, clap::Args)]
pub struct TestArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "time")]
    pub time: String,
    #[arg(long, default_value = "status")]
    pub status: String,
    /// Factor columns, comma separated, in layout order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub factors: Vec<String>,
    /// `oneway`, `main:<f>` or `interaction:<f>,<g>`; repeatable. Defaults to every effect.
    #[arg(long = "effect")]
    pub effects: Vec<String>,
    /// Weight grammar: `fh:<r>:<g>` or `poly:<c0>,<c1>,...`.
    #[arg(long, num_args = 1.., default_values = ["fh:0:0", "poly:1,-2"])]
    pub weights: Vec<String>,
    /// Permutation replicates; 0 reports asymptotic p-values only.
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    pub nperm: usize,
    /// Enumerate every distinct group assignment instead of sampling.
    #[arg(long)]
    pub exact: bool,
    #[arg(long, env = "CASANOVA_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Status column holds `event` / `censored` instead of 1 / 0.
    #[arg(long)]
    pub status_text: bool,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    pub scenario: PathBuf,
    #[arg(long)]
    pub nsim: Option<usize>,
    #[arg(long)]
    pub nperm: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    /// No progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, clap::Args)]
pub struct PowerArgs {
    pub config: PathBuf,
    /// Overrides the shift vector of the file.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub theta: Option<Vec<f64>>,
    /// Multiples of the shift at which to report power.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

fn default_power_weights() -> Vec<String> {
    vec!["fh:0:0".into(), "poly:1,-2".into()]
}

fn default_power_effect() -> String {
    "oneway".into()
}

fn default_alpha() -> f64 {
    0.05
}

/// Input of the `power` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerConfig {
    pub population: PopulationConfig,
    pub alternative: LocalAlternative,
    #[serde(default)]
    pub factors: Option<Vec<(String, usize)>>,
    #[serde(default = "default_power_effect")]
    pub effect: String,
    #[serde(default = "default_power_weights")]
    pub weights: Vec<String>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerPoint {
    pub scale: f64,
    #[serde(flatten)]
    pub prediction: PowerPrediction,
}

impl PowerConfig {
    /// Predicted power at each multiple of `θ`.
    pub fn curve(&self, scales: &[f64]) -> Result<Vec<PowerPoint>> {
        let k = self.population.k();
        let layout = match &self.factors {
            Some(fs) => Some(FactorialLayout::new(
                fs.iter()
                    .map(|(n, l)| {
                        Factor::new(n.clone(), (1..=*l).map(|i| format!("{n}{i}")).collect())
                    })
                    .collect(),
            )?),
            None => None,
        };
        let spec = contrast(layout.as_ref(), k, &Effect::parse(&self.effect)?)?;
        let ws = WeightSet::parse_all(&self.weights)?;
        scales
            .iter()
            .map(|&c| {
                let alt = LocalAlternative {
                    theta: self.alternative.theta.iter().map(|t| c * t).collect(),
                    direction: self.alternative.direction.clone(),
                };
                Ok(PowerPoint {
                    scale: c,
                    prediction: power(&self.population, &alt, &ws, &spec, self.alpha)?,
                })
            })
            .collect()
    }
}

fn read_file(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })
}

fn run_test(a: &TestArgs, out: &mut dyn Write) -> Result<()> {
    let mut opts = CsvOptions::new(
        &a.time,
        &a.status,
        &a.factors.iter().map(String::as_str).collect::<Vec<_>>(),
    );
    if a.status_text {
        opts.status_coding = StatusCoding::Text;
    }
    let ds = load_csv(&a.data, &opts)?;
    let effects = if a.effects.is_empty() {
        default_effects(ds.layout())
    } else {
        a.effects
            .iter()
            .map(|e| Effect::parse(e))
            .collect::<Result<Vec<_>>>()?
    };
    let ws = WeightSet::parse_all(&a.weights)?;
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha {} outside (0, 1)",
            a.alpha
        )));
    }
    let plan = if a.exact {
        Some(PermutationPlan::exact())
    } else if a.nperm > 0 {
        Some(PermutationPlan::monte_carlo(a.nperm, a.seed))
    } else {
        None
    };
    let plan = plan.map(|mut p| {
        p.alpha = a.alpha;
        p.threads = a.threads;
        p
    });
    let report = analyze(&ds, &effects, &ws, plan.as_ref(), a.alpha)?;
    emit(out, a.format, &report, || render_text(&report))
}

fn run_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = ScenarioConfig::from_json(&read_file(&a.scenario)?)?;
    if let Some(n) = a.nsim {
        cfg.n_sim = n;
    }
    if let Some(b) = a.nperm {
        cfg.n_perm = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.threads == Some(0) {
        return Err(Error::InvalidConfig("thread count must be positive".into()));
    }
    let step = (cfg.n_sim / 20).max(1);
    let report = |done: usize, total: usize| {
        if done.is_multiple_of(step) || done == total {
            eprint!("\r{done}/{total} replicates");
            if done == total {
                eprintln!();
            }
        }
    };
    let progress: Option<&(dyn Fn(usize, usize) + Sync)> =
        if a.quiet { None } else { Some(&report) };
    let table = run_scenario_with(&cfg, a.threads, progress)?;
    emit(out, a.format, &table, || table.render_text())
}

fn run_power(a: &PowerArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg: PowerConfig = serde_json::from_str(&read_file(&a.config)?)?;
    if let Some(t) = &a.theta {
        cfg.alternative.theta = t.clone();
    }
    cfg.population.validate()?;
    let scales = a.scales.clone().unwrap_or_else(|| vec![1.0]);
    let curve = cfg.curve(&scales)?;
    emit(out, a.format, &curve, || {
        let mut s = format!(
            "{:>8}  {:>10}  {:>3}  {:>8}\n",
            "scale", "delta", "df", "power"
        );
        for p in &curve {
            s.push_str(&format!(
                "{:>8.3}  {:>10.4}  {:>3}  {:>8.4}\n",
                p.scale, p.prediction.delta, p.prediction.df, p.prediction.power
            ));
        }
        s
    })
}

fn emit<T: Serialize>(
    out: &mut dyn Write,
    format: Format,
    value: &T,
    text: impl FnOnce() -> String,
) -> Result<()> {
    let s = match format {
        Format::Text => text(),
        Format::Json => serde_json::to_string_pretty(value)? + "\n",
    };
    out.write_all(s.as_bytes())
        .map_err(|e| Error::Numerical(format!("cannot write output: {e}")))
}

/// Exit status for an error: 1 for internal failures, 2 for bad input.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = out.write_all(rendered.as_bytes());
            } else {
                let _ = err.write_all(rendered.as_bytes());
            }
            return code;
        }
    };
    let result = match &cli.command {
        Command::Test(a) => run_test(a, out),
        Command::Simulate(a) => run_simulate(a, out),
        Command::Power(a) => run_power(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
