//! The `mesa` command line.
//!
//! Results go to stdout (or `--out`) as JSON; a short human summary and
//! timings go to stderr. Exit codes: 0 success, 1 bad input, 2 bad
//! configuration or a size cap exceeded.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::CostBreakdown;
use crate::expr::VarSet;
use crate::joint::{solve_joint, JointError};
use crate::lang::{parse_network, parse_statements, NetworkSpec, Query};
use crate::mesa::{
    add_query_margins, answer_query, solve, AnnealConfig, Diagnostics, Solution, SolveError,
};
use crate::oracle::{
    brute_cost_min, compare, exact_me_consistent, Comparison, OracleError, OracleMethod,
    OracleReport,
};
use crate::tables::{conditional_prob, entropy, JointTable};

pub const SCHEMA: &str = "mesa-net/1";

#[derive(Parser, Debug)]
#[command(
    name = "mesa",
    version,
    about = "Maximum-entropy inference over probabilistic rule networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse a network and summarize it.
    Validate { path: PathBuf },
    /// Solve a network with the marginal annealer.
    Solve {
        path: PathBuf,
        #[command(flatten)]
        anneal: AnnealArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Exact full-joint reference solution (small networks only).
    Oracle {
        path: PathBuf,
        /// Minimize cost instead of treating the rules as exact constraints.
        #[arg(long)]
        cost_min: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Solve and compare against the full-joint reference.
    Compare {
        path: PathBuf,
        #[arg(long)]
        cost_min: bool,
        #[command(flatten)]
        anneal: AnnealArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Anneal an explicit synthetic sample of `--n` records.
    Joint {
        path: PathBuf,
        /// Number of records in the synthetic sample.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[command(flatten)]
        anneal: AnnealArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Args, Debug, Clone)]
pub struct AnnealArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fictitious sample size of the proposal distribution.
    #[arg(long, default_value_t = 1e4)]
    pub na: f64,
    #[arg(long, default_value_t = 1.1)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta0: f64,
    #[arg(long, default_value_t = 1.0)]
    pub a_beta: f64,
    #[arg(long, default_value_t = 1.5, allow_negative_numbers = true)]
    pub b_beta: f64,
    #[arg(long)]
    pub sweeps_per_temp: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub max_temps: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol_compat: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol_cost: f64,
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
}

impl AnnealArgs {
    pub fn config(&self) -> AnnealConfig {
        AnnealConfig {
            n_a: self.na,
            beta0: self.beta0,
            gamma: self.gamma,
            a_beta: self.a_beta,
            b_beta: self.b_beta,
            sweeps_per_temp: self.sweeps_per_temp,
            tol_compat: self.tol_compat,
            tol_cost: self.tol_cost,
            max_temps: self.max_temps,
            seed: self.seed,
            restarts: self.restarts,
            ..AnnealConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
}

#[derive(Args, Debug, Clone)]
pub struct OutputArgs {
    /// Write the result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub vars: VarSet,
    pub names: Vec<String>,
    pub probs: Vec<f64>,
    /// True for margins that exist only to answer a query.
    pub query_margin: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryAnswer {
    pub query: String,
    /// `None` when the condition has probability 0.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_rule: Vec<f64>,
    pub total: f64,
    pub irreducible: f64,
    pub infinite: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSection {
    pub method: OracleMethod,
    pub joint: Vec<f64>,
    pub cost: f64,
    pub entropy: f64,
    pub queries: Vec<QueryAnswer>,
    pub iterations: usize,
    pub max_violation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSection {
    pub n: usize,
    pub counts: Vec<usize>,
    pub joint: Vec<f64>,
    pub cost: f64,
    pub entropy: f64,
    pub queries: Vec<QueryAnswer>,
    pub steps: usize,
    pub beta_final: f64,
}

/// Everything a command reports. Sections a command does not produce are
/// `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema: String,
    pub command: String,
    /// SHA-256 of the network's canonical rendering.
    pub spec_digest: String,
    pub variables: Vec<String>,
    pub config: Option<AnnealConfig>,
    pub margins: Vec<MarginRecord>,
    pub queries: Vec<QueryAnswer>,
    pub cost: Option<CostReport>,
    pub diagnostics: Option<Diagnostics>,
    pub oracle: Option<OracleSection>,
    pub comparison: Option<Comparison>,
    pub joint: Option<JointSection>,
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn input(message: impl ToString) -> Self {
        Failure {
            code: 1,
            message: message.to_string(),
        }
    }

    fn config(message: impl ToString) -> Self {
        Failure {
            code: 2,
            message: message.to_string(),
        }
    }
}

impl From<SolveError> for Failure {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Config(_) | SolveError::Cap { .. } => Failure::config(e),
            _ => Failure::input(e),
        }
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::CapExceeded { .. } => Failure::config(e),
            _ => Failure::input(e),
        }
    }
}

impl From<JointError> for Failure {
    fn from(e: JointError) -> Self {
        match e {
            JointError::Config(_) | JointError::CapExceeded { .. } => Failure::config(e),
            _ => Failure::input(e),
        }
    }
}

pub fn spec_digest(spec: &NetworkSpec) -> String {
    hex::encode(Sha256::digest(spec.to_string().as_bytes()))
}

fn read_input(path: &PathBuf) -> Result<String, Failure> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| Failure::input(format!("stdin: {e}")))?;
        Ok(s)
    } else {
        fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
    }
}

fn load(path: &PathBuf, allow_empty: bool) -> Result<NetworkSpec, Failure> {
    let text = read_input(path)?;
    let parsed = if allow_empty {
        parse_statements(&text)
    } else {
        parse_network(&text)
    };
    parsed.map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn render_query(spec: &NetworkSpec, q: &Query) -> String {
    if q.condition.is_true() {
        format!("p({})", spec.render_expr(&q.consequent))
    } else {
        format!(
            "p({} | {})",
            spec.render_expr(&q.consequent),
            spec.render_expr(&q.condition)
        )
    }
}

fn answers_from_joint(spec: &NetworkSpec, joint: &JointTable) -> Vec<QueryAnswer> {
    let t = joint.as_table();
    spec.queries
        .iter()
        .map(|q| QueryAnswer {
            query: render_query(spec, q),
            value: conditional_prob(&t, &q.consequent, &q.condition).ok(),
        })
        .collect()
}

fn base_result(command: &str, spec: &NetworkSpec, config: Option<AnnealConfig>) -> RunResult {
    RunResult {
        schema: SCHEMA.to_string(),
        command: command.to_string(),
        spec_digest: spec_digest(spec),
        variables: spec.variables.clone(),
        config,
        margins: Vec::new(),
        queries: Vec::new(),
        cost: None,
        diagnostics: None,
        oracle: None,
        comparison: None,
        joint: None,
    }
}

fn fill_solution(result: &mut RunResult, spec: &NetworkSpec, sol: &Solution) {
    result.margins = sol
        .margins
        .iter()
        .enumerate()
        .map(|(i, m)| MarginRecord {
            vars: m.vars().clone(),
            names: m.vars().iter().map(|v| spec.var_name(v)).collect(),
            probs: m.probs().to_vec(),
            query_margin: i >= sol.rule_margins,
        })
        .collect();
    result.queries = spec
        .queries
        .iter()
        .map(|q| QueryAnswer {
            query: render_query(spec, q),
            value: answer_query(sol, q).ok(),
        })
        .collect();
    let CostBreakdown {
        per_rule,
        total,
        infinite,
    } = sol.final_cost.clone();
    result.cost = Some(CostReport {
        per_rule,
        total,
        irreducible: sol.irreducible_cost,
        infinite,
    });
    result.diagnostics = Some(sol.diagnostics.clone());
}

fn oracle_section(spec: &NetworkSpec, r: &OracleReport) -> OracleSection {
    OracleSection {
        method: r.method,
        joint: r.joint.probs().to_vec(),
        cost: r.cost,
        entropy: r.entropy,
        queries: answers_from_joint(spec, &r.joint),
        iterations: r.iterations,
        max_violation: r.max_violation,
    }
}

fn run_oracle(spec: &NetworkSpec, cost_min: bool) -> Result<OracleReport, Failure> {
    Ok(if cost_min {
        brute_cost_min(spec)?
    } else {
        exact_me_consistent(spec)?
    })
}

fn write_result(
    result: &RunResult,
    output: &OutputArgs,
    stdout: &mut dyn Write,
) -> Result<(), Failure> {
    let Format::Json = output.format;
    let mut json = serde_json::to_string_pretty(result).map_err(Failure::input)?;
    json.push('\n');
    match &output.out {
        Some(path) => {
            fs::write(path, json).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
        }
        None => stdout.write_all(json.as_bytes()).map_err(Failure::input),
    }
}

fn fmt_answers(answers: &[QueryAnswer]) -> String {
    answers
        .iter()
        .map(|a| match a.value {
            Some(v) => format!("  {} = {v:.6}", a.query),
            None => format!("  {} undefined", a.query),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn validate(spec: &NetworkSpec, stdout: &mut dyn Write) -> Result<(), Failure> {
    let with_queries = add_query_margins(spec)?;
    let names = |s: &VarSet| {
        s.iter()
            .map(|v| spec.var_name(v))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let mut text = String::new();
    text += &format!("variables ({}): {}\n", spec.k(), spec.variables.join(" "));
    text += &format!("rules ({}):\n", spec.rules.len());
    for line in spec
        .to_string()
        .lines()
        .filter(|l| l.starts_with("p(") || l.starts_with("table("))
    {
        text += &format!("  {line}\n");
    }
    let family = spec.influence_family();
    text += &format!("influence sets ({}):\n", family.len());
    for s in &family {
        text += &format!("  {{{}}}\n", names(s));
    }
    text += &format!("closure family size: {}\n", spec.closure_family().len());
    text += &format!("queries ({}):\n", spec.queries.len());
    for q in &spec.queries {
        text += &format!("  {}\n", render_query(spec, q));
    }
    text += &format!("query margins ({}):\n", with_queries.query_margins.len());
    for s in &with_queries.query_margins {
        text += &format!("  {{{}}}\n", names(s));
    }
    stdout.write_all(text.as_bytes()).map_err(Failure::input)
}

fn execute(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    let started = Instant::now();
    let mut note = |s: String| {
        let _ = writeln!(stderr, "{s}");
    };
    match cli.command {
        Command::Validate { path } => {
            let spec = load(&path, false)?;
            validate(&spec, stdout)?;
        }
        Command::Solve {
            path,
            anneal,
            output,
        } => {
            let spec = load(&path, false)?;
            let cfg = anneal.config();
            cfg.validate().map_err(Failure::config)?;
            let sol = solve(&spec, &cfg)?;
            let mut result = base_result("solve", &spec, Some(cfg));
            fill_solution(&mut result, &spec, &sol);
            write_result(&result, &output, stdout)?;
            note(format!(
                "cost {:.6} (floor {:.6}), {} temperatures, {}\n{}",
                sol.final_cost.total,
                sol.irreducible_cost,
                sol.diagnostics.temps_run,
                if sol.diagnostics.converged {
                    "converged"
                } else {
                    "stopped at max_temps"
                },
                fmt_answers(&result.queries)
            ));
        }
        Command::Oracle {
            path,
            cost_min,
            output,
        } => {
            let spec = load(&path, true)?;
            let report = run_oracle(&spec, cost_min)?;
            let mut result = base_result("oracle", &spec, None);
            let section = oracle_section(&spec, &report);
            result.queries = section.queries.clone();
            result.oracle = Some(section);
            write_result(&result, &output, stdout)?;
            note(format!(
                "oracle cost {:.6}, entropy {:.6}\n{}",
                report.cost,
                report.entropy,
                fmt_answers(&result.queries)
            ));
        }
        Command::Compare {
            path,
            cost_min,
            anneal,
            output,
        } => {
            let spec = load(&path, false)?;
            let cfg = anneal.config();
            cfg.validate().map_err(Failure::config)?;
            let report = run_oracle(&spec, cost_min)?;
            let sol = solve(&spec, &cfg)?;
            let cmp = compare(&spec, &sol, &report);
            let mut result = base_result("compare", &spec, Some(cfg));
            fill_solution(&mut result, &spec, &sol);
            result.oracle = Some(oracle_section(&spec, &report));
            note(format!(
                "margin L-inf {:.3e}, cost delta {:.3e}",
                cmp.linf, cmp.cost_delta
            ));
            result.comparison = Some(cmp);
            write_result(&result, &output, stdout)?;
        }
        Command::Joint {
            path,
            n,
            anneal,
            output,
        } => {
            let spec = load(&path, false)?;
            let cfg = anneal.config();
            cfg.validate().map_err(Failure::config)?;
            let js = solve_joint(&spec, n, &cfg)?;
            let sol = solve(&spec, &cfg)?;
            let mut result = base_result("joint", &spec, Some(cfg));
            fill_solution(&mut result, &spec, &sol);
            let section = JointSection {
                n,
                counts: js.run.sample.counts().to_vec(),
                joint: js.joint.probs().to_vec(),
                cost: js.run.cost,
                entropy: entropy(js.joint.probs()),
                queries: answers_from_joint(&spec, &js.joint),
                steps: js.run.steps,
                beta_final: js.run.beta_final,
            };
            note(format!(
                "sample of {n}: cost {:.6}; marginal solver: cost {:.6}; floor {:.6}",
                section.cost, sol.final_cost.total, sol.irreducible_cost
            ));
            result.joint = Some(section);
            write_result(&result, &output, stdout)?;
        }
    }
    note(format!("elapsed {:.3} s", started.elapsed().as_secs_f64()));
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return e.exit_code();
        }
    };
    match execute(cli, stdout, stderr) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_text(args: &[&str], text: &str) -> (i32, String, String) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mesa");
        fs::write(&path, text).unwrap();
        let mut full: Vec<String> = vec!["mesa".into()];
        for a in args {
            full.push(if *a == "@" {
                path.display().to_string()
            } else {
                a.to_string()
            });
        }
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(full, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn validate_summary() {
        let (code, out, _) = run_text(
            &["validate", "@"],
            "var A B C\np(B | A) = 0.3\np(C) = 0.5\nquery(A | C)",
        );
        assert_eq!(code, 0);
        assert!(out.contains("{A, B}"));
        assert!(out.contains("{C}"));
        assert!(out.contains("{A, C}"));
    }

    #[test]
    fn validate_errors() {
        let (code, _, err) = run_text(&["validate", "@"], "var A\np(B) = 0.3");
        assert_eq!(code, 1);
        assert!(err.contains("`B`") && err.contains("line 2"));
        let (code, _, err) = run_text(&["validate", "@"], "");
        assert_eq!(code, 1);
        assert!(err.contains("no rules"));
    }

    #[test]
    fn bad_schedule_exits_2() {
        let (code, _, err) = run_text(&["solve", "@", "--b-beta", "2.5"], "var A\np(A) = 0.8");
        assert_eq!(code, 2);
        assert!(err.contains("b_beta must lie in (1,2)"));
    }

    #[test]
    fn oracle_without_rules() {
        let (code, out, _) = run_text(&["oracle", "@"], "var A B");
        assert_eq!(code, 0);
        let r: RunResult = serde_json::from_str(&out).unwrap();
        let o = r.oracle.unwrap();
        assert!(o.joint.iter().all(|p| (p - 0.25).abs() < 1e-15));
        assert!((o.entropy - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn solve_round_trips() {
        let (code, out, _) = run_text(
            &["solve", "@", "--max-temps", "20"],
            "var A1 A2\np(A1) = 0.8\nquery(A2 | A1)",
        );
        assert_eq!(code, 0);
        let r: RunResult = serde_json::from_str(&out).unwrap();
        assert_eq!(r.schema, SCHEMA);
        let again = serde_json::to_string_pretty(&r).unwrap() + "\n";
        assert_eq!(again, out);
        assert!(!r.diagnostics.unwrap().converged);
    }
}
