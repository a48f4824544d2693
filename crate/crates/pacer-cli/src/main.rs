//! Operator command line: cluster corpora for padding, turn training
//! logs into schedule templates, run scripted simulations, and drive
//! the paired secret-independence checker.
//!
//! Exit codes: 0 success, 1 usage, 2 bad input data, 3 verification
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pacer_core::cluster::{
    cluster_videos, overhead, parse_corpus, round_multiple, round_pow2, Clustering, CorpusObject,
    OverheadReport,
};
use pacer_core::noninterference::{Mutant, Verdict};
use pacer_core::profile::profile_log;
use pacer_core::scenario::Scenario;
use pacer_core::schedule::ScheduleDb;
use pacer_core::tunnel::EventLog;
use pacer_core::types::{trace_project, FormatError, PacerConfig};

#[derive(Parser)]
#[command(
    name = "pacer",
    version,
    about = "Schedule-driven traffic shaping: cluster, profile, simulate, verify, report"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Group a corpus so every padded size is shared by at least
    /// --cmin objects; write the clusters and their overhead report.
    Cluster(ClusterArgs),
    /// Segment a training event log and synthesize schedule templates.
    Profile(ProfileArgs),
    /// Run one scripted simulation and write the observable trace.
    Simulate(SimulateArgs),
    /// Run secret-randomized paired executions of a scenario and
    /// report a verdict per pair.
    Verify(VerifyArgs),
    /// Recompute the overhead report for a stored clustering.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Algo {
    /// Greedy domination clustering with a minimum cluster size.
    Greedy,
    /// Round each segment up to the next power of two.
    Pow2,
    /// Round each segment up to the next multiple of the quantum.
    Multiple,
}

#[derive(Args)]
struct ClusterArgs {
    /// Corpus CSV: one `id,size1[,size2,...]` line per object.
    #[arg(long)]
    corpus: PathBuf,
    /// Minimum cluster size (greedy algorithm only).
    #[arg(long, default_value_t = 1)]
    cmin: usize,
    #[arg(long, value_enum, default_value_t = Algo::Greedy)]
    algo: Algo,
    /// Rounding quantum for --algo multiple.
    #[arg(long = "L", default_value_t = 100)]
    quantum: u64,
    /// Round ceilings up to whole 1500-byte packets before scoring.
    #[arg(long)]
    mtu_round: bool,
    /// Where to write the clusters (JSON lines).
    #[arg(long, default_value = "clusters.jsonl")]
    out_clusters: PathBuf,
    /// Where to write the report (CSV).
    #[arg(long, default_value = "report.csv")]
    out_report: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    /// Event log CSV: `ts,flow,event,arg` lines.
    #[arg(long)]
    log: PathBuf,
    /// Scenario-format file supplying the timing constants (epsilon,
    /// delta_xmit, delta_delay, ...). Defaults to production scale.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the template database (CSV).
    #[arg(long, default_value = "schedules.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file (key=value lines).
    #[arg(long)]
    scenario: PathBuf,
    /// Where to write the trace CSV.
    #[arg(long, default_value = "trace.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Scenario file; its public script is shared by every pair.
    #[arg(long)]
    scenario: PathBuf,
    /// Number of secret-randomized pairs to run.
    #[arg(long, default_value_t = 10)]
    pairs: u64,
    /// Plant a known leak and expect the checker to catch it.
    #[arg(long)]
    mutant: Option<Mutant>,
}

#[derive(Args)]
struct ReportArgs {
    /// Clustering JSONL as written by `cluster`.
    #[arg(long)]
    clustering: PathBuf,
    /// The corpus the clustering was built from.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    mtu_round: bool,
}

enum CliError {
    Data(String),
    Verification(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Data(_) => 2,
            CliError::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Data(m) | CliError::Verification(m) => m,
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

fn located(path: &Path, e: FormatError) -> CliError {
    CliError::Data(format!("{}:{}: {}", path.display(), e.line, e.msg))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.cmd {
        Cmd::Cluster(a) => run_cluster(a),
        Cmd::Profile(a) => run_profile(a),
        Cmd::Simulate(a) => run_simulate(a),
        Cmd::Verify(a) => run_verify(a),
        Cmd::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pacer: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// The report block shared by `cluster` and `report`: the standard
/// columns, then byte-level figures as a comment so the relative rows
/// stay directly comparable across runs.
fn render_report(r: &OverheadReport) -> String {
    let mut out = format!("{}\n{}\n", OverheadReport::csv_header(), r.to_csv_row());
    out.push_str(&format!(
        "# pad_bytes={} data_bytes={} padded_members={}\n",
        r.pad_bytes, r.data_bytes, r.padded_members
    ));
    if r.padded_members > 0 {
        out.push_str(
            "# members shorter than their cluster transmit whole dummy segments;\n\
             # those bytes appear in pad_bytes only, not in the relative columns\n",
        );
    }
    out
}

fn run_cluster(a: ClusterArgs) -> Result<(), CliError> {
    let corpus = parse_corpus(&read(&a.corpus)?).map_err(|e| located(&a.corpus, e))?;
    let clustering = match a.algo {
        Algo::Greedy => {
            if a.cmin < 1 || a.cmin > corpus.len() {
                return Err(CliError::Data(format!(
                    "cmin {} outside 1..={} (corpus size)",
                    a.cmin,
                    corpus.len()
                )));
            }
            cluster_videos(&corpus, a.cmin)
        }
        Algo::Pow2 => round_pow2(&corpus),
        Algo::Multiple => {
            if a.quantum < 1 {
                return Err(CliError::Data("quantum must be positive".into()));
            }
            round_multiple(&corpus, a.quantum)
        }
    };
    let mtu = a.mtu_round.then(|| PacerConfig::production_micros(1).mtu);
    let report = overhead(&clustering, &corpus, mtu);
    if a.algo == Algo::Pow2 {
        // The selling point of the power-of-two baseline is its bound;
        // state it only after checking it on this corpus, exactly.
        for o in &corpus {
            for &s in &o.segments {
                let pad = s.next_power_of_two() - s;
                if pad >= s {
                    return Err(CliError::Verification(format!(
                        "object {} size {s}: power-of-two pad {pad} >= size",
                        o.id
                    )));
                }
            }
        }
        println!("# power-of-two per-segment overhead < 1.0: ok");
    }
    write(&a.out_clusters, &clustering.to_jsonl())?;
    let rendered = render_report(&report);
    write(&a.out_report, &rendered)?;
    print!("{rendered}");
    Ok(())
}

fn run_profile(a: ProfileArgs) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(path) => Scenario::parse(&read(path)?).map_err(|e| located(path, e))?.cfg,
        None => PacerConfig::production_micros(1),
    };
    let log = EventLog::parse_csv(&read(&a.log)?).map_err(|e| located(&a.log, e))?;
    let (templates, skipped) = profile_log(&log, &cfg).map_err(|e| located(&a.log, e))?;
    for sid in &skipped {
        eprintln!("pacer: sid {sid}: no response burst in the log, skipped");
    }
    if templates.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no class yields a template",
            a.log.display()
        )));
    }
    let mut text = String::new();
    for t in &templates {
        text.push_str(&format!("{},{},{},{}\n", t.sid, t.initial_delay, t.spacing, t.count));
    }
    // Everything written must load back under the same constants.
    ScheduleDb::parse_csv(&text, &cfg)
        .map_err(|e| CliError::Data(format!("synthesized template failed validation: {e}")))?;
    write(&a.out, &text)?;
    println!(
        "wrote {} (templates: {}, skipped sids: {})",
        a.out.display(),
        templates.len(),
        skipped.len()
    );
    Ok(())
}

fn run_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let sc = Scenario::parse(&read(&a.scenario)?).map_err(|e| located(&a.scenario, e))?;
    let mut c = sc.build();
    c.run(sc.steps)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.scenario.display())))?;
    let trace = trace_project(&c.st.emitted);
    write(&a.out, &trace.to_csv())?;
    println!(
        "wrote {} ({} events over {} steps)",
        a.out.display(),
        trace.events.len(),
        sc.steps
    );
    Ok(())
}

fn run_verify(a: VerifyArgs) -> Result<(), CliError> {
    if a.pairs == 0 {
        return Err(CliError::Data("need at least one pair".into()));
    }
    let sc = Scenario::parse(&read(&a.scenario)?).map_err(|e| located(&a.scenario, e))?;
    let mut fails = 0u64;
    let mut conformance = 0u64;
    for i in 0..a.pairs {
        let report = sc.pair_setup(i).run_pair(a.mutant);
        println!("pair {i}: {}", report.verdict);
        match report.verdict {
            Verdict::Pass => {}
            Verdict::Fail { .. } => fails += 1,
            Verdict::Conformance { .. } => conformance += 1,
        }
    }
    println!(
        "verified {} pairs: {} PASS, {fails} FAIL, {conformance} CONFORMANCE",
        a.pairs,
        a.pairs - fails - conformance
    );
    if fails > 0 {
        return Err(CliError::Verification(format!("{fails} pair(s) FAILED")));
    }
    if conformance > 0 {
        // A model that breaks its own preconditions is bad input, not
        // an information leak; keep the exit codes apart.
        return Err(CliError::Data(format!("{conformance} pair(s) hit conformance violations")));
    }
    Ok(())
}

/// What `overhead` assumes, checked up front so a hand-edited file
/// reports a readable error instead of a panic.
fn check_cover(cl: &Clustering, corpus: &[CorpusObject]) -> Result<(), String> {
    let mut seen = std::collections::BTreeSet::new();
    for (i, c) in cl.clusters.iter().enumerate() {
        for id in &c.members {
            let Some(o) = corpus.iter().find(|o| &o.id == id) else {
                return Err(format!("cluster {i}: member {id:?} not in the corpus"));
            };
            if !seen.insert(id) {
                return Err(format!("member {id:?} appears in two clusters"));
            }
            if o.segments.len() > c.ceiling.len() {
                return Err(format!("cluster {i}: member {id:?} longer than the ceiling"));
            }
            for (k, s) in o.segments.iter().enumerate() {
                if c.ceiling[k] < *s {
                    return Err(format!("cluster {i}: ceiling under member {id:?} at {k}"));
                }
            }
        }
    }
    if seen.len() != corpus.len() {
        return Err(format!("clustering covers {} of {} objects", seen.len(), corpus.len()));
    }
    Ok(())
}

fn run_report(a: ReportArgs) -> Result<(), CliError> {
    let corpus = parse_corpus(&read(&a.corpus)?).map_err(|e| located(&a.corpus, e))?;
    let clustering = Clustering::parse_jsonl(&read(&a.clustering)?)
        .map_err(|e| located(&a.clustering, e))?;
    check_cover(&clustering, &corpus)
        .map_err(|m| CliError::Data(format!("{}: {m}", a.clustering.display())))?;
    let mtu = a.mtu_round.then(|| PacerConfig::production_micros(1).mtu);
    let report = overhead(&clustering, &corpus, mtu);
    print!("{}", render_report(&report));
    Ok(())
}
