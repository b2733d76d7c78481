//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::CampaignConfig;
use crate::coordinator::{replay, run_campaign, run_fuzzing_epoch, CampaignReport, CrashRecord};
use crate::harness::{harness_execute, HarnessInput};
use crate::report::{merged_coverage_csv, summarize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
/// A crash was found, detected or reproduced.
pub const EXIT_CRASH: i32 = 2;
pub const EXIT_NOT_REPRODUCED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "meshfuzz", version, about = "Stateful fuzzer for mesh link establishment messages")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulated campaign and write report.json, coverage.csv and crashes/.
    Fuzz {
        /// Campaign TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured campaign seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured iteration count.
        #[arg(long)]
        iterations: Option<u64>,
        /// Independent campaigns with consecutive seeds, run in parallel.
        #[arg(long, default_value_t = 1)]
        runs: u32,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one physical-mode epoch and print the reboot-count verdict.
    Epoch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epoch_size: u32,
    },
    /// Execute one harness input file and print the result as JSON.
    Harness {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sanitizer: bool,
    },
    /// Re-deliver a recorded crash to a fresh DUT.
    Replay { crash: PathBuf },
    /// Aggregate campaign reports into a first-hit table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the merged coverage curve here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

fn load_config(path: &Path) -> Result<CampaignConfig, String> {
    CampaignConfig::load(path).map_err(|e| e.to_string())
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Fuzz { config, seed, iterations, runs, out } => fuzz(&config, seed, iterations, runs, &out),
        Command::Epoch { config, epoch_size } => epoch(&config, epoch_size),
        Command::Harness { input, sanitizer } => harness(&input, sanitizer),
        Command::Replay { crash } => replay_cmd(&crash),
        Command::Report { reports, csv } => report(&reports, csv.as_deref()),
    };
    result.unwrap_or_else(|msg| {
        eprintln!("error: {msg}");
        EXIT_ERROR
    })
}

fn fuzz(path: &Path, seed: Option<u64>, iterations: Option<u64>, runs: u32, out: &Path) -> Result<i32, String> {
    let mut cfg = load_config(path)?;
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.iterations = iterations.unwrap_or(cfg.iterations);
    cfg.validate().map_err(|e| e.to_string())?;
    if runs == 0 {
        return Err("--runs must be at least 1".into());
    }
    let configs: Vec<CampaignConfig> =
        (0..runs as u64).map(|r| CampaignConfig { seed: cfg.seed.wrapping_add(r), ..cfg.clone() }).collect();
    let reports: Vec<CampaignReport> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run_campaign(c))).collect();
        handles.into_iter().map(|h| h.join().expect("campaign thread panicked")).collect::<Result<_, _>>()
    })
    .map_err(|e| e.to_string())?;

    let mut crashed = false;
    for r in &reports {
        let dir = if runs == 1 { out.to_path_buf() } else { out.join(format!("run_{}", r.config.seed)) };
        r.write_artifacts(&dir).map_err(|e| format!("cannot write {}: {e}", dir.display()))?;
        crashed |= !r.crashes.is_empty();
        println!(
            "seed {}: {} iterations, {}/{} edges ({:.4}), {} crashes -> {}",
            r.config.seed,
            r.iterations.len(),
            r.final_edges,
            r.reachable_edges,
            r.final_coverage,
            r.crashes.len(),
            dir.display()
        );
    }
    if runs > 1 {
        let summary = summarize(&reports).map_err(|e| e.to_string())?;
        std::fs::write(out.join("summary.txt"), summary.table()).map_err(|e| e.to_string())?;
        std::fs::write(out.join("coverage_merged.csv"), merged_coverage_csv(&reports)).map_err(|e| e.to_string())?;
        print!("{}", summary.table());
    }
    Ok(if crashed { EXIT_CRASH } else { EXIT_OK })
}

fn epoch(path: &Path, n: u32) -> Result<i32, String> {
    if n == 0 {
        return Err("--epoch-size must be at least 1".into());
    }
    let cfg = load_config(path)?;
    let r = run_fuzzing_epoch(&cfg, n).map_err(|e| e.to_string())?;
    println!("{}", serde_json::to_string_pretty(&r).expect("epoch result serializes"));
    Ok(if r.unexpected_reboot { EXIT_CRASH } else { EXIT_OK })
}

fn harness(path: &Path, sanitizer: bool) -> Result<i32, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let input = HarnessInput::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let r = harness_execute(&input, sanitizer).map_err(|e| e.to_string())?;
    println!("{}", serde_json::to_string_pretty(&r).expect("harness result serializes"));
    Ok(if r.crash().is_some() { EXIT_CRASH } else { EXIT_OK })
}

fn replay_cmd(path: &Path) -> Result<i32, String> {
    let record: CrashRecord =
        serde_json::from_str(&read(path)?).map_err(|e| format!("invalid crash record {}: {e}", path.display()))?;
    let r = replay(&record);
    match r.crash {
        Some((kind, vuln)) if r.reproduces(&record) => {
            println!("reproduced {vuln} ({kind:?}) after {} packets", r.packets);
            Ok(EXIT_CRASH)
        }
        other => {
            println!("not reproduced: expected {}, got {other:?} after {} packets", record.vuln, r.packets);
            Ok(EXIT_NOT_REPRODUCED)
        }
    }
}

fn report(paths: &[PathBuf], csv: Option<&Path>) -> Result<i32, String> {
    let reports = paths
        .iter()
        .map(|p| {
            serde_json::from_str::<CampaignReport>(&read(p)?)
                .map_err(|e| format!("invalid report {}: {e}", p.display()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(&reports).map_err(|e| e.to_string())?;
    print!("{}", summary.table());
    if let Some(csv) = csv {
        std::fs::write(csv, merged_coverage_csv(&reports))
            .map_err(|e| format!("cannot write {}: {e}", csv.display()))?;
    }
    Ok(EXIT_OK)
}
