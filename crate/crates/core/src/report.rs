//! Aggregation of campaign reports across seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::CampaignReport;
use crate::dut::VulnId;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no reports given")]
    Empty,
    #[error("report {index} was produced by a different configuration")]
    MixedConfigs { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1} ± {:.1}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnSummary {
    pub vuln: VulnId,
    /// Runs in which the vulnerability was hit.
    pub runs_hit: usize,
    /// First-hit iteration over the runs that hit it.
    pub first_hit: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub vulns: Vec<VulnSummary>,
    /// Packets delivered per iteration.
    pub iteration_length: MeanStd,
    pub final_coverage: MeanStd,
}

/// Ignores what legitimately differs between runs of one experiment.
fn fingerprint(r: &CampaignReport) -> String {
    let mut cfg = r.config.clone();
    cfg.seed = 0;
    cfg.to_toml()
}

pub fn summarize(reports: &[CampaignReport]) -> Result<Summary, ReportError> {
    let first = reports.first().ok_or(ReportError::Empty)?;
    let expected = fingerprint(first);
    if let Some(index) = reports.iter().position(|r| fingerprint(r) != expected) {
        return Err(ReportError::MixedConfigs { index });
    }
    let vulns = VulnId::ALL
        .iter()
        .map(|&vuln| {
            let hits: Vec<f64> = reports.iter().filter_map(|r| r.first_hit(vuln)).map(|i| i as f64).collect();
            VulnSummary { vuln, runs_hit: hits.len(), first_hit: MeanStd::of(&hits) }
        })
        .collect();
    let lengths: Vec<f64> = reports
        .iter()
        .map(|r| r.iterations.iter().map(|x| x.packets as f64).sum::<f64>() / r.iterations.len().max(1) as f64)
        .collect();
    let coverage: Vec<f64> = reports.iter().map(|r| r.final_coverage).collect();
    Ok(Summary {
        runs: reports.len(),
        seeds: reports.iter().map(|r| r.config.seed).collect(),
        vulns,
        iteration_length: MeanStd::of(&lengths).expect("at least one report"),
        final_coverage: MeanStd::of(&coverage).expect("at least one report"),
    })
}

impl Summary {
    /// Plain-text table; a vulnerability never hit shows as `NO`.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "runs: {} (seeds {:?})", self.runs, self.seeds);
        let _ = writeln!(out, "{:<6} {:<24} runs", "vuln", "first hit (iterations)");
        for v in &self.vulns {
            let cell = v.first_hit.map_or_else(|| "NO".to_string(), |m| m.to_string());
            let _ = writeln!(out, "{:<6} {:<24} {}/{}", v.vuln, cell, v.runs_hit, self.runs);
        }
        let _ = writeln!(out, "packets per iteration: {}", self.iteration_length);
        let _ = writeln!(out, "final coverage: {:.4} ± {:.4}", self.final_coverage.mean, self.final_coverage.std);
        out
    }
}

/// Coverage curve averaged across runs, one row per iteration every run reached.
pub fn merged_coverage_csv(reports: &[CampaignReport]) -> String {
    let mut out = String::from("iteration,mean_cumulative_edges,std_cumulative_edges,mean_coverage_fraction\n");
    let rows = reports.iter().map(|r| r.iterations.len()).min().unwrap_or(0);
    for i in 0..rows {
        let edges: Vec<f64> = reports.iter().map(|r| r.iterations[i].cumulative_edges as f64).collect();
        let frac: Vec<f64> = reports.iter().map(|r| r.iterations[i].coverage_fraction).collect();
        let e = MeanStd::of(&edges).expect("non-empty");
        let f = MeanStd::of(&frac).expect("non-empty");
        let _ = writeln!(out, "{},{:.3},{:.3},{:.6}", reports[0].iterations[i].iteration, e.mean, e.std, f.mean);
    }
    out
}
