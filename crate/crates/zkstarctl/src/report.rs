//! Timing, speedup and detection-quality tables over sweep results.

use crate::sweep::{CellResult, SweepConfig, WindowRow};
use crate::HarnessError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use zkstar_regulator::{findings_jsonl, Finding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    #[serde(rename = "D")]
    pub d: usize,
    pub psf: u8,
    pub tc_prove_ms_mean: f64,
    pub tc_prove_ms_std: f64,
    pub sc_prove_ms_mean: f64,
    pub sc_prove_ms_std: f64,
    pub verify_ms_mean: f64,
    pub tc_witness_bytes_mean: f64,
    pub sc_witness_bytes_mean: f64,
    pub tc_proofs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Sample standard deviation; zero below two samples.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl TimingTable {
    /// Pool every seed of each (D, psf) pair.
    pub fn from_cells(cells: &[CellResult]) -> Self {
        let mut groups: BTreeMap<(usize, u8), Vec<&CellResult>> = BTreeMap::new();
        for c in cells {
            groups.entry((c.d, c.psf)).or_default().push(c);
        }
        let rows = groups
            .into_iter()
            .map(|((d, psf), cs)| {
                let pool = |f: fn(&CellResult) -> &Vec<f64>| cs.iter().flat_map(|c| f(c).iter().copied()).collect::<Vec<f64>>();
                let bytes = |f: fn(&CellResult) -> &Vec<usize>| cs.iter().flat_map(|c| f(c).iter().map(|&b| b as f64)).collect::<Vec<f64>>();
                let tc = pool(|c| &c.tc_prove_ms);
                let sc = pool(|c| &c.sc_prove_ms);
                TimingRow {
                    d,
                    psf,
                    tc_prove_ms_mean: mean(&tc),
                    tc_prove_ms_std: std_dev(&tc),
                    sc_prove_ms_mean: mean(&sc),
                    sc_prove_ms_std: std_dev(&sc),
                    verify_ms_mean: mean(&pool(|c| &c.verify_ms)),
                    tc_witness_bytes_mean: mean(&bytes(|c| &c.tc_witness_bytes)),
                    sc_witness_bytes_mean: mean(&bytes(|c| &c.sc_witness_bytes)),
                    tc_proofs: tc.len(),
                }
            })
            .collect();
        Self { rows }
    }

    /// Row carrying only the TC proving mean, for tables built from external measurements.
    pub fn with_tc_means(entries: &[(usize, u8, f64)]) -> Self {
        let rows = entries
            .iter()
            .map(|&(d, psf, ms)| TimingRow {
                d,
                psf,
                tc_prove_ms_mean: ms,
                tc_prove_ms_std: 0.0,
                sc_prove_ms_mean: 0.0,
                sc_prove_ms_std: 0.0,
                verify_ms_mean: 0.0,
                tc_witness_bytes_mean: 0.0,
                sc_witness_bytes_mean: 0.0,
                tc_proofs: 0,
            })
            .collect();
        Self { rows }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    #[serde(rename = "D")]
    pub d: usize,
    pub psf: u8,
    pub mean_ms: f64,
    pub baseline_ms: f64,
    pub speedup: f64,
}

/// `speedup(D) = D · mean(D=1) / mean(D)` over TC proving time, per psf.
pub fn compute_speedup(table: &TimingTable) -> Result<Vec<SpeedupRow>, HarnessError> {
    let mut out = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let base = table
            .rows
            .iter()
            .find(|r| r.d == 1 && r.psf == row.psf)
            .filter(|r| r.tc_prove_ms_mean > 0.0)
            .ok_or(HarnessError::MissingBaseline(row.psf))?;
        let speedup = if row.tc_prove_ms_mean > 0.0 { row.d as f64 * base.tc_prove_ms_mean / row.tc_prove_ms_mean } else { f64::INFINITY };
        out.push(SpeedupRow { d: row.d, psf: row.psf, mean_ms: row.tc_prove_ms_mean, baseline_ms: base.tc_prove_ms_mean, speedup });
    }
    Ok(out)
}

/// Detection quality of one (D, psf) pair across its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellQuality {
    #[serde(rename = "D")]
    pub d: usize,
    pub psf: u8,
    pub seeds: Vec<u64>,
    pub windows: usize,
    /// Windows from the attack start to the first alarm, per seed.
    pub latency_windows: Vec<Option<u64>>,
    pub detected: usize,
    pub mean_latency_windows: Option<f64>,
    pub clean_windows: usize,
    pub false_alarms: usize,
    pub false_alarm_rate: Option<f64>,
    pub agreement_windows: usize,
    pub agreements: usize,
    pub agreement_rate: Option<f64>,
    pub knife_edge_excluded: usize,
    pub compliant_windows: usize,
    pub findings: usize,
    pub tampered_windows: usize,
    /// Tampered windows with at least one finding.
    pub tampered_flagged: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// First alarm at or after the attack window.
pub fn detection_latency(rows: &[WindowRow], attack_window: u64) -> Option<u64> {
    rows.iter().filter(|r| r.window >= attack_window && r.rho).map(|r| r.window - attack_window).min()
}

fn quality(config: &SweepConfig, d: usize, psf: u8, cells: &[&CellResult]) -> CellQuality {
    let rows: Vec<&WindowRow> = cells.iter().flat_map(|c| &c.rows).collect();
    let latency_windows: Vec<Option<u64>> = match config.attack_start_window() {
        Some(a) => cells.iter().map(|c| detection_latency(&c.rows, a)).collect(),
        None => Vec::new(),
    };
    let hits: Vec<f64> = latency_windows.iter().flatten().map(|&l| l as f64).collect();
    let clean: Vec<&&WindowRow> = rows.iter().filter(|r| config.clean(r.first_t, r.last_t)).collect();
    let false_alarms = clean.iter().filter(|r| r.rho).count();
    let decided: Vec<&&WindowRow> = rows.iter().filter(|r| !r.knife_edge).collect();
    let agreements = decided.iter().filter(|r| r.rho == r.rho_float).count();
    let tampered_flagged = cells
        .iter()
        .map(|c| c.tampered.iter().filter(|w| c.findings.iter().any(|f| f.window == **w)).count())
        .sum();
    CellQuality {
        d,
        psf,
        seeds: cells.iter().map(|c| c.seed).collect(),
        windows: rows.len(),
        detected: hits.len(),
        mean_latency_windows: (!hits.is_empty()).then(|| mean(&hits)),
        latency_windows,
        clean_windows: clean.len(),
        false_alarms,
        false_alarm_rate: ratio(false_alarms, clean.len()),
        agreement_windows: decided.len(),
        agreements,
        agreement_rate: ratio(agreements, decided.len()),
        knife_edge_excluded: rows.len() - decided.len(),
        compliant_windows: rows.iter().filter(|r| r.compliant).count(),
        findings: cells.iter().map(|c| c.findings.len()).sum(),
        tampered_windows: cells.iter().map(|c| c.tampered.len()).sum(),
        tampered_flagged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: SweepConfig,
    pub cells: Vec<CellQuality>,
    pub timings: TimingTable,
    pub speedup: Vec<SpeedupRow>,
    /// Set when the grid has no D=1 baseline.
    pub speedup_error: Option<String>,
    #[serde(skip)]
    pub rows: Vec<WindowRow>,
    #[serde(skip)]
    pub findings: Vec<Finding>,
}

pub fn detection_quality_report(config: &SweepConfig, results: &[CellResult]) -> Report {
    let mut groups: BTreeMap<(usize, u8), Vec<&CellResult>> = BTreeMap::new();
    for c in results {
        groups.entry((c.d, c.psf)).or_default().push(c);
    }
    let cells = groups.iter().map(|(&(d, psf), cs)| quality(config, d, psf, cs)).collect();
    let timings = TimingTable::from_cells(results);
    let (speedup, speedup_error) = match compute_speedup(&timings) {
        Ok(s) => (s, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    let mut rows: Vec<WindowRow> = results.iter().flat_map(|c| c.rows.iter().cloned()).collect();
    rows.sort_by_key(|r| (r.d, r.psf, r.seed, r.window));
    let findings = results.iter().flat_map(|c| c.findings.iter().cloned()).collect();
    Report { config: config.clone(), cells, timings, speedup, speedup_error, rows, findings }
}

fn csv_of<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| HarnessError::Csv(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Csv(e.to_string()))?;
    }
    w.into_inner().map_err(|e| HarnessError::Csv(e.to_string()))
}

pub const DETECTION_HEADER: [&str; 14] =
    ["D", "psf", "seed", "window", "first_t", "last_t", "attacked", "t_fixed", "t_float", "t_ucl", "rho", "rho_float", "knife_edge", "compliant"];

/// Write `detection.csv`, `timings.csv`, `speedup.csv`, `findings.jsonl` and `meta.json` into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("detection.csv"), csv_of(&report.rows, &DETECTION_HEADER)?)?;
    let timing_header = [
        "D",
        "psf",
        "tc_prove_ms_mean",
        "tc_prove_ms_std",
        "sc_prove_ms_mean",
        "sc_prove_ms_std",
        "verify_ms_mean",
        "tc_witness_bytes_mean",
        "sc_witness_bytes_mean",
        "tc_proofs",
    ];
    std::fs::write(dir.join("timings.csv"), csv_of(&report.timings.rows, &timing_header)?)?;
    std::fs::write(dir.join("speedup.csv"), csv_of(&report.speedup, &["D", "psf", "mean_ms", "baseline_ms", "speedup"])?)?;
    std::fs::write(dir.join("findings.jsonl"), findings_jsonl(&report.findings))?;
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Human-readable digest of a report directory's `meta.json`.
pub fn summarize(dir: &Path) -> Result<String, HarnessError> {
    let text = std::fs::read_to_string(dir.join("meta.json"))?;
    let report: Report = serde_json::from_str(&text)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    let mut out = String::from("D\tpsf\twindows\tdetected\tlatency\tFAR\tagreement\tcompliant\tfindings\n");
    for c in &report.cells {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}/{}\t{}\t{}\t{}\t{}/{}\t{}\n",
            c.d,
            c.psf,
            c.windows,
            c.detected,
            c.latency_windows.len(),
            fmt(c.mean_latency_windows),
            fmt(c.false_alarm_rate),
            fmt(c.agreement_rate),
            c.compliant_windows,
            c.windows,
            c.findings
        ));
    }
    if !report.speedup.is_empty() {
        out.push_str("\nD\tpsf\tspeedup\n");
        for s in &report.speedup {
            out.push_str(&format!("{}\t{}\t{:.2}\n", s.d, s.psf, s.speedup));
        }
    }
    if let Some(e) = &report.speedup_error {
        out.push_str(&format!("\nspeedup: {e}\n"));
    }
    Ok(out)
}
