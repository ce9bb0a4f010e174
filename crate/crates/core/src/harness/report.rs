use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

use super::{stream_manifest, ExperimentConfig, RunResult, RunStatus};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub name: &'static str,
    /// Mean of the per-seed means.
    pub mean: f64,
    /// Sample standard deviation of the per-seed means (0 for one seed).
    pub seed_std: f64,
    /// Sample standard deviation over all runs.
    pub run_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub metrics: Vec<MetricSummary>,
    pub runs: usize,
    pub seeds: usize,
    pub failed_runs: usize,
}

impl Summary {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    /// Mean of a metric; panics on an unknown name.
    pub fn mean(&self, name: &str) -> f64 {
        self.get(name)
            .unwrap_or_else(|| panic!("unknown metric {name}"))
            .mean
    }
}

type Getter = fn(&RunResult) -> f64;

const METRICS: [(&str, Getter); 8] = [
    ("upper_all", |r| r.upper_all),
    ("upper_oneshot", |r| r.upper_oneshot),
    ("ltm_all", |r| r.ltm_all),
    ("ltm_oneshot", |r| r.ltm_oneshot),
    ("sti_all", |r| r.sti_all),
    ("sti_oneshot", |r| r.sti_oneshot),
    ("lti_all", |r| r.lti_all),
    ("lti_oneshot", |r| r.lti_oneshot),
];

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

pub fn summarize(results: &[RunResult]) -> Summary {
    let mut seeds: Vec<u64> = Vec::new();
    for r in results {
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }
    let metrics = METRICS
        .iter()
        .map(|&(name, get)| {
            let seed_means: Vec<f64> = seeds
                .iter()
                .map(|&s| {
                    let v: Vec<f64> = results.iter().filter(|r| r.seed == s).map(get).collect();
                    mean_std(&v).0
                })
                .collect();
            let all: Vec<f64> = results.iter().map(get).collect();
            let (mean, seed_std) = mean_std(&seed_means);
            MetricSummary {
                name,
                mean,
                seed_std,
                run_std: mean_std(&all).1,
            }
        })
        .collect();
    Summary {
        metrics,
        runs: results.len(),
        seeds: seeds.len(),
        failed_runs: results.iter().filter(|r| r.status != RunStatus::Ok).count(),
    }
}

fn pct(s: &Summary, name: &str) -> String {
    let m = s.get(name).expect("known metric");
    format!("{:.2}% ± {:.2}%", 100.0 * m.mean, 100.0 * m.seed_std)
}

/// Accuracy table in the layout of the reference results table.
pub fn render_table(s: &Summary) -> String {
    let rows = [
        (
            "LTM",
            pct(s, "upper_all"),
            pct(s, "ltm_all"),
            pct(s, "ltm_oneshot"),
        ),
        (
            "LTM+AHA - Short Term Inference",
            "NA".into(),
            pct(s, "sti_all"),
            pct(s, "sti_oneshot"),
        ),
        (
            "LTM+AHA - Long Term Inference",
            "NA".into(),
            pct(s, "lti_all"),
            pct(s, "lti_oneshot"),
        ),
    ];
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<32}{:<24}{:<24}one-shot classes",
        "Model/Test", "no one-shot learning", "all classes"
    );
    for (name, a, b, c) in rows {
        let _ = writeln!(out, "{name:<32}{a:<24}{b:<24}{c}");
    }
    let _ = writeln!(
        out,
        "\n{} runs over {} seed(s); {} failed run(s). ± is the standard deviation of per-seed means.",
        s.runs, s.seeds, s.failed_runs
    );
    let _ = writeln!(
        out,
        "No one-shot learning, one-shot class: {}",
        pct(s, "upper_oneshot")
    );
    out
}

/// Writes `results.csv` and `summary.txt` into `dir`.
pub fn write_report(results: &[RunResult], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    for r in results {
        w.serialize(r)?;
    }
    w.flush()?;
    std::fs::write(dir.join("summary.txt"), render_table(&summarize(results)))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<RunResult>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<RunResult>, _>>()?;
    Ok(rows)
}

/// Writes `manifest.csv` (every derived stream seed) and the effective
/// `config.toml`.
pub fn write_manifest(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    w.write_record(["base_seed", "stream", "index", "derived_seed"])?;
    for (base, name, index, derived) in stream_manifest(config) {
        w.write_record([
            base.to_string(),
            name,
            index.to_string(),
            derived.to_string(),
        ])?;
    }
    w.flush()?;
    std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(seed: u64, run: usize, sti_oneshot: f64) -> RunResult {
        RunResult {
            seed,
            run_index: run,
            novel_class: 100 + run,
            upper_all: 1.0,
            upper_oneshot: 1.0,
            ltm_all: 0.95,
            ltm_oneshot: 0.0,
            sti_all: 0.8,
            sti_oneshot,
            lti_all: 0.95,
            lti_oneshot: 1.0,
            buffer_size: 25,
            buffer_novel: 2,
            status: RunStatus::Ok,
        }
    }

    #[test]
    fn std_is_across_seed_means() {
        // seed means of sti_oneshot: 0.5 and 1.0 -> mean 0.75, sample std sqrt(0.125)
        let rs = vec![
            result(0, 0, 0.0),
            result(0, 1, 1.0),
            result(1, 0, 1.0),
            result(1, 1, 1.0),
        ];
        let s = summarize(&rs);
        let m = s.get("sti_oneshot").unwrap();
        assert!((m.mean - 0.75).abs() < 1e-15);
        assert!((m.seed_std - 0.125f64.sqrt()).abs() < 1e-15);
        assert!((m.run_std - 0.25f64.sqrt()).abs() < 1e-15);
        assert_eq!((s.runs, s.seeds, s.failed_runs), (4, 2, 0));
    }

    #[test]
    fn csv_round_trip_recomputes_summary() {
        let dir = tempfile::tempdir().unwrap();
        let mut rs = vec![result(3, 0, 1.0), result(3, 1, 0.0)];
        rs[1].status = RunStatus::RecallCollapse;
        write_report(&rs, dir.path()).unwrap();
        let back = read_results(&dir.path().join("results.csv")).unwrap();
        assert_eq!(back, rs);
        let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(summarize(&back), summarize(&rs));
        let table = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(table.contains("LTM+AHA - Short Term Inference"));
        assert!(table.contains("1 failed run(s)"));
    }
}
