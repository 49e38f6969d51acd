//! Aggregation of results rows into plot-ready CSV.

use mfsbi_core::metrics::MetricResult;
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no rows to report")]
    Empty,
    #[error("report CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed report: {0}")]
    Malformed(String),
}

/// Mean of per-seed means over observations, with a 95% t interval
/// across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub metric: String,
    pub hf_budget: usize,
    /// Algorithm, suffixed with the low-fidelity budget when an algorithm
    /// appears with several.
    pub label: String,
    pub mean: f64,
    pub ci95: f64,
    /// Seeds contributing.
    pub n: usize,
}

fn t_quantile(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64).expect("df > 0").inverse_cdf(0.975)
}

/// Mean and 95% half-width of `v`; the half-width is 0 for one value.
pub fn mean_ci(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, t_quantile(v.len() - 1) * (var / n).sqrt())
}

pub fn summarize(rows: &[MetricResult]) -> Result<Vec<Cell>, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut lf_budgets: BTreeMap<&str, std::collections::BTreeSet<usize>> = BTreeMap::new();
    for r in rows {
        lf_budgets.entry(&r.algorithm).or_default().insert(r.lf_budget);
    }
    // (metric, hf, label) -> seed -> values
    let mut groups: BTreeMap<(String, usize, String), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        let label = if lf_budgets[r.algorithm.as_str()].len() > 1 {
            format!("{}[lf={}]", r.algorithm, r.lf_budget)
        } else {
            r.algorithm.clone()
        };
        groups.entry((r.metric.clone(), r.hf_budget, label)).or_default().entry(r.seed).or_default().push(r.value);
    }
    Ok(groups
        .into_iter()
        .map(|((metric, hf_budget, label), seeds)| {
            let per_seed: Vec<f64> = seeds.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
            let (mean, ci95) = mean_ci(&per_seed);
            Cell { metric, hf_budget, label, mean, ci95, n: per_seed.len() }
        })
        .collect())
}

/// Pivoted CSV: one row per (metric, hf_budget), three columns per
/// algorithm (`mean`, `ci95`, `n`). Intervals from a single seed are
/// flagged with a trailing `note` column.
pub fn pivot_csv(cells: &[Cell]) -> Result<String, ReportError> {
    if cells.is_empty() {
        return Err(ReportError::Empty);
    }
    let labels: Vec<&str> = {
        let mut l: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        l.sort();
        l.dedup();
        l
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["metric".to_string(), "hf_budget".to_string()];
    for l in &labels {
        for col in ["mean", "ci95", "n"] {
            header.push(format!("{l}:{col}"));
        }
    }
    header.push("note".into());
    w.write_record(&header)?;
    let mut rows: BTreeMap<(&str, usize), BTreeMap<&str, &Cell>> = BTreeMap::new();
    for c in cells {
        rows.entry((&c.metric, c.hf_budget)).or_default().insert(&c.label, c);
    }
    for ((metric, hf), by_label) in rows {
        let mut rec = vec![metric.to_string(), hf.to_string()];
        let mut single = Vec::new();
        for l in &labels {
            match by_label.get(l) {
                Some(c) => {
                    rec.push(c.mean.to_string());
                    rec.push(c.ci95.to_string());
                    rec.push(c.n.to_string());
                    if c.n == 1 {
                        single.push(*l);
                    }
                }
                None => rec.extend(["".to_string(), "".to_string(), "".to_string()]),
            }
        }
        rec.push(if single.is_empty() { String::new() } else { format!("n=1: {}", single.join(" ")) });
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Malformed(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

/// Read a pivoted CSV back into cells.
pub fn parse_pivot_csv(text: &str) -> Result<Vec<Cell>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "metric" || &header[1] != "hf_budget" || &header[header.len() - 1] != "note" {
        return Err(ReportError::Malformed("unexpected header".into()));
    }
    let groups = (header.len() - 3) / 3;
    let mut out = Vec::new();
    let num = |s: &str| s.parse::<f64>().map_err(|_| ReportError::Malformed(format!("bad number `{s}`")));
    for rec in r.records() {
        let rec = rec?;
        let hf_budget = rec[1].parse().map_err(|_| ReportError::Malformed(format!("bad budget `{}`", &rec[1])))?;
        for g in 0..groups {
            let col = 2 + 3 * g;
            if rec[col].is_empty() {
                continue;
            }
            let label = header[col].strip_suffix(":mean").ok_or_else(|| ReportError::Malformed(header[col].to_string()))?;
            out.push(Cell {
                metric: rec[0].to_string(),
                hf_budget,
                label: label.to_string(),
                mean: num(&rec[col])?,
                ci95: num(&rec[col + 1])?,
                n: rec[col + 2].parse().map_err(|_| ReportError::Malformed(format!("bad n `{}`", &rec[col + 2])))?,
            });
        }
    }
    Ok(out)
}

/// One line per row, for per-observation plots.
pub fn long_csv(rows: &[MetricResult]) -> Result<String, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "algorithm", "lf_budget", "hf_budget", "seed", "observation_id", "metric", "value"])?;
    for r in rows {
        w.write_record([
            r.task.clone(),
            r.algorithm.clone(),
            r.lf_budget.to_string(),
            r.hf_budget.to_string(),
            r.seed.to_string(),
            r.observation_id.to_string(),
            r.metric.clone(),
            r.value.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Malformed(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

/// C2ST should fall as the high-fidelity budget grows; list the
/// algorithms where it does not.
pub fn monotonicity_warnings(cells: &[Cell]) -> Vec<String> {
    let mut by_label: BTreeMap<&str, Vec<&Cell>> = BTreeMap::new();
    for c in cells.iter().filter(|c| c.metric == "c2st") {
        by_label.entry(&c.label).or_default().push(c);
    }
    let mut out = Vec::new();
    for (label, mut cs) in by_label {
        cs.sort_by_key(|c| c.hf_budget);
        for w in cs.windows(2) {
            if w[1].mean > w[0].mean {
                out.push(format!(
                    "{label}: mean c2st rises from {:.3} at {} to {:.3} at {} high-fidelity simulations",
                    w[0].mean, w[0].hf_budget, w[1].mean, w[1].hf_budget
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(alg: &str, lf: usize, hf: usize, seed: u64, obs: usize, v: f64) -> MetricResult {
        MetricResult {
            task: "ou2".into(),
            algorithm: alg.into(),
            lf_budget: lf,
            hf_budget: hf,
            seed,
            observation_id: obs,
            metric: "c2st".into(),
            value: v,
            n_samples: 100,
            uncertainty: None,
        }
    }

    #[test]
    fn interval_matches_t_table() {
        // t_{0.975, 4} = 2.776445
        let (m, h) = mean_ci(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((h - 2.776_445 * (2.5f64 / 5.0).sqrt()).abs() < 1e-5);
        assert_eq!(mean_ci(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn seeds_average_over_observations_first() {
        let rows = vec![row("npe", 0, 50, 0, 0, 0.6), row("npe", 0, 50, 0, 1, 0.8), row("npe", 0, 50, 1, 0, 0.9)];
        let c = summarize(&rows).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].n, 2);
        assert!((c[0].mean - 0.8).abs() < 1e-12);
    }

    #[test]
    fn single_row_is_flagged() {
        let cells = summarize(&[row("npe", 0, 100, 3, 0, 0.75)]).unwrap();
        let text = pivot_csv(&cells).unwrap();
        assert_eq!(text, "metric,hf_budget,npe:mean,npe:ci95,npe:n,note\nc2st,100,0.75,0,1,n=1: npe\n");
    }

    #[test]
    fn pivot_round_trips() {
        let rows = vec![
            row("npe", 0, 50, 0, 0, 0.9),
            row("npe", 0, 50, 1, 0, 0.8),
            row("mf-npe", 1000, 50, 0, 0, 0.7),
            row("mf-npe", 10000, 50, 0, 0, 0.65),
            row("mf-npe", 10000, 100, 0, 0, 0.6),
        ];
        let cells = summarize(&rows).unwrap();
        assert!(cells.iter().any(|c| c.label == "mf-npe[lf=10000]"));
        let back = parse_pivot_csv(&pivot_csv(&cells).unwrap()).unwrap();
        let mut a = cells.clone();
        let mut b = back;
        let key = |c: &Cell| (c.metric.clone(), c.hf_budget, c.label.clone());
        a.sort_by_key(key);
        b.sort_by_key(key);
        assert_eq!(a, b);
    }

    #[test]
    fn rising_c2st_is_reported() {
        let rows = vec![row("npe", 0, 50, 0, 0, 0.7), row("npe", 0, 100, 0, 0, 0.8), row("npe", 0, 1000, 0, 0, 0.6)];
        let w = monotonicity_warnings(&summarize(&rows).unwrap());
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("npe"));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(summarize(&[]), Err(ReportError::Empty)));
    }
}
