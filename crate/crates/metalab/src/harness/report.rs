//! Report emission: aggregate artifacts already on disk into plot-ready
//! series and a human-readable summary. No numeric recomputation beyond
//! averaging what the run wrote.

use crate::error::{Error, Result};
use crate::recordio;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct Report {
    /// markdown-ish summary document path
    pub summary_path: PathBuf,
    /// aggregated per-label accuracy series path (CSV)
    pub series_path: PathBuf,
    pub lines: Vec<String>,
}

/// One parsed row of a `# metalab eval v1` CSV.
#[derive(Debug, Clone)]
struct EvalRow {
    label: String,
    mean_acc: f64,
    stderr: f64,
}

fn parse_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("# metalab eval v1") => {}
        other => {
            return Err(Error::BadFormat(format!(
                "{}: expected eval v1 header, got {:?}",
                path.display(),
                other
            )))
        }
    }
    lines.next(); // column names
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::BadFormat(format!("{}: bad row `{line}`", path.display())));
        }
        rows.push(EvalRow {
            label: f[0].to_string(),
            mean_acc: f[2].parse().map_err(|_| {
                Error::BadFormat(format!("{}: bad mean_acc in `{line}`", path.display()))
            })?,
            stderr: f[3].parse().map_err(|_| {
                Error::BadFormat(format!("{}: bad stderr in `{line}`", path.display()))
            })?,
        });
    }
    Ok(rows)
}

fn find_eval_csvs(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut dirs = vec![run_dir.to_path_buf()];
    while let Some(d) = dirs.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                dirs.push(p);
            } else if p.extension().map_or(false, |e| e == "csv") {
                let head = std::fs::read_to_string(&p)?
                    .lines()
                    .next()
                    .unwrap_or_default()
                    .to_string();
                if head == "# metalab eval v1" {
                    out.push(p);
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Aggregate a finished run directory. Fails naming the missing pieces if
/// the directory has no summary or no eval artifacts to aggregate.
pub fn emit_report(run_dir: &Path) -> Result<Report> {
    let summary_json = run_dir.join("summary.json");
    if !summary_json.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} (expected summary.json and at least one eval CSV)",
            summary_json.display()
        )));
    }
    let eval_csvs = find_eval_csvs(run_dir)?;
    if eval_csvs.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "{}: no `# metalab eval v1` CSVs found",
            run_dir.display()
        )));
    }

    // label -> per-seed rows, in first-seen order within a BTreeMap for
    // deterministic output
    let mut by_label: BTreeMap<String, Vec<EvalRow>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for csv in &eval_csvs {
        for row in parse_eval_csv(csv)? {
            if !by_label.contains_key(&row.label) {
                order.push(row.label.clone());
            }
            by_label.entry(row.label.clone()).or_default().push(row);
        }
    }

    let mut series = String::from("# metalab report v1\nlabel,runs,mean_acc,mean_stderr\n");
    let mut lines = Vec::new();
    lines.push(format!("report for {}", run_dir.display()));
    lines.push(format!("aggregated {} eval file(s)", eval_csvs.len()));
    for label in &order {
        let rows = &by_label[label];
        let n = rows.len() as f64;
        let acc = rows.iter().map(|r| r.mean_acc).sum::<f64>() / n;
        let se = rows.iter().map(|r| r.stderr).sum::<f64>() / n;
        series.push_str(&format!("{label},{},{acc:.6},{se:.6}\n", rows.len()));
        // side-by-side table line: label, accuracy +/- stderr
        lines.push(format!("{label}: {:.2}% +/- {:.2}%", 100.0 * acc, 100.0 * se));
    }

    let series_path = run_dir.join("report_series.csv");
    recordio::atomic_write(&series_path, series.as_bytes())?;
    let summary_path = run_dir.join("report.txt");
    recordio::atomic_write(&summary_path, (lines.join("\n") + "\n").as_bytes())?;
    Ok(Report { summary_path, series_path, lines })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{EpisodeResult, EvalReport};

    fn fake_report(accs: &[f64]) -> EvalReport {
        EvalReport::from_results(
            accs.iter()
                .enumerate()
                .map(|(i, &a)| EpisodeResult { episode: i, accuracy: a, loss: 0.1 })
                .collect(),
        )
    }

    #[test]
    fn empty_dir_errors_naming_expected_files() {
        let tmp = tempfile::tempdir().unwrap();
        let err = emit_report(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("summary.json"), "{err}");
    }

    #[test]
    fn aggregates_matching_labels_across_seed_dirs() {
        let tmp = tempfile::tempdir().unwrap();
        recordio::atomic_write(&tmp.path().join("summary.json"), b"{}").unwrap();
        for (seed, acc) in [(0u64, 0.6), (1, 0.8)] {
            let dir = tmp.path().join(format!("seed{seed}"));
            std::fs::create_dir_all(&dir).unwrap();
            let maml = fake_report(&[acc, acc]);
            let anil = fake_report(&[acc - 0.1, acc - 0.1]);
            crate::inference::write_eval_summary_csv(
                &dir.join("eval.csv"),
                &[("maml".to_string(), &maml), ("anil".to_string(), &anil)],
            )
            .unwrap();
        }
        let report = emit_report(tmp.path()).unwrap();
        let series = std::fs::read_to_string(&report.series_path).unwrap();
        assert!(series.starts_with("# metalab report v1\n"));
        assert!(series.contains("maml,2,0.700000"), "{series}");
        assert!(series.contains("anil,2,0.600000"), "{series}");
        // summary document shows both algorithms side by side
        let text = report.lines.join("\n");
        assert!(text.contains("maml: 70.00%") && text.contains("anil: 60.00%"), "{text}");
    }
}
