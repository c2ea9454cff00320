//! Experiment metrics: the per-run report document, its flat CSV forms, and
//! the cross-run comparison table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::minority_attribute;
use crate::error::{FicsError, Result};
use crate::eval::PercentileAnalysis;
use crate::fi::SupervisionMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// Fréchet distance of raw generator samples to the training data.
    pub raw_fd: f64,
    /// Same, after corrective sampling.
    pub corrected_fd: f64,
    /// Distances to the fair reference set, when one exists.
    pub fair_raw_fd: Option<f64>,
    pub fair_corrected_fd: Option<f64>,
    pub raw_attr_fractions: Vec<f64>,
    pub corrected_attr_fractions: Vec<f64>,
    /// Oracle attribute distribution of the training data for this class.
    pub dataset_attr_fractions: Vec<f64>,
    pub n_samples: usize,
    pub acceptance_rate: f64,
}

impl ClassMetrics {
    pub fn raw_minority(&self) -> f64 {
        self.raw_attr_fractions[minority_attribute(self.class)]
    }

    pub fn corrected_minority(&self) -> f64 {
        self.corrected_attr_fractions[minority_attribute(self.class)]
    }

    pub fn dataset_minority(&self) -> f64 {
        self.dataset_attr_fractions[minority_attribute(self.class)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment_id: String,
    pub mode: SupervisionMode,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub eval_n: usize,
    pub feature_seed: u64,
    pub per_class: Vec<ClassMetrics>,
    /// Loss-percentile analysis of raw generator samples, one per class.
    pub percentile: Vec<PercentileAnalysis>,
}

impl MetricsReport {
    pub fn mean_raw_fd(&self) -> f64 {
        mean(self.per_class.iter().map(|c| c.raw_fd))
    }

    pub fn mean_corrected_fd(&self) -> f64 {
        mean(self.per_class.iter().map(|c| c.corrected_fd))
    }

    pub fn mean_fair_corrected_fd(&self) -> Option<f64> {
        let vals: Vec<f64> = self.per_class.iter().filter_map(|c| c.fair_corrected_fd).collect();
        if vals.len() == self.per_class.len() {
            Some(mean(vals.into_iter()))
        } else {
            None
        }
    }

    pub fn mean_fair_raw_fd(&self) -> Option<f64> {
        let vals: Vec<f64> = self.per_class.iter().filter_map(|c| c.fair_raw_fd).collect();
        if vals.len() == self.per_class.len() {
            Some(mean(vals.into_iter()))
        } else {
            None
        }
    }

    /// Mean over classes of the corrected minority occurrence.
    pub fn mean_corrected_minority(&self) -> f64 {
        mean(self.per_class.iter().map(|c| c.corrected_minority()))
    }

    pub fn mean_raw_minority(&self) -> f64 {
        mean(self.per_class.iter().map(|c| c.raw_minority()))
    }

    pub fn mean_dataset_minority(&self) -> f64 {
        mean(self.per_class.iter().map(|c| c.dataset_minority()))
    }

    /// Long-form rows: experiment_id, class, metric, value, n.
    pub fn csv(&self) -> String {
        let mut out = String::from("experiment_id,class,metric,value,n\n");
        let mut push = |class: &str, metric: &str, value: f64, n: usize| {
            out.push_str(&format!(
                "{},{class},{metric},{value},{n}\n",
                self.experiment_id
            ));
        };
        for c in &self.per_class {
            let cls = c.class.to_string();
            push(&cls, "raw_fd", c.raw_fd, c.n_samples);
            push(&cls, "corrected_fd", c.corrected_fd, c.n_samples);
            if let Some(v) = c.fair_raw_fd {
                push(&cls, "fair_raw_fd", v, c.n_samples);
            }
            if let Some(v) = c.fair_corrected_fd {
                push(&cls, "fair_corrected_fd", v, c.n_samples);
            }
            push(&cls, "raw_minority_fraction", c.raw_minority(), c.n_samples);
            push(&cls, "corrected_minority_fraction", c.corrected_minority(), c.n_samples);
            push(&cls, "dataset_minority_fraction", c.dataset_minority(), c.n_samples);
            push(&cls, "acceptance_rate", c.acceptance_rate, c.n_samples);
        }
        for p in &self.percentile {
            push(&p.class.to_string(), "loss_rank_spearman", p.spearman, p.n_total);
            push(&p.class.to_string(), "minority_sample_count", p.n_minority as f64, p.n_total);
        }
        push("mean", "raw_fd", self.mean_raw_fd(), self.eval_n);
        push("mean", "corrected_fd", self.mean_corrected_fd(), self.eval_n);
        if let Some(v) = self.mean_fair_raw_fd() {
            push("mean", "fair_raw_fd", v, self.eval_n);
        }
        if let Some(v) = self.mean_fair_corrected_fd() {
            push("mean", "fair_corrected_fd", v, self.eval_n);
        }
        push("mean", "raw_minority_fraction", self.mean_raw_minority(), self.eval_n);
        push("mean", "corrected_minority_fraction", self.mean_corrected_minority(), self.eval_n);
        push("mean", "dataset_minority_fraction", self.mean_dataset_minority(), self.eval_n);
        out
    }

    /// Percentile-curve plot data: class, within_minority_pct, within_all_pct.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("class,within_minority_pct,within_all_pct\n");
        for p in &self.percentile {
            for &(a, b) in &p.curve {
                out.push_str(&format!("{},{a},{b}\n", p.class));
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| FicsError::io(dir, e))?;
        let doc = serde_json::to_string_pretty(self).expect("report serializes");
        let txt = dir.join("metrics.txt");
        std::fs::write(&txt, doc).map_err(|e| FicsError::io(&txt, e))?;
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, self.csv()).map_err(|e| FicsError::io(&csv, e))?;
        let curve = dir.join("percentile_curve.csv");
        std::fs::write(&curve, self.curve_csv()).map_err(|e| FicsError::io(&curve, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MetricsReport> {
        let doc = std::fs::read_to_string(path).map_err(|e| FicsError::io(path, e))?;
        serde_json::from_str(&doc)
            .map_err(|e| FicsError::bad_artifact(path, format!("bad metrics document: {e}")))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Aligned comparison across runs over the same dataset: the oracle row
/// first, then one row per method.
#[derive(Debug)]
pub struct ComparisonTable {
    pub text: String,
    pub csv: String,
}

pub fn emit_report(reports: &[MetricsReport]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(FicsError::config("no reports to tabulate"));
    }
    let fp = &reports[0].dataset_fingerprint;
    for r in &reports[1..] {
        if &r.dataset_fingerprint != fp {
            return Err(FicsError::MixedDatasets {
                a: fp.clone(),
                b: r.dataset_fingerprint.clone(),
            });
        }
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    let header = vec![
        "experiment".to_string(),
        "mode".to_string(),
        "minority_pct".to_string(),
        "intra_fd".to_string(),
        "fair_intra_fd".to_string(),
        "acceptance".to_string(),
    ];
    let fmt_pct = |v: f64| format!("{:.2}", 100.0 * v);
    let fmt = |v: f64| format!("{v:.4}");

    rows.push(vec![
        "oracle-dataset".to_string(),
        "-".to_string(),
        fmt_pct(reports[0].mean_dataset_minority()),
        "-".to_string(),
        "-".to_string(),
        "-".to_string(),
    ]);
    for r in reports {
        let acc = mean(r.per_class.iter().map(|c| c.acceptance_rate));
        rows.push(vec![
            r.experiment_id.clone(),
            r.mode.to_string(),
            fmt_pct(r.mean_corrected_minority()),
            fmt(r.mean_corrected_fd()),
            r.mean_fair_corrected_fd().map(fmt).unwrap_or_else(|| "-".to_string()),
            fmt(acc),
        ]);
    }

    let mut csv = header.join(",") + "\n";
    for row in &rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap()
        })
        .collect();
    let mut text = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        cells
            .iter()
            .zip(widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    text.push_str(&fmt_row(&header, &widths));
    text.push('\n');
    text.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    text.push('\n');
    for row in &rows {
        text.push_str(&fmt_row(row, &widths));
        text.push('\n');
    }
    Ok(ComparisonTable { text, csv })
}
