//! Tables and the run summary. [`write_report`] reads only files in the run
//! directory, so re-running it on the same directory gives the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use unimlip::datagen::{Intensity, Shape, NUM_CLASSES};
use unimlip::eval::{ProbeReport, RecallReport};
use unimlip::losses::LossReport;

use crate::ablation;
use crate::commands::{AblationCell, RetrievalArtifact, VqaArtifact};
use crate::error::CliError;
use crate::metrics::read_metrics;
use crate::table::{pct, render};

fn recall_cells(r: &RecallReport) -> Vec<String> {
    r.recall_at_k.iter().map(|&v| pct(v)).collect()
}

fn recall_headers(prefix: &str, ks: &[usize]) -> Vec<String> {
    ks.iter().map(|k| format!("{prefix} R@{k}")).collect()
}

pub fn retrieval_table(a: &RetrievalArtifact) -> String {
    let mut headers = vec!["Method".to_string()];
    let mut row = vec!["this run".to_string()];
    for r in &a.reports {
        let prefix = serde_json::to_value(r.direction).ok().and_then(|v| v.as_str().map(String::from));
        headers.extend(recall_headers(prefix.as_deref().unwrap_or("?"), &r.k_values));
        row.extend(recall_cells(r));
    }
    format!(
        "Image-text retrieval, {} split, {} pairs (recall in %)\n{}",
        a.split,
        a.reports.first().map_or(0, |r| r.n_queries),
        render(&headers, &[row])
    )
}

fn class_name(label: usize) -> String {
    format!("{} {}", Intensity::ALL[label % 3].word(), Shape::ALL[label / 3].word())
}

pub fn probe_table(p: &ProbeReport) -> String {
    let headers = vec!["Class".to_string(), "AUC".to_string()];
    let mut rows: Vec<Vec<String>> = (0..NUM_CLASSES.min(p.per_class_auc.len()))
        .map(|c| {
            let v = p.per_class_auc[c].map_or("n/a".to_string(), |a| format!("{a:.3}"));
            vec![class_name(c), v]
        })
        .collect();
    rows.push(vec!["macro".to_string(), format!("{:.3}", p.macro_auc)]);
    format!("Linear probe on frozen image features\n{}", render(&headers, &rows))
}

pub fn vqa_table(a: &VqaArtifact) -> String {
    let headers: Vec<String> = ["Method", "Open", "Closed", "Overall"].iter().map(|s| s.to_string()).collect();
    let row = |name: &str, r: &unimlip::eval::VqaReport| {
        vec![name.to_string(), pct(r.open_acc), pct(r.closed_acc), pct(r.overall_acc)]
    };
    let mut rows = vec![row("pre-trained", &a.pretrained)];
    if let Some(r) = &a.random_init {
        rows.push(row("random init", r));
    }
    format!(
        "Visual question answering, {} open / {} closed (accuracy in %)\n{}",
        a.pretrained.n_open,
        a.pretrained.n_closed,
        render(&headers, &rows)
    )
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    pub seeds: Vec<u64>,
    pub k_values: Vec<usize>,
    /// Median over seeds, per cut-off.
    pub i2t: Vec<f64>,
    pub t2i: Vec<f64>,
    /// Median over seeds of the per-seed mean of I2T and T2I R@1.
    pub mean_r1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
}

impl AblationSummary {
    pub fn from_cells(variants: &[String], cells: &[AblationCell]) -> Self {
        let rows = variants
            .iter()
            .filter_map(|v| {
                let mine: Vec<&AblationCell> = cells.iter().filter(|c| &c.variant == v).collect();
                let first = mine.first()?;
                let ks = first.i2t.k_values.clone();
                let per_k = |pick: fn(&AblationCell) -> &RecallReport| -> Vec<f64> {
                    (0..ks.len())
                        .map(|i| median(&mine.iter().map(|c| pick(c).recall_at_k[i]).collect::<Vec<_>>()))
                        .collect()
                };
                let means: Vec<f64> = mine
                    .iter()
                    .map(|c| (c.i2t.recall_at_k[0] + c.t2i.recall_at_k[0]) / 2.0)
                    .collect();
                Some(AblationRow {
                    variant: v.clone(),
                    label: ablation::label(v).to_string(),
                    seeds: mine.iter().map(|c| c.seed).collect(),
                    i2t: per_k(|c| &c.i2t),
                    t2i: per_k(|c| &c.t2i),
                    k_values: ks,
                    mean_r1: median(&means),
                })
            })
            .collect();
        Self {
            rows,
            cells: cells.to_vec(),
        }
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

pub fn ablation_table(s: &AblationSummary) -> String {
    let ks = s.rows.first().map_or(vec![], |r| r.k_values.clone());
    let mut headers = vec!["Variant".to_string()];
    headers.extend(recall_headers("I2T", &ks));
    headers.extend(recall_headers("T2I", &ks));
    headers.push("mean R@1".into());
    let rows: Vec<Vec<String>> = s
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone()];
            row.extend(r.i2t.iter().map(|&v| pct(v)));
            row.extend(r.t2i.iter().map(|&v| pct(v)));
            row.push(pct(r.mean_r1));
            row
        })
        .collect();
    let seeds = s.rows.first().map_or(0, |r| r.seeds.len());
    format!(
        "Objective ablation, median over {seeds} seeds (recall in %)\n{}",
        render(&headers, &rows)
    )
}

/// Per-epoch means of the step records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub phase: u8,
    pub epoch: usize,
    pub steps: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
    pub tau: f64,
}

pub fn epoch_summaries(records: &[unimlip::trainer::StepRecord]) -> Vec<EpochSummary> {
    let mut groups: BTreeMap<(u8, usize), Vec<&unimlip::trainer::StepRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.phase, r.epoch)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((phase, epoch), rs)| {
            let n = rs.len() as f64;
            let mean = |f: fn(&LossReport) -> f64| rs.iter().map(|r| f(&r.losses)).sum::<f64>() / n;
            EpochSummary {
                phase,
                epoch,
                steps: rs.len(),
                lr: rs.last().map_or(0.0, |r| r.lr),
                losses: LossReport {
                    itc: mean(|l| l.itc),
                    itc_pert_image: mean(|l| l.itc_pert_image),
                    itc_pert_text: mean(|l| l.itc_pert_text),
                    i2i: mean(|l| l.i2i),
                    mlm: mean(|l| l.mlm),
                    total: mean(|l| l.total),
                },
                tau: rs.iter().map(|r| r.tau).sum::<f64>() / n,
            }
        })
        .collect()
}

pub fn epoch_table(epochs: &[EpochSummary]) -> String {
    let mut headers: Vec<String> = ["phase", "epoch", "steps", "lr"].iter().map(|s| s.to_string()).collect();
    headers.extend(LossReport::FIELDS.iter().map(|s| s.to_string()));
    headers.push("tau".into());
    let rows: Vec<Vec<String>> = epochs
        .iter()
        .map(|e| {
            let l = &e.losses;
            let mut row = vec![e.phase.to_string(), (e.epoch + 1).to_string(), e.steps.to_string(), format!("{:.3e}", e.lr)];
            row.extend(
                [l.itc, l.itc_pert_image, l.itc_pert_text, l.i2i, l.mlm, l.total]
                    .iter()
                    .map(|v| format!("{v:.4}")),
            );
            row.push(format!("{:.4}", e.tau));
            row
        })
        .collect();
    format!("Pre-training, per-epoch means\n{}", render(&headers, &rows))
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: Option<Vec<EpochSummary>>,
    pub retrieval: Option<RetrievalArtifact>,
    pub probe: Option<ProbeReport>,
    pub vqa: Option<VqaArtifact>,
    pub ablation: Option<AblationSummary>,
}

fn read_optional<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map(Some).map_err(|e| CliError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn build_report(dir: &Path) -> Result<RunReport, CliError> {
    let metrics = dir.join("metrics.jsonl");
    let epochs = if metrics.exists() {
        Some(epoch_summaries(&read_metrics(&metrics)?))
    } else {
        None
    };
    let report = RunReport {
        epochs,
        retrieval: read_optional(&dir.join("retrieval.json"))?,
        probe: read_optional(&dir.join("probe.json"))?,
        vqa: read_optional(&dir.join("vqa.json"))?,
        ablation: read_optional(&dir.join("ablation.json"))?,
    };
    if report.epochs.is_none() && report.ablation.is_none() {
        return Err(CliError::Sequencing(format!(
            "{} holds neither a metrics log nor an ablation; run pretrain or ablate first",
            dir.display()
        )));
    }
    Ok(report)
}

pub fn render_report(r: &RunReport) -> String {
    let mut parts = Vec::new();
    if let Some(e) = &r.epochs {
        parts.push(epoch_table(e));
    }
    if let Some(a) = &r.retrieval {
        parts.push(retrieval_table(a));
    }
    if let Some(p) = &r.probe {
        parts.push(probe_table(p));
    }
    if let Some(v) = &r.vqa {
        parts.push(vqa_table(v));
    }
    if let Some(a) = &r.ablation {
        parts.push(ablation_table(a));
    }
    parts.join("\n")
}

/// Writes `report.txt` and `report.json` from the run directory's contents.
pub fn write_report(dir: &Path) -> Result<(), CliError> {
    let report = build_report(dir)?;
    let text = render_report(&report);
    let path = dir.join("report.txt");
    fs::write(&path, &text).map_err(CliError::io(&path))?;
    let path = dir.join("report.json");
    let mut json = serde_json::to_string_pretty(&report).map_err(unimlip::Error::from)?;
    json.push('\n');
    fs::write(&path, json).map_err(CliError::io(&path))?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use unimlip::trainer::StepRecord;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn epoch_header_names_each_loss_field_once() {
        let rec = |step, epoch, itc| StepRecord {
            step,
            phase: 1,
            epoch,
            lr: 0.1,
            losses: LossReport {
                itc,
                total: itc,
                ..LossReport::default()
            },
            tau: 0.07,
        };
        let e = epoch_summaries(&[rec(1, 0, 1.0), rec(2, 0, 3.0), rec(3, 1, 5.0)]);
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].losses.itc, 2.0);
        let table = epoch_table(&e);
        let header: Vec<&str> = table.lines().nth(1).unwrap().split_whitespace().collect();
        for f in LossReport::FIELDS {
            assert_eq!(header.iter().filter(|h| **h == f).count(), 1, "{f}");
        }
    }
}
