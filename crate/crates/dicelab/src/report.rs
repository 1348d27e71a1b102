//! Per-stage metric tables over one or more experiment manifests.

use dicelab_core::losses::LossMode;
use dicelab_core::plan::{Arch, LabelMode, TargetSource};
use dicelab_core::probes::ProbeTask;
use serde::{Deserialize, Serialize};

use crate::pipeline::{ExperimentManifest, StageRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub preset: String,
    pub stage: String,
    pub arch: String,
    pub target: String,
    pub loss: String,
    pub params: usize,
    pub label_purity: Option<f64>,
    pub masked_ce: Option<f64>,
    pub phoneme_acc: Option<f64>,
    pub speaker_acc: Option<f64>,
}

fn arch_name(a: Arch) -> String {
    match a {
        Arch::Base => "base".into(),
        Arch::Narrow(d) => format!("narrow/{d}"),
        Arch::Shallow(l) => format!("shallow L={l}"),
        Arch::Wide(f) => format!("wide x{f}"),
    }
}

fn loss_name(loss: LossMode, labels: LabelMode) -> String {
    match (loss, labels) {
        (LossMode::Soft, LabelMode::Soft { tau }) => format!("soft tau={tau}"),
        (LossMode::Soft, _) => "soft".into(),
        (LossMode::Hard, _) => "hard".into(),
        (LossMode::Feat, _) => "feat".into(),
        (LossMode::Mixed { lambda }, _) => format!("mixed lambda={lambda}"),
    }
}

fn target_name(t: TargetSource) -> String {
    match t {
        TargetSource::Mfcc => "mfcc".into(),
        TargetSource::PrevModel { layer } => format!("prev@{layer}"),
    }
}

pub fn stage_row(preset: &str, s: &StageRecord) -> ReportRow {
    let acc = |t| s.metrics.probe(t).map(|p| p.accuracy);
    ReportRow {
        preset: preset.into(),
        stage: s.name.clone(),
        arch: arch_name(s.arch),
        target: target_name(s.target),
        loss: loss_name(s.loss, s.labels_mode),
        params: s.metrics.params,
        label_purity: s.metrics.label_purity,
        masked_ce: s.metrics.eval.filter(|_| s.loss.needs_labels()).map(|e| e.ssl),
        phoneme_acc: acc(ProbeTask::Phoneme),
        speaker_acc: acc(ProbeTask::Speaker),
    }
}

pub fn rows(manifests: &[ExperimentManifest]) -> Vec<ReportRow> {
    manifests
        .iter()
        .flat_map(|m| m.stages.iter().map(move |s| stage_row(&m.preset, s)))
        .collect()
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

/// Aligned plain-text table; text columns left-aligned, numbers right-aligned.
pub fn table(rows: &[ReportRow]) -> String {
    let header = [
        "preset", "stage", "arch", "target", "loss", "params", "purity", "masked_ce", "phoneme", "speaker",
    ];
    let body: Vec<[String; 10]> = rows
        .iter()
        .map(|r| {
            [
                r.preset.clone(),
                r.stage.clone(),
                r.arch.clone(),
                r.target.clone(),
                r.loss.clone(),
                r.params.to_string(),
                cell(r.label_purity, 3),
                cell(r.masked_ce, 3),
                cell(r.phoneme_acc, 3),
                cell(r.speaker_acc, 3),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i < 5 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &body {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
