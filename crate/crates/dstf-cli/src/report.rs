//! Per-layer measurement tables for a saved checkpoint.

use crate::artifacts;
use crate::commands::{load_config, load_data};
use dstf::metrics;
use dstf::persistence::Checkpoint;
use dstf::pipeline;
use dstf::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(serde::Serialize)]
struct Report {
    #[serde(flatten)]
    summary: pipeline::RunSummary,
    /// Rank correlation of layer depth vs per-layer activation sparsity.
    /// Recorded for trend inspection, never asserted.
    as_depth_spearman: Option<f64>,
    /// Rank correlation of layer depth vs per-layer weight sparsity.
    ws_depth_spearman: Option<f64>,
}

pub fn cmd_report(config: &Path, checkpoint: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, out)?;
    let (_, test) = load_data(&cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;

    if ckpt.normalization != test.normalization {
        return Err(Error::Precondition(format!(
            "checkpoint was trained with normalization {:?} but the dataset uses {:?}",
            ckpt.normalization, test.normalization
        )));
    }
    let (net, _, _) = ckpt.restore()?;
    if net.input_sample_shape() != test.sample_shape() {
        return Err(Error::Precondition(format!(
            "checkpoint expects input shape {:?} but the dataset provides {:?}",
            net.input_sample_shape(),
            test.sample_shape()
        )));
    }
    if usize::from(test.num_classes) > net.logit_dim() {
        return Err(Error::Precondition(format!(
            "dataset has {} classes but the network only emits {} logits",
            test.num_classes,
            net.logit_dim()
        )));
    }

    std::fs::create_dir_all(&cfg.output_dir)?;
    let act = metrics::activation_sparsity(&net, &test)?;
    let weight = metrics::weight_sparsity(&net);
    let flops = metrics::flops_drop(&net, &test)?;
    let summary = pipeline::summarize(&net, &test, ckpt.stage)?;

    artifacts::write_sparsity_csv(&cfg.output_dir.join("act_sparsity.csv"), &act.per_layer)?;
    artifacts::write_sparsity_csv(&cfg.output_dir.join("weight_sparsity.csv"), &weight.per_layer)?;
    artifacts::write_flops_csv(&cfg.output_dir.join("flops.csv"), &flops.per_layer)?;

    let report = Report {
        as_depth_spearman: spearman_vs_depth(
            &act.per_layer.iter().map(|c| c.fraction()).collect::<Vec<_>>(),
        ),
        ws_depth_spearman: spearman_vs_depth(
            &weight.per_layer.iter().map(|c| c.fraction()).collect::<Vec<_>>(),
        ),
        summary,
    };
    artifacts::write_json(&cfg.output_dir.join("report.json"), &report)?;
    eprintln!(
        "top1={:.4} ws={:.4} as={:.4} flops_drop={:.4}",
        report.summary.top1,
        report.summary.weight_sparsity,
        report.summary.act_sparsity,
        report.summary.flops_drop
    );
    Ok(())
}

/// Spearman correlation between position (0..n) and the values, with
/// average ranks on ties. None when fewer than two points or the values
/// are constant.
fn spearman_vs_depth(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let ranks = average_ranks(values);
    let depth: Vec<f64> = (0..n).map(|i| i as f64).collect();
    pearson(&depth, &ranks)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
