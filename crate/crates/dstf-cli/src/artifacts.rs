//! Artifact writers. Numeric cells use the shortest round-tripping float
//! form, so identical runs write identical bytes.

use dstf::metrics::{LayerCount, LayerFlops};
use dstf::pipeline::EpochRow;
use dstf::Result;
use std::fmt::Write as _;
use std::path::Path;

pub fn write_metrics_csv(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut s = String::from("epoch,split,top1,act_sparsity,weight_sparsity,reg_value,loss\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.split, r.top1, r.act_sparsity, r.weight_sparsity, r.reg_value, r.loss
        )
        .expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| dstf::Error::Data(format!("serialize {}: {e}", path.display())))?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_sparsity_csv(path: &Path, rows: &[LayerCount]) -> Result<()> {
    let mut s = String::from("layer_id,kind,zeros,elements,fraction\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.layer, r.kind, r.zeros, r.elements, r.fraction())
            .expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_flops_csv(path: &Path, rows: &[LayerFlops]) -> Result<()> {
    let mut s = String::from("layer_id,kind,total_mults,skipped_mults,fraction\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.layer,
            r.kind,
            r.total_mults,
            r.skipped_mults,
            r.fraction()
        )
        .expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}
