//! Pipeline-driving subcommands and the comparison/grid experiments.

use crate::artifacts;
use dstf::config::{DataSource, ExperimentConfig};
use dstf::data::{load_mnist_dir, synthetic_dataset, Dataset, Split};
use dstf::metrics;
use dstf::persistence::{Checkpoint, StageTag};
use dstf::pipeline::{self, MetricsLog};
use dstf::regularizers::{RegKind, RegularizerSpec};
use dstf::{Error, Result};
use std::path::{Path, PathBuf};

pub fn load_config(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.data.source {
        DataSource::Mnist => {
            let dir = cfg.data.resolved_mnist_dir()?;
            Ok((
                load_mnist_dir(&dir, Split::Train, cfg.data.normalize)?,
                load_mnist_dir(&dir, Split::Test, cfg.data.normalize)?,
            ))
        }
        DataSource::Synthetic => Ok((
            synthetic_dataset(cfg.seed, cfg.data.n_train, cfg.data.classes)?,
            synthetic_dataset(cfg.seed ^ 1, cfg.data.n_test, cfg.data.classes)?,
        )),
    }
}

fn prepare_output_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(())
}

fn save_ckpt(cfg: &ExperimentConfig, name: &str, ckpt: &Checkpoint) -> Result<()> {
    let path = cfg.output_dir.join(name);
    ckpt.save(&path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_run_artifacts(cfg: &ExperimentConfig, log: &MetricsLog, ckpt: &Checkpoint, test: &Dataset) -> Result<()> {
    let (net, _, _) = ckpt.restore()?;
    let summary = pipeline::summarize(&net, test, ckpt.stage)?;
    artifacts::write_metrics_csv(&cfg.output_dir.join("metrics.csv"), &log.rows)?;
    artifacts::write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    eprintln!(
        "top1={:.4} ws={:.4} as={:.4} flops_drop={:.4}",
        summary.top1, summary.weight_sparsity, summary.act_sparsity, summary.flops_drop
    );
    Ok(())
}

/// Loads a checkpoint used as a stage input, starting a log at its epoch
/// boundary with an entry evaluation row. Stage and architecture
/// compatibility are checked by the stage functions themselves.
fn load_entry_ckpt(path: &Path, test: &Dataset) -> Result<(Checkpoint, MetricsLog)> {
    let ckpt = Checkpoint::load(path)?;
    let mut log = MetricsLog::starting_at(ckpt.epoch).echoing();
    let (net, _, _) = ckpt.restore()?;
    log.push_eval(&net, test, &RegularizerSpec::none())?;
    Ok((ckpt, log))
}

pub fn cmd_train(config: &Path, resume: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, out)?;
    let (train, test) = load_data(&cfg)?;
    prepare_output_dir(&cfg)?;
    let mut log = MetricsLog::new().echoing();
    let resume_ckpt = resume.map(|p| Checkpoint::load(&p)).transpose()?;
    let ckpt = pipeline::stage1_pretrain(&cfg, &train, &test, resume_ckpt.as_ref(), &mut log)
        .map_err(|e| Error::stage("stage1", e))?;
    save_ckpt(&cfg, "stage1.ckpt", &ckpt)?;
    write_run_artifacts(&cfg, &log, &ckpt, &test)
}

pub fn cmd_prune(config: &Path, from: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, out)?;
    let (train, test) = load_data(&cfg)?;
    prepare_output_dir(&cfg)?;

    let (ckpt1, mut log) = match from {
        Some(path) => load_entry_ckpt(&path, &test)?,
        None => {
            let mut log = MetricsLog::new().echoing();
            let ckpt = pipeline::stage1_pretrain(&cfg, &train, &test, None, &mut log)
                .map_err(|e| Error::stage("stage1", e))?;
            save_ckpt(&cfg, "stage1.ckpt", &ckpt)?;
            (ckpt, log)
        }
    };

    let ckpt2 = pipeline::stage2_weight_sparsify(&cfg, &ckpt1, &train, &test, &mut log)
        .map_err(|e| Error::stage("stage2", e))?;
    save_ckpt(&cfg, "stage2.ckpt", &ckpt2)?;
    write_run_artifacts(&cfg, &log, &ckpt2, &test)
}

pub fn cmd_actsparse(config: &Path, from: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, out)?;
    let reg = cfg.regularizer.to_spec()?;
    let (train, test) = load_data(&cfg)?;
    prepare_output_dir(&cfg)?;

    let (ckpt1, mut log) = match from {
        Some(path) => load_entry_ckpt(&path, &test)?,
        None => {
            let mut log = MetricsLog::new().echoing();
            let ckpt = pipeline::stage1_pretrain(&cfg, &train, &test, None, &mut log)
                .map_err(|e| Error::stage("stage1", e))?;
            save_ckpt(&cfg, "stage1.ckpt", &ckpt)?;
            (ckpt, log)
        }
    };

    let ckpt = pipeline::activation_finetune(
        &cfg, &ckpt1, &reg, None, "actsparse", &train, &test, &mut log,
    )
    .map_err(|e| Error::stage("actsparse", e))?;
    save_ckpt(&cfg, "actsparse.ckpt", &ckpt)?;
    write_run_artifacts(&cfg, &log, &ckpt, &test)
}

pub fn cmd_dual(config: &Path, from: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, out)?;
    let (train, test) = load_data(&cfg)?;
    prepare_output_dir(&cfg)?;

    let entry = from.map(|p| load_entry_ckpt(&p, &test)).transpose()?;

    let (ckpt2, mut log) = match entry {
        Some((ckpt, log)) if ckpt.stage == StageTag::WeightSparse => (ckpt, log),
        Some((ckpt, mut log)) if ckpt.stage == StageTag::Pretrained => {
            let c2 = pipeline::stage2_weight_sparsify(&cfg, &ckpt, &train, &test, &mut log)
                .map_err(|e| Error::stage("stage2", e))?;
            save_ckpt(&cfg, "stage2.ckpt", &c2)?;
            (c2, log)
        }
        Some((ckpt, _)) => {
            return Err(Error::Precondition(format!(
                "dual run cannot start from a {} checkpoint",
                ckpt.stage.name()
            )))
        }
        None => {
            let mut log = MetricsLog::new().echoing();
            let c1 = pipeline::stage1_pretrain(&cfg, &train, &test, None, &mut log)
                .map_err(|e| Error::stage("stage1", e))?;
            save_ckpt(&cfg, "stage1.ckpt", &c1)?;
            let c2 = pipeline::stage2_weight_sparsify(&cfg, &c1, &train, &test, &mut log)
                .map_err(|e| Error::stage("stage2", e))?;
            save_ckpt(&cfg, "stage2.ckpt", &c2)?;
            (c2, log)
        }
    };

    let ckpt3 = pipeline::stage3_activation_sparsify(&cfg, &ckpt2, &train, &test, &mut log)
        .map_err(|e| Error::stage("stage3", e))?;
    save_ckpt(&cfg, "stage3.ckpt", &ckpt3)?;
    write_run_artifacts(&cfg, &log, &ckpt3, &test)
}

/// One comparison-table row.
#[derive(serde::Serialize)]
struct CompareRow {
    variant: &'static str,
    top1: f64,
    act_sparsity: f64,
    euclidean: f64,
    cosine: f64,
}

pub fn cmd_compare_regularizers(
    config: &Path,
    from: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config, out)?;
    let (train, test) = load_data(&cfg)?;
    prepare_output_dir(&cfg)?;

    let baseline = baseline_ckpt(&cfg, from, &train, &test)?;
    let (base_net, _, _) = baseline.restore()?;
    let base_eval = metrics::full_eval(&base_net, &test, &RegularizerSpec::none())?;

    let mut rows = vec![CompareRow {
        variant: "baseline",
        top1: base_eval.top1,
        act_sparsity: base_eval.act_sparsity,
        euclidean: 0.0,
        cosine: 1.0,
    }];

    let cmp = &cfg.compare;
    let variants: [(&'static str, RegularizerSpec); 3] = [
        ("l1", RegularizerSpec::uniform(RegKind::L1, cmp.l1_alpha, 1.0)?),
        ("hoyer_sq", RegularizerSpec::uniform(RegKind::HoyerSq, cmp.hoyer_alpha, 1.0)?),
        ("tl1", RegularizerSpec::uniform(RegKind::Tl1, cmp.tl1_alpha, cmp.tl1_beta)?),
    ];
    for (name, reg) in &variants {
        eprintln!("fine-tuning under {name}");
        let mut log = MetricsLog::new().echoing();
        log.push_eval(&base_net, &test, reg)?;
        let ckpt = pipeline::activation_finetune(
            &cfg,
            &baseline,
            reg,
            Some(cmp.epochs),
            &format!("compare.{name}"),
            &train,
            &test,
            &mut log,
        )
        .map_err(|e| Error::stage("compare", e))?;
        save_ckpt(&cfg, &format!("compare_{name}.ckpt"), &ckpt)?;
        artifacts::write_metrics_csv(&cfg.output_dir.join(format!("metrics_{name}.csv")), &log.rows)?;

        let (net, _, _) = ckpt.restore()?;
        let ev = metrics::full_eval(&net, &test, &RegularizerSpec::none())?;
        let (euclidean, cosine) = metrics::param_distance(&net, &base_net)?;
        rows.push(CompareRow {
            variant: name,
            top1: ev.top1,
            act_sparsity: ev.act_sparsity,
            euclidean,
            cosine,
        });
    }

    let mut s = String::from("variant,top1,act_sparsity,euclidean,cosine\n");
    for r in &rows {
        use std::fmt::Write as _;
        writeln!(s, "{},{},{},{},{}", r.variant, r.top1, r.act_sparsity, r.euclidean, r.cosine)
            .expect("string write");
    }
    std::fs::write(cfg.output_dir.join("compare.csv"), s)?;
    artifacts::write_json(&cfg.output_dir.join("compare.json"), &rows)?;
    for r in &rows {
        eprintln!(
            "{:<9} top1={:.4} as={:.4} euclidean={:.4} cosine={:.4}",
            r.variant, r.top1, r.act_sparsity, r.euclidean, r.cosine
        );
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct GridCell {
    alpha: f64,
    beta: f64,
    top1: f64,
    act_sparsity: f64,
    feasible: bool,
}

#[derive(serde::Serialize)]
struct GridSelection {
    feasible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    act_sparsity: Option<f64>,
}

pub fn cmd_grid_search(config: &Path, from: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, out)?;
    if cfg.grid.alphas.is_empty() {
        return Err(Error::Config("grid.alphas: must be non-empty".into()));
    }
    if cfg.grid.betas.is_empty() {
        return Err(Error::Config("grid.betas: must be non-empty".into()));
    }
    let (train, test) = load_data(&cfg)?;
    prepare_output_dir(&cfg)?;

    let baseline = baseline_ckpt(&cfg, from, &train, &test)?;
    let mut cells = Vec::new();
    for (i, &alpha) in cfg.grid.alphas.iter().enumerate() {
        for (j, &beta) in cfg.grid.betas.iter().enumerate() {
            eprintln!("grid cell alpha={alpha} beta={beta}");
            let reg = RegularizerSpec::uniform(RegKind::Tl1, alpha, beta)
                .map_err(|e| Error::Config(format!("grid cell ({alpha}, {beta}): {e}")))?;
            let mut log = MetricsLog::new();
            let ckpt = pipeline::activation_finetune(
                &cfg,
                &baseline,
                &reg,
                Some(cfg.grid.epochs),
                &format!("grid.a{i}.b{j}"),
                &train,
                &test,
                &mut log,
            )
            .map_err(|e| Error::stage("grid", e))?;
            let (net, _, _) = ckpt.restore()?;
            let ev = metrics::full_eval(&net, &test, &RegularizerSpec::none())?;
            cells.push(GridCell {
                alpha,
                beta,
                top1: ev.top1,
                act_sparsity: ev.act_sparsity,
                feasible: ev.top1 >= cfg.grid.accuracy_floor,
            });
            eprintln!(
                "  top1={:.4} as={:.4} feasible={}",
                ev.top1,
                ev.act_sparsity,
                cells.last().unwrap().feasible
            );
        }
    }

    let mut s = String::from("alpha,beta,top1,act_sparsity,feasible\n");
    for c in &cells {
        use std::fmt::Write as _;
        writeln!(s, "{},{},{},{},{}", c.alpha, c.beta, c.top1, c.act_sparsity, c.feasible)
            .expect("string write");
    }
    std::fs::write(cfg.output_dir.join("grid.csv"), s)?;

    // first maximal-sparsity feasible cell in row-major order
    let best = cells
        .iter()
        .filter(|c| c.feasible)
        .fold(None::<&GridCell>, |acc, c| match acc {
            Some(b) if b.act_sparsity >= c.act_sparsity => Some(b),
            _ => Some(c),
        });
    let selection = match best {
        Some(c) => {
            eprintln!("selected alpha={} beta={}", c.alpha, c.beta);
            GridSelection {
                feasible: true,
                alpha: Some(c.alpha),
                beta: Some(c.beta),
                top1: Some(c.top1),
                act_sparsity: Some(c.act_sparsity),
            }
        }
        None => {
            eprintln!("no cell met the accuracy floor {}", cfg.grid.accuracy_floor);
            GridSelection {
                feasible: false,
                alpha: None,
                beta: None,
                top1: None,
                act_sparsity: None,
            }
        }
    };
    artifacts::write_json(&cfg.output_dir.join("grid_selected.json"), &selection)
}

/// Baseline for comparison experiments: loaded when given, trained fresh
/// otherwise.
fn baseline_ckpt(
    cfg: &ExperimentConfig,
    from: Option<PathBuf>,
    train: &Dataset,
    test: &Dataset,
) -> Result<Checkpoint> {
    match from {
        Some(path) => {
            let ckpt = Checkpoint::load(&path)?;
            if ckpt.stage != StageTag::Pretrained {
                return Err(Error::Precondition(format!(
                    "baseline checkpoint must be pretrained, got {}",
                    ckpt.stage.name()
                )));
            }
            Ok(ckpt)
        }
        None => {
            let mut log = MetricsLog::new().echoing();
            let ckpt = pipeline::stage1_pretrain(cfg, train, test, None, &mut log)
                .map_err(|e| Error::stage("stage1", e))?;
            save_ckpt(cfg, "stage1.ckpt", &ckpt)?;
            artifacts::write_metrics_csv(&cfg.output_dir.join("metrics_baseline.csv"), &log.rows)?;
            Ok(ckpt)
        }
    }
}
