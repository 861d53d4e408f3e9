//! Three-stage orchestration: dense pretrain, weight sparsification
//! (induce, prune, fine-tune), then activation-map sparsification under
//! the frozen prune mask. Emits per-epoch metric rows with a global epoch
//! counter so curves from consecutive stages line up.

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Network;
use crate::metrics::{self, FullEval};
use crate::persistence::{Checkpoint, StageTag};
use crate::pruning::{self, PruneMask};
use crate::regularizers::RegularizerSpec;
use crate::trainer::{run_epochs, EpochStats, TrainHooks};

/// One metrics.csv row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: &'static str,
    pub top1: f64,
    pub act_sparsity: f64,
    pub weight_sparsity: f64,
    pub reg_value: f64,
    pub loss: f64,
}

/// Accumulates rows across stages; `offset` is the number of training
/// epochs already recorded.
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub rows: Vec<EpochRow>,
    offset: usize,
    echo: bool,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Continues the epoch numbering of an earlier run, for logs that
    /// start from a loaded checkpoint.
    pub fn starting_at(epoch: usize) -> Self {
        MetricsLog { offset: epoch, ..Self::default() }
    }

    /// Mirrors every appended row to stderr.
    pub fn echoing(mut self) -> Self {
        self.echo = true;
        self
    }

    fn push(&mut self, row: EpochRow) {
        if self.echo {
            eprintln!(
                "epoch {:>3} [{:<5}] top1={:.4} loss={:.4} as={:.4} ws={:.4}",
                row.epoch, row.split, row.top1, row.loss, row.act_sparsity, row.weight_sparsity
            );
        }
        self.rows.push(row);
    }

    /// Evaluation row at the current epoch boundary (epoch 0 before any
    /// training).
    pub fn push_eval(&mut self, net: &Network, test: &Dataset, reg: &RegularizerSpec) -> Result<()> {
        let ev = metrics::full_eval(net, test, reg)?;
        let ws = metrics::weight_sparsity(net).total_fraction;
        self.push(EpochRow {
            epoch: self.offset,
            split: "test",
            top1: ev.top1,
            act_sparsity: ev.act_sparsity,
            weight_sparsity: ws,
            reg_value: ev.reg_value,
            loss: ev.loss,
        });
        Ok(())
    }

    /// Training-split row from the epoch's running stats plus the paired
    /// test row; advances the global counter.
    fn push_epoch(
        &mut self,
        net: &Network,
        stats: &EpochStats,
        test: &Dataset,
        reg: &RegularizerSpec,
    ) -> Result<()> {
        self.offset += 1;
        let ws = metrics::weight_sparsity(net).total_fraction;
        self.push(EpochRow {
            epoch: self.offset,
            split: "train",
            top1: stats.top1(),
            act_sparsity: stats.act_sparsity(),
            weight_sparsity: ws,
            reg_value: stats.reg_value(),
            loss: stats.loss(),
        });
        let ev = metrics::full_eval(net, test, reg)?;
        self.push(EpochRow {
            epoch: self.offset,
            split: "test",
            top1: ev.top1,
            act_sparsity: ev.act_sparsity,
            weight_sparsity: ws,
            reg_value: ev.reg_value,
            loss: ev.loss,
        });
        Ok(())
    }

    pub fn last_test_row(&self) -> Option<&EpochRow> {
        self.rows.iter().rev().find(|r| r.split == "test")
    }
}

fn check_digest(ckpt: &Checkpoint, cfg: &ExperimentConfig) -> Result<()> {
    if ckpt.config_digest != cfg.digest() {
        return Err(Error::Precondition(format!(
            "checkpoint was written under config digest {} but the current config digests to {}",
            ckpt.config_digest,
            cfg.digest()
        )));
    }
    Ok(())
}

/// A checkpoint fed into a later stage must describe the model this config
/// builds; its own training history is not constrained. Only resume demands
/// an identical config.
fn check_architecture(
    ckpt: &Checkpoint,
    cfg: &ExperimentConfig,
    num_classes: usize,
) -> Result<()> {
    let net = crate::models::by_name(&cfg.model, num_classes)?;
    if ckpt.input_shape != net.input_sample_shape() || ckpt.layers != net.layers() {
        return Err(Error::Precondition(
            "checkpoint architecture does not match the configured model".into(),
        ));
    }
    Ok(())
}

fn make_checkpoint(
    net: &Network,
    velocity: &crate::layers::ParamStore,
    mask: Option<&PruneMask>,
    stage: StageTag,
    epoch: usize,
    cfg: &ExperimentConfig,
    train: &Dataset,
) -> Checkpoint {
    Checkpoint::from_network(
        net,
        velocity.clone(),
        mask.cloned(),
        stage,
        epoch,
        cfg.seed,
        cfg.digest(),
        train.normalization,
    )
}

/// Dense baseline training. With `resume` the checkpoint's parameters,
/// velocity, and epoch counter continue under the same substreams, which
/// makes an interrupted run bit-identical to an uninterrupted one.
pub fn stage1_pretrain(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    resume: Option<&Checkpoint>,
    log: &mut MetricsLog,
) -> Result<Checkpoint> {
    let train_cfg = cfg.stage1_train()?;
    let none = RegularizerSpec::none();

    let (mut net, mut velocity, start_epoch) = match resume {
        Some(ckpt) => {
            check_digest(ckpt, cfg)?;
            if ckpt.stage != StageTag::Pretrained {
                return Err(Error::Precondition(format!(
                    "resume checkpoint is stage {}, expected pretrained",
                    ckpt.stage.name()
                )));
            }
            let (net, velocity, _) = ckpt.restore()?;
            (net, velocity, ckpt.epoch)
        }
        None => {
            let mut net = crate::models::by_name(&cfg.model, train.num_classes)?;
            net.init_params(cfg.seed);
            let velocity = net.zero_param_store();
            (net, velocity, 0)
        }
    };

    if start_epoch == 0 {
        log.push_eval(&net, test, &none)?;
    }
    let hooks = TrainHooks {
        reg: &none,
        weight_l1_alpha: 0.0,
        mask: None,
        stream_tag: "stage1",
    };
    run_epochs(
        &mut net,
        &mut velocity,
        train,
        &train_cfg,
        start_epoch,
        &hooks,
        &mut |_e, net, stats| log.push_epoch(net, stats, test, &none),
    )?;

    Ok(make_checkpoint(&net, &velocity, None, StageTag::Pretrained, train_cfg.epochs, cfg, train))
}

/// Weight sparsification: l1 induction, magnitude pruning to the target
/// rate, then fine-tuning with the mask pinned. The output checkpoint
/// carries the mask.
pub fn stage2_weight_sparsify(
    cfg: &ExperimentConfig,
    input: &Checkpoint,
    train: &Dataset,
    test: &Dataset,
    log: &mut MetricsLog,
) -> Result<Checkpoint> {
    check_architecture(input, cfg, train.num_classes)?;
    if input.stage != StageTag::Pretrained {
        return Err(Error::Precondition(format!(
            "weight sparsification starts from a pretrained checkpoint, got {}",
            input.stage.name()
        )));
    }
    let prune_cfg = cfg.prune.to_prune_config()?;
    let train_cfg = cfg.stage2_train()?;
    let none = RegularizerSpec::none();
    let (mut net, mut velocity, _) = input.restore()?;

    pruning::induce_weight_sparsity(
        &mut net,
        &mut velocity,
        train,
        &prune_cfg,
        &train_cfg,
        |_e, net, stats| log.push_epoch(net, stats, test, &none),
    )?;

    let mask = pruning::build_mask(&net, prune_cfg.target_rate, prune_cfg.scope)?;

    pruning::apply_mask_and_finetune(
        &mut net,
        &mut velocity,
        &mask,
        train,
        &prune_cfg,
        &train_cfg,
        |_e, net, stats| log.push_epoch(net, stats, test, &none),
    )?;

    let epochs = prune_cfg.phase_epochs.0 + prune_cfg.phase_epochs.1;
    Ok(make_checkpoint(&net, &velocity, Some(&mask), StageTag::WeightSparse, epochs, cfg, train))
}

/// Activation-map sparsification under the stage-2 mask. The mask must be
/// present and stays enforced after every update.
pub fn stage3_activation_sparsify(
    cfg: &ExperimentConfig,
    input: &Checkpoint,
    train: &Dataset,
    test: &Dataset,
    log: &mut MetricsLog,
) -> Result<Checkpoint> {
    check_architecture(input, cfg, train.num_classes)?;
    if input.stage != StageTag::WeightSparse {
        return Err(Error::Precondition(format!(
            "activation sparsification starts from a weight-sparse checkpoint, got {}",
            input.stage.name()
        )));
    }
    let reg = cfg.regularizer.to_dual_spec()?;
    let train_cfg = cfg.stage3_train()?;
    let (mut net, mut velocity, mask) = input.restore()?;
    let mask = mask.ok_or_else(|| {
        Error::Precondition("stage-2 checkpoint lacks a prune mask".into())
    })?;

    let hooks = TrainHooks {
        reg: &reg,
        weight_l1_alpha: 0.0,
        mask: Some(&mask),
        stream_tag: "stage3",
    };
    run_epochs(
        &mut net,
        &mut velocity,
        train,
        &train_cfg,
        0,
        &hooks,
        &mut |_e, net, stats| log.push_epoch(net, stats, test, &reg),
    )?;

    Ok(make_checkpoint(&net, &velocity, Some(&mask), StageTag::Dual, train_cfg.epochs, cfg, train))
}

/// Activation sparsification of a dense (pretrained) checkpoint, without
/// any pruning. Produces the regularizer-comparison rows.
pub fn activation_finetune(
    cfg: &ExperimentConfig,
    input: &Checkpoint,
    reg: &RegularizerSpec,
    epochs_override: Option<usize>,
    stream_tag: &str,
    train: &Dataset,
    test: &Dataset,
    log: &mut MetricsLog,
) -> Result<Checkpoint> {
    check_architecture(input, cfg, train.num_classes)?;
    if input.stage != StageTag::Pretrained {
        return Err(Error::Precondition(format!(
            "activation fine-tuning starts from a pretrained checkpoint, got {}",
            input.stage.name()
        )));
    }
    let mut train_cfg = cfg.stage3_train()?;
    if let Some(e) = epochs_override {
        train_cfg.epochs = e;
    }
    let (mut net, mut velocity, _) = input.restore()?;

    let hooks = TrainHooks { reg, weight_l1_alpha: 0.0, mask: None, stream_tag };
    run_epochs(
        &mut net,
        &mut velocity,
        train,
        &train_cfg,
        0,
        &hooks,
        &mut |_e, net, stats| log.push_epoch(net, stats, test, reg),
    )?;

    Ok(make_checkpoint(&net, &velocity, None, StageTag::Pretrained, train_cfg.epochs, cfg, train))
}

/// Final headline metrics, shaped like one summary row.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub stage: String,
    pub top1: f64,
    pub weight_sparsity: f64,
    pub act_sparsity: f64,
    pub flops_drop: f64,
}

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Headline metrics of a network on the evaluation set.
pub fn summarize(net: &Network, test: &Dataset, stage: StageTag) -> Result<RunSummary> {
    let ev: FullEval = metrics::full_eval(net, test, &RegularizerSpec::none())?;
    let ws = metrics::weight_sparsity(net).total_fraction;
    let flops = metrics::flops_drop(net, test)?;
    Ok(RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        stage: stage.name().to_string(),
        top1: ev.top1,
        weight_sparsity: ws,
        act_sparsity: ev.act_sparsity,
        flops_drop: flops.drop_fraction,
    })
}

/// Which stages a command runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSet {
    pub stage2: bool,
    pub stage3: bool,
}

#[derive(Debug)]
pub struct RunOutput {
    pub final_ckpt: Checkpoint,
    pub summary: RunSummary,
    pub log: MetricsLog,
    /// Checkpoints after each completed stage, in order.
    pub stage_ckpts: Vec<Checkpoint>,
}

/// Runs stage 1 plus the requested follow-on stages from scratch. Stage
/// failures are tagged with the stage that raised them.
pub fn run_full(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    stages: StageSet,
) -> Result<RunOutput> {
    if stages.stage3 && !stages.stage2 {
        return Err(Error::Precondition(
            "activation stage needs the weight-sparsification stage's mask".into(),
        ));
    }
    let mut log = MetricsLog::new();
    let mut stage_ckpts = Vec::new();

    let ckpt1 = stage1_pretrain(cfg, train, test, None, &mut log)
        .map_err(|e| Error::stage("stage1", e))?;
    stage_ckpts.push(ckpt1);

    if stages.stage2 {
        let ckpt2 = stage2_weight_sparsify(cfg, &stage_ckpts[0], train, test, &mut log)
            .map_err(|e| Error::stage("stage2", e))?;
        stage_ckpts.push(ckpt2);
    }
    if stages.stage3 {
        let ckpt3 = stage3_activation_sparsify(cfg, &stage_ckpts[1], train, test, &mut log)
            .map_err(|e| Error::stage("stage3", e))?;
        stage_ckpts.push(ckpt3);
    }

    let last = stage_ckpts.last().expect("stage1 always runs");
    let (net, _, _) = last.restore()?;
    let summary = summarize(&net, test, last.stage)?;
    Ok(RunOutput { final_ckpt: last.clone(), summary, log, stage_ckpts })
}
