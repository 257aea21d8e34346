//! Optimization loop, total objective, evaluation and the metrics stream.
//!
//! Training follows the fixed protocol: Adam, batch size 1 (one optimizer
//! step per bag), up to `epochs` epochs, seeded shuffling per epoch. Every
//! epoch appends a train row and a val row to the metrics CSV:
//!
//! ```text
//! epoch,split,loss_task,loss_balance,f1,auc,acc,mcc,sens,spec,ppv,npv,
//! imp_0..imp_{E-1},load_0..load_{E-1}
//! ```
//!
//! where the importance/load columns are layer-averaged and then averaged
//! over the split's bags. The best-validation-F1 model is checkpointed to
//! `best.mckp` and the running state to `last.mckp`; resuming from
//! `last.mckp` reproduces the uninterrupted trajectory bit-identically.

mod adam;
mod checkpoint;
mod metrics;

pub use adam::{AdamHyper, OptimizerState};
pub use checkpoint::{
    decode_checkpoint, decode_hex, encode_checkpoint, encode_hex, load_checkpoint,
    save_checkpoint, Checkpoint, CheckpointMeta, MCKP_MAGIC, MCKP_VERSION,
};
pub use metrics::{compute_metrics, MetricsReport};

use crate::data::{read_bag, Bag, Manifest, Split};
use crate::error::{Error, Result};
use crate::experts::load_balance_loss;
use crate::model::{ForwardOutput, MoEMambaMILModel};
use crate::par;
use crate::tensor::{Scalar, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::Config("lr must be nonnegative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Scalar parts of the objective for one bag.
pub struct LossParts<T: Scalar> {
    pub total: Var,
    pub task: T,
    pub balance: T,
}

/// `L = cross_entropy + lambda * balance`, recorded on the same tape as
/// the forward pass.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ForwardOutput<T>,
    label: usize,
    lambda: f64,
    experts: usize,
) -> Result<LossParts<T>> {
    let ce = tape.cross_entropy(out.logits, label)?;
    let bal = load_balance_loss(tape, &out.moe_stats, experts)?;
    let scaled = tape.scale(bal, T::from_f64(lambda));
    let total = tape.add(ce, scaled)?;
    Ok(LossParts {
        total,
        task: tape.data(ce)[0],
        balance: tape.data(bal)[0],
    })
}

/// Bags of one manifest grouped by split, loaded from disk.
pub struct SplitBags {
    pub train: Vec<Bag>,
    pub val: Vec<Bag>,
    pub test: Vec<Bag>,
}

/// Loads every bag in the manifest; relative paths resolve against
/// `base_dir`.
pub fn load_bags(manifest: &Manifest, base_dir: &Path) -> Result<SplitBags> {
    let mut out = SplitBags {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for entry in &manifest.entries {
        let path = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base_dir.join(&entry.path)
        };
        let bag = read_bag(&path).map_err(|e| match e {
            Error::Io { path, source } => Error::Io {
                path: format!("slide {}: {path}", entry.slide_id),
                source,
            },
            other => other,
        })?;
        match entry.split {
            Split::Train => out.train.push(bag),
            Split::Val => out.val.push(bag),
            Split::Test => out.test.push(bag),
        }
    }
    Ok(out)
}

/// Forward-only evaluation summary over one split.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub labels: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    pub loss_task: f64,
    pub loss_balance: f64,
    pub importance: Vec<f64>,
    pub load: Vec<f64>,
    pub metrics: MetricsReport,
}

struct BagEval {
    label: usize,
    probs: Vec<f64>,
    task: f64,
    balance: f64,
    importance: Vec<f64>,
    load: Vec<f64>,
}

fn eval_bag(model: &MoEMambaMILModel<f32>, bag: &Bag) -> Result<BagEval> {
    let lambda = model.config.lambda_balance;
    let experts = model.config.effective_experts();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, bag)?;
    let parts = total_loss(&mut tape, &out, bag.label, lambda, experts)?;
    let (importance, load) = layer_mean_stats(&tape, &out, experts);
    Ok(BagEval {
        label: bag.label,
        probs: out.probs.iter().map(|&p| p as f64).collect(),
        task: parts.task as f64,
        balance: parts.balance as f64,
        importance,
        load,
    })
}

fn layer_mean_stats<T: Scalar>(
    tape: &Tape<T>,
    out: &ForwardOutput<T>,
    experts: usize,
) -> (Vec<f64>, Vec<f64>) {
    let layers = out.moe_stats.len().max(1) as f64;
    let mut importance = vec![0.0f64; experts];
    let mut load = vec![0.0f64; experts];
    for st in &out.moe_stats {
        for (acc, v) in importance.iter_mut().zip(st.importance_values(tape)) {
            *acc += v.to_f64() / layers;
        }
        for (acc, &v) in load.iter_mut().zip(&st.load) {
            *acc += v.to_f64() / layers;
        }
    }
    (importance, load)
}

/// Evaluates a split; bags fan out over the thread pool and are reduced
/// in manifest order.
pub fn evaluate(model: &MoEMambaMILModel<f32>, bags: &[Bag]) -> Result<EvalOutcome> {
    if bags.is_empty() {
        return Err(Error::contract("evaluate called on an empty split"));
    }
    let experts = model.config.effective_experts();
    let results = par::map_indexed(bags.len(), 200_000, |i| eval_bag(model, &bags[i]));
    let mut labels = Vec::with_capacity(bags.len());
    let mut probs = Vec::with_capacity(bags.len());
    let mut task = 0.0;
    let mut balance = 0.0;
    let mut importance = vec![0.0f64; experts];
    let mut load = vec![0.0f64; experts];
    let n = bags.len() as f64;
    for r in results {
        let r = r?;
        labels.push(r.label);
        probs.push(r.probs);
        task += r.task / n;
        balance += r.balance / n;
        for (acc, v) in importance.iter_mut().zip(&r.importance) {
            *acc += v / n;
        }
        for (acc, v) in load.iter_mut().zip(&r.load) {
            *acc += v / n;
        }
    }
    let metrics = compute_metrics(&labels, &probs)?;
    Ok(EvalOutcome {
        labels,
        probs,
        loss_task: task,
        loss_balance: balance,
        importance,
        load,
        metrics,
    })
}

/// Output file locations for one training run.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub metrics_path: PathBuf,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

impl TrainOptions {
    pub fn in_dir(dir: &Path) -> Self {
        TrainOptions {
            metrics_path: dir.join("metrics.csv"),
            best_path: dir.join("best.mckp"),
            last_path: dir.join("last.mckp"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_f1: f64,
    /// 1-based epoch that produced the best validation F1 (0 = none).
    pub best_epoch: usize,
    pub first_epoch_train_loss: f64,
    pub final_epoch_train_loss: f64,
    /// Layer- and epoch-averaged expert load of the final training epoch.
    pub final_train_load: Vec<f64>,
    pub final_val: Option<MetricsReport>,
}

fn metrics_header(experts: usize) -> String {
    let mut s = String::from("epoch,split,loss_task,loss_balance,f1,auc,acc,mcc,sens,spec,ppv,npv");
    for e in 0..experts {
        s.push_str(&format!(",imp_{e}"));
    }
    for e in 0..experts {
        s.push_str(&format!(",load_{e}"));
    }
    s.push('\n');
    s
}

#[allow(clippy::too_many_arguments)]
fn metrics_row(
    epoch: usize,
    split: &str,
    loss_task: f64,
    loss_balance: f64,
    m: &MetricsReport,
    importance: &[f64],
    load: &[f64],
) -> String {
    let mut s = format!(
        "{epoch},{split},{loss_task},{loss_balance},{},{},{},{},{},{},{},{}",
        m.f1, m.auc, m.acc, m.mcc, m.sens, m.spec, m.ppv, m.npv
    );
    for v in importance {
        s.push_str(&format!(",{v}"));
    }
    for v in load {
        s.push_str(&format!(",{v}"));
    }
    s.push('\n');
    s
}

/// Runs the training protocol. With `resume`, the checkpointed epoch
/// counter, parameters, optimizer moments, RNG state and best-F1 tracking
/// continue exactly where they stopped.
pub fn train(
    model: &mut MoEMambaMILModel<f32>,
    train_bags: &[Bag],
    val_bags: &[Bag],
    cfg: &TrainConfig,
    opts: &TrainOptions,
    resume: Option<&Checkpoint>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_bags.is_empty() {
        return Err(Error::contract("training needs a non-empty train split"));
    }
    let lambda = model.config.lambda_balance;
    let experts = model.config.effective_experts();
    let hyper = cfg.hyper();

    let mut opt = OptimizerState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut start_epoch = 0usize;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;

    if let Some(ckpt) = resume {
        if ckpt.meta.model != model.config {
            return Err(Error::Config(
                "checkpoint model config does not match the current run".into(),
            ));
        }
        // epochs may grow on resume; everything else must match
        let normalized = TrainConfig { epochs: cfg.epochs, ..ckpt.meta.train.clone() };
        if normalized != *cfg {
            return Err(Error::Config(
                "checkpoint train config does not match the current run".into(),
            ));
        }
        if cfg.epochs < ckpt.meta.epoch {
            return Err(Error::Config(format!(
                "checkpoint already covers {} epochs, requested {}",
                ckpt.meta.epoch, cfg.epochs
            )));
        }
        ckpt.restore(&mut model.store, &mut opt)?;
        let seed_bytes = decode_hex(&ckpt.meta.rng_seed)?;
        let seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| Error::Config("rng seed must be 32 bytes".into()))?;
        rng = ChaCha8Rng::from_seed(seed);
        let pos = u128::from_str_radix(&ckpt.meta.rng_word_pos, 16)
            .map_err(|_| Error::Config("bad rng word position".into()))?;
        rng.set_word_pos(pos);
        start_epoch = ckpt.meta.epoch;
        best_f1 = ckpt.meta.best_f1;
        best_epoch = if best_f1.is_finite() && best_f1 >= 0.0 { start_epoch } else { 0 };
    }

    let mut csv = if resume.is_some() && opts.metrics_path.exists() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&opts.metrics_path)
            .map_err(|e| Error::io(opts.metrics_path.display().to_string(), e))?
    } else {
        let mut f = std::fs::File::create(&opts.metrics_path)
            .map_err(|e| Error::io(opts.metrics_path.display().to_string(), e))?;
        f.write_all(metrics_header(experts).as_bytes())
            .map_err(|e| Error::io(opts.metrics_path.display().to_string(), e))?;
        f
    };

    let mut first_epoch_train_loss = f64::NAN;
    let mut final_epoch_train_loss = f64::NAN;
    let mut final_train_load = vec![0.0f64; experts];
    let mut final_val = None;

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train_bags.len()).collect();
        order.shuffle(&mut rng);

        let n = order.len() as f64;
        let mut labels = Vec::with_capacity(order.len());
        let mut probs = Vec::with_capacity(order.len());
        let mut loss_task = 0.0;
        let mut loss_balance = 0.0;
        let mut importance = vec![0.0f64; experts];
        let mut load = vec![0.0f64; experts];

        for &ix in &order {
            let bag = &train_bags[ix];
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, bag)?;
            let parts = total_loss(&mut tape, &out, bag.label, lambda, experts)?;
            let total_val = tape.data(parts.total)[0];
            if !total_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss on slide {} (epoch {})",
                    bag.slide_id,
                    epoch + 1
                )));
            }
            let (imp_b, load_b) = layer_mean_stats(&tape, &out, experts);
            tape.backward(parts.total)?;
            let mut grads: Vec<Option<Vec<f32>>> = vec![None; model.store.len()];
            for (id, g) in tape.param_grads() {
                grads[id.index()] = g.map(|s| s.to_vec());
            }
            drop(tape);
            opt.step(&mut model.store, &grads, &hyper)?;

            labels.push(bag.label);
            probs.push(out.probs.iter().map(|&p| p as f64).collect());
            loss_task += parts.task as f64 / n;
            loss_balance += parts.balance as f64 / n;
            for (acc, v) in importance.iter_mut().zip(&imp_b) {
                *acc += v / n;
            }
            for (acc, v) in load.iter_mut().zip(&load_b) {
                *acc += v / n;
            }
        }

        let train_metrics = compute_metrics(&labels, &probs)?;
        csv.write_all(
            metrics_row(epoch + 1, "train", loss_task, loss_balance, &train_metrics, &importance, &load)
                .as_bytes(),
        )
        .map_err(|e| Error::io(opts.metrics_path.display().to_string(), e))?;

        if epoch == start_epoch && start_epoch == 0 {
            first_epoch_train_loss = loss_task + lambda * loss_balance;
        }
        final_epoch_train_loss = loss_task + lambda * loss_balance;
        final_train_load = load;

        let mut is_best = false;
        if !val_bags.is_empty() {
            let val = evaluate(model, val_bags)?;
            csv.write_all(
                metrics_row(
                    epoch + 1,
                    "val",
                    val.loss_task,
                    val.loss_balance,
                    &val.metrics,
                    &val.importance,
                    &val.load,
                )
                .as_bytes(),
            )
            .map_err(|e| Error::io(opts.metrics_path.display().to_string(), e))?;
            if val.metrics.f1 > best_f1 {
                best_f1 = val.metrics.f1;
                best_epoch = epoch + 1;
                is_best = true;
            }
            final_val = Some(val.metrics);
        }

        let meta = CheckpointMeta {
            model: model.config.clone(),
            train: cfg.clone(),
            epoch: epoch + 1,
            adam_step: opt.step,
            rng_seed: encode_hex(&rng.get_seed()),
            rng_word_pos: format!("{:x}", rng.get_word_pos()),
            best_f1: if best_f1.is_finite() { best_f1 } else { -1.0 },
        };
        let ckpt = Checkpoint::assemble(meta, &model.store, &opt);
        if is_best || (val_bags.is_empty() && epoch + 1 == cfg.epochs) {
            save_checkpoint(&ckpt, &opts.best_path)?;
        }
        save_checkpoint(&ckpt, &opts.last_path)?;
    }
    csv.flush().map_err(|e| Error::io(opts.metrics_path.display().to_string(), e))?;

    Ok(TrainSummary {
        epochs_run: cfg.epochs - start_epoch,
        best_f1: if best_f1.is_finite() { best_f1 } else { -1.0 },
        best_epoch,
        first_epoch_train_loss,
        final_epoch_train_loss,
        final_train_load,
        final_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{build_variant, ModelConfig, Variant};

    fn tiny_model_cfg(classes: usize) -> ModelConfig {
        ModelConfig {
            d_in: 8,
            d_model: 8,
            classes,
            levels: 3,
            experts: 2,
            top_k: 2,
            static_depth: 1,
            dyn_depth: 1,
            d_state: 4,
            d_conv: 2,
            expand: 2,
            d_attn: 4,
            ffn_hidden: 16,
            lambda_balance: 0.001,
            variant: Variant::Full,
            seed: 1,
        }
    }

    fn tiny_bags(classes: usize, per_class: usize, seed: u64) -> Vec<Bag> {
        generate_synthetic(&SyntheticSpec {
            classes,
            slides_per_class: per_class,
            roots: 2,
            fanouts: vec![2, 2],
            d_in: 8,
            signal: 2.0,
            sigma: 0.4,
            signal_fraction: 0.5,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn total_loss_lambda_zero_is_exactly_cross_entropy() {
        let cfg = tiny_model_cfg(2);
        let model = build_variant::<f64>(&cfg).unwrap();
        let bag = &tiny_bags(2, 1, 3)[0];
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, bag).unwrap();
        let parts = total_loss(&mut tape, &out, bag.label, 0.0, 2).unwrap();
        assert_eq!(tape.data(parts.total)[0], parts.task);
    }

    #[test]
    fn total_loss_uniform_balance_adds_lambda() {
        // WoMoe: single expert, balance term is exactly E*1*1 = 1
        let cfg = ModelConfig { variant: Variant::WoMoe, ..tiny_model_cfg(2) };
        let model = build_variant::<f64>(&cfg).unwrap();
        let bag = &tiny_bags(2, 1, 4)[0];
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, bag).unwrap();
        let parts = total_loss(&mut tape, &out, bag.label, 1.0, 1).unwrap();
        assert!((parts.balance - 1.0).abs() < 1e-12);
        assert!((tape.data(parts.total)[0] - (parts.task + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn lr_zero_leaves_parameters_fixed() {
        let cfg = tiny_model_cfg(2);
        let mut model = build_variant::<f32>(&cfg).unwrap();
        let before = model.store.flatten();
        let bags = tiny_bags(2, 2, 5);
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions::in_dir(dir.path());
        let tc = TrainConfig { lr: 0.0, epochs: 2, ..TrainConfig::default() };
        train(&mut model, &bags, &bags, &tc, &opts, None).unwrap();
        assert_eq!(model.store.flatten(), before);
    }

    #[test]
    fn two_runs_are_bit_identical() {
        let run = || {
            let cfg = tiny_model_cfg(2);
            let mut model = build_variant::<f32>(&cfg).unwrap();
            let bags = tiny_bags(2, 3, 6);
            let dir = tempfile::tempdir().unwrap();
            let opts = TrainOptions::in_dir(dir.path());
            let tc = TrainConfig { epochs: 3, ..TrainConfig::default() };
            train(&mut model, &bags, &bags, &tc, &opts, None).unwrap();
            let csv = std::fs::read(&opts.metrics_path).unwrap();
            let ckpt = std::fs::read(&opts.last_path).unwrap();
            (model.store.flatten(), csv, ckpt)
        };
        let (p1, c1, k1) = run();
        let (p2, c2, k2) = run();
        assert!(p1.iter().zip(&p2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(c1, c2);
        assert_eq!(k1, k2);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let cfg = tiny_model_cfg(2);
        let bags = tiny_bags(2, 3, 7);
        let tc_full = TrainConfig { epochs: 4, ..TrainConfig::default() };

        // uninterrupted
        let dir_a = tempfile::tempdir().unwrap();
        let opts_a = TrainOptions::in_dir(dir_a.path());
        let mut model_a = build_variant::<f32>(&cfg).unwrap();
        train(&mut model_a, &bags, &bags, &tc_full, &opts_a, None).unwrap();

        // stop after 2, resume to 4
        let dir_b = tempfile::tempdir().unwrap();
        let opts_b = TrainOptions::in_dir(dir_b.path());
        let mut model_b = build_variant::<f32>(&cfg).unwrap();
        let tc_half = TrainConfig { epochs: 2, ..tc_full.clone() };
        train(&mut model_b, &bags, &bags, &tc_half, &opts_b, None).unwrap();
        let ckpt = load_checkpoint(&opts_b.last_path).unwrap();
        // any hyperparameter other than the epoch budget must match
        let mut model_b2 = build_variant::<f32>(&cfg).unwrap();
        let tc_bad = TrainConfig { lr: 5e-4, ..tc_full.clone() };
        let err = train(&mut model_b2, &bags, &bags, &tc_bad, &opts_b, Some(&ckpt)).unwrap_err();
        assert!(err.to_string().contains("train config"));

        let mut model_c = build_variant::<f32>(&cfg).unwrap();
        train(&mut model_c, &bags, &bags, &tc_full, &opts_b, Some(&ckpt)).unwrap();

        let pa = model_a.store.flatten();
        let pc = model_c.store.flatten();
        assert!(pa.iter().zip(&pc).all(|(a, b)| a.to_bits() == b.to_bits()));
        // the resumed CSV (first half + appended second half) equals the
        // uninterrupted one
        let csv_a = std::fs::read(&opts_a.metrics_path).unwrap();
        let csv_b = std::fs::read(&opts_b.metrics_path).unwrap();
        assert_eq!(csv_a, csv_b);
        let ck_a = std::fs::read(&opts_a.last_path).unwrap();
        let ck_b = std::fs::read(&opts_b.last_path).unwrap();
        assert_eq!(ck_a, ck_b);
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let cfg = tiny_model_cfg(2);
        let mut model = build_variant::<f32>(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions::in_dir(dir.path());
        let err = train(&mut model, &[], &[], &TrainConfig::default(), &opts, None).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn evaluate_rejects_empty_split() {
        let cfg = tiny_model_cfg(2);
        let model = build_variant::<f32>(&cfg).unwrap();
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn training_decreases_loss_on_tiny_task() {
        let cfg = ModelConfig { lambda_balance: 0.001, ..tiny_model_cfg(2) };
        let mut model = build_variant::<f32>(&cfg).unwrap();
        let bags = tiny_bags(2, 4, 8);
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions::in_dir(dir.path());
        let tc = TrainConfig { lr: 3e-3, epochs: 8, ..TrainConfig::default() };
        let summary = train(&mut model, &bags, &bags, &tc, &opts, None).unwrap();
        assert!(
            summary.final_epoch_train_loss < summary.first_epoch_train_loss,
            "{} -> {}",
            summary.first_epoch_train_loss,
            summary.final_epoch_train_loss
        );
    }
}
