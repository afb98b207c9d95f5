//! Stage-one ensemble pre-training: SGD with momentum over augmented base
//! batches, one joint objective across the three pooling branches.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::ImageSet;
use crate::error::{dim_err, Error, Result};
use crate::graph::Graph;
use crate::losses::{self, BranchLossReport, EnsembleWeights, LossConfig};
use crate::model::{self, Checkpoint, Model, ModelConfig, NamedTensor};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A learning-rate multiplier applied from `epoch` onwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestone {
    pub epoch: usize,
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Vec<Milestone>,
    pub weights: EnsembleWeights,
    pub loss: LossConfig,
    /// Emit a checkpoint after every this many epochs (and at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 130,
            batch_size: 32,
            lr0: 0.025,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: vec![
                Milestone { epoch: 70, multiplier: 0.2 },
                Milestone { epoch: 100, multiplier: 0.2 },
            ],
            weights: EnsembleWeights::default(),
            loss: LossConfig::default(),
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.epochs == 0 {
            p.push("train.epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            p.push(format!("train.batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            p.push(format!("train.lr0 must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            p.push(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for w in self.schedule.windows(2) {
            if w[1].epoch <= w[0].epoch {
                p.push(format!(
                    "train.schedule epochs must strictly increase ({} then {})",
                    w[0].epoch, w[1].epoch
                ));
            }
        }
        for m in &self.schedule {
            if !(m.multiplier > 0.0 && m.multiplier.is_finite()) {
                p.push(format!("train.schedule multiplier must be > 0, got {}", m.multiplier));
            }
        }
        if self.checkpoint_every == 0 {
            p.push("train.checkpoint_every must be >= 1".into());
        }
        if let Err(e) = self.weights.validate() {
            p.push(format!("train.weights: {e}"));
        }
        p.extend(self.loss.problems());
        p
    }

    /// Moves every milestone to the same fraction of a different run length.
    pub fn rescaled_schedule(&self, epochs: usize) -> Vec<Milestone> {
        self.schedule
            .iter()
            .map(|m| Milestone {
                epoch: (m.epoch * epochs + self.epochs / 2) / self.epochs,
                multiplier: m.multiplier,
            })
            .collect()
    }
}

/// `lr0 · Π multipliers` over milestones reached by `epoch`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} out of range for {} epochs",
            cfg.epochs
        )));
    }
    Ok(cfg
        .schedule
        .iter()
        .filter(|m| m.epoch <= epoch)
        .fold(cfg.lr0, |lr, m| lr * m.multiplier))
}

/// Classical momentum with weight decay folded into the gradient:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
pub fn sgd_step(
    param: &Tensor,
    grad: &Tensor,
    velocity: &Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(Tensor, Tensor)> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return dim_err(format!(
            "sgd_step shapes differ: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        ));
    }
    let mut p = param.data().to_vec();
    let mut v = velocity.data().to_vec();
    sgd_update(&mut p, grad.data(), &mut v, lr, momentum, weight_decay);
    Ok((
        Tensor::with_dtype(param.shape(), p, param.dtype())?,
        Tensor::with_dtype(velocity.shape(), v, velocity.dtype())?,
    ))
}

fn sgd_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Batches of one epoch. Each class's images are shuffled and grouped in
/// pairs (a leftover image joins its class's last pair), the groups are
/// shuffled, and consecutive groups fill batches of about `batch_size`
/// images. Every label in a batch therefore occurs at least twice, so every
/// contrastive anchor has a positive.
pub fn epoch_batches(data: &ImageSet, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    let mut rng = Rng::stream(seed, EPOCH_STREAM + epoch as u64);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (class, mut members) in data.by_class() {
        if members.len() < 2 {
            return Err(Error::InsufficientClass {
                class,
                available: members.len(),
                required: 2,
            });
        }
        rng.shuffle(&mut members);
        let start = groups.len();
        for pair in members.chunks(2) {
            if pair.len() == 2 {
                groups.push(pair.to_vec());
            } else {
                let last = groups.len() - 1;
                groups[last].push(pair[0]);
            }
        }
        debug_assert!(groups.len() > start);
    }
    rng.shuffle(&mut groups);
    let per_batch = (batch_size / 2).max(1);
    Ok(groups.chunks(per_batch).map(|c| c.concat()).collect())
}

const EPOCH_STREAM: u64 = 1 << 32;

/// One completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over batches of the weighted overall loss.
    pub overall: f64,
    /// Mean over batches of each branch's terms.
    pub branches: [BranchLossReport; 3],
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Loss values and parameter gradients of one batch.
pub struct BatchResult {
    pub overall: f64,
    pub branches: [BranchLossReport; 3],
    /// One entry per model parameter; `None` when no gradient reached it.
    pub grads: Vec<Option<Vec<f64>>>,
    pub batch_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Forward and backward pass over one augmented batch: backbone, three
/// pooling branches, heads and projectors, per-branch losses and their
/// weighted sum. Branches with zero weight are evaluated for reporting but
/// kept out of the objective.
pub fn batch_step(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    weights: &EnsembleWeights,
    loss: &LossConfig,
) -> Result<BatchResult> {
    let k = model.config.num_base_classes;
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {l} out of range for {k} base classes")));
    }
    let aug = model::augment(images, labels)?;
    let mut g = Graph::new();
    let x = g.constant(aug.images);
    let fg = model.build_backbone(&mut g, x, true)?;
    let mut reports = Vec::with_capacity(3);
    let mut objective = None;
    for o in 1..=3usize {
        let w = fg.params[model.param_index(&format!("head{o}.W")).expect("head")];
        let u = fg.params[model.param_index(&format!("proj{o}.U")).expect("projector")];
        let z = g.pool(fg.features, o as u8, model.config.pool)?;
        let logits = g.matmul(z, w)?;
        let proj = g.matmul(z, u)?;
        let unit = g.l2_normalize_rows(proj, model::projector_eps())?;
        let cb = losses::cb_loss_graph(&mut g, logits, &aug.labels, loss)?;
        let sb = losses::sb_loss_graph(&mut g, unit, &aug.labels, loss)?;
        let (cbv, sbv) = (g.value(cb).item()?, g.value(sb).item()?);
        let cbv = if loss.use_cb { cbv } else { 0.0 };
        let sbv = if loss.use_sb { sbv } else { 0.0 };
        reports.push(BranchLossReport::new(cbv, sbv));
        let alpha = weights.alpha[o - 1];
        if alpha == 0.0 {
            continue;
        }
        let total = match (loss.use_cb, loss.use_sb) {
            (true, true) => g.add(cb, sb)?,
            (true, false) => cb,
            _ => sb,
        };
        let term = g.scale(total, alpha)?;
        objective = Some(match objective {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let branches: [BranchLossReport; 3] = reports.try_into().expect("three branches");
    let overall = losses::overall_loss(&branches, weights)?;
    let mut grads = vec![None; fg.params.len()];
    if let Some(obj) = objective {
        g.backward(obj)?;
        for (slot, &v) in grads.iter_mut().zip(&fg.params) {
            *slot = g.take_grad(v);
        }
    }
    Ok(BatchResult {
        overall,
        branches,
        grads,
        batch_stats: fg.batch_stats,
    })
}

/// Training state: model, optimizer velocity and completed-epoch count.
pub struct Trainer {
    pub model: Model,
    pub velocity: Vec<NamedTensor>,
    pub config: TrainConfig,
    pub epoch: usize,
}

impl Trainer {
    /// Fresh model initialized from the training seed.
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Trainer> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let model = Model::init(model_config, &mut Rng::stream(config.seed, INIT_STREAM))?;
        let velocity = model
            .params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                value: Tensor::zeros(p.value.shape()),
            })
            .collect();
        Ok(Trainer {
            model,
            velocity,
            config,
            epoch: 0,
        })
    }

    /// Continues from a checkpoint. Its seed replaces `config.seed` so the
    /// batch order stays on the original sequence.
    pub fn resume(checkpoint: Checkpoint, mut config: TrainConfig) -> Result<Trainer> {
        config.seed = checkpoint.seed;
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let names = |v: &[NamedTensor]| -> Vec<(String, Vec<usize>)> {
            v.iter().map(|t| (t.name.clone(), t.value.shape().to_vec())).collect()
        };
        if names(&checkpoint.velocity) != names(&checkpoint.model.params) {
            return Err(Error::Format("checkpoint velocity does not match its parameters".into()));
        }
        Ok(Trainer {
            model: checkpoint.model,
            velocity: checkpoint.velocity,
            config,
            epoch: checkpoint.epoch,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.model.clone(),
            velocity: self.velocity.clone(),
            seed: self.config.seed,
            epoch: self.epoch,
            train_config: serde_json::to_value(&self.config)?,
        })
    }

    /// Runs the next epoch.
    pub fn run_epoch(&mut self, data: &ImageSet) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epoch;
        let lr = lr_at(&self.config, epoch)?;
        let batches = epoch_batches(data, self.config.batch_size, self.config.seed, epoch)?;
        let mut overall = 0.0;
        let mut sums = [[0.0; 2]; 3];
        for (b, idx) in batches.iter().enumerate() {
            let to_context = |e| match e {
                Error::Numeric(_) => Error::NonFiniteLoss { epoch, batch: b },
                other => other,
            };
            let images = data.batch(idx)?;
            let labels = data.batch_labels(idx);
            let r = batch_step(&self.model, &images, &labels, &self.config.weights, &self.config.loss)
                .map_err(to_context)?;
            if !r.overall.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            overall += r.overall;
            for (s, br) in sums.iter_mut().zip(&r.branches) {
                s[0] += br.cb;
                s[1] += br.sb;
            }
            self.apply(&r.grads, lr).map_err(to_context)?;
            self.model.update_running_stats(&r.batch_stats).map_err(to_context)?;
        }
        let n = batches.len() as f64;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            overall: overall / n,
            branches: sums.map(|[cb, sb]| BranchLossReport::new(cb / n, sb / n)),
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    fn apply(&mut self, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        let TrainConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for ((param, vel), grad) in self.model.params.iter_mut().zip(&mut self.velocity).zip(grads) {
            let mut p = param.value.data().to_vec();
            let mut v = vel.value.data().to_vec();
            let zeros;
            let g = match grad {
                Some(g) => g.as_slice(),
                None => {
                    zeros = vec![0.0; p.len()];
                    &zeros
                }
            };
            sgd_update(&mut p, g, &mut v, lr, momentum, weight_decay);
            param.value = Tensor::with_dtype(param.value.shape(), p, param.value.dtype())?;
            vel.value = Tensor::with_dtype(vel.value.shape(), v, vel.value.dtype())?;
        }
        Ok(())
    }

    /// Trains up to `config.epochs`, handing each due checkpoint to `sink`.
    pub fn run(
        &mut self,
        data: &ImageSet,
        mut on_epoch: impl FnMut(&EpochRecord),
        mut sink: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        while self.epoch < self.config.epochs {
            let record = self.run_epoch(data)?;
            on_epoch(&record);
            log.records.push(record);
            if self.epoch % self.config.checkpoint_every == 0 || self.epoch == self.config.epochs {
                sink(&self.checkpoint()?)?;
            }
        }
        Ok(log)
    }
}

const INIT_STREAM: u64 = 0;

/// Pre-trains a fresh model on `data` (labels must lie in `0..C_b`).
pub fn pretrain(
    data: &ImageSet,
    model_config: ModelConfig,
    config: TrainConfig,
    sink: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, TrainLog)> {
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if data.image_shape() != model_config.backbone.input_shape {
        return dim_err(format!(
            "dataset images {:?} do not match the backbone input {:?}",
            data.image_shape(),
            model_config.backbone.input_shape
        ));
    }
    let mut trainer = Trainer::new(model_config, config)?;
    let log = trainer.run(data, |_| {}, sink)?;
    Ok((trainer.checkpoint()?, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Reduction;
    use crate::model::{BackboneConfig, BlockSpec, Normalization};

    fn micro_config(classes: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(
            BackboneConfig {
                blocks: vec![
                    BlockSpec { out_channels: 4, pool: true },
                    BlockSpec { out_channels: 4, pool: false },
                ],
                input_shape: [3, 6, 6],
                normalization: Normalization::PerChannel,
                residual: false,
            },
            classes,
        );
        cfg.proj_dim = 4;
        cfg
    }

    fn micro_data(classes: usize, per_class: usize, seed: u64) -> ImageSet {
        let mut rng = Rng::new(seed);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for _ in 0..per_class {
                for ch in 0..3 {
                    for _ in 0..36 {
                        let shift = if ch == c % 3 { 1.0 } else { 0.0 };
                        pixels.push(shift + 0.5 * rng.normal());
                    }
                }
                labels.push(c);
            }
        }
        ImageSet::new([3, 6, 6], pixels, labels).unwrap()
    }

    fn micro_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            lr0: 0.02,
            schedule: vec![],
            loss: LossConfig {
                reduction: Reduction::Mean,
                ..LossConfig::default()
            },
            checkpoint_every: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_matches_reported_rates() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0).unwrap(), 0.025);
        assert!((lr_at(&cfg, 69).unwrap() - 0.025).abs() < 1e-15);
        assert!((lr_at(&cfg, 70).unwrap() - 0.005).abs() < 1e-15);
        assert!((lr_at(&cfg, 100).unwrap() - 0.001).abs() < 1e-15);
        assert!(lr_at(&cfg, 130).is_err());
        let flat = TrainConfig { schedule: vec![], ..cfg };
        assert_eq!(lr_at(&flat, 129).unwrap(), 0.025);
    }

    #[test]
    fn schedule_rescales_proportionally() {
        let cfg = TrainConfig::default();
        let s = cfg.rescaled_schedule(60);
        assert_eq!(s.iter().map(|m| m.epoch).collect::<Vec<_>>(), vec![32, 46]);
    }

    #[test]
    fn config_problems_are_exhaustive() {
        let cfg = TrainConfig {
            epochs: 0,
            lr0: -1.0,
            schedule: vec![
                Milestone { epoch: 5, multiplier: 0.2 },
                Milestone { epoch: 5, multiplier: 0.2 },
            ],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.problems().len(), 3);
    }

    #[test]
    fn sgd_reduces_to_plain_descent() {
        let p = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.5, 0.25]).unwrap();
        let v = Tensor::zeros(&[2]);
        let (p2, _) = sgd_step(&p, &g, &v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p2.data(), &[0.95, -2.025]);
        let (p3, v3) = sgd_step(&p, &Tensor::zeros(&[2]), &v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p3, p);
        assert_eq!(v3.data(), &[0.0, 0.0]);
        assert!(sgd_step(&p, &Tensor::zeros(&[3]), &v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn sgd_matches_scalar_recurrence() {
        // f(x) = x²/2, so the gradient is x.
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        let (mut x, mut vel) = (1.0f64, 0.0f64);
        for _ in 0..2 {
            (p, v) = sgd_step(&p, &p.clone(), &v, lr, mu, wd).unwrap();
            vel = mu * vel + x + wd * x;
            x -= lr * vel;
        }
        assert!((p.data()[0] - x).abs() < 1e-15);
        assert!((v.data()[0] - vel).abs() < 1e-15);
        // Hand-rolled: v1 = 1.01, x1 = 0.899; v2 = 0.909 + 0.899·1.01, x2 = x1 − 0.1·v2.
        let v2 = 0.9 * 1.01 + 0.899 * 1.01;
        assert!((x - (0.899 - 0.1 * v2)).abs() < 1e-12);
    }

    #[test]
    fn batches_pair_every_label() {
        let data = micro_data(3, 5, 1);
        let batches = epoch_batches(&data, 4, 9, 0).unwrap();
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..15).collect::<Vec<_>>());
        for b in &batches {
            for &i in b {
                let same = b.iter().filter(|&&j| data.labels()[j] == data.labels()[i]).count();
                assert!(same >= 2);
            }
        }
        assert_eq!(batches, epoch_batches(&data, 4, 9, 0).unwrap());
        assert_ne!(batches, epoch_batches(&data, 4, 9, 1).unwrap());
    }

    #[test]
    fn singleton_class_is_rejected() {
        let data = ImageSet::new([3, 6, 6], vec![0.0; 3 * 108], vec![0, 0, 1]).unwrap();
        assert!(matches!(
            epoch_batches(&data, 4, 0, 0),
            Err(Error::InsufficientClass { class: 1, .. })
        ));
    }

    #[test]
    fn one_epoch_on_two_classes_is_finite() {
        let data = micro_data(2, 8, 2);
        let (ck, log) = pretrain(&data, micro_config(2), micro_train(1), |_| Ok(())).unwrap();
        assert_eq!(log.records.len(), 1);
        assert!(log.records[0].overall.is_finite());
        assert_eq!(ck.epoch, 1);
    }

    #[test]
    fn loss_decreases_on_micro_dataset() {
        let data = micro_data(3, 6, 4);
        let (_, log) = pretrain(&data, micro_config(3), micro_train(30), |_| Ok(())).unwrap();
        let first = log.records[0].overall;
        let last = log.records.last().unwrap().overall;
        assert!(last < first, "loss went from {first} to {last}");
    }

    #[test]
    fn masked_branches_receive_no_gradient() {
        let data = micro_data(2, 4, 5);
        let model = Model::init(micro_config(2), &mut Rng::new(1)).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let r = batch_step(
            &model,
            &data.batch(&idx).unwrap(),
            &data.batch_labels(&idx),
            &EnsembleWeights::new(1.0, 0.0, 0.0).unwrap(),
            &LossConfig::default(),
        )
        .unwrap();
        for name in ["head2.W", "head3.W", "proj2.U", "proj3.U"] {
            let g = &r.grads[model.param_index(name).unwrap()];
            assert!(g.as_ref().map_or(true, |g| g.iter().all(|&v| v == 0.0)), "{name}");
        }
        for name in ["head1.W", "proj1.U", "block0.kernel"] {
            let g = r.grads[model.param_index(name).unwrap()].as_ref().unwrap();
            assert!(g.iter().any(|&v| v != 0.0), "{name}");
        }
        assert_eq!(r.overall, r.branches[0].total);
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let data = micro_data(2, 6, 6);
        let run = || {
            let mut emitted = Vec::new();
            let (ck, _) = pretrain(&data, micro_config(2), micro_train(4), |c| {
                emitted.push(c.to_bytes());
                Ok(())
            })
            .unwrap();
            (ck.to_bytes(), emitted)
        };
        let (a, ea) = run();
        let (b, eb) = run();
        assert_eq!(a, b);
        assert_eq!(ea, eb);
        assert_eq!(ea.len(), 2);
    }

    #[test]
    fn resume_continues_the_same_run() {
        let data = micro_data(2, 6, 7);
        let (full, _) = pretrain(&data, micro_config(2), micro_train(4), |_| Ok(())).unwrap();
        let mut mid = None;
        pretrain(&data, micro_config(2), micro_train(2), |c| {
            mid = Some(c.clone());
            Ok(())
        })
        .unwrap();
        let mid = Checkpoint::read_from(&mid.unwrap().to_bytes()[..]).unwrap();
        assert_eq!(mid.epoch, 2);
        let mut t = Trainer::resume(mid, micro_train(4)).unwrap();
        let log = t.run(&data, |_| {}, |_| Ok(())).unwrap();
        assert_eq!(log.records[0].epoch, 2);
        assert_eq!(t.checkpoint().unwrap().to_bytes(), full.to_bytes());
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let data = micro_data(2, 6, 8);
        let cfg = TrainConfig {
            lr0: 1e12,
            ..micro_train(3)
        };
        let err = pretrain(&data, micro_config(2), cfg, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }
}
