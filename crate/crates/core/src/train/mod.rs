//! Seeded SGD training, evaluation and checkpointing.

pub mod checkpoint;
pub mod metrics;
pub mod schedule;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, AugmentDraw, Dataset, NormStats};
use crate::error::{CheckpointError, Error, Result};
use crate::nn::Ctx;
use crate::optim::Sgd;
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::zoo::{ArchSpec, GePlacement, Model, Probes};

pub use checkpoint::{Checkpoint, RngState};
pub use metrics::{dataset_loss, evaluate, top_k_error, EpochMetrics, TopK, CSV_HEADER};
pub use schedule::{Schedule, ScheduleSpec, ScheduleState};

/// Independent random streams drawn from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Init, Stream::Shuffle, Stream::Augment];
}

pub fn rng_stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn default_batch() -> usize {
    128
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    100
}
fn default_schedule() -> ScheduleSpec {
    ScheduleSpec::FixedStep {
        lr: 0.1,
        factor: 10.0,
        every: 30,
    }
}
fn yes() -> bool {
    true
}
fn default_eval_batch() -> usize {
    250
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleSpec,
    #[serde(default = "yes")]
    pub augment: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    /// Use only the first `n` training images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    /// Use only the first `n` test images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
    /// Write a checkpoint every `n` epochs (and always after the last).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 (batch-norm needs it)"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval_batch must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..).contains(&self.weight_decay) {
            return Err(Error::config(
                "momentum must lie in [0, 1) and weight_decay be non-negative",
            ));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        Ok(())
    }
}

/// Everything that determines a run's results besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub arch: ArchSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<GePlacement>,
    /// Seeds initialisation, shuffling and augmentation.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Experiment {
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("plain data serialises")
    }
}

/// Splits a shuffled order into batches, folding a trailing singleton into
/// the batch before it.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

pub struct Trainer {
    pub experiment: Experiment,
    echo: String,
    pub model: Model<f32>,
    opt: Sgd<f32>,
    pub schedule: Schedule,
    epoch: usize,
    rngs: [ChaCha8Rng; 3],
    /// Loss of the very first batch, before any update.
    pub initial_loss: Option<f64>,
}

impl Trainer {
    pub fn new(experiment: Experiment) -> Result<Self> {
        experiment.train.validate()?;
        let seed = experiment.seed;
        let mut rngs = Stream::ALL.map(|s| rng_stream(seed, s));
        let model = Model::build(&experiment.arch, experiment.placement.as_ref(), &mut rngs[0])?;
        let t = &experiment.train;
        Ok(Trainer {
            opt: Sgd::new(t.momentum as f32, t.weight_decay as f32),
            schedule: Schedule::new(t.schedule.clone()),
            echo: experiment.echo(),
            experiment,
            model,
            epoch: 0,
            rngs,
            initial_loss: None,
        })
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.experiment.train.epochs
    }

    /// Learning rate of the next epoch.
    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.epoch)
    }

    /// One pass over `train`; returns (mean loss, top-1 error).
    pub fn train_epoch(&mut self, train: &Dataset, stats: &NormStats) -> Result<(f64, f64)> {
        let cfg = &self.experiment.train;
        let lr = self.lr();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rngs[Stream::Shuffle as usize - 1]);
        let (mut loss_sum, mut hits, mut seen) = (0.0f64, 0usize, 0usize);
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let draws: Option<Vec<AugmentDraw>> = cfg.augment.then(|| {
                let rng = &mut self.rngs[Stream::Augment as usize - 1];
                idx.iter().map(|_| AugmentDraw::sample(rng)).collect()
            });
            let (x, labels) = data::batch(train, idx, stats, draws.as_deref());
            let mut ctx = Ctx::new(&self.model.store, true);
            ctx.tape.set_check_finite(false);
            let xv = ctx.input(x);
            let f = self.model.forward(&mut ctx, xv, &Probes::default())?;
            hits += metrics::hits(ctx.tape.value(f.logits), &labels).0;
            let loss = ctx.tape.softmax_cross_entropy(f.logits, &labels)?;
            let lv = ctx.tape.value(loss).item()? as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    epoch: self.epoch,
                    batch: b,
                    lr,
                    loss: lv,
                });
            }
            self.initial_loss.get_or_insert(lv);
            let outcome = ctx.finish(Some(loss))?;
            self.model.store.apply(outcome)?;
            self.opt.step(&mut self.model.store, lr as f32)?;
            loss_sum += lv * idx.len() as f64;
            seen += idx.len();
        }
        let n = seen.max(1) as f64;
        let mean = loss_sum / n;
        self.schedule.end_epoch(mean);
        self.epoch += 1;
        Ok((mean, 1.0 - hits as f64 / n))
    }

    /// Trains one epoch and evaluates on `test`.
    pub fn run_epoch(&mut self, train: &Dataset, test: &Dataset, stats: &NormStats) -> Result<EpochMetrics> {
        let lr = self.lr();
        let (train_loss, train_top1) = self.train_epoch(train, stats)?;
        let val = evaluate(
            &self.model,
            test,
            stats,
            self.experiment.train.eval_batch,
            &Probes::default(),
        )?;
        Ok(EpochMetrics {
            epoch: self.epoch,
            lr,
            train_loss,
            train_top1,
            val_top1: val.top1,
            val_top5: val.top5,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.model.store;
        let seed = self.experiment.seed;
        Checkpoint {
            config_echo: self.echo.clone(),
            epoch: self.epoch as u32,
            tensors: named_tensors(store),
            momentum: store
                .params()
                .iter()
                .zip(self.opt.velocities(store))
                .map(|(p, v)| (p.name.clone(), v))
                .collect(),
            rng: Stream::ALL
                .iter()
                .zip(&self.rngs)
                .map(|(&s, r)| RngState {
                    seed,
                    stream: s as u64,
                    word_pos: r.get_word_pos(),
                })
                .collect(),
            schedule: self.schedule.state,
        }
    }

    /// Rebuilds the full training state saved by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let experiment: Experiment =
            toml::from_str(&ck.config_echo).map_err(|e| CheckpointError::ConfigEcho(e.to_string()))?;
        let mut t = Trainer::new(experiment)?;
        t.echo = ck.config_echo.clone();
        load_named_tensors(&mut t.model.store, &ck.tensors)?;
        let params = t.model.store.params();
        if ck.momentum.len() != params.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} momentum buffers for {} parameters",
                ck.momentum.len(),
                params.len()
            ))
            .into());
        }
        let mut vel = Vec::with_capacity(params.len());
        for (p, (name, v)) in params.iter().zip(&ck.momentum) {
            if *name != p.name {
                return Err(CheckpointError::UnknownTensor { name: name.clone() }.into());
            }
            if v.shape() != p.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.value.shape().dims(),
                    got: v.shape().dims(),
                }
                .into());
            }
            vel.push(v.clone());
        }
        t.opt.set_velocities(vel);
        if ck.rng.len() != Stream::ALL.len() {
            return Err(CheckpointError::Malformed("expected three random streams".into()).into());
        }
        for ((s, state), rng) in Stream::ALL.iter().zip(&ck.rng).zip(t.rngs.iter_mut()) {
            if state.stream != *s as u64 || state.seed != t.experiment.seed {
                return Err(CheckpointError::Malformed("random stream does not match the config".into()).into());
            }
            rng.set_word_pos(state.word_pos);
        }
        t.schedule.state = ck.schedule;
        t.epoch = ck.epoch as usize;
        Ok(t)
    }
}

/// Parameters then buffers, in registration order.
pub fn named_tensors(store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
    store
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .chain(store.buffers().iter().map(|b| (b.name.clone(), b.value.clone())))
        .collect()
}

/// Overwrites every registry tensor from `tensors`, which must name each
/// exactly once with the registered shape.
pub fn load_named_tensors(
    store: &mut ParamStore<f32>,
    tensors: &[(String, Tensor<f32>)],
) -> Result<(), CheckpointError> {
    let expected = store.params().len() + store.buffers().len();
    let mut seen = std::collections::HashSet::new();
    for (name, t) in tensors {
        let slot = if let Some(id) = store.find_param(name) {
            &mut store.param_mut(id).value
        } else if let Some(id) = store.find_buffer(name) {
            &mut store.buffer_mut(id).value
        } else {
            return Err(CheckpointError::UnknownTensor { name: name.clone() });
        };
        if slot.shape() != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: slot.shape().dims(),
                got: t.shape().dims(),
            });
        }
        if !seen.insert(name.as_str()) {
            return Err(CheckpointError::Malformed(format!("tensor `{name}` appears twice")));
        }
        *slot = t.clone();
    }
    if seen.len() != expected {
        let missing = named_tensors(store)
            .into_iter()
            .map(|(n, _)| n)
            .find(|n| !seen.contains(n.as_str()))
            .expect("fewer seen than registered");
        return Err(CheckpointError::MissingTensor { name: missing });
    }
    Ok(())
}

/// Eval-ready model from a checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<Model<f32>> {
    Ok(Trainer::from_checkpoint(ck)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, Split, Variant};

    fn tiny(seed: u64) -> Experiment {
        toml::from_str(&format!(
            r#"
            placement = "theta-minus:global:all"
            seed = {seed}
            [arch]
            family = "cifar-resnet-8"
            width_divisor = 4
            [train]
            batch_size = 8
            epochs = 3
            schedule = {{ kind = "fixed-step", lr = 0.05, every = 1 }}
            "#
        ))
        .unwrap()
    }

    fn data() -> (Dataset, Dataset, NormStats) {
        let tr = synthetic(Variant::Cifar10, Split::Train, 33, 1);
        let te = synthetic(Variant::Cifar10, Split::Test, 20, 1);
        let s = NormStats::compute(&tr);
        (tr, te, s)
    }

    #[test]
    fn batches_fold_trailing_singleton() {
        let o: Vec<usize> = (0..17).collect();
        let lens: Vec<usize> = batches(&o, 8).iter().map(|b| b.len()).collect();
        assert_eq!(lens, vec![8, 9]);
        let lens: Vec<usize> = batches(&o[..16], 8).iter().map(|b| b.len()).collect();
        assert_eq!(lens, vec![8, 8]);
    }

    #[test]
    fn echo_round_trips() {
        let e = tiny(4);
        let back: Experiment = toml::from_str(&e.echo()).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.echo(), e.echo());
    }

    #[test]
    fn same_seed_same_metrics() {
        let (tr, te, s) = data();
        let run = || {
            let mut t = Trainer::new(tiny(9)).unwrap();
            (0..2).map(|_| t.run_epoch(&tr, &te, &s).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (tr, te, s) = data();
        let mut straight = Trainer::new(tiny(2)).unwrap();
        let full: Vec<_> = (0..3).map(|_| straight.run_epoch(&tr, &te, &s).unwrap()).collect();

        let mut first = Trainer::new(tiny(2)).unwrap();
        let mut log = vec![first.run_epoch(&tr, &te, &s).unwrap()];
        let bytes = first.checkpoint().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ck).unwrap();
        assert_eq!(resumed.checkpoint().to_bytes(), bytes);
        assert_eq!(resumed.lr(), 0.005);
        while !resumed.is_done() {
            log.push(resumed.run_epoch(&tr, &te, &s).unwrap());
        }
        assert_eq!(log, full);
        assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
    }

    #[test]
    fn tampered_shape_names_the_tensor() {
        let t = Trainer::new(tiny(0)).unwrap();
        let mut ck = t.checkpoint();
        let (name, tensor) = ck.tensors[3].clone();
        let s = tensor.shape();
        ck.tensors[3].1 = Tensor::zeros(crate::tensor::Shape::new(s.n, s.c, s.h, s.w + 1));
        match Trainer::from_checkpoint(&ck) {
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { name: n, .. })) => assert_eq!(n, name),
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("accepted"),
        }
        let mut ck = t.checkpoint();
        ck.tensors.pop();
        assert!(matches!(
            Trainer::from_checkpoint(&ck),
            Err(Error::Checkpoint(CheckpointError::MissingTensor { .. }))
        ));
        let mut ck = t.checkpoint();
        ck.tensors[0].0 = "nope.weight".into();
        assert!(matches!(
            Trainer::from_checkpoint(&ck),
            Err(Error::Checkpoint(CheckpointError::UnknownTensor { .. }))
        ));
    }

    #[test]
    fn loaded_model_predicts_identically() {
        let (tr, te, s) = data();
        let mut t = Trainer::new(tiny(5)).unwrap();
        t.run_epoch(&tr, &te, &s).unwrap();
        let (x, _) = data::batch(&te, &[0, 1, 2], &s, None);
        let before = t.model.predict(&x).unwrap();
        let m = load_model(&Checkpoint::from_bytes(&t.checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(m.predict(&x).unwrap(), before);
    }

    #[test]
    fn diverging_run_reports_non_finite() {
        let (tr, te, s) = data();
        let mut e = tiny(1);
        e.train.schedule = ScheduleSpec::FixedStep {
            lr: 1e30,
            factor: 10.0,
            every: 30,
        };
        let mut t = Trainer::new(e).unwrap();
        let err = (0..3).find_map(|_| t.run_epoch(&tr, &te, &s).err()).expect("diverges");
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }
}
