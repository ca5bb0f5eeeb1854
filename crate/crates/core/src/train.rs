//! The training loop behind `balnorm train`.

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::balnorm::{BalNormConfig, Variant};
use crate::data::{self, AugmentSpec, Dataset};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{argmax_rows, cross_entropy_loss, one_hot, softmax_cross_entropy, NormKind, Network, ParamKind};
use crate::optim::{mixup_batch, MixupConfig, ScheduleSpec, Sgd};
use crate::tensor::{PaddingMode, Tensor};
use crate::Mode;

/// Seed of the fixed synthetic training set; the test set uses the next one.
pub const SYNTH_DATA_SEED: u64 = 0x5EED;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth { classes: usize },
    Cifar10(PathBuf),
}

/// Which parameters weight decay applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayScope {
    All,
    /// Convolution and linear weights only.
    Weights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub norm: NormKind,
    pub data: DataSource,
    /// Training instances; `None` means 4000 synthetic or 5000 CIFAR-10.
    pub subset: Option<usize>,
    pub test_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_scope: DecayScope,
    pub schedule: ScheduleSpec,
    pub stat_fraction: f64,
    pub stat_momentum: f64,
    pub stop_grad_v: bool,
    pub mixup_alpha: f64,
    pub padding: PaddingMode,
    /// `None` picks flips and 4-pixel crops for CIFAR-10 and nothing for
    /// synthetic data.
    pub augment: Option<AugmentSpec>,
    pub seed: u64,
    /// Fill `wall_seconds`; otherwise it is written as 0 so CSVs are
    /// reproducible byte for byte.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            norm: NormKind::BalNormSinglePass,
            data: DataSource::Synth { classes: 4 },
            subset: None,
            test_size: 1000,
            epochs: 10,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_scope: DecayScope::All,
            schedule: ScheduleSpec::Step(vec![150, 225]),
            stat_fraction: 1.0,
            stat_momentum: 0.1,
            stop_grad_v: false,
            mixup_alpha: 0.0,
            padding: PaddingMode::Cyclic,
            augment: None,
            seed: 0,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.stat_fraction > 0.0 && self.stat_fraction <= 1.0) {
            return fail(format!("stat fraction must lie in (0, 1], got {}", self.stat_fraction));
        }
        if !(self.stat_momentum > 0.0 && self.stat_momentum < 1.0) {
            return fail(format!("statistics momentum must lie in (0, 1), got {}", self.stat_momentum));
        }
        if self.subset == Some(0) || self.test_size == 0 {
            return fail("dataset sizes must be positive".into());
        }
        MixupConfig::from_alpha(self.mixup_alpha)?;
        Ok(())
    }

    pub fn balnorm_config(&self) -> BalNormConfig {
        BalNormConfig {
            variant: self.norm.balnorm_variant().unwrap_or(Variant::SinglePass),
            stat_fraction: self.stat_fraction,
            momentum: self.stat_momentum,
            stop_grad_v: self.stop_grad_v,
        }
    }

    /// Training and test sets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synth { classes } => Ok((
                data::synth_blobs(self.subset.unwrap_or(4000), *classes, SYNTH_DATA_SEED)?,
                data::synth_blobs(self.test_size, *classes, SYNTH_DATA_SEED + 1)?,
            )),
            DataSource::Cifar10(dir) => data::load_cifar10_dir(dir, self.subset.unwrap_or(5000), self.test_size),
        }
    }

    fn augment_spec(&self) -> Option<AugmentSpec> {
        match (&self.augment, &self.data) {
            (Some(a), _) => Some(*a),
            (None, DataSource::Cifar10(_)) => Some(AugmentSpec::cifar()),
            (None, DataSource::Synth { .. }) => None,
        }
    }

    pub fn build_network(&self, train: &Dataset) -> Result<Network> {
        Network::tiny_net(
            train.image_shape(),
            train.num_classes(),
            self.norm,
            self.padding,
            self.balnorm_config(),
            self.seed,
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub network: Network,
}

/// Mean cross-entropy and accuracy of eval-mode predictions.
pub fn evaluate(net: &mut Network, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for idx in data::sequential_batches(data.len(), batch_size) {
        let (x, labels) = data.gather(&idx);
        let logits = net.predict(&x)?;
        loss += cross_entropy_loss(&logits, &one_hot(&labels, data.num_classes())?)? * idx.len() as f64;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Trains a TinyNet on `train` and evaluates it on `test` after every
/// epoch. `on_epoch` sees each record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.num_classes() != test.num_classes() || train.image_shape() != test.image_shape() {
        return Err(Error::Config("training and test sets disagree on shape or classes".into()));
    }
    let start = Instant::now();
    let mut net = cfg.build_network(train)?;
    let schedule = cfg.schedule.build(cfg.lr, cfg.momentum, cfg.epochs);
    let info = net.parameter_info();
    let names: Vec<String> = info.iter().map(|(n, _)| n.clone()).collect();
    let decay_mask = info
        .iter()
        .map(|(_, k)| cfg.decay_scope == DecayScope::All || *k == ParamKind::Weight)
        .collect();
    let mut opt = Sgd::new(&net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay).with_decay_mask(decay_mask)?;
    let mixup = MixupConfig::from_alpha(cfg.mixup_alpha)?;
    let augment = cfg.augment_spec();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    augment_rng.set_stream(2);
    let mut mixup_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mixup_rng.set_stream(3);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (lr, momentum) = schedule.lr_at(epoch)?;
        opt.lr = lr;
        opt.momentum = momentum;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for idx in data::shuffled_batches(train.len(), cfg.batch_size, &mut shuffle_rng) {
            let (mut x, labels) = train.gather(&idx);
            if let Some(spec) = &augment {
                x = data::augment(&x, spec, &mut augment_rng)?;
            }
            let targets = one_hot(&labels, train.num_classes())?;
            let (x, targets, _) = mixup_batch(&x, &targets, &mixup, &mut mixup_rng)?;

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let (logits, params) = net.forward_leaves(&mut tape, xv, Mode::Train)?;
            correct += argmax_rows(tape.value(logits)).iter().zip(&labels).filter(|(p, l)| p == l).count();
            let loss = softmax_cross_entropy(&mut tape, logits, &targets)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += loss_value * idx.len() as f64;
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = params.iter().map(|&p| grads.get(p)).collect();
            drop(tape);
            opt.step(&mut net.parameters_mut(), &grads, &names)?;
        }
        let (test_loss, test_acc) = evaluate(&mut net, test, 256)?;
        let record = MetricsRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_loss,
            test_acc,
            lr,
            wall_seconds: if cfg.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        on_epoch(&record);
        metrics.push(record);
    }
    Ok(TrainOutcome { metrics, network: net })
}
