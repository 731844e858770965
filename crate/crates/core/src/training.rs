//! Adam with plateau-based learning-rate reduction, and the epoch loop that
//! ties them to the network.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Mode;
use crate::checkpoint::write_atomic;
use crate::dataset::{batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::network::{Network, Targets, NUM_CLASSES, PARAM_LAYOUT};
use crate::seed::{derive_seed, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.999);
pub const DEFAULT_EPS_HAT: f64 = 1e-8;
pub const DEFAULT_FACTOR: f64 = 0.1;
pub const DEFAULT_PATIENCE: usize = 3;
pub const DEFAULT_EPOCHS: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 64;
const EVAL_CHUNK: usize = 500;

/// First/second moment estimates for a list of parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(lens: &[usize], lr: f64) -> Self {
        Self {
            first: lens.iter().map(|&n| vec![0.0; n]).collect(),
            second: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            lr,
            beta1: DEFAULT_BETAS.0,
            beta2: DEFAULT_BETAS.1,
            eps_hat: DEFAULT_EPS_HAT,
        }
    }

    pub fn for_network(net: &Network, lr: f64) -> Self {
        let lens: Vec<usize> = net.params().iter().map(Tensor::len).collect();
        Self::new(&lens, lr)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient is
    /// non-finite or mis-sized.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        names: &[&str],
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} parameters / {} gradients for an optimizer over {}",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).copied().unwrap_or("?");
            if p.len() != g.len() || p.len() != self.first[i].len() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "parameter `{name}` has {} values, gradient {}",
                        p.len(),
                        g.len()
                    ),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps_hat);
            }
        }
        Ok(())
    }

    /// Steps the network parameters with their accumulated gradients and
    /// clears them. Missing gradients count as zero.
    pub fn step_network(&mut self, net: &mut Network) -> Result<()> {
        let grads: Vec<Vec<f64>> = net
            .params_mut()
            .iter_mut()
            .map(|p| p.take_grad().unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut slots: Vec<&mut [f64]> =
            net.params_mut().iter_mut().map(|p| p.data_mut()).collect();
        let names: Vec<&str> = PARAM_LAYOUT.iter().map(|(n, _)| *n).collect();
        self.step(&mut slots, &grad_refs, &names)
    }
}

/// `ReduceLROnPlateau` in `min` mode with a zero improvement threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    initial_lr: f64,
    reductions: i32,
    best: f64,
    stale_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            initial_lr,
            reductions: 0,
            best: f64::INFINITY,
            stale_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        // recomputed from the reduction count so k reductions give lr₀·factorᵏ exactly
        self.initial_lr * self.factor.powi(self.reductions)
    }

    pub fn reductions(&self) -> usize {
        self.reductions as usize
    }

    pub fn stale_epochs(&self) -> usize {
        self.stale_epochs
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Feeds one epoch's validation loss; returns the learning rate to use next.
    pub fn step(&mut self, val_loss: f64) -> Result<f64> {
        if !val_loss.is_finite() {
            return Err(Error::invalid(
                "scheduler_step",
                format!("validation loss {val_loss}"),
            ));
        }
        if val_loss < self.best {
            self.best = val_loss;
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        if self.stale_epochs > self.patience {
            self.reductions += 1;
            self.stale_epochs = 0;
        }
        Ok(self.lr())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr)
                .expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.train_loss).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    /// Softmax temperature used for the training loss and validation loss.
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            lr: DEFAULT_LR,
            factor: DEFAULT_FACTOR,
            patience: DEFAULT_PATIENCE,
            temperature: 1.0,
        }
    }
}

/// Per-example targets for the whole training set.
#[derive(Debug, Clone, Copy)]
pub enum TrainTargets<'a> {
    /// The dataset's own labels.
    Labels,
    /// Row-major `N×10` probability rows aligned with the dataset.
    Soft(&'a [f64]),
}

/// Trains `net` on hard labels. See [`fit_with_targets`].
pub fn fit(
    net: &mut Network,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    fit_with_targets(net, train, TrainTargets::Labels, val, cfg)
}

/// Mini-batch Adam training. Each epoch: a seeded shuffle, train-mode
/// forward/backward per batch, then the eval-mode validation loss (hard-label
/// NLL at `cfg.temperature`) drives the plateau scheduler.
pub fn fit_with_targets(
    net: &mut Network,
    train: &LabeledDataset,
    targets: TrainTargets<'_>,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let TrainTargets::Soft(rows) = targets {
        if rows.len() != train.len() * NUM_CLASSES {
            return Err(Error::CountMismatch(format!(
                "{} soft-label values for {} examples",
                rows.len(),
                train.len()
            )));
        }
    }
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    net.set_temperature(cfg.temperature);
    let mut adam = AdamState::for_network(net, cfg.lr);
    let mut scheduler = PlateauScheduler::new(cfg.lr, cfg.factor, cfg.patience);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Dropout, 0));
    net.set_mode(Mode::Train);
    for epoch in 0..cfg.epochs {
        let order = batches(
            train.len(),
            cfg.batch_size,
            derive_seed(cfg.seed, Stream::Shuffle, epoch as u64),
        )?;
        let mut loss_sum = 0.0;
        for idx in &order {
            let (x, labels) = train.gather(idx);
            let soft_rows;
            let batch_targets = match targets {
                TrainTargets::Labels => Targets::Hard(&labels),
                TrainTargets::Soft(rows) => {
                    soft_rows = idx
                        .iter()
                        .flat_map(|&i| rows[i * NUM_CLASSES..(i + 1) * NUM_CLASSES].iter().copied())
                        .collect::<Vec<f64>>();
                    Targets::Soft(&soft_rows)
                }
            };
            net.zero_grad();
            let loss = net.accumulate_gradients(
                &x,
                batch_targets,
                cfg.temperature,
                Mode::Train,
                &mut dropout_rng,
            )?;
            adam.step_network(net)?;
            loss_sum += loss * idx.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = mean_nll(net, val, cfg.temperature)?;
        let lr = adam.lr;
        adam.lr = scheduler.step(val_loss)?;
        log::info!(
            "epoch {}: train_loss {train_loss:.6} val_loss {val_loss:.6} lr {lr:e}",
            epoch + 1
        );
        log.rows.push(EpochRow {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            lr,
        });
    }
    net.set_mode(Mode::Eval);
    net.zero_grad();
    Ok(log)
}

/// Mean hard-label NLL in eval mode at `temperature`.
pub fn mean_nll(net: &Network, data: &LabeledDataset, temperature: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for idx in data.chunks(EVAL_CHUNK) {
        let (x, labels) = data.gather(&idx);
        let lp = net.predict(&x, temperature)?;
        total -= labels
            .iter()
            .enumerate()
            .map(|(b, &y)| lp.data()[b * NUM_CLASSES + y])
            .sum::<f64>();
    }
    Ok(total / data.len() as f64)
}
