//! The MNIST classifier: two valid 3×3 convolutions, a 2×2 max-pool, two
//! dense layers and a temperature log-softmax head.
//!
//! Shape chain for one image: `1×28×28 → 32×26×26 → 64×24×24 → 64×12×12 →
//! 9216 → 128 → 10`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, Stream};
use crate::tensor::Tensor;

pub const ARCHITECTURE_ID: &str = "mnist-cnn-c32-c64-p2-d128-d10";
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;
pub const FLATTEN_WIDTH: usize = 64 * 12 * 12;
pub const DROPOUT_CONV: f64 = 0.25;
pub const DROPOUT_DENSE: f64 = 0.5;

/// Parameter names and shapes in storage order.
pub const PARAM_LAYOUT: [(&str, &[usize]); 8] = [
    ("conv1.weight", &[32, 1, 3, 3]),
    ("conv1.bias", &[32]),
    ("conv2.weight", &[64, 32, 3, 3]),
    ("conv2.bias", &[64]),
    ("fc1.weight", &[128, FLATTEN_WIDTH]),
    ("fc1.bias", &[128]),
    ("fc2.weight", &[NUM_CLASSES, 128]),
    ("fc2.bias", &[NUM_CLASSES]),
];

// fan-in of the layer each parameter belongs to
const FAN_IN: [usize; 8] = [9, 9, 288, 288, FLATTEN_WIDTH, FLATTEN_WIDTH, 128, 128];

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    params: Vec<Tensor>,
    temperature: f64,
    mode: Mode,
}

/// Handles to the parameter leaves of one traced forward pass.
#[derive(Debug, Clone)]
pub struct Traced {
    pub logits: Var,
    pub params: Vec<Var>,
}

impl Network {
    /// Fresh network with every weight and bias drawn uniformly from
    /// `±sqrt(1/fan_in)` in storage order.
    pub fn build(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Init, 0));
        let params = PARAM_LAYOUT
            .iter()
            .zip(FAN_IN)
            .map(|((_, shape), fan_in)| {
                let bound = (1.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(shape.to_vec(), data).expect("layout shapes are consistent")
            })
            .collect();
        Self {
            params,
            temperature: 1.0,
            mode: Mode::Eval,
        }
    }

    /// Reassembles a network from named parameters (checkpoint loading).
    pub fn from_parts(params: Vec<(String, Tensor)>, temperature: f64) -> Result<Self> {
        if params.len() != PARAM_LAYOUT.len() {
            return Err(Error::ArchitectureMismatch {
                expected: format!("{} parameters", PARAM_LAYOUT.len()),
                found: format!("{} parameters", params.len()),
            });
        }
        let mut out = Vec::with_capacity(params.len());
        for ((name, tensor), (want, shape)) in params.into_iter().zip(PARAM_LAYOUT) {
            if name != want || tensor.shape() != shape {
                return Err(Error::ArchitectureMismatch {
                    expected: format!("{want} {shape:?}"),
                    found: format!("{name} {:?}", tensor.shape()),
                });
            }
            if !tensor.all_finite() {
                return Err(Error::NonFiniteParameter(name));
            }
            out.push(tensor);
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(
                "network",
                format!("temperature {temperature}"),
            ));
        }
        Ok(Self {
            params: out,
            temperature,
            mode: Mode::Eval,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_LAYOUT.iter().map(|(n, _)| *n).zip(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Temperature the network was trained at (recorded in checkpoints).
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) {
        self.temperature = temperature;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records the logits computation for `input` on `tape`.
    pub fn trace_logits<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: Mode,
        track_params: bool,
        rng: &mut R,
    ) -> Result<Traced> {
        check_batch(tape.value(input))?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone().with_grad(track_params)))
            .collect();
        let h = tape.conv2d(input, params[0], params[1], 1)?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, params[2], params[3], 1)?;
        let h = tape.relu(h);
        let h = tape.maxpool2d(h, 2)?;
        let h = tape.dropout(h, DROPOUT_CONV, mode, rng)?;
        let h = tape.flatten(h)?;
        let h = tape.affine(h, params[4], params[5])?;
        let h = tape.relu(h);
        let h = tape.dropout(h, DROPOUT_DENSE, mode, rng)?;
        let logits = tape.affine(h, params[6], params[7])?;
        Ok(Traced { logits, params })
    }

    /// `B×10` log-probabilities at `temperature`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &Tensor,
        temperature: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone().with_grad(false));
        let traced = self.trace_logits(&mut tape, x, mode, false, rng)?;
        let out = tape.log_softmax(traced.logits, temperature)?;
        Ok(tape.take(out))
    }

    /// Eval-mode log-probabilities.
    pub fn predict(&self, batch: &Tensor, temperature: f64) -> Result<Tensor> {
        // eval mode never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward(batch, temperature, Mode::Eval, &mut rng)
    }

    /// Eval-mode raw logits.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone().with_grad(false));
        let traced = self.trace_logits(&mut tape, x, Mode::Eval, false, &mut rng)?;
        Ok(tape.take(traced.logits))
    }

    /// Runs forward and backward for one mini-batch and accumulates the
    /// parameter gradients. Returns the batch loss.
    pub fn accumulate_gradients<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor,
        targets: Targets<'_>,
        temperature: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone().with_grad(false));
        let traced = self.trace_logits(&mut tape, x, mode, true, rng)?;
        let lp = tape.log_softmax(traced.logits, temperature)?;
        let loss = match targets {
            Targets::Hard(labels) => tape.nll_loss(lp, labels)?,
            Targets::Soft(rows) => tape.soft_cross_entropy(lp, rows)?,
        };
        tape.backward(loss)?;
        for (param, var) in self.params.iter_mut().zip(&traced.params) {
            if let Some(g) = tape.grad(*var) {
                param.accumulate_grad(g);
            }
        }
        Ok(tape.value(loss).data()[0])
    }

    /// Per-example input gradients `∇ₓ J(θ, x_b, y_b)` with
    /// `J = nll ∘ log_softmax_T ∘ net`, evaluated in eval mode. Row `b` of the
    /// result equals the gradient a single-image call would produce.
    pub fn input_gradient(
        &self,
        images: &Tensor,
        labels: &[usize],
        temperature: f64,
    ) -> Result<Tensor> {
        if self.mode != Mode::Eval {
            return Err(Error::invalid(
                "input_gradient",
                "network must be in eval mode",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone().with_grad(true));
        let traced = self.trace_logits(&mut tape, x, Mode::Eval, false, &mut rng)?;
        let lp = tape.log_softmax(traced.logits, temperature)?;
        let loss = tape.nll_loss(lp, labels)?;
        // the mean's 1/B cancels exactly, leaving per-example sums
        tape.backward_seeded(loss, labels.len() as f64)?;
        let grad = tape
            .grad(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; images.len()]);
        Tensor::new(images.shape().to_vec(), grad)
    }
}

/// Training targets for one mini-batch.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Hard(&'a [usize]),
    /// Row-major `B×10` probability rows.
    Soft(&'a [f64]),
}

fn check_batch(x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != IMAGE_SIDE || s[3] != IMAGE_SIDE {
        return Err(Error::shape(
            "network",
            format!("expected B×1×28×28 input, got {s:?}"),
        ));
    }
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(
            "network",
            format!("pixel value {v} outside [0, 1]"),
        ));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
