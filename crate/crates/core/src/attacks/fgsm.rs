//! Fast Gradient Sign Method: `adv = clamp(x + ε·sign(∇ₓ J(θ, x, y)), 0, 1)`.

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::network::{argmax, Network, NUM_CLASSES};
use crate::tensor::Tensor;

/// Epsilon grid used by the sweeps unless overridden.
pub const DEFAULT_EPSILONS: [f64; 9] = [0.0, 0.007, 0.01, 0.02, 0.03, 0.05, 0.1, 0.2, 0.3];

// images per gradient evaluation; bounds peak memory of the traced pass
const SWEEP_CHUNK: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    epsilons: Vec<f64>,
}

impl AttackConfig {
    /// Grid must be sorted ascending with every value in `[0, 1]`.
    pub fn new(epsilons: Vec<f64>) -> Result<Self> {
        if let Some(e) = epsilons.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(Error::invalid(
                "attack config",
                format!("epsilon {e} outside [0, 1]"),
            ));
        }
        if epsilons.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid(
                "attack config",
                "epsilon grid must be ascending",
            ));
        }
        Ok(Self { epsilons })
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilons: DEFAULT_EPSILONS.to_vec(),
        }
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Applies an already computed gradient: `clamp(x + ε·sign(g), 0, 1)`.
pub fn perturb(images: &[f64], gradient: &[f64], epsilon: f64) -> Vec<f64> {
    images
        .iter()
        .zip(gradient)
        .map(|(&x, &g)| (x + epsilon * sign(g)).clamp(0.0, 1.0))
        .collect()
}

/// FGSM adversarial images for a `B×1×28×28` batch at temperature 1.
pub fn fgsm(net: &Network, images: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    fgsm_at(net, images, labels, epsilon, 1.0)
}

/// FGSM with the loss taken through `log_softmax` at `temperature`.
pub fn fgsm_at(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    epsilon: f64,
    temperature: f64,
) -> Result<Tensor> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::invalid(
            "fgsm",
            format!("epsilon {epsilon} must be non-negative"),
        ));
    }
    let grad = net.input_gradient(images, labels, temperature)?;
    Tensor::new(
        images.shape().to_vec(),
        perturb(images.data(), grad.data(), epsilon),
    )
}

/// Accuracy of `net` on FGSM images for every epsilon in the grid. The
/// gradient of each image is computed once and reused across the grid.
pub fn fgsm_sweep(
    net: &Network,
    data: &LabeledDataset,
    config: &AttackConfig,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let eps = config.epsilons();
    let mut correct = vec![0usize; eps.len()];
    for idx in data.chunks(SWEEP_CHUNK) {
        let (x, labels) = data.gather(&idx);
        let grad = if eps.iter().any(|&e| e > 0.0) {
            Some(net.input_gradient(&x, &labels, 1.0)?)
        } else {
            None
        };
        for (slot, &e) in correct.iter_mut().zip(eps) {
            let adv = match (&grad, e > 0.0) {
                (Some(g), true) => Tensor::new(x.shape().to_vec(), perturb(x.data(), g.data(), e))?,
                _ => x.clone(),
            };
            let lp = net.predict(&adv, 1.0)?;
            *slot += lp
                .data()
                .chunks_exact(NUM_CLASSES)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
        }
    }
    let mut report = EvalReport::new("fgsm", "epsilon");
    for (&e, &c) in eps.iter().zip(&correct) {
        report.push(e, c, data.len())?;
    }
    Ok(report)
}
