//! Universal adversarial patches: a square pixel block optimized so that
//! pasting it anywhere in an image pushes the classifier to one target class.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tape};
use crate::checkpoint::{write_atomic, RecordReader, RecordWriter, PATCH_ARCHITECTURE_ID};
use crate::dataset::{batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::evaluation::{in_top_k, EvalReport, ReportRow, TOP5_CAVEAT};
use crate::network::{argmax, Network, IMAGE_PIXELS, IMAGE_SIDE, NUM_CLASSES};
use crate::seed::{derive_seed, Stream};
use crate::tensor::Tensor;
use crate::training::AdamState;

const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    size: usize,
    target_class: usize,
    pixels: Vec<f64>,
}

impl PatchSpec {
    /// `pixels` is the `size×size` block in row-major order; values are
    /// clamped into `[0, 1]`.
    pub fn new(size: usize, target_class: usize, pixels: Vec<f64>) -> Result<Self> {
        if size == 0 || size > IMAGE_SIDE {
            return Err(Error::invalid(
                "patch",
                format!("patch side {size} must be in 1..={IMAGE_SIDE}"),
            ));
        }
        if target_class >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange {
                index: 0,
                label: target_class,
                classes: NUM_CLASSES,
            });
        }
        if pixels.len() != size * size {
            return Err(Error::shape(
                "patch",
                format!("{} pixels for a {size}x{size} patch", pixels.len()),
            ));
        }
        if pixels.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("patch", "NaN pixel"));
        }
        let pixels = pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            size,
            target_class,
            pixels,
        })
    }

    /// Uniform noise in `[0, 1]`.
    pub fn random(size: usize, target_class: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::PatchInit, size as u64));
        let pixels = (0..size * size).map(|_| rng.gen::<f64>()).collect();
        Self::new(size, target_class, pixels)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn target_class(&self) -> usize {
        self.target_class
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Number of valid top-left positions along one axis.
    pub fn positions_per_axis(&self) -> usize {
        IMAGE_SIDE - self.size + 1
    }

    pub fn random_position<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let n = self.positions_per_axis();
        (rng.gen_range(0..n), rng.gen_range(0..n))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = RecordWriter::new(PATCH_ARCHITECTURE_ID);
        w.u32(self.target_class as u32);
        let t = Tensor::new(vec![self.size, self.size], self.pixels.clone())
            .expect("patch dims match pixels");
        w.tensor("pixels", &t);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = RecordReader::open(bytes, PATCH_ARCHITECTURE_ID)?;
        let target = r.u32("target class")? as usize;
        let (name, t) = r.tensor()?;
        if name != "pixels" || t.rank() != 2 || t.shape()[0] != t.shape()[1] {
            return Err(Error::Malformed(format!(
                "expected square `pixels` record, found `{name}` {:?}",
                t.shape()
            )));
        }
        if !r.at_end() {
            return Err(Error::Malformed("trailing bytes after patch".into()));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Malformed("patch pixel outside [0, 1]".into()));
        }
        Self::new(t.shape()[0], target, t.into_data())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Copies `image` (28×28, row-major) with the patch pasted at `(row, col)`.
pub fn patch_apply(image: &[f64], patch: &PatchSpec, position: (usize, usize)) -> Result<Vec<f64>> {
    let mut out = image.to_vec();
    patch_apply_in_place(&mut out, patch, position)?;
    Ok(out)
}

pub fn patch_apply_in_place(
    image: &mut [f64],
    patch: &PatchSpec,
    (row, col): (usize, usize),
) -> Result<()> {
    if image.len() != IMAGE_PIXELS {
        return Err(Error::shape(
            "patch_apply",
            format!("expected {IMAGE_PIXELS} pixels, got {}", image.len()),
        ));
    }
    let s = patch.size;
    if row + s > IMAGE_SIDE || col + s > IMAGE_SIDE {
        return Err(Error::invalid(
            "patch_apply",
            format!("{s}x{s} patch at ({row}, {col}) leaves the {IMAGE_SIDE}x{IMAGE_SIDE} image"),
        ));
    }
    for r in 0..s {
        let dst = (row + r) * IMAGE_SIDE + col;
        image[dst..dst + s].copy_from_slice(&patch.pixels[r * s..(r + 1) * s]);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchTrainConfig {
    /// Passes over the training set; 0 returns the initialization.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PatchTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            lr: 0.01,
            seed: 0,
        }
    }
}

/// Optimizes a `size×size` patch with Adam so that the mean target-class
/// log-probability over patched training images (one uniformly random
/// placement per example and step) is maximized. The network is only read.
pub fn patch_train(
    net: &Network,
    train: &LabeledDataset,
    size: usize,
    target_class: usize,
    cfg: &PatchTrainConfig,
) -> Result<PatchSpec> {
    if size >= IMAGE_SIDE {
        return Err(Error::invalid(
            "patch_train",
            format!("patch side {size} must be smaller than the {IMAGE_SIDE}-pixel image"),
        ));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut patch = PatchSpec::random(size, target_class, cfg.seed)?;
    let mut adam = AdamState::new(&[size * size], cfg.lr);
    let mut place_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::PatchPlacement, size as u64));
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for epoch in 0..cfg.epochs {
        let order = batches(
            train.len(),
            cfg.batch_size,
            derive_seed(cfg.seed, Stream::Shuffle, epoch as u64),
        )?;
        let mut loss_sum = 0.0;
        for idx in &order {
            let (mut x, _) = train.gather(idx);
            let positions: Vec<(usize, usize)> = idx
                .iter()
                .map(|_| patch.random_position(&mut place_rng))
                .collect();
            for (img, &pos) in x.data_mut().chunks_exact_mut(IMAGE_PIXELS).zip(&positions) {
                patch_apply_in_place(img, &patch, pos)?;
            }
            let mut tape = Tape::new();
            let xv = tape.leaf(x.with_grad(true));
            let traced = net.trace_logits(&mut tape, xv, Mode::Eval, false, &mut unused)?;
            let lp = tape.log_softmax(traced.logits, 1.0)?;
            let targets = vec![target_class; idx.len()];
            let loss = tape.nll_loss(lp, &targets)?;
            tape.backward(loss)?;
            loss_sum += tape.value(loss).data()[0] * idx.len() as f64;
            let grad = tape.grad(xv).expect("input is tracked");
            // chain rule through the paste: sum the image gradient under each placement
            let mut pgrad = vec![0.0; size * size];
            for (g_img, &(row, col)) in grad.chunks_exact(IMAGE_PIXELS).zip(&positions) {
                for r in 0..size {
                    let src = (row + r) * IMAGE_SIDE + col;
                    pgrad[r * size..(r + 1) * size]
                        .iter_mut()
                        .zip(&g_img[src..src + size])
                        .for_each(|(p, g)| *p += g);
                }
            }
            adam.step(&mut [&mut patch.pixels[..]], &[&pgrad], &["patch"])?;
            patch.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        log::info!(
            "patch {size}x{size} epoch {}: target nll {:.4}",
            epoch + 1,
            loss_sum / train.len() as f64
        );
    }
    Ok(patch)
}

/// Patch success counts over the non-target test images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchOutcome {
    pub size: usize,
    pub k: usize,
    /// Predicted class equals the target.
    pub top1: ReportRow,
    /// Target among the `k` highest-scoring classes.
    pub top_k: ReportRow,
}

/// Pastes the patch at a uniformly random position (seeded per image index)
/// into every test image whose label differs from the target and counts how
/// often the target wins.
pub fn patch_evaluate(
    net: &Network,
    test: &LabeledDataset,
    patch: &PatchSpec,
    seed: u64,
    k: usize,
) -> Result<PatchOutcome> {
    if k == 0 || k > NUM_CLASSES {
        return Err(Error::invalid(
            "patch_evaluate",
            format!("k = {k} outside 1..=10"),
        ));
    }
    let eligible: Vec<usize> = (0..test.len())
        .filter(|&i| test.label(i) != patch.target_class)
        .collect();
    let (mut hit1, mut hitk) = (0, 0);
    for chunk in eligible.chunks(EVAL_CHUNK) {
        let (mut x, _) = test.gather(chunk);
        for (img, &i) in x.data_mut().chunks_exact_mut(IMAGE_PIXELS).zip(chunk) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::PatchEval, i as u64));
            let pos = patch.random_position(&mut rng);
            patch_apply_in_place(img, patch, pos)?;
        }
        let lp = net.predict(&x, 1.0)?;
        for row in lp.data().chunks_exact(NUM_CLASSES) {
            hit1 += usize::from(argmax(row) == patch.target_class);
            hitk += usize::from(in_top_k(row, patch.target_class, k));
        }
    }
    let setting = patch.size as f64;
    let total = eligible.len();
    Ok(PatchOutcome {
        size: patch.size,
        k,
        top1: ReportRow {
            setting,
            correct: hit1,
            total,
        },
        top_k: ReportRow {
            setting,
            correct: hitk,
            total,
        },
    })
}

/// Success-rate tables over patch sizes: `(top1, top_k)`. Both share the
/// `patch_size` setting column; the Top-k table carries the ten-class caveat.
pub fn patch_reports(attack: &str, outcomes: &[PatchOutcome]) -> Result<(EvalReport, EvalReport)> {
    let k = outcomes.first().map_or(5, |o| o.k);
    let mut top1 = EvalReport::new(format!("{attack} top-1"), "patch_size");
    let mut top_k = EvalReport::new(format!("{attack} top-{k}"), "patch_size");
    top_k.notes.push(TOP5_CAVEAT.to_string());
    for o in outcomes {
        top1.push(o.top1.setting, o.top1.correct, o.top1.total)?;
        top_k.push(o.top_k.setting, o.top_k.correct, o.top_k.total)?;
    }
    Ok((top1, top_k))
}
