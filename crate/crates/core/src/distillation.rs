//! Defensive distillation: a teacher trained at a high softmax temperature
//! labels the training set with softened probabilities, a fresh student of
//! the same architecture is trained on them at that temperature, and the
//! student is then deployed (and attacked) at temperature 1.

use std::fs;
use std::path::Path;

use crate::attacks::fgsm::{fgsm_sweep, AttackConfig};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::network::{Network, NUM_CLASSES};
use crate::training::{fit, fit_with_targets, TrainConfig, TrainLog, TrainTargets};

pub const DEFAULT_DISTILL_TEMPERATURE: f64 = 100.0;

// tolerance on row sums accepted when loading or constructing soft labels
const ROW_SUM_TOLERANCE: f64 = 1e-9;
const LABEL_CHUNK: usize = 250;

/// Per-example probability rows over the 10 classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    rows: Vec<f64>,
}

impl SoftLabelSet {
    /// `rows` is row-major `N×10`; every row must be non-negative and sum
    /// to 1 within `1e-9`.
    pub fn new(rows: Vec<f64>) -> Result<Self> {
        if rows.is_empty() || !rows.len().is_multiple_of(NUM_CLASSES) {
            return Err(Error::shape(
                "soft labels",
                format!(
                    "{} values is not a positive multiple of {NUM_CLASSES}",
                    rows.len()
                ),
            ));
        }
        for (i, row) in rows.chunks_exact(NUM_CLASSES).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE
            {
                return Err(Error::invalid(
                    "soft labels",
                    format!("row {i} is not a probability distribution (sum {sum})"),
                ));
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len() / NUM_CLASSES
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    /// `u32` LE count, `u32` LE class count, then the rows as `f64` LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.rows.len() * 8);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(NUM_CLASSES as u32).to_le_bytes());
        for p in &self.rows {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = |at: usize| -> Result<usize> {
            let b = bytes.get(at..at + 4).ok_or(Error::Truncated {
                what: "soft-label header",
                needed: 8,
                available: bytes.len(),
            })?;
            Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
        };
        let (count, classes) = (header(0)?, header(4)?);
        if classes != NUM_CLASSES {
            return Err(Error::Malformed(format!(
                "soft labels over {classes} classes, expected {NUM_CLASSES}"
            )));
        }
        let needed = 8 + count * classes * 8;
        if bytes.len() != needed {
            return Err(Error::Truncated {
                what: "soft-label rows",
                needed,
                available: bytes.len(),
            });
        }
        let rows = bytes[8..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(rows)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::checkpoint::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Teacher probabilities `exp(log_softmax(z / T))` for every example, in
/// eval mode.
pub fn make_soft_labels(
    teacher: &Network,
    data: &LabeledDataset,
    temperature: f64,
) -> Result<SoftLabelSet> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(data.len() * NUM_CLASSES);
    for idx in data.chunks(LABEL_CHUNK) {
        let (x, _) = data.gather(&idx);
        let lp = teacher.predict(&x, temperature)?;
        rows.extend(lp.data().iter().map(|v| v.exp()));
    }
    SoftLabelSet::new(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Optimizer, scheduler, epochs and seed shared by teacher and student.
    /// Its `temperature` field is overridden by `temperature` below.
    pub train: TrainConfig,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            temperature: DEFAULT_DISTILL_TEMPERATURE,
        }
    }
}

impl DistillConfig {
    fn at_temperature(&self) -> Result<TrainConfig> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(
                "distill",
                format!("temperature {} must be positive", self.temperature),
            ));
        }
        Ok(TrainConfig {
            temperature: self.temperature,
            ..self.train.clone()
        })
    }
}

/// Trains a fresh network at the distillation temperature on hard labels.
pub fn train_teacher(
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &DistillConfig,
) -> Result<(Network, TrainLog)> {
    let tc = cfg.at_temperature()?;
    let mut teacher = Network::build(tc.seed);
    teacher.set_temperature(tc.temperature);
    let log = fit(&mut teacher, train, val, &tc)?;
    Ok((teacher, log))
}

/// Trains a fresh student (built from the run seed) with soft cross-entropy
/// against `soft` at the distillation temperature. The returned network
/// carries that temperature, so its checkpoint records it; inference through
/// [`Network::predict`] still takes an explicit temperature.
pub fn distill(
    train: &LabeledDataset,
    soft: &SoftLabelSet,
    val: &LabeledDataset,
    cfg: &DistillConfig,
) -> Result<(Network, TrainLog)> {
    if soft.len() != train.len() {
        return Err(Error::CountMismatch(format!(
            "{} soft labels for {} training examples",
            soft.len(),
            train.len()
        )));
    }
    let tc = cfg.at_temperature()?;
    let mut student = Network::build(tc.seed);
    student.set_temperature(tc.temperature);
    let log = fit_with_targets(
        &mut student,
        train,
        TrainTargets::Soft(soft.rows()),
        val,
        &tc,
    )?;
    Ok((student, log))
}

/// FGSM sweep against the student at deployment temperature 1.
pub fn distilled_sweep(
    student: &Network,
    test: &LabeledDataset,
    config: &AttackConfig,
) -> Result<EvalReport> {
    let mut report = fgsm_sweep(student, test, config)?;
    report.attack = "fgsm-distilled".into();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{argmax, IMAGE_PIXELS};

    fn tiny(n: usize) -> LabeledDataset {
        let labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
        let images = (0..n * IMAGE_PIXELS)
            .map(|i| ((i * 31 + i / IMAGE_PIXELS * 7) % 23) as f64 / 22.0)
            .collect();
        LabeledDataset::new(images, labels).unwrap()
    }

    fn entropy(rows: &[f64]) -> f64 {
        rows.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum()
    }

    #[test]
    fn soft_labels_are_distributions_matching_teacher_argmax() {
        let teacher = Network::build(3);
        let data = tiny(6);
        let hot = make_soft_labels(&teacher, &data, 1.0).unwrap();
        let soft = make_soft_labels(&teacher, &data, 100.0).unwrap();
        let (x, _) = data.gather(&(0..6).collect::<Vec<_>>());
        let lp = teacher.predict(&x, 1.0).unwrap();
        for i in 0..6 {
            let s: f64 = soft.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert_eq!(
                argmax(soft.row(i)),
                argmax(&lp.data()[i * 10..(i + 1) * 10])
            );
        }
        assert!(entropy(soft.rows()) > entropy(hot.rows()));
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(SoftLabelSet::new(vec![0.2; 10]).is_err());
        let mut row = vec![0.0; 10];
        row[0] = 1.2;
        row[1] = -0.2;
        assert!(SoftLabelSet::new(row).is_err());
        assert!(SoftLabelSet::new(vec![0.1; 9]).is_err());
    }

    #[test]
    fn cache_format_round_trip() {
        let soft = make_soft_labels(&Network::build(1), &tiny(3), 100.0).unwrap();
        let bytes = soft.to_bytes();
        assert_eq!(&bytes[..4], &3u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &10u32.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 3 * 10 * 8);
        assert_eq!(&bytes[8..16], &soft.rows()[0].to_le_bytes());
        assert_eq!(SoftLabelSet::from_bytes(&bytes).unwrap(), soft);
        assert!(SoftLabelSet::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn zero_epochs_student_is_its_initialization() {
        let data = tiny(4);
        let soft = make_soft_labels(&Network::build(1), &data, 100.0).unwrap();
        let mut cfg = DistillConfig::default();
        cfg.train.epochs = 0;
        cfg.train.seed = 9;
        let (student, _) = distill(&data, &soft, &data, &cfg).unwrap();
        assert_eq!(student.params(), Network::build(9).params());
        assert_eq!(student.temperature(), 100.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        let data = tiny(4);
        let soft = make_soft_labels(&Network::build(1), &tiny(3), 100.0).unwrap();
        assert!(matches!(
            distill(&data, &soft, &data, &DistillConfig::default()),
            Err(Error::CountMismatch(_))
        ));
    }

    #[test]
    fn same_seed_gives_identical_student() {
        let data = tiny(8);
        let soft = make_soft_labels(&Network::build(1), &data, 100.0).unwrap();
        let mut cfg = DistillConfig::default();
        cfg.train.epochs = 1;
        cfg.train.batch_size = 4;
        let (a, _) = distill(&data, &soft, &data, &cfg).unwrap();
        let (b, _) = distill(&data, &soft, &data, &cfg).unwrap();
        assert_eq!(crate::checkpoint::encode(&a), crate::checkpoint::encode(&b));
    }
}
