//! Dataset ingestion and sampling: IDX parsing (the MNIST container
//! format), a synthetic blob dataset for fast property tests, group
//! sampling, and poison-seed selection.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Input vectors in [0,1]^d paired with one-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<Tensor>,
    labels: Vec<Tensor>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn from_parts(
        inputs: Vec<Tensor>,
        labels: Vec<Tensor>,
        class_count: usize,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::InvalidArgument("class_count must be positive".into()));
        }
        for label in &labels {
            let ones = label.data().iter().filter(|&&v| v == 1.0).count();
            let sum: f64 = label.data().iter().sum();
            if label.len() != class_count || ones != 1 || sum != 1.0 {
                return Err(Error::InvalidArgument("labels must be one-hot".into()));
            }
        }
        for input in &inputs {
            if input.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidArgument("inputs must lie in [0,1]".into()));
            }
        }
        Ok(Self { inputs, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Tensor::len)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> &Tensor {
        &self.labels[i]
    }

    pub fn class_of(&self, i: usize) -> usize {
        self.labels[i].argmax()
    }

    /// Dataset restricted to the first `n` samples.
    pub fn head(&self, n: usize) -> Self {
        Self {
            inputs: self.inputs[..n.min(self.len())].to_vec(),
            labels: self.labels[..n.min(self.len())].to_vec(),
            class_count: self.class_count,
        }
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Idx(format!("truncated file while reading {what}")));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Load an MNIST-style IDX image/label file pair. Pixels are scaled by
/// 1/255 into [0,1]; labels become one-hot over 10 classes; file order is
/// preserved.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = fs::read(images_path)?;
    let lab_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&img_bytes, 0, "image magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Idx(format!(
            "image magic number 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"
        )));
    }
    let n = read_u32_be(&img_bytes, 4, "image count")? as usize;
    let rows = read_u32_be(&img_bytes, 8, "row count")? as usize;
    let cols = read_u32_be(&img_bytes, 12, "column count")? as usize;
    let dim = rows * cols;
    if img_bytes.len() != 16 + n * dim {
        return Err(Error::Idx(format!(
            "image payload is {} bytes, header promises {}",
            img_bytes.len() - 16.min(img_bytes.len()),
            n * dim
        )));
    }

    let magic = read_u32_be(&lab_bytes, 0, "label magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Idx(format!(
            "label magic number 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"
        )));
    }
    let n_labels = read_u32_be(&lab_bytes, 4, "label count")? as usize;
    if lab_bytes.len() != 8 + n_labels {
        return Err(Error::Idx(format!(
            "label payload is {} bytes, header promises {n_labels}",
            lab_bytes.len() - 8.min(lab_bytes.len())
        )));
    }
    if n != n_labels {
        return Err(Error::Idx(format!("{n} images but {n_labels} labels")));
    }

    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let pixels = &img_bytes[16 + i * dim..16 + (i + 1) * dim];
        inputs.push(Tensor::vector(pixels.iter().map(|&p| p as f64 / 255.0).collect()));
        let class = lab_bytes[8 + i] as usize;
        if class > 9 {
            return Err(Error::Idx(format!("label byte {class} is not a digit class")));
        }
        labels.push(Tensor::one_hot(10, class)?);
    }
    LabeledDataset::from_parts(inputs, labels, 10)
}

/// Encode a dataset back to the IDX pair. Pixel values are rounded to the
/// nearest 1/255 step; loading a file produced here reproduces the dataset
/// exactly when the inputs came from an IDX file in the first place.
pub fn save_idx(
    dataset: &LabeledDataset,
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if rows * cols != dataset.dim() {
        return Err(Error::Shape(format!(
            "{rows}x{cols} does not match input dimension {}",
            dataset.dim()
        )));
    }
    let mut img = Vec::with_capacity(16 + dataset.len() * dataset.dim());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for input in &dataset.inputs {
        img.extend(input.data().iter().map(|&v| (v * 255.0).round() as u8));
    }
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    lab.extend(dataset.labels.iter().map(|l| l.argmax() as u8));
    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

/// Gaussian blobs clipped to [0,1]^d around seeded random class centers.
pub fn make_synthetic(
    class_count: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count == 0 || dim == 0 || per_class == 0 || spread <= 0.0 {
        return Err(Error::InvalidArgument(
            "class_count, dim, per_class and spread must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // centers in [0.15, 0.85] so the blobs rarely touch the clip boundary
    let centers: Vec<Vec<f64>> = (0..class_count)
        .map(|_| (0..dim).map(|_| rng.gen_range(0.15..0.85)).collect())
        .collect();
    let mut inputs = Vec::with_capacity(class_count * per_class);
    let mut labels = Vec::with_capacity(class_count * per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let point: Vec<f64> = center
                .iter()
                .map(|&c| (c + spread * gaussian(&mut rng)).clamp(0.0, 1.0))
                .collect();
            inputs.push(Tensor::vector(point));
            labels.push(Tensor::one_hot(class_count, class)?);
        }
    }
    LabeledDataset::from_parts(inputs, labels, class_count)
}

/// Box-Muller sample from the provided RNG.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Distinct indices into a dataset; the clean reference group whose summed
/// loss the attacker maximizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalGroup {
    indices: Vec<usize>,
}

impl NormalGroup {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Seeded uniform sampling of `g` distinct indices without replacement.
pub fn sample_group(dataset: &LabeledDataset, g: usize, seed: u64) -> Result<NormalGroup> {
    if g == 0 {
        return Err(Error::InvalidArgument(
            "group size must be positive; an empty group makes the summed loss undefined".into(),
        ));
    }
    if g > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "group size {g} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // partial Fisher-Yates: first g entries of a seeded shuffle
    let mut pool: Vec<usize> = (0..dataset.len()).collect();
    for i in 0..g {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(g);
    Ok(NormalGroup { indices: pool })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoisonInit {
    /// A normal sample whose true class differs from the attack label,
    /// paired with the attack label (label flip).
    NormalSample,
    /// I.i.d. uniform [0,1]^d input with the attack label.
    UniformRandom,
}

/// Select the initial poisoned sample and its artificial label.
pub fn pick_poison_seed(
    dataset: &LabeledDataset,
    mode: PoisonInit,
    attack_label: usize,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    if attack_label >= dataset.class_count() {
        return Err(Error::InvalidArgument(format!(
            "attack label {attack_label} out of range for {} classes",
            dataset.class_count()
        )));
    }
    let t_p = Tensor::one_hot(dataset.class_count(), attack_label)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        PoisonInit::NormalSample => {
            let candidates: Vec<usize> =
                (0..dataset.len()).filter(|&i| dataset.class_of(i) != attack_label).collect();
            if candidates.is_empty() {
                return Err(Error::InvalidArgument(
                    "every sample already carries the attack label".into(),
                ));
            }
            let pick = candidates[rng.gen_range(0..candidates.len())];
            Ok((dataset.input(pick).clone(), t_p))
        }
        PoisonInit::UniformRandom => {
            let x: Vec<f64> = (0..dataset.dim()).map(|_| rng.gen_range(0.0..1.0)).collect();
            Ok((Tensor::vector(x), t_p))
        }
    }
}
