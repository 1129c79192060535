//! Task heads and data plumbing: classification, prototypical, and
//! contrastive losses on the tape; a synthetic domain-shift blobs task;
//! episodic sampling; affine out-of-distribution augmentation; and IDX
//! image/label files.

use std::path::Path;

use crate::error::{Result, UniregError};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A batch of inputs with integer labels.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(x: Tensor, labels: Vec<usize>) -> Result<LabeledBatch> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(UniregError::Dimension(format!(
                "batch of {} labels needs [n, d] inputs with matching n, got {:?}",
                labels.len(),
                shape
            )));
        }
        Ok(LabeledBatch { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean softmax cross-entropy of logits against integer labels.
pub fn classification_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Prototypical episode loss: class prototypes are support means, queries
/// are classified by negated squared distance to each prototype.
///
/// Every class in `0..n_classes` must appear in the support set.
pub fn prototypical_loss(
    tape: &mut Tape,
    support: Var,
    support_labels: &[usize],
    query: Var,
    query_labels: &[usize],
    n_classes: usize,
) -> Result<Var> {
    if n_classes == 0 {
        return Err(UniregError::Contract("prototypical loss needs at least one class".into()));
    }
    let mut seen = vec![false; n_classes];
    for &l in support_labels {
        if l >= n_classes {
            return Err(UniregError::Contract(format!(
                "support label {l} outside 0..{n_classes}"
            )));
        }
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(UniregError::Contract(format!(
            "class {missing} has no support examples"
        )));
    }
    let prototypes = tape.group_mean(support, support_labels, n_classes)?;
    let sqdist = tape.pairwise_sqdist(query, prototypes)?;
    let logits = tape.neg(sqdist)?;
    tape.softmax_cross_entropy(logits, query_labels)
}

/// Mean margin-contrastive loss over all unordered pairs in the batch:
/// same-label pairs pay their squared distance, different-label pairs pay
/// the squared hinge `max(0, margin - distance)^2`.
pub fn contrastive_loss(tape: &mut Tape, z: Var, labels: &[usize], margin: f64) -> Result<Var> {
    if !(margin > 0.0) || !margin.is_finite() {
        return Err(UniregError::Config(format!(
            "contrastive margin must be positive, got {margin}"
        )));
    }
    tape.contrastive_loss(z, labels, margin)
}

/// Affine map applied to inputs to produce the shifted domain: a rotation
/// of the first two coordinates, then a global scale, then a constant
/// translation added to every coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineShift {
    pub rotation_radians: f64,
    pub scale: f64,
    pub translation: f64,
}

impl AffineShift {
    pub fn identity() -> AffineShift {
        AffineShift { rotation_radians: 0.0, scale: 1.0, translation: 0.0 }
    }

    /// The stock shift: 30 degrees of rotation and a 0.5 translation.
    pub fn standard() -> AffineShift {
        AffineShift {
            rotation_radians: 30f64.to_radians(),
            scale: 1.0,
            translation: 0.5,
        }
    }

    pub fn new(rotation_radians: f64, scale: f64, translation: f64) -> Result<AffineShift> {
        if !(scale != 0.0) || !scale.is_finite() {
            return Err(UniregError::Config(format!(
                "shift scale must be nonzero and finite, got {scale}"
            )));
        }
        if !rotation_radians.is_finite() || !translation.is_finite() {
            return Err(UniregError::Config("shift parameters must be finite".into()));
        }
        Ok(AffineShift { rotation_radians, scale, translation })
    }

    /// Apply in place to one row of width `d >= 2`.
    pub fn apply_row(&self, row: &mut [f64]) {
        let (sin, cos) = self.rotation_radians.sin_cos();
        let (x0, x1) = (row[0], row[1]);
        row[0] = cos * x0 - sin * x1;
        row[1] = sin * x0 + cos * x1;
        for v in row.iter_mut() {
            *v = *v * self.scale + self.translation;
        }
    }

    pub fn inverse(&self) -> AffineShift {
        // apply_row runs rotate, scale, translate; the inverse of that
        // composite is not itself of the same form unless computed pointwise,
        // so invert pointwise via apply_inverse_row instead.
        AffineShift {
            rotation_radians: -self.rotation_radians,
            scale: 1.0 / self.scale,
            translation: -self.translation,
        }
    }

    /// Exact inverse of `apply_row`.
    pub fn apply_inverse_row(&self, row: &mut [f64]) {
        for v in row.iter_mut() {
            *v = (*v - self.translation) / self.scale;
        }
        let (sin, cos) = (-self.rotation_radians).sin_cos();
        let (x0, x1) = (row[0], row[1]);
        row[0] = cos * x0 - sin * x1;
        row[1] = sin * x0 + cos * x1;
    }

    /// Apply to every row of an `[n, d]` tensor, producing a new tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] < 2 {
            return Err(UniregError::Dimension(format!(
                "shift needs [n, d] with d >= 2, got {shape:?}"
            )));
        }
        let d = shape[1];
        let mut values = x.values();
        for row in values.chunks_mut(d) {
            self.apply_row(row);
        }
        Tensor::new(shape, values)
    }
}

/// Scale of the class-mean draw in `make_blobs_task`: means are
/// `BLOBS_MEANS_SCALE * N(0, I)`.
pub const BLOBS_MEANS_SCALE: f64 = 0.5;

/// Gaussian-blobs classification with a source domain and an affinely
/// shifted target domain sharing the same labels.
#[derive(Debug, Clone)]
pub struct DomainShiftTask {
    n_classes: usize,
    input_dim: usize,
    class_scale: f64,
    means: Vec<f64>,
    shift: AffineShift,
}

/// Draw class means and fix the domain shift for a blobs task.
pub fn make_blobs_task(
    n_classes: usize,
    input_dim: usize,
    class_scale: f64,
    shift: AffineShift,
    rng: &mut Rng,
) -> Result<DomainShiftTask> {
    if n_classes < 2 {
        return Err(UniregError::Config(format!(
            "blobs task needs at least 2 classes, got {n_classes}"
        )));
    }
    if input_dim < 2 {
        return Err(UniregError::Config(format!(
            "blobs task needs input_dim >= 2 for the rotation, got {input_dim}"
        )));
    }
    if !(class_scale > 0.0) || !class_scale.is_finite() {
        return Err(UniregError::Config(format!(
            "class_scale must be positive, got {class_scale}"
        )));
    }
    let means = (0..n_classes * input_dim)
        .map(|_| BLOBS_MEANS_SCALE * rng.normal())
        .collect();
    Ok(DomainShiftTask { n_classes, input_dim, class_scale, means, shift })
}

impl DomainShiftTask {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn shift(&self) -> AffineShift {
        self.shift
    }

    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.input_dim..(class + 1) * self.input_dim]
    }

    /// Unshifted batch: labels uniform over classes, inputs
    /// `mean[label] + class_scale * N(0, I)`.
    pub fn sample_source(&self, n: usize, rng: &mut Rng) -> Result<LabeledBatch> {
        if n == 0 {
            return Err(UniregError::Config("batch size must be at least 1".into()));
        }
        let mut labels = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * self.input_dim);
        for _ in 0..n {
            let label = rng.index(self.n_classes);
            labels.push(label);
            let mean = self.class_mean(label);
            for &m in mean {
                values.push(m + self.class_scale * rng.normal());
            }
        }
        LabeledBatch::new(Tensor::new(vec![n, self.input_dim], values)?, labels)
    }

    /// Shifted-domain batch: a source draw passed through the shift.
    pub fn sample_target(&self, n: usize, rng: &mut Rng) -> Result<LabeledBatch> {
        let batch = self.sample_source(n, rng)?;
        let x = self.shift.apply(&batch.x)?;
        LabeledBatch::new(x, batch.labels)
    }
}

/// A labeled pool indexed by class, for episodic sampling.
#[derive(Debug, Clone)]
pub struct ClassPool {
    x: Tensor,
    by_class: Vec<Vec<usize>>,
}

impl ClassPool {
    pub fn new(batch: &LabeledBatch, n_classes: usize) -> Result<ClassPool> {
        if n_classes == 0 {
            return Err(UniregError::Config("pool needs at least one class".into()));
        }
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &l) in batch.labels.iter().enumerate() {
            if l >= n_classes {
                return Err(UniregError::Contract(format!(
                    "pool label {l} outside 0..{n_classes}"
                )));
            }
            by_class[l].push(i);
        }
        Ok(ClassPool { x: batch.x.clone(), by_class })
    }

    pub fn n_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn class_size(&self, class: usize) -> usize {
        self.by_class[class].len()
    }

    fn input_dim(&self) -> usize {
        self.x.shape()[1]
    }

    fn rows(&self, indices: &[usize]) -> Tensor {
        let d = self.input_dim();
        let mut values = Vec::with_capacity(indices.len() * d);
        self.x.with_values(|all| {
            for &i in indices {
                values.extend_from_slice(&all[i * d..(i + 1) * d]);
            }
        });
        Tensor::new(vec![indices.len(), d], values).expect("pool rows are finite")
    }
}

/// One few-shot episode with labels renumbered to `0..n_way` in sampling
/// order. `class_ids` maps each episode label back to its pool class.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    pub class_ids: Vec<usize>,
}

/// Sample `n_way` distinct classes, then `k_shot + n_query` distinct
/// examples per class; the first `k_shot` become support, the rest query.
pub fn sample_episode(
    pool: &ClassPool,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || n_query == 0 {
        return Err(UniregError::Config(
            "episode needs n_way, k_shot, n_query all at least 1".into(),
        ));
    }
    if n_way > pool.n_classes() {
        return Err(UniregError::Contract(format!(
            "episode wants {n_way} ways but the pool has {} classes",
            pool.n_classes()
        )));
    }
    let class_ids = rng.sample_indices(pool.n_classes(), n_way);
    let per_class = k_shot + n_query;
    let mut support_rows = Vec::with_capacity(n_way * k_shot);
    let mut query_rows = Vec::with_capacity(n_way * n_query);
    let mut support_labels = Vec::with_capacity(n_way * k_shot);
    let mut query_labels = Vec::with_capacity(n_way * n_query);
    for (way, &class) in class_ids.iter().enumerate() {
        let members = &pool.by_class[class];
        if members.len() < per_class {
            return Err(UniregError::Contract(format!(
                "class {class} has {} examples, episode needs {per_class}",
                members.len()
            )));
        }
        let picks = rng.sample_indices(members.len(), per_class);
        for (j, &p) in picks.iter().enumerate() {
            if j < k_shot {
                support_rows.push(members[p]);
                support_labels.push(way);
            } else {
                query_rows.push(members[p]);
                query_labels.push(way);
            }
        }
    }
    Ok(Episode {
        support: pool.rows(&support_rows),
        support_labels,
        query: pool.rows(&query_rows),
        query_labels,
        class_ids,
    })
}

const AUG_MAX_TRANSLATION: f64 = 4.0;
const AUG_MAX_ROTATION: f64 = std::f64::consts::PI / 6.0;
const AUG_SCALE_LOW: f64 = 0.75;
const AUG_SCALE_HIGH: f64 = 1.25;

/// Resample one square image under the affine map
/// `dest = scale * R(rot) * src + (tx, ty)` (coordinates centered on the
/// image), nearest-neighbor, out-of-bounds filled with 0.
pub fn affine_image(
    src: &[f64],
    side: usize,
    tx: f64,
    ty: f64,
    rot: f64,
    scale: f64,
) -> Vec<f64> {
    let center = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = rot.sin_cos();
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let u = c as f64 - center - tx;
            let v = r as f64 - center - ty;
            let us = (cos * u + sin * v) / scale;
            let vs = (-sin * u + cos * v) / scale;
            let sc = (us + center).round();
            let sr = (vs + center).round();
            if sc >= 0.0 && sr >= 0.0 && (sc as usize) < side && (sr as usize) < side {
                out[r * side + c] = src[sr as usize * side + sc as usize];
            }
        }
    }
    out
}

/// Randomly translate (up to 4 px), rotate (up to 30 degrees), and rescale
/// (0.75 to 1.25) each square image in the batch.
pub fn augment_ood(images: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let shape = images.shape();
    if shape.len() != 2 {
        return Err(UniregError::Dimension(format!(
            "augment_ood expects [n, side*side], got {shape:?}"
        )));
    }
    let d = shape[1];
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return Err(UniregError::Config(format!(
            "augment_ood needs square images, {d} pixels is not a square"
        )));
    }
    let mut out = Vec::with_capacity(shape[0] * d);
    images.with_values(|values| {
        for img in values.chunks(d) {
            let tx = rng.uniform_in(-AUG_MAX_TRANSLATION, AUG_MAX_TRANSLATION);
            let ty = rng.uniform_in(-AUG_MAX_TRANSLATION, AUG_MAX_TRANSLATION);
            let rot = rng.uniform_in(-AUG_MAX_ROTATION, AUG_MAX_ROTATION);
            let scale = rng.uniform_in(AUG_SCALE_LOW, AUG_SCALE_HIGH);
            out.extend(affine_image(img, side, tx, ty, rot, scale));
        }
    });
    Tensor::new(shape, out)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(UniregError::Format(format!(
                "idx file truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Images plus their geometry, pixels rescaled to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub data: Tensor,
    pub rows: usize,
    pub cols: usize,
}

/// Write `[n, rows*cols]` images with values in `[0, 1]` as a big-endian
/// u8 image file.
pub fn save_idx_images(path: &Path, images: &Tensor, rows: usize, cols: usize) -> Result<()> {
    let shape = images.shape();
    if shape.len() != 2 || shape[1] != rows * cols {
        return Err(UniregError::Dimension(format!(
            "save_idx_images expects [n, {}], got {shape:?}",
            rows * cols
        )));
    }
    let mut bytes = Vec::with_capacity(16 + shape[0] * rows * cols);
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(shape[0] as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    images.with_values(|values| {
        for &v in values {
            bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    });
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_idx_images(path: &Path) -> Result<IdxImages> {
    let bytes = std::fs::read(path)?;
    let mut r = IdxReader { bytes: &bytes, pos: 0 };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(UniregError::Format(format!(
            "bad idx image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(n * rows * cols)?;
    if r.pos != bytes.len() {
        return Err(UniregError::Format(format!(
            "idx image file has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let values = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(IdxImages { data: Tensor::new(vec![n, rows * cols], values)?, rows, cols })
}

/// Write labels (each below 256) as a big-endian u8 label file.
pub fn save_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l > 255 {
            return Err(UniregError::Contract(format!("label {l} does not fit in a byte")));
        }
        bytes.push(l as u8);
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    let mut r = IdxReader { bytes: &bytes, pos: 0 };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(UniregError::Format(format!(
            "bad idx label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = r.u32_be()? as usize;
    let raw = r.take(n)?;
    if r.pos != bytes.len() {
        return Err(UniregError::Format(format!(
            "idx label file has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(raw.iter().map(|&b| b as usize).collect())
}

/// Load an image file and a label file that must describe the same
/// examples.
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<LabeledBatch> {
    let images = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    let n = images.data.shape()[0];
    if n != labels.len() {
        return Err(UniregError::Contract(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    LabeledBatch::new(images.data, labels)
}
