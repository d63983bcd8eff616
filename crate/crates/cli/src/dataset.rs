//! Dataset ingestion: a deterministic synthetic generator whose classes
//! differ in grating orientation and spatial frequency, plus IDX-format
//! file loading.

use freqlab_core::rng::Rng;
use freqlab_core::tensor::Tensor;
use freqlab_core::Real;
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum DataError {
    /// IDX file failed magic/size validation.
    MalformedIdx(String),
    /// A label lies outside the configured class range.
    LabelOutOfRange { label: usize, classes: usize },
    Io(std::io::Error),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::MalformedIdx(why) => write!(f, "malformed idx file: {why}"),
            DataError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} outside 0..{classes}")
            }
            DataError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// Labeled image collection with pixel values in [0,1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn input_spec(&self) -> (usize, usize, usize) {
        let s = self.images[0].shape();
        (s[0], s[1], s[2])
    }
}

/// Parameters of the synthetic corpus.
///
/// A class is a (grating family, blob polarity) pair: the family fixes
/// grating orientation and spatial frequency — a magnitude-spectrum cue
/// that makes the frequency content vary by class — while the polarity
/// decides whether the blobs are bright or dark. Negating a blob leaves
/// its magnitude spectrum untouched and flips only phases, so part of the
/// class identity lives purely in the phase spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

/// Lowest and highest family grating frequencies, in cycles per image.
const FREQ_RANGE: (Real, Real) = (3.0, 9.0);

pub fn synthetic(spec: &SyntheticSpec) -> Dataset {
    assert!(spec.classes >= 2, "need at least two classes");
    let k = spec.classes;
    let side = spec.size;
    let families = k.div_ceil(2);
    let mut rng = Rng::new(spec.seed).fork(0xDA7A);
    let mut images = Vec::with_capacity(k * spec.per_class);
    let mut labels = Vec::with_capacity(k * spec.per_class);
    for class in 0..k {
        let family = class / 2;
        let blob_sign: Real = if class % 2 == 0 { 1.0 } else { -1.0 };
        let theta_base = std::f64::consts::PI * family as Real / families as Real
            + std::f64::consts::PI / 6.0;
        let freq_base = FREQ_RANGE.0
            + (FREQ_RANGE.1 - FREQ_RANGE.0) * family as Real / (families - 1).max(1) as Real;
        for _ in 0..spec.per_class {
            let theta = theta_base + rng.uniform(-0.15, 0.15);
            let freq = freq_base * (1.0 + rng.uniform(-0.08, 0.08));
            let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
            let (dir_x, dir_y) = (theta.cos(), theta.sin());

            let n_blobs = 2 + rng.below(2);
            let blobs: Vec<(Real, Real, Real, Real)> = (0..n_blobs)
                .map(|_| {
                    (
                        rng.uniform(0.2 * side as Real, 0.8 * side as Real),
                        rng.uniform(0.2 * side as Real, 0.8 * side as Real),
                        rng.uniform(2.5, 4.5),
                        blob_sign * rng.uniform(0.25, 0.4),
                    )
                })
                .collect();
            let channel_gain: Vec<Real> = (0..3).map(|_| 1.0 + rng.uniform(-0.1, 0.1)).collect();

            let mut data = Vec::with_capacity(3 * side * side);
            let mut noise = rng.fork(labels.len() as u64 + 1);
            for gain in channel_gain.iter().take(3) {
                let mut chan = Vec::with_capacity(side * side);
                for y in 0..side {
                    for x in 0..side {
                        let proj = (x as Real * dir_x + y as Real * dir_y) / side as Real;
                        let grating =
                            (2.0 * std::f64::consts::PI * freq * proj + phase).sin();
                        let blob: Real = blobs
                            .iter()
                            .map(|&(cx, cy, sigma, amp)| {
                                let d2 = (x as Real - cx).powi(2) + (y as Real - cy).powi(2);
                                amp * (-d2 / (2.0 * sigma * sigma)).exp()
                            })
                            .sum();
                        chan.push(0.5 + 0.22 * grating * gain + blob + noise.uniform(-0.02, 0.02));
                    }
                }
                // Recenter the channel mean so blob polarity cannot leak
                // into the DC bin as a trivial brightness cue.
                let mean = chan.iter().sum::<Real>() / chan.len() as Real;
                data.extend(chan.into_iter().map(|v| (v - mean + 0.5).clamp(0.0, 1.0)));
            }
            images.push(Tensor::new(vec![3, side, side], data).expect("sized above"));
            labels.push(class);
        }
    }
    // Interleave classes so any prefix of the set is class-balanced.
    let mut order: Vec<usize> = (0..images.len()).collect();
    rng.shuffle(&mut order);
    let images = order.iter().map(|&i| images[i].clone()).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    Dataset { images, labels, classes: k }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(buf: &[u8], pos: usize) -> Result<u32, DataError> {
    buf.get(pos..pos + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::MalformedIdx("truncated header".into()))
}

/// Load an IDX image/label file pair. `classes` bounds the labels.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    classes: usize,
) -> Result<Dataset, DataError> {
    let img_buf = std::fs::read(images_path)?;
    let lab_buf = std::fs::read(labels_path)?;

    if read_be_u32(&img_buf, 0)? != IDX_IMAGES_MAGIC {
        return Err(DataError::MalformedIdx("bad image magic".into()));
    }
    let count = read_be_u32(&img_buf, 4)? as usize;
    let rows = read_be_u32(&img_buf, 8)? as usize;
    let cols = read_be_u32(&img_buf, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if img_buf.len() != expected {
        return Err(DataError::MalformedIdx(format!(
            "image payload {} bytes, expected {expected}",
            img_buf.len()
        )));
    }

    if read_be_u32(&lab_buf, 0)? != IDX_LABELS_MAGIC {
        return Err(DataError::MalformedIdx("bad label magic".into()));
    }
    let lab_count = read_be_u32(&lab_buf, 4)? as usize;
    if lab_count != count {
        return Err(DataError::MalformedIdx(format!(
            "{lab_count} labels for {count} images"
        )));
    }
    if lab_buf.len() != 8 + count {
        return Err(DataError::MalformedIdx("label payload size".into()));
    }

    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let base = 16 + i * rows * cols;
        let data: Vec<Real> =
            img_buf[base..base + rows * cols].iter().map(|&b| b as Real / 255.0).collect();
        images.push(Tensor::new(vec![1, rows, cols], data).expect("sized above"));
        let label = lab_buf[8 + i] as usize;
        if label >= classes {
            return Err(DataError::LabelOutOfRange { label, classes });
        }
        labels.push(label);
    }
    Ok(Dataset { images, labels, classes })
}
