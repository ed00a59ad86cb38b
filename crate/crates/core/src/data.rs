//! MNIST ingestion (IDX files) and same/different pair sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_LEN: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// File names of the four standard MNIST files.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn files(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => (TRAIN_IMAGES, TRAIN_LABELS),
            Split::Test => (TEST_IMAGES, TEST_LABELS),
        }
    }

    pub fn expected_len(self) -> usize {
        match self {
            Split::Train => 60_000,
            Split::Test => 10_000,
        }
    }
}

/// A 28×28 grayscale digit with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub label: u8,
}

impl LabeledImage {
    pub fn from_bytes(bytes: &[u8], label: u8) -> Self {
        Self {
            pixels: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
            label,
        }
    }

    /// Inverse of the `/255` normalisation.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p * 255.0).round() as u8).collect()
    }
}

impl AsRef<[f32]> for LabeledImage {
    fn as_ref(&self) -> &[f32] {
        &self.pixels
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_header(bytes: &[u8], path: &Path, magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let found = read_u32(bytes, 0);
    if found != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Parsed `idx3-ubyte` image file: `(count, rows, cols, raw pixel bytes)`.
pub fn parse_idx_images<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    check_header(bytes, path, IMAGES_MAGIC, 16)?;
    let count = read_u32(bytes, 4) as usize;
    let rows = read_u32(bytes, 8) as usize;
    let cols = read_u32(bytes, 12) as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((count, rows, cols, &bytes[16..]))
}

pub fn parse_idx_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    check_header(bytes, path, LABELS_MAGIC, 8)?;
    let count = read_u32(bytes, 4) as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(&bytes[8..])
}

/// Parses in-memory IDX image and label files into normalised images.
pub fn decode_idx(images: &[u8], labels: &[u8], images_path: &Path, labels_path: &Path) -> Result<Vec<LabeledImage>> {
    let (count, rows, cols, pixels) = parse_idx_images(images, images_path)?;
    let labels = parse_idx_labels(labels, labels_path)?;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::Consistency(format!(
            "{}: images are {rows}×{cols}, expected {IMAGE_SIDE}×{IMAGE_SIDE}",
            images_path.display()
        )));
    }
    if labels.len() != count {
        return Err(Error::Consistency(format!(
            "{} holds {count} images but {} holds {} labels",
            images_path.display(),
            labels_path.display(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Consistency(format!(
            "{}: label {bad} outside 0..{NUM_CLASSES}",
            labels_path.display()
        )));
    }
    Ok(pixels
        .chunks_exact(IMAGE_LEN)
        .zip(labels)
        .map(|(px, &l)| LabeledImage::from_bytes(px, l))
        .collect())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(Error::file(ip))?;
    let labels = fs::read(lp).map_err(Error::file(lp))?;
    decode_idx(&images, &labels, ip, lp)
}

pub fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let (i, l) = split.files();
    (dir.join(i), dir.join(l))
}

/// Loads one MNIST split from a directory holding the standard file names.
pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Vec<LabeledImage>> {
    let (i, l) = split_paths(dir.as_ref(), split);
    load_idx(i, l)
}

/// Serialises images back to `idx3-ubyte` bytes.
pub fn encode_idx_images(images: &[LabeledImage]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * IMAGE_LEN);
    for v in [IMAGES_MAGIC, images.len() as u32, IMAGE_SIDE as u32, IMAGE_SIDE as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend(img.to_bytes());
    }
    out
}

pub fn encode_idx_labels(images: &[LabeledImage]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + images.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend(images.iter().map(|i| i.label));
    out
}

/// Dataset indices bucketed by label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassIndex {
    buckets: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn bucket(&self, class: usize) -> &[usize] {
        &self.buckets[class]
    }

    pub fn buckets(&self) -> &[Vec<usize>] {
        &self.buckets
    }

    pub fn total(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    fn populated(&self) -> Vec<usize> {
        (0..self.buckets.len()).filter(|&c| !self.buckets[c].is_empty()).collect()
    }
}

pub fn class_index_table(dataset: &[LabeledImage]) -> ClassIndex {
    let mut buckets = vec![Vec::new(); NUM_CLASSES];
    for (i, img) in dataset.iter().enumerate() {
        buckets[img.label as usize].push(i);
    }
    ClassIndex { buckets }
}

/// Two dataset indices and whether their labels agree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSample {
    pub query: usize,
    pub reference: usize,
    pub query_label: u8,
    pub reference_label: u8,
    pub same_class: bool,
}

/// Draws a same-class pair with probability ½, otherwise a pair from two
/// distinct classes. Classes are chosen uniformly among the populated ones.
pub fn sample_pair(rng: &mut impl Rng, table: &ClassIndex) -> Result<PairSample> {
    let same = rng.gen_bool(0.5);
    sample_pair_with(rng, table, same)
}

/// [`sample_pair`] with the same/different branch fixed by the caller.
pub fn sample_pair_with(rng: &mut impl Rng, table: &ClassIndex, same: bool) -> Result<PairSample> {
    let classes = table.populated();
    if classes.is_empty() {
        return Err(Error::Sampling("dataset is empty".into()));
    }
    let (cq, cr, q, r) = if same {
        let c = classes[rng.gen_range(0..classes.len())];
        let b = table.bucket(c);
        if b.len() < 2 {
            return Err(Error::Sampling(format!(
                "class {c} has {} image(s); a same-class pair needs 2",
                b.len()
            )));
        }
        let i = rng.gen_range(0..b.len());
        let mut j = rng.gen_range(0..b.len() - 1);
        if j >= i {
            j += 1;
        }
        (c, c, b[i], b[j])
    } else {
        if classes.len() < 2 {
            return Err(Error::Sampling(
                "a different-class pair needs at least two populated classes".into(),
            ));
        }
        let i = rng.gen_range(0..classes.len());
        let mut j = rng.gen_range(0..classes.len() - 1);
        if j >= i {
            j += 1;
        }
        let (bq, br) = (table.bucket(classes[i]), table.bucket(classes[j]));
        (
            classes[i],
            classes[j],
            bq[rng.gen_range(0..bq.len())],
            br[rng.gen_range(0..br.len())],
        )
    };
    Ok(PairSample {
        query: q,
        reference: r,
        query_label: cq as u8,
        reference_label: cr as u8,
        same_class: same,
    })
}
