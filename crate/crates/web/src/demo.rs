//! Everything the page needs, as plain Rust so it can be tested natively.

use cevit::attention::{pixel_mask, sharpen_mask, PixelMask, Selector};
use cevit::data::{IMAGE_LEN, IMAGE_SIDE};
use cevit::distraction::softmax_probs;
use cevit::model::{Checkpoint, HeadKind, Model};
use cevit::{Error, Result};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct Classified {
    pub label: u8,
    pub probs: Vec<f32>,
    /// Pixel-resolution CLS attention, 28×28 row-major.
    pub mask: Vec<f32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Compared {
    pub score: f32,
    pub mask: Vec<f32>,
}

pub struct Demo {
    vit: Model,
    cevit: Model,
}

fn load(manifest: &str, blob: &[u8], head: HeadKind) -> Result<Model> {
    let ckpt = Checkpoint::from_bytes(manifest, blob)?;
    if ckpt.config().head != head {
        return Err(Error::Config(format!(
            "expected a {head:?} checkpoint, got {:?}",
            ckpt.config().head
        )));
    }
    Ok(ckpt.model)
}

fn check_image(pixels: &[f32]) -> Result<()> {
    if pixels.len() != IMAGE_LEN {
        return Err(Error::shape("demo image", &[IMAGE_SIDE, IMAGE_SIDE], &[pixels.len()]));
    }
    Ok(())
}

impl Demo {
    pub fn new(vit: Model, cevit: Model) -> Result<Self> {
        if vit.config.head != HeadKind::Classifier10 || cevit.config.head != HeadKind::Similarity1 {
            return Err(Error::Config("demo needs a classifier and a pairwise scorer".into()));
        }
        Ok(Self { vit, cevit })
    }

    pub fn from_checkpoints(vit_manifest: &str, vit_blob: &[u8], cevit_manifest: &str, cevit_blob: &[u8]) -> Result<Self> {
        Self::new(
            load(vit_manifest, vit_blob, HeadKind::Classifier10)?,
            load(cevit_manifest, cevit_blob, HeadKind::Similarity1)?,
        )
    }

    pub fn classify(&self, pixels: &[f32], selector: Selector) -> Result<Classified> {
        check_image(pixels)?;
        let (logits, trace) = self.vit.vit_forward(pixels)?;
        let probs = softmax_probs(&logits);
        let label = cevit::train::argmax_label(&probs);
        let mask = pixel_mask(&trace, selector, IMAGE_SIDE)?.values;
        Ok(Classified { label, probs, mask })
    }

    pub fn compare(&self, query: &[f32], reference: &[f32], selector: Selector) -> Result<Compared> {
        check_image(query)?;
        check_image(reference)?;
        let (score, trace) = self.cevit.cevit_score(query, reference)?;
        let mask = pixel_mask(&trace, selector, IMAGE_SIDE)?.values;
        Ok(Compared { score, mask })
    }
}

/// Min-max scales a 28×28 mask and zeroes values below `threshold`. A flat
/// mask comes back as all zeros.
pub fn sharpen(mask: &[f32], threshold: f32) -> Result<Vec<f32>> {
    check_image(mask)?;
    let m = PixelMask {
        side: IMAGE_SIDE,
        values: mask.to_vec(),
    };
    match sharpen_mask(&m, threshold) {
        Ok(s) => Ok(s.values),
        Err(Error::Degenerate(_)) => Ok(vec![0.0; IMAGE_LEN]),
        Err(e) => Err(e),
    }
}

/// 28×28 RGBA composite of a grayscale image with a red mask highlight.
pub fn overlay_rgba(image: &[f32], mask: &[f32], alpha: f32) -> Result<Vec<u8>> {
    check_image(image)?;
    check_image(mask)?;
    let max = mask.iter().copied().fold(0.0f32, f32::max);
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(IMAGE_LEN * 4);
    for (&g, &m) in image.iter().zip(mask) {
        let g = g.clamp(0.0, 1.0);
        let a = if max > 0.0 { alpha * m / max } else { 0.0 };
        out.extend_from_slice(&[byte(g * (1.0 - a) + a), byte(g * (1.0 - a)), byte(g * (1.0 - a)), 255]);
    }
    Ok(out)
}

/// Turns a square grayscale drawing (ink = 1) into an MNIST-style input:
/// the ink's bounding box is scaled to fit 20×20 and placed so its centre
/// of mass sits at the centre of the 28×28 frame.
pub fn prepare_drawing(gray: &[f32], side: usize) -> Result<Vec<f32>> {
    if side == 0 || gray.len() != side * side {
        return Err(Error::shape("drawing", &[side, side], &[gray.len()]));
    }
    let ink = |x: usize, y: usize| gray[y * side + x];
    let (mut x0, mut y0, mut x1, mut y1) = (side, side, 0, 0);
    for y in 0..side {
        for x in 0..side {
            if ink(x, y) > 0.05 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 > x1 {
        return Ok(vec![0.0; IMAGE_LEN]);
    }
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let scale = 20.0 / bw.max(bh) as f32;
    let (tw, th) = (
        ((bw as f32 * scale).round() as usize).clamp(1, 20),
        ((bh as f32 * scale).round() as usize).clamp(1, 20),
    );
    // Area-average resample of the box into tw × th.
    let mut small = vec![0.0f32; tw * th];
    for ty in 0..th {
        for tx in 0..tw {
            let sx0 = x0 + tx * bw / tw;
            let sx1 = (x0 + (tx + 1) * bw / tw).max(sx0 + 1);
            let sy0 = y0 + ty * bh / th;
            let sy1 = (y0 + (ty + 1) * bh / th).max(sy0 + 1);
            let mut acc = 0.0;
            for y in sy0..sy1 {
                for x in sx0..sx1 {
                    acc += ink(x, y);
                }
            }
            small[ty * tw + tx] = acc / ((sx1 - sx0) * (sy1 - sy0)) as f32;
        }
    }
    let total: f32 = small.iter().sum();
    let (mut cx, mut cy) = (0.0, 0.0);
    for ty in 0..th {
        for tx in 0..tw {
            let v = small[ty * tw + tx];
            cx += v * tx as f32;
            cy += v * ty as f32;
        }
    }
    let (cx, cy) = if total > 0.0 { (cx / total, cy / total) } else { (tw as f32 / 2.0, th as f32 / 2.0) };
    let half = (IMAGE_SIDE / 2) as f32;
    let ox = ((half - cx).round() as isize).clamp(0, (IMAGE_SIDE - tw) as isize) as usize;
    let oy = ((half - cy).round() as isize).clamp(0, (IMAGE_SIDE - th) as isize) as usize;
    let mut out = vec![0.0f32; IMAGE_LEN];
    for ty in 0..th {
        for tx in 0..tw {
            out[(oy + ty) * IMAGE_SIDE + ox + tx] = small[ty * tw + tx].clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
