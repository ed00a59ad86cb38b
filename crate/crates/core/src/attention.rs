//! CLS-to-patch attention masks: extraction, upsampling, sharpening and
//! rendering.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Post-softmax attention of every layer, each `heads × tokens × tokens`
/// with token 0 the CLS token.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    heads: usize,
    tokens: usize,
    layers: Vec<Vec<f32>>,
}

impl AttentionTrace {
    pub fn new(heads: usize, tokens: usize, layers: Vec<Vec<f32>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Argument("attention trace has no layers".into()));
        }
        if tokens < 2 {
            return Err(Error::Argument("attention trace needs at least one image token".into()));
        }
        let per = heads * tokens * tokens;
        if let Some(bad) = layers.iter().find(|l| l.len() != per) {
            return Err(Error::shape("attention trace", &[heads, tokens, tokens], &[bad.len()]));
        }
        Ok(Self {
            heads,
            tokens,
            layers,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Vec<f32>] {
        &self.layers
    }

    /// Attention of the CLS query over the image tokens of one layer,
    /// reduced across heads.
    fn cls_row(&self, layer: usize, reduction: HeadReduction) -> Vec<f32> {
        let t = self.tokens;
        let l = &self.layers[layer];
        let mut out = vec![0.0f32; t - 1];
        for h in 0..self.heads {
            let row = &l[h * t * t + 1..h * t * t + t];
            for (o, &v) in out.iter_mut().zip(row) {
                match reduction {
                    HeadReduction::Mean => *o += v,
                    HeadReduction::Max => *o = o.max(v),
                }
            }
        }
        if reduction == HeadReduction::Mean {
            let inv = 1.0 / self.heads as f32;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        out
    }
}

/// Which encoder layer(s) a mask is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    First,
    Last,
    Average,
}

impl Selector {
    pub const ALL: [Selector; 3] = [Selector::First, Selector::Last, Selector::Average];

    pub fn as_str(self) -> &'static str {
        match self {
            Selector::First => "first",
            Selector::Last => "last",
            Selector::Average => "average",
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "first" => Ok(Selector::First),
            "last" => Ok(Selector::Last),
            "average" | "avg" | "mean" => Ok(Selector::Average),
            other => Err(Error::Argument(format!(
                "unknown layer selector `{other}` (expected first, last or average)"
            ))),
        }
    }
}

/// How per-head CLS rows are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadReduction {
    #[default]
    Mean,
    Max,
}

/// Non-negative weights over the `grid_n × grid_n` patch grid, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMask {
    pub grid_n: usize,
    pub values: Vec<f32>,
}

impl PatchMask {
    pub fn new(grid_n: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != grid_n * grid_n {
            return Err(Error::shape("patch mask", &[grid_n, grid_n], &[values.len()]));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Argument("patch mask values must be non-negative".into()));
        }
        Ok(Self { grid_n, values })
    }

    pub fn uniform(grid_n: usize, value: f32) -> Self {
        Self {
            grid_n,
            values: vec![value; grid_n * grid_n],
        }
    }

    pub fn mean(&self) -> f32 {
        self.values.iter().sum::<f32>() / self.values.len() as f32
    }
}

/// Square per-pixel mask, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMask {
    pub side: usize,
    pub values: Vec<f32>,
}

/// CLS-to-image-token attention reduced across heads (arithmetic mean) and
/// read from the first layer, the last layer, or the mean of all layers.
pub fn cls_attention(trace: &AttentionTrace, selector: Selector) -> PatchMask {
    cls_attention_with(trace, selector, HeadReduction::Mean)
}

pub fn cls_attention_with(trace: &AttentionTrace, selector: Selector, reduction: HeadReduction) -> PatchMask {
    let values = match selector {
        Selector::First => trace.cls_row(0, reduction),
        Selector::Last => trace.cls_row(trace.num_layers() - 1, reduction),
        Selector::Average => {
            let mut acc = vec![0.0f32; trace.tokens - 1];
            for l in 0..trace.num_layers() {
                for (a, v) in acc.iter_mut().zip(trace.cls_row(l, reduction)) {
                    *a += v;
                }
            }
            let inv = 1.0 / trace.num_layers() as f32;
            acc.iter_mut().for_each(|v| *v *= inv);
            acc
        }
    };
    let grid_n = (values.len() as f64).sqrt().round() as usize;
    debug_assert_eq!(grid_n * grid_n, values.len());
    PatchMask { grid_n, values }
}

/// CLS attention for `selector`, expanded to pixel resolution.
pub fn pixel_mask(trace: &AttentionTrace, selector: Selector, image_side: usize) -> Result<PixelMask> {
    upsample_mask(&cls_attention(trace, selector), image_side)
}

/// Nearest-neighbour expansion: every patch value fills its block.
pub fn upsample_mask(mask: &PatchMask, image_side: usize) -> Result<PixelMask> {
    if mask.grid_n == 0 || image_side % mask.grid_n != 0 {
        return Err(Error::shape("upsample_mask", &[mask.grid_n], &[image_side]));
    }
    let p = image_side / mask.grid_n;
    let mut values = vec![0.0; image_side * image_side];
    for y in 0..image_side {
        for x in 0..image_side {
            values[y * image_side + x] = mask.values[(y / p) * mask.grid_n + x / p];
        }
    }
    Ok(PixelMask {
        side: image_side,
        values,
    })
}

/// Block-mean reduction back onto the patch grid.
pub fn block_mean(mask: &PixelMask, grid_n: usize) -> Result<PatchMask> {
    if grid_n == 0 || mask.side % grid_n != 0 {
        return Err(Error::shape("block_mean", &[mask.side], &[grid_n]));
    }
    let p = mask.side / grid_n;
    let mut values = vec![0.0f32; grid_n * grid_n];
    for y in 0..mask.side {
        for x in 0..mask.side {
            values[(y / p) * grid_n + x / p] += mask.values[y * mask.side + x];
        }
    }
    let inv = 1.0 / (p * p) as f32;
    values.iter_mut().for_each(|v| *v *= inv);
    Ok(PatchMask { grid_n, values })
}

/// Min-max scales to `[0, 1]`, then zeroes every pixel below `threshold`.
/// Surviving pixels keep their scaled value.
pub fn sharpen_mask(mask: &PixelMask, threshold: f32) -> Result<PixelMask> {
    let min = mask.values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = mask.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(max > min) {
        return Err(Error::Degenerate(
            "cannot min-max scale a constant mask".into(),
        ));
    }
    let range = max - min;
    let values = mask
        .values
        .iter()
        .map(|&v| {
            let s = (v - min) / range;
            if s >= threshold {
                s
            } else {
                0.0
            }
        })
        .collect();
    Ok(PixelMask {
        side: mask.side,
        values,
    })
}

/// Cosmetic choices for rendered overlays.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Integer upscaling applied to every output raster.
    pub scale: u32,
    /// Opacity of the red highlight at mask value 1.
    pub alpha: f32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            scale: 8,
            alpha: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFiles {
    pub mask_png: PathBuf,
    pub mask_pgm: PathBuf,
    pub overlay: PathBuf,
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale image (values in `[0, 1]`) as a `side × side` raster.
pub fn grayscale_raster(pixels: &[f32], side: usize, scale: u32) -> Result<GrayImage> {
    if pixels.len() != side * side {
        return Err(Error::shape("grayscale_raster", &[side, side], &[pixels.len()]));
    }
    let s = scale.max(1);
    let n = side as u32 * s;
    Ok(GrayImage::from_fn(n, n, |x, y| {
        Luma([to_byte(pixels[(y / s) as usize * side + (x / s) as usize])])
    }))
}

/// Mask heat raster, normalised by its maximum so faint masks stay visible.
pub fn mask_raster(mask: &PixelMask, scale: u32) -> GrayImage {
    let max = mask.values.iter().copied().fold(0.0f32, f32::max);
    let norm: Vec<f32> = if max > 0.0 {
        mask.values.iter().map(|v| v / max).collect()
    } else {
        mask.values.clone()
    };
    grayscale_raster(&norm, mask.side, scale).expect("mask is square")
}

/// Red-highlight composite: each pixel moves towards pure red in proportion
/// to `alpha ·` its (max-normalised) mask value.
pub fn overlay_raster(image: &[f32], mask: &PixelMask, opts: RenderOptions) -> Result<RgbImage> {
    let side = mask.side;
    if image.len() != side * side {
        return Err(Error::shape("render_overlay", &[side, side], &[image.len()]));
    }
    let max = mask.values.iter().copied().fold(0.0f32, f32::max);
    let s = opts.scale.max(1);
    let n = side as u32 * s;
    Ok(RgbImage::from_fn(n, n, |x, y| {
        let i = (y / s) as usize * side + (x / s) as usize;
        let g = image[i].clamp(0.0, 1.0);
        let m = if max > 0.0 { mask.values[i] / max } else { 0.0 };
        let a = opts.alpha * m;
        Rgb([to_byte(g * (1.0 - a) + a), to_byte(g * (1.0 - a)), to_byte(g * (1.0 - a))])
    }))
}

/// Binary 8-bit PGM (P5).
pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend_from_slice(img.as_raw());
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes `<stem>.png` (composite), `<stem>_mask.png` and `<stem>_mask.pgm`.
pub fn render_overlay(image: &[f32], mask: &PixelMask, stem: &Path, opts: RenderOptions) -> Result<RenderedFiles> {
    let overlay = overlay_raster(image, mask, opts)?;
    let heat = mask_raster(mask, opts.scale);
    let with_suffix = |suffix: &str| {
        let mut name = stem.file_name().unwrap_or_default().to_os_string();
        name.push(suffix);
        stem.with_file_name(name)
    };
    let files = RenderedFiles {
        mask_png: with_suffix("_mask.png"),
        mask_pgm: with_suffix("_mask.pgm"),
        overlay: with_suffix(".png"),
    };
    if let Some(parent) = stem.parent() {
        fs::create_dir_all(parent)?;
    }
    heat.save(&files.mask_png)?;
    write_pgm(&heat, &files.mask_pgm)?;
    overlay.save(&files.overlay)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_trace(layers: usize, heads: usize, tokens: usize) -> AttentionTrace {
        let v = 1.0 / tokens as f32;
        AttentionTrace::new(heads, tokens, vec![vec![v; heads * tokens * tokens]; layers]).unwrap()
    }

    /// Random row-stochastic trace.
    fn random_trace(seed: u64, layers: usize, heads: usize, tokens: usize) -> AttentionTrace {
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 10_000) as f32 / 10_000.0 + 1e-3
        };
        let layers = (0..layers)
            .map(|_| {
                let mut l: Vec<f32> = (0..heads * tokens * tokens).map(|_| next()).collect();
                for row in l.chunks_exact_mut(tokens) {
                    let s: f32 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                l
            })
            .collect();
        AttentionTrace::new(heads, tokens, layers).unwrap()
    }

    #[test]
    fn uniform_attention_gives_constant_mask() {
        let trace = uniform_trace(3, 4, 50);
        for sel in Selector::ALL {
            let m = cls_attention(&trace, sel);
            assert_eq!(m.grid_n, 7);
            assert!(m.values.iter().all(|&v| (v - 1.0 / 50.0).abs() < 1e-7));
        }
    }

    #[test]
    fn average_of_identical_layers_equals_one_layer() {
        let base = random_trace(3, 1, 2, 10);
        let trace = AttentionTrace::new(2, 10, vec![base.layers()[0].clone(); 4]).unwrap();
        let first = cls_attention(&trace, Selector::First);
        let avg = cls_attention(&trace, Selector::Average);
        for (a, b) in first.values.iter().zip(&avg.values) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn mask_mass_excludes_cls_self_weight() {
        let trace = random_trace(5, 1, 1, 17);
        let m = cls_attention(&trace, Selector::First);
        let cls_self = trace.layers()[0][0];
        let total: f32 = m.values.iter().sum();
        assert!((total - (1.0 - cls_self)).abs() < 1e-5);
    }

    #[test]
    fn max_reduction_dominates_mean() {
        let trace = random_trace(8, 2, 3, 10);
        let mean = cls_attention_with(&trace, Selector::Last, HeadReduction::Mean);
        let max = cls_attention_with(&trace, Selector::Last, HeadReduction::Max);
        assert!(mean.values.iter().zip(&max.values).all(|(a, b)| a <= b));
    }

    #[test]
    fn selector_parsing() {
        assert_eq!("avg".parse::<Selector>().unwrap(), Selector::Average);
        assert_eq!("Last".parse::<Selector>().unwrap(), Selector::Last);
        assert!("middle".parse::<Selector>().is_err());
    }

    #[test]
    fn upsample_blocks() {
        let m = PatchMask::new(7, (0..49).map(|v| v as f32).collect()).unwrap();
        let px = upsample_mask(&m, 28).unwrap();
        assert_eq!(px.values[0], 0.0);
        assert_eq!(px.values[3 * 28 + 3], 0.0);
        assert_eq!(px.values[4], 1.0);
        assert_eq!(px.values[4 * 28], 7.0);
        assert_eq!(px.values[27 * 28 + 27], 48.0);
        assert!(upsample_mask(&m, 30).is_err());

        let c = upsample_mask(&PatchMask::uniform(7, 0.3), 28).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn sharpen_examples() {
        let m = PixelMask {
            side: 1,
            values: vec![0.0, 0.4, 1.0],
        };
        let s = sharpen_mask(&m, 0.5).unwrap();
        assert_eq!(s.values, vec![0.0, 0.0, 1.0]);
        let s0 = sharpen_mask(&m, 0.0).unwrap();
        assert_eq!(s0.values, vec![0.0, 0.4, 1.0]);

        let shifted = PixelMask {
            side: 2,
            values: vec![2.0, 3.0, 5.0, 6.0],
        };
        let s = sharpen_mask(&shifted, 0.75).unwrap();
        assert_eq!(s.values, vec![0.0, 0.0, 0.75, 1.0]);

        let flat = PixelMask {
            side: 1,
            values: vec![0.2; 4],
        };
        assert!(matches!(sharpen_mask(&flat, 0.5), Err(Error::Degenerate(_))));
    }

    #[test]
    fn overlay_extremes() {
        let img: Vec<f32> = (0..16).map(|v| v as f32 / 15.0).collect();
        let opts = RenderOptions { scale: 1, alpha: 0.6 };
        let zero = PixelMask {
            side: 4,
            values: vec![0.0; 16],
        };
        let o = overlay_raster(&img, &zero, opts).unwrap();
        for (i, p) in o.pixels().enumerate() {
            let g = to_byte(img[i]);
            assert_eq!(p.0, [g, g, g]);
        }
        let full = PixelMask {
            side: 4,
            values: vec![1.0; 16],
        };
        let o = overlay_raster(&img, &full, opts).unwrap();
        assert!(o.pixels().all(|p| p.0[0] > p.0[1] && p.0[1] == p.0[2]));
    }

    #[test]
    fn rendered_files_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let img: Vec<f32> = (0..784).map(|v| (v % 255) as f32 / 255.0).collect();
        let mask = upsample_mask(&PatchMask::new(7, (0..49).map(|v| v as f32).collect()).unwrap(), 28).unwrap();
        let stem = dir.path().join("sub").join("q_cevit_last");
        let files = render_overlay(&img, &mask, &stem, RenderOptions::default()).unwrap();
        assert_eq!(files.overlay.file_name().unwrap(), "q_cevit_last.png");
        let back = image::open(&files.overlay).unwrap();
        assert_eq!((back.width(), back.height()), (224, 224));
        let heat = image::open(&files.mask_png).unwrap();
        assert_eq!(heat.width(), 224);
        let pgm = fs::read(&files.mask_pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n224 224\n255\n"));
        assert_eq!(pgm.len(), "P5\n224 224\n255\n".len() + 224 * 224);
    }

    proptest! {
        #[test]
        fn upsample_then_block_mean_is_exact(grid_n in 1usize..8, p in 1usize..5, seed in any::<u32>()) {
            let values: Vec<f32> = (0..grid_n * grid_n)
                .map(|i| ((i as u32).wrapping_mul(seed | 1) % 97) as f32 / 8.0)
                .collect();
            let m = PatchMask::new(grid_n, values).unwrap();
            let back = block_mean(&upsample_mask(&m, grid_n * p).unwrap(), grid_n).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn sharpen_is_monotone(vals in proptest::collection::vec(0.0f32..1.0, 4..32), t1 in 0.0f32..1.0, t2 in 0.0f32..1.0) {
            let m = PixelMask { side: 1, values: vals };
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            if let (Ok(a), Ok(b)) = (sharpen_mask(&m, lo), sharpen_mask(&m, hi)) {
                for (x, y) in a.values.iter().zip(&b.values) {
                    prop_assert!(*y == 0.0 || *x != 0.0);
                }
            }
        }

        #[test]
        fn masks_bounded_and_average_is_layer_mean(seed in any::<u64>(), layers in 1usize..5) {
            let trace = random_trace(seed, layers, 3, 10);
            let avg = cls_attention(&trace, Selector::Average);
            let mut manual = vec![0.0f32; 9];
            for l in 0..layers {
                let single = AttentionTrace::new(3, 10, vec![trace.layers()[l].clone()]).unwrap();
                for (m, v) in manual.iter_mut().zip(cls_attention(&single, Selector::First).values) {
                    *m += v / layers as f32;
                }
            }
            for (a, b) in avg.values.iter().zip(&manual) {
                prop_assert!((a - b).abs() < 1e-6);
                prop_assert!(*a >= 0.0 && *a <= 1.0);
            }
        }
    }
}
