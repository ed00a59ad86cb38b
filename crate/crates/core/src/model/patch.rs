//! Splitting channel-last images into a row-major grid of flattened patches.

use crate::error::{Error, Result};

/// Geometry of a square image cut into `grid_n × grid_n` square patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub side: usize,
    pub channels: usize,
    pub grid_n: usize,
}

impl PatchGrid {
    pub fn new(side: usize, channels: usize, grid_n: usize) -> Result<Self> {
        if grid_n == 0 || side % grid_n != 0 {
            return Err(Error::Shape {
                op: "patchify",
                lhs: vec![side, side, channels],
                rhs: vec![grid_n],
            });
        }
        Ok(Self {
            side,
            channels,
            grid_n,
        })
    }

    pub fn patch_side(&self) -> usize {
        self.side / self.grid_n
    }

    pub fn num_patches(&self) -> usize {
        self.grid_n * self.grid_n
    }

    /// Flattened length of one patch, `patch_side² · channels`.
    pub fn patch_len(&self) -> usize {
        self.patch_side() * self.patch_side() * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.side * self.side * self.channels
    }

    /// Patch `(r, s)` holds rows `[r·p, (r+1)·p)` and columns `[s·p, (s+1)·p)`;
    /// patches are emitted row-major, each flattened as (row, column, channel).
    pub fn patchify(&self, image: &[f32]) -> Result<Vec<f32>> {
        let mut out = vec![0.0; self.image_len()];
        self.patchify_into(image, &mut out)?;
        Ok(out)
    }

    pub fn patchify_into(&self, image: &[f32], out: &mut [f32]) -> Result<()> {
        if image.len() != self.image_len() || out.len() != self.image_len() {
            return Err(Error::shape(
                "patchify",
                &[self.side, self.side, self.channels],
                &[image.len()],
            ));
        }
        let p = self.patch_side();
        let row_len = p * self.channels;
        let mut dst = 0;
        for r in 0..self.grid_n {
            for s in 0..self.grid_n {
                for y in 0..p {
                    let src = ((r * p + y) * self.side + s * p) * self.channels;
                    out[dst..dst + row_len].copy_from_slice(&image[src..src + row_len]);
                    dst += row_len;
                }
            }
        }
        Ok(())
    }

    /// Inverse of [`patchify`](Self::patchify).
    pub fn assemble(&self, patches: &[f32]) -> Result<Vec<f32>> {
        if patches.len() != self.image_len() {
            return Err(Error::shape(
                "assemble",
                &[self.num_patches(), self.patch_len()],
                &[patches.len()],
            ));
        }
        let p = self.patch_side();
        let row_len = p * self.channels;
        let mut out = vec![0.0; self.image_len()];
        let mut src = 0;
        for r in 0..self.grid_n {
            for s in 0..self.grid_n {
                for y in 0..p {
                    let dst = ((r * p + y) * self.side + s * p) * self.channels;
                    out[dst..dst + row_len].copy_from_slice(&patches[src..src + row_len]);
                    src += row_len;
                }
            }
        }
        Ok(out)
    }
}

/// Stacks two single-channel images into one two-channel, channel-last image
/// (`first` in channel 0).
pub fn stack_channels(first: &[f32], second: &[f32]) -> Result<Vec<f32>> {
    if first.len() != second.len() {
        return Err(Error::shape("stack_channels", &[first.len()], &[second.len()]));
    }
    Ok(first.iter().zip(second).flat_map(|(&a, &b)| [a, b]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mnist_grid() {
        let g = PatchGrid::new(28, 1, 7).unwrap();
        assert_eq!(g.num_patches(), 49);
        assert_eq!(g.patch_len(), 16);
        assert_eq!(PatchGrid::new(28, 2, 7).unwrap().patch_len(), 32);
    }

    #[test]
    fn top_left_patch_of_4x4() {
        let img: Vec<f32> = (1..=16).map(|v| v as f32).collect();
        let g = PatchGrid::new(4, 1, 2).unwrap();
        let p = g.patchify(&img).unwrap();
        assert_eq!(&p[..4], &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(&p[4..8], &[3.0, 4.0, 7.0, 8.0]);
        assert_eq!(&p[12..], &[11.0, 12.0, 15.0, 16.0]);
    }

    #[test]
    fn single_patch_is_identity() {
        let img: Vec<f32> = (0..18).map(|v| v as f32).collect();
        let g = PatchGrid::new(3, 2, 1).unwrap();
        assert_eq!(g.patchify(&img).unwrap(), img);
    }

    #[test]
    fn indivisible_side_is_rejected() {
        assert!(matches!(PatchGrid::new(28, 1, 5), Err(Error::Shape { .. })));
        let g = PatchGrid::new(4, 1, 2).unwrap();
        assert!(g.patchify(&[0.0; 15]).is_err());
    }

    #[test]
    fn stacking_interleaves() {
        let s = stack_channels(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(s, vec![1.0, 3.0, 2.0, 4.0]);
        assert!(stack_channels(&[1.0], &[]).is_err());
    }

    proptest! {
        #[test]
        fn patchify_round_trip(grid_n in 1usize..6, p in 1usize..5, c in 1usize..3, seed in any::<u64>()) {
            let side = grid_n * p;
            let g = PatchGrid::new(side, c, grid_n).unwrap();
            let img: Vec<f32> = (0..g.image_len())
                .map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 / 7.0)
                .collect();
            let patches = g.patchify(&img).unwrap();
            prop_assert_eq!(g.assemble(&patches).unwrap(), img);
        }
    }
}
