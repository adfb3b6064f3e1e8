//! Jigsaw puzzles: an image cut into `d×d` patches and shuffled; each patch
//! must be assigned its original position.

use pmp_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use std::f64::consts::PI;

use super::{GraphInstance, TEST, TRAIN, VAL};
use crate::error::{PmpError, Result};
use crate::graph::GraphTopology;

/// Number of sinusoids summed into a synthetic texture.
const WAVES: usize = 4;
/// Largest wave frequency in cycles per image side. Low frequencies keep
/// each border close to linear, so matching borders is a near-linear
/// comparison while distinct patches still differ.
const MAX_FREQ: f64 = 0.5;

/// Grayscale image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Smooth random texture in `[0, 1]`: a sum of low-frequency plane waves
/// plus a random linear ramp, rescaled to the unit range.
pub fn synthetic_texture(size: usize, rng: &mut impl Rng) -> Image {
    let mut waves = Vec::with_capacity(WAVES);
    for _ in 0..WAVES {
        let fx: f64 = rng.random_range(-MAX_FREQ..MAX_FREQ);
        let fy: f64 = rng.random_range(-MAX_FREQ..MAX_FREQ);
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        let amp: f64 = rng.random_range(0.5..1.0);
        waves.push((fx, fy, phase, amp));
    }
    let gx: f64 = rng.random_range(-1.0..1.0);
    let gy: f64 = rng.random_range(-1.0..1.0);
    let s = size as f64;
    let mut raw = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s, y as f64 / s);
            let mut val = gx * u + gy * v;
            for &(fx, fy, phase, amp) in &waves {
                val += amp * (2.0 * PI * (fx * u + fy * v) + phase).sin();
            }
            raw.push(val);
        }
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    Image {
        height: size,
        width: size,
        pixels: raw.iter().map(|&v| ((v - lo) / span) as f32).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PuzzleInstance {
    pub d: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// One flattened patch per row, in shuffled order.
    pub patches: Tensor<f32>,
    /// `targets[i]` is the row-major grid position that patch `i` came from.
    pub targets: Vec<usize>,
}

impl PuzzleInstance {
    /// Puts every patch back at the position given by `order` and returns
    /// the image.
    pub fn reassemble(&self, order: &[usize]) -> Result<Image> {
        let n = self.d * self.d;
        if order.len() != n {
            return Err(PmpError::Shape(format!(
                "{} positions for {n} patches",
                order.len()
            )));
        }
        let (ph, pw) = (self.patch_h, self.patch_w);
        let width = pw * self.d;
        let mut pixels = vec![0.0f32; width * ph * self.d];
        for (i, &pos) in order.iter().enumerate() {
            let (gx, gy) = (pos % self.d, pos / self.d);
            let row = self.patches.row(i);
            for y in 0..ph {
                for x in 0..pw {
                    pixels[(gy * ph + y) * width + gx * pw + x] = row[y * pw + x];
                }
            }
        }
        Ok(Image {
            height: ph * self.d,
            width,
            pixels,
        })
    }

    /// Fully connected graph over patches; every patch is scored.
    pub fn to_graph(&self) -> Result<GraphInstance> {
        let n = self.d * self.d;
        Ok(GraphInstance {
            features: self.patches.clone(),
            topology: GraphTopology::fully_connected(n)?,
            targets: self.targets.clone(),
            flags: vec![TRAIN | VAL | TEST; n],
            n_classes: n,
        })
    }
}

/// Cuts `source` into `d×d` patches and shuffles them uniformly.
pub fn gen_puzzle(source: &Image, d: usize, rng: &mut impl Rng) -> Result<PuzzleInstance> {
    if d < 2 || source.height % d != 0 || source.width % d != 0 {
        return Err(PmpError::InvalidArgument(format!(
            "a {}×{} image does not split into {d}×{d} patches",
            source.height, source.width
        )));
    }
    let (ph, pw) = (source.height / d, source.width / d);
    let n = d * d;
    let mut targets: Vec<usize> = (0..n).collect();
    targets.shuffle(rng);
    let mut data = Vec::with_capacity(n * ph * pw);
    for &pos in &targets {
        let (gx, gy) = (pos % d, pos / d);
        for y in 0..ph {
            for x in 0..pw {
                data.push(source.get(gx * pw + x, gy * ph + y));
            }
        }
    }
    Ok(PuzzleInstance {
        d,
        patch_h: ph,
        patch_w: pw,
        patches: Tensor::from_vec(n, ph * pw, data)?,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nine_patches_form_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = synthetic_texture(48, &mut rng);
        let p = gen_puzzle(&img, 3, &mut rng).unwrap();
        assert_eq!(p.patches.shape(), [9, 256]);
        let mut t = p.targets.clone();
        t.sort();
        assert_eq!(t, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn reassembly_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = synthetic_texture(48, &mut rng);
        for d in [2, 3, 4] {
            let p = gen_puzzle(&img, d, &mut rng).unwrap();
            assert_eq!(p.reassemble(&p.targets).unwrap(), img);
        }
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = synthetic_texture(48, &mut rng);
        assert!(gen_puzzle(&img, 5, &mut rng).is_err());
    }

    #[test]
    fn texture_is_in_unit_range() {
        let img = synthetic_texture(48, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
