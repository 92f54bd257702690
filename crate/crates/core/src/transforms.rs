//! Object-destructive image transformations.
//!
//! These serve two purposes: computing the prediction drop that the
//! adaptation engine scores samples with, and corrupting samples when
//! building mixed test streams.

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Dense image with values in `[0, 1]`, stored row-major with interleaved
/// channels (`index = (y * width + x) * channels + c`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        ImageGrid {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Mean over every value in every channel.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn per_channel_mean(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = (self.height * self.width) as f64;
        sums.iter_mut().for_each(|s| *s /= n);
        sums
    }
}

/// Which transformation to apply, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    PatchShuffle,
    PixelShuffle,
    CenterOcclusion,
    GaussianNoise,
    Identity,
}

impl TransformKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "patch_shuffle" | "patch" => TransformKind::PatchShuffle,
            "pixel_shuffle" | "pixel" => TransformKind::PixelShuffle,
            "center_occlusion" | "occlusion" => TransformKind::CenterOcclusion,
            "gaussian_noise" | "noise" => TransformKind::GaussianNoise,
            "identity" => TransformKind::Identity,
            other => {
                return Err(Error::Config(format!(
                    "unknown transform kind '{other}' (expected patch_shuffle, pixel_shuffle, \
                     center_occlusion, gaussian_noise, or identity)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::PatchShuffle => "patch_shuffle",
            TransformKind::PixelShuffle => "pixel_shuffle",
            TransformKind::CenterOcclusion => "center_occlusion",
            TransformKind::GaussianNoise => "gaussian_noise",
            TransformKind::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// Side of the patch grid for `PatchShuffle` (`n` gives `n x n` patches).
    pub patch_grid: usize,
    /// Fraction of the image area covered by `CenterOcclusion`, in `(0, 1)`.
    pub occlusion_fraction: f64,
    /// Standard deviation of `GaussianNoise`.
    pub noise_sigma: f64,
}

impl TransformSpec {
    pub fn patch_shuffle(patch_grid: usize) -> Self {
        TransformSpec {
            kind: TransformKind::PatchShuffle,
            patch_grid,
            occlusion_fraction: 0.25,
            noise_sigma: 0.0,
        }
    }

    pub fn pixel_shuffle() -> Self {
        TransformSpec {
            kind: TransformKind::PixelShuffle,
            ..Self::patch_shuffle(4)
        }
    }

    pub fn center_occlusion(fraction: f64) -> Self {
        TransformSpec {
            kind: TransformKind::CenterOcclusion,
            occlusion_fraction: fraction,
            ..Self::patch_shuffle(4)
        }
    }

    pub fn gaussian_noise(sigma: f64) -> Self {
        TransformSpec {
            kind: TransformKind::GaussianNoise,
            noise_sigma: sigma,
            ..Self::patch_shuffle(4)
        }
    }

    pub fn identity() -> Self {
        TransformSpec {
            kind: TransformKind::Identity,
            ..Self::patch_shuffle(4)
        }
    }

    /// Applies the transform; a fresh random draw is made per call, so each
    /// image in a batch gets its own permutation or noise sample.
    pub fn apply(&self, img: &ImageGrid, rng: &mut Rng) -> Result<ImageGrid> {
        match self.kind {
            TransformKind::PatchShuffle => patch_shuffle(img, self.patch_grid, rng),
            TransformKind::PixelShuffle => Ok(pixel_shuffle(img, rng)),
            TransformKind::CenterOcclusion => center_occlusion(img, self.occlusion_fraction),
            TransformKind::GaussianNoise => Ok(gaussian_noise(img, self.noise_sigma, rng)),
            TransformKind::Identity => Ok(img.clone()),
        }
    }
}

impl Default for TransformSpec {
    fn default() -> Self {
        TransformSpec::patch_shuffle(4)
    }
}

/// Cuts the image into an `n x n` grid of equal patches and rearranges them
/// by `perm` (`out patch slot i <- input patch perm[i]`). Pixels inside each
/// patch are untouched, so the pixel-value multiset is preserved exactly.
pub fn patch_shuffle_with_perm(img: &ImageGrid, n: usize, perm: &[usize]) -> Result<ImageGrid> {
    if n == 0 || img.height % n != 0 || img.width % n != 0 {
        return Err(Error::DimensionMismatch {
            context: "patch_shuffle",
            expected: format!("height and width divisible by {n}"),
            actual: format!("{}x{}", img.height, img.width),
        });
    }
    if perm.len() != n * n {
        return Err(Error::DimensionMismatch {
            context: "patch_shuffle",
            expected: format!("{} patch indices", n * n),
            actual: format!("{}", perm.len()),
        });
    }
    let (ph, pw) = (img.height / n, img.width / n);
    let mut out = ImageGrid::new(img.height, img.width, img.channels);
    for (slot, &src) in perm.iter().enumerate() {
        let (dst_py, dst_px) = (slot / n, slot % n);
        let (src_py, src_px) = (src / n, src % n);
        for dy in 0..ph {
            for dx in 0..pw {
                for c in 0..img.channels {
                    let v = img.get(src_py * ph + dy, src_px * pw + dx, c);
                    out.set(dst_py * ph + dy, dst_px * pw + dx, c, v);
                }
            }
        }
    }
    Ok(out)
}

/// Patch shuffle with a uniformly random patch permutation.
pub fn patch_shuffle(img: &ImageGrid, n: usize, rng: &mut Rng) -> Result<ImageGrid> {
    if n == 0 || img.height % n != 0 || img.width % n != 0 {
        return Err(Error::DimensionMismatch {
            context: "patch_shuffle",
            expected: format!("height and width divisible by {n}"),
            actual: format!("{}x{}", img.height, img.width),
        });
    }
    let perm = rng.permutation(n * n);
    patch_shuffle_with_perm(img, n, &perm)
}

/// Moves pixel at position `perm[i]` to position `i`; channels travel
/// together, so per-channel means are preserved exactly.
pub fn pixel_shuffle_with_perm(img: &ImageGrid, perm: &[usize]) -> ImageGrid {
    assert_eq!(perm.len(), img.height * img.width);
    let c = img.channels;
    let mut out = ImageGrid::new(img.height, img.width, c);
    for (dst, &src) in perm.iter().enumerate() {
        out.data[dst * c..(dst + 1) * c].copy_from_slice(&img.data[src * c..(src + 1) * c]);
    }
    out
}

/// Pixel shuffle with a uniformly random position permutation.
pub fn pixel_shuffle(img: &ImageGrid, rng: &mut Rng) -> ImageGrid {
    let perm = rng.permutation(img.height * img.width);
    pixel_shuffle_with_perm(img, &perm)
}

/// Replaces a centered square covering `fraction` of the area with the
/// image's mean value; border pixels are untouched.
pub fn center_occlusion(img: &ImageGrid, fraction: f64) -> Result<ImageGrid> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "occlusion fraction must be in (0, 1), got {fraction}"
        )));
    }
    let side_f = (fraction.sqrt() * img.height.min(img.width) as f64).round();
    let side = (side_f as usize).min(img.height.min(img.width));
    let fill = img.mean();
    let y0 = (img.height - side) / 2;
    let x0 = (img.width - side) / 2;
    let mut out = img.clone();
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            for c in 0..img.channels {
                out.set(y, x, c, fill);
            }
        }
    }
    Ok(out)
}

/// Adds i.i.d. Gaussian noise with standard deviation `sigma`, then clamps
/// every value back into `[0, 1]`.
pub fn gaussian_noise(img: &ImageGrid, sigma: f64, rng: &mut Rng) -> ImageGrid {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for v in &mut out.data {
        *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
    }
    out
}
