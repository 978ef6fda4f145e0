use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

use super::{Image, Volume};

/// One axial slice paired with its pose: slice index `k` out of `num_poses`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePose {
    pub image: Image,
    k: usize,
    num_poses: usize,
}

impl SlicePose {
    pub fn new(image: Image, k: usize, num_poses: usize) -> Result<Self> {
        if k >= num_poses {
            return Err(Error::InvalidArgument(format!(
                "pose index {k} outside [0, {num_poses})"
            )));
        }
        Ok(Self { image, k, num_poses })
    }

    pub fn index(&self) -> usize {
        self.k
    }

    pub fn num_poses(&self) -> usize {
        self.num_poses
    }

    /// One-hot pose vector of length `num_poses`.
    pub fn pose(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.num_poses];
        v[self.k] = 1.0;
        v
    }
}

/// The `K` pose-indexed slices of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub subject: String,
    pub slices: Vec<SlicePose>,
}

impl SliceStack {
    pub fn from_volume(vol: &Volume, middle_fraction: f64, k: usize) -> Result<Self> {
        Ok(Self {
            subject: vol.subject().to_string(),
            slices: extract_slices(vol, middle_fraction, k)?,
        })
    }

    pub fn num_poses(&self) -> usize {
        self.slices.len()
    }

    pub fn get(&self, k: usize) -> Option<&SlicePose> {
        self.slices.get(k)
    }

    /// Resamples every slice to `height x width`.
    pub fn downsampled(&self, height: usize, width: usize) -> Result<Self> {
        let slices = self
            .slices
            .iter()
            .map(|s| {
                let image = downsample(&s.image, height, width)?;
                SlicePose::new(image, s.k, s.num_poses)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            subject: self.subject.clone(),
            slices,
        })
    }

    /// The stack as a `[K, H, W]` volume (the ground truth for a dense sweep).
    pub fn to_volume(&self, spacing_mm: [f64; 3]) -> Result<Volume> {
        let images: Vec<Image> = self.slices.iter().map(|s| s.image.clone()).collect();
        Volume::from_slices(&images, spacing_mm, self.subject.clone())
    }
}

/// `M` slice/pose pairs of one subject; the last entry is the query.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub subject: String,
    pub entries: Vec<SlicePose>,
}

impl SequenceSample {
    pub fn contexts(&self) -> &[SlicePose] {
        &self.entries[..self.entries.len().saturating_sub(1)]
    }

    pub fn query(&self) -> Option<&SlicePose> {
        self.entries.last()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `K` evenly spaced axial slices from the centred slab covering
/// `middle_fraction` of the volume.
pub fn extract_slices(vol: &Volume, middle_fraction: f64, k: usize) -> Result<Vec<SlicePose>> {
    if !(middle_fraction > 0.0 && middle_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "middle fraction {middle_fraction} outside (0, 1]"
        )));
    }
    let z = vol.shape()[0];
    let thickness = ((z as f64 * middle_fraction).round() as usize).clamp(1, z);
    if k == 0 || k > thickness {
        return Err(Error::InvalidArgument(format!(
            "{k} slices do not fit a {thickness}-slice slab"
        )));
    }
    let start = (z - thickness) / 2;
    (0..k)
        .map(|i| {
            let offset = ((i as f64 + 0.5) * thickness as f64 / k as f64).floor() as usize;
            SlicePose::new(vol.axial(start + offset), i, k)
        })
        .collect()
}

/// Resamples `image` to `height x width`: area averaging for integer
/// ratios, bilinear interpolation otherwise.
pub fn downsample(image: &Image, height: usize, width: usize) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    if height == 0 || width == 0 || height > h || width > w {
        return Err(Error::InvalidArgument(format!(
            "cannot down-sample {h}x{w} to {height}x{width}"
        )));
    }
    let data = if h % height == 0 && w % width == 0 {
        let (fy, fx) = (h / height, w / width);
        let norm = 1.0 / (fy * fx) as f64;
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0f64;
                for dy in 0..fy {
                    for dx in 0..fx {
                        acc += image.at(y * fy + dy, x * fx + dx) as f64;
                    }
                }
                out.push((acc * norm).clamp(0.0, 1.0) as f32);
            }
        }
        out
    } else {
        let (sy, sx) = (h as f64 / height as f64, w as f64 / width as f64);
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(h - 1);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(w - 1);
                let top = image.at(y0, x0) as f64 * (1.0 - tx) + image.at(y0, x1) as f64 * tx;
                let bot = image.at(y1, x0) as f64 * (1.0 - tx) + image.at(y1, x1) as f64 * tx;
                out.push((top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0) as f32);
            }
        }
        out
    };
    Image::new(height, width, data)
}

/// `m` distinct slices drawn uniformly without replacement, in random order.
pub fn sample_training_sequence<R: Rng + ?Sized>(stack: &SliceStack, m: usize, rng: &mut R) -> Result<SequenceSample> {
    let k = stack.num_poses();
    if m == 0 || m > k {
        return Err(Error::InvalidArgument(format!("sequence length {m} not in [1, {k}]")));
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let (picked, _) = idx.partial_shuffle(rng, m);
    Ok(SequenceSample {
        subject: stack.subject.clone(),
        entries: picked.iter().map(|&i| stack.slices[i].clone()).collect(),
    })
}

/// Context schedules tabulated in the reference experiments, keyed by `K`.
const PUBLISHED_SCHEDULES: &[(usize, &[&[usize]])] = &[
    (
        80,
        &[&[40], &[20, 40, 60], &[10, 30, 50, 70], &[10, 20, 30, 40, 50, 60, 70]],
    ),
    (
        100,
        &[
            &[50],
            &[25, 50, 75],
            &[10, 30, 50, 70, 90],
            &[10, 20, 30, 40, 50, 60, 70, 80, 90],
        ],
    ),
    (
        120,
        &[
            &[60],
            &[40, 60, 80],
            &[20, 40, 60, 80, 100],
            &[20, 30, 40, 50, 60, 70, 80, 90, 100],
        ],
    ),
];

/// `n` context indices spread evenly over `[0, K)`.
///
/// Uses the published schedule when one exists for `(n, K)`, otherwise
/// `floor((i + 0.5) * K / n)`. `n` is capped at `K`; `n = 0` yields no contexts.
pub fn select_context_schedule(n: usize, k: usize) -> Vec<usize> {
    let n = n.min(k);
    if let Some(s) = PUBLISHED_SCHEDULES
        .iter()
        .filter(|(pk, _)| *pk == k)
        .flat_map(|(_, list)| list.iter())
        .find(|s| s.len() == n)
    {
        return s.to_vec();
    }
    (0..n)
        .map(|i| ((i as f64 + 0.5) * k as f64 / n as f64).floor() as usize)
        .collect()
}
