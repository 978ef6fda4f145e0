//! Volumes, slices and the synthetic data pipeline.

mod io;
mod motion;
mod phantom;
mod slices;

pub use io::{load_volume, save_volume, sidecar_path, VolumeHeader};
pub use motion::{gaussian_smooth, motion_corrupt_stacks, MotionCorruption};
pub use phantom::{generate_phantom, PhantomSpec};
pub use slices::{
    downsample, extract_slices, sample_training_sequence, select_context_schedule, SequenceSample, SlicePose,
    SliceStack,
};

use crate::error::{Error, Result};

/// A single-channel 2D image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            return Err(Error::shape(
                "Image::new",
                format!("{height}x{width} with {} values", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Dense scalar volume indexed `[z][y][x]`, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    data: Vec<f32>,
    subject: String,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing_mm: [f64; 3], data: Vec<f32>, subject: impl Into<String>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "Volume::new",
                format!("{shape:?} with {} values", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!("volume intensity {bad} outside [0, 1]")));
        }
        Ok(Self {
            shape,
            spacing_mm,
            data,
            subject: subject.into(),
        })
    }

    /// Builds a volume from arbitrary finite intensities, min-max normalized
    /// over the whole volume.
    pub fn normalized(
        shape: [usize; 3],
        spacing_mm: [f64; 3],
        mut data: Vec<f32>,
        subject: impl Into<String>,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Volume::normalized"));
        }
        let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        for v in &mut data {
            *v = if span > 0.0 {
                ((*v - lo) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Self::new(shape, spacing_mm, data, subject)
    }

    /// Stacks equally sized axial images into a volume.
    pub fn from_slices(slices: &[Image], spacing_mm: [f64; 3], subject: impl Into<String>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidArgument("no slices".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            if s.height != h || s.width != w {
                return Err(Error::shape(
                    "Volume::from_slices",
                    format!("{}x{} vs {h}x{w}", s.height, s.width),
                ));
            }
            data.extend(s.data.iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Self::new([slices.len(), h, w], spacing_mm, data, subject)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn set_subject(&mut self, subject: impl Into<String>) {
        self.subject = subject.into();
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[(z * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Axial slice `z`.
    pub fn axial(&self, z: usize) -> Image {
        let n = self.shape[1] * self.shape[2];
        Image {
            height: self.shape[1],
            width: self.shape[2],
            data: self.data[z * n..(z + 1) * n].to_vec(),
        }
    }

    pub fn axial_slices(&self) -> Vec<Image> {
        (0..self.shape[0]).map(|z| self.axial(z)).collect()
    }
}
