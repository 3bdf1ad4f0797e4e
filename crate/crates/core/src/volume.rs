//! A time series of brain volumes acquired on a fixed grid.

use crate::error::{Error, Result};
use crate::features::AcquisitionGrid;
use crate::tensor::Tensor;

/// `T` volumes of `X x Y x Z` voxels stored frame after frame, each frame
/// row-major with `z` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSeries {
    extents: [usize; 3],
    tr: f64,
    data: Vec<f64>,
}

impl VolumeSeries {
    pub fn new(extents: [usize; 3], tr: f64, data: Vec<f64>) -> Result<Self> {
        if extents.contains(&0) {
            return Err(Error::shape(format!("zero volume extent in {extents:?}")));
        }
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::config(format!("TR must be positive, got {tr}")));
        }
        let n = extents.iter().product::<usize>();
        if !data.len().is_multiple_of(n) {
            return Err(Error::shape(format!(
                "{} values do not divide into frames of {n} voxels",
                data.len()
            )));
        }
        Ok(Self { extents, tr, data })
    }

    pub fn zeros(extents: [usize; 3], tr: f64, frames: usize) -> Result<Self> {
        let n = extents.iter().product::<usize>();
        Self::new(extents, tr, vec![0.0; n * frames])
    }

    pub fn from_frames(extents: [usize; 3], tr: f64, frames: &[Tensor]) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * extents.iter().product::<usize>());
        for (t, f) in frames.iter().enumerate() {
            f.expect_dims(&extents, &format!("frame {t}"))?;
            data.extend_from_slice(f.data());
        }
        Self::new(extents, tr, data)
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.voxels()
    }

    pub fn tr(&self) -> f64 {
        self.tr
    }

    pub fn grid(&self) -> Result<AcquisitionGrid> {
        AcquisitionGrid::new(self.tr, self.frames())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn volume(&self, t: usize) -> Tensor {
        Tensor::from_vec(&self.extents, self.frame(t).to_vec()).expect("frame matches extents")
    }

    pub fn volumes(&self) -> Vec<Tensor> {
        (0..self.frames()).map(|t| self.volume(t)).collect()
    }

    /// Frames `start..end` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.frames() {
            return Err(Error::shape(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames()
            )));
        }
        let n = self.voxels();
        Self::new(
            self.extents,
            self.tr,
            self.data[start * n..end * n].to_vec(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
