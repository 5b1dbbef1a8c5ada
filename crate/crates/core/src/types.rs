//! Shared value types: raw cubes, token lattices, masks, skip payloads.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A multi-date stack of co-registered chips, `[T, H, W, B]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeCube {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl TimeCube {
    /// Validates the payload length, finiteness, and the `[0, 1]` range.
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let cube = Self::from_raw(shape, data)?;
        if let Some(v) = cube.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("cube value {v} outside [0, 1]")));
        }
        Ok(cube)
    }

    /// Like [`TimeCube::new`] but without the range check (model outputs).
    pub fn from_raw(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("cube shape {shape:?} vs {} values", data.len())));
        }
        if shape[0] == 0 || shape[3] == 0 {
            return Err(Error::Invalid("cube needs at least one timestep and one band".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("cube contains non-finite values".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn timesteps(&self) -> usize {
        self.shape[0]
    }
    pub fn height(&self) -> usize {
        self.shape[1]
    }
    pub fn width(&self) -> usize {
        self.shape[2]
    }
    pub fn bands(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn index(&self, t: usize, y: usize, x: usize, b: usize) -> usize {
        ((t * self.shape[1] + y) * self.shape[2] + x) * self.shape[3] + b
    }

    pub fn get(&self, t: usize, y: usize, x: usize, b: usize) -> f32 {
        self.data[self.index(t, y, x, b)]
    }

    /// Frames `ts`, in order, as a new cube.
    pub fn select_frames(&self, ts: &[usize]) -> Self {
        let frame = self.shape[1] * self.shape[2] * self.shape[3];
        let mut data = Vec::with_capacity(ts.len() * frame);
        for &t in ts {
            data.extend_from_slice(&self.data[t * frame..(t + 1) * frame]);
        }
        Self {
            shape: [ts.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.to_vec(), self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected rank-4 tensor, got {s:?}")));
        }
        Self::from_raw([s[0], s[1], s[2], s[3]], t.data().iter().map(|&v| v as f32).collect())
    }
}

/// A token lattice `[T, Gh, Gw, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid(Tensor);

impl TokenGrid {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 4 {
            return Err(Error::Shape(format!("token grid must be rank 4, got {:?}", tensor.shape())));
        }
        Ok(Self(tensor))
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self(Tensor::zeros(&dims))
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.0.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn token(&self, t: usize, i: usize, j: usize) -> &[f64] {
        let [_, gh, gw, c] = self.dims();
        let off = ((t * gh + i) * gw + j) * c;
        &self.0.data()[off..off + c]
    }
}

/// Boolean occupancy grid `[T, Gh, Gw]` of masked tokens (true = masked).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    dims: [usize; 3],
    mask: Vec<bool>,
    seed: u64,
}

impl MaskSpec {
    pub fn from_bits(dims: [usize; 3], mask: Vec<bool>, seed: u64) -> Result<Self> {
        if dims.iter().product::<usize>() != mask.len() {
            return Err(Error::Shape(format!("mask dims {dims:?} vs {} entries", mask.len())));
        }
        Ok(Self { dims, mask, seed })
    }

    pub fn none(dims: [usize; 3]) -> Self {
        Self {
            dims,
            mask: vec![false; dims.iter().product()],
            seed: 0,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.mask
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_masked(&self, t: usize, i: usize, j: usize) -> bool {
        self.mask[(t * self.dims[1] + i) * self.dims[2] + j]
    }

    pub fn set(&mut self, t: usize, i: usize, j: usize, value: bool) {
        self.mask[(t * self.dims[1] + i) * self.dims[2] + j] = value;
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn slice_count(&self, t: usize) -> usize {
        let n = self.dims[1] * self.dims[2];
        self.mask[t * n..(t + 1) * n].iter().filter(|m| **m).count()
    }

    /// Masked tokens / total tokens.
    pub fn ratio_actual(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.masked_count() as f64 / self.mask.len() as f64
        }
    }

    /// Compact bitmap: `u16 T, u16 Gh, u16 Gw, u64 seed` (little-endian), then
    /// the mask bits packed LSB-first in row-major order.
    pub fn to_bitmap(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.mask.len().div_ceil(8));
        for d in self.dims {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        let mut bytes = vec![0u8; self.mask.len().div_ceil(8)];
        for (i, &m) in self.mask.iter().enumerate() {
            if m {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bytes);
        out
    }

    pub fn from_bitmap(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 {
            return Err(Error::Format("mask bitmap header truncated".into()));
        }
        let d = |i: usize| u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]) as usize;
        let dims = [d(0), d(1), d(2)];
        let seed = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let n: usize = dims.iter().product();
        let payload = &bytes[14..];
        if payload.len() != n.div_ceil(8) {
            return Err(Error::Format(format!(
                "mask bitmap payload is {} bytes, expected {}",
                payload.len(),
                n.div_ceil(8)
            )));
        }
        let mask = (0..n).map(|i| payload[i / 8] & (1 << (i % 8)) != 0).collect();
        Ok(Self { dims, mask, seed })
    }
}

/// Encoder outputs at each resolution, finest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageFeatures {
    pub features: Vec<TokenGrid>,
}

impl StageFeatures {
    /// Checks that consecutive entries halve the lattice and double the width.
    pub fn check(&self) -> Result<()> {
        for pair in self.features.windows(2) {
            let [t0, h0, w0, c0] = pair[0].dims();
            let [t1, h1, w1, c1] = pair[1].dims();
            if t0 != t1 || h0 != 2 * h1 || w0 != 2 * w1 || c1 != 2 * c0 {
                return Err(Error::Shape(format!(
                    "stage features {:?} -> {:?} do not halve/double",
                    pair[0].dims(),
                    pair[1].dims()
                )));
            }
        }
        Ok(())
    }
}
