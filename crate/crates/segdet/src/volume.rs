//! Dense `(d, y, x)` row-major volumes and the SVOL file format.
//!
//! SVOL layout, all little-endian: magic `SVOL` (4 bytes), then D, H, W as
//! u32, then `D*H*W` IEEE-754 f32 values. Masks use values {0.0, 1.0}.
//! Reads are strict: wrong magic, truncation, trailing bytes or dimension
//! overflow are format errors naming the offending byte offset.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(d: usize, h: usize, w: usize) -> Volume {
        Volume { d, h, w, data: vec![0.0; d * h * w] }
    }

    pub fn new(d: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Volume> {
        if data.len() != d * h * w {
            return Err(Error::Dim(format!(
                "volume dims {d}x{h}x{w} imply {} voxels, got {}",
                d * h * w,
                data.len()
            )));
        }
        Ok(Volume { d, h, w, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.h, self.w)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, d: usize, y: usize, x: usize) -> f32 {
        self.data[(d * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, d: usize, y: usize, x: usize, v: f32) {
        self.data[(d * self.h + y) * self.w + x] = v;
    }

    /// One slice as a `[1, 1, H, W]` tensor (network input layout).
    pub fn slice_tensor(&self, d: usize) -> Tensor {
        let start = d * self.h * self.w;
        Tensor {
            shape: vec![1, 1, self.h, self.w],
            data: self.data[start..start + self.h * self.w].to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    /// The whole volume as a `[1, 1, D, H, W]` tensor.
    pub fn as_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![1, 1, self.d, self.h, self.w],
            data: self.data.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Voxels with value > 0.5, as a count.
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    /// Mirror along the x axis.
    pub fn flip_x(&self) -> Volume {
        let mut out = Volume::zeros(self.d, self.h, self.w);
        for d in 0..self.d {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(d, y, x, self.at(d, y, self.w - 1 - x));
                }
            }
        }
        out
    }
}

const MAGIC: &[u8; 4] = b"SVOL";
/// Dimension product cap: keeps the payload under 2^32 bytes.
const MAX_VOXELS: u64 = (u32::MAX / 4) as u64;

pub fn write_svol(path: &Path, vol: &Volume) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 4 * vol.numel());
    bytes.extend_from_slice(MAGIC);
    for dim in [vol.d, vol.h, vol.w] {
        let v = u32::try_from(dim).map_err(|_| Error::Format(format!("dimension {dim} overflows u32")))?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in &vol.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_svol(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    let ctx = path.display();
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{ctx}: bad magic at byte offset 0")));
    }
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "{ctx}: truncated header at byte offset {}", bytes.len()
        )));
    }
    let mut dims = [0usize; 3];
    for (i, dim) in dims.iter_mut().enumerate() {
        let off = 4 + 4 * i;
        *dim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let [d, h, w] = dims;
    let voxels = d as u64 * h as u64 * w as u64;
    if voxels > MAX_VOXELS {
        return Err(Error::Format(format!(
            "{ctx}: dimension product {voxels} overflows at byte offset 4"
        )));
    }
    let expected = 16 + 4 * voxels as usize;
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "{ctx}: truncated payload at byte offset {} (expected {expected} bytes)",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{ctx}: {} trailing bytes at byte offset {expected}",
            bytes.len() - expected
        )));
    }
    let mut data = Vec::with_capacity(voxels as usize);
    for i in 0..voxels as usize {
        let off = 16 + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    Volume::new(d, h, w, data)
}
