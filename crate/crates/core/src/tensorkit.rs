//! Channel-last tensor containers and bitmap-compressed channel storage.
//!
//! Activations are laid out W-fastest, then H, with the channel index
//! slowest, so one channel occupies a contiguous address range and can be
//! fetched as a unit. Weights follow the same idea: S, R, K, then the input
//! channel C slowest.

use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivationDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ActivationDims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn channel_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.channel_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeightDims {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl WeightDims {
    pub fn new(in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
        }
    }

    /// Elements belonging to one input channel (`K·R·S`).
    pub fn channel_len(&self) -> usize {
        self.out_channels * self.kernel_h * self.kernel_w
    }

    pub fn len(&self) -> usize {
        self.in_channels * self.channel_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_index(name: &str, value: usize, bound: usize) -> Result<()> {
    if value >= bound {
        return Err(Error::Index(format!("{name}={value} not below {bound}")));
    }
    Ok(())
}

/// Linear address of activation element `(c, h, w)`: `(c·H + h)·W + w`.
pub fn addr_activation(c: usize, h: usize, w: usize, dims: ActivationDims) -> Result<usize> {
    check_index("c", c, dims.channels)?;
    check_index("h", h, dims.height)?;
    check_index("w", w, dims.width)?;
    Ok((c * dims.height + h) * dims.width + w)
}

/// Linear address of weight element `(c, k, r, s)`: `((c·K + k)·R + r)·S + s`.
pub fn addr_weight(c: usize, k: usize, r: usize, s: usize, dims: WeightDims) -> Result<usize> {
    check_index("c", c, dims.in_channels)?;
    check_index("k", k, dims.out_channels)?;
    check_index("r", r, dims.kernel_h)?;
    check_index("s", s, dims.kernel_w)?;
    Ok(((c * dims.out_channels + k) * dims.kernel_h + r) * dims.kernel_w + s)
}

/// `C×H×W` tensor stored channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor<T> {
    dims: ActivationDims,
    data: Vec<T>,
}

impl<T: Copy> ActivationTensor<T> {
    pub fn new(dims: ActivationDims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Domain(format!(
                "activation data has {} elements, dims {}x{}x{} need {}",
                data.len(),
                dims.channels,
                dims.height,
                dims.width,
                dims.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: ActivationDims, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for c in 0..dims.channels {
            for h in 0..dims.height {
                for w in 0..dims.width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> ActivationDims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> Result<T> {
        Ok(self.data[addr_activation(c, h, w, self.dims)?])
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.dims.channel_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> ActivationTensor<U> {
        ActivationTensor {
            dims: self.dims,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

impl<T: Copy + Zero> ActivationTensor<T> {
    pub fn zeros(dims: ActivationDims) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.len()],
        }
    }
}

/// `C×K×R×S` convolution weights stored input-channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor<T> {
    dims: WeightDims,
    data: Vec<T>,
}

impl<T: Copy> WeightTensor<T> {
    pub fn new(dims: WeightDims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Domain(format!(
                "weight data has {} elements, dims need {}",
                data.len(),
                dims.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: WeightDims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for c in 0..dims.in_channels {
            for k in 0..dims.out_channels {
                for r in 0..dims.kernel_h {
                    for s in 0..dims.kernel_w {
                        data.push(f(c, k, r, s));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> WeightDims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, c: usize, k: usize, r: usize, s: usize) -> Result<T> {
        Ok(self.data[addr_weight(c, k, r, s, self.dims)?])
    }
}

/// Nonzero values of one channel plus a one-bit-per-element occupancy map.
///
/// Bit `i` of the bitmap covers element `i` of the channel and lives in byte
/// `i / 8` at bit position `i % 8`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CompressedChannel<V> {
    len: usize,
    bitmap: Vec<u8>,
    values: Vec<V>,
}

pub fn bitmap_bytes(len: usize) -> usize {
    len.div_ceil(8)
}

impl<V: Copy> CompressedChannel<V> {
    /// Rebuilds a channel from stored parts, checking the popcount invariant.
    pub fn from_parts(len: usize, bitmap: Vec<u8>, values: Vec<V>) -> Result<Self> {
        if bitmap.len() != bitmap_bytes(len) {
            return Err(Error::format(format!(
                "bitmap has {} bytes, {len} elements need {}",
                bitmap.len(),
                bitmap_bytes(len)
            )));
        }
        if !len.is_multiple_of(8) {
            let tail = bitmap[bitmap.len() - 1] >> (len % 8);
            if tail != 0 {
                return Err(Error::format("bitmap has bits set past the channel end"));
            }
        }
        let ones: usize = bitmap.iter().map(|b| b.count_ones() as usize).sum();
        if ones != values.len() {
            return Err(Error::format(format!(
                "bitmap marks {ones} nonzeros but {} values are stored",
                values.len()
            )));
        }
        Ok(Self { len, bitmap, values })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn bitmap(&self) -> &[u8] {
        &self.bitmap
    }

    pub fn values(&self) -> &[V] {
        &self.values
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.bitmap[i / 8] >> (i % 8) & 1 == 1
    }

    /// `(position, value)` for every stored nonzero, in position order.
    pub fn iter_nonzero(&self) -> impl Iterator<Item = (usize, V)> + '_ {
        (0..self.len)
            .filter(|&i| self.is_set(i))
            .zip(self.values.iter().copied())
    }

    /// Stored footprint in bytes given the width of one value.
    pub fn storage_bytes(&self, value_bytes: f64) -> f64 {
        self.bitmap.len() as f64 + self.values.len() as f64 * value_bytes
    }
}

/// Keeps only the nonzero elements of `values` together with their bitmap.
/// Zero is tested with exact equality.
pub fn compress_channel<V: Copy + Zero>(values: &[V]) -> CompressedChannel<V> {
    let mut bitmap = vec![0u8; bitmap_bytes(values.len())];
    let mut nonzero = Vec::new();
    for (i, v) in values.iter().enumerate() {
        if !v.is_zero() {
            bitmap[i / 8] |= 1 << (i % 8);
            nonzero.push(*v);
        }
    }
    CompressedChannel {
        len: values.len(),
        bitmap,
        values: nonzero,
    }
}

pub fn decompress_channel<V: Copy + Zero>(cc: &CompressedChannel<V>, n: usize) -> Result<Vec<V>> {
    if cc.len != n {
        return Err(Error::format(format!(
            "channel holds {} elements, expected {n}",
            cc.len
        )));
    }
    let mut out = vec![V::zero(); n];
    let mut values = cc.values.iter();
    for (i, slot) in out.iter_mut().enumerate() {
        if cc.is_set(i) {
            *slot = *values
                .next()
                .ok_or_else(|| Error::format("bitmap marks more nonzeros than stored values"))?;
        }
    }
    if values.next().is_some() {
        return Err(Error::format("more stored values than bitmap nonzeros"));
    }
    Ok(out)
}
