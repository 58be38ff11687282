//! Uniform symmetric quantization with per-tensor, per-channel and per-block
//! scale factors, scale encodings, activation functions and quality metrics.
//!
//! For a group `X` the scale is `s = max|X| / q_max` and codes are
//! `round(X / s)` (ties to even) clamped to the code range. Signed formats
//! use the symmetric range `[-q_max, q_max]`; the most negative two's
//! complement code is never produced.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorkit::{ActivationTensor, WeightTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    PerTensor,
    PerChannel,
    /// Consecutive elements within one channel share a scale. The last block
    /// of a channel may be short; blocks never straddle channels.
    PerBlock(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleKind {
    /// Scale kept at full precision (stored as 16 bits).
    Real,
    /// Shared power-of-two exponent, rounded up so the group never overflows.
    PowerOfTwo,
    /// Nearest FP8 E4M3 value, saturating at 448.
    Fp8E4M3,
}

impl ScaleKind {
    /// Bits needed to store one scale factor.
    pub fn storage_bits(self) -> u32 {
        match self {
            ScaleKind::Real => 16,
            ScaleKind::PowerOfTwo | ScaleKind::Fp8E4M3 => 8,
        }
    }

    pub fn encode(self, s: f64) -> Result<f64> {
        match self {
            ScaleKind::Real => {
                if s > 0.0 && s.is_finite() {
                    Ok(s)
                } else {
                    Err(Error::Domain(format!("scale must be positive, got {s}")))
                }
            }
            ScaleKind::PowerOfTwo => encode_scale_pow2(s),
            ScaleKind::Fp8E4M3 => encode_scale_fp8(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantFormat {
    pub bits: u8,
    pub signed: bool,
    pub granularity: Granularity,
    pub scale_kind: ScaleKind,
}

impl QuantFormat {
    pub fn new(bits: u8, signed: bool, granularity: Granularity, scale_kind: ScaleKind) -> Result<Self> {
        let fmt = Self {
            bits,
            signed,
            granularity,
            scale_kind,
        };
        fmt.validate()?;
        Ok(fmt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::Config(format!("unsupported bit width {}", self.bits)));
        }
        if self.granularity == Granularity::PerBlock(0) {
            return Err(Error::Config("block size must be at least 1".into()));
        }
        Ok(())
    }

    /// Largest code magnitude: `2^(b-1) - 1` signed, `2^b - 1` unsigned.
    pub fn q_max(&self) -> i32 {
        if self.signed {
            (1 << (self.bits - 1)) - 1
        } else {
            (1 << self.bits) - 1
        }
    }

    pub fn code_range(&self) -> (i32, i32) {
        let q = self.q_max();
        if self.signed {
            (-q, q)
        } else {
            (0, q)
        }
    }

    /// Number of distinct codes the bit width can represent.
    pub fn representable_codes(&self) -> usize {
        1 << self.bits
    }

    /// 8-bit, one real scale per channel.
    pub fn int8() -> Self {
        Self {
            bits: 8,
            signed: true,
            granularity: Granularity::PerChannel,
            scale_kind: ScaleKind::Real,
        }
    }

    /// 8-bit codes with a shared power-of-two scale per 32 elements.
    pub fn mxint8() -> Self {
        Self {
            bits: 8,
            signed: true,
            granularity: Granularity::PerBlock(32),
            scale_kind: ScaleKind::PowerOfTwo,
        }
    }

    pub fn int4() -> Self {
        Self {
            bits: 4,
            signed: true,
            granularity: Granularity::PerChannel,
            scale_kind: ScaleKind::Real,
        }
    }

    /// 4-bit codes with one real scale per 16-element vector.
    pub fn int4_vsq() -> Self {
        Self {
            bits: 4,
            signed: true,
            granularity: Granularity::PerBlock(16),
            scale_kind: ScaleKind::Real,
        }
    }

    /// 4-bit codes with one FP8 E4M3 scale per 16-element block.
    pub fn int4_fp8s() -> Self {
        Self {
            bits: 4,
            signed: true,
            granularity: Granularity::PerBlock(16),
            scale_kind: ScaleKind::Fp8E4M3,
        }
    }

    pub fn uint4_fp8s() -> Self {
        Self {
            signed: false,
            ..Self::int4_fp8s()
        }
    }

    pub fn with_granularity(self, granularity: Granularity) -> Self {
        Self { granularity, ..self }
    }
}

/// Storage/compute format of one tensor: FP16 passthrough or a quantized format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NumberFormat {
    Fp16,
    Quant(QuantFormat),
}

impl NumberFormat {
    pub const NAMED: [&'static str; 7] = ["fp16", "int8", "mxint8", "int4", "int4-vsq", "int4-fp8s", "uint4-fp8s"];

    pub fn bits(&self) -> u32 {
        match self {
            NumberFormat::Fp16 => 16,
            NumberFormat::Quant(q) => q.bits as u32,
        }
    }

    pub fn quant(&self) -> Option<&QuantFormat> {
        match self {
            NumberFormat::Fp16 => None,
            NumberFormat::Quant(q) => Some(q),
        }
    }

    /// Preset name, if this format matches one.
    pub fn name(&self) -> Option<&'static str> {
        Self::NAMED
            .iter()
            .copied()
            .find(|n| n.parse::<NumberFormat>().ok().as_ref() == Some(self))
    }
}

impl FromStr for NumberFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let q = match s {
            "fp16" => return Ok(NumberFormat::Fp16),
            "int8" => QuantFormat::int8(),
            "mxint8" => QuantFormat::mxint8(),
            "int4" => QuantFormat::int4(),
            "int4-vsq" => QuantFormat::int4_vsq(),
            "int4-fp8s" => QuantFormat::int4_fp8s(),
            "uint4-fp8s" => QuantFormat::uint4_fp8s(),
            other => return Err(Error::Config(format!("unknown number format {other:?}"))),
        };
        Ok(NumberFormat::Quant(q))
    }
}

impl TryFrom<String> for NumberFormat {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NumberFormat> for String {
    fn from(f: NumberFormat) -> String {
        f.to_string()
    }
}

impl fmt::Display for NumberFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.name(), self) {
            (Some(n), _) => f.write_str(n),
            (None, NumberFormat::Fp16) => f.write_str("fp16"),
            (None, NumberFormat::Quant(q)) => write!(
                f,
                "{}int{}/{:?}/{:?}",
                if q.signed { "" } else { "u" },
                q.bits,
                q.granularity,
                q.scale_kind
            ),
        }
    }
}

/// Integer codes, one scale per group, and the format that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<T> {
    codes: Vec<i32>,
    scales: Vec<T>,
    format: QuantFormat,
    channel_len: usize,
}

impl<T: Scalar> QuantizedTensor<T> {
    /// Assembles a tensor from codes and scales produced elsewhere.
    pub fn from_parts(codes: Vec<i32>, scales: Vec<T>, format: QuantFormat, channel_len: usize) -> Result<Self> {
        format.validate()?;
        if codes.is_empty() || channel_len == 0 || !codes.len().is_multiple_of(channel_len) {
            return Err(Error::Domain(format!(
                "{} codes do not split into channels of {channel_len}",
                codes.len()
            )));
        }
        let (lo, hi) = format.code_range();
        if let Some(c) = codes.iter().find(|c| !(lo..=hi).contains(*c)) {
            return Err(Error::Domain(format!("code {c} outside [{lo}, {hi}]")));
        }
        let groups = group_ranges(format.granularity, codes.len(), channel_len).len();
        if scales.len() != groups {
            return Err(Error::Domain(format!(
                "{} scales given, format needs {groups}",
                scales.len()
            )));
        }
        if scales.iter().any(|s| s.is_nan() || *s <= T::zero()) {
            return Err(Error::Domain("scales must be positive".into()));
        }
        Ok(Self {
            codes,
            scales,
            format,
            channel_len,
        })
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn format(&self) -> &QuantFormat {
        &self.format
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn channel_len(&self) -> usize {
        self.channel_len
    }

    /// Scale group of element `i`.
    pub fn group_of(&self, i: usize) -> usize {
        group_index(self.format.granularity, self.channel_len, i)
    }

    pub fn scale_of(&self, i: usize) -> T {
        self.scales[self.group_of(i)]
    }

    pub fn dequantize(&self) -> Vec<T> {
        dequantize(self)
    }
}

fn group_index(granularity: Granularity, channel_len: usize, i: usize) -> usize {
    match granularity {
        Granularity::PerTensor => 0,
        Granularity::PerChannel => i / channel_len,
        Granularity::PerBlock(b) => {
            let per_channel = channel_len.div_ceil(b);
            (i / channel_len) * per_channel + (i % channel_len) / b
        }
    }
}

/// Contiguous element ranges that share one scale, in group order.
fn group_ranges(granularity: Granularity, len: usize, channel_len: usize) -> Vec<std::ops::Range<usize>> {
    match granularity {
        Granularity::PerTensor => std::iter::once(0..len).collect(),
        Granularity::PerChannel => (0..len).step_by(channel_len).map(|s| s..s + channel_len).collect(),
        Granularity::PerBlock(b) => {
            let mut out = Vec::new();
            for start in (0..len).step_by(channel_len) {
                let end = start + channel_len;
                let mut s = start;
                while s < end {
                    out.push(s..(s + b).min(end));
                    s += b;
                }
            }
            out
        }
    }
}

/// Quantizes `x`, whose channels are `channel_len` consecutive elements.
pub fn quantize<T: Scalar>(x: &[T], channel_len: usize, fmt: &QuantFormat) -> Result<QuantizedTensor<T>> {
    fmt.validate()?;
    if x.is_empty() {
        return Err(Error::Domain("cannot quantize an empty tensor".into()));
    }
    if channel_len == 0 || !x.len().is_multiple_of(channel_len) {
        return Err(Error::Domain(format!(
            "{} elements do not split into channels of {channel_len}",
            x.len()
        )));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite input {bad}")));
    }
    if !fmt.signed {
        if let Some(neg) = x.iter().find(|v| **v < T::zero()) {
            return Err(Error::Domain(format!("negative input {neg} for an unsigned format")));
        }
    }

    let (lo, hi) = fmt.code_range();
    let q_max = T::from_i32(fmt.q_max()).unwrap();
    let (lo_t, hi_t) = (T::from_i32(lo).unwrap(), T::from_i32(hi).unwrap());
    let mut codes = vec![0i32; x.len()];
    let mut scales = Vec::new();
    for range in group_ranges(fmt.granularity, x.len(), channel_len) {
        let group = &x[range.clone()];
        let max_abs = group.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if max_abs == T::zero() {
            scales.push(T::one());
            continue;
        }
        let raw = max_abs / q_max;
        let scale = match fmt.scale_kind {
            ScaleKind::Real => raw,
            kind => T::from_f64_lossy(kind.encode(raw.as_f64())?),
        };
        for (code, v) in codes[range].iter_mut().zip(group) {
            let q = (*v / scale).round_half_even().max(lo_t).min(hi_t);
            *code = q.to_i32().unwrap();
        }
        scales.push(scale);
    }
    Ok(QuantizedTensor {
        codes,
        scales,
        format: *fmt,
        channel_len,
    })
}

pub fn dequantize<T: Scalar>(q: &QuantizedTensor<T>) -> Vec<T> {
    q.codes
        .iter()
        .enumerate()
        .map(|(i, &c)| T::from_i32(c).unwrap() * q.scale_of(i))
        .collect()
}

/// Quantizes an activation tensor; channels are the `H·W` planes.
pub fn quantize_activation<T: Scalar>(act: &ActivationTensor<T>, fmt: &QuantFormat) -> Result<QuantizedTensor<T>> {
    quantize(act.data(), act.dims().channel_len(), fmt)
}

/// Quantizes weights; a channel is all `K·R·S` weights of one input channel.
pub fn quantize_weights<T: Scalar>(w: &WeightTensor<T>, fmt: &QuantFormat) -> Result<QuantizedTensor<T>> {
    quantize(w.data(), w.dims().channel_len(), fmt)
}

const E4M3_MAX: f64 = 448.0;
const E4M3_MIN_NORMAL: f64 = 1.0 / 64.0;
const E4M3_SUBNORMAL_STEP: f64 = 1.0 / 512.0;

/// Largest `e` with `2^e <= s`, for positive finite `s`.
fn floor_log2(s: f64) -> i32 {
    let mut e = s.log2().floor() as i32;
    while 2f64.powi(e) > s {
        e -= 1;
    }
    while 2f64.powi(e + 1) <= s {
        e += 1;
    }
    e
}

/// Nearest FP8 E4M3 value to `s` (ties to even mantissa), saturating at 448.
/// Values below the smallest subnormal map to that subnormal so the scale
/// stays positive.
pub fn encode_scale_fp8(s: f64) -> Result<f64> {
    if s.is_nan() || s <= 0.0 {
        return Err(Error::Domain(format!("scale must be positive, got {s}")));
    }
    if s >= E4M3_MAX {
        return Ok(E4M3_MAX);
    }
    let step = if s < E4M3_MIN_NORMAL {
        E4M3_SUBNORMAL_STEP
    } else {
        // three mantissa bits: eight steps per binade
        2f64.powi(floor_log2(s) - 3)
    };
    let q = (s / step).round_ties_even().max(1.0) * step;
    Ok(q.min(E4M3_MAX))
}

/// `2^ceil(log2 s)`: the smallest power of two not below `s`.
pub fn encode_scale_pow2(s: f64) -> Result<f64> {
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::Domain(format!("scale must be positive, got {s}")));
    }
    let e = floor_log2(s);
    let p = 2f64.powi(e);
    Ok(if p == s { p } else { 2f64.powi(e + 1) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationFn {
    Silu,
    Relu,
    #[default]
    None,
}

impl ActivationFn {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            ActivationFn::Silu => silu(x),
            ActivationFn::Relu => relu(x),
            ActivationFn::None => x,
        }
    }

    /// True when every output is non-negative.
    pub fn non_negative(self) -> bool {
        self == ActivationFn::Relu
    }
}

/// `x / (1 + e^-x)`
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Distinct code values present versus codes representable at the bit width.
///
/// Counts across all scale groups; for a per-tensor format this is the
/// level utilization of the single grid.
pub fn code_utilization<T: Scalar>(q: &QuantizedTensor<T>) -> (usize, usize) {
    let used: BTreeSet<i32> = q.codes.iter().copied().collect();
    (used.len(), q.format.representable_codes())
}

/// Signal-to-quantization-noise ratio in dB. Exact reconstruction returns
/// `f64::INFINITY`.
pub fn sqnr<T: Scalar>(reference: &[T], approx: &[T]) -> Result<f64> {
    if reference.len() != approx.len() {
        return Err(Error::Domain(format!(
            "sqnr shape mismatch: {} vs {}",
            reference.len(),
            approx.len()
        )));
    }
    let (signal, noise) = reference.iter().zip(approx).fold((0.0f64, 0.0f64), |(s, n), (r, a)| {
        let r = r.as_f64();
        let e = r - a.as_f64();
        (s + r * r, n + e * e)
    });
    if signal == 0.0 {
        return Err(Error::Domain("sqnr reference is all zero".into()));
    }
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}
