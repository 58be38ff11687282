//! Reference convolution on quantized operands.
//!
//! Stride 1, "same" zero padding, no dilation, no bias. Products of integer
//! codes are accumulated exactly into partial sums keyed by
//! `(input channel, activation scale group, weight scale group)`. Rescaling
//! walks those keys in sorted order, so any engine that produces the same
//! integer partial sums produces a bit-identical output no matter how the
//! work was split.

use std::ops::{AddAssign, Mul};

use num_traits::{NumCast, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::quant::{quantize_activation, quantize_weights, ActivationFn, NumberFormat, QuantizedTensor};
use crate::scalar::Scalar;
use crate::tensorkit::{ActivationDims, ActivationTensor, WeightDims, WeightTensor};

use super::PrecisionPair;

/// Accumulator domain of the partial sums: `i64` for integer codes, the
/// scalar itself for FP16 passthrough.
pub trait Accum: Copy + Zero + Mul<Output = Self> + AddAssign + PartialEq + ToPrimitive + Send + Sync {}

impl Accum for i64 {}
impl Accum for f32 {}
impl Accum for f64 {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry<A> {
    pub channel: u32,
    pub act_group: u32,
    pub weight_group: u32,
    pub sum: A,
}

impl<A> Entry<A> {
    fn key(&self) -> (u32, u32, u32) {
        (self.channel, self.act_group, self.weight_group)
    }
}

/// Un-rescaled partial sums for every output element.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialSums<A> {
    out_dims: ActivationDims,
    entries: Vec<Vec<Entry<A>>>,
}

impl<A: Accum> PartialSums<A> {
    pub fn new(out_dims: ActivationDims) -> Self {
        Self {
            out_dims,
            entries: vec![Vec::new(); out_dims.len()],
        }
    }

    pub fn out_dims(&self) -> ActivationDims {
        self.out_dims
    }

    pub fn entries(&self, out: usize) -> &[Entry<A>] {
        &self.entries[out]
    }

    /// Adds `v` to the entry for `(channel, ag, wg)` of output `out`. Entries
    /// of the channel being accumulated sit at the tail of the list.
    #[inline]
    pub fn add(&mut self, out: usize, channel: u32, ag: u32, wg: u32, v: A) {
        let list = &mut self.entries[out];
        for e in list.iter_mut().rev() {
            if e.channel != channel {
                break;
            }
            if e.act_group == ag && e.weight_group == wg {
                e.sum += v;
                return;
            }
        }
        list.push(Entry {
            channel,
            act_group: ag,
            weight_group: wg,
            sum: v,
        });
    }

    /// Combines the partial sums of two engines. The engines must have
    /// covered disjoint input channels.
    pub fn merge(mut self, other: PartialSums<A>) -> Result<Self> {
        if self.out_dims != other.out_dims {
            return Err(Error::Domain("merging partial sums of different shapes".into()));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(other.entries) {
            mine.extend(theirs);
        }
        Ok(self)
    }
}

/// Both conv operands in one accumulator domain, with per-element scale
/// group ids and the scale tables.
#[derive(Debug, Clone)]
pub struct ConvOperands<A, T> {
    pub(crate) act_dims: ActivationDims,
    pub(crate) weight_dims: WeightDims,
    pub(crate) act: Vec<A>,
    pub(crate) act_group: Vec<u32>,
    pub(crate) act_scales: Vec<T>,
    pub(crate) weight: Vec<A>,
    pub(crate) weight_group: Vec<u32>,
    pub(crate) weight_scales: Vec<T>,
}

fn check_shapes(a: ActivationDims, w: WeightDims) -> Result<()> {
    if a.channels != w.in_channels {
        return Err(Error::Domain(format!(
            "activation has {} channels, weights expect {}",
            a.channels, w.in_channels
        )));
    }
    if a.is_empty() || w.is_empty() {
        return Err(Error::Domain("empty conv operand".into()));
    }
    Ok(())
}

impl<T: Scalar> ConvOperands<i64, T> {
    pub fn from_quantized(
        act: &QuantizedTensor<T>,
        act_dims: ActivationDims,
        weight: &QuantizedTensor<T>,
        weight_dims: WeightDims,
    ) -> Result<Self> {
        check_shapes(act_dims, weight_dims)?;
        if act.len() != act_dims.len() || act.channel_len() != act_dims.channel_len() {
            return Err(Error::Domain("quantized activation does not match its dims".into()));
        }
        if weight.len() != weight_dims.len() || weight.channel_len() != weight_dims.channel_len() {
            return Err(Error::Domain("quantized weights do not match their dims".into()));
        }
        Ok(Self {
            act_dims,
            weight_dims,
            act: act.codes().iter().map(|&c| c as i64).collect(),
            act_group: (0..act.len()).map(|i| act.group_of(i) as u32).collect(),
            act_scales: act.scales().to_vec(),
            weight: weight.codes().iter().map(|&c| c as i64).collect(),
            weight_group: (0..weight.len()).map(|i| weight.group_of(i) as u32).collect(),
            weight_scales: weight.scales().to_vec(),
        })
    }
}

impl<T: Scalar + Accum> ConvOperands<T, T> {
    pub fn from_real(act: &[T], act_dims: ActivationDims, weight: &[T], weight_dims: WeightDims) -> Result<Self> {
        check_shapes(act_dims, weight_dims)?;
        if act.len() != act_dims.len() || weight.len() != weight_dims.len() {
            return Err(Error::Domain("real conv operand does not match its dims".into()));
        }
        Ok(Self {
            act_dims,
            weight_dims,
            act: act.to_vec(),
            act_group: vec![0; act.len()],
            act_scales: vec![T::one()],
            weight: weight.to_vec(),
            weight_group: vec![0; weight.len()],
            weight_scales: vec![T::one()],
        })
    }
}

impl<A: Accum, T: Scalar> ConvOperands<A, T> {
    pub fn act_dims(&self) -> ActivationDims {
        self.act_dims
    }

    pub fn weight_dims(&self) -> WeightDims {
        self.weight_dims
    }

    pub fn out_dims(&self) -> ActivationDims {
        ActivationDims::new(self.weight_dims.out_channels, self.act_dims.height, self.act_dims.width)
    }

    pub(crate) fn pads(&self) -> (usize, usize) {
        ((self.weight_dims.kernel_h - 1) / 2, (self.weight_dims.kernel_w - 1) / 2)
    }

    /// Activation elements of channel `c` in the accumulator domain.
    pub fn act_channel(&self, c: usize) -> &[A] {
        let n = self.act_dims.channel_len();
        &self.act[c * n..(c + 1) * n]
    }

    /// Gathers every product of input channel `c` into `partials`, visiting
    /// all activation positions whether zero or not.
    pub fn accumulate_dense(&self, c: usize, partials: &mut PartialSums<A>) {
        let ActivationDims { height, width, .. } = self.act_dims;
        let WeightDims {
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } = self.weight_dims;
        let (pad_h, pad_w) = self.pads();
        let plane = height * width;
        let ch = c as u32;
        for k in 0..out_channels {
            let w_base = (c * out_channels + k) * kernel_h * kernel_w;
            for oh in 0..height {
                for ow in 0..width {
                    let o = (k * height + oh) * width + ow;
                    for r in 0..kernel_h {
                        let Some(ih) = (oh + r).checked_sub(pad_h).filter(|v| *v < height) else {
                            continue;
                        };
                        for s in 0..kernel_w {
                            let Some(iw) = (ow + s).checked_sub(pad_w).filter(|v| *v < width) else {
                                continue;
                            };
                            let ai = c * plane + ih * width + iw;
                            let wi = w_base + r * kernel_w + s;
                            partials.add(
                                o,
                                ch,
                                self.act_group[ai],
                                self.weight_group[wi],
                                self.act[ai] * self.weight[wi],
                            );
                        }
                    }
                }
            }
        }
    }

    /// Sums all input channels on one engine.
    pub fn accumulate_all(&self) -> PartialSums<A> {
        let mut partials = PartialSums::new(self.out_dims());
        for c in 0..self.act_dims.channels {
            self.accumulate_dense(c, &mut partials);
        }
        partials
    }

    /// Applies scales to the partial sums in key order, then the activation.
    pub fn rescale(&self, partials: &PartialSums<A>, activation: ActivationFn) -> Result<ActivationTensor<T>> {
        if partials.out_dims != self.out_dims() {
            return Err(Error::Domain("partial sums do not match conv output".into()));
        }
        let mut scratch = Vec::new();
        let data = partials
            .entries
            .iter()
            .map(|list| {
                scratch.clear();
                scratch.extend(list.iter().filter(|e| e.sum != A::zero()).copied());
                scratch.sort_unstable_by_key(Entry::key);
                let acc = scratch.iter().fold(T::zero(), |acc, e| {
                    let sum: T = <T as NumCast>::from(e.sum).expect("partial sum fits the scalar");
                    acc + sum * self.act_scales[e.act_group as usize] * self.weight_scales[e.weight_group as usize]
                });
                activation.apply(acc)
            })
            .collect();
        ActivationTensor::new(self.out_dims(), data)
    }
}

/// Operands prepared for a given precision pair.
#[derive(Debug, Clone)]
pub enum PreparedConv<T> {
    Int(ConvOperands<i64, T>),
    Real(ConvOperands<T, T>),
}

impl<T: Scalar + Accum> PreparedConv<T> {
    /// Quantizes both operands; if either side is FP16 the other is
    /// dequantized and the conv runs on reals.
    pub fn new(act: &ActivationTensor<T>, w: &WeightTensor<T>, p: &PrecisionPair) -> Result<Self> {
        check_shapes(act.dims(), w.dims())?;
        match (p.act, p.weight) {
            (NumberFormat::Quant(af), NumberFormat::Quant(wf)) => {
                let aq = quantize_activation(act, &af)?;
                let wq = quantize_weights(w, &wf)?;
                Ok(PreparedConv::Int(ConvOperands::from_quantized(
                    &aq,
                    act.dims(),
                    &wq,
                    w.dims(),
                )?))
            }
            (af, wf) => {
                let a = match af {
                    NumberFormat::Fp16 => act.data().to_vec(),
                    NumberFormat::Quant(f) => quantize_activation(act, &f)?.dequantize(),
                };
                let wv = match wf {
                    NumberFormat::Fp16 => w.data().to_vec(),
                    NumberFormat::Quant(f) => quantize_weights(w, &f)?.dequantize(),
                };
                Ok(PreparedConv::Real(ConvOperands::from_real(
                    &a,
                    act.dims(),
                    &wv,
                    w.dims(),
                )?))
            }
        }
    }

    pub fn run(&self, activation: ActivationFn) -> Result<ActivationTensor<T>> {
        match self {
            PreparedConv::Int(ops) => ops.rescale(&ops.accumulate_all(), activation),
            PreparedConv::Real(ops) => ops.rescale(&ops.accumulate_all(), activation),
        }
    }
}

/// Quantizes `act` and `w` per `p`, convolves in exact integer arithmetic,
/// rescales and applies `activation`.
pub fn conv_exec_quantized<T: Scalar + Accum>(
    act: &ActivationTensor<T>,
    w: &WeightTensor<T>,
    p: &PrecisionPair,
    activation: ActivationFn,
) -> Result<ActivationTensor<T>> {
    PreparedConv::new(act, w, p)?.run(activation)
}

/// Convolution on already-quantized operands.
pub fn conv_quantized_codes<T: Scalar>(
    act: &QuantizedTensor<T>,
    act_dims: ActivationDims,
    w: &QuantizedTensor<T>,
    weight_dims: WeightDims,
    activation: ActivationFn,
) -> Result<ActivationTensor<T>> {
    let ops = ConvOperands::from_quantized(act, act_dims, w, weight_dims)?;
    ops.rescale(&ops.accumulate_all(), activation)
}

/// Real-valued convolution, no activation.
pub fn conv_reference<T: Scalar + Accum>(
    act: &ActivationTensor<T>,
    w: &WeightTensor<T>,
) -> Result<ActivationTensor<T>> {
    let ops = ConvOperands::from_real(act.data(), act.dims(), w.data(), w.dims())?;
    ops.rescale(&ops.accumulate_all(), ActivationFn::None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{Granularity, QuantFormat, ScaleKind};

    fn per_tensor(bits: u8) -> QuantFormat {
        QuantFormat::new(bits, true, Granularity::PerTensor, ScaleKind::Real).unwrap()
    }

    #[test]
    fn single_mac_rescale() {
        let a = QuantizedTensor::from_parts(vec![2], vec![0.5], per_tensor(4), 1).unwrap();
        let w = QuantizedTensor::from_parts(vec![3], vec![1.0], per_tensor(4), 1).unwrap();
        let out = conv_quantized_codes(
            &a,
            ActivationDims::new(1, 1, 1),
            &w,
            WeightDims::new(1, 1, 1, 1),
            ActivationFn::None,
        )
        .unwrap();
        assert_eq!(out.data(), &[3.0]);
    }

    #[test]
    fn identity_kernel_returns_dequantized_input() {
        let dims = ActivationDims::new(1, 3, 3);
        let act = ActivationTensor::from_fn(dims, |_, h, w| (h * 3 + w) as f64 * 0.37 - 1.0);
        let w = WeightTensor::new(WeightDims::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let p = PrecisionPair::uniform(NumberFormat::Quant(QuantFormat::int4_vsq()));
        let out = conv_exec_quantized(&act, &w, &p, ActivationFn::None).unwrap();
        let deq = quantize_activation(&act, &QuantFormat::int4_vsq())
            .unwrap()
            .dequantize();
        assert_eq!(out.data(), deq.as_slice());
    }

    #[test]
    fn fp16_passthrough_matches_reference() {
        let dims = ActivationDims::new(3, 5, 4);
        let act = ActivationTensor::from_fn(dims, |c, h, w| ((c * 7 + h * 3 + w) % 11) as f64 * 0.1 - 0.4);
        let w = WeightTensor::from_fn(WeightDims::new(3, 2, 3, 3), |c, k, r, s| {
            ((c + 2 * k + 3 * r + 5 * s) % 7) as f64 * 0.05 - 0.15
        });
        let a = conv_exec_quantized(&act, &w, &PrecisionPair::fp16(), ActivationFn::None).unwrap();
        let b = conv_reference(&act, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let act = ActivationTensor::<f64>::zeros(ActivationDims::new(2, 2, 2));
        let w = WeightTensor::new(WeightDims::new(3, 1, 1, 1), vec![1.0; 3]).unwrap();
        assert!(matches!(
            conv_exec_quantized(&act, &w, &PrecisionPair::fp16(), ActivationFn::None),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn integer_partials_are_linear() {
        // conv(a1 + a2) == conv(a1) + conv(a2) before rescaling
        let adims = ActivationDims::new(2, 4, 4);
        let wdims = WeightDims::new(2, 2, 3, 3);
        let fmt = per_tensor(8);
        let codes1: Vec<i32> = (0..adims.len()).map(|i| (i as i32 * 7) % 9 - 4).collect();
        let codes2: Vec<i32> = (0..adims.len()).map(|i| (i as i32 * 5) % 7 - 3).collect();
        let sum: Vec<i32> = codes1.iter().zip(&codes2).map(|(a, b)| a + b).collect();
        let wc: Vec<i32> = (0..wdims.len()).map(|i| (i as i32 * 3) % 5 - 2).collect();
        let w = QuantizedTensor::from_parts(wc, vec![1.0], fmt, wdims.channel_len()).unwrap();
        let ops = |codes: Vec<i32>| {
            let a = QuantizedTensor::from_parts(codes, vec![1.0], fmt, adims.channel_len()).unwrap();
            ConvOperands::from_quantized(&a, adims, &w, wdims)
                .unwrap()
                .accumulate_all()
        };
        let (p1, p2, ps) = (ops(codes1), ops(codes2), ops(sum));
        for o in 0..ps.out_dims().len() {
            let total = |p: &PartialSums<i64>| p.entries(o).iter().map(|e| e.sum).sum::<i64>();
            assert_eq!(total(&ps), total(&p1) + total(&p2));
        }
    }
}
