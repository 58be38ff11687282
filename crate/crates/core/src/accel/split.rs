//! Convolution split across a dense and a sparse engine.
//!
//! Dense channels run the ordinary loop nest. Sparse channels are compressed
//! and only their nonzero activations are scattered into the outputs they
//! touch. Both engines produce integer partial sums keyed by channel and
//! scale group, so merging and rescaling gives the monolithic result exactly.

use crate::error::{Error, Result};
use crate::netspec::conv::{Accum, ConvOperands, PartialSums, PreparedConv};
use crate::netspec::PrecisionPair;
use crate::quant::ActivationFn;
use crate::scalar::Scalar;
use crate::sparsity::ChannelClassification;
use crate::tensorkit::{
    compress_channel, ActivationDims, ActivationTensor, CompressedChannel, WeightDims, WeightTensor,
};

fn check_partition(cls: &ChannelClassification, channels: usize) -> Result<()> {
    let mut seen = vec![false; channels];
    for &c in cls.dense.iter().chain(&cls.sparse) {
        if c >= channels || std::mem::replace(&mut seen[c], true) {
            return Err(Error::Domain(format!(
                "classification does not partition {channels} input channels"
            )));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Domain(format!(
            "classification does not cover all {channels} input channels"
        )));
    }
    Ok(())
}

/// Scatters the nonzeros of channel `c` into the outputs they reach. For a
/// fixed output, contributions arrive in input-position order, the same
/// order the dense loop nest visits them.
fn accumulate_sparse<A: Accum, T: Scalar>(
    ops: &ConvOperands<A, T>,
    c: usize,
    cc: &CompressedChannel<A>,
    partials: &mut PartialSums<A>,
) {
    let ActivationDims { height, width, .. } = ops.act_dims;
    let WeightDims {
        out_channels,
        kernel_h,
        kernel_w,
        ..
    } = ops.weight_dims;
    let (pad_h, pad_w) = ops.pads();
    let plane = height * width;
    let ch = c as u32;
    for (pos, val) in cc.iter_nonzero() {
        let (ih, iw) = (pos / width, pos % width);
        let ag = ops.act_group[c * plane + pos];
        for k in 0..out_channels {
            let w_base = (c * out_channels + k) * kernel_h * kernel_w;
            for r in 0..kernel_h {
                let Some(oh) = (ih + pad_h).checked_sub(r).filter(|&v| v < height) else {
                    continue;
                };
                for s in 0..kernel_w {
                    let Some(ow) = (iw + pad_w).checked_sub(s).filter(|&v| v < width) else {
                        continue;
                    };
                    let wi = w_base + r * kernel_w + s;
                    let o = (k * height + oh) * width + ow;
                    partials.add(o, ch, ag, ops.weight_group[wi], val * ops.weight[wi]);
                }
            }
        }
    }
}

fn split_partials<A: Accum, T: Scalar>(
    ops: &ConvOperands<A, T>,
    cls: &ChannelClassification,
) -> Result<PartialSums<A>> {
    check_partition(cls, ops.act_dims.channels)?;
    let mut dense = PartialSums::new(ops.out_dims());
    for &c in &cls.dense {
        ops.accumulate_dense(c, &mut dense);
    }
    let mut sparse = PartialSums::new(ops.out_dims());
    for &c in &cls.sparse {
        let cc = compress_channel(ops.act_channel(c));
        accumulate_sparse(ops, c, &cc, &mut sparse);
    }
    dense.merge(sparse)
}

/// Quantizes both operands with `p` and runs the conv with `cls.dense` on
/// the dense engine and `cls.sparse` on the sparse engine. Equal, bit for
/// bit, to `conv_exec_quantized` for every partition.
pub fn split_conv_exec<T: Scalar + Accum>(
    act: &ActivationTensor<T>,
    w: &WeightTensor<T>,
    p: &PrecisionPair,
    cls: &ChannelClassification,
    activation: ActivationFn,
) -> Result<ActivationTensor<T>> {
    match PreparedConv::new(act, w, p)? {
        PreparedConv::Int(ops) => ops.rescale(&split_partials(&ops, cls)?, activation),
        PreparedConv::Real(ops) => ops.rescale(&split_partials(&ops, cls)?, activation),
    }
}

/// Split execution on already-built operands; exposes the raw partial sums.
pub fn split_partial_sums<A: Accum, T: Scalar>(
    ops: &ConvOperands<A, T>,
    cls: &ChannelClassification,
) -> Result<PartialSums<A>> {
    split_partials(ops, cls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::conv_exec_quantized;

    fn operands() -> (ActivationTensor<f64>, WeightTensor<f64>) {
        let x = ActivationTensor::from_fn(ActivationDims::new(4, 5, 5), |c, h, w| {
            let v = ((c * 7 + h * 3 + w * 5) % 11) as f64 - 4.0;
            if v < 0.0 {
                0.0
            } else {
                v * 0.17
            }
        });
        let w = WeightTensor::from_fn(WeightDims::new(4, 3, 3, 3), |c, k, r, s| {
            ((c * 5 + k * 3 + r * 2 + s) % 9) as f64 * 0.05 - 0.2
        });
        (x, w)
    }

    #[test]
    fn every_partition_matches_monolithic() {
        let (x, w) = operands();
        for p in [
            PrecisionPair::int4_fp8s(true),
            PrecisionPair::mxint8(),
            PrecisionPair::fp16(),
        ] {
            let reference = conv_exec_quantized(&x, &w, &p, ActivationFn::Relu).unwrap();
            for mask in 0..16usize {
                let sparse: Vec<usize> = (0..4).filter(|c| mask >> c & 1 == 1).collect();
                let cls = ChannelClassification::from_sparse_set(4, &sparse, 0.3).unwrap();
                let out = split_conv_exec(&x, &w, &p, &cls, ActivationFn::Relu).unwrap();
                assert_eq!(out, reference, "mask {mask:04b}");
            }
        }
    }

    #[test]
    fn broken_partition_rejected() {
        let (x, w) = operands();
        let mut cls = ChannelClassification::from_sparse_set(4, &[1], 0.3).unwrap();
        cls.dense.push(1);
        let r = split_conv_exec(&x, &w, &PrecisionPair::mxint8(), &cls, ActivationFn::None);
        assert!(matches!(r, Err(Error::Domain(_))));
        let short = ChannelClassification::from_sparse_set(3, &[1], 0.3).unwrap();
        let r = split_conv_exec(&x, &w, &PrecisionPair::mxint8(), &short, ActivationFn::None);
        assert!(matches!(r, Err(Error::Domain(_))));
    }
}
