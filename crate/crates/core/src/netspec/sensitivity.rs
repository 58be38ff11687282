//! Block-wise quantization sensitivity: one block at 4 bits, the rest at
//! 8 bits, scored by end-to-end SQNR against an unquantized run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::quant::{sqnr, ActivationFn};
use crate::scalar::Scalar;
use crate::tensorkit::{ActivationDims, ActivationTensor, WeightDims, WeightTensor};

use super::conv::{conv_exec_quantized, Accum};
use super::{BlockSpec, NetworkSpec, PrecisionPair};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepFormats {
    /// Block under test when its input is signed.
    pub low: PrecisionPair,
    /// Block under test when its input comes out of a ReLU.
    pub low_relu_input: PrecisionPair,
    /// Every other block.
    pub high: PrecisionPair,
}

impl Default for SweepFormats {
    fn default() -> Self {
        Self {
            low: PrecisionPair::int4_fp8s(false),
            low_relu_input: PrecisionPair::int4_fp8s(true),
            high: PrecisionPair::mxint8(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityScore {
    pub block: String,
    pub sqnr_db: f64,
}

fn functional_input_dims(net: &NetworkSpec) -> Result<ActivationDims> {
    let mut convs = net.conv_blocks();
    let first = convs
        .next()
        .ok_or_else(|| Error::Domain(format!("network {} has no conv blocks", net.name)))?;
    let mut dims = ActivationDims::new(first.cin, first.h, first.w);
    let input = dims;
    for b in std::iter::once(first).chain(convs) {
        if b.cin != dims.channels || b.h != dims.height || b.w != dims.width {
            return Err(Error::Domain(format!(
                "block {} expects {}x{}x{} input but receives {}x{}x{}; network is not functional",
                b.name, b.cin, b.h, b.w, dims.channels, dims.height, dims.width
            )));
        }
        dims = ActivationDims::new(b.cout, b.h, b.w);
    }
    Ok(input)
}

fn weight_dims(b: &BlockSpec) -> WeightDims {
    WeightDims::new(b.cin, b.cout, b.r, b.s)
}

/// Runs the conv blocks in order; non-conv blocks pass data through.
fn run_chain<T: Scalar + Accum>(
    convs: &[&BlockSpec],
    weights: &[WeightTensor<T>],
    input: &ActivationTensor<T>,
    precision: impl Fn(usize) -> PrecisionPair,
) -> Result<ActivationTensor<T>> {
    let mut x = input.clone();
    for (i, (b, w)) in convs.iter().zip(weights).enumerate() {
        x = conv_exec_quantized(&x, w, &precision(i), b.activation)?;
    }
    Ok(x)
}

/// Sensitivity scores with explicit weights (one tensor per conv block) and input.
pub fn sensitivity_sweep_with<T: Scalar + Accum>(
    net: &NetworkSpec,
    weights: &[WeightTensor<T>],
    input: &ActivationTensor<T>,
    formats: &SweepFormats,
) -> Result<Vec<SensitivityScore>> {
    let in_dims = functional_input_dims(net)?;
    if input.dims() != in_dims {
        return Err(Error::Domain("sweep input does not match the first conv block".into()));
    }
    let convs: Vec<&BlockSpec> = net.conv_blocks().collect();
    if weights.len() != convs.len() {
        return Err(Error::Domain(format!(
            "{} weight tensors for {} conv blocks",
            weights.len(),
            convs.len()
        )));
    }
    for (b, w) in convs.iter().zip(weights) {
        if w.dims() != weight_dims(b) {
            return Err(Error::Domain(format!("weights for {} have the wrong shape", b.name)));
        }
    }
    let reference = run_chain(&convs, weights, input, |_| PrecisionPair::fp16())?;
    let relu_input: Vec<bool> = (0..convs.len())
        .map(|i| i > 0 && convs[i - 1].activation == ActivationFn::Relu)
        .collect();
    convs
        .iter()
        .enumerate()
        .map(|(target, b)| {
            let out = run_chain(&convs, weights, input, |i| {
                if i != target {
                    formats.high
                } else if relu_input[i] {
                    formats.low_relu_input
                } else {
                    formats.low
                }
            })?;
            Ok(SensitivityScore {
                block: b.name.clone(),
                sqnr_db: sqnr(reference.data(), out.data())?,
            })
        })
        .collect()
}

/// Sensitivity scores on He-initialised random weights and a standard
/// normal input, all drawn from `seed`.
pub fn sensitivity_sweep(net: &NetworkSpec, seed: u64) -> Result<Vec<SensitivityScore>> {
    let in_dims = functional_input_dims(net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<WeightTensor<f64>> = net
        .conv_blocks()
        .map(|b| {
            let fan_in = (b.cin * b.r * b.s) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            WeightTensor::from_fn(weight_dims(b), |_, _, _, _| dist.sample(&mut rng))
        })
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let input = ActivationTensor::from_fn(in_dims, |_, _, _| normal.sample(&mut rng));
    sensitivity_sweep_with(net, &weights, &input, &SweepFormats::default())
}
