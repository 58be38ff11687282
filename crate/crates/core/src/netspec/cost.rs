//! Compute and memory cost model.
//!
//! Compute is expressed in FP16-multiply equivalents: one FP16 MAC costs as
//! much as two 8-bit or four 4-bit MACs, so a block's weighted cost is
//! `MACs · bits / 16`. Memory is the payload of weights and input
//! activations at the block's bit widths; scale-factor storage is reported
//! separately and does not enter the savings figures.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::quant::{Granularity, NumberFormat};

use super::{BlockKind, BlockSpec, NetworkSpec, PrecisionMap, PrecisionPair};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCost {
    pub name: String,
    pub kind: BlockKind,
    pub macs: u64,
    /// MACs weighted into FP16-multiply equivalents.
    pub weighted_cost: f64,
    pub weight_bytes: f64,
    pub act_bytes: f64,
    pub scale_bytes: f64,
}

impl BlockCost {
    pub fn memory_bytes(&self) -> f64 {
        self.weight_bytes + self.act_bytes
    }
}

fn compute_weight(bits: u32) -> f64 {
    bits as f64 / 16.0
}

fn scale_groups(fmt: &NumberFormat, channels: u64, channel_len: u64) -> u64 {
    match fmt.quant().map(|q| q.granularity) {
        None => 0,
        Some(Granularity::PerTensor) => 1,
        Some(Granularity::PerChannel) => channels,
        Some(Granularity::PerBlock(b)) => channels * channel_len.div_ceil(b as u64),
    }
}

fn scale_bits(fmt: &NumberFormat) -> f64 {
    fmt.quant().map_or(0.0, |q| q.scale_kind.storage_bits() as f64)
}

pub fn block_cost(b: &BlockSpec, p: &PrecisionPair) -> BlockCost {
    let macs = b.macs();
    let weighted_cost = macs as f64 * compute_weight(p.compute_bits());
    let (weight_bytes, act_bytes, scale_bytes) = if b.kind.is_conv() {
        let (cin, w_len, a_len) = (b.cin as u64, (b.cout * b.r * b.s) as u64, (b.h * b.w) as u64);
        let scales = scale_groups(&p.weight, cin, w_len) as f64 * scale_bits(&p.weight)
            + scale_groups(&p.act, cin, a_len) as f64 * scale_bits(&p.act);
        (
            b.weight_elems() as f64 * p.weight.bits() as f64 / 8.0,
            b.act_elems() as f64 * p.act.bits() as f64 / 8.0,
            scales / 8.0,
        )
    } else {
        let fp16_bytes = b.bytes.unwrap_or(0);
        let elems = fp16_bytes / 2;
        (
            0.0,
            fp16_bytes as f64 * p.act.bits() as f64 / 16.0,
            scale_groups(&p.act, 1, elems) as f64 * scale_bits(&p.act) / 8.0,
        )
    };
    BlockCost {
        name: b.name.clone(),
        kind: b.kind,
        macs,
        weighted_cost,
        weight_bytes,
        act_bytes,
        scale_bytes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub blocks: Vec<BlockCost>,
    pub total: BlockCost,
}

impl CostReport {
    /// Fractions of weighted compute and payload memory held by conv blocks.
    pub fn conv_share(&self) -> (f64, f64) {
        let (c, m) = self
            .blocks
            .iter()
            .filter(|b| b.kind.is_conv())
            .fold((0.0, 0.0), |(c, m), b| (c + b.weighted_cost, m + b.memory_bytes()));
        (c / self.total.weighted_cost, m / self.total.memory_bytes())
    }

    /// Fraction of weighted compute and memory spent in blocks whose
    /// compute width is at least `bits`.
    pub fn share_at_or_above(&self, pmap: &PrecisionMap, bits: u32) -> (f64, f64) {
        let (c, m) = self
            .blocks
            .iter()
            .filter(|b| pmap.get(&b.name).is_some_and(|p| p.compute_bits() >= bits))
            .fold((0.0, 0.0), |(c, m), b| (c + b.weighted_cost, m + b.memory_bytes()));
        (c / self.total.weighted_cost, m / self.total.memory_bytes())
    }
}

pub fn cost_report(net: &NetworkSpec, pmap: &PrecisionMap) -> Result<CostReport> {
    let mut blocks = Vec::with_capacity(net.blocks.len());
    for b in &net.blocks {
        let p = pmap
            .get(&b.name)
            .ok_or_else(|| Error::Config(format!("block {} has no precision", b.name)))?;
        blocks.push(block_cost(b, p));
    }
    let total = blocks.iter().fold(
        BlockCost {
            name: "total".into(),
            kind: BlockKind::ConvAct,
            macs: 0,
            weighted_cost: 0.0,
            weight_bytes: 0.0,
            act_bytes: 0.0,
            scale_bytes: 0.0,
        },
        |mut t, b| {
            t.macs += b.macs;
            t.weighted_cost += b.weighted_cost;
            t.weight_bytes += b.weight_bytes;
            t.act_bytes += b.act_bytes;
            t.scale_bytes += b.scale_bytes;
            t
        },
    );
    Ok(CostReport { blocks, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Savings {
    /// `1 - cost / cost_fp16` on weighted compute.
    pub compute: f64,
    /// `1 - bytes / bytes_fp16` on payload memory.
    pub memory: f64,
    /// `cost_fp16 / cost`, the compute speed-up from quantization alone.
    pub quant_speedup: f64,
}

/// Savings of `pmap` against running every block in FP16.
pub fn savings_report(net: &NetworkSpec, pmap: &PrecisionMap) -> Result<Savings> {
    let base = cost_report(net, &PrecisionMap::uniform(net, PrecisionPair::fp16()))?;
    let this = cost_report(net, pmap)?;
    let ratio_c = this.total.weighted_cost / base.total.weighted_cost;
    let ratio_m = this.total.memory_bytes() / base.total.memory_bytes();
    Ok(Savings {
        compute: 1.0 - ratio_c,
        memory: 1.0 - ratio_m,
        quant_speedup: 1.0 / ratio_c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{ActivationFn, QuantFormat};

    fn int4() -> PrecisionPair {
        PrecisionPair::uniform(NumberFormat::Quant(QuantFormat::int4_fp8s()))
    }

    #[test]
    fn unit_conv_costs_quarter() {
        let b = BlockSpec::conv("b", 1, 1, (1, 1), (1, 1), ActivationFn::None);
        let c = block_cost(&b, &int4());
        assert_eq!(c.macs, 1);
        assert_eq!(c.weighted_cost, 0.25);
    }

    #[test]
    fn conv_mac_count() {
        let b = BlockSpec::conv("b", 16, 32, (8, 8), (3, 3), ActivationFn::Relu);
        assert_eq!(b.macs(), 294_912);
        let fp16 = block_cost(&b, &PrecisionPair::fp16());
        let q4 = block_cost(&b, &int4());
        let q8 = block_cost(&b, &PrecisionPair::mxint8());
        assert_eq!(fp16.weighted_cost / q4.weighted_cost, 4.0);
        assert_eq!(fp16.weighted_cost / q8.weighted_cost, 2.0);
        assert_eq!(fp16.weight_bytes, (16 * 32 * 9 * 2) as f64);
        assert_eq!(q4.act_bytes, (16 * 64) as f64 / 2.0);
    }

    #[test]
    fn scale_storage_counts_groups() {
        let b = BlockSpec::conv("b", 2, 4, (4, 4), (3, 3), ActivationFn::Relu);
        // weights: 2 channels of 36 -> 3 blocks each; acts: 2 channels of 16 -> 1 block each
        let c = block_cost(&b, &int4());
        assert_eq!(c.scale_bytes, (6 + 2) as f64);
        assert_eq!(block_cost(&b, &PrecisionPair::fp16()).scale_bytes, 0.0);
    }

    #[test]
    fn annotated_blocks_scale_with_bits() {
        let b = BlockSpec::annotated("a", BlockKind::Attention, 1000, 2048);
        let c = block_cost(&b, &PrecisionPair::mxint8());
        assert_eq!(c.weighted_cost, 500.0);
        assert_eq!(c.act_bytes, 1024.0);
    }

    #[test]
    fn totals_are_sums_and_uniform_savings_exact() {
        let blocks = vec![
            BlockSpec::conv("a", 3, 8, (8, 8), (3, 3), ActivationFn::Relu),
            BlockSpec::annotated("attn", BlockKind::Attention, 5000, 900),
            BlockSpec::conv("b", 8, 8, (8, 8), (3, 3), ActivationFn::Relu),
        ];
        let net = NetworkSpec::new("n", blocks).unwrap();
        let pm = PrecisionMap::uniform(&net, int4());
        let rep = cost_report(&net, &pm).unwrap();
        let sum: f64 = rep.blocks.iter().map(|b| b.weighted_cost).sum();
        assert_eq!(rep.total.weighted_cost, sum);
        let s = savings_report(&net, &pm).unwrap();
        assert!((s.compute - 0.75).abs() < 1e-12);
        assert!((s.memory - 0.75).abs() < 1e-12);
        let s8 = savings_report(&net, &PrecisionMap::uniform(&net, PrecisionPair::mxint8())).unwrap();
        assert!((s8.compute - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weighted_average_saving() {
        // 95% of FP16 cost at 4 bits and 5% at 8 bits
        let blocks = vec![
            BlockSpec::annotated("big", BlockKind::Attention, 95, 0),
            BlockSpec::annotated("small", BlockKind::Attention, 5, 0),
        ];
        let net = NetworkSpec::new("n", blocks).unwrap();
        let pm = PrecisionMap::from_entries(
            &net,
            [
                ("big".to_string(), int4()),
                ("small".to_string(), PrecisionPair::mxint8()),
            ],
        )
        .unwrap();
        let rep = cost_report(&net, &pm).unwrap();
        let s = 1.0 - rep.total.weighted_cost / 100.0;
        assert!((s - 0.7375).abs() < 1e-12);
    }
}
