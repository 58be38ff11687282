//! Analytical model of a heterogeneous accelerator with dense (DPE) and
//! sparse (SPE) processing elements.
//!
//! Every PE has `lanes` 4-bit multipliers; an 8-bit MAC occupies two lane
//! slots and an FP16 MAC four. Dense channels stream through the DPEs at full
//! width. Sparse channels are bitmap-compressed and the SPEs issue only their
//! nonzero MACs, paying a bitmap decode pass. When both groups are busy their
//! partial sums are merged at the end of the layer.

mod split;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netspec::{savings_report, BlockSpec, NetworkSpec, PrecisionMap, PrecisionPair};
use crate::sparsity::{ChannelClassification, SparsityTrace};

pub use split::{split_conv_exec, split_partial_sums};

/// Per-event energies in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyTable {
    pub mac_int4: f64,
    pub mac_int8: f64,
    pub mac_fp16: f64,
    pub buf_byte: f64,
    pub dram_byte: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        Self {
            mac_int4: 0.1,
            mac_int8: 0.2,
            mac_fp16: 0.8,
            buf_byte: 0.15,
            dram_byte: 10.0,
        }
    }
}

impl EnergyTable {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mac_int4,
            self.mac_int8,
            self.mac_fp16,
            self.buf_byte,
            self.dram_byte,
        ];
        if all.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::Config(
                "energy table entries must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub dpe: usize,
    pub spe: usize,
    /// 4-bit multipliers per PE.
    pub lanes: usize,
    /// Bitmap elements an SPE decodes per cycle.
    pub decode_width: usize,
    /// Merge latency per tile of `lanes` output channels.
    pub merge_cycles: u64,
    pub energy: EnergyTable,
    /// Let all PEs run the busy datapath when a layer has only dense or
    /// only sparse channels.
    pub reconfigure_idle: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            dpe: 1,
            spe: 1,
            lanes: 128,
            decode_width: 32,
            merge_cycles: 1,
            energy: EnergyTable::default(),
            reconfigure_idle: true,
        }
    }
}

impl ArchConfig {
    /// Purely dense machine with the same total PE count and lane width.
    pub fn baseline(&self) -> Self {
        Self {
            dpe: self.dpe + self.spe,
            spe: 0,
            ..*self
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let arch: Self = toml::from_str(text).map_err(|e| Error::Config(format!("arch config: {e}")))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dpe == 0 || self.lanes == 0 || self.decode_width == 0 {
            return Err(Error::Config("dpe, lanes and decode_width must be positive".into()));
        }
        self.energy.validate()
    }

    fn total_pes(&self) -> usize {
        self.dpe + self.spe
    }
}

pub fn dpe_cycles(macs: u64, lanes: u64) -> u64 {
    macs.div_ceil(lanes)
}

pub fn spe_cycles(nnz_macs: u64, total_elements: u64, lanes: u64, decode_width: u64) -> u64 {
    nnz_macs.div_ceil(lanes) + total_elements.div_ceil(decode_width)
}

/// Lane slots one MAC occupies at `bits` precision.
pub fn lane_slots(bits: u32) -> u64 {
    bits.div_ceil(4).max(1) as u64
}

/// Work description of one conv layer at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    pub name: String,
    pub out_channels: u64,
    /// Activation elements per input channel.
    pub plane: u64,
    /// MACs attributable to each input channel.
    pub channel_macs: u64,
    /// Nonzero activations of each input channel.
    pub channel_nnz: Vec<u64>,
    pub compute_bits: u32,
    pub act_bits: u32,
    pub weight_bits: u32,
    pub weight_elems: u64,
}

impl LayerProfile {
    /// Profile of a conv block whose input channels have the given zero
    /// fractions.
    pub fn conv(b: &BlockSpec, p: &PrecisionPair, zero_fractions: &[f64]) -> Result<Self> {
        if !b.kind.is_conv() {
            return Err(Error::Domain(format!("{} is not a conv block", b.name)));
        }
        if zero_fractions.len() != b.cin {
            return Err(Error::Domain(format!(
                "{} zero fractions for {} input channels of {}",
                zero_fractions.len(),
                b.cin,
                b.name
            )));
        }
        let plane = (b.h * b.w) as u64;
        let channel_nnz = zero_fractions
            .iter()
            .map(|f| plane - ((f.clamp(0.0, 1.0) * plane as f64).round() as u64).min(plane))
            .collect();
        Ok(Self {
            name: b.name.clone(),
            out_channels: b.cout as u64,
            plane,
            channel_macs: (b.cout * b.h * b.w * b.r * b.s) as u64,
            channel_nnz,
            compute_bits: p.compute_bits(),
            act_bits: p.act.bits(),
            weight_bits: p.weight.bits(),
            weight_elems: b.weight_elems(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.channel_nnz.len()
    }

    pub fn total_macs(&self) -> u64 {
        self.channel_macs * self.in_channels() as u64
    }

    /// Nonzero MACs of a channel set: each nonzero activation carries
    /// `channel_macs / plane` MACs.
    fn nnz_macs(&self, channels: &[usize]) -> u64 {
        if self.plane == 0 {
            return 0;
        }
        let nnz: u64 = channels.iter().map(|&c| self.channel_nnz[c]).sum();
        ((self.channel_macs as u128 * nnz as u128).div_ceil(self.plane as u128)) as u64
    }
}

/// Event counts feeding the energy model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EventCounters {
    pub macs_int4: u64,
    pub macs_int8: u64,
    pub macs_fp16: u64,
    pub buffer_bytes: f64,
    pub dram_bytes: f64,
}

impl EventCounters {
    fn add_macs(&mut self, bits: u32, n: u64) {
        match bits {
            0..=4 => self.macs_int4 += n,
            5..=8 => self.macs_int8 += n,
            _ => self.macs_fp16 += n,
        }
    }

    pub fn scaled(&self, k: u64) -> Self {
        Self {
            macs_int4: self.macs_int4 * k,
            macs_int8: self.macs_int8 * k,
            macs_fp16: self.macs_fp16 * k,
            buffer_bytes: self.buffer_bytes * k as f64,
            dram_bytes: self.dram_bytes * k as f64,
        }
    }
}

impl std::ops::AddAssign for EventCounters {
    fn add_assign(&mut self, o: Self) {
        self.macs_int4 += o.macs_int4;
        self.macs_int8 += o.macs_int8;
        self.macs_fp16 += o.macs_fp16;
        self.buffer_bytes += o.buffer_bytes;
        self.dram_bytes += o.dram_bytes;
    }
}

/// Energy in picojoules, split by where it is spent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Energy {
    pub compute: f64,
    pub buffer: f64,
    pub dram: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.compute + self.buffer + self.dram
    }
}

impl std::ops::AddAssign for Energy {
    fn add_assign(&mut self, o: Self) {
        self.compute += o.compute;
        self.buffer += o.buffer;
        self.dram += o.dram;
    }
}

pub fn energy_of(c: &EventCounters, t: &EnergyTable) -> Energy {
    Energy {
        compute: c.macs_int4 as f64 * t.mac_int4 + c.macs_int8 as f64 * t.mac_int8 + c.macs_fp16 as f64 * t.mac_fp16,
        buffer: c.buffer_bytes * t.buf_byte,
        dram: c.dram_bytes * t.dram_byte,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LayerSim {
    pub dpe_cycles: u64,
    pub spe_cycles: u64,
    pub merge_cycles: u64,
    pub latency: u64,
    pub dense_macs: u64,
    pub sparse_macs: u64,
    pub skipped_macs: u64,
    pub counters: EventCounters,
    pub energy: Energy,
}

/// Cycles and energy of one conv layer under `cls`. `detect` adds the
/// sparsity detector's read of the input, paid on re-classification steps.
pub fn simulate_layer(
    layer: &LayerProfile,
    cls: &ChannelClassification,
    arch: &ArchConfig,
    detect: bool,
) -> Result<LayerSim> {
    if cls.channels() != layer.in_channels() {
        return Err(Error::Domain(format!(
            "classification covers {} channels, {} has {}",
            cls.channels(),
            layer.name,
            layer.in_channels()
        )));
    }
    if !cls.sparse.is_empty() && arch.spe == 0 && !arch.reconfigure_idle {
        return Err(Error::Config("sparse channels on a machine without SPEs".into()));
    }
    let slots = lane_slots(layer.compute_bits);
    let lanes = arch.lanes as u64;
    let dense_macs = layer.channel_macs * cls.dense.len() as u64;
    let sparse_macs = layer.nnz_macs(&cls.sparse);
    let skipped_macs = layer.channel_macs * cls.sparse.len() as u64 - sparse_macs;
    let decode_elems = layer.plane * cls.sparse.len() as u64;

    let (mut dpe_n, mut spe_n) = (arch.dpe as u64, arch.spe as u64);
    if arch.reconfigure_idle {
        if cls.sparse.is_empty() {
            dpe_n += spe_n;
        } else if cls.dense.is_empty() {
            spe_n += dpe_n;
        }
    }
    let dpe = if dense_macs > 0 {
        dpe_cycles(dense_macs * slots, lanes * dpe_n)
    } else {
        0
    };
    let spe = if cls.sparse.is_empty() {
        0
    } else {
        spe_cycles(
            sparse_macs * slots,
            decode_elems,
            lanes * spe_n,
            arch.decode_width as u64 * spe_n,
        )
    };
    let both = !cls.dense.is_empty() && !cls.sparse.is_empty();
    let merge = if both {
        arch.merge_cycles * layer.out_channels.div_ceil(lanes)
    } else {
        0
    };

    let mut counters = EventCounters::default();
    counters.add_macs(layer.compute_bits, dense_macs + sparse_macs);
    let ab = layer.act_bits as f64 / 8.0;
    let weight_bytes = layer.weight_elems as f64 * layer.weight_bits as f64 / 8.0;
    let dense_in = (cls.dense.len() as u64 * layer.plane) as f64 * ab;
    let bitmap = layer.plane.div_ceil(8) as f64;
    let sparse_in: f64 = cls
        .sparse
        .iter()
        .map(|&c| layer.channel_nnz[c] as f64 * ab + bitmap)
        .sum();
    let input = dense_in + sparse_in;
    let output = (layer.out_channels * layer.plane) as f64 * ab;
    let mut buffer = weight_bytes + input + output;
    if detect {
        buffer += (layer.in_channels() as u64 * layer.plane) as f64 * ab;
    }
    if both {
        // 32-bit partial sums: SPE writes its tile, merge reads both
        buffer += (layer.out_channels * layer.plane) as f64 * 4.0 * 3.0;
    }
    counters.buffer_bytes = buffer;
    counters.dram_bytes = weight_bytes + 2.0 * input;
    let energy = energy_of(&counters, &arch.energy);

    Ok(LayerSim {
        dpe_cycles: dpe,
        spe_cycles: spe,
        merge_cycles: merge,
        latency: dpe.max(spe) + merge,
        dense_macs,
        sparse_macs,
        skipped_macs,
        counters,
        energy,
    })
}

/// Non-conv block: dense on every PE, identical in any configuration.
fn simulate_other(b: &BlockSpec, p: &PrecisionPair, arch: &ArchConfig) -> LayerSim {
    let macs = b.macs();
    let bits = p.compute_bits();
    let latency = dpe_cycles(macs * lane_slots(bits), (arch.lanes * arch.total_pes()) as u64);
    let mut counters = EventCounters::default();
    counters.add_macs(bits, macs);
    let bytes = b.bytes.unwrap_or(0) as f64 * p.act.bits() as f64 / 16.0;
    counters.buffer_bytes = bytes;
    counters.dram_bytes = bytes;
    LayerSim {
        dpe_cycles: latency,
        latency,
        dense_macs: macs,
        counters,
        energy: energy_of(&counters, &arch.energy),
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub timestep: usize,
    pub measured_at: usize,
    pub sparse_channels: usize,
    pub cycles: u64,
    pub baseline_cycles: u64,
    pub energy: f64,
    pub baseline_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub name: String,
    pub cycles: u64,
    pub baseline_cycles: u64,
    pub dpe_cycles: u64,
    pub spe_cycles: u64,
    pub merge_cycles: u64,
    pub dense_macs: u64,
    pub sparse_macs: u64,
    pub skipped_macs: u64,
    pub energy: f64,
    pub baseline_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub cycles: u64,
    pub baseline_cycles: u64,
    pub dpe_busy: u64,
    pub spe_busy: u64,
    pub energy: Energy,
    pub baseline_energy: Energy,
    pub speedup_sparsity: f64,
    pub speedup_quant: f64,
    pub speedup_total: f64,
    pub energy_saving: f64,
    /// min/max of aggregate DPE and SPE busy cycles.
    pub load_balance: f64,
    pub steps: Vec<StepRecord>,
    pub layers: Vec<LayerRecord>,
}

/// Classification of a conv layer: the network input is always dense, other
/// layers take the first `cin` channels of the step's classification.
fn layer_classification(first: bool, cin: usize, cls: &ChannelClassification) -> ChannelClassification {
    if first {
        return ChannelClassification {
            dense: (0..cin).collect(),
            sparse: vec![],
            ..cls.clone()
        };
    }
    ChannelClassification {
        dense: cls.dense.iter().copied().filter(|&c| c < cin).collect(),
        sparse: cls.sparse.iter().copied().filter(|&c| c < cin).collect(),
        ..cls.clone()
    }
}

/// Runs every time step of `trace` through the network on `arch` and on its
/// dense baseline, using `schedule[t]` as the channel split of step `t`.
pub fn simulate_run(
    net: &NetworkSpec,
    pmap: &PrecisionMap,
    trace: &SparsityTrace,
    schedule: &[ChannelClassification],
    arch: &ArchConfig,
) -> Result<SimResult> {
    arch.validate()?;
    if trace.timesteps() == 0 {
        return Err(Error::Config("trace has no time steps".into()));
    }
    if schedule.len() != trace.timesteps() {
        return Err(Error::Config(format!(
            "schedule has {} steps, trace has {}",
            schedule.len(),
            trace.timesteps()
        )));
    }
    if schedule.iter().any(|c| c.channels() != trace.channels()) {
        return Err(Error::Config("schedule and trace channel counts differ".into()));
    }
    let first_conv = net.conv_blocks().next().map(|b| b.name.clone());
    for b in net.conv_blocks().skip(1) {
        if b.cin > trace.channels() {
            return Err(Error::Config(format!(
                "block {} has {} input channels but the trace has {}",
                b.name,
                b.cin,
                trace.channels()
            )));
        }
    }
    let precision = |b: &BlockSpec| {
        pmap.get(&b.name)
            .copied()
            .ok_or_else(|| Error::Config(format!("block {} has no precision", b.name)))
    };
    let base_arch = arch.baseline();

    let mut layers: Vec<LayerRecord> = net
        .blocks
        .iter()
        .map(|b| LayerRecord {
            name: b.name.clone(),
            cycles: 0,
            baseline_cycles: 0,
            dpe_cycles: 0,
            spe_cycles: 0,
            merge_cycles: 0,
            dense_macs: 0,
            sparse_macs: 0,
            skipped_macs: 0,
            energy: 0.0,
            baseline_energy: 0.0,
        })
        .collect();
    let mut steps = Vec::with_capacity(trace.timesteps());
    let (mut energy, mut baseline_energy) = (Energy::default(), Energy::default());
    let (mut dpe_busy, mut spe_busy) = (0u64, 0u64);

    for (t, cls) in schedule.iter().enumerate() {
        let fractions = trace.step_f64(t);
        let detect = cls.measured_at == t;
        let mut rec = StepRecord {
            timestep: t,
            measured_at: cls.measured_at,
            sparse_channels: cls.sparse.len(),
            cycles: 0,
            baseline_cycles: 0,
            energy: 0.0,
            baseline_energy: 0.0,
        };
        for (b, lr) in net.blocks.iter().zip(layers.iter_mut()) {
            let p = precision(b)?;
            let (sim, base) = if b.kind.is_conv() {
                let first = first_conv.as_deref() == Some(b.name.as_str());
                let fr = if first {
                    vec![0.0; b.cin]
                } else {
                    fractions[..b.cin].to_vec()
                };
                let profile = LayerProfile::conv(b, &p, &fr)?;
                let lcls = layer_classification(first, b.cin, cls);
                let dense = layer_classification(true, b.cin, cls);
                (
                    simulate_layer(&profile, &lcls, arch, detect && !first)?,
                    simulate_layer(&profile, &dense, &base_arch, false)?,
                )
            } else {
                (simulate_other(b, &p, arch), simulate_other(b, &p, &base_arch))
            };
            lr.cycles += sim.latency;
            lr.baseline_cycles += base.latency;
            lr.dpe_cycles += sim.dpe_cycles;
            lr.spe_cycles += sim.spe_cycles;
            lr.merge_cycles += sim.merge_cycles;
            lr.dense_macs += sim.dense_macs;
            lr.sparse_macs += sim.sparse_macs;
            lr.skipped_macs += sim.skipped_macs;
            lr.energy += sim.energy.total();
            lr.baseline_energy += base.energy.total();
            if b.kind.is_conv() {
                dpe_busy += sim.dpe_cycles;
                spe_busy += sim.spe_cycles;
            }
            rec.cycles += sim.latency;
            rec.baseline_cycles += base.latency;
            rec.energy += sim.energy.total();
            rec.baseline_energy += base.energy.total();
            energy += sim.energy;
            baseline_energy += base.energy;
        }
        steps.push(rec);
    }

    let cycles: u64 = steps.iter().map(|s| s.cycles).sum();
    let baseline_cycles: u64 = steps.iter().map(|s| s.baseline_cycles).sum();
    let speedup_sparsity = baseline_cycles as f64 / cycles as f64;
    let speedup_quant = savings_report(net, pmap)?.quant_speedup;
    let hi = dpe_busy.max(spe_busy);
    Ok(SimResult {
        cycles,
        baseline_cycles,
        dpe_busy,
        spe_busy,
        energy,
        baseline_energy,
        speedup_sparsity,
        speedup_quant,
        speedup_total: speedup_quant * speedup_sparsity,
        energy_saving: 1.0 - energy.total() / baseline_energy.total(),
        load_balance: if hi == 0 {
            1.0
        } else {
            dpe_busy.min(spe_busy) as f64 / hi as f64
        },
        steps,
        layers,
    })
}
