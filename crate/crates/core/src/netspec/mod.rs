//! U-Net style network descriptions, cost accounting, mixed-precision
//! assignment and functional (quantized) convolution execution.

mod config;
pub mod conv;
mod cost;
mod sensitivity;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{ActivationFn, NumberFormat, QuantFormat};

pub use config::{bundled_network, BUNDLED_NETWORKS};
pub use conv::{conv_exec_quantized, conv_quantized_codes, conv_reference};
pub use cost::{block_cost, cost_report, savings_report, BlockCost, CostReport, Savings};
pub use sensitivity::{sensitivity_sweep, sensitivity_sweep_with, SensitivityScore, SweepFormats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Skip,
    ConvAct,
    Embedding,
    Attention,
}

impl BlockKind {
    pub fn is_conv(self) -> bool {
        self == BlockKind::ConvAct
    }
}

/// One network block. Conv blocks are described by shape; the other kinds
/// carry their MAC count and FP16 byte footprint directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub kind: BlockKind,
    #[serde(default)]
    pub cin: usize,
    #[serde(default)]
    pub cout: usize,
    #[serde(default)]
    pub h: usize,
    #[serde(default)]
    pub w: usize,
    #[serde(default)]
    pub r: usize,
    #[serde(default)]
    pub s: usize,
    #[serde(default)]
    pub activation: ActivationFn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macs: Option<u64>,
    /// Footprint at FP16, in bytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u64>,
}

impl BlockSpec {
    pub fn conv(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        hw: (usize, usize),
        kernel: (usize, usize),
        activation: ActivationFn,
    ) -> Self {
        Self {
            name: name.into(),
            kind: BlockKind::ConvAct,
            cin,
            cout,
            h: hw.0,
            w: hw.1,
            r: kernel.0,
            s: kernel.1,
            activation,
            macs: None,
            bytes: None,
        }
    }

    pub fn annotated(name: impl Into<String>, kind: BlockKind, macs: u64, bytes: u64) -> Self {
        Self {
            name: name.into(),
            kind,
            cin: 0,
            cout: 0,
            h: 0,
            w: 0,
            r: 0,
            s: 0,
            activation: ActivationFn::None,
            macs: Some(macs),
            bytes: Some(bytes),
        }
    }

    /// `H·W·Cout·Cin·R·S` for conv blocks, the annotation otherwise.
    pub fn macs(&self) -> u64 {
        if self.kind.is_conv() {
            (self.h * self.w * self.cout * self.cin * self.r * self.s) as u64
        } else {
            self.macs.unwrap_or(0)
        }
    }

    pub fn weight_elems(&self) -> u64 {
        (self.cin * self.cout * self.r * self.s) as u64
    }

    /// Input activation elements read by a conv block.
    pub fn act_elems(&self) -> u64 {
        (self.cin * self.h * self.w) as u64
    }

    fn validate(&self) -> Result<()> {
        if self.kind.is_conv() {
            let shape = [self.cin, self.cout, self.h, self.w, self.r, self.s];
            if shape.contains(&0) {
                return Err(Error::Config(format!(
                    "conv block {} needs positive cin/cout/h/w/r/s",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Ordered encoder-to-decoder list of blocks evaluated once per time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub blocks: Vec<BlockSpec>,
    /// Blocks kept at 8 bits; when absent the first two and last two conv
    /// blocks are used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive: Option<Vec<String>>,
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, blocks: Vec<BlockSpec>) -> Result<Self> {
        let net = Self {
            name: name.into(),
            blocks,
            sensitive: None,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let net: NetworkSpec = toml::from_str(text).map_err(|e| Error::Config(format!("network config: {e}")))?;
        net.validate()?;
        Ok(net)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config(format!("network {} has no blocks", self.name)));
        }
        let mut seen = HashSet::new();
        for b in &self.blocks {
            if !seen.insert(b.name.as_str()) {
                return Err(Error::Config(format!("duplicate block name {}", b.name)));
            }
            b.validate()?;
        }
        if let Some(sens) = &self.sensitive {
            for s in sens {
                if !seen.contains(s.as_str()) {
                    return Err(Error::Config(format!("sensitive block {s} not in network")));
                }
            }
        }
        Ok(())
    }

    pub fn block(&self, name: &str) -> Option<&BlockSpec> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn conv_blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.blocks.iter().filter(|b| b.kind.is_conv())
    }

    /// The configured sensitive set, or the first two and last two conv blocks.
    pub fn default_sensitive(&self) -> BTreeSet<String> {
        if let Some(list) = &self.sensitive {
            return list.iter().cloned().collect();
        }
        let conv: Vec<&str> = self.conv_blocks().map(|b| b.name.as_str()).collect();
        let n = conv.len();
        conv.iter()
            .enumerate()
            .filter(|(i, _)| *i < 2 || *i + 2 >= n)
            .map(|(_, name)| name.to_string())
            .collect()
    }

    /// Activation that produced the input of each conv block: `None` for the
    /// first conv block (network input), otherwise the activation of the
    /// preceding conv block.
    pub fn input_producers(&self) -> BTreeMap<&str, Option<ActivationFn>> {
        let mut prev = None;
        let mut out = BTreeMap::new();
        for b in self.conv_blocks() {
            out.insert(b.name.as_str(), prev);
            prev = Some(b.activation);
        }
        out
    }
}

/// Weight and activation formats of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionPair {
    pub weight: NumberFormat,
    pub act: NumberFormat,
}

impl PrecisionPair {
    pub fn new(weight: NumberFormat, act: NumberFormat) -> Self {
        Self { weight, act }
    }

    pub fn uniform(fmt: NumberFormat) -> Self {
        Self::new(fmt, fmt)
    }

    pub fn fp16() -> Self {
        Self::uniform(NumberFormat::Fp16)
    }

    pub fn mxint8() -> Self {
        Self::uniform(NumberFormat::Quant(QuantFormat::mxint8()))
    }

    /// 4-bit FP8-scaled weights; activations unsigned when their producer is ReLU.
    pub fn int4_fp8s(unsigned_act: bool) -> Self {
        let act = if unsigned_act {
            QuantFormat::uint4_fp8s()
        } else {
            QuantFormat::int4_fp8s()
        };
        Self::new(NumberFormat::Quant(QuantFormat::int4_fp8s()), NumberFormat::Quant(act))
    }

    /// Bit width the block computes at: the wider of the two operands.
    pub fn compute_bits(&self) -> u32 {
        self.weight.bits().max(self.act.bits())
    }
}

/// Block name to precision pair, covering every block exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionMap {
    entries: BTreeMap<String, PrecisionPair>,
}

impl PrecisionMap {
    pub fn from_entries(net: &NetworkSpec, entries: impl IntoIterator<Item = (String, PrecisionPair)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (name, pair) in entries {
            if net.block(&name).is_none() {
                return Err(Error::Config(format!("precision for unknown block {name}")));
            }
            if map.insert(name.clone(), pair).is_some() {
                return Err(Error::Config(format!("block {name} mapped twice")));
            }
        }
        if let Some(missing) = net.blocks.iter().find(|b| !map.contains_key(&b.name)) {
            return Err(Error::Config(format!("block {} has no precision", missing.name)));
        }
        Ok(Self { entries: map })
    }

    pub fn uniform(net: &NetworkSpec, pair: PrecisionPair) -> Self {
        Self {
            entries: net.blocks.iter().map(|b| (b.name.clone(), pair)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&PrecisionPair> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PrecisionPair)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Sensitive blocks and all non-conv blocks get MXINT8; remaining conv blocks
/// get 4-bit FP8-scaled formats, with unsigned activations when the block's
/// input comes out of a ReLU.
pub fn assign_mixed_precision(net: &NetworkSpec, sensitive: &BTreeSet<String>) -> Result<PrecisionMap> {
    if let Some(unknown) = sensitive.iter().find(|s| net.block(s).is_none()) {
        return Err(Error::Config(format!("sensitive block {unknown} not in network")));
    }
    let producers = net.input_producers();
    let entries = net.blocks.iter().map(|b| {
        let pair = if sensitive.contains(&b.name) || !b.kind.is_conv() {
            PrecisionPair::mxint8()
        } else {
            let relu_input = producers[b.name.as_str()] == Some(ActivationFn::Relu);
            PrecisionPair::int4_fp8s(relu_input)
        };
        (b.name.clone(), pair)
    });
    PrecisionMap::from_entries(net, entries)
}
