//! Per-channel activation sparsity: measurement, dense/sparse classification,
//! synthetic temporal traces and update scheduling.

mod format;

use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorkit::{compress_channel, ActivationTensor, CompressedChannel};

pub use format::{parse_trace, serialize_trace, trace_csv, TRACE_MAGIC, TRACE_VERSION};

/// Zero-fraction at or above which a channel is routed to the sparse engine.
pub const DEFAULT_THRESHOLD: f64 = 0.30;

/// Zero fraction of every channel.
pub fn measure_channel_sparsity<T: Copy + Zero>(act: &ActivationTensor<T>) -> Vec<f64> {
    let dims = act.dims();
    let n = dims.channel_len();
    (0..dims.channels)
        .map(|c| {
            if n == 0 {
                return 0.0;
            }
            let zeros = act.channel(c).iter().filter(|v| v.is_zero()).count();
            zeros as f64 / n as f64
        })
        .collect()
}

/// Dense/sparse partition of the input channels in effect at one time step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelClassification {
    /// Time step this classification is applied at.
    pub timestep: usize,
    /// Time step whose sparsity it was computed from.
    pub measured_at: usize,
    pub threshold: f64,
    pub dense: Vec<usize>,
    pub sparse: Vec<usize>,
}

impl ChannelClassification {
    /// Builds a classification from an explicit sparse set over `channels`.
    pub fn from_sparse_set(channels: usize, sparse: &[usize], threshold: f64) -> Result<Self> {
        let mut mask = vec![false; channels];
        for &c in sparse {
            if c >= channels {
                return Err(Error::Index(format!("channel {c} of {channels}")));
            }
            if std::mem::replace(&mut mask[c], true) {
                return Err(Error::Domain(format!("channel {c} listed twice")));
            }
        }
        Ok(Self::from_mask(&mask, threshold, 0))
    }

    fn from_mask(mask: &[bool], threshold: f64, timestep: usize) -> Self {
        let (sparse, dense): (Vec<usize>, Vec<usize>) = (0..mask.len()).partition(|&c| mask[c]);
        Self {
            timestep,
            measured_at: timestep,
            threshold,
            dense,
            sparse,
        }
    }

    pub fn channels(&self) -> usize {
        self.dense.len() + self.sparse.len()
    }

    pub fn sparse_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.channels()];
        for &c in &self.sparse {
            mask[c] = true;
        }
        mask
    }

    pub fn is_sparse(&self, c: usize) -> bool {
        self.sparse.binary_search(&c).is_ok()
    }
}

/// Routes channel `c` to the sparse set iff `fractions[c] >= threshold`.
pub fn classify_channels(fractions: &[f64], threshold: f64) -> Result<ChannelClassification> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Domain(format!("threshold {threshold} outside [0, 1]")));
    }
    let mask: Vec<bool> = fractions.iter().map(|f| *f >= threshold).collect();
    Ok(ChannelClassification::from_mask(&mask, threshold, 0))
}

/// Per-channel, per-time-step zero fractions, optionally with the full
/// compressed activations they were measured from.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityTrace {
    channels: usize,
    timesteps: usize,
    height: usize,
    width: usize,
    sparsity: Vec<f32>,
    tensors: Option<Vec<CompressedChannel<f32>>>,
}

impl SparsityTrace {
    /// Trace carrying only the zero fractions (`sparsity[t * channels + c]`).
    pub fn from_fractions(
        channels: usize,
        timesteps: usize,
        height: usize,
        width: usize,
        sparsity: Vec<f32>,
    ) -> Result<Self> {
        let trace = Self {
            channels,
            timesteps,
            height,
            width,
            sparsity,
            tensors: None,
        };
        trace.validate()?;
        Ok(trace)
    }

    /// Trace carrying full activations; fractions are measured from them.
    pub fn from_tensors(
        channels: usize,
        timesteps: usize,
        height: usize,
        width: usize,
        tensors: Vec<CompressedChannel<f32>>,
    ) -> Result<Self> {
        let n = height * width;
        let sparsity = tensors
            .iter()
            .map(|cc| if n == 0 { 0.0 } else { (n - cc.nnz()) as f32 / n as f32 })
            .collect();
        Self::from_parts(channels, timesteps, height, width, sparsity, Some(tensors))
    }

    pub(crate) fn from_parts(
        channels: usize,
        timesteps: usize,
        height: usize,
        width: usize,
        sparsity: Vec<f32>,
        tensors: Option<Vec<CompressedChannel<f32>>>,
    ) -> Result<Self> {
        let trace = Self {
            channels,
            timesteps,
            height,
            width,
            sparsity,
            tensors,
        };
        trace.validate()?;
        Ok(trace)
    }

    fn validate(&self) -> Result<()> {
        let cells = self.channels * self.timesteps;
        if self.sparsity.len() != cells {
            return Err(Error::Domain(format!(
                "trace has {} fractions for {} channels x {} steps",
                self.sparsity.len(),
                self.channels,
                self.timesteps
            )));
        }
        if let Some(bad) = self.sparsity.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::Domain(format!("sparsity fraction {bad} outside [0, 1]")));
        }
        if let Some(t) = &self.tensors {
            let n = self.height * self.width;
            if t.len() != cells || t.iter().any(|cc| cc.len() != n) {
                return Err(Error::Domain("trace tensors do not match trace dimensions".into()));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fractions(&self) -> &[f32] {
        &self.sparsity
    }

    pub fn fraction(&self, t: usize, c: usize) -> f32 {
        self.sparsity[t * self.channels + c]
    }

    /// Zero fractions of all channels at step `t`.
    pub fn step(&self, t: usize) -> &[f32] {
        &self.sparsity[t * self.channels..(t + 1) * self.channels]
    }

    pub fn step_f64(&self, t: usize) -> Vec<f64> {
        self.step(t).iter().map(|&f| f as f64).collect()
    }

    pub fn has_tensors(&self) -> bool {
        self.tensors.is_some()
    }

    /// Compressed activation of channel `c` at step `t`, if stored.
    pub fn tensor(&self, t: usize, c: usize) -> Option<&CompressedChannel<f32>> {
        self.tensors.as_ref().map(|v| &v[t * self.channels + c])
    }

    pub(crate) fn tensors(&self) -> Option<&[CompressedChannel<f32>]> {
        self.tensors.as_deref()
    }

    pub fn mean_sparsity(&self) -> f64 {
        if self.sparsity.is_empty() {
            return 0.0;
        }
        self.sparsity.iter().map(|&f| f as f64).sum::<f64>() / self.sparsity.len() as f64
    }

    /// Copy without the full tensors.
    pub fn summary(&self) -> Self {
        Self {
            tensors: None,
            ..self.clone()
        }
    }
}

/// Parameters of the synthetic trace generator.
///
/// Each channel follows a two-state (sparse/dense) Markov chain. Within a
/// state every element is zero independently with that state's zero
/// fraction. The stationary share of sparse-state channels is solved from
/// `mean_sparsity`, and the switching rates are set so the average
/// probability of keeping the state between steps equals `persistence`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceGenParams {
    pub channels: usize,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub mean_sparsity: f64,
    pub persistence: f64,
    pub sparse_state_sparsity: f64,
    pub dense_state_sparsity: f64,
    pub seed: u64,
    pub keep_tensors: bool,
}

impl Default for TraceGenParams {
    /// Calibrated to 65% mean sparsity with a ~70% sparse portion at the
    /// default threshold.
    fn default() -> Self {
        Self {
            channels: 64,
            timesteps: 32,
            height: 16,
            width: 16,
            mean_sparsity: 0.65,
            persistence: 0.9,
            sparse_state_sparsity: 0.70,
            dense_state_sparsity: 0.10,
            seed: 0,
            keep_tensors: true,
        }
    }
}

/// Stationary sparse-state share and per-step switching probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateChain {
    pub sparse_share: f64,
    pub sparse_to_dense: f64,
    pub dense_to_sparse: f64,
}

impl TraceGenParams {
    pub fn chain(&self) -> Result<StateChain> {
        let probs = [
            ("mean_sparsity", self.mean_sparsity),
            ("persistence", self.persistence),
            ("sparse_state_sparsity", self.sparse_state_sparsity),
            ("dense_state_sparsity", self.dense_state_sparsity),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} outside [0, 1]")));
            }
        }
        if self.channels == 0 || self.timesteps == 0 || self.height * self.width == 0 {
            return Err(Error::Config("trace dimensions must be positive".into()));
        }
        let (hi, lo, target) = (
            self.sparse_state_sparsity,
            self.dense_state_sparsity,
            self.mean_sparsity,
        );
        let share = if hi == lo {
            if (target - hi).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "both states have sparsity {hi}; mean {target} is unreachable"
                )));
            }
            0.5
        } else {
            (target - lo) / (hi - lo)
        };
        if !(0.0..=1.0).contains(&share) {
            return Err(Error::Config(format!(
                "mean sparsity {target} is outside the state range [{}, {}]",
                lo.min(hi),
                lo.max(hi)
            )));
        }
        let flow = (1.0 - self.persistence) / 2.0;
        let rate = |mass: f64| if mass == 0.0 { 0.0 } else { flow / mass };
        let chain = StateChain {
            sparse_share: share,
            sparse_to_dense: rate(share),
            dense_to_sparse: rate(1.0 - share),
        };
        if chain.sparse_to_dense > 1.0 || chain.dense_to_sparse > 1.0 {
            return Err(Error::Config(format!(
                "persistence {} is too low for a sparse share of {share:.3}",
                self.persistence
            )));
        }
        Ok(chain)
    }
}

/// Draws a trace; identical parameters give a bit-identical trace.
pub fn generate_trace(p: &TraceGenParams) -> Result<SparsityTrace> {
    let chain = p.chain()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n = p.height * p.width;
    let mut sparse_state: Vec<bool> = (0..p.channels).map(|_| rng.random_bool(chain.sparse_share)).collect();
    let mut fractions = Vec::with_capacity(p.channels * p.timesteps);
    let mut tensors = p.keep_tensors.then(|| Vec::with_capacity(p.channels * p.timesteps));
    let mut plane = vec![0f32; n];
    for t in 0..p.timesteps {
        if t > 0 {
            for s in sparse_state.iter_mut() {
                let flip = if *s {
                    chain.sparse_to_dense
                } else {
                    chain.dense_to_sparse
                };
                if rng.random_bool(flip) {
                    *s = !*s;
                }
            }
        }
        for &s in &sparse_state {
            let zero_p = if s {
                p.sparse_state_sparsity
            } else {
                p.dense_state_sparsity
            };
            let mut zeros = 0usize;
            for v in plane.iter_mut() {
                let u: f64 = rng.random();
                let mag: f32 = rng.random();
                if u < zero_p {
                    *v = 0.0;
                    zeros += 1;
                } else {
                    // ReLU-like positive magnitude in (0, 1]
                    *v = 1.0 - mag;
                }
            }
            fractions.push(zeros as f32 / n as f32);
            if let Some(ts) = tensors.as_mut() {
                ts.push(compress_channel(&plane));
            }
        }
    }
    SparsityTrace::from_parts(p.channels, p.timesteps, p.height, p.width, fractions, tensors)
}

/// Classification in effect at every step when channels are re-measured
/// only every `period` steps and held in between.
pub fn apply_update_schedule(
    trace: &SparsityTrace,
    threshold: f64,
    period: usize,
) -> Result<Vec<ChannelClassification>> {
    if period == 0 {
        return Err(Error::Config("update period must be at least 1".into()));
    }
    let mut out: Vec<ChannelClassification> = Vec::with_capacity(trace.timesteps());
    for t in 0..trace.timesteps() {
        let cls = if t % period == 0 {
            let mut fresh = classify_channels(&trace.step_f64(t), threshold)?;
            fresh.timestep = t;
            fresh.measured_at = t;
            fresh
        } else {
            let prev = out.last().expect("step 0 is always measured");
            ChannelClassification {
                timestep: t,
                ..prev.clone()
            }
        };
        out.push(cls);
    }
    Ok(out)
}

/// Mean zero fraction of the channels classified sparse, per step and
/// averaged over steps that have any sparse channel.
pub fn sparse_portion_sparsity(trace: &SparsityTrace, schedule: &[ChannelClassification]) -> f64 {
    let (sum, n) = schedule.iter().fold((0.0, 0usize), |(sum, n), cls| {
        let t = cls.timestep;
        let part = cls
            .sparse
            .iter()
            .map(|&c| trace.fraction(t, c) as f64)
            .collect::<Vec<_>>();
        (sum + part.iter().sum::<f64>(), n + part.len())
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorkit::ActivationDims;

    #[test]
    fn measure_examples() {
        let t = ActivationTensor::new(
            ActivationDims::new(2, 2, 2),
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(measure_channel_sparsity(&t), vec![0.75, 1.0]);
    }

    #[test]
    fn classify_examples() {
        let cls = classify_channels(&[0.1, 0.5, 0.9, 0.2], 0.30).unwrap();
        assert_eq!(cls.sparse, vec![1, 2]);
        assert_eq!(cls.dense, vec![0, 3]);
        let all = classify_channels(&[0.0, 0.5, 1.0], 0.0).unwrap();
        assert_eq!(all.sparse, vec![0, 1, 2]);
        // ties go to the sparse engine
        let tie = classify_channels(&[0.3, 0.29], 0.3).unwrap();
        assert_eq!(tie.sparse, vec![0]);
        assert!(classify_channels(&[0.1], 1.5).is_err());
        assert_eq!(DEFAULT_THRESHOLD, 0.30);
    }

    #[test]
    fn generator_is_deterministic() {
        let p = TraceGenParams {
            channels: 16,
            timesteps: 8,
            seed: 11,
            ..Default::default()
        };
        assert_eq!(generate_trace(&p).unwrap(), generate_trace(&p).unwrap());
        let other = generate_trace(&TraceGenParams { seed: 12, ..p }).unwrap();
        assert_ne!(generate_trace(&p).unwrap(), other);
    }

    #[test]
    fn full_persistence_freezes_states() {
        let p = TraceGenParams {
            channels: 32,
            timesteps: 20,
            persistence: 1.0,
            sparse_state_sparsity: 0.9,
            dense_state_sparsity: 0.05,
            mean_sparsity: 0.5,
            keep_tensors: false,
            ..Default::default()
        };
        let tr = generate_trace(&p).unwrap();
        let state0: Vec<bool> = tr.step(0).iter().map(|f| *f > 0.5).collect();
        for t in 1..tr.timesteps() {
            let st: Vec<bool> = tr.step(t).iter().map(|f| *f > 0.5).collect();
            assert_eq!(st, state0);
        }
    }

    #[test]
    fn unreachable_mean_rejected() {
        let p = TraceGenParams {
            mean_sparsity: 0.8,
            sparse_state_sparsity: 0.7,
            dense_state_sparsity: 0.1,
            ..Default::default()
        };
        assert!(matches!(generate_trace(&p), Err(Error::Config(_))));
        let p = TraceGenParams {
            persistence: 0.0,
            ..Default::default()
        };
        assert!(matches!(generate_trace(&p), Err(Error::Config(_))));
    }

    #[test]
    fn tensors_match_fractions() {
        let p = TraceGenParams {
            channels: 8,
            timesteps: 4,
            ..Default::default()
        };
        let tr = generate_trace(&p).unwrap();
        for t in 0..4 {
            for c in 0..8 {
                let cc = tr.tensor(t, c).unwrap();
                let zeros = cc.len() - cc.nnz();
                assert_eq!(tr.fraction(t, c), zeros as f32 / 256.0);
            }
        }
        let lean = generate_trace(&TraceGenParams {
            keep_tensors: false,
            ..p
        })
        .unwrap();
        assert_eq!(lean.fractions(), tr.fractions());
    }

    #[test]
    fn schedule_holds_between_updates() {
        let tr = generate_trace(&TraceGenParams {
            channels: 32,
            timesteps: 10,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let every = apply_update_schedule(&tr, 0.3, 1).unwrap();
        for (t, cls) in every.iter().enumerate() {
            let fresh = classify_channels(&tr.step_f64(t), 0.3).unwrap();
            assert_eq!(cls.sparse, fresh.sparse);
        }
        let once = apply_update_schedule(&tr, 0.3, 10).unwrap();
        assert!(once.iter().all(|c| c.sparse == every[0].sparse && c.measured_at == 0));
        assert!(apply_update_schedule(&tr, 0.3, 0).is_err());
    }

    #[test]
    fn stale_classification_until_next_update() {
        // channel 0 flips from dense to sparse at step 3
        let mut f = Vec::new();
        for t in 0..16 {
            f.push(if t >= 3 { 0.9 } else { 0.05 });
            f.push(0.5);
        }
        let tr = SparsityTrace::from_fractions(2, 16, 0, 0, f).unwrap();
        let sched = apply_update_schedule(&tr, 0.3, 8).unwrap();
        for (t, cls) in sched.iter().enumerate() {
            let fresh_sparse = t >= 3;
            let wrong = cls.is_sparse(0) != fresh_sparse;
            assert_eq!(wrong, (3..8).contains(&t), "t={t}");
        }
    }
}
