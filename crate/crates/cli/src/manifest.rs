use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sqdm::accel::ArchConfig;
use sqdm::netspec::{
    assign_mixed_precision, bundled_network, NetworkSpec, PrecisionMap, PrecisionPair, BUNDLED_NETWORKS,
};
use sqdm::quant::NumberFormat;
use sqdm::sparsity::{generate_trace, parse_trace, SparsityTrace, TraceGenParams, DEFAULT_THRESHOLD};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

/// Trace generator settings; unset fields keep the calibrated defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorOverrides {
    pub channels: Option<usize>,
    pub timesteps: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub mean_sparsity: Option<f64>,
    pub persistence: Option<f64>,
    pub sparse_state_sparsity: Option<f64>,
    pub dense_state_sparsity: Option<f64>,
    /// Store only per-channel fractions, not the activations.
    pub summary_only: Option<bool>,
}

impl GeneratorOverrides {
    fn layer_over(&self, base: &GeneratorOverrides) -> GeneratorOverrides {
        GeneratorOverrides {
            channels: self.channels.or(base.channels),
            timesteps: self.timesteps.or(base.timesteps),
            height: self.height.or(base.height),
            width: self.width.or(base.width),
            mean_sparsity: self.mean_sparsity.or(base.mean_sparsity),
            persistence: self.persistence.or(base.persistence),
            sparse_state_sparsity: self.sparse_state_sparsity.or(base.sparse_state_sparsity),
            dense_state_sparsity: self.dense_state_sparsity.or(base.dense_state_sparsity),
            summary_only: self.summary_only.or(base.summary_only),
        }
    }

    fn params(&self, seed: u64) -> TraceGenParams {
        let d = TraceGenParams::default();
        TraceGenParams {
            channels: self.channels.unwrap_or(d.channels),
            timesteps: self.timesteps.unwrap_or(d.timesteps),
            height: self.height.unwrap_or(d.height),
            width: self.width.unwrap_or(d.width),
            mean_sparsity: self.mean_sparsity.unwrap_or(d.mean_sparsity),
            persistence: self.persistence.unwrap_or(d.persistence),
            sparse_state_sparsity: self.sparse_state_sparsity.unwrap_or(d.sparse_state_sparsity),
            dense_state_sparsity: self.dense_state_sparsity.unwrap_or(d.dense_state_sparsity),
            seed,
            keep_tensors: !self.summary_only.unwrap_or(false),
        }
    }
}

/// Experiment manifest as written in a TOML file. Relative paths are taken
/// relative to the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    /// Bundled network name or path to a network TOML file.
    pub network: Option<String>,
    pub arch: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    /// `mixed` or a format name applied to every block.
    pub precision: Option<String>,
    pub threshold: Option<f64>,
    pub period: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub generator: GeneratorOverrides,
}

impl Manifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read_text(path)?;
        let mut m: Manifest =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("manifest {}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = dir.join(&*q);
                }
            }
        };
        rebase(&mut m.arch);
        rebase(&mut m.trace);
        rebase(&mut m.out);
        if let Some(n) = m.network.as_mut() {
            if !is_bundled(n) && Path::new(n).is_relative() {
                *n = dir.join(&*n).to_string_lossy().into_owned();
            }
        }
        Ok(m)
    }
}

/// Command-line settings; any field set here wins over the manifest.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub manifest: Option<PathBuf>,
    pub network: Option<String>,
    pub arch: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub precision: Option<String>,
    pub threshold: Option<f64>,
    pub period: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub generator: GeneratorOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrecisionPolicy {
    Mixed,
    Uniform(NumberFormat),
}

impl PrecisionPolicy {
    fn parse(s: &str) -> CliResult<Self> {
        if s == "mixed" {
            return Ok(PrecisionPolicy::Mixed);
        }
        s.parse()
            .map(PrecisionPolicy::Uniform)
            .map_err(|_| CliError::Config(format!("unknown precision policy {s:?}")))
    }

    pub fn name(&self) -> String {
        match self {
            PrecisionPolicy::Mixed => "mixed".into(),
            PrecisionPolicy::Uniform(f) => f.to_string(),
        }
    }

    pub fn map(&self, net: &NetworkSpec) -> CliResult<PrecisionMap> {
        Ok(match self {
            PrecisionPolicy::Mixed => assign_mixed_precision(net, &net.default_sensitive())?,
            PrecisionPolicy::Uniform(f) => PrecisionMap::uniform(net, PrecisionPair::uniform(*f)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceSource {
    File {
        path: PathBuf,
        trace: SparsityTrace,
        digest: String,
    },
    Generated(TraceGenParams),
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub network: NetworkSpec,
    pub arch: ArchConfig,
    pub trace: TraceSource,
    pub precision: PrecisionPolicy,
    pub threshold: f64,
    pub period: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub format: OutputFormat,
    /// Short SHA-256 over everything that determines the outputs.
    pub hash: String,
}

fn is_bundled(name: &str) -> bool {
    BUNDLED_NETWORKS.iter().any(|(n, _)| *n == name)
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn load_network(spec: &str) -> CliResult<NetworkSpec> {
    if is_bundled(spec) {
        return Ok(bundled_network(spec)?);
    }
    Ok(NetworkSpec::from_toml(&read_text(Path::new(spec))?)?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct HashInput<'a> {
    network: String,
    arch: &'a ArchConfig,
    trace: String,
    precision: String,
    threshold: f64,
    period: usize,
    seed: u64,
}

impl Experiment {
    /// Resolves defaults, then the manifest file, then command-line values.
    /// `default_network` is used when neither names a network.
    pub fn resolve(ov: &Overrides, default_network: &str) -> CliResult<Self> {
        let m = match &ov.manifest {
            Some(p) => Manifest::load(p)?,
            None => Manifest::default(),
        };
        let network_spec = ov
            .network
            .clone()
            .or(m.network)
            .unwrap_or_else(|| default_network.to_string());
        let network = load_network(&network_spec)?;
        let arch = match ov.arch.as_ref().or(m.arch.as_ref()) {
            Some(p) => ArchConfig::from_toml(&read_text(p)?)?,
            None => ArchConfig::default(),
        };
        let seed = ov.seed.or(m.seed).unwrap_or(0);
        let trace = match ov.trace.as_ref().or(m.trace.as_ref()) {
            Some(p) => {
                let bytes = fs::read(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                let trace = parse_trace(&bytes)?;
                TraceSource::File {
                    path: p.clone(),
                    trace,
                    digest: sha256_hex(&bytes),
                }
            }
            None => TraceSource::Generated(ov.generator.layer_over(&m.generator).params(seed)),
        };
        let precision = PrecisionPolicy::parse(ov.precision.as_deref().or(m.precision.as_deref()).unwrap_or("mixed"))?;
        let threshold = ov.threshold.or(m.threshold).unwrap_or(DEFAULT_THRESHOLD);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(CliError::Config(format!("threshold {threshold} outside [0, 1]")));
        }
        let period = ov.period.or(m.period).unwrap_or(1);
        if period == 0 {
            return Err(CliError::Config("update period must be at least 1".into()));
        }
        let mut exp = Experiment {
            network,
            arch,
            trace,
            precision,
            threshold,
            period,
            seed,
            out: ov.out.clone().or(m.out).unwrap_or_else(|| PathBuf::from(".")),
            format: ov.format.or(m.format).unwrap_or_default(),
            hash: String::new(),
        };
        exp.hash = exp.compute_hash();
        Ok(exp)
    }

    fn compute_hash(&self) -> String {
        let trace = match &self.trace {
            TraceSource::File { digest, .. } => format!("file:{digest}"),
            TraceSource::Generated(p) => format!("gen:{}", serde_json::to_string(p).expect("params serialize")),
        };
        let input = HashInput {
            network: self.network.to_toml(),
            arch: &self.arch,
            trace,
            precision: self.precision.name(),
            threshold: self.threshold,
            period: self.period,
            seed: self.seed,
        };
        let json = serde_json::to_string(&input).expect("hash input serializes");
        sha256_hex(json.as_bytes())[..16].to_string()
    }

    /// `# manifest=<hash> seed=<n>`
    pub fn header(&self) -> String {
        format!("# manifest={} seed={}\n", self.hash, self.seed)
    }

    /// The trace to simulate: loaded, or generated without full tensors.
    pub fn load_trace(&self, keep_tensors: bool) -> CliResult<SparsityTrace> {
        match &self.trace {
            TraceSource::File { trace, .. } => Ok(trace.clone()),
            TraceSource::Generated(p) => Ok(generate_trace(&TraceGenParams {
                keep_tensors: keep_tensors && p.keep_tensors,
                ..*p
            })?),
        }
    }
}
