use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use serde_json::json;
use sqdm::accel::{simulate_run, SimResult};
use sqdm::netspec::{savings_report, sensitivity_sweep, NetworkSpec, PrecisionMap, PrecisionPair};
use sqdm::quant::{code_utilization, quantize, ActivationFn, NumberFormat, QuantFormat};
use sqdm::sparsity::{apply_update_schedule, serialize_trace, sparse_portion_sparsity, trace_csv, SparsityTrace};

use crate::manifest::{Experiment, OutputFormat, PrecisionPolicy};
use crate::{CliError, CliResult};

/// One file produced by a command, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFile {
    pub name: String,
    pub contents: Vec<u8>,
}

impl OutputFile {
    fn new(name: impl Into<String>, contents: impl Into<Vec<u8>>) -> Self {
        Self {
            name: name.into(),
            contents: contents.into(),
        }
    }

    pub fn text(&self) -> &str {
        std::str::from_utf8(&self.contents).unwrap_or("")
    }
}

fn json_file(name: &str, exp: &Experiment, body: serde_json::Value) -> OutputFile {
    let mut obj = serde_json::Map::new();
    obj.insert("manifest".into(), json!(exp.hash));
    obj.insert("seed".into(), json!(exp.seed));
    match body {
        serde_json::Value::Object(m) => obj.extend(m),
        other => {
            obj.insert("data".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(obj)).expect("json serializes");
    text.push('\n');
    OutputFile::new(name, text)
}

const REPORT_FORMATS: [&str; 6] = ["fp16", "int8", "mxint8", "int4", "int4-vsq", "int4-fp8s"];

#[derive(Debug, Clone, Serialize)]
struct ReportRow {
    format: String,
    /// `None` when quantization is lossless.
    sqnr_db: Option<f64>,
    /// Mean fraction of representable activation codes in use.
    codes_used: Option<f64>,
    comp_saving: f64,
    mem_saving: f64,
}

/// Signal and noise energy of quantizing `x` in channels of `channel_len`.
fn quant_noise(x: &[f64], channel_len: usize, fmt: &QuantFormat) -> CliResult<(f64, f64, f64)> {
    let q = quantize(x, channel_len, fmt)?;
    let (signal, noise) = x
        .iter()
        .zip(q.dequantize())
        .fold((0.0, 0.0), |(s, n), (a, b)| (s + a * a, n + (a - b) * (a - b)));
    let (used, total) = code_utilization(&q);
    Ok((signal, noise, used as f64 / total as f64))
}

/// SQNR over synthetic operands of every conv block: producer-activated
/// standard normal inputs and He-initialized weights.
fn report_row(net: &NetworkSpec, name: &str, pmap: &PrecisionMap, seed: u64) -> CliResult<ReportRow> {
    let savings = savings_report(net, pmap)?;
    let producers = net.input_producers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (mut signal, mut noise, mut util, mut blocks, mut lossless) = (0.0, 0.0, 0.0, 0usize, true);
    for b in net.conv_blocks() {
        let pair = pmap
            .get(&b.name)
            .ok_or_else(|| CliError::Config(format!("block {} has no precision", b.name)))?;
        let producer = producers[b.name.as_str()].unwrap_or(ActivationFn::None);
        let plane = b.h * b.w;
        let act: Vec<f64> = (0..b.cin * plane)
            .map(|_| producer.apply(normal.sample(&mut rng)))
            .collect();
        let std_w = (2.0 / (b.cin * b.r * b.s) as f64).sqrt();
        let wts: Vec<f64> = (0..b.weight_elems()).map(|_| std_w * normal.sample(&mut rng)).collect();
        if let NumberFormat::Quant(f) = pair.act {
            let (s, n, u) = quant_noise(&act, plane, &f)?;
            signal += s;
            noise += n;
            util += u;
            lossless = false;
        } else {
            util += f64::NAN;
        }
        if let NumberFormat::Quant(f) = pair.weight {
            let (s, n, _) = quant_noise(&wts, b.cout * b.r * b.s, &f)?;
            signal += s;
            noise += n;
            lossless = false;
        }
        blocks += 1;
    }
    let util = util / blocks as f64;
    Ok(ReportRow {
        format: name.to_string(),
        sqnr_db: (!lossless && noise > 0.0).then(|| 10.0 * (signal / noise).log10()),
        codes_used: util.is_finite().then_some(util),
        comp_saving: savings.compute,
        mem_saving: savings.memory,
    })
}

fn opt_cell(v: Option<f64>, none: &str) -> String {
    v.map_or_else(|| none.to_string(), |x| x.to_string())
}

/// Per-format SQNR, activation code utilization, and compute/memory
/// savings against FP16, followed by a row for the mixed-precision policy.
pub fn cmd_quantize_report(exp: &Experiment) -> CliResult<Vec<OutputFile>> {
    let net = &exp.network;
    let mut rows = Vec::new();
    for name in REPORT_FORMATS {
        let fmt: NumberFormat = name.parse()?;
        let pmap = PrecisionMap::uniform(net, PrecisionPair::uniform(fmt));
        rows.push(report_row(net, name, &pmap, exp.seed)?);
    }
    rows.push(report_row(net, "mixed", &PrecisionPolicy::Mixed.map(net)?, exp.seed)?);
    Ok(vec![match exp.format {
        OutputFormat::Csv => {
            let mut text = exp.header();
            text.push_str("format,sqnr_db,codes_used,comp_saving,mem_saving\n");
            for r in &rows {
                let _ = writeln!(
                    text,
                    "{},{},{},{},{}",
                    r.format,
                    opt_cell(r.sqnr_db, "inf"),
                    opt_cell(r.codes_used, "na"),
                    r.comp_saving,
                    r.mem_saving
                );
            }
            OutputFile::new("quantize_report.csv", text)
        }
        OutputFormat::Json => json_file("quantize_report.json", exp, json!({ "rows": rows })),
    }])
}

/// End-to-end SQNR with one conv block at 4 bits and the rest at 8 bits.
/// Lower SQNR means a more sensitive block.
pub fn cmd_sensitivity(exp: &Experiment) -> CliResult<Vec<OutputFile>> {
    let scores = sensitivity_sweep(&exp.network, exp.seed)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].sqnr_db.total_cmp(&scores[b].sqnr_db));
    let mut rank = vec![0usize; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    Ok(vec![match exp.format {
        OutputFormat::Csv => {
            let mut text = exp.header();
            text.push_str("block,sqnr_db,rank\n");
            for (s, r) in scores.iter().zip(&rank) {
                let _ = writeln!(text, "{},{},{}", s.block, s.sqnr_db, r);
            }
            OutputFile::new("sensitivity.csv", text)
        }
        OutputFormat::Json => {
            let rows: Vec<_> = scores
                .iter()
                .zip(&rank)
                .map(|(s, r)| json!({"block": s.block, "sqnr_db": s.sqnr_db, "rank": r}))
                .collect();
            json_file("sensitivity.json", exp, json!({ "rows": rows }))
        }
    }])
}

/// Binary trace plus a long-form table of its per-channel fractions.
pub fn cmd_tracegen(exp: &Experiment) -> CliResult<Vec<OutputFile>> {
    let trace = exp.load_trace(true)?;
    let table = match exp.format {
        OutputFormat::Csv => {
            let mut text = exp.header();
            text.push_str(&trace_csv(&trace));
            OutputFile::new("trace.csv", text)
        }
        OutputFormat::Json => {
            let steps: Vec<&[f32]> = (0..trace.timesteps()).map(|t| trace.step(t)).collect();
            json_file(
                "trace.json",
                exp,
                json!({
                    "channels": trace.channels(),
                    "timesteps": trace.timesteps(),
                    "height": trace.height(),
                    "width": trace.width(),
                    "mean_sparsity": trace.mean_sparsity(),
                    "sparsity": steps,
                }),
            )
        }
    };
    Ok(vec![OutputFile::new("trace.bin", serialize_trace(&trace)), table])
}

struct RunOutcome {
    result: SimResult,
    sparse_portion: f64,
}

fn run(exp: &Experiment, trace: &SparsityTrace, threshold: f64, period: usize) -> CliResult<RunOutcome> {
    let schedule = apply_update_schedule(trace, threshold, period)?;
    let pmap = exp.precision.map(&exp.network)?;
    let result = simulate_run(&exp.network, &pmap, trace, &schedule, &exp.arch)?;
    Ok(RunOutcome {
        sparse_portion: sparse_portion_sparsity(trace, &schedule),
        result,
    })
}

/// Full simulation result as JSON and one CSV row per time step.
pub fn cmd_simulate(exp: &Experiment) -> CliResult<Vec<OutputFile>> {
    let trace = exp.load_trace(false)?;
    let out = run(exp, &trace, exp.threshold, exp.period)?;
    let r = &out.result;
    let summary = json_file(
        "simulate.json",
        exp,
        json!({
            "network": exp.network.name,
            "precision": exp.precision.name(),
            "threshold": exp.threshold,
            "period": exp.period,
            "mean_sparsity": trace.mean_sparsity(),
            "sparse_portion_sparsity": out.sparse_portion,
            "result": r,
        }),
    );
    let mut steps = exp.header();
    steps.push_str("timestep,measured_at,sparse_channels,cycles,baseline_cycles,speedup,energy,baseline_energy\n");
    for s in &r.steps {
        let _ = writeln!(
            steps,
            "{},{},{},{},{},{},{},{}",
            s.timestep,
            s.measured_at,
            s.sparse_channels,
            s.cycles,
            s.baseline_cycles,
            s.baseline_cycles as f64 / s.cycles as f64,
            s.energy,
            s.baseline_energy
        );
    }
    Ok(vec![summary, OutputFile::new("simulate_steps.csv", steps)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    Threshold,
    Period,
}

impl SweepAxis {
    fn name(self) -> &'static str {
        match self {
            SweepAxis::Threshold => "threshold",
            SweepAxis::Period => "period",
        }
    }

    fn settings(self, exp: &Experiment, v: f64) -> CliResult<(f64, usize)> {
        match self {
            SweepAxis::Threshold if (0.0..=1.0).contains(&v) => Ok((v, exp.period)),
            SweepAxis::Period if v >= 1.0 && v.fract() == 0.0 => Ok((exp.threshold, v as usize)),
            _ => Err(CliError::Usage(format!("invalid {} value {v}", self.name()))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    value: f64,
    speedup_sparsity: f64,
    speedup_quant: f64,
    speedup_total: f64,
    energy_saving: f64,
    sparse_portion_sparsity: f64,
    load_balance: f64,
}

/// One simulation per axis value, run in parallel; rows keep input order.
pub fn cmd_sweep(exp: &Experiment, axis: SweepAxis, values: &[f64]) -> CliResult<Vec<OutputFile>> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let settings = values
        .iter()
        .map(|&v| axis.settings(exp, v))
        .collect::<CliResult<Vec<_>>>()?;
    let trace = exp.load_trace(false)?;
    let trace = &trace;
    let outcomes: Vec<CliResult<RunOutcome>> = std::thread::scope(|scope| {
        let handles: Vec<_> = settings
            .iter()
            .map(|&(threshold, period)| scope.spawn(move || run(exp, trace, threshold, period)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let mut rows = Vec::with_capacity(values.len());
    for (&value, out) in values.iter().zip(outcomes) {
        let out = out?;
        let r = &out.result;
        rows.push(SweepRow {
            value,
            speedup_sparsity: r.speedup_sparsity,
            speedup_quant: r.speedup_quant,
            speedup_total: r.speedup_total,
            energy_saving: r.energy_saving,
            sparse_portion_sparsity: out.sparse_portion,
            load_balance: r.load_balance,
        });
    }
    Ok(vec![match exp.format {
        OutputFormat::Csv => {
            let mut text = format!("# manifest={} seed={} axis={}\n", exp.hash, exp.seed, axis.name());
            text.push_str(
                "value,speedup_sparsity,speedup_quant,speedup_total,energy_saving,sparse_portion_sparsity,load_balance\n",
            );
            for r in &rows {
                let _ = writeln!(
                    text,
                    "{},{},{},{},{},{},{}",
                    r.value,
                    r.speedup_sparsity,
                    r.speedup_quant,
                    r.speedup_total,
                    r.energy_saving,
                    r.sparse_portion_sparsity,
                    r.load_balance
                );
            }
            OutputFile::new(format!("sweep_{}.csv", axis.name()), text)
        }
        OutputFormat::Json => json_file(
            &format!("sweep_{}.json", axis.name()),
            exp,
            json!({ "axis": axis.name(), "rows": rows }),
        ),
    }])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Overrides;

    fn small() -> Experiment {
        let mut ov = Overrides::default();
        ov.generator.timesteps = Some(6);
        ov.generator.channels = Some(16);
        Experiment::resolve(&ov, "edm1-generic-small").unwrap()
    }

    #[test]
    fn report_has_fixed_rows_and_lossless_fp16() {
        let exp = small();
        let files = cmd_quantize_report(&exp).unwrap();
        let text = files[0].text();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# manifest="));
        let formats: Vec<&str> = lines[2..].iter().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(
            formats,
            ["fp16", "int8", "mxint8", "int4", "int4-vsq", "int4-fp8s", "mixed"]
        );
        assert_eq!(lines[2], "fp16,inf,na,0,0");
        let int4: Vec<&str> = lines[5].split(',').collect();
        assert_eq!((int4[3], int4[4]), ("0.75", "0.75"));
    }

    #[test]
    fn sweep_rejects_empty_and_invalid_values() {
        let exp = small();
        assert!(matches!(
            cmd_sweep(&exp, SweepAxis::Period, &[]),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            cmd_sweep(&exp, SweepAxis::Period, &[1.5]),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            cmd_sweep(&exp, SweepAxis::Threshold, &[-0.1]),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn json_outputs_carry_hash_and_seed() {
        let mut exp = small();
        exp.format = OutputFormat::Json;
        for f in cmd_sensitivity(&exp).unwrap() {
            let v: serde_json::Value = serde_json::from_slice(&f.contents).unwrap();
            assert_eq!(v["manifest"], json!(exp.hash));
            assert_eq!(v["seed"], json!(0));
        }
    }
}
