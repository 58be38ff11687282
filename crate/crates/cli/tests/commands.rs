use std::fs;
use std::path::Path;
use std::process::Command;

use sqdm::sparsity::{serialize_trace, SparsityTrace};
use sqdm_cli::{cmd_simulate, cmd_sweep, cmd_tracegen, Experiment, OutputFormat, Overrides, SweepAxis};

fn quick() -> Overrides {
    let mut ov = Overrides::default();
    ov.generator.timesteps = Some(8);
    ov
}

fn sqdm(args: &[&str], dir: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sqdm"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_trace(path: &Path, channels: usize, fraction: f32) {
    let t = SparsityTrace::from_fractions(channels, 4, 4, 4, vec![fraction; channels * 4]).unwrap();
    fs::write(path, serialize_trace(&t)).unwrap();
}

#[test]
fn reruns_are_byte_identical() {
    let exp = Experiment::resolve(&quick(), "edm1-cifar10-desk").unwrap();
    assert_eq!(cmd_simulate(&exp).unwrap(), cmd_simulate(&exp).unwrap());
    assert_eq!(cmd_tracegen(&exp).unwrap(), cmd_tracegen(&exp).unwrap());
    let other = Experiment::resolve(
        &Overrides {
            seed: Some(1),
            ..quick()
        },
        "edm1-cifar10-desk",
    )
    .unwrap();
    assert_ne!(cmd_simulate(&exp).unwrap(), cmd_simulate(&other).unwrap());
}

#[test]
fn single_value_sweep_matches_simulate() {
    let exp = Experiment::resolve(&quick(), "edm1-cifar10-desk").unwrap();
    let sim: serde_json::Value = serde_json::from_slice(&cmd_simulate(&exp).unwrap()[0].contents).unwrap();
    for (axis, value) in [
        (SweepAxis::Threshold, exp.threshold),
        (SweepAxis::Period, exp.period as f64),
    ] {
        let sweep = cmd_sweep(&exp, axis, &[value]).unwrap();
        let text = sweep[0].text();
        let mut lines = text.lines().skip(1);
        let cols: Vec<&str> = lines.next().unwrap().split(',').collect();
        let row: Vec<f64> = lines.next().unwrap().split(',').map(|c| c.parse().unwrap()).collect();
        assert!(lines.next().is_none());
        for (name, v) in cols.iter().zip(&row).skip(1) {
            let expect = if *name == "sparse_portion_sparsity" {
                &sim[*name]
            } else {
                &sim["result"][*name]
            };
            assert_eq!(*v, expect.as_f64().unwrap(), "{name}");
        }
    }
}

#[test]
fn sweep_rows_follow_input_order() {
    let exp = Experiment::resolve(&quick(), "edm1-cifar10-desk").unwrap();
    let values = [0.5, 0.1, 0.3, 0.2];
    let text = cmd_sweep(&exp, SweepAxis::Threshold, &values).unwrap()[0]
        .text()
        .to_string();
    let got: Vec<f64> = text
        .lines()
        .skip(2)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(got, values);
}

#[test]
fn dense_trace_gives_no_sparsity_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dense.bin");
    write_trace(&path, 64, 0.0);
    let exp = Experiment::resolve(
        &Overrides {
            trace: Some(path),
            ..Default::default()
        },
        "edm1-cifar10-desk",
    )
    .unwrap();
    let sim: serde_json::Value = serde_json::from_slice(&cmd_simulate(&exp).unwrap()[0].contents).unwrap();
    assert_eq!(sim["result"]["speedup_sparsity"].as_f64().unwrap(), 1.0);
}

#[test]
fn every_text_output_carries_hash_and_seed() {
    let mut exp = Experiment::resolve(
        &Overrides {
            seed: Some(7),
            ..quick()
        },
        "edm1-cifar10-desk",
    )
    .unwrap();
    let header = format!("# manifest={} seed=7", exp.hash);
    let mut files = cmd_simulate(&exp).unwrap();
    files.extend(cmd_tracegen(&exp).unwrap());
    files.extend(cmd_sweep(&exp, SweepAxis::Period, &[1.0, 2.0]).unwrap());
    for f in files {
        match f.name.rsplit('.').next().unwrap() {
            "csv" => assert!(f.text().starts_with(&header), "{}", f.name),
            "json" => {
                let v: serde_json::Value = serde_json::from_slice(&f.contents).unwrap();
                assert_eq!(
                    (v["manifest"].as_str().unwrap(), v["seed"].as_u64().unwrap()),
                    (&exp.hash[..], 7)
                );
            }
            _ => assert_eq!(f.name, "trace.bin"),
        }
    }
    exp.format = OutputFormat::Json;
    assert!(cmd_tracegen(&exp).unwrap().iter().any(|f| f.name == "trace.json"));
}

#[test]
fn binary_writes_outputs_and_maps_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.toml"),
        "seed = 3\nout = \"results\"\n[generator]\ntimesteps = 4\n",
    )
    .unwrap();
    let (code, err) = sqdm(&["simulate", "--manifest", "run.toml"], d);
    assert_eq!(code, 0, "{err}");
    let steps = fs::read_to_string(d.join("results/simulate_steps.csv")).unwrap();
    assert!(steps.starts_with("# manifest=") && steps.lines().next().unwrap().ends_with("seed=3"));
    assert_eq!(steps.lines().count(), 2 + 4);

    assert_eq!(sqdm(&["simulate", "--config", "missing.toml"], d).0, 2);
    assert_eq!(sqdm(&["simulate", "--threshold", "2"], d).0, 2);
    assert_eq!(sqdm(&["sweep", "--axis", "period"], d).0, 2);
    assert_eq!(sqdm(&["frobnicate"], d).0, 2);

    write_trace(&d.join("narrow.bin"), 8, 0.5);
    assert_eq!(sqdm(&["simulate", "--trace", "narrow.bin", "--out", "x"], d).0, 2);

    let mut bytes = fs::read(d.join("narrow.bin")).unwrap();
    bytes[0] ^= 0xff;
    fs::write(d.join("corrupt.bin"), &bytes).unwrap();
    assert_eq!(sqdm(&["simulate", "--trace", "corrupt.bin", "--out", "x"], d).0, 3);
}
