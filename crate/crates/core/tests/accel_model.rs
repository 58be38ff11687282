use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqdm::accel::{simulate_layer, simulate_run, ArchConfig, LayerProfile};
use sqdm::netspec::{assign_mixed_precision, bundled_network, NetworkSpec, PrecisionMap};
use sqdm::sparsity::{
    apply_update_schedule, generate_trace, ChannelClassification, SparsityTrace, TraceGenParams, DEFAULT_THRESHOLD,
};
use sqdm::Error;

fn desk() -> (NetworkSpec, PrecisionMap) {
    let net = bundled_network("edm1-cifar10-desk").unwrap();
    let pm = assign_mixed_precision(&net, &net.default_sensitive()).unwrap();
    (net, pm)
}

fn constant_trace(c: usize, t: usize, f: f32) -> SparsityTrace {
    SparsityTrace::from_fractions(c, t, 16, 16, vec![f; c * t]).unwrap()
}

#[test]
fn dense_trace_gives_unit_speedup() {
    let (net, pm) = desk();
    let tr = constant_trace(64, 4, 0.0);
    let sched = apply_update_schedule(&tr, DEFAULT_THRESHOLD, 1).unwrap();
    let r = simulate_run(&net, &pm, &tr, &sched, &ArchConfig::default()).unwrap();
    assert_eq!(r.cycles, r.baseline_cycles);
    assert_eq!(r.speedup_sparsity, 1.0);
    assert_eq!(r.speedup_total, r.speedup_quant);
}

#[test]
fn dense_data_is_never_faster_than_baseline() {
    let (net, pm) = desk();
    let tr = constant_trace(64, 2, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for reconfigure_idle in [true, false] {
        let arch = ArchConfig {
            reconfigure_idle,
            ..Default::default()
        };
        for _ in 0..20 {
            let sparse: Vec<usize> = (0..64).filter(|_| rng.random_bool(0.5)).collect();
            let cls = ChannelClassification::from_sparse_set(64, &sparse, 0.3).unwrap();
            let sched = vec![cls.clone(), ChannelClassification { timestep: 1, ..cls }];
            let r = simulate_run(&net, &pm, &tr, &sched, &arch).unwrap();
            assert!(r.speedup_sparsity <= 1.0, "{}", r.speedup_sparsity);
        }
    }
}

#[test]
fn work_is_conserved_per_layer() {
    let (net, pm) = desk();
    let tr = generate_trace(&TraceGenParams {
        timesteps: 6,
        keep_tensors: false,
        ..Default::default()
    })
    .unwrap();
    let sched = apply_update_schedule(&tr, DEFAULT_THRESHOLD, 2).unwrap();
    let r = simulate_run(&net, &pm, &tr, &sched, &ArchConfig::default()).unwrap();
    for (b, l) in net.blocks.iter().zip(&r.layers) {
        assert_eq!(
            l.dense_macs + l.sparse_macs + l.skipped_macs,
            b.macs() * 6,
            "{}",
            b.name
        );
    }
    let step_sum: u64 = r.steps.iter().map(|s| s.cycles).sum();
    let layer_sum: u64 = r.layers.iter().map(|l| l.cycles).sum();
    assert_eq!(step_sum, r.cycles);
    assert_eq!(layer_sum, r.cycles);
    let e: f64 = r.layers.iter().map(|l| l.energy).sum();
    assert!((e - r.energy.total()).abs() < 1e-6 * e);
}

#[test]
fn more_zeros_never_slow_a_fixed_split() {
    let (net, _) = desk();
    let b = net.block("enc.16x16_block0").unwrap();
    let p = sqdm::netspec::PrecisionPair::int4_fp8s(true);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let sparse: Vec<usize> = (0..64).filter(|_| rng.random_bool(0.7)).collect();
        let cls = ChannelClassification::from_sparse_set(64, &sparse, 0.3).unwrap();
        let mut f: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..0.5)).collect();
        let mut prev = u64::MAX;
        for _ in 0..6 {
            let layer = LayerProfile::conv(b, &p, &f).unwrap();
            let sim = simulate_layer(&layer, &cls, &ArchConfig::default(), false).unwrap();
            assert!(sim.latency <= prev);
            prev = sim.latency;
            for v in f.iter_mut() {
                *v = (*v + 0.1).min(1.0);
            }
        }
    }
}

#[test]
fn calibrated_run_lands_in_reported_ranges() {
    let (net, pm) = desk();
    let tr = generate_trace(&TraceGenParams {
        keep_tensors: false,
        ..Default::default()
    })
    .unwrap();
    let sched = apply_update_schedule(&tr, DEFAULT_THRESHOLD, 1).unwrap();
    let r = simulate_run(&net, &pm, &tr, &sched, &ArchConfig::default()).unwrap();
    assert!((1.6..=2.0).contains(&r.speedup_sparsity), "{}", r.speedup_sparsity);
    assert!((6.0..=7.6).contains(&r.speedup_total), "{}", r.speedup_total);
    assert!((0.45..=0.58).contains(&r.energy_saving), "{}", r.energy_saving);
    assert_eq!(r.speedup_total, r.speedup_quant * r.speedup_sparsity);
    assert_eq!(r, simulate_run(&net, &pm, &tr, &sched, &ArchConfig::default()).unwrap());
}

#[test]
fn stale_classification_costs_speed_on_average() {
    let (net, pm) = desk();
    let periods = [1usize, 2, 4, 8, 16, 32];
    let mut mean = [0.0; 6];
    for seed in 0..16 {
        let tr = generate_trace(&TraceGenParams {
            persistence: 0.98,
            seed,
            keep_tensors: false,
            ..Default::default()
        })
        .unwrap();
        for (i, p) in periods.iter().enumerate() {
            let sched = apply_update_schedule(&tr, DEFAULT_THRESHOLD, *p).unwrap();
            mean[i] += simulate_run(&net, &pm, &tr, &sched, &ArchConfig::default())
                .unwrap()
                .speedup_sparsity
                / 16.0;
        }
    }
    assert!(mean.windows(2).all(|w| w[1] <= w[0]), "{mean:?}");
}

#[test]
fn trace_too_narrow_for_network() {
    let (net, pm) = desk();
    let tr = constant_trace(32, 1, 0.5);
    let sched = apply_update_schedule(&tr, DEFAULT_THRESHOLD, 1).unwrap();
    assert!(matches!(
        simulate_run(&net, &pm, &tr, &sched, &ArchConfig::default()),
        Err(Error::Config(_))
    ));
}
