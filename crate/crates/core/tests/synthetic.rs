use gcr_core::harness::{run_continual, BankCache, BaseMetric, ProtocolConfig};
use gcr_core::synth::{generate, SynthSpec};
use gcr_core::CoresetConfig;

fn run(spec: &SynthSpec, k: usize) -> gcr_core::harness::ContinualOutcome {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(spec, dir.path()).unwrap();
    let cfg = ProtocolConfig {
        coreset: CoresetConfig { k, seed: 0 },
        ..ProtocolConfig::default()
    };
    run_continual(&m, &cfg, &BankCache::in_memory()).unwrap()
}

#[test]
fn null_effect_gives_chance_auroc() {
    let spec = SynthSpec {
        num_categories: 1,
        anomaly_shift: 0.0,
        test_normal_images: 100,
        test_anomalous_images: 100,
        ..SynthSpec::default()
    };
    let out = run(&spec, 64);
    let auroc = out.steps[0].categories[0].auroc.unwrap();
    assert!((auroc - 0.5).abs() <= 0.1, "AUROC {auroc}");
}

#[test]
fn strong_defects_are_perfectly_separated() {
    let spec = SynthSpec {
        num_categories: 2,
        anomaly_shift: 20.0,
        ..SynthSpec::default()
    };
    let out = run(&spec, 196);
    for c in &out.steps.last().unwrap().categories {
        assert_eq!(c.routing_accuracy, Some(1.0));
        assert_eq!(c.auroc, Some(1.0), "{}", c.category);
        assert!(c.p_auroc.unwrap() > 0.99, "{}: p-AUROC {:?}", c.category, c.p_auroc);
    }
}

#[test]
fn protocol_is_deterministic() {
    let spec = SynthSpec { num_categories: 3, ..SynthSpec::default() };
    let a = run(&spec, 32);
    let b = run(&spec, 32);
    for m in BaseMetric::ALL {
        let (x, y) = (&a.matrices[&m], &b.matrices[&m]);
        for i in 0..3 {
            for t in i..3 {
                assert_eq!(x.get(i, t).map(f64::to_bits), y.get(i, t).map(f64::to_bits));
            }
        }
    }
}
