use std::io::Cursor;

use disco_core::cost::CostRates;
use disco_core::dispatch::ConstraintKind;
use disco_core::profiles::{DecodeProfile, DeviceTtftModel, Profiles, ServerTbt, ServerTtftEcdf};
use disco_core::sim::{run_experiment, EndpointModel, ExperimentConfig, ServerSampling};
use disco_core::workload::{parse_jsonl, LogNormalSpec, OutputLen, SyntheticSpec};

fn profiles() -> Profiles {
    Profiles {
        device_ttft: DeviceTtftModel::new(0.02, 0.1).unwrap(),
        server_ttft: ServerTtftEcdf::new(
            LogNormalSpec::new(-0.3, 0.8, 300, 1).unwrap().sample().unwrap(),
        )
        .unwrap(),
        decode: DecodeProfile::new(15.0, ServerTbt::Fixed(0.02)).unwrap(),
    }
}

#[test]
fn trace_and_profile_survive_their_file_formats() {
    let spec = SyntheticSpec {
        prompt: LogNormalSpec::new(4.5, 0.9, 200, 3).unwrap(),
        mean_interarrival_s: 0.7,
        output: OutputLen::LogNormal { mu: 4.0, sigma: 0.5, cap: 256 },
        server_ttft: Some(LogNormalSpec::new(-0.5, 0.8, 200, 3).unwrap()),
    };
    let t = spec.generate(3).unwrap();
    let back = parse_jsonl(Cursor::new(t.to_jsonl()), "mem").unwrap();
    assert_eq!(back.requests(), t.requests());

    let p = profiles();
    assert_eq!(Profiles::from_json(&p.to_json()).unwrap(), p);
}

#[test]
fn experiment_report_covers_every_method_and_budget() {
    let spec = SyntheticSpec {
        prompt: LogNormalSpec::new(4.5, 0.9, 300, 4).unwrap(),
        mean_interarrival_s: 1.0,
        output: OutputLen::Fixed { tokens: 64 },
        server_ttft: None,
    };
    let trace = spec.generate(4).unwrap();
    let models = EndpointModel::from_profiles(&profiles(), ServerSampling::Bootstrap);
    let rates = CostRates::new(1.5e-7, 6e-7, 1e9, 8e8, 5e-7).unwrap();
    for kind in [ConstraintKind::ServerConstrained, ConstraintKind::DeviceConstrained] {
        let mut cfg = ExperimentConfig::new(kind, vec![0.0, 0.5, 1.0]);
        cfg.runs = 3;
        let rep = run_experiment(&trace, &models, &rates, &cfg).unwrap();
        assert_eq!(rep.methods().len(), 5);
        assert_eq!(rep.rows.len(), 15);
        assert_eq!(rep.policies.len(), 3);
        for r in &rep.rows {
            let mean = r.get("mean_ttft_s").unwrap();
            let p99 = r.get("p99_ttft_s").unwrap();
            let max = r.get("max_ttft_s").unwrap();
            assert!(mean > 0.0 && mean <= max && p99 <= max, "{r:?}");
        }
        // the report round-trips through its JSON form
        let json: disco_core::sim::ExperimentReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(json.to_csv(), rep.to_csv());
    }
}
