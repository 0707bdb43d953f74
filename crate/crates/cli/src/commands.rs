use std::fmt::Write as _;
use std::path::Path;

use disco_core::dispatch::{decide, DispatchPolicy, LengthDist, PolicySnapshot};
use disco_core::profiles::{
    device_preset, fit_device_linear, pearson, DecodeProfile, DeviceTtftModel, Profiles, ServerTbt,
    ServerTtftEcdf,
};
use disco_core::sim::{
    metrics, run_experiment, simulate_trace, EndpointModel, ExperimentConfig, ExperimentReport,
    ServerSampling,
};
use disco_core::workload::{load_trace, LogNormalSpec, OutputLen, SyntheticSpec, Trace, TraceFormat};

use crate::error::{read_to_string, require_file, write, CliError, Result};
use crate::run_config::{check_grid, parse_grid, RunConfig};
use crate::{
    Globals, PlanArgs, PolicyInputs, ProfileArgs, ReplayArgs, ReportArgs, SimulateArgs, SynthArgs,
};

fn trace(path: &Path) -> Result<Trace> {
    require_file(path)?;
    load_trace(path, TraceFormat::Jsonl).map_err(|e| CliError::from(e).context(path.display()))
}

fn profiles(path: &Path) -> Result<Profiles> {
    Profiles::from_json(&read_to_string(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable output");
    s.push('\n');
    s
}

fn all_tbt(t: &Trace) -> Vec<f64> {
    t.requests().iter().filter_map(|r| r.tbt_s.as_ref()).flatten().copied().collect()
}

pub fn profile(g: &Globals, a: &ProfileArgs) -> Result<()> {
    let (device_ttft, device_rate) = match (&a.device_trace, &a.device_preset) {
        (Some(path), _) => {
            let t = trace(path)?;
            let pairs: Vec<(u32, f64)> =
                t.requests().iter().filter_map(|r| r.ttft_s.map(|s| (r.prompt_len, s))).collect();
            if pairs.len() < 2 {
                return Err(CliError::Data(format!(
                    "{}: need at least 2 requests with ttft_s to fit the device",
                    path.display()
                )));
            }
            let model = fit_device_linear(&pairs)?;
            let xs: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let r = pearson(&xs, &ys)?;
            println!(
                "device: k = {:.6} s/token, c = {:.4} s over {} runs, pearson r = {r:.4}",
                model.k,
                model.c,
                pairs.len()
            );
            let tbt = all_tbt(&t);
            let rate = match (a.device_decode_rate, tbt.is_empty()) {
                (Some(r), _) => r,
                (None, false) => tbt.len() as f64 / tbt.iter().sum::<f64>(),
                (None, true) => {
                    return Err(CliError::Data(format!(
                        "{}: no tbt_s fields; pass --device-decode-rate",
                        path.display()
                    )))
                }
            };
            (model, rate)
        }
        (None, Some(name)) => {
            let p = device_preset(name)
                .ok_or_else(|| CliError::Usage(format!("unknown device preset `{name}`")))?;
            let model = DeviceTtftModel::from_prefill_rate(p.prefill_tok_s, a.device_c)?;
            println!("device: preset {} ({} tok/s prefill)", p.name, p.prefill_tok_s);
            (model, a.device_decode_rate.unwrap_or(p.decode_tok_s))
        }
        (None, None) => {
            return Err(CliError::Usage("need --device-trace or --device-preset".into()))
        }
    };

    let st = trace(&a.server_trace)?;
    let ttfts = st.recorded_ttfts();
    if ttfts.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no ttft_s fields in the server trace",
            a.server_trace.display()
        )));
    }
    let ecdf = ServerTtftEcdf::new(ttfts)?;
    let tbt = all_tbt(&st);
    let server_tbt = match (tbt.is_empty(), a.server_tbt) {
        (false, _) => ServerTbt::Samples(tbt),
        (true, Some(v)) => ServerTbt::Fixed(v),
        (true, None) => {
            return Err(CliError::Data(format!(
                "{}: no tbt_s fields; pass --server-tbt",
                a.server_trace.display()
            )))
        }
    };
    println!(
        "server: {} samples, p50 = {:.4} s, p95 = {:.4} s, p99 = {:.4} s, mean tbt = {:.4} s",
        ecdf.len(),
        ecdf.quantile(0.5),
        ecdf.quantile(0.95),
        ecdf.quantile(0.99),
        server_tbt.mean()
    );
    let p = Profiles {
        device_ttft,
        server_ttft: ecdf,
        decode: DecodeProfile::new(device_rate, server_tbt)?,
    };
    let path = g.out.join("profile.json");
    write(&path, &(p.to_json() + "\n"))?;
    println!("wrote {}", path.display());
    Ok(())
}

struct Setup {
    trace: Trace,
    profiles: Profiles,
    cfg: RunConfig,
    rates: disco_core::cost::CostRates,
    kind: disco_core::dispatch::ConstraintKind,
    alpha: f64,
}

fn setup(g: &Globals, i: &PolicyInputs) -> Result<Setup> {
    let cfg = RunConfig::load(g.config.as_deref())?;
    let rates = cfg.rates()?;
    Ok(Setup {
        trace: trace(&i.trace)?,
        profiles: profiles(&i.profile)?,
        kind: cfg.constraint(i.constraint, &rates),
        alpha: cfg.alpha(i.alpha),
        rates,
        cfg,
    })
}

fn check_b(b: f64) -> Result<()> {
    check_grid(&[b])
}

fn policy(s: &Setup, b: f64) -> Result<DispatchPolicy> {
    let dist = LengthDist::from_lengths(s.trace.prompt_lens())?;
    Ok(DispatchPolicy::plan(s.kind, &dist, &s.profiles.server_ttft, b, s.alpha)?)
}

pub fn plan(g: &Globals, a: &PlanArgs) -> Result<()> {
    check_b(a.b)?;
    let s = setup(g, &a.inputs)?;
    let snap = PolicySnapshot::new(&policy(&s, a.b)?, a.b, s.alpha);
    let json = to_json(&snap);
    print!("{json}");
    write(&g.out.join("policy.json"), &json)
}

pub fn simulate(g: &Globals, a: &SimulateArgs) -> Result<()> {
    let s = setup(g, &a.inputs)?;
    let grid = match (&a.grid, &s.cfg.grid) {
        (Some(flag), _) => parse_grid(flag)?,
        (None, Some(v)) => {
            check_grid(v)?;
            v.clone()
        }
        (None, None) => parse_grid("0:1:0.1")?,
    };
    let mut exp = ExperimentConfig::new(s.kind, grid);
    exp.baselines = s.cfg.baselines()?;
    exp.runs = a.runs.or(s.cfg.runs).unwrap_or(exp.runs);
    exp.master_seed = g.seed;
    exp.alpha = s.alpha;
    exp.sim = s.cfg.sim()?;
    let models = EndpointModel::from_profiles(&s.profiles, ServerSampling::Bootstrap);
    let report = run_experiment(&s.trace, &models, &s.rates, &exp)?;

    let csv = g.out.join("report.csv");
    write(&csv, &report.to_csv())?;
    let json = g.out.join("report.json");
    write(&json, &(report.to_json() + "\n"))?;
    println!(
        "{} requests, {} budget points, {} runs, methods: {}",
        s.trace.len(),
        exp.grid.len(),
        exp.runs,
        report.methods().join(", ")
    );
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

pub fn replay(g: &Globals, a: &ReplayArgs) -> Result<()> {
    check_b(a.b)?;
    let s = setup(g, &a.inputs)?;
    let pol = policy(&s, a.b)?;
    let decisions: Vec<_> = s.trace.prompt_lens().map(|l| decide(&pol, l)).collect();
    let models = EndpointModel::from_profiles(&s.profiles, ServerSampling::Replay);
    let outcomes = simulate_trace(&s.trace, &decisions, &models, &s.rates, &s.cfg.sim()?, g.seed)?;
    let m = metrics(&outcomes)?;

    let mut csv = String::from("id,prompt_len,output_len,winner,ttft_s,migrated,delayed_tokens,unified_cost\n");
    for o in &outcomes {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            o.id,
            o.prompt_len,
            o.output_len,
            o.winner,
            o.ttft_s,
            o.migrated(),
            o.delayed_tokens(),
            o.unified_cost
        )
        .expect("write to string");
    }
    write(&g.out.join("replay.csv"), &csv)?;
    let json = to_json(&m);
    write(&g.out.join("replay_metrics.json"), &json)?;
    print!("{json}");
    Ok(())
}

pub fn report(g: &Globals, a: &ReportArgs) -> Result<()> {
    let text = read_to_string(&a.input)?;
    let rep: ExperimentReport =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", a.input.display())))?;
    write(&g.out.join("plot.csv"), &rep.to_csv())?;

    let methods = rep.methods();
    let mut grid: Vec<f64> = Vec::new();
    for r in &rep.rows {
        if !grid.contains(&r.b) {
            grid.push(r.b);
        }
    }
    let mut md = format!(
        "# {} constraint, {} runs, seed {}\n",
        rep.constraint.suffix(),
        rep.runs,
        rep.master_seed
    );
    for metric in &a.metrics {
        writeln!(md, "\n## {metric}\n\n| b | {} |", methods.join(" | ")).expect("write to string");
        writeln!(md, "|---|{}", "---|".repeat(methods.len())).expect("write to string");
        for b in &grid {
            let cells: Vec<String> = methods
                .iter()
                .map(|m| match rep.row(m, *b).and_then(|r| r.get(metric)) {
                    Some(v) => format!("{v:.6}"),
                    None => "-".into(),
                })
                .collect();
            writeln!(md, "| {b} | {} |", cells.join(" | ")).expect("write to string");
        }
    }
    write(&g.out.join("summary.md"), &md)?;
    print!("{md}");
    Ok(())
}

pub fn synth(g: &Globals, a: &SynthArgs) -> Result<()> {
    let server_ttft = match &a.server_ttft {
        None => None,
        Some(s) => {
            let parts: Vec<f64> = s
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CliError::Usage(format!("--server-ttft `{s}`: {e}")))?;
            let [mu, sigma] = parts[..] else {
                return Err(CliError::Usage("--server-ttft takes `mu,sigma`".into()));
            };
            Some(LogNormalSpec::new(mu, sigma, a.n, g.seed).map_err(|e| CliError::Usage(e.to_string()))?)
        }
    };
    let spec = SyntheticSpec {
        prompt: LogNormalSpec::new(a.mu, a.sigma, a.n, g.seed).map_err(|e| CliError::Usage(e.to_string()))?,
        mean_interarrival_s: a.interarrival,
        output: OutputLen::Fixed {
            tokens: a.output_tokens,
        },
        server_ttft,
    };
    let t = spec.generate(g.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let path = g.out.join(&a.name);
    write(&path, &t.to_jsonl())?;
    println!("wrote {} requests to {}", t.len(), path.display());
    Ok(())
}
