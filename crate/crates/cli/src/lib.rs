//! Library side of the `iup` command: scenario parsing, report writing and
//! the table-style subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde_json::Value;

use iup_core::model::{RuleSet, UeId};
use iup_core::path::{
    build_deployment_path, compare_paths, encapsulated_size, overhead_ratio, DeploymentPath,
    EncapStack, FittedConfig, Scenario,
};
use iup_core::session::{plan_handover, HandoverMode, NodeRegistry, SessionTable};
use iup_core::sim::{Report, ScenarioSpec};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Both,
}

#[derive(Clone, Debug)]
pub struct OutputConfig {
    pub out_dir: PathBuf,
    pub format: Format,
}

/// Parses and fully validates a scenario. Errors name the offending field
/// path and position.
pub fn parse_scenario_str(text: &str) -> Result<ScenarioSpec, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut spec: ScenarioSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CliError::Validation(format!(
            "parse error at line {} column {} (field `{path}`): {inner}",
            inner.line(),
            inner.column()
        ))
    })?;
    spec.sort_updates();
    spec.validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(spec)
}

pub fn parse_scenario(path: &Path) -> Result<ScenarioSpec, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    parse_scenario_str(&text).map_err(|e| match e {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Scenario as it would be written back to disk.
pub fn scenario_to_string(spec: &ScenarioSpec) -> String {
    serde_json::to_string_pretty(spec).expect("scenario serializes")
}

fn round2(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(0.0);
            *v = serde_json::Number::from_f64((x * 100.0).round() / 100.0)
                .map_or(Value::Null, Value::Number);
        }
        Value::Array(a) => a.iter_mut().for_each(round2),
        Value::Object(o) => o.values_mut().for_each(round2),
        _ => {}
    }
}

pub fn summary_json(report: &Report) -> String {
    let mut v = serde_json::to_value(report).expect("report serializes");
    round2(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}

fn opt2(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

pub fn timeseries_csv(report: &Report) -> String {
    let mut s = String::from(
        "t_s,flow_id,throughput_bps,p50_latency_ms,p99_latency_ms,ue_id,rbs_used,rbs_unused,rlc_bytes\n",
    );
    for r in &report.windows {
        let _ = writeln!(
            s,
            "{},{},{:.2},{},{},{},{},{},{:.2}",
            r.t_s,
            r.flow_id.0,
            r.throughput_bps,
            opt2(r.p50_latency_ms),
            opt2(r.p99_latency_ms),
            r.ue_id.0,
            r.rbs_used,
            r.rbs_unused,
            r.rlc_bytes
        );
    }
    s
}

/// Writes the report files and returns their paths.
pub fn emit_report(report: &Report, config: &OutputConfig) -> Result<Vec<PathBuf>, CliError> {
    let io = |e: std::io::Error, p: &Path| CliError::Runtime(format!("{}: {e}", p.display()));
    fs::create_dir_all(&config.out_dir).map_err(|e| io(e, &config.out_dir))?;
    let mut written = Vec::new();
    if matches!(config.format, Format::Json | Format::Both) {
        let p = config.out_dir.join("summary.json");
        fs::write(&p, summary_json(report)).map_err(|e| io(e, &p))?;
        written.push(p);
    }
    if matches!(config.format, Format::Csv | Format::Both) {
        let p = config.out_dir.join("timeseries.csv");
        fs::write(&p, timeseries_csv(report)).map_err(|e| io(e, &p))?;
        written.push(p);
    }
    Ok(written)
}

/// Human-readable per-phase digest printed after a run.
pub fn phase_table(report: &Report) -> String {
    let mut s = String::new();
    for p in &report.phases {
        let m = &p.metrics;
        let _ = writeln!(
            s,
            "phase {} [{:.0}-{:.0} s] {:?}: unused RBs/slot {:.2}",
            p.index,
            p.start_us as f64 / 1e6,
            p.end_us as f64 / 1e6,
            p.scheduling,
            m.unused_rbs_per_slot
        );
        for (id, f) in &m.flows {
            let _ = writeln!(
                s,
                "  {id}: {:.2} Mbps, p50 {} ms, p99 {} ms",
                f.throughput_bps / 1e6,
                opt2(f.p50_latency_ms),
                opt2(f.p99_latency_ms)
            );
        }
        for (id, u) in &m.ues {
            let _ = writeln!(s, "  {id}: {:.2} RBs/slot, RLC {:.0} B", u.rbs_per_slot, u.rlc_bytes);
        }
    }
    for a in &report.advisories {
        let _ = writeln!(s, "note: {a}");
    }
    s
}

/// Rows of `stack,total_bytes,overhead_fraction`.
pub fn overhead_table(payload: u64, stack: Option<&str>) -> Result<String, CliError> {
    let stacks = match stack {
        Some(name) => {
            vec![EncapStack::by_name(name).map_err(|e| CliError::Usage(e.to_string()))?]
        }
        None => EncapStack::canned().to_vec(),
    };
    let mut s = String::from("stack,total_bytes,overhead\n");
    for st in stacks {
        let _ = writeln!(
            s,
            "{},{},{:.2}",
            st.name,
            encapsulated_size(payload, &st),
            overhead_ratio(payload, &st)
        );
    }
    Ok(s)
}

pub fn load_fitted(path: Option<&Path>) -> Result<FittedConfig, CliError> {
    match path {
        None => Ok(FittedConfig::shipped()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            FittedConfig::from_json(&text).map_err(|e| CliError::Validation(e.to_string()))
        }
    }
}

pub fn rtt_of(name: &str, fitted: &FittedConfig) -> Result<String, CliError> {
    let sc: Scenario = name.parse().map_err(|e: iup_core::error::PathError| CliError::Usage(e.to_string()))?;
    let path = build_deployment_path(sc, fitted).map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(format!("{:.2}\n", path.rtt_ms()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MobilityMode {
    #[value(name = "5g")]
    FiveG,
    Iup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MobilityKind {
    Handover,
    Roaming,
}

fn legs_table(out: &mut String, path: &DeploymentPath) {
    out.push_str("leg,rtt_ms,encap,tunnel_bytes\n");
    for l in &path.legs {
        let _ = writeln!(
            out,
            "{},{:.2},{},{}",
            l.name,
            l.rtt_contribution_ms,
            l.encap.name,
            l.encap.total_bytes()
        );
    }
}

/// Forwarding legs of a handover or the data path of a roaming user, with
/// a comparison against the other mode.
pub fn mobility_report(mode: MobilityMode, kind: MobilityKind, payload: u64) -> Result<String, CliError> {
    let mut out = String::new();
    match kind {
        MobilityKind::Handover => {
            let mut table = SessionTable::default();
            let session = table
                .establish_session(UeId(1), "internet", RuleSet::default_fifo(), Default::default(), 0)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let nodes = NodeRegistry::sample();
            let plan = |m| {
                let (src, dst) = match m {
                    HandoverMode::FiveGUpfRealloc => ("gnb-a", "gnb-b"),
                    HandoverMode::IupPeerToPeer => ("iup-a", "iup-b"),
                };
                plan_handover(&session, src, dst, m, &nodes, 0).map_err(|e| CliError::Runtime(e.to_string()))
            };
            let (mine, other) = match mode {
                MobilityMode::FiveG => (plan(HandoverMode::FiveGUpfRealloc)?, plan(HandoverMode::IupPeerToPeer)?),
                MobilityMode::Iup => (plan(HandoverMode::IupPeerToPeer)?, plan(HandoverMode::FiveGUpfRealloc)?),
            };
            let path = DeploymentPath {
                scenario: "handover".into(),
                legs: mine.forwarding_legs.clone(),
                idfc_enabled: true,
            };
            legs_table(&mut out, &path);
            let _ = writeln!(
                out,
                "forwarding_legs,{}\ntunnel_bytes_per_packet,{}\nother_mode_legs,{}\nother_mode_tunnel_bytes,{}",
                mine.forwarding_legs.len(),
                mine.tunnel_overhead_bytes(),
                other.forwarding_legs.len(),
                other.tunnel_overhead_bytes()
            );
        }
        MobilityKind::Roaming => {
            let cfg = FittedConfig::shipped();
            let build = |s| build_deployment_path(s, &cfg).map_err(|e| CliError::Runtime(e.to_string()));
            let (mine, other) = match mode {
                MobilityMode::FiveG => (build(Scenario::RoamingHomeRouted5G)?, build(Scenario::RoamingIUP)?),
                MobilityMode::Iup => (build(Scenario::RoamingIUP)?, build(Scenario::RoamingHomeRouted5G)?),
            };
            legs_table(&mut out, &mine);
            let c = compare_paths(&mine, &other, payload);
            let _ = writeln!(
                out,
                "rtt_ms,{:.2}\ngtp_legs,{}\nwire_bytes,{}\nrtt_delta_ms,{:.2}\noverhead_delta_bytes,{}\ngtp_leg_delta,{}",
                mine.rtt_ms(),
                mine.gtp_leg_count(),
                c.wire_bytes_a,
                c.rtt_delta_ms,
                c.overhead_delta_bytes,
                c.gtp_leg_delta
            );
        }
    }
    Ok(out)
}
