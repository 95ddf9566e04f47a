//! wasm-bindgen entry points for `www/index.html`. Each export returns a
//! JSON string; the plain functions underneath are what the tests call.

use std::collections::BTreeMap;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use iup_core::mac::{allocate_slot, rb_budget, DrbDemand, SchedulingMode, SlotClock, UeDemand};
use iup_core::model::{CellConfig, DrbId, UeId};
use iup_core::path::{
    build_deployment_path, compare_paths, encapsulated_size, overhead_ratio, EncapStack,
    FittedConfig, Scenario,
};

pub fn overhead_rows(payload: u64) -> Value {
    let rows: Vec<Value> = EncapStack::canned()
        .iter()
        .map(|st| {
            json!({
                "stack": st.name,
                "header_bytes": st.total_bytes(),
                "total_bytes": encapsulated_size(payload, st),
                "overhead": overhead_ratio(payload, st),
            })
        })
        .collect();
    Value::Array(rows)
}

pub fn path_comparison(a: &str, b: &str, payload: u64) -> Result<Value, String> {
    let cfg = FittedConfig::shipped();
    let build = |name: &str| {
        let sc: Scenario = name.parse().map_err(|e| format!("{e}"))?;
        build_deployment_path(sc, &cfg).map_err(|e| e.to_string())
    };
    let (pa, pb) = (build(a)?, build(b)?);
    let legs = |p: &iup_core::path::DeploymentPath| -> Vec<Value> {
        p.legs
            .iter()
            .map(|l| json!({ "name": l.name, "rtt_ms": l.rtt_contribution_ms, "encap": l.encap.name }))
            .collect()
    };
    let c = compare_paths(&pa, &pb, payload);
    Ok(json!({
        "a": { "rtt_ms": pa.rtt_ms(), "gtp_legs": pa.gtp_leg_count(), "legs": legs(&pa) },
        "b": { "rtt_ms": pb.rtt_ms(), "gtp_legs": pb.gtp_leg_count(), "legs": legs(&pb) },
        "rtt_saving": c.rtt_saving,
        "wire_bytes_a": c.wire_bytes_a,
        "wire_bytes_b": c.wire_bytes_b,
    }))
}

fn numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s}")))
        .collect()
}

/// One downlink slot of the default cell. `backlogs_kbit` and
/// `rates_mbps` are comma-separated, one entry per UE; rates only matter
/// in proportional mode.
pub fn slot_allocation(mode: &str, backlogs_kbit: &str, rates_mbps: &str) -> Result<Value, String> {
    let mode = match mode {
        "fair" => SchedulingMode::FairShare,
        "proportional" => SchedulingMode::Proportional,
        other => return Err(format!("unknown mode {other}")),
    };
    let backlogs = numbers(backlogs_kbit)?;
    let rates = numbers(rates_mbps)?;
    if backlogs.is_empty() || backlogs.len() > 16 {
        return Err("give between 1 and 16 UEs".into());
    }
    if mode == SchedulingMode::Proportional && rates.len() != backlogs.len() {
        return Err("one rate per UE".into());
    }
    if backlogs.iter().chain(&rates).any(|x| !x.is_finite() || *x < 0.0) {
        return Err("values must be non-negative".into());
    }
    let cell = CellConfig::default();
    let budget = rb_budget(&cell);
    let ues: Vec<UeDemand> = backlogs
        .iter()
        .enumerate()
        .map(|(i, &kbit)| UeDemand {
            ue_id: UeId(i as u32 + 1),
            drbs: vec![DrbDemand {
                drb_id: DrbId(1),
                weight: 1,
                backlog_bits: (kbit * 1000.0) as u64,
            }],
            quantum_bits: rates
                .get(i)
                .filter(|_| mode == SchedulingMode::Proportional)
                .map(|r| (r * 1e6 / budget.dl_slots_per_second) as u64),
            max_rbs: None,
            deadlines: Vec::new(),
        })
        .collect();
    let clock = SlotClock {
        slot_index: 0,
        slot_duration_us: budget.slot_duration_us,
    };
    let a = allocate_slot(mode, &ues, &budget, clock, &cell);
    let per_ue: BTreeMap<String, u32> = a.per_ue.iter().map(|(u, n)| (u.0.to_string(), *n)).collect();
    Ok(json!({
        "rbs": per_ue,
        "unused_rbs": a.unused_rbs,
        "prb_count": cell.prb_count,
        "bits_per_rb": budget.bits_per_rb,
    }))
}

#[wasm_bindgen]
pub fn overhead(payload: u32) -> String {
    overhead_rows(payload as u64).to_string()
}

#[wasm_bindgen]
pub fn compare(a: &str, b: &str, payload: u32) -> Result<String, JsError> {
    path_comparison(a, b, payload as u64)
        .map(|v| v.to_string())
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn allocate(mode: &str, backlogs_kbit: &str, rates_mbps: &str) -> Result<String, JsError> {
    slot_allocation(mode, backlogs_kbit, rates_mbps)
        .map(|v| v.to_string())
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn scenario_names() -> String {
    let names: Vec<&str> = Scenario::ALL.iter().map(|s| s.name()).collect();
    json!(names).to_string()
}
