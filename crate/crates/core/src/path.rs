//! Static models of deployment data paths: tunnel overhead per packet and
//! round-trip time composed over legs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::PathError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub name: String,
    pub bytes: u32,
}

fn header(name: &str, bytes: u32) -> Header {
    Header {
        name: name.to_string(),
        bytes,
    }
}

/// Headers wrapped around an inner IP packet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncapStack {
    pub name: String,
    pub headers: Vec<Header>,
}

impl EncapStack {
    pub fn plain_ip() -> Self {
        EncapStack {
            name: "PlainIP".into(),
            headers: Vec::new(),
        }
    }

    pub fn gtp_v4() -> Self {
        EncapStack {
            name: "GtpV4".into(),
            headers: vec![header("IPv4", 20), header("UDP", 8), header("GTP-U", 8)],
        }
    }

    pub fn gtp_v6_ext() -> Self {
        EncapStack {
            name: "GtpV6Ext".into(),
            headers: vec![
                header("IPv6", 40),
                header("UDP", 8),
                header("GTP-U", 8),
                header("GTP-U extension", 8),
            ],
        }
    }

    pub fn canned() -> [EncapStack; 3] {
        [Self::plain_ip(), Self::gtp_v4(), Self::gtp_v6_ext()]
    }

    pub fn by_name(name: &str) -> Result<Self, PathError> {
        Self::canned()
            .into_iter()
            .find(|s| s.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| PathError::UnknownStack(name.to_string()))
    }

    pub fn total_bytes(&self) -> u64 {
        self.headers.iter().map(|h| h.bytes as u64).sum()
    }

    pub fn is_tunnel(&self) -> bool {
        !self.headers.is_empty()
    }

    /// `self` nested inside `outer`.
    pub fn wrapped_in(&self, outer: &EncapStack) -> EncapStack {
        let mut headers = outer.headers.clone();
        headers.extend(self.headers.iter().cloned());
        EncapStack {
            name: format!("{}+{}", outer.name, self.name),
            headers,
        }
    }
}

pub fn encapsulated_size(payload_bytes: u64, stack: &EncapStack) -> u64 {
    payload_bytes + stack.total_bytes()
}

/// Share of on-wire bytes spent on tunnel headers. Zero for an empty
/// packet with no headers.
pub fn overhead_ratio(payload_bytes: u64, stack: &EncapStack) -> f64 {
    let total = encapsulated_size(payload_bytes, stack);
    if total == 0 {
        return 0.0;
    }
    stack.total_bytes() as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathLeg {
    pub name: String,
    pub rtt_contribution_ms: f64,
    pub encap: EncapStack,
}

impl PathLeg {
    pub fn new(name: &str, rtt_contribution_ms: f64, encap: EncapStack) -> Result<Self, PathError> {
        if rtt_contribution_ms.is_nan() || rtt_contribution_ms < 0.0 {
            return Err(PathError::NegativeRtt(name.to_string()));
        }
        Ok(PathLeg {
            name: name.to_string(),
            rtt_contribution_ms,
            encap,
        })
    }

    pub fn one_way_us(&self) -> u64 {
        (self.rtt_contribution_ms * 500.0).round() as u64
    }
}

pub fn compose_rtt(legs: &[PathLeg]) -> Result<f64, PathError> {
    if legs.is_empty() {
        return Err(PathError::NoLegs);
    }
    Ok(legs.iter().map(|l| l.rtt_contribution_ms).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPath {
    pub scenario: String,
    pub legs: Vec<PathLeg>,
    /// False when the RAN node runs as a plain gNB behind an N3 tunnel.
    pub idfc_enabled: bool,
}

impl DeploymentPath {
    pub fn rtt_ms(&self) -> f64 {
        self.legs.iter().map(|l| l.rtt_contribution_ms).sum()
    }

    pub fn gtp_leg_count(&self) -> usize {
        self.legs.iter().filter(|l| l.encap.is_tunnel()).count()
    }

    /// Tunnel bytes one packet picks up across every leg it crosses.
    pub fn overhead_bytes(&self) -> u64 {
        self.legs.iter().map(|l| l.encap.total_bytes()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    LocalFiveG,
    CloudFiveG,
    CloudIUP,
    WifiConverged,
    RoamingHomeRouted5G,
    RoamingIUP,
    CompatN3,
    CompatN9,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::LocalFiveG,
        Scenario::CloudFiveG,
        Scenario::CloudIUP,
        Scenario::WifiConverged,
        Scenario::RoamingHomeRouted5G,
        Scenario::RoamingIUP,
        Scenario::CompatN3,
        Scenario::CompatN9,
    ];

    /// 5G deployments paired with the IUP deployment that replaces them.
    pub const PAIRS: [(Scenario, Scenario); 4] = [
        (Scenario::LocalFiveG, Scenario::CloudIUP),
        (Scenario::CloudFiveG, Scenario::CloudIUP),
        (Scenario::RoamingHomeRouted5G, Scenario::RoamingIUP),
        (Scenario::CompatN3, Scenario::CompatN9),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::LocalFiveG => "LocalFiveG",
            Scenario::CloudFiveG => "CloudFiveG",
            Scenario::CloudIUP => "CloudIUP",
            Scenario::WifiConverged => "WifiConverged",
            Scenario::RoamingHomeRouted5G => "RoamingHomeRouted5G",
            Scenario::RoamingIUP => "RoamingIUP",
            Scenario::CompatN3 => "CompatN3",
            Scenario::CompatN9 => "CompatN9",
        }
    }

    /// Allowed range of tunnelled legs for the scenario's topology.
    fn tunnel_legs(self) -> std::ops::RangeInclusive<usize> {
        match self {
            Scenario::LocalFiveG | Scenario::CloudFiveG | Scenario::RoamingHomeRouted5G => 2..=2,
            Scenario::CloudIUP | Scenario::WifiConverged | Scenario::RoamingIUP => 0..=0,
            Scenario::CompatN3 | Scenario::CompatN9 => 1..=1,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| PathError::UnknownScenario(s.to_string()))
    }
}

/// Per-scenario leg delays as `[leg name, rtt_ms, encap name]` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FittedConfig(pub BTreeMap<String, Vec<(String, f64, String)>>);

const SHIPPED: &str = include_str!("../data/fitted_paths.json");

impl FittedConfig {
    pub fn from_json(text: &str) -> Result<Self, PathError> {
        let cfg: FittedConfig =
            serde_json::from_str(text).map_err(|e| PathError::Malformed(e.to_string()))?;
        for (name, legs) in &cfg.0 {
            name.parse::<Scenario>()?;
            for (leg, rtt, stack) in legs {
                PathLeg::new(leg, *rtt, EncapStack::by_name(stack)?)?;
            }
        }
        Ok(cfg)
    }

    pub fn shipped() -> Self {
        Self::from_json(SHIPPED).expect("shipped path config parses")
    }
}

pub fn build_deployment_path(
    scenario: Scenario,
    config: &FittedConfig,
) -> Result<DeploymentPath, PathError> {
    let rows = config
        .0
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(scenario.name()))
        .map(|(_, v)| v)
        .ok_or_else(|| PathError::MissingScenario(scenario.name().into()))?;
    if rows.is_empty() {
        return Err(PathError::NoLegs);
    }
    let legs = rows
        .iter()
        .map(|(name, rtt, stack)| PathLeg::new(name, *rtt, EncapStack::by_name(stack)?))
        .collect::<Result<Vec<_>, _>>()?;
    let path = DeploymentPath {
        scenario: scenario.name().into(),
        legs,
        idfc_enabled: scenario != Scenario::CompatN3,
    };
    if !scenario.tunnel_legs().contains(&path.gtp_leg_count()) {
        return Err(PathError::Malformed(format!(
            "{scenario} has {} tunnelled legs, expected {:?}",
            path.gtp_leg_count(),
            scenario.tunnel_legs()
        )));
    }
    Ok(path)
}

/// `a - b` for each metric.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathComparison {
    pub rtt_delta_ms: f64,
    /// Share of `a`'s RTT that `b` saves.
    pub rtt_saving: f64,
    pub overhead_delta_bytes: i64,
    pub gtp_leg_delta: i64,
    pub wire_bytes_a: u64,
    pub wire_bytes_b: u64,
}

pub fn compare_paths(a: &DeploymentPath, b: &DeploymentPath, payload_bytes: u64) -> PathComparison {
    let (ra, rb) = (a.rtt_ms(), b.rtt_ms());
    PathComparison {
        rtt_delta_ms: ra - rb,
        rtt_saving: if ra > 0.0 { (ra - rb) / ra } else { 0.0 },
        overhead_delta_bytes: a.overhead_bytes() as i64 - b.overhead_bytes() as i64,
        gtp_leg_delta: a.gtp_leg_count() as i64 - b.gtp_leg_count() as i64,
        wire_bytes_a: payload_bytes + a.overhead_bytes(),
        wire_bytes_b: payload_bytes + b.overhead_bytes(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_sizes() {
        assert_eq!(EncapStack::plain_ip().total_bytes(), 0);
        assert_eq!(EncapStack::gtp_v4().total_bytes(), 36);
        assert_eq!(EncapStack::gtp_v6_ext().total_bytes(), 64);
        assert_eq!(EncapStack::by_name("gtpv4").unwrap().name, "GtpV4");
        assert!(EncapStack::by_name("mpls").is_err());
    }

    #[test]
    fn sizes_and_ratios() {
        assert_eq!(encapsulated_size(60, &EncapStack::gtp_v6_ext()), 124);
        assert_eq!(encapsulated_size(60, &EncapStack::plain_ip()), 60);
        assert_eq!(encapsulated_size(0, &EncapStack::gtp_v4()), 36);
        assert!((overhead_ratio(60, &EncapStack::gtp_v6_ext()) - 64.0 / 124.0).abs() < 1e-12);
        assert!((overhead_ratio(1440, &EncapStack::gtp_v4()) - 0.024390).abs() < 1e-5);
        assert_eq!(overhead_ratio(0, &EncapStack::plain_ip()), 0.0);
    }

    #[test]
    fn rtt_composition() {
        let legs: Vec<PathLeg> = [18.25, 1.07, 23.25]
            .iter()
            .map(|&r| PathLeg::new("l", r, EncapStack::plain_ip()).unwrap())
            .collect();
        assert!((compose_rtt(&legs).unwrap() - 42.57).abs() < 1e-9);
        assert!((compose_rtt(&legs[..1]).unwrap() - 18.25).abs() < 1e-12);
        assert_eq!(compose_rtt(&[]), Err(PathError::NoLegs));
        assert!(PathLeg::new("x", -1.0, EncapStack::plain_ip()).is_err());
    }

    #[test]
    fn shipped_scenarios() {
        let cfg = FittedConfig::shipped();
        let rtt = |s| build_deployment_path(s, &cfg).unwrap().rtt_ms();
        assert!((rtt(Scenario::WifiConverged) - 42.57).abs() < 1e-9);
        assert!((rtt(Scenario::CloudIUP) - 39.58).abs() / 39.58 < 0.01);
        assert!((rtt(Scenario::CloudFiveG) - 81.99).abs() / 81.99 < 0.01);
        assert!(rtt(Scenario::LocalFiveG) > rtt(Scenario::CloudIUP));
        let cloud = build_deployment_path(Scenario::CloudFiveG, &cfg).unwrap();
        assert_eq!(cloud.gtp_leg_count(), 2);
        let roam = build_deployment_path(Scenario::RoamingIUP, &cfg).unwrap();
        assert_eq!(roam.gtp_leg_count(), 0);
        assert!(!build_deployment_path(Scenario::CompatN3, &cfg).unwrap().idfc_enabled);
        assert!(build_deployment_path(Scenario::CompatN9, &cfg).unwrap().idfc_enabled);
    }

    #[test]
    fn comparisons() {
        let cfg = FittedConfig::shipped();
        let b = |s| build_deployment_path(s, &cfg).unwrap();
        let c = compare_paths(&b(Scenario::CloudFiveG), &b(Scenario::CloudIUP), 60);
        assert!(c.rtt_saving > 0.5);
        let same = compare_paths(&b(Scenario::CloudIUP), &b(Scenario::CloudIUP), 60);
        assert_eq!(same.rtt_delta_ms, 0.0);
        assert_eq!(same.overhead_delta_bytes, 0);
        assert_eq!(same.gtp_leg_delta, 0);
        let r = compare_paths(&b(Scenario::RoamingHomeRouted5G), &b(Scenario::RoamingIUP), 60);
        assert!(r.overhead_delta_bytes >= 64);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            FittedConfig::from_json("{\"Mars\": []}"),
            Err(PathError::UnknownScenario(_))
        ));
        assert!(matches!(FittedConfig::from_json("[1]"), Err(PathError::Malformed(_))));
        let empty = FittedConfig(BTreeMap::new());
        assert!(matches!(
            build_deployment_path(Scenario::CloudIUP, &empty),
            Err(PathError::MissingScenario(_))
        ));
        let bad = FittedConfig::from_json("{\"CloudIUP\": [[\"n3\", 1.0, \"GtpV4\"]]}").unwrap();
        assert!(matches!(
            build_deployment_path(Scenario::CloudIUP, &bad),
            Err(PathError::Malformed(_))
        ));
        assert_eq!("cloudiup".parse::<Scenario>().unwrap(), Scenario::CloudIUP);
    }
}
