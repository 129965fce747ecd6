//! Deterministic discrete-event engine. Binds the infrastructure, deployed
//! slices, CM tree, routers and endpoints; replays traffic and mobility and
//! collects metrics. Also runs the per-flow session-setup baseline.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cm::{CmConfig, CmTree, Granularity};
use crate::compose::{compose_slice, ComposeError, DeployedSlice, MappingKey, MappingPolicy, TunnelMapping};
use crate::endpoint::{Endpoint, EndpointError, EndpointKind, Endpoints, LadderCosts, MobilityStep};
use crate::ids::{LinkId, NnId, RouterId, VnId, VnNodeId};
use crate::infra::{load_infrastructure, validate_infrastructure, InfraSpec, Infrastructure, NodeKind};
use crate::op::{
    decapsulate, next_nn, process_header, route_packet, AlState, DedupWindow, DropReason, ForwardingDecision, Header,
    Packet, RouterState,
};
use crate::report::ValidationReport;
use crate::slice::{parse_vn_description, validate_vn, VnDescription, VnSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Mode {
    #[default]
    HopOn,
    SessionBaseline,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct SimConfig {
    pub duration_s: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Message traversals per session setup in the baseline.
    pub session_setup_messages: u32,
    pub session_idle_timeout_s: f64,
    /// Added at every VN router visit.
    pub processing_delay_s: f64,
    /// Added per CM message spent on a resolution.
    pub cm_message_delay_s: f64,
    /// Lifetime of resolved entries in router endpoint tables.
    pub cache_ttl_s: f64,
    pub granularity: Granularity,
    pub al_slot_s: f64,
    /// Access-link capacity for access nodes that do not declare one.
    pub al_capacity_bps: f64,
    pub max_packet_bits: f64,
    pub ladder: LadderCosts,
    pub utilization_window_s: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration_s: 10.0,
            seed: 0,
            mode: Mode::HopOn,
            session_setup_messages: 10,
            session_idle_timeout_s: 30.0,
            processing_delay_s: 0.0,
            cm_message_delay_s: 0.0,
            cache_ttl_s: 10.0,
            granularity: Granularity::Cluster,
            al_slot_s: 0.001,
            al_capacity_bps: 1e8,
            max_packet_bits: 12_000.0,
            ladder: LadderCosts::default(),
            utilization_window_s: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DeviceSpec {
    pub name: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub kind: EndpointKind,
    pub vn: VnId,
    pub nn: NnId,
    #[cfg_attr(feature = "serde", serde(default))]
    pub trace: Vec<MobilityStep>,
    /// Rate asked for at service admission; defaults to the slice CoS.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub requested_rate_bps: Option<f64>,
}

/// A flow: either periodic at `rate_bps` from `start_s`, or one packet at
/// each of `times_s`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrafficSpec {
    pub src: String,
    pub dst: String,
    pub size_bits: u32,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub rate_bps: Option<f64>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Vec::is_empty"))]
    pub times_s: Vec<f64>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub start_s: f64,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub stop_s: Option<f64>,
    /// Each gap is scaled by a uniform factor in `[1 - jitter, 1 + jitter)`.
    #[cfg_attr(feature = "serde", serde(default))]
    pub jitter: f64,
}

impl TrafficSpec {
    pub fn periodic(src: &str, dst: &str, size_bits: u32, rate_bps: f64) -> Self {
        Self {
            src: src.into(),
            dst: dst.into(),
            size_bits,
            rate_bps: Some(rate_bps),
            times_s: Vec::new(),
            start_s: 0.0,
            stop_s: None,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Scenario {
    pub infrastructure: InfraSpec,
    pub slices: Vec<VnSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub policy: MappingPolicy,
    #[cfg_attr(feature = "serde", serde(default))]
    pub cm: CmConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub devices: Vec<DeviceSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub traffic: Vec<TrafficSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub sim: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario:\n{0}")]
    Invalid(ValidationReport),
    #[error("vn {vn}: {source}")]
    Compose { vn: u32, source: ComposeError },
    #[error("{0}")]
    Runtime(String),
}

impl SimError {
    /// True for problems with the scenario itself rather than the run.
    pub fn is_scenario_error(&self) -> bool {
        matches!(self, SimError::Invalid(_) | SimError::Compose { .. })
    }
}

impl From<EndpointError> for SimError {
    fn from(e: EndpointError) -> Self {
        SimError::Runtime(e.to_string())
    }
}

/// Checks everything that can be checked without composing slices.
pub fn validate_scenario(s: &Scenario) -> (Option<Infrastructure>, Vec<VnDescription>, ValidationReport) {
    let mut report = ValidationReport::default();
    let infra = match load_infrastructure(&s.infrastructure) {
        Ok(i) => {
            report.extend(validate_infrastructure(&i));
            Some(i)
        }
        Err(e) => {
            report.error("infrastructure", e.to_string());
            None
        }
    };
    let mut vns = Vec::new();
    for (i, spec) in s.slices.iter().enumerate() {
        match parse_vn_description(spec) {
            Ok(vn) => {
                if vns.iter().any(|v: &VnDescription| v.id == vn.id) {
                    report.error(format!("slices[{i}]"), format!("duplicate {}", vn.id));
                }
                if let Some(infra) = &infra {
                    report.extend(validate_vn(&vn, infra));
                }
                vns.push(vn);
            }
            Err(e) => report.error(format!("slices[{i}]"), e.to_string()),
        }
    }
    if let Err(e) = s.policy.check() {
        report.error("policy", e);
    }

    let c = &s.sim;
    let positive = [
        ("duration_s", c.duration_s),
        ("al_slot_s", c.al_slot_s),
        ("al_capacity_bps", c.al_capacity_bps),
        ("max_packet_bits", c.max_packet_bits),
        ("utilization_window_s", c.utilization_window_s),
        ("cache_ttl_s", c.cache_ttl_s),
        ("session_idle_timeout_s", c.session_idle_timeout_s),
    ];
    for (name, v) in positive {
        if !(v.is_finite() && v > 0.0) {
            report.error(format!("sim.{name}"), format!("must be positive, got {v}"));
        }
    }
    for (name, v) in [("processing_delay_s", c.processing_delay_s), ("cm_message_delay_s", c.cm_message_delay_s)] {
        if !(v.is_finite() && v >= 0.0) {
            report.error(format!("sim.{name}"), format!("must be non-negative, got {v}"));
        }
    }

    let mut names = BTreeSet::new();
    for d in &s.devices {
        let loc = format!("devices[{}]", d.name);
        if d.name.is_empty() {
            report.error("devices", "empty device name");
        }
        if !names.insert(d.name.as_str()) {
            report.error(loc.clone(), "duplicate name");
        }
        if !vns.iter().any(|v| v.id == d.vn) {
            report.error(loc.clone(), format!("{} is not a slice", d.vn));
        }
        if let Some(infra) = &infra {
            match infra.node(d.nn) {
                None => report.error(loc.clone(), format!("{} does not exist", d.nn)),
                Some(n) => {
                    let want_core = d.kind == EndpointKind::Server;
                    if want_core != (n.kind == NodeKind::Core) {
                        let what =
                            if want_core { "servers attach to core nodes" } else { "devices attach to access nodes" };
                        report.error(loc.clone(), format!("{what}, {} is not one", d.nn));
                    }
                }
            }
            for (k, step) in d.trace.iter().enumerate() {
                let nns: Vec<NnId> = match step {
                    MobilityStep::Attach { nn, .. } => vec![*nn],
                    MobilityStep::Readings { readings, .. } => readings.iter().map(|r| r.0).collect(),
                };
                for nn in nns {
                    if !infra.node(nn).is_some_and(|n| n.is_access()) {
                        report.error(format!("{loc}.trace[{k}]"), format!("{nn} is not an access node"));
                    }
                }
                if let MobilityStep::Readings { readings, .. } = step {
                    if !readings.iter().any(|r| r.1 >= s.cm.threshold) {
                        report.error(format!("{loc}.trace[{k}]"), "no reading reaches the measurement threshold");
                    }
                }
            }
        }
        if !d.trace.is_empty() && d.kind != EndpointKind::Mobile {
            report.error(loc.clone(), "only mobile devices have a trace");
        }
        if d.trace.windows(2).any(|w| w[1].at_s() < w[0].at_s())
            || d.trace.iter().any(|t| t.at_s().is_nan() || t.at_s() < 0.0)
        {
            report.error(loc.clone(), "trace times must be non-negative and sorted");
        }
        if let Some(r) = d.requested_rate_bps {
            if !(r.is_finite() && r >= 0.0) {
                report.error(loc, format!("requested_rate_bps must be non-negative, got {r}"));
            }
        }
    }
    for (i, t) in s.traffic.iter().enumerate() {
        let loc = format!("traffic[{i}]");
        for (what, name) in [("src", &t.src), ("dst", &t.dst)] {
            if !names.contains(name.as_str()) {
                report.error(loc.clone(), format!("{what} {name:?} is not a device"));
            }
        }
        let same_vn = s
            .devices
            .iter()
            .find(|d| d.name == t.src)
            .zip(s.devices.iter().find(|d| d.name == t.dst))
            .is_none_or(|(a, b)| a.vn == b.vn);
        if !same_vn {
            report.error(loc.clone(), "src and dst are on different slices");
        }
        if t.size_bits == 0 {
            report.error(loc.clone(), "size_bits must be positive");
        }
        match (t.rate_bps, t.times_s.is_empty()) {
            (Some(r), true) if r.is_finite() && r > 0.0 => {}
            (Some(_), true) => report.error(loc.clone(), "rate_bps must be positive"),
            (None, false) => {}
            _ => report.error(loc.clone(), "give exactly one of rate_bps and times_s"),
        }
        if t.times_s.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || t.start_s.is_nan() || t.start_s < 0.0 {
            report.error(loc.clone(), "times must be non-negative");
        }
        if !(0.0..1.0).contains(&t.jitter) {
            report.error(loc, format!("jitter must be in [0, 1), got {}", t.jitter));
        }
    }
    (infra, vns, report)
}

/// Validates and composes every slice in order, each admitted against the
/// ones before it.
pub fn prepare(s: &Scenario) -> Result<(Infrastructure, Vec<DeployedSlice>), SimError> {
    let (infra, vns, report) = validate_scenario(s);
    let infra = match infra {
        Some(i) if !report.has_errors() => i,
        _ => return Err(SimError::Invalid(report)),
    };
    let mut deployed = Vec::new();
    for vn in &vns {
        let d = compose_slice(vn, &infra, &s.policy, &deployed)
            .map_err(|source| SimError::Compose { vn: vn.id.0, source })?;
        deployed.push(d);
    }
    Ok((infra, deployed))
}

// ---------------------------------------------------------------- events

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    Ul,
    Dl,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    TrafficEmit { flow: usize },
    PacketArrival { flight: u64 },
    ResolutionComplete { flight: u64 },
    AlSlot { nn: NnId, dir: Direction },
    DeviceMove { device: String, step: usize },
    SessionSetupStep { session: (String, String), step: u32 },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::TrafficEmit { .. } => "traffic_emit",
            EventKind::PacketArrival { .. } => "packet_arrival",
            EventKind::ResolutionComplete { .. } => "resolution_complete",
            EventKind::AlSlot { .. } => "al_slot",
            EventKind::DeviceMove { .. } => "device_move",
            EventKind::SessionSetupStep { .. } => "session_setup_step",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time_s: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time_s.total_cmp(&other.time_s).then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepResult {
    Processed { time_s: f64, kind: &'static str },
    End,
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct LatencyStats {
    pub count: u64,
    pub min_s: f64,
    pub mean_s: f64,
    pub p99_s: f64,
    pub max_s: f64,
    pub variance_s2: f64,
}

impl LatencyStats {
    /// Welford running mean and variance: identical samples give exactly 0.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, x) in samples.iter().enumerate() {
            let delta = x - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (x - mean);
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let rank = (99 * n).div_ceil(100).max(1);
        Self {
            count: n as u64,
            min_s: sorted[0],
            mean_s: mean,
            p99_s: sorted[rank - 1],
            max_s: sorted[n - 1],
            variance_s2: m2 / n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Signaling {
    pub registration: u64,
    pub cm: u64,
    pub al: u64,
    pub session_baseline: u64,
}

impl Signaling {
    pub fn total(&self) -> u64 {
        self.registration + self.cm + self.al + self.session_baseline
    }

    /// Everything spent after registration.
    pub fn per_packet_total(&self) -> u64 {
        self.cm + self.al + self.session_baseline
    }

    fn add(&mut self, o: &Signaling) {
        self.registration += o.registration;
        self.cm += o.cm;
        self.al += o.al;
        self.session_baseline += o.session_baseline;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct VnMetrics {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: BTreeMap<String, u64>,
    pub dropped_total: u64,
    pub in_flight_at_end: u64,
    pub delivery_ratio: f64,
    pub latency: LatencyStats,
    pub signaling: Signaling,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct LinkMetrics {
    /// Busiest direction over the run.
    pub mean_utilization: f64,
    /// Busiest direction over any utilization window.
    pub peak_utilization: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct DeviceMetrics {
    pub vn: u32,
    pub sent: u64,
    /// Packets sent to this endpoint.
    pub addressed: u64,
    pub received: u64,
    /// `received / addressed`; 1 when nothing was addressed.
    pub delivery_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MetricsReport {
    pub mode: &'static str,
    pub seed: u64,
    pub duration_s: f64,
    pub vns: BTreeMap<u32, VnMetrics>,
    pub links: BTreeMap<u32, LinkMetrics>,
    pub devices: BTreeMap<String, DeviceMetrics>,
    pub signaling: Signaling,
}

/// One line of the optional event trace.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct TraceRow {
    pub time_s: f64,
    pub event: &'static str,
    pub vn: u32,
    pub packet: Option<u64>,
    pub node: Option<u32>,
    pub detail: String,
}

/// A delivered packet, kept for invariant checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub packet: u64,
    pub vn: VnId,
    pub latency_s: f64,
    pub prop_delay_s: f64,
}

// ---------------------------------------------------------------- state

#[derive(Debug, Clone, PartialEq)]
enum Target {
    VnNode(VnNodeId),
    Endpoint,
}

#[derive(Debug, Clone, PartialEq)]
enum Leg {
    /// Carried by a mapped tunnel; the header drives each hop.
    Tunnel { key: MappingKey },
    /// Shortest physical path outside any tunnel: the device-to-anchor
    /// association and local delivery.
    Plain { nodes: Vec<NnId>, idx: usize, then: Target },
    /// Routed at a VN node, waiting for resolution or processing delay.
    Decided { node: VnNodeId, decision: ForwardingDecision },
    /// Queued on an access link since `since`.
    Access { since: f64 },
}

#[derive(Debug, Clone)]
struct Flight {
    packet: Packet,
    slice: usize,
    at: NnId,
    leg: Leg,
    latency_s: f64,
    prop_s: f64,
}

#[derive(Debug, Clone)]
struct PacketRecord {
    slice: usize,
    copies: u32,
    done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum ServerKey {
    Shared { link: LinkId, from: NnId },
    Dedicated { link: LinkId, from: NnId, vn: VnId, resource: u32 },
}

#[derive(Debug, Clone, Default)]
struct VnAcc {
    sent: u64,
    delivered: u64,
    dropped: BTreeMap<&'static str, u64>,
    latencies: Vec<f64>,
    signaling: Signaling,
}

#[derive(Debug, Clone, Default)]
struct DeviceAcc {
    sent: u64,
    addressed: u64,
    received: u64,
}

#[derive(Debug, Clone, PartialEq)]
enum SessionState {
    Idle,
    Establishing { held: Vec<u64> },
    Up { last_activity: f64, stale: bool },
}

#[derive(Debug)]
struct Flow {
    spec: TrafficSpec,
    rng: ChaCha8Rng,
}

#[derive(Debug)]
pub struct Engine {
    config: SimConfig,
    infra: Infrastructure,
    deployed: Vec<DeployedSlice>,
    cm: CmTree,
    endpoints: Endpoints,
    routers: BTreeMap<(usize, RouterId), RouterState>,
    al: BTreeMap<(NnId, Direction), AlState>,
    al_pending: BTreeSet<(NnId, Direction)>,
    dl_attached: BTreeMap<String, BTreeSet<NnId>>,
    rx_dedup: BTreeMap<String, DedupWindow>,
    servers: BTreeMap<ServerKey, f64>,
    dedicated_rate: BTreeMap<(VnId, u32), f64>,
    dedicated_on_link: BTreeMap<LinkId, f64>,
    path_sent: BTreeMap<(usize, MappingKey), Vec<f64>>,
    /// (link, from) → window index → bits.
    usage: BTreeMap<(LinkId, NnId), BTreeMap<u64, f64>>,
    flows: Vec<Flow>,
    sessions: BTreeMap<(String, String), SessionState>,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: f64,
    flights: BTreeMap<u64, Flight>,
    next_flight: u64,
    next_packet: u64,
    packets: BTreeMap<u64, PacketRecord>,
    vn_acc: Vec<VnAcc>,
    device_acc: BTreeMap<String, DeviceAcc>,
    deliveries: Vec<Delivery>,
    trace: Option<Vec<TraceRow>>,
    traces: BTreeMap<String, Vec<MobilityStep>>,
}

impl Engine {
    /// Composes slices, registers every endpoint at t = 0 and schedules the
    /// traffic and mobility.
    pub fn new(s: &Scenario) -> Result<Self, SimError> {
        let (infra, deployed) = prepare(s)?;
        let config = s.sim.clone();
        let cm = CmTree::new(&infra, s.cm);

        let mut dedicated_rate = BTreeMap::new();
        let mut dedicated_on_link: BTreeMap<LinkId, f64> = BTreeMap::new();
        for m in deployed.iter().flat_map(|d| &d.mappings) {
            if let Some(r) = m.resource_id {
                dedicated_rate.insert((m.vn, r), m.primary().reserved_bps);
                for l in &m.primary().links {
                    *dedicated_on_link.entry(*l).or_insert(0.0) += m.primary().reserved_bps;
                }
            }
        }

        let mut al = BTreeMap::new();
        for n in infra.nodes().filter(|n| n.is_access()) {
            let cap = n.al_capacity_bps.unwrap_or(config.al_capacity_bps);
            for dir in [Direction::Ul, Direction::Dl] {
                let mut st = AlState::new(n.id, cap, config.al_slot_s).map_err(|e| SimError::Runtime(e.to_string()))?;
                for d in &deployed {
                    let p = d.vn.al_policy(n.id);
                    let rate = if dir == Direction::Ul { p.ul_qos.rate_bps } else { p.dl_qos.rate_bps };
                    if p.pre_assigned && rate > 0.0 {
                        st.set_partition(d.vn.id, rate).map_err(|e| SimError::Runtime(format!("{}: {e}", n.id)))?;
                    }
                }
                al.insert((n.id, dir), st);
            }
        }

        let mut routers = BTreeMap::new();
        for (i, d) in deployed.iter().enumerate() {
            for r in &d.routers {
                routers.insert((i, r.id), RouterState::new(config.cache_ttl_s, config.granularity));
            }
        }

        let mut endpoints = Endpoints::new(config.ladder, config.max_packet_bits);
        for d in &s.devices {
            endpoints.add(Endpoint::new(&d.name, d.kind, d.vn, d.nn));
        }
        let mut engine = Self {
            vn_acc: vec![VnAcc::default(); deployed.len()],
            config,
            infra,
            deployed,
            cm,
            endpoints,
            routers,
            al,
            al_pending: BTreeSet::new(),
            dl_attached: BTreeMap::new(),
            rx_dedup: BTreeMap::new(),
            servers: BTreeMap::new(),
            dedicated_rate,
            dedicated_on_link,
            path_sent: BTreeMap::new(),
            usage: BTreeMap::new(),
            flows: Vec::new(),
            sessions: BTreeMap::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            flights: BTreeMap::new(),
            next_flight: 0,
            next_packet: 0,
            packets: BTreeMap::new(),
            device_acc: BTreeMap::new(),
            deliveries: Vec::new(),
            trace: None,
            traces: s.devices.iter().map(|d| (d.name.clone(), d.trace.clone())).collect(),
        };
        let mut specs: Vec<&DeviceSpec> = s.devices.iter().collect();
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        for d in specs {
            engine.register(d)?;
        }
        for (i, t) in s.traffic.iter().enumerate() {
            let rng = ChaCha8Rng::seed_from_u64(s.sim.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            engine.flows.push(Flow { spec: t.clone(), rng });
            if t.times_s.is_empty() {
                engine.schedule(t.start_s, EventKind::TrafficEmit { flow: i });
            } else {
                for at in &t.times_s {
                    engine.schedule(*at, EventKind::TrafficEmit { flow: i });
                }
            }
        }
        for d in &s.devices {
            for (k, step) in d.trace.iter().enumerate() {
                engine.schedule(step.at_s(), EventKind::DeviceMove { device: d.name.clone(), step: k });
            }
        }
        Ok(engine)
    }

    /// Turns on the event trace. Metrics are unaffected.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn deployed(&self) -> &[DeployedSlice] {
        &self.deployed
    }

    pub fn infrastructure(&self) -> &Infrastructure {
        &self.infra
    }

    pub fn cm(&self) -> &CmTree {
        &self.cm
    }

    pub fn endpoints(&self) -> &Endpoints {
        &self.endpoints
    }

    pub fn deliveries(&self) -> &[Delivery] {
        &self.deliveries
    }

    pub fn trace(&self) -> &[TraceRow] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Queues an event; times before the current time are clamped to it.
    pub fn schedule(&mut self, time_s: f64, kind: EventKind) {
        let time_s = time_s.max(self.now);
        self.seq += 1;
        self.queue.push(Reverse(Event { time_s, seq: self.seq, kind }));
    }

    fn slice_of(&self, vn: VnId) -> Option<usize> {
        self.deployed.iter().position(|d| d.vn.id == vn)
    }

    fn log(&mut self, event: &'static str, vn: VnId, packet: Option<u64>, node: Option<NnId>, detail: String) {
        if let Some(t) = &mut self.trace {
            t.push(TraceRow { time_s: self.now, event, vn: vn.0, packet, node: node.map(|n| n.0), detail });
        }
    }

    fn register(&mut self, d: &DeviceSpec) -> Result<(), SimError> {
        let slice = self.slice_of(d.vn).ok_or_else(|| SimError::Runtime(format!("{} is not deployed", d.vn)))?;
        let r = self.endpoints.register(&d.name, &self.deployed, &self.infra, &mut self.cm, 0.0)?;
        self.vn_acc[slice].signaling.registration += u64::from(r.messages);
        self.device_acc.entry(d.name.clone()).or_default();
        self.rx_dedup.insert(d.name.clone(), DedupWindow::default());
        if d.kind != EndpointKind::Mobile {
            for ((s, _), st) in self.routers.iter_mut().filter(|((s, _), _)| *s == slice) {
                st.endpoints.install_fixed(self.deployed[*s].vn.id, &d.name, r.anchor);
            }
        }
        if d.kind != EndpointKind::Server {
            let cos = self.deployed[slice].vn.device_cos.rate_bps;
            for dir in [Direction::Ul, Direction::Dl] {
                if let Some(al) = self.al.get_mut(&(d.nn, dir)) {
                    al.attach(&d.name, d.vn, cos);
                }
            }
            self.dl_attached.insert(d.name.clone(), BTreeSet::from([d.nn]));
        }
        if r.ac_required {
            let rate = d.requested_rate_bps.unwrap_or(self.deployed[slice].vn.device_cos.rate_bps);
            self.endpoints.request_service_admission(&d.name, rate, &self.deployed)?;
        }
        self.log("register", d.vn, None, Some(d.nn), format!("{} anchor {} messages {}", d.name, r.anchor, r.messages));
        Ok(())
    }

    /// Processes the next event, or reports the end of the run once the
    /// queue is empty or the next event lies past the duration.
    pub fn step(&mut self) -> Result<StepResult, SimError> {
        let next_time = match self.queue.peek() {
            Some(Reverse(e)) => e.time_s,
            None => return Ok(StepResult::End),
        };
        if next_time > self.config.duration_s {
            return Ok(StepResult::End);
        }
        let Reverse(ev) = self.queue.pop().expect("peeked");
        self.now = ev.time_s;
        let kind = ev.kind.name();
        match ev.kind {
            EventKind::TrafficEmit { flow } => self.emit(flow)?,
            EventKind::PacketArrival { flight } => self.advance(flight),
            EventKind::ResolutionComplete { flight } => {
                if let Some(f) = self.flights.get_mut(&flight) {
                    if let Leg::Decided { node, decision } = core::mem::replace(&mut f.leg, Leg::Access { since: 0.0 })
                    {
                        self.apply_decision(flight, node, decision);
                    }
                }
            }
            EventKind::AlSlot { nn, dir } => self.al_slot(nn, dir),
            EventKind::DeviceMove { device, step } => self.device_move(&device, step)?,
            EventKind::SessionSetupStep { session, step } => self.session_step(session, step),
        }
        Ok(StepResult::Processed { time_s: self.now, kind })
    }

    pub fn run(mut self) -> Result<(MetricsReport, Vec<TraceRow>), SimError> {
        while let StepResult::Processed { .. } = self.step()? {}
        let report = self.report();
        Ok((report, self.trace.take().unwrap_or_default()))
    }

    // ------------------------------------------------------------ traffic

    fn emit(&mut self, flow: usize) -> Result<(), SimError> {
        let f = &mut self.flows[flow];
        let spec = f.spec.clone();
        if let Some(rate) = spec.rate_bps {
            let mut gap = spec.size_bits as f64 / rate;
            if spec.jitter > 0.0 {
                let u: f64 = f.rng.random();
                gap *= 1.0 + spec.jitter * (2.0 * u - 1.0);
            }
            let next = self.now + gap;
            if next < spec.stop_s.unwrap_or(f64::INFINITY) {
                self.schedule(next, EventKind::TrafficEmit { flow });
            }
        }

        let src = self.endpoints.get(&spec.src).ok_or_else(|| SimError::Runtime(format!("unknown {}", spec.src)))?;
        let (vn_id, src_nn, src_kind) = (src.vn, src.nn, src.kind);
        let slice = self.slice_of(vn_id).expect("registered");
        let id = self.next_packet;
        self.next_packet += 1;
        let packet = Packet::new(id, &self.deployed[slice].vn, &spec.src, &spec.dst, spec.size_bits, self.now);
        self.vn_acc[slice].sent += 1;
        self.device_acc.entry(spec.src.clone()).or_default().sent += 1;
        self.device_acc.entry(spec.dst.clone()).or_default().addressed += 1;
        self.packets.insert(id, PacketRecord { slice, copies: 1, done: false });
        let fid = self.new_flight(Flight {
            packet,
            slice,
            at: src_nn,
            leg: Leg::Access { since: self.now },
            latency_s: 0.0,
            prop_s: 0.0,
        });
        self.log("emit", vn_id, Some(id), Some(src_nn), format!("{} -> {}", spec.src, spec.dst));

        match self.endpoints.hop_on_send(&spec.src, &spec.dst, spec.size_bits as f64, &self.deployed, self.now) {
            Ok(out) => {
                self.vn_acc[slice].signaling.al += u64::from(out.al_messages);
                if !out.accepted {
                    self.lose(fid, DropReason::Policed);
                    return Ok(());
                }
            }
            Err(EndpointError::NotAdmitted(_)) => {
                self.lose(fid, DropReason::NotAdmitted);
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        }

        if self.config.mode == Mode::SessionBaseline {
            let key = (spec.src.clone(), spec.dst.clone());
            let state = self.sessions.entry(key.clone()).or_insert(SessionState::Idle);
            match state {
                SessionState::Up { last_activity, stale: false }
                    if self.now - *last_activity <= self.config.session_idle_timeout_s =>
                {
                    *last_activity = self.now;
                }
                SessionState::Establishing { held } => {
                    held.push(fid);
                    return Ok(());
                }
                _ => {
                    *state = SessionState::Establishing { held: vec![fid] };
                    let d = self.path_delay(&spec.src, &spec.dst);
                    for k in 1..=self.config.session_setup_messages {
                        self.schedule(
                            self.now + d * k as f64,
                            EventKind::SessionSetupStep { session: key.clone(), step: k },
                        );
                    }
                    if self.config.session_setup_messages == 0 {
                        self.sessions.insert(key, SessionState::Up { last_activity: self.now, stale: false });
                    } else {
                        return Ok(());
                    }
                }
            }
        }
        self.inject(fid, src_kind);
        Ok(())
    }

    fn path_delay(&self, a: &str, b: &str) -> f64 {
        let (Some(a), Some(b)) = (self.endpoints.get(a), self.endpoints.get(b)) else {
            return 0.0;
        };
        self.infra.physical_paths(a.nn, b.nn, 1).map(|p| p[0].delay_s).unwrap_or(0.0)
    }

    fn session_step(&mut self, key: (String, String), step: u32) {
        let Some(slice) = self.endpoints.get(&key.0).and_then(|e| self.slice_of(e.vn)) else {
            return;
        };
        self.vn_acc[slice].signaling.session_baseline += 1;
        if step < self.config.session_setup_messages {
            return;
        }
        let held = match self.sessions.insert(key.clone(), SessionState::Up { last_activity: self.now, stale: false }) {
            Some(SessionState::Establishing { held }) => held,
            _ => Vec::new(),
        };
        let vn = self.deployed[slice].vn.id;
        self.log("session_up", vn, None, None, format!("{} -> {}", key.0, key.1));
        let kind = self.endpoints.get(&key.0).map(|e| e.kind).unwrap_or_default();
        for fid in held {
            self.inject(fid, kind);
        }
    }

    /// Puts a freshly sent packet on its way: the uplink access queue for a
    /// device, straight into the network for a server.
    fn inject(&mut self, fid: u64, kind: EndpointKind) {
        let Some(f) = self.flights.get(&fid) else { return };
        let name = f.packet.source.clone();
        let bits = f64::from(f.packet.size_bits);
        let nn = self.endpoints.get(&name).map_or(f.at, |e| e.nn);
        if kind == EndpointKind::Server {
            self.flights.get_mut(&fid).expect("present").at = nn;
            self.ingress(fid);
            return;
        }
        let f = self.flights.get_mut(&fid).expect("present");
        f.at = nn;
        f.leg = Leg::Access { since: self.now };
        match self.al.get_mut(&(nn, Direction::Ul)).map(|al| al.enqueue(&name, fid, bits)) {
            Some(Ok(())) => self.kick_al(nn, Direction::Ul),
            _ => self.lose(fid, DropReason::StaleAccessNode),
        }
    }

    fn kick_al(&mut self, nn: NnId, dir: Direction) {
        if self.al_pending.insert((nn, dir)) {
            self.schedule(self.now + self.config.al_slot_s, EventKind::AlSlot { nn, dir });
        }
    }

    fn al_slot(&mut self, nn: NnId, dir: Direction) {
        self.al_pending.remove(&(nn, dir));
        let Some(al) = self.al.get_mut(&(nn, dir)) else { return };
        let grants = al.schedule();
        let backlog = al.backlog_bits() > 0.0;
        for g in grants {
            for fid in g.completed {
                if let Some(f) = self.flights.get_mut(&fid) {
                    if let Leg::Access { since } = f.leg {
                        f.latency_s += self.now - since;
                    }
                }
                match dir {
                    Direction::Ul => self.ingress(fid),
                    Direction::Dl => self.deliver(fid),
                }
            }
        }
        if backlog {
            self.kick_al(nn, dir);
        }
    }

    /// First network node of a packet: the uplink open tunnel of the access
    /// node if there is one, else a plain path to the anchor VN node.
    fn ingress(&mut self, fid: u64) {
        let Some(f) = self.flights.get(&fid) else { return };
        let (slice, nn) = (f.slice, f.at);
        let vn = &self.deployed[slice].vn;
        if let Some(o) = vn.ul_open_tunnel_at(nn) {
            let key = MappingKey::Open(o.id);
            if self.deployed[slice].mapping(key).is_some() {
                self.encapsulate(fid, key);
                return;
            }
        }
        match vn.anchor_for_nn(&self.infra, nn) {
            Some(anchor) => {
                let host = vn.nodes[&anchor].nn;
                self.plain(fid, host, Target::VnNode(anchor));
            }
            None => self.lose(fid, DropReason::NoRoute),
        }
    }

    fn new_flight(&mut self, f: Flight) -> u64 {
        let id = self.next_flight;
        self.next_flight += 1;
        self.flights.insert(id, f);
        id
    }

    // ------------------------------------------------------------ forwarding

    fn plain(&mut self, fid: u64, to: NnId, then: Target) {
        let Some(f) = self.flights.get_mut(&fid) else { return };
        let nodes = if f.at == to {
            vec![to]
        } else {
            match self.infra.physical_paths(f.at, to, 1) {
                Ok(p) => p[0].nodes.clone(),
                Err(_) => return self.lose(fid, DropReason::NoRoute),
            }
        };
        f.leg = Leg::Plain { nodes, idx: 0, then };
        self.advance(fid);
    }

    /// Picks the path a packet takes through a mapping: the one whose share
    /// of the tunnel rate is furthest behind.
    fn pick_path(&mut self, slice: usize, m: &TunnelMapping, bits: f64) -> usize {
        if m.paths.len() == 1 {
            return 0;
        }
        let sent = self.path_sent.entry((slice, m.key)).or_insert_with(|| vec![0.0; m.paths.len()]);
        let mut best = 0;
        let mut best_score = f64::INFINITY;
        for (i, p) in m.paths.iter().enumerate() {
            let score = (sent[i] + bits) / p.rate_bps;
            if score < best_score {
                best = i;
                best_score = score;
            }
        }
        sent[best] += bits;
        best
    }

    fn encapsulate(&mut self, fid: u64, key: MappingKey) {
        let Some(f) = self.flights.get(&fid) else { return };
        let slice = f.slice;
        let Some(m) = self.deployed[slice].mapping(key).cloned() else {
            return self.lose(fid, DropReason::NoRoute);
        };
        let path = self.pick_path(slice, &m, f64::from(f.packet.size_bits));
        let f = self.flights.get_mut(&fid).expect("present");
        if process_header(&m, &self.deployed[slice].vn, &mut f.packet, path).is_err() {
            return self.lose(fid, DropReason::Header);
        }
        f.leg = Leg::Tunnel { key };
        self.advance(fid);
    }

    /// Handles a packet sitting at `flight.at`: next hop, tunnel end or
    /// plain-path end.
    fn advance(&mut self, fid: u64) {
        let Some(f) = self.flights.get_mut(&fid) else { return };
        let at = f.at;
        match &mut f.leg {
            Leg::Tunnel { key } => {
                let key = *key;
                let slice = &self.deployed[f.slice];
                match next_nn(&mut f.packet, at, &self.infra, slice) {
                    Ok(Some(next)) => self.transmit(fid, next),
                    Ok(None) => {
                        let m = slice.mapping(key).expect("encapsulated by this mapping");
                        if decapsulate(m, &slice.vn, &mut f.packet).is_err() {
                            return self.lose(fid, DropReason::Header);
                        }
                        match f.packet.header {
                            Header::VnRouted { node } => self.at_vn_node(fid, node),
                            _ => self.reach_endpoint(fid),
                        }
                    }
                    Err(_) => self.lose(fid, DropReason::Header),
                }
            }
            Leg::Plain { nodes, idx, then } => {
                if *idx + 1 < nodes.len() {
                    *idx += 1;
                    let next = nodes[*idx];
                    self.transmit(fid, next);
                } else {
                    match then.clone() {
                        Target::VnNode(n) => self.at_vn_node(fid, n),
                        Target::Endpoint => self.reach_endpoint(fid),
                    }
                }
            }
            Leg::Decided { .. } | Leg::Access { .. } => {}
        }
    }

    fn transmit(&mut self, fid: u64, to: NnId) {
        let Some(f) = self.flights.get(&fid) else { return };
        let from = f.at;
        let Some(link) = self.infra.link_between(from, to) else {
            return self.lose(fid, DropReason::NoRoute);
        };
        let (link_id, prop, link_cap) = (link.id, link.prop_delay_s, link.capacity_bps);
        let (key, cap) = match f.packet.header {
            Header::Dedicated { vn, resource } => (
                ServerKey::Dedicated { link: link_id, from, vn, resource },
                self.dedicated_rate.get(&(vn, resource)).copied().unwrap_or(0.0),
            ),
            _ => (
                ServerKey::Shared { link: link_id, from },
                link_cap - self.dedicated_on_link.get(&link_id).copied().unwrap_or(0.0),
            ),
        };
        if cap.is_nan() || cap <= 0.0 {
            return self.lose(fid, DropReason::NoRoute);
        }
        let bits = f64::from(f.packet.size_bits);
        let busy = self.servers.entry(key).or_insert(0.0);
        let wait = (*busy - self.now).max(0.0);
        let service = bits / cap;
        let start = self.now + wait;
        let finish = start + service;
        *busy = finish;
        self.record_usage(link_id, from, start, finish, cap);

        let f = self.flights.get_mut(&fid).expect("present");
        f.latency_s += wait + service + prop;
        f.prop_s += prop;
        f.at = to;
        self.schedule(finish + prop, EventKind::PacketArrival { flight: fid });
    }

    fn record_usage(&mut self, link: LinkId, from: NnId, start: f64, finish: f64, rate: f64) {
        let w = self.config.utilization_window_s;
        let end = finish.min(self.config.duration_s);
        let windows = self.usage.entry((link, from)).or_default();
        let mut t = start;
        while t < end {
            let idx = (t / w) as u64;
            let window_end = ((idx + 1) as f64 * w).min(end);
            if window_end <= t {
                break;
            }
            *windows.entry(idx).or_insert(0.0) += rate * (window_end - t);
            t = window_end;
        }
    }

    fn at_vn_node(&mut self, fid: u64, node: VnNodeId) {
        let Some(f) = self.flights.get_mut(&fid) else { return };
        let slice = f.slice;
        let d = &self.deployed[slice];
        let Some(router) = d.router_serving(node) else {
            return self.lose(fid, DropReason::NoRoute);
        };
        let state = self.routers.get_mut(&(slice, router.id)).expect("one state per router");
        let out = route_packet(router, state, &mut f.packet, &self.cm, &d.vn, &self.infra, self.now);
        self.vn_acc[slice].signaling.cm += u64::from(out.cm_messages);
        let delay = self.config.processing_delay_s + self.config.cm_message_delay_s * f64::from(out.cm_messages);
        if delay > 0.0 {
            f.latency_s += delay;
            f.leg = Leg::Decided { node, decision: out.decision };
            self.schedule(self.now + delay, EventKind::ResolutionComplete { flight: fid });
        } else {
            self.apply_decision(fid, node, out.decision);
        }
    }

    fn apply_decision(&mut self, fid: u64, node: VnNodeId, decision: ForwardingDecision) {
        let Some(f) = self.flights.get(&fid) else { return };
        let slice = f.slice;
        match decision {
            ForwardingDecision::Drop(reason) => self.lose(fid, reason),
            ForwardingDecision::Forward { tunnel, .. } => self.encapsulate(fid, MappingKey::Tunnel(tunnel)),
            ForwardingDecision::OpenTunnels { ids, .. } => {
                let extra = ids.len().saturating_sub(1) as u32;
                if let Some(rec) = self.packets.get_mut(&f.packet.id) {
                    rec.copies += extra;
                }
                let template = f.clone();
                for (i, id) in ids.iter().enumerate() {
                    let copy = if i == 0 { fid } else { self.new_flight(template.clone()) };
                    self.encapsulate(copy, MappingKey::Open(*id));
                }
            }
            ForwardingDecision::DeliverLocal => {
                let dest = f.packet.destination.clone();
                let Some(ep) = self.endpoints.get(&dest) else {
                    return self.lose(fid, DropReason::Unresolved);
                };
                let (kind, nn) = (ep.kind, ep.nn);
                if kind != EndpointKind::Server {
                    // The anchor knows its attached devices and reaches them
                    // over its downlink open tunnel when it has one.
                    let router = self.deployed[slice].router_serving(node);
                    let open = router.and_then(|r| r.dl_open_tunnels().find(|(_, to)| *to == nn).map(|(id, _)| id));
                    if let Some(id) = open {
                        return self.encapsulate(fid, MappingKey::Open(id));
                    }
                }
                self.plain(fid, nn, Target::Endpoint);
            }
        }
    }

    /// The packet is at an NN serving (or hosting) its destination.
    fn reach_endpoint(&mut self, fid: u64) {
        let Some(f) = self.flights.get_mut(&fid) else { return };
        let dest = f.packet.destination.clone();
        let at = f.at;
        let Some(ep) = self.endpoints.get(&dest) else {
            return self.lose(fid, DropReason::Unresolved);
        };
        if ep.kind == EndpointKind::Server {
            if ep.nn == at {
                self.deliver(fid);
            } else {
                self.lose(fid, DropReason::StaleAccessNode);
            }
            return;
        }
        let bits = f64::from(f.packet.size_bits);
        f.leg = Leg::Access { since: self.now };
        match self.al.get_mut(&(at, Direction::Dl)) {
            Some(al) if al.has_device(&dest) => {
                al.enqueue(&dest, fid, bits).expect("attached");
                self.kick_al(at, Direction::Dl);
            }
            _ => self.lose(fid, DropReason::StaleAccessNode),
        }
    }

    fn deliver(&mut self, fid: u64) {
        let Some(f) = self.flights.remove(&fid) else { return };
        let id = f.packet.id;
        let vn = self.deployed[f.slice].vn.id;
        let fresh = self.rx_dedup.get_mut(&f.packet.destination).is_none_or(|d| d.insert(id));
        let Some(rec) = self.packets.get_mut(&id) else { return };
        rec.copies -= 1;
        let first = fresh && !rec.done;
        rec.done |= first;
        if rec.copies == 0 {
            self.packets.remove(&id);
        }
        if first {
            let acc = &mut self.vn_acc[f.slice];
            acc.delivered += 1;
            acc.latencies.push(f.latency_s);
            self.device_acc.entry(f.packet.destination.clone()).or_default().received += 1;
            self.deliveries.push(Delivery { packet: id, vn, latency_s: f.latency_s, prop_delay_s: f.prop_s });
            self.log("deliver", vn, Some(id), Some(f.at), format!("latency {:.9}", f.latency_s));
        }
    }

    /// One copy is gone. The packet counts as dropped once its last copy is
    /// lost without any having been delivered.
    fn lose(&mut self, fid: u64, reason: DropReason) {
        let Some(f) = self.flights.remove(&fid) else { return };
        let id = f.packet.id;
        let Some(rec) = self.packets.get_mut(&id) else { return };
        rec.copies -= 1;
        if rec.copies == 0 {
            if !rec.done {
                *self.vn_acc[rec.slice].dropped.entry(reason.as_str()).or_insert(0) += 1;
                let vn = self.deployed[rec.slice].vn.id;
                self.log("drop", vn, Some(id), Some(f.at), reason.as_str().to_string());
            }
            self.packets.remove(&id);
        }
    }

    // ------------------------------------------------------------ mobility

    fn device_move(&mut self, name: &str, step_idx: usize) -> Result<(), SimError> {
        let Some(step) = self.trace_step(name, step_idx) else { return Ok(()) };
        let ep = self.endpoints.get(name).ok_or_else(|| SimError::Runtime(format!("unknown {name}")))?;
        let (old_nn, vn) = (ep.nn, ep.vn);
        let slice = self.slice_of(vn).expect("registered");
        let ev = self.endpoints.apply_move(name, &step, &self.infra, &mut self.cm, self.now)?;
        self.vn_acc[slice].signaling.cm += u64::from(ev.messages);
        let new_nn = self.endpoints.get(name).expect("present").nn;
        let cos = self.deployed[slice].vn.device_cos.rate_bps;

        if new_nn != old_nn {
            let queued = self.al.get_mut(&(old_nn, Direction::Ul)).map(|a| a.detach(name)).unwrap_or_default();
            let ul = self.al.get_mut(&(new_nn, Direction::Ul)).expect("access node");
            ul.attach(name, vn, cos);
            for fid in &queued {
                if let Some(f) = self.flights.get_mut(fid) {
                    f.at = new_nn;
                    ul.enqueue(name, *fid, f64::from(f.packet.size_bits)).expect("attached");
                }
            }
            if !queued.is_empty() {
                self.kick_al(new_nn, Direction::Ul);
            }
        }

        // The radio hears every node above the threshold.
        let mut hear: BTreeSet<NnId> = match &step {
            MobilityStep::Attach { nn, .. } => BTreeSet::from([*nn]),
            MobilityStep::Readings { readings, .. } => {
                readings.iter().filter(|r| r.1 >= self.cm.config().threshold).map(|r| r.0).collect()
            }
        };
        hear.insert(new_nn);
        let before = self.dl_attached.insert(name.to_string(), hear.clone()).unwrap_or_default();
        for nn in before.difference(&hear) {
            let lost = self.al.get_mut(&(*nn, Direction::Dl)).map(|a| a.detach(name)).unwrap_or_default();
            for fid in lost {
                self.lose(fid, DropReason::StaleAccessNode);
            }
        }
        for nn in hear.difference(&before) {
            if let Some(a) = self.al.get_mut(&(*nn, Direction::Dl)) {
                a.attach(name, vn, cos);
            }
        }

        let cluster = |nn: NnId| self.infra.node(nn).and_then(|n| n.cluster);
        if cluster(old_nn) != cluster(new_nn) {
            for ((src, dst), s) in self.sessions.iter_mut() {
                if src == name || dst == name {
                    if let SessionState::Up { stale, .. } = s {
                        *stale = true;
                    }
                }
            }
        }
        self.log("move", vn, None, Some(new_nn), format!("{name} from {old_nn} messages {}", ev.messages));
        Ok(())
    }

    fn trace_step(&self, name: &str, idx: usize) -> Option<MobilityStep> {
        self.traces.get(name).and_then(|t| t.get(idx)).cloned()
    }

    // ------------------------------------------------------------ metrics

    pub fn report(&self) -> MetricsReport {
        let mut vns = BTreeMap::new();
        let mut total = Signaling::default();
        for (i, acc) in self.vn_acc.iter().enumerate() {
            let in_flight = self.packets.values().filter(|r| r.slice == i && !r.done).count() as u64;
            let dropped_total = acc.dropped.values().sum();
            total.add(&acc.signaling);
            vns.insert(
                self.deployed[i].vn.id.0,
                VnMetrics {
                    sent: acc.sent,
                    delivered: acc.delivered,
                    dropped: acc.dropped.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                    dropped_total,
                    in_flight_at_end: in_flight,
                    delivery_ratio: if acc.sent == 0 { 1.0 } else { acc.delivered as f64 / acc.sent as f64 },
                    latency: LatencyStats::from_samples(&acc.latencies),
                    signaling: acc.signaling,
                },
            );
        }

        let duration = self.config.duration_s;
        let w = self.config.utilization_window_s;
        let mut links = BTreeMap::new();
        for link in self.infra.links() {
            let mut m = LinkMetrics::default();
            for from in [link.a, link.b] {
                let Some(windows) = self.usage.get(&(link.id, from)) else { continue };
                let bits: f64 = windows.values().sum();
                m.mean_utilization = m.mean_utilization.max((bits / (link.capacity_bps * duration)).min(1.0));
                for (idx, b) in windows {
                    let len = (duration - *idx as f64 * w).min(w);
                    if len > 0.0 {
                        m.peak_utilization = m.peak_utilization.max((b / (link.capacity_bps * len)).min(1.0));
                    }
                }
            }
            links.insert(link.id.0, m);
        }

        let devices = self
            .endpoints
            .iter()
            .map(|e| {
                let acc = self.device_acc.get(&e.name).cloned().unwrap_or_default();
                let ratio = if acc.addressed == 0 { 1.0 } else { acc.received as f64 / acc.addressed as f64 };
                (
                    e.name.clone(),
                    DeviceMetrics {
                        vn: e.vn.0,
                        sent: acc.sent,
                        addressed: acc.addressed,
                        received: acc.received,
                        delivery_ratio: ratio,
                    },
                )
            })
            .collect();

        MetricsReport {
            mode: match self.config.mode {
                Mode::HopOn => "hop_on",
                Mode::SessionBaseline => "session_baseline",
            },
            seed: self.config.seed,
            duration_s: duration,
            vns,
            links,
            devices,
            signaling: total,
        }
    }
}

/// Runs a scenario to its duration.
pub fn run_scenario(s: &Scenario, with_trace: bool) -> Result<(MetricsReport, Vec<TraceRow>), SimError> {
    let engine = Engine::new(s)?;
    let engine = if with_trace { engine.with_trace() } else { engine };
    engine.run()
}

/// The same scenario with per-flow session establishment.
pub fn run_baseline(s: &Scenario) -> Result<MetricsReport, SimError> {
    let mut s = s.clone();
    s.sim.mode = Mode::SessionBaseline;
    run_scenario(&s, false).map(|r| r.0)
}
