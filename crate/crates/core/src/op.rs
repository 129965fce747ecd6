//! Data plane: VN router forwarding, open-tunnel selection, per-format
//! header processing, rate splitting and access-link scheduling.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::cm::{CmTree, Granularity, Location};
use crate::compose::{DeployedSlice, MappingFormat, MappingKey, RouterConfig, TunnelMapping};
use crate::ids::{NnId, OpenTunnelId, VnId, VnNodeId};
use crate::infra::Infrastructure;
use crate::slice::{AnchorScope, OpenTunnelEnds, OpenTunnelMode, QosSpec, TunnelKey, VnDescription};

/// Encapsulation currently on a packet.
#[derive(Debug, Clone, PartialEq)]
pub enum Header {
    /// Addressed by name only, as sent by a device or server.
    Raw,
    VnRouted {
        node: VnNodeId,
    },
    IpLike {
        nn: NnId,
        qos: QosSpec,
    },
    SourceRouted {
        path: Vec<NnId>,
        qos: QosSpec,
        cursor: usize,
    },
    /// The egress NN is kept so per-NN destination rules can be applied.
    Labeled {
        vn: VnId,
        egress_nn: NnId,
    },
    Dedicated {
        vn: VnId,
        resource: u32,
    },
}

impl Header {
    pub fn format_name(&self) -> &'static str {
        match self {
            Header::Raw => "raw",
            Header::VnRouted { .. } => "vn_routed",
            Header::IpLike { .. } => "ip_like",
            Header::SourceRouted { .. } => "source_routed",
            Header::Labeled { .. } => "labeled",
            Header::Dedicated { .. } => "dedicated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub id: u64,
    pub vn: VnId,
    pub source: String,
    pub destination: String,
    pub size_bits: u32,
    pub priority: u8,
    pub ttl: u32,
    pub header: Header,
    pub created_at: f64,
    pub delivered_at: Option<f64>,
}

impl Packet {
    pub fn new(id: u64, vn: &VnDescription, source: &str, destination: &str, size_bits: u32, now: f64) -> Self {
        Self {
            id,
            vn: vn.id,
            source: source.into(),
            destination: destination.into(),
            size_bits,
            priority: 0,
            ttl: initial_ttl(vn),
            header: Header::Raw,
            created_at: now,
            delivered_at: None,
        }
    }
}

pub fn initial_ttl(vn: &VnDescription) -> u32 {
    2 * vn.nodes.len() as u32 + 4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    Ttl,
    Unresolved,
    NoOpenTunnel,
    NoRoute,
    Policed,
    NotAdmitted,
    /// A copy reached an access node that no longer serves the device.
    StaleAccessNode,
    Collision,
    Header,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Ttl => "ttl",
            DropReason::Unresolved => "unresolved",
            DropReason::NoOpenTunnel => "no_open_tunnel",
            DropReason::NoRoute => "no_route",
            DropReason::Policed => "policed",
            DropReason::NotAdmitted => "not_admitted",
            DropReason::StaleAccessNode => "stale_access_node",
            DropReason::Collision => "collision",
            DropReason::Header => "header",
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ForwardingDecision {
    DeliverLocal,
    Forward { tunnel: TunnelKey, egress: VnNodeId },
    OpenTunnels { ids: Vec<OpenTunnelId>, mode: OpenTunnelMode },
    Drop(DropReason),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EndpointEntry {
    node: VnNodeId,
    expires_at: Option<f64>,
}

/// Per-router cache of endpoint name → destination VN node. Fixed entries
/// never expire; resolved ones live for `ttl_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointRoutingTable {
    pub ttl_s: f64,
    entries: BTreeMap<(VnId, String), EndpointEntry>,
}

impl EndpointRoutingTable {
    pub fn new(ttl_s: f64) -> Self {
        Self { ttl_s, entries: BTreeMap::new() }
    }

    pub fn install_fixed(&mut self, vn: VnId, name: &str, node: VnNodeId) {
        self.entries.insert((vn, name.into()), EndpointEntry { node, expires_at: None });
    }

    pub fn install(&mut self, vn: VnId, name: &str, node: VnNodeId, now: f64) {
        self.entries.insert((vn, name.into()), EndpointEntry { node, expires_at: Some(now + self.ttl_s) });
    }

    pub fn lookup(&mut self, vn: VnId, name: &str, now: f64) -> Option<VnNodeId> {
        let k = (vn, String::from(name));
        match self.entries.get(&k) {
            Some(e) if e.expires_at.is_none_or(|t| now < t) => Some(e.node),
            Some(_) => {
                self.entries.remove(&k);
                None
            }
            None => None,
        }
    }

    pub fn is_fixed(&self, vn: VnId, name: &str) -> bool {
        self.entries.get(&(vn, String::from(name))).is_some_and(|e| e.expires_at.is_none())
    }

    pub fn invalidate(&mut self, vn: VnId, name: &str) {
        self.entries.remove(&(vn, String::from(name)));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Mutable state of one VN router.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterState {
    pub endpoints: EndpointRoutingTable,
    /// Granularity used when asking the CM about mobile endpoints.
    pub granularity: Granularity,
    round_robin: BTreeMap<String, usize>,
}

impl RouterState {
    pub fn new(cache_ttl_s: f64, granularity: Granularity) -> Self {
        Self { endpoints: EndpointRoutingTable::new(cache_ttl_s), granularity, round_robin: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteOutcome {
    pub decision: ForwardingDecision,
    /// CM messages spent resolving the destination.
    pub cm_messages: u32,
}

/// The VN node that covers a resolved location.
pub fn anchor_for_location(vn: &VnDescription, infra: &Infrastructure, location: Location) -> Option<VnNodeId> {
    match location {
        Location::AccessNode(nn) | Location::CoreNode(nn) => vn.anchor_for_nn(infra, nn),
        Location::Cluster(c) => vn.anchor_for_cluster(infra, c),
        Location::Domain(d) => vn.anchor_of(AnchorScope::Domain(d)),
    }
}

/// One routing decision at a VN router.
pub fn route_packet(
    router: &RouterConfig,
    state: &mut RouterState,
    packet: &mut Packet,
    cm: &CmTree,
    vn: &VnDescription,
    infra: &Infrastructure,
    now: f64,
) -> RouteOutcome {
    let mut cm_messages = 0;
    let drop = |reason, cm_messages| RouteOutcome { decision: ForwardingDecision::Drop(reason), cm_messages };
    if packet.ttl == 0 {
        return drop(DropReason::Ttl, 0);
    }
    packet.ttl -= 1;

    let dest = match state.endpoints.lookup(vn.id, &packet.destination, now) {
        Some(n) => n,
        None => {
            let resolved = cm.resolve(router.cm, &packet.destination, state.granularity);
            let Ok(res) = resolved else {
                return drop(DropReason::Unresolved, 2);
            };
            cm_messages = res.messages();
            match anchor_for_location(vn, infra, res.location) {
                Some(n) => {
                    state.endpoints.install(vn.id, &packet.destination, n, now);
                    n
                }
                None => return drop(DropReason::Unresolved, cm_messages),
            }
        }
    };

    if router.serves(dest) {
        let fixed = state.endpoints.is_fixed(vn.id, &packet.destination);
        if !fixed && router.dl_open_tunnels().next().is_some() {
            let (decision, msgs) = select_open_tunnels(router, state, &packet.destination, cm, vn.open_tunnel_mode);
            if matches!(decision, ForwardingDecision::OpenTunnels { .. }) {
                packet.header = Header::Raw;
            }
            return RouteOutcome { decision, cm_messages: cm_messages + msgs };
        }
        packet.header = Header::VnRouted { node: dest };
        return RouteOutcome { decision: ForwardingDecision::DeliverLocal, cm_messages };
    }

    match router.routing_table.lookup(dest) {
        Some(tunnel) => {
            let egress = vn.tunnel(tunnel).map(|t| t.egress);
            match egress {
                Some(egress) if router.tunnel_table.iter().any(|t| t.key == tunnel) => {
                    packet.header = Header::VnRouted { node: egress };
                    RouteOutcome { decision: ForwardingDecision::Forward { tunnel, egress }, cm_messages }
                }
                _ => drop(DropReason::NoRoute, cm_messages),
            }
        }
        None => drop(DropReason::NoRoute, cm_messages),
    }
}

/// Candidate access nodes of `device` intersected with this router's
/// downlink open tunnels. Returns the decision and the CM messages spent.
pub fn select_open_tunnels(
    router: &RouterConfig,
    state: &mut RouterState,
    device: &str,
    cm: &CmTree,
    mode: OpenTunnelMode,
) -> (ForwardingDecision, u32) {
    let Ok((candidates, res)) = cm.candidates(router.cm, device) else {
        return (ForwardingDecision::Drop(DropReason::Unresolved), 2);
    };
    let ids: Vec<OpenTunnelId> =
        router.dl_open_tunnels().filter(|(_, nn)| candidates.contains(*nn)).map(|(id, _)| id).collect();
    let decision = if ids.is_empty() {
        ForwardingDecision::Drop(DropReason::NoOpenTunnel)
    } else if mode == OpenTunnelMode::Multipath {
        let turn = state.round_robin.entry(device.into()).or_insert(0);
        let pick = ids[*turn % ids.len()];
        *turn += 1;
        ForwardingDecision::OpenTunnels { ids: vec![pick], mode }
    } else {
        ForwardingDecision::OpenTunnels { ids, mode }
    };
    (decision, res.messages())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeaderError {
    #[error("expected {expected} header, found {found}")]
    Mismatch { expected: &'static str, found: &'static str },
    #[error("{0} does not belong to the slice")]
    UnknownTunnel(MappingKey),
    #[error("path index {0} out of range")]
    NoSuchPath(usize),
    #[error("no rule at {at} towards {destination}")]
    NoRule { at: NnId, destination: NnId },
    #[error("no physical next hop from {0}")]
    NoNextHop(NnId),
}

fn mismatch(expected: &'static str, found: &Header) -> HeaderError {
    HeaderError::Mismatch { expected, found: found.format_name() }
}

/// Encapsulates a packet for one tunnel, on path `path` of its mapping.
pub fn process_header(
    mapping: &TunnelMapping,
    vn: &VnDescription,
    packet: &mut Packet,
    path: usize,
) -> Result<(), HeaderError> {
    match (mapping.key, &packet.header) {
        (MappingKey::Tunnel(k), Header::VnRouted { node }) => {
            let t = vn.tunnel(k).ok_or(HeaderError::UnknownTunnel(mapping.key))?;
            if t.egress != *node {
                return Err(mismatch("vn_routed towards the tunnel egress", &packet.header));
            }
        }
        (MappingKey::Tunnel(_), h) => return Err(mismatch("vn_routed", h)),
        (MappingKey::Open(_), Header::Raw | Header::VnRouted { .. }) => {}
        (MappingKey::Open(_), h) => return Err(mismatch("raw", h)),
    }
    let p = mapping.paths.get(path).ok_or(HeaderError::NoSuchPath(path))?;
    let qos = QosSpec { rate_bps: mapping.rate_bps, latency_s: mapping.latency_budget_s, priority: None };
    packet.header = match mapping.format {
        MappingFormat::IpLike => Header::IpLike { nn: mapping.egress_nn, qos },
        MappingFormat::SourceRouting => Header::SourceRouted { path: p.nodes.clone(), qos, cursor: 0 },
        MappingFormat::DestinationBased => Header::Labeled { vn: mapping.vn, egress_nn: mapping.egress_nn },
        MappingFormat::Dedicated => Header::Dedicated { vn: mapping.vn, resource: mapping.resource_id.unwrap_or(0) },
    };
    Ok(())
}

/// Strips the tunnel encapsulation at the tunnel egress.
pub fn decapsulate(mapping: &TunnelMapping, vn: &VnDescription, packet: &mut Packet) -> Result<(), HeaderError> {
    let ok = matches!(
        (mapping.format, &packet.header),
        (MappingFormat::IpLike, Header::IpLike { .. })
            | (MappingFormat::SourceRouting, Header::SourceRouted { .. })
            | (MappingFormat::DestinationBased, Header::Labeled { .. })
            | (MappingFormat::Dedicated, Header::Dedicated { .. })
    );
    if !ok {
        let expected = match mapping.format {
            MappingFormat::IpLike => "ip_like",
            MappingFormat::SourceRouting => "source_routed",
            MappingFormat::DestinationBased => "labeled",
            MappingFormat::Dedicated => "dedicated",
        };
        return Err(mismatch(expected, &packet.header));
    }
    packet.header = match mapping.key {
        MappingKey::Tunnel(k) => {
            Header::VnRouted { node: vn.tunnel(k).ok_or(HeaderError::UnknownTunnel(mapping.key))?.egress }
        }
        MappingKey::Open(id) => match vn.open_tunnels.get(&id).map(|o| o.ends) {
            Some(OpenTunnelEnds::Ul { destination, .. }) => Header::VnRouted { node: destination },
            Some(OpenTunnelEnds::Dl { .. }) => Header::Raw,
            None => return Err(HeaderError::UnknownTunnel(mapping.key)),
        },
    };
    Ok(())
}

/// Next physical NN for an encapsulated packet at `at`, or `None` once it
/// has reached the end of its tunnel. Advances the source-route cursor.
pub fn next_nn(
    packet: &mut Packet,
    at: NnId,
    infra: &Infrastructure,
    slice: &DeployedSlice,
) -> Result<Option<NnId>, HeaderError> {
    match &mut packet.header {
        Header::IpLike { nn, .. } => {
            if *nn == at {
                return Ok(None);
            }
            let paths = infra.physical_paths(at, *nn, 1).map_err(|_| HeaderError::NoNextHop(at))?;
            Ok(Some(paths[0].nodes[1]))
        }
        Header::SourceRouted { path, cursor, .. } => {
            if path.get(*cursor) != Some(&at) {
                return Err(HeaderError::NoNextHop(at));
            }
            if *cursor + 1 == path.len() {
                return Ok(None);
            }
            *cursor += 1;
            Ok(Some(path[*cursor]))
        }
        Header::Labeled { egress_nn, .. } => {
            if *egress_nn == at {
                return Ok(None);
            }
            slice
                .nn_forwarding_rules
                .get(&at)
                .and_then(|r| r.get(egress_nn))
                .copied()
                .map(Some)
                .ok_or(HeaderError::NoRule { at, destination: *egress_nn })
        }
        Header::Dedicated { resource, .. } => {
            let m =
                slice.mappings.iter().find(|m| m.resource_id == Some(*resource)).ok_or(HeaderError::NoNextHop(at))?;
            let nodes = &m.primary().nodes;
            let i = nodes.iter().position(|n| *n == at).ok_or(HeaderError::NoNextHop(at))?;
            Ok(nodes.get(i + 1).copied())
        }
        h => Err(mismatch("encapsulated", h)),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplitError {
    #[error("no paths to split over")]
    NoPaths,
    #[error("total residual {residual_bps} bps is below the flow rate {flow_bps} bps")]
    Insufficient { residual_bps: f64, flow_bps: f64 },
}

/// Shares a flow across paths in proportion to their residual capacity.
pub fn split_rate(residuals_bps: &[f64], flow_bps: f64) -> Result<Vec<f64>, SplitError> {
    let n = residuals_bps.len();
    if n == 0 {
        return Err(SplitError::NoPaths);
    }
    let total: f64 = residuals_bps.iter().sum();
    if total < flow_bps {
        return Err(SplitError::Insufficient { residual_bps: total, flow_bps });
    }
    if n == 1 {
        return Ok(vec![flow_bps]);
    }
    let mut out: Vec<f64> = residuals_bps.iter().map(|r| flow_bps * r / total).collect();
    let head: f64 = out[..n - 1].iter().sum();
    out[n - 1] = flow_bps - head;
    Ok(out)
}

/// Sliding window of recently seen packet ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DedupWindow {
    capacity: usize,
    order: VecDeque<u64>,
    seen: BTreeSet<u64>,
}

impl DedupWindow {
    pub const DEFAULT_SIZE: usize = 1024;

    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), order: VecDeque::new(), seen: BTreeSet::new() }
    }

    /// `true` the first time an id is seen within the window.
    pub fn insert(&mut self, id: u64) -> bool {
        if self.seen.contains(&id) {
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        self.order.push_back(id);
        self.seen.insert(id);
        true
    }
}

impl Default for DedupWindow {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SIZE)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlError {
    #[error("pre-assigned partitions need {needed_bps} bps, the access link has {capacity_bps}")]
    Oversubscribed { needed_bps: f64, capacity_bps: f64 },
    #[error("slot length must be positive")]
    BadSlot,
    #[error("unknown device {0}")]
    UnknownDevice(String),
}

#[derive(Debug, Clone, PartialEq)]
struct AlQueueEntry {
    packet: u64,
    remaining_bits: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct AlDevice {
    vn: VnId,
    cos_rate_bps: f64,
    queue: VecDeque<AlQueueEntry>,
}

impl AlDevice {
    fn backlog(&self) -> f64 {
        self.queue.iter().map(|e| e.remaining_bits).sum()
    }
}

/// Bits granted to one device in one slot and the packets that finished.
#[derive(Debug, Clone, PartialEq)]
pub struct Grant {
    pub device: String,
    pub bits: f64,
    pub completed: Vec<u64>,
}

/// One direction of one access link.
#[derive(Debug, Clone, PartialEq)]
pub struct AlState {
    pub nn: NnId,
    pub capacity_bps: f64,
    pub slot_s: f64,
    partitions: BTreeMap<VnId, f64>,
    service_weights: BTreeMap<VnId, f64>,
    devices: BTreeMap<String, AlDevice>,
}

impl AlState {
    pub fn new(nn: NnId, capacity_bps: f64, slot_s: f64) -> Result<Self, AlError> {
        if slot_s.is_nan() || slot_s <= 0.0 {
            return Err(AlError::BadSlot);
        }
        Ok(Self {
            nn,
            capacity_bps,
            slot_s,
            partitions: BTreeMap::new(),
            service_weights: BTreeMap::new(),
            devices: BTreeMap::new(),
        })
    }

    /// Reserves a per-slice partition. Fails if the partitions would exceed
    /// the link.
    pub fn set_partition(&mut self, vn: VnId, rate_bps: f64) -> Result<(), AlError> {
        let others: f64 = self.partitions.iter().filter(|(v, _)| **v != vn).map(|(_, r)| r).sum();
        if others + rate_bps > self.capacity_bps {
            return Err(AlError::Oversubscribed { needed_bps: others + rate_bps, capacity_bps: self.capacity_bps });
        }
        self.partitions.insert(vn, rate_bps);
        Ok(())
    }

    /// Weight of a slice without a partition when sharing the pool.
    pub fn set_service_weight(&mut self, vn: VnId, weight: f64) {
        self.service_weights.insert(vn, weight);
    }

    pub fn attach(&mut self, device: &str, vn: VnId, cos_rate_bps: f64) {
        self.devices
            .entry(device.into())
            .and_modify(|d| {
                d.vn = vn;
                d.cos_rate_bps = cos_rate_bps;
            })
            .or_insert(AlDevice { vn, cos_rate_bps, queue: VecDeque::new() });
    }

    /// Removes a device and returns the packets still queued for it.
    pub fn detach(&mut self, device: &str) -> Vec<u64> {
        self.devices.remove(device).map(|d| d.queue.into_iter().map(|e| e.packet).collect()).unwrap_or_default()
    }

    pub fn enqueue(&mut self, device: &str, packet: u64, bits: f64) -> Result<(), AlError> {
        let d = self.devices.get_mut(device).ok_or_else(|| AlError::UnknownDevice(device.into()))?;
        d.queue.push_back(AlQueueEntry { packet, remaining_bits: bits });
        Ok(())
    }

    pub fn backlog_bits(&self) -> f64 {
        self.devices.values().map(AlDevice::backlog).sum()
    }

    pub fn has_device(&self, device: &str) -> bool {
        self.devices.contains_key(device)
    }

    /// Grants for one slot. Partitioned slices go first, then slices without
    /// a partition share what is left, then partitioned slices may use any
    /// remainder. Each device is held to its CoS rate; within a stage bits
    /// are shared by weighted max-min fairness.
    pub fn schedule(&mut self) -> Vec<Grant> {
        let slot_bits = self.capacity_bps * self.slot_s;
        let mut pool = slot_bits;
        let mut room: BTreeMap<String, f64> =
            self.devices.iter().map(|(n, d)| (n.clone(), d.backlog().min(d.cos_rate_bps * self.slot_s))).collect();
        let mut granted: BTreeMap<String, f64> = BTreeMap::new();

        let parts: Vec<(VnId, f64)> = self.partitions.iter().map(|(v, r)| (*v, *r)).collect();
        for (vn, rate) in &parts {
            let budget = (rate * self.slot_s).min(pool);
            let members: Vec<(String, f64)> =
                self.devices.iter().filter(|(_, d)| d.vn == *vn).map(|(n, d)| (n.clone(), d.cos_rate_bps)).collect();
            pool -= share_out(budget, &members, &mut room, &mut granted);
        }

        let mut unpartitioned: BTreeMap<VnId, Vec<(String, f64)>> = BTreeMap::new();
        for (n, d) in &self.devices {
            if !self.partitions.contains_key(&d.vn) {
                unpartitioned.entry(d.vn).or_default().push((n.clone(), d.cos_rate_bps));
            }
        }
        if !unpartitioned.is_empty() {
            // per-service share first, then per-device inside each service
            let services: Vec<(VnId, f64, f64)> = unpartitioned
                .iter()
                .map(|(vn, members)| {
                    let demand: f64 = members.iter().map(|(n, _)| room[n]).sum();
                    let w = self.service_weights.get(vn).copied().unwrap_or_else(|| members.iter().map(|m| m.1).sum());
                    (*vn, w, demand)
                })
                .collect();
            let weights: Vec<(VnId, f64)> = services.iter().map(|(vn, w, _)| (*vn, *w)).collect();
            let mut service_room: BTreeMap<VnId, f64> = services.iter().map(|(vn, _, d)| (*vn, *d)).collect();
            let mut service_grant = BTreeMap::new();
            share_out(pool, &weights, &mut service_room, &mut service_grant);
            for (vn, members) in &unpartitioned {
                let budget = service_grant.get(vn).copied().unwrap_or(0.0);
                pool -= share_out(budget, members, &mut room, &mut granted);
            }
        }

        if pool > 0.0 {
            let rest: Vec<(String, f64)> = self
                .devices
                .iter()
                .filter(|(_, d)| self.partitions.contains_key(&d.vn))
                .map(|(n, d)| (n.clone(), d.cos_rate_bps))
                .collect();
            share_out(pool, &rest, &mut room, &mut granted);
        }

        let mut grants = Vec::new();
        for (name, bits) in granted {
            if bits <= 0.0 {
                continue;
            }
            let d = self.devices.get_mut(&name).expect("granted device exists");
            let mut left = bits;
            let mut completed = Vec::new();
            while let Some(head) = d.queue.front_mut() {
                if head.remaining_bits <= left + 1e-9 {
                    left -= head.remaining_bits;
                    completed.push(head.packet);
                    d.queue.pop_front();
                } else {
                    head.remaining_bits -= left;
                    break;
                }
            }
            grants.push(Grant { device: name, bits, completed });
        }
        grants
    }
}

/// Weighted max-min split of `budget` among `members` capped by `room`.
/// Returns the bits handed out.
fn share_out<K: Ord + Clone>(
    budget: f64,
    members: &[(K, f64)],
    room: &mut BTreeMap<K, f64>,
    granted: &mut BTreeMap<K, f64>,
) -> f64 {
    let mut left = budget;
    let mut active: Vec<&(K, f64)> = members.iter().filter(|(n, w)| room[n] > 0.0 && *w > 0.0).collect();
    while left > 1e-9 && !active.is_empty() {
        let total_w: f64 = active.iter().map(|(_, w)| w).sum();
        let saturated: Vec<&(K, f64)> = active.iter().copied().filter(|(n, w)| room[n] <= left * w / total_w).collect();
        if saturated.is_empty() {
            for (n, w) in &active {
                let g = left * w / total_w;
                *room.get_mut(n).unwrap() -= g;
                *granted.entry(n.clone()).or_insert(0.0) += g;
            }
            left = 0.0;
        } else {
            for (n, _) in &saturated {
                let g = room[n];
                room.insert(n.clone(), 0.0);
                *granted.entry(n.clone()).or_insert(0.0) += g;
                left -= g;
            }
            active.retain(|m| room[&m.0] > 0.0);
        }
    }
    budget - left.max(0.0)
}
