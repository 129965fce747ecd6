//! Slice composition: VN routers and their tables, tunnel-to-physical
//! mapping, latency budgets, admission and the operation-time configuration
//! handed to the data plane.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::cm::CmId;
use crate::ids::{ClusterId, DomainId, LinkId, NnId, OpenTunnelId, RouterId, VnId, VnNodeId};
use crate::infra::{InfraError, Infrastructure};
use crate::slice::{validate_vn, AlPolicy, AnchorScope, DeviceCos, OpenTunnelEnds, TunnelKey, VnDescription};

/// Where a VN router runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Placement {
    Nn(NnId),
    Cluster(ClusterId),
    Domain(DomainId),
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Nn(n) => write!(f, "{n}"),
            Placement::Cluster(c) => write!(f, "{c}"),
            Placement::Domain(d) => write!(f, "{d}"),
        }
    }
}

impl From<AnchorScope> for Placement {
    fn from(a: AnchorScope) -> Self {
        match a {
            AnchorScope::Cluster(c) => Placement::Cluster(c),
            AnchorScope::Domain(d) => Placement::Domain(d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OpenTunnelTarget {
    /// Downlink: the access node the tunnel ends at.
    DestinationNn(NnId),
    /// Uplink: the VN node the tunnel delivers to.
    EgressVnNode(VnNodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct TunnelEntry {
    pub key: TunnelKey,
    pub egress: VnNodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct OpenTunnelEntry {
    pub id: OpenTunnelId,
    pub target: OpenTunnelTarget,
}

/// Destination VN node → outgoing tunnel. A wildcard replaces the explicit
/// entries when every destination leaves through the same tunnel.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct RoutingTable {
    pub entries: BTreeMap<VnNodeId, TunnelKey>,
    pub wildcard: Option<TunnelKey>,
}

impl RoutingTable {
    pub fn lookup(&self, destination: VnNodeId) -> Option<TunnelKey> {
        self.entries.get(&destination).copied().or(self.wildcard)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.wildcard.is_none()
    }

    /// Collapses to the wildcard form if at least two destinations agree on
    /// a single tunnel.
    pub fn compress(&mut self) {
        let mut tunnels = self.entries.values();
        if self.entries.len() >= 2 {
            let first = tunnels.next().copied();
            if tunnels.all(|t| Some(*t) == first) {
                self.wildcard = first;
                self.entries.clear();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct RouterConfig {
    pub id: RouterId,
    pub vn: VnId,
    pub placement: Placement,
    pub served: Vec<VnNodeId>,
    pub tunnel_table: Vec<TunnelEntry>,
    pub open_tunnel_table: Vec<OpenTunnelEntry>,
    pub routing_table: RoutingTable,
    pub cm: CmId,
}

impl RouterConfig {
    pub fn serves(&self, node: VnNodeId) -> bool {
        self.served.contains(&node)
    }

    pub fn dl_open_tunnels(&self) -> impl Iterator<Item = (OpenTunnelId, NnId)> + '_ {
        self.open_tunnel_table.iter().filter_map(|e| match e.target {
            OpenTunnelTarget::DestinationNn(nn) => Some((e.id, nn)),
            OpenTunnelTarget::EgressVnNode(_) => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MappingFormat {
    /// Next hop looked up per NN from the packet's destination NN.
    IpLike,
    /// Full NN path frozen in the header.
    SourceRouting,
    /// Per-NN rules keyed by (VN, destination NN).
    DestinationBased,
    /// A pinned path on its own resource.
    Dedicated,
}

impl MappingFormat {
    pub fn supports_splitting(self) -> bool {
        self == MappingFormat::SourceRouting
    }
}

impl fmt::Display for MappingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MappingFormat::IpLike => "ip_like",
            MappingFormat::SourceRouting => "source_routing",
            MappingFormat::DestinationBased => "destination_based",
            MappingFormat::Dedicated => "dedicated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BudgetSplit {
    #[default]
    Equal,
    DelayProportional,
}

/// What a mapping carries: a VN tunnel or an open tunnel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MappingKey {
    Tunnel(TunnelKey),
    Open(OpenTunnelId),
}

impl fmt::Display for MappingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MappingKey::Tunnel(k) => write!(f, "{k}"),
            MappingKey::Open(o) => write!(f, "{o}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct FormatOverride {
    pub vn: VnId,
    pub key: MappingKey,
    pub format: MappingFormat,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct MappingPolicy {
    pub default_format: MappingFormat,
    pub overrides: Vec<FormatOverride>,
    /// Candidate physical paths per tunnel.
    pub k: usize,
    pub budget_split: BudgetSplit,
    /// Reserved = rate × redundancy / overbooking.
    pub overbooking_factor: f64,
    pub redundancy_factor: f64,
}

impl Default for MappingPolicy {
    fn default() -> Self {
        Self {
            default_format: MappingFormat::DestinationBased,
            overrides: Vec::new(),
            k: 1,
            budget_split: BudgetSplit::Equal,
            overbooking_factor: 1.0,
            redundancy_factor: 1.0,
        }
    }
}

impl MappingPolicy {
    pub fn format_for(&self, vn: VnId, key: MappingKey) -> MappingFormat {
        self.overrides.iter().rev().find(|o| o.vn == vn && o.key == key).map_or(self.default_format, |o| o.format)
    }

    pub fn check(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        for (name, v) in
            [("overbooking_factor", self.overbooking_factor), ("redundancy_factor", self.redundancy_factor)]
        {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    fn reserved(&self, rate: f64) -> f64 {
        rate * self.redundancy_factor / self.overbooking_factor
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MappedPath {
    pub nodes: Vec<NnId>,
    pub links: Vec<LinkId>,
    pub delay_s: f64,
    /// Share of the tunnel rate carried on this path.
    pub rate_bps: f64,
    /// Capacity reserved on every link of the path.
    pub reserved_bps: f64,
    /// One entry per link, empty when the tunnel has no latency target.
    pub link_budgets_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct TunnelMapping {
    pub vn: VnId,
    pub key: MappingKey,
    pub format: MappingFormat,
    pub ingress_nn: NnId,
    pub egress_nn: NnId,
    pub rate_bps: f64,
    pub latency_budget_s: Option<f64>,
    pub paths: Vec<MappedPath>,
    pub resource_id: Option<u32>,
}

impl TunnelMapping {
    pub fn primary(&self) -> &MappedPath {
        &self.paths[0]
    }

    /// `(at, destination, next)` rules; only the destination-based format
    /// yields any.
    pub fn forwarding_rules(&self) -> Vec<(NnId, NnId, NnId)> {
        if self.format != MappingFormat::DestinationBased {
            return Vec::new();
        }
        let mut rules = Vec::new();
        for p in &self.paths {
            let dst = p.nodes[p.nodes.len() - 1];
            for w in p.nodes.windows(2) {
                rules.push((w[0], dst, w[1]));
            }
        }
        rules
    }

    pub fn link_reservations(&self) -> BTreeMap<LinkId, f64> {
        let mut out = BTreeMap::new();
        for p in &self.paths {
            for l in &p.links {
                *out.entry(*l).or_insert(0.0) += p.reserved_bps;
            }
        }
        out
    }
}

/// Reserved capacity per link plus the next free dedicated resource id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkLoad {
    pub reserved: BTreeMap<LinkId, f64>,
    pub next_resource: u32,
}

impl LinkLoad {
    pub fn from_deployed(deployed: &[DeployedSlice]) -> Self {
        let mut load = LinkLoad { reserved: BTreeMap::new(), next_resource: 1 };
        for d in deployed {
            for m in &d.mappings {
                load.add(m);
            }
        }
        load
    }

    pub fn add(&mut self, m: &TunnelMapping) {
        for (l, r) in m.link_reservations() {
            *self.reserved.entry(l).or_insert(0.0) += r;
        }
        if let Some(id) = m.resource_id {
            self.next_resource = self.next_resource.max(id + 1);
        }
    }

    pub fn residual(&self, infra: &Infrastructure, link: LinkId) -> f64 {
        let cap = infra.link(link).map_or(0.0, |l| l.capacity_bps);
        cap - self.reserved.get(&link).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("{0} is not part of the slice")]
    UnknownTunnel(MappingKey),
    #[error("{0} has no hosting node")]
    Unhosted(VnNodeId),
    #[error(transparent)]
    Path(#[from] InfraError),
    #[error("{link} has {residual_bps} bps residual, dedicated mapping needs {needed_bps}")]
    DedicatedCapacity { link: LinkId, needed_bps: f64, residual_bps: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BudgetError {
    #[error("latency budget must be positive, got {0}")]
    NonPositive(f64),
    #[error("path has no links")]
    EmptyPath,
    #[error("link {index} delay {delay_s} s exceeds its budget {budget_s} s")]
    Infeasible { index: usize, delay_s: f64, budget_s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Bottleneck {
    pub link: LinkId,
    pub demanded_bps: f64,
    pub available_bps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct AdmissionDecision {
    pub admitted: bool,
    pub bottleneck: Option<Bottleneck>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Validate,
    Routers,
    Mapping,
    Budget,
    Admission,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Validate => "validate",
            Stage::Routers => "routers",
            Stage::Mapping => "mapping",
            Stage::Budget => "budget",
            Stage::Admission => "admission",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComposeError {
    #[error("validate: {0}")]
    Invalid(String),
    #[error("routers: {router} cannot reach {destination}")]
    Unreachable { router: RouterId, destination: VnNodeId },
    #[error("mapping: {key}: {source}")]
    Mapping { key: MappingKey, source: MapError },
    #[error("mapping: {key}: {at} already forwards {destination} to {existing}, not {next}")]
    RuleConflict { key: MappingKey, at: NnId, destination: NnId, existing: NnId, next: NnId },
    #[error("budget: {key}: {source}")]
    Budget { key: MappingKey, source: BudgetError },
    #[error("admission: {} demands {} bps, {} bps available", .0.link, .0.demanded_bps, .0.available_bps)]
    Rejected(Bottleneck),
}

impl ComposeError {
    pub fn stage(&self) -> Stage {
        match self {
            ComposeError::Invalid(_) => Stage::Validate,
            ComposeError::Unreachable { .. } => Stage::Routers,
            ComposeError::Mapping { .. } | ComposeError::RuleConflict { .. } => Stage::Mapping,
            ComposeError::Budget { .. } => Stage::Budget,
            ComposeError::Rejected(_) => Stage::Admission,
        }
    }
}

/// Aggregate rate requirement of one slice at one RAN cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ClusterTarget {
    pub cluster: ClusterId,
    pub dl_rate_bps: f64,
    pub ul_rate_bps: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct SdraOpConfig {
    pub device_cos: DeviceCos,
    pub clusters: Vec<ClusterTarget>,
}

/// Everything needed to run a slice.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployedSlice {
    pub vn: VnDescription,
    pub routers: Vec<RouterConfig>,
    pub mappings: Vec<TunnelMapping>,
    /// at NN → destination NN → next NN.
    pub nn_forwarding_rules: BTreeMap<NnId, BTreeMap<NnId, NnId>>,
    pub al_configs: Vec<AlPolicy>,
    pub sdra_op: SdraOpConfig,
}

impl DeployedSlice {
    pub fn router(&self, id: RouterId) -> Option<&RouterConfig> {
        self.routers.iter().find(|r| r.id == id)
    }

    pub fn router_serving(&self, node: VnNodeId) -> Option<&RouterConfig> {
        self.routers.iter().find(|r| r.serves(node))
    }

    pub fn router_at(&self, placement: Placement) -> Option<&RouterConfig> {
        self.routers.iter().find(|r| r.placement == placement)
    }

    pub fn mapping(&self, key: MappingKey) -> Option<&TunnelMapping> {
        self.mappings.iter().find(|m| m.key == key)
    }
}

fn placement_of(vn: &VnDescription, node: VnNodeId) -> Placement {
    let n = &vn.nodes[&node];
    n.anchor.map_or(Placement::Nn(n.nn), Placement::from)
}

fn cm_for(infra: &Infrastructure, placement: Placement) -> CmId {
    match placement {
        Placement::Cluster(c) => CmId::Cluster(c),
        Placement::Domain(d) => CmId::Domain(d),
        Placement::Nn(nn) => match infra.node(nn) {
            Some(n) => n.cluster.map_or(CmId::Domain(n.domain), CmId::Cluster),
            None => CmId::Global,
        },
    }
}

/// Hop distance from every VN node to `destination` over the tunnel graph.
fn distances_to(vn: &VnDescription, destination: VnNodeId) -> BTreeMap<VnNodeId, u32> {
    let mut dist = BTreeMap::new();
    dist.insert(destination, 0);
    let mut queue = VecDeque::from([destination]);
    while let Some(v) = queue.pop_front() {
        let d = dist[&v];
        for t in vn.tunnels.values().filter(|t| t.egress == v) {
            if let alloc::collections::btree_map::Entry::Vacant(e) = dist.entry(t.ingress) {
                e.insert(d + 1);
                queue.push_back(t.ingress);
            }
        }
    }
    dist
}

/// Routing table of a router serving `served`, plus the destinations it
/// cannot reach. Next hop is the outgoing tunnel on a fewest-hops path, ties
/// broken by tunnel id and then ingress node.
pub fn routing_table(vn: &VnDescription, served: &[VnNodeId]) -> (RoutingTable, Vec<VnNodeId>) {
    let mut table = RoutingTable::default();
    let mut unreachable = Vec::new();
    for &dest in vn.nodes.keys() {
        if served.contains(&dest) {
            continue;
        }
        let dist = distances_to(vn, dest);
        let best = vn
            .tunnels
            .values()
            .filter(|t| served.contains(&t.ingress) && !served.contains(&t.egress))
            .filter_map(|t| dist.get(&t.egress).map(|d| (d + 1, t.id, t.ingress, t.key())))
            .min();
        match best {
            Some((_, _, _, key)) => {
                table.entries.insert(dest, key);
            }
            None => unreachable.push(dest),
        }
    }
    table.compress();
    (table, unreachable)
}

/// One router per distinct placement. Routers serving VN nodes take the
/// smallest id they serve; routers that only terminate uplink open tunnels
/// are numbered after the largest VN node id, in NN order.
pub fn derive_router_configs(vn: &VnDescription, infra: &Infrastructure) -> Result<Vec<RouterConfig>, ComposeError> {
    let mut groups: BTreeMap<Placement, Vec<VnNodeId>> = BTreeMap::new();
    for &id in vn.nodes.keys() {
        groups.entry(placement_of(vn, id)).or_default().push(id);
    }
    let mut routers: Vec<RouterConfig> = groups
        .into_iter()
        .map(|(placement, served)| RouterConfig {
            id: RouterId(served[0].0),
            vn: vn.id,
            placement,
            tunnel_table: vn
                .tunnels
                .values()
                .filter(|t| served.contains(&t.ingress))
                .map(|t| TunnelEntry { key: t.key(), egress: t.egress })
                .collect(),
            served,
            open_tunnel_table: Vec::new(),
            routing_table: RoutingTable::default(),
            cm: cm_for(infra, placement),
        })
        .collect();

    let mut next_id = vn.nodes.keys().next_back().map_or(1, |v| v.0 + 1);
    let mut ul: Vec<_> = vn
        .open_tunnels
        .values()
        .filter_map(|o| match o.ends {
            OpenTunnelEnds::Ul { source_nn, destination } => Some((source_nn, o.id, destination)),
            OpenTunnelEnds::Dl { .. } => None,
        })
        .collect();
    ul.sort();
    for (source_nn, id, destination) in ul {
        let placement = Placement::Nn(source_nn);
        let idx = match routers.iter().position(|r| r.placement == placement) {
            Some(i) => i,
            None => {
                routers.push(RouterConfig {
                    id: RouterId(next_id),
                    vn: vn.id,
                    placement,
                    served: Vec::new(),
                    tunnel_table: Vec::new(),
                    open_tunnel_table: Vec::new(),
                    routing_table: RoutingTable::default(),
                    cm: cm_for(infra, placement),
                });
                next_id += 1;
                routers.len() - 1
            }
        };
        routers[idx]
            .open_tunnel_table
            .push(OpenTunnelEntry { id, target: OpenTunnelTarget::EgressVnNode(destination) });
    }
    for o in vn.open_tunnels.values() {
        if let OpenTunnelEnds::Dl { ingress, destination_nn } = o.ends {
            if let Some(r) = routers.iter_mut().find(|r| r.serves(ingress)) {
                r.open_tunnel_table
                    .push(OpenTunnelEntry { id: o.id, target: OpenTunnelTarget::DestinationNn(destination_nn) });
            }
        }
    }

    routers.sort_by_key(|r| r.id);
    for r in &mut routers {
        r.open_tunnel_table.sort_by_key(|e| e.id);
        if r.tunnel_table.is_empty() {
            continue;
        }
        let (table, unreachable) = routing_table(vn, &r.served);
        if let Some(&destination) = unreachable.first() {
            return Err(ComposeError::Unreachable { router: r.id, destination });
        }
        r.routing_table = table;
    }
    Ok(routers)
}

fn mapping_ends(vn: &VnDescription, key: MappingKey) -> Result<(NnId, NnId, crate::slice::QosSpec), MapError> {
    let host = |n: VnNodeId| vn.node(n).map(|x| x.nn).ok_or(MapError::Unhosted(n));
    match key {
        MappingKey::Tunnel(k) => {
            let t = vn.tunnel(k).ok_or(MapError::UnknownTunnel(key))?;
            Ok((host(t.ingress)?, host(t.egress)?, t.qos))
        }
        MappingKey::Open(id) => {
            let o = vn.open_tunnels.get(&id).ok_or(MapError::UnknownTunnel(key))?;
            match o.ends {
                OpenTunnelEnds::Dl { ingress, destination_nn } => Ok((host(ingress)?, destination_nn, o.qos)),
                OpenTunnelEnds::Ul { source_nn, destination } => Ok((source_nn, host(destination)?, o.qos)),
            }
        }
    }
}

/// Maps one tunnel onto physical paths. `load` holds the reservations made
/// so far; it is read, not updated.
pub fn map_tunnel(
    vn: &VnDescription,
    key: MappingKey,
    infra: &Infrastructure,
    policy: &MappingPolicy,
    load: &LinkLoad,
) -> Result<TunnelMapping, MapError> {
    let (ingress_nn, egress_nn, qos) = mapping_ends(vn, key)?;
    let format = policy.format_for(vn.id, key);
    let want = if format.supports_splitting() { policy.k.max(1) } else { 1 };
    let candidates = infra.physical_paths(ingress_nn, egress_nn, want)?;
    let rate = qos.rate_bps;

    let residual_of =
        |links: &[LinkId]| links.iter().map(|l| load.residual(infra, *l)).fold(f64::INFINITY, f64::min).max(0.0);
    let shares: Vec<f64> = if candidates.len() == 1 {
        vec![rate]
    } else {
        let residuals: Vec<f64> = candidates.iter().map(|p| residual_of(&p.links)).collect();
        let total: f64 = residuals.iter().sum();
        let n = candidates.len();
        let mut shares: Vec<f64> =
            if total > 0.0 { residuals.iter().map(|r| rate * r / total).collect() } else { vec![rate / n as f64; n] };
        let head: f64 = shares[..n - 1].iter().sum();
        shares[n - 1] = rate - head;
        shares
    };

    let mut resource_id = None;
    if format == MappingFormat::Dedicated {
        let needed = policy.reserved(rate);
        for l in &candidates[0].links {
            let residual = load.residual(infra, *l);
            if residual < needed {
                return Err(MapError::DedicatedCapacity { link: *l, needed_bps: needed, residual_bps: residual });
            }
        }
        resource_id = Some(load.next_resource.max(1));
    }

    let paths = candidates
        .into_iter()
        .zip(shares)
        .map(|(p, share)| MappedPath {
            nodes: p.nodes,
            links: p.links,
            delay_s: p.delay_s,
            rate_bps: share,
            reserved_bps: policy.reserved(share),
            link_budgets_s: Vec::new(),
        })
        .collect();
    Ok(TunnelMapping {
        vn: vn.id,
        key,
        format,
        ingress_nn,
        egress_nn,
        rate_bps: rate,
        latency_budget_s: qos.latency_s,
        paths,
        resource_id,
    })
}

/// Splits an end-to-end latency budget over the links of a path. The
/// budgets add up to `budget_s` to within one ulp; when the plain shares
/// miss by more, the last link absorbs the difference.
/// A zero-delay link makes the proportional split degenerate; it falls back
/// to the equal split.
pub fn allocate_latency_budget(
    budget_s: f64,
    link_delays_s: &[f64],
    split: BudgetSplit,
) -> Result<Vec<f64>, BudgetError> {
    if !(budget_s > 0.0 && budget_s.is_finite()) {
        return Err(BudgetError::NonPositive(budget_s));
    }
    let n = link_delays_s.len();
    if n == 0 {
        return Err(BudgetError::EmptyPath);
    }
    let total: f64 = link_delays_s.iter().sum();
    let proportional = split == BudgetSplit::DelayProportional && link_delays_s.iter().all(|d| *d > 0.0);
    let mut budgets: Vec<f64> = if proportional {
        let per_second = budget_s / total;
        link_delays_s.iter().map(|d| per_second * d).collect()
    } else {
        vec![budget_s / n as f64; n]
    };
    let head: f64 = budgets[..n - 1].iter().sum();
    let direct = budgets[n - 1];
    let within_ulp = |x: f64| x == budget_s || x == budget_s.next_up() || x == budget_s.next_down();
    if !within_ulp(head + direct) {
        let mut last = budget_s - head;
        for _ in 0..8 {
            let sum = head + last;
            if sum == budget_s {
                break;
            }
            last = if sum < budget_s { last.next_up() } else { last.next_down() };
        }
        budgets[n - 1] = last;
    }
    for (index, (b, d)) in budgets.iter().zip(link_delays_s).enumerate() {
        if d > b {
            return Err(BudgetError::Infeasible { index, delay_s: *d, budget_s: *b });
        }
    }
    Ok(budgets)
}

/// Admits iff, on every link, reservations already deployed plus those of
/// the new mappings fit in its capacity.
pub fn admit_slice(
    mappings: &[TunnelMapping],
    infra: &Infrastructure,
    deployed: &[DeployedSlice],
) -> AdmissionDecision {
    let existing = LinkLoad::from_deployed(deployed);
    let mut new: BTreeMap<LinkId, f64> = BTreeMap::new();
    for m in mappings {
        for (l, r) in m.link_reservations() {
            *new.entry(l).or_insert(0.0) += r;
        }
    }
    for (link, demanded) in new {
        let available = existing.residual(infra, link);
        if demanded > available {
            return AdmissionDecision {
                admitted: false,
                bottleneck: Some(Bottleneck { link, demanded_bps: demanded, available_bps: available }),
            };
        }
    }
    AdmissionDecision { admitted: true, bottleneck: None }
}

fn sdra_op_config(vn: &VnDescription, infra: &Infrastructure) -> SdraOpConfig {
    let cluster_of = |nn: NnId| infra.node(nn).and_then(|n| n.cluster);
    let host_cluster = |v: VnNodeId| vn.node(v).and_then(|n| cluster_of(n.nn));
    let mut targets: BTreeMap<ClusterId, (f64, f64)> = BTreeMap::new();
    for n in vn.nodes.values() {
        if let Some(c) = cluster_of(n.nn) {
            targets.entry(c).or_default();
        }
    }
    for nn in vn.al_policies.keys() {
        if let Some(c) = cluster_of(*nn) {
            targets.entry(c).or_default();
        }
    }
    for t in vn.tunnels.values() {
        if let Some(c) = host_cluster(t.egress) {
            targets.entry(c).or_default().0 += t.qos.rate_bps;
        }
        if let Some(c) = host_cluster(t.ingress) {
            targets.entry(c).or_default().1 += t.qos.rate_bps;
        }
    }
    for o in vn.open_tunnels.values() {
        if let Some(c) = cluster_of(o.access_nn()) {
            let e = targets.entry(c).or_default();
            if o.is_dl() {
                e.0 += o.qos.rate_bps;
            } else {
                e.1 += o.qos.rate_bps;
            }
        }
    }
    SdraOpConfig {
        device_cos: vn.device_cos,
        clusters: targets
            .into_iter()
            .map(|(cluster, (dl, ul))| ClusterTarget { cluster, dl_rate_bps: dl, ul_rate_bps: ul })
            .collect(),
    }
}

/// Full composition pipeline. Nothing is returned unless every stage passes.
pub fn compose_slice(
    vn: &VnDescription,
    infra: &Infrastructure,
    policy: &MappingPolicy,
    deployed: &[DeployedSlice],
) -> Result<DeployedSlice, ComposeError> {
    let report = validate_vn(vn, infra);
    if let Some(f) = report.errors().next() {
        return Err(ComposeError::Invalid(f.to_string()));
    }
    policy.check().map_err(ComposeError::Invalid)?;
    let routers = derive_router_configs(vn, infra)?;

    let mut load = LinkLoad::from_deployed(deployed);
    let keys =
        vn.tunnels.keys().map(|k| MappingKey::Tunnel(*k)).chain(vn.open_tunnels.keys().map(|o| MappingKey::Open(*o)));
    let mut mappings = Vec::new();
    for key in keys {
        let m = map_tunnel(vn, key, infra, policy, &load).map_err(|source| ComposeError::Mapping { key, source })?;
        load.add(&m);
        mappings.push(m);
    }

    for m in &mut mappings {
        let Some(budget) = m.latency_budget_s else { continue };
        for p in &mut m.paths {
            let delays: Vec<f64> = p.links.iter().map(|l| infra.link(*l).map_or(0.0, |x| x.prop_delay_s)).collect();
            p.link_budgets_s = allocate_latency_budget(budget, &delays, policy.budget_split)
                .map_err(|source| ComposeError::Budget { key: m.key, source })?;
        }
    }

    let mut rules: BTreeMap<NnId, BTreeMap<NnId, NnId>> = BTreeMap::new();
    for m in &mappings {
        for (at, destination, next) in m.forwarding_rules() {
            let slot = rules.entry(at).or_default();
            match slot.get(&destination) {
                Some(&existing) if existing != next => {
                    return Err(ComposeError::RuleConflict { key: m.key, at, destination, existing, next });
                }
                _ => {
                    slot.insert(destination, next);
                }
            }
        }
    }

    let decision = admit_slice(&mappings, infra, deployed);
    if let Some(b) = decision.bottleneck {
        return Err(ComposeError::Rejected(b));
    }

    Ok(DeployedSlice {
        vn: vn.clone(),
        routers,
        mappings,
        nn_forwarding_rules: rules,
        al_configs: vn.al_policies.values().copied().collect(),
        sdra_op: sdra_op_config(vn, infra),
    })
}

/// Distinct (ingress, egress) pairs of the tunnel graph.
pub fn logical_edges(vn: &VnDescription) -> BTreeSet<(VnNodeId, VnNodeId)> {
    vn.tunnels.values().map(|t| (t.ingress, t.egress)).collect()
}
