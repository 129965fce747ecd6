//! Declarative slice (VN) descriptions.
//!
//! A VN is a set of VN nodes hosted on physical NNs, directed tunnels between
//! them, open tunnels towards access nodes that hold no VN-specific function,
//! a per-device class of service and per-access-node access-link policies.
//!
//! Tunnel ids are scoped by their ingress VN node: router 1 and router 2 may
//! both own a "tunnel 1", each leading to the other. A tunnel is therefore
//! addressed by its [`TunnelKey`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::ids::{ClusterId, DomainId, NnId, OpenTunnelId, TunnelId, VnId, VnNodeId};
use crate::infra::Infrastructure;
use crate::report::ValidationReport;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct QosSpec {
    /// Zero means "scheduler-managed" and is only accepted on open tunnels
    /// and access-link policies.
    pub rate_bps: f64,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub latency_s: Option<f64>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub priority: Option<u8>,
}

impl QosSpec {
    pub fn rate(rate_bps: f64) -> Self {
        Self { rate_bps, latency_s: None, priority: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AnchorScope {
    Cluster(ClusterId),
    Domain(DomainId),
}

impl fmt::Display for AnchorScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnchorScope::Cluster(c) => write!(f, "{c}"),
            AnchorScope::Domain(d) => write!(f, "{d}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct VnNode {
    pub id: VnNodeId,
    pub nn: NnId,
    pub anchor: Option<AnchorScope>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TunnelKey {
    pub ingress: VnNodeId,
    pub id: TunnelId,
}

impl fmt::Display for TunnelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.ingress, self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Tunnel {
    pub id: TunnelId,
    pub ingress: VnNodeId,
    pub egress: VnNodeId,
    pub qos: QosSpec,
}

impl Tunnel {
    pub fn key(&self) -> TunnelKey {
        TunnelKey { ingress: self.ingress, id: self.id }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OpenTunnelEnds {
    /// Downlink: from a VN node towards an access node.
    Dl { ingress: VnNodeId, destination_nn: NnId },
    /// Uplink: from an access node into a VN node.
    Ul { source_nn: NnId, destination: VnNodeId },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct OpenTunnel {
    pub id: OpenTunnelId,
    pub ends: OpenTunnelEnds,
    pub qos: QosSpec,
}

impl OpenTunnel {
    /// The access node at the open end.
    pub fn access_nn(&self) -> NnId {
        match self.ends {
            OpenTunnelEnds::Dl { destination_nn, .. } => destination_nn,
            OpenTunnelEnds::Ul { source_nn, .. } => source_nn,
        }
    }

    pub fn vn_node(&self) -> VnNodeId {
        match self.ends {
            OpenTunnelEnds::Dl { ingress, .. } => ingress,
            OpenTunnelEnds::Ul { destination, .. } => destination,
        }
    }

    pub fn is_dl(&self) -> bool {
        matches!(self.ends, OpenTunnelEnds::Dl { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DeviceCos {
    pub rate_bps: f64,
    pub latency_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct AlPolicy {
    pub nn: NnId,
    pub pre_assigned: bool,
    pub resource_id: Option<u32>,
    pub shared: bool,
    pub dl_qos: QosSpec,
    pub ul_qos: QosSpec,
}

impl AlPolicy {
    /// The policy applied at access nodes the slice does not mention.
    pub fn unassigned(nn: NnId) -> Self {
        Self {
            nn,
            pre_assigned: false,
            resource_id: None,
            shared: false,
            dl_qos: QosSpec::default(),
            ul_qos: QosSpec::default(),
        }
    }

    /// Hop-on needs no per-packet access-link signaling on this node.
    pub fn signaling_free(&self) -> bool {
        self.pre_assigned && self.shared
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OpenTunnelMode {
    /// Same packet over every selected open tunnel.
    #[default]
    Multicast,
    /// Packets spread round-robin over the selected open tunnels.
    Multipath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VnDescription {
    pub id: VnId,
    pub nodes: BTreeMap<VnNodeId, VnNode>,
    pub tunnels: BTreeMap<TunnelKey, Tunnel>,
    pub open_tunnels: BTreeMap<OpenTunnelId, OpenTunnel>,
    pub device_cos: DeviceCos,
    pub al_policies: BTreeMap<NnId, AlPolicy>,
    pub ac_required: bool,
    pub open_tunnel_mode: OpenTunnelMode,
}

// ---- scenario-file form ----

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct VnNodeSpec {
    pub id: VnNodeId,
    pub nn: NnId,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub cluster: Option<ClusterId>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub domain: Option<DomainId>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TunnelSpec {
    pub id: TunnelId,
    pub ingress: VnNodeId,
    pub egress: VnNodeId,
    pub qos: QosSpec,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DlOpenTunnelSpec {
    pub id: OpenTunnelId,
    pub ingress: VnNodeId,
    pub destination_nn: NnId,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub qos: Option<QosSpec>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct UlOpenTunnelSpec {
    pub id: OpenTunnelId,
    pub source_nn: NnId,
    pub destination: VnNodeId,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub qos: Option<QosSpec>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AlPolicySpec {
    pub nn: NnId,
    pub pre_assigned: bool,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub resource_id: Option<u32>,
    pub shared: bool,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub dl: Option<QosSpec>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub ul: Option<QosSpec>,
}

/// One entry of the `slices` section of a scenario.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct VnSpec {
    pub id: VnId,
    #[cfg_attr(feature = "serde", serde(default))]
    pub ac_required: bool,
    #[cfg_attr(feature = "serde", serde(default))]
    pub open_tunnel_mode: OpenTunnelMode,
    pub device_cos: DeviceCos,
    pub nodes: Vec<VnNodeSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub tunnels: Vec<TunnelSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub dl_open_tunnels: Vec<DlOpenTunnelSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub ul_open_tunnels: Vec<UlOpenTunnelSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub access_links: Vec<AlPolicySpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SliceError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: duplicate id {id}")]
    Duplicate { path: String, id: String },
    #[error("{path}: unknown {target}")]
    Dangling { path: String, target: String },
}

fn invalid(path: String, message: impl Into<String>) -> SliceError {
    SliceError::Invalid { path, message: message.into() }
}

fn check_qos(path: String, q: &QosSpec, allow_zero_rate: bool) -> Result<(), SliceError> {
    let rate_ok = if allow_zero_rate { q.rate_bps >= 0.0 } else { q.rate_bps > 0.0 };
    if !(rate_ok && q.rate_bps.is_finite()) {
        let msg =
            if allow_zero_rate { "rate must be finite and non-negative" } else { "rate must be finite and positive" };
        return Err(invalid(format!("{path}.rate_bps"), msg));
    }
    if let Some(l) = q.latency_s {
        if !(l > 0.0 && l.is_finite()) {
            return Err(invalid(format!("{path}.latency_s"), "latency budget must be positive"));
        }
    }
    Ok(())
}

/// Builds a [`VnDescription`] from its scenario-file form. Checks every
/// invariant that does not need the infrastructure.
pub fn parse_vn_description(spec: &VnSpec) -> Result<VnDescription, SliceError> {
    let cos = spec.device_cos;
    if !(cos.rate_bps > 0.0 && cos.rate_bps.is_finite()) {
        return Err(invalid("device_cos.rate_bps".into(), "must be positive"));
    }
    if !(cos.latency_s > 0.0 && cos.latency_s.is_finite()) {
        return Err(invalid("device_cos.latency_s".into(), "must be positive"));
    }

    let mut nodes = BTreeMap::new();
    let mut scopes: BTreeMap<AnchorScope, VnNodeId> = BTreeMap::new();
    for (i, n) in spec.nodes.iter().enumerate() {
        let anchor = match (n.cluster, n.domain) {
            (Some(_), Some(_)) => {
                return Err(invalid(format!("nodes[{i}]"), "anchor scope is either a cluster or a domain"))
            }
            (Some(c), None) => Some(AnchorScope::Cluster(c)),
            (None, Some(d)) => Some(AnchorScope::Domain(d)),
            (None, None) => None,
        };
        if let Some(scope) = anchor {
            if let Some(prev) = scopes.insert(scope, n.id) {
                return Err(invalid(format!("nodes[{i}]"), format!("{scope} already anchored by {prev}")));
            }
        }
        if nodes.insert(n.id, VnNode { id: n.id, nn: n.nn, anchor }).is_some() {
            return Err(SliceError::Duplicate { path: format!("nodes[{i}].id"), id: format!("{}", n.id.0) });
        }
    }
    if nodes.is_empty() {
        return Err(invalid("nodes".into(), "a slice needs at least one VN node"));
    }

    let mut tunnels = BTreeMap::new();
    for (i, t) in spec.tunnels.iter().enumerate() {
        for (field, end) in [("ingress", t.ingress), ("egress", t.egress)] {
            if !nodes.contains_key(&end) {
                return Err(SliceError::Dangling { path: format!("tunnels[{i}].{field}"), target: format!("{end}") });
            }
        }
        if t.ingress == t.egress {
            return Err(invalid(format!("tunnels[{i}]"), "ingress and egress must differ"));
        }
        check_qos(format!("tunnels[{i}].qos"), &t.qos, false)?;
        let tunnel = Tunnel { id: t.id, ingress: t.ingress, egress: t.egress, qos: t.qos };
        if tunnels.insert(tunnel.key(), tunnel).is_some() {
            return Err(SliceError::Duplicate { path: format!("tunnels[{i}].id"), id: format!("{}", tunnel.key()) });
        }
    }

    let mut open_tunnels = BTreeMap::new();
    let dl = spec.dl_open_tunnels.iter().enumerate().map(|(i, o)| {
        (
            format!("dl_open_tunnels[{i}]"),
            o.id,
            OpenTunnelEnds::Dl { ingress: o.ingress, destination_nn: o.destination_nn },
            o.qos,
        )
    });
    let ul = spec.ul_open_tunnels.iter().enumerate().map(|(i, o)| {
        (
            format!("ul_open_tunnels[{i}]"),
            o.id,
            OpenTunnelEnds::Ul { source_nn: o.source_nn, destination: o.destination },
            o.qos,
        )
    });
    for (path, id, ends, qos) in dl.chain(ul) {
        let ot = OpenTunnel { id, ends, qos: qos.unwrap_or_default() };
        if !nodes.contains_key(&ot.vn_node()) {
            let field = if ot.is_dl() { "ingress" } else { "destination" };
            return Err(SliceError::Dangling { path: format!("{path}.{field}"), target: format!("{}", ot.vn_node()) });
        }
        check_qos(format!("{path}.qos"), &ot.qos, true)?;
        if open_tunnels.insert(id, ot).is_some() {
            return Err(SliceError::Duplicate { path: format!("{path}.id"), id: format!("{}", id.0) });
        }
    }

    let mut al_policies = BTreeMap::new();
    for (i, a) in spec.access_links.iter().enumerate() {
        if a.pre_assigned != a.resource_id.is_some() {
            return Err(invalid(
                format!("access_links[{i}].resource_id"),
                "resource_id must be present exactly when pre_assigned is true",
            ));
        }
        let dl_qos = a.dl.unwrap_or_default();
        let ul_qos = a.ul.unwrap_or_default();
        check_qos(format!("access_links[{i}].dl"), &dl_qos, true)?;
        check_qos(format!("access_links[{i}].ul"), &ul_qos, true)?;
        let policy = AlPolicy {
            nn: a.nn,
            pre_assigned: a.pre_assigned,
            resource_id: a.resource_id,
            shared: a.shared,
            dl_qos,
            ul_qos,
        };
        if al_policies.insert(a.nn, policy).is_some() {
            return Err(SliceError::Duplicate { path: format!("access_links[{i}].nn"), id: format!("{}", a.nn.0) });
        }
    }

    Ok(VnDescription {
        id: spec.id,
        nodes,
        tunnels,
        open_tunnels,
        device_cos: cos,
        al_policies,
        ac_required: spec.ac_required,
        open_tunnel_mode: spec.open_tunnel_mode,
    })
}

impl VnDescription {
    pub fn node(&self, id: VnNodeId) -> Option<&VnNode> {
        self.nodes.get(&id)
    }

    pub fn tunnel(&self, key: TunnelKey) -> Option<&Tunnel> {
        self.tunnels.get(&key)
    }

    pub fn outgoing(&self, node: VnNodeId) -> impl Iterator<Item = &Tunnel> {
        self.tunnels.values().filter(move |t| t.ingress == node)
    }

    pub fn anchor_of(&self, scope: AnchorScope) -> Option<VnNodeId> {
        self.nodes.values().find(|n| n.anchor == Some(scope)).map(|n| n.id)
    }

    /// The VN node a device attached at `nn` is anchored to: a VN node hosted
    /// on `nn` itself, else the anchor of `nn`'s cluster, else the anchor of
    /// its domain.
    pub fn anchor_for_nn(&self, infra: &Infrastructure, nn: NnId) -> Option<VnNodeId> {
        if let Some(n) = self.nodes.values().find(|n| n.nn == nn) {
            return Some(n.id);
        }
        let node = infra.node(nn)?;
        node.cluster
            .and_then(|c| self.anchor_of(AnchorScope::Cluster(c)))
            .or_else(|| self.anchor_of(AnchorScope::Domain(node.domain)))
    }

    /// Anchor for a location known only at cluster granularity.
    pub fn anchor_for_cluster(&self, infra: &Infrastructure, cluster: ClusterId) -> Option<VnNodeId> {
        self.anchor_of(AnchorScope::Cluster(cluster))
            .or_else(|| infra.cluster(cluster).and_then(|c| self.anchor_of(AnchorScope::Domain(c.domain))))
    }

    pub fn al_policy(&self, nn: NnId) -> AlPolicy {
        self.al_policies.get(&nn).copied().unwrap_or_else(|| AlPolicy::unassigned(nn))
    }

    pub fn dl_open_tunnels_from(&self, node: VnNodeId) -> impl Iterator<Item = &OpenTunnel> {
        self.open_tunnels
            .values()
            .filter(move |o| matches!(o.ends, OpenTunnelEnds::Dl { ingress, .. } if ingress == node))
    }

    pub fn ul_open_tunnel_at(&self, nn: NnId) -> Option<&OpenTunnel> {
        self.open_tunnels.values().find(|o| matches!(o.ends, OpenTunnelEnds::Ul { source_nn, .. } if source_nn == nn))
    }

    /// Back to scenario-file form.
    pub fn to_spec(&self) -> VnSpec {
        let qos_opt = |q: QosSpec| if q == QosSpec::default() { None } else { Some(q) };
        VnSpec {
            id: self.id,
            ac_required: self.ac_required,
            open_tunnel_mode: self.open_tunnel_mode,
            device_cos: self.device_cos,
            nodes: self
                .nodes
                .values()
                .map(|n| VnNodeSpec {
                    id: n.id,
                    nn: n.nn,
                    cluster: match n.anchor {
                        Some(AnchorScope::Cluster(c)) => Some(c),
                        _ => None,
                    },
                    domain: match n.anchor {
                        Some(AnchorScope::Domain(d)) => Some(d),
                        _ => None,
                    },
                })
                .collect(),
            tunnels: self
                .tunnels
                .values()
                .map(|t| TunnelSpec { id: t.id, ingress: t.ingress, egress: t.egress, qos: t.qos })
                .collect(),
            dl_open_tunnels: self
                .open_tunnels
                .values()
                .filter_map(|o| match o.ends {
                    OpenTunnelEnds::Dl { ingress, destination_nn } => {
                        Some(DlOpenTunnelSpec { id: o.id, ingress, destination_nn, qos: qos_opt(o.qos) })
                    }
                    _ => None,
                })
                .collect(),
            ul_open_tunnels: self
                .open_tunnels
                .values()
                .filter_map(|o| match o.ends {
                    OpenTunnelEnds::Ul { source_nn, destination } => {
                        Some(UlOpenTunnelSpec { id: o.id, source_nn, destination, qos: qos_opt(o.qos) })
                    }
                    _ => None,
                })
                .collect(),
            access_links: self
                .al_policies
                .values()
                .map(|a| AlPolicySpec {
                    nn: a.nn,
                    pre_assigned: a.pre_assigned,
                    resource_id: a.resource_id,
                    shared: a.shared,
                    dl: qos_opt(a.dl_qos),
                    ul: qos_opt(a.ul_qos),
                })
                .collect(),
        }
    }
}

/// Cross-checks a slice against the infrastructure. Empty findings mean the
/// slice can be composed.
pub fn validate_vn(vn: &VnDescription, infra: &Infrastructure) -> ValidationReport {
    let mut report = ValidationReport::default();
    for n in vn.nodes.values() {
        let loc = format!("vn {}.nodes[{}]", vn.id.0, n.id);
        let Some(nn) = infra.node(n.nn) else {
            report.error(loc, format!("hosting {} does not exist", n.nn));
            continue;
        };
        match n.anchor {
            Some(AnchorScope::Cluster(c)) => match infra.cluster(c) {
                None => report.error(loc, format!("anchor {c} does not exist")),
                Some(_) if nn.cluster != Some(c) => report.error(loc, format!("anchor {c} does not contain {}", n.nn)),
                _ => {}
            },
            Some(AnchorScope::Domain(d)) => match infra.domain(d) {
                None => report.error(loc, format!("anchor {d} does not exist")),
                Some(_) if nn.domain != d => report.error(loc, format!("anchor {d} does not contain {}", n.nn)),
                _ => {}
            },
            None => {}
        }
    }
    for t in vn.tunnels.values() {
        let (Some(a), Some(b)) = (vn.node(t.ingress), vn.node(t.egress)) else { continue };
        if a.nn == b.nn {
            report.error(format!("vn {}.tunnels[{}]", vn.id.0, t.key()), format!("both ends are hosted on {}", a.nn));
        }
    }
    for o in vn.open_tunnels.values() {
        let loc = format!("vn {}.open_tunnels[{}]", vn.id.0, o.id.0);
        match infra.node(o.access_nn()) {
            None => report.error(loc, format!("{} does not exist", o.access_nn())),
            Some(n) if !n.is_access() => report.error(loc, "open tunnel must terminate at access node"),
            Some(_) => {
                if vn.node(o.vn_node()).map(|v| v.nn) == Some(o.access_nn()) {
                    report.error(loc, "open tunnel ends are hosted on the same nn");
                }
            }
        }
    }
    for a in vn.al_policies.values() {
        let loc = format!("vn {}.access_links[{}]", vn.id.0, a.nn);
        match infra.node(a.nn) {
            None => report.error(loc, format!("{} does not exist", a.nn)),
            Some(n) if !n.is_access() => report.error(loc, "access-link policy on a core node"),
            _ => {}
        }
    }
    report
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::infra::fixtures::domain1;
    use alloc::vec;
    use proptest::prelude::*;

    fn key(ingress: u32, id: u32) -> TunnelKey {
        TunnelKey { ingress: VnNodeId(ingress), id: TunnelId(id) }
    }

    #[test]
    fn reference_vn_parses() {
        let vn = vn1();
        assert_eq!(vn.id, VnId(1));
        let n1 = vn.node(VnNodeId(1)).unwrap();
        assert_eq!((n1.nn, n1.anchor), (NnId(11), Some(AnchorScope::Cluster(ClusterId(11)))));
        assert_eq!(vn.node(VnNodeId(2)).unwrap().nn, NnId(13));
        let t1 = vn.tunnel(key(2, 1)).unwrap();
        assert_eq!((t1.ingress, t1.egress), (VnNodeId(2), VnNodeId(1)));
        let t2 = vn.tunnel(key(2, 2)).unwrap();
        assert_eq!((t2.ingress, t2.egress), (VnNodeId(2), VnNodeId(3)));
        assert_eq!(
            vn.open_tunnels[&OpenTunnelId(13)].ends,
            OpenTunnelEnds::Dl { ingress: VnNodeId(2), destination_nn: NnId(19) }
        );
        assert_eq!(vn.open_tunnels[&OpenTunnelId(14)].access_nn(), NnId(20));
        assert_eq!(
            vn.open_tunnels[&OpenTunnelId(15)].ends,
            OpenTunnelEnds::Ul { source_nn: NnId(19), destination: VnNodeId(3) }
        );
        assert_eq!(
            vn.open_tunnels[&OpenTunnelId(16)].ends,
            OpenTunnelEnds::Ul { source_nn: NnId(20), destination: VnNodeId(3) }
        );
        assert_eq!(vn.device_cos, DeviceCos { rate_bps: 500_000.0, latency_s: 0.1 });
    }

    #[test]
    fn single_node_slice_is_valid() {
        let spec = VnSpec {
            id: VnId(9),
            ac_required: false,
            open_tunnel_mode: OpenTunnelMode::Multicast,
            device_cos: DeviceCos { rate_bps: 1.0, latency_s: 1.0 },
            nodes: vec![VnNodeSpec { id: VnNodeId(1), nn: NnId(13), cluster: None, domain: Some(DomainId(1)) }],
            tunnels: vec![],
            dl_open_tunnels: vec![],
            ul_open_tunnels: vec![],
            access_links: vec![],
        };
        let vn = parse_vn_description(&spec).unwrap();
        assert!(vn.tunnels.is_empty());
        assert!(validate_vn(&vn, &domain1()).is_empty());
    }

    #[test]
    fn self_loop_tunnel_is_rejected() {
        let mut spec = vn1_spec();
        spec.tunnels.push(tunnel(40, 3, 3, 1.0));
        assert_eq!(
            parse_vn_description(&spec),
            Err(SliceError::Invalid { path: "tunnels[8]".into(), message: "ingress and egress must differ".into() })
        );
    }

    #[test]
    fn parse_errors_carry_field_paths() {
        let mut spec = vn1_spec();
        spec.tunnels[2].egress = VnNodeId(9);
        assert_eq!(
            parse_vn_description(&spec),
            Err(SliceError::Dangling { path: "tunnels[2].egress".into(), target: "vn node 9".into() })
        );
        let mut spec = vn1_spec();
        spec.tunnels.push(tunnel(1, 2, 3, 1.0));
        assert!(matches!(parse_vn_description(&spec), Err(SliceError::Duplicate { .. })));
        let mut spec = vn1_spec();
        spec.access_links[1].resource_id = Some(5);
        assert!(matches!(parse_vn_description(&spec), Err(SliceError::Invalid { .. })));
        let mut spec = vn1_spec();
        spec.tunnels[0].qos.rate_bps = 0.0;
        assert!(matches!(parse_vn_description(&spec), Err(SliceError::Invalid { .. })));
        let mut spec = vn1_spec();
        spec.nodes[3].cluster = Some(ClusterId(11));
        assert!(matches!(parse_vn_description(&spec), Err(SliceError::Invalid { .. })));
    }

    #[test]
    fn reference_vn_validates_clean() {
        assert!(validate_vn(&vn1(), &domain1()).is_empty());
    }

    #[test]
    fn open_tunnel_to_core_node_is_flagged() {
        let mut spec = vn1_spec();
        spec.dl_open_tunnels[0].destination_nn = NnId(16);
        let report = validate_vn(&parse_vn_description(&spec).unwrap(), &domain1());
        assert_eq!(report.findings.len(), 1);
        assert!(report.has_errors());
        assert_eq!(report.findings[0].message, "open tunnel must terminate at access node");
    }

    #[test]
    fn missing_hosting_nn_is_flagged() {
        let mut spec = vn1_spec();
        spec.nodes[3].nn = NnId(77);
        let report = validate_vn(&parse_vn_description(&spec).unwrap(), &domain1());
        assert!(report.has_errors());
        assert!(report.findings[0].message.contains("nn 77"));
    }

    #[test]
    fn anchor_outside_scope_is_flagged() {
        let mut spec = vn1_spec();
        spec.nodes[0].cluster = Some(ClusterId(12));
        let report = validate_vn(&parse_vn_description(&spec).unwrap(), &domain1());
        assert!(report.has_errors());
    }

    #[test]
    fn anchoring_prefers_host_then_cluster_then_domain() {
        let infra = domain1();
        let vn = vn1();
        assert_eq!(vn.anchor_for_nn(&infra, NnId(17)), Some(VnNodeId(4)));
        assert_eq!(vn.anchor_for_nn(&infra, NnId(12)), Some(VnNodeId(1)));
        assert_eq!(vn.anchor_for_nn(&infra, NnId(19)), Some(VnNodeId(2)));
        assert_eq!(vn.anchor_for_cluster(&infra, ClusterId(12)), Some(VnNodeId(2)));
        assert_eq!(vn.anchor_for_cluster(&infra, ClusterId(11)), Some(VnNodeId(1)));
    }

    #[test]
    fn spec_round_trip() {
        let vn = vn1();
        assert_eq!(parse_vn_description(&vn.to_spec()).unwrap(), vn);
    }

    proptest! {
        #[test]
        fn random_vns_are_referentially_closed(spec in random_vn_spec()) {
            let vn = parse_vn_description(&spec).unwrap();
            for t in vn.tunnels.values() {
                prop_assert!(vn.nodes.contains_key(&t.ingress));
                prop_assert!(vn.nodes.contains_key(&t.egress));
                prop_assert_ne!(t.ingress, t.egress);
            }
            prop_assert_eq!(parse_vn_description(&vn.to_spec()).unwrap(), vn);
        }
    }
}
