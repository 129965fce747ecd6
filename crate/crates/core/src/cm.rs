//! Hierarchical connectivity management (CM).
//!
//! One CM per cluster, one per domain and a single global CM form a tree that
//! mirrors the infrastructure. Location is tracked by device name:
//!
//! - the cluster CM knows the serving access node and the candidate set of
//!   access nodes that can reach the device,
//! - the domain CM knows the cluster (or, for servers, the core NN),
//! - the global CM knows the domain.
//!
//! Resolution walks up from the asking CM until some level has a record, then
//! down to the level that owns the requested granularity.
//!
//! Message accounting:
//!
//! | operation                         | messages                                   |
//! |-----------------------------------|--------------------------------------------|
//! | fresh registration                | 3 (device→cluster→domain→global)           |
//! | re-registration at the same node  | 1                                          |
//! | intra-cluster move                | 1                                          |
//! | inter-cluster move, same domain   | 3 (new cluster→domain, domain→old cluster) |
//! | inter-domain move                 | 5                                          |
//! | push notification                 | 1 each                                     |
//! | resolution                        | 2 per hop, router↔CM included              |

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::ids::{ClusterId, DomainId, NnId, RouterId};
use crate::infra::Infrastructure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CmId {
    Cluster(ClusterId),
    Domain(DomainId),
    Global,
}

impl fmt::Display for CmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmId::Cluster(c) => write!(f, "cm {c}"),
            CmId::Domain(d) => write!(f, "cm {d}"),
            CmId::Global => f.write_str("cm global"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Granularity {
    Domain,
    #[default]
    Cluster,
    AccessNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SubscriptionMode {
    #[default]
    Requesting,
    Pushing,
}

/// A resolved location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Location {
    Domain(DomainId),
    Cluster(ClusterId),
    AccessNode(NnId),
    /// A server attached to a core node; the finest answer for it.
    CoreNode(NnId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Candidate {
    pub nn: NnId,
    pub strength: f64,
}

/// Candidate access nodes for one device, strongest first.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct CandidateSet {
    pub device: String,
    pub entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn nns(&self) -> impl Iterator<Item = NnId> + '_ {
        self.entries.iter().map(|c| c.nn)
    }

    pub fn contains(&self, nn: NnId) -> bool {
        self.entries.iter().any(|c| c.nn == nn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DomainEntry {
    Cluster(ClusterId),
    Core(NnId),
}

#[derive(Debug, Clone, PartialEq)]
enum Record {
    Cluster { access_nn: NnId, candidates: Vec<Candidate>, updated_at: f64 },
    Domain { entry: DomainEntry, updated_at: f64 },
    Global { domain: DomainId, updated_at: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subscription {
    pub router: RouterId,
    pub device: String,
    pub mode: SubscriptionMode,
    pub granularity: Granularity,
}

#[derive(Debug, Clone)]
struct CmNode {
    parent: Option<CmId>,
    records: BTreeMap<String, Record>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct CmConfig {
    /// Minimum reading for an access node to enter a candidate set.
    pub threshold: f64,
    pub max_candidates: usize,
}

impl Default for CmConfig {
    fn default() -> Self {
        Self { threshold: -90.0, max_candidates: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CmError {
    #[error("unknown {0}")]
    UnknownNode(NnId),
    #[error("{0} is not an access node")]
    NotAccessNode(NnId),
    #[error("{0} is not a core node")]
    NotCoreNode(NnId),
    #[error("device {0} not found")]
    NotFound(String),
    #[error("device {0} is not registered in a cluster")]
    NotRegistered(String),
    #[error("no serving candidate for device {0}")]
    NoServingCandidate(String),
    #[error("unknown {0}")]
    UnknownCm(CmId),
}

/// Outcome of a resolution: where the device is and how many CM-to-CM hops
/// it took to find out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    pub location: Location,
    pub up_hops: u32,
    pub down_hops: u32,
}

impl Resolution {
    pub fn hops(&self) -> u32 {
        self.up_hops + self.down_hops
    }

    /// Request/response pairs for the router↔CM exchange plus every CM hop.
    pub fn messages(&self) -> u32 {
        2 * (1 + self.hops())
    }
}

/// One hierarchy level whose value changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocationUpdate {
    pub device: String,
    pub level: Granularity,
    pub value: Location,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notification {
    pub router: RouterId,
    pub device: String,
    pub value: Location,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MoveOutcome {
    pub updates: Vec<LocationUpdate>,
    pub notifications: Vec<Notification>,
    /// CM messages, push notifications included.
    pub messages: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub candidates: CandidateSet,
    /// Present when the strongest candidate replaced the serving node.
    pub moved: Option<MoveOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Attachment {
    cluster: Option<ClusterId>,
    domain: DomainId,
}

/// Where a device currently is, according to the CM records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub nn: NnId,
    pub cluster: Option<ClusterId>,
    pub domain: DomainId,
}

#[derive(Debug, Clone)]
pub struct CmTree {
    nodes: BTreeMap<CmId, CmNode>,
    attachments: BTreeMap<NnId, Attachment>,
    subscriptions: Vec<Subscription>,
    config: CmConfig,
}

impl CmTree {
    /// One CM per cluster and domain plus the global CM.
    pub fn new(infra: &Infrastructure, config: CmConfig) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(CmId::Global, CmNode { parent: None, records: BTreeMap::new() });
        for d in infra.domains() {
            nodes.insert(CmId::Domain(d.id), CmNode { parent: Some(CmId::Global), records: BTreeMap::new() });
        }
        for c in infra.clusters() {
            nodes
                .insert(CmId::Cluster(c.id), CmNode { parent: Some(CmId::Domain(c.domain)), records: BTreeMap::new() });
        }
        let attachments = infra.nodes().map(|n| (n.id, Attachment { cluster: n.cluster, domain: n.domain })).collect();
        Self { nodes, attachments, subscriptions: Vec::new(), config }
    }

    pub fn config(&self) -> &CmConfig {
        &self.config
    }

    pub fn cm_ids(&self) -> impl Iterator<Item = CmId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn parent(&self, cm: CmId) -> Option<CmId> {
        self.nodes.get(&cm).and_then(|n| n.parent)
    }

    /// Number of location records a CM currently holds.
    pub fn record_count(&self, cm: CmId) -> usize {
        self.nodes.get(&cm).map_or(0, |n| n.records.len())
    }

    pub fn has_record(&self, cm: CmId, device: &str) -> bool {
        self.nodes.get(&cm).is_some_and(|n| n.records.contains_key(device))
    }

    /// The value a single CM holds for a device, if any.
    pub fn record_value(&self, cm: CmId, device: &str) -> Option<Location> {
        match self.nodes.get(&cm)?.records.get(device)? {
            Record::Cluster { access_nn, .. } => Some(Location::AccessNode(*access_nn)),
            Record::Domain { entry: DomainEntry::Cluster(c), .. } => Some(Location::Cluster(*c)),
            Record::Domain { entry: DomainEntry::Core(nn), .. } => Some(Location::CoreNode(*nn)),
            Record::Global { domain, .. } => Some(Location::Domain(*domain)),
        }
    }

    pub fn updated_at(&self, cm: CmId, device: &str) -> Option<f64> {
        match self.nodes.get(&cm)?.records.get(device)? {
            Record::Cluster { updated_at, .. }
            | Record::Domain { updated_at, .. }
            | Record::Global { updated_at, .. } => Some(*updated_at),
        }
    }

    fn attachment(&self, nn: NnId) -> Result<Attachment, CmError> {
        self.attachments.get(&nn).copied().ok_or(CmError::UnknownNode(nn))
    }

    fn records(&mut self, cm: CmId) -> &mut BTreeMap<String, Record> {
        &mut self.nodes.get_mut(&cm).expect("cm exists").records
    }

    /// Follows global → domain → cluster records.
    pub fn position(&self, device: &str) -> Option<Position> {
        let Some(Record::Global { domain, .. }) = self.nodes[&CmId::Global].records.get(device) else {
            return None;
        };
        match self.nodes.get(&CmId::Domain(*domain))?.records.get(device)? {
            Record::Domain { entry: DomainEntry::Core(nn), .. } => {
                Some(Position { nn: *nn, cluster: None, domain: *domain })
            }
            Record::Domain { entry: DomainEntry::Cluster(c), .. } => {
                match self.nodes.get(&CmId::Cluster(*c))?.records.get(device)? {
                    Record::Cluster { access_nn, .. } => {
                        Some(Position { nn: *access_nn, cluster: Some(*c), domain: *domain })
                    }
                    _ => None,
                }
            }
            _ => None,
        }
    }

    /// Location registration of a device at an access node.
    pub fn register_device(&mut self, device: &str, access_nn: NnId, now: f64) -> Result<MoveOutcome, CmError> {
        let at = self.attachment(access_nn)?;
        let Some(cluster) = at.cluster else {
            return Err(CmError::NotAccessNode(access_nn));
        };
        match self.position(device) {
            Some(pos) if pos.nn == access_nn => Ok(MoveOutcome { messages: 1, ..Default::default() }),
            Some(_) => self.move_device(device, access_nn, now),
            None => {
                self.records(CmId::Cluster(cluster)).insert(
                    device.to_string(),
                    Record::Cluster {
                        access_nn,
                        candidates: vec![Candidate { nn: access_nn, strength: 0.0 }],
                        updated_at: now,
                    },
                );
                self.records(CmId::Domain(at.domain)).insert(
                    device.to_string(),
                    Record::Domain { entry: DomainEntry::Cluster(cluster), updated_at: now },
                );
                self.records(CmId::Global)
                    .insert(device.to_string(), Record::Global { domain: at.domain, updated_at: now });
                Ok(MoveOutcome { messages: 3, ..Default::default() })
            }
        }
    }

    /// Location registration of a server attached to a core node. Tracked at
    /// the domain CM, so it costs one message less than a device.
    pub fn register_server(&mut self, name: &str, core_nn: NnId, now: f64) -> Result<MoveOutcome, CmError> {
        let at = self.attachment(core_nn)?;
        if at.cluster.is_some() {
            return Err(CmError::NotCoreNode(core_nn));
        }
        if let Some(pos) = self.position(name) {
            if pos.nn == core_nn {
                return Ok(MoveOutcome { messages: 1, ..Default::default() });
            }
            self.forget(name);
        }
        self.records(CmId::Domain(at.domain))
            .insert(name.to_string(), Record::Domain { entry: DomainEntry::Core(core_nn), updated_at: now });
        self.records(CmId::Global).insert(name.to_string(), Record::Global { domain: at.domain, updated_at: now });
        Ok(MoveOutcome { messages: 2, ..Default::default() })
    }

    /// Drops every record of a device.
    pub fn forget(&mut self, device: &str) {
        for node in self.nodes.values_mut() {
            node.records.remove(device);
        }
        self.subscriptions.retain(|s| s.device != device);
    }

    pub fn subscribe(&mut self, sub: Subscription) {
        if !self.subscriptions.contains(&sub) {
            self.subscriptions.push(sub);
        }
    }

    pub fn subscriptions(&self) -> &[Subscription] {
        &self.subscriptions
    }

    /// Moves a registered device to another access node, touching only the
    /// levels whose value changes.
    pub fn move_device(&mut self, device: &str, new_nn: NnId, now: f64) -> Result<MoveOutcome, CmError> {
        let new_at = self.attachment(new_nn)?;
        let Some(new_cluster) = new_at.cluster else {
            return Err(CmError::NotAccessNode(new_nn));
        };
        let old = self.position(device).ok_or_else(|| CmError::NotFound(device.to_string()))?;
        if old.nn == new_nn {
            return Ok(MoveOutcome::default());
        }
        let mut out = MoveOutcome::default();
        let name = device.to_string();

        if old.cluster == Some(new_cluster) {
            if let Some(Record::Cluster { access_nn, candidates, updated_at }) =
                self.records(CmId::Cluster(new_cluster)).get_mut(device)
            {
                *access_nn = new_nn;
                *updated_at = now;
                if !candidates.iter().any(|c| c.nn == new_nn) {
                    *candidates = vec![Candidate { nn: new_nn, strength: 0.0 }];
                }
            }
            out.messages = 1;
        } else {
            if let Some(c) = old.cluster {
                self.records(CmId::Cluster(c)).remove(device);
            }
            self.records(CmId::Cluster(new_cluster)).insert(
                name.clone(),
                Record::Cluster {
                    access_nn: new_nn,
                    candidates: vec![Candidate { nn: new_nn, strength: 0.0 }],
                    updated_at: now,
                },
            );
            if old.domain != new_at.domain {
                self.records(CmId::Domain(old.domain)).remove(device);
                self.records(CmId::Global)
                    .insert(name.clone(), Record::Global { domain: new_at.domain, updated_at: now });
                out.messages = 5;
            } else {
                out.messages = 3;
            }
            self.records(CmId::Domain(new_at.domain))
                .insert(name.clone(), Record::Domain { entry: DomainEntry::Cluster(new_cluster), updated_at: now });
        }

        out.updates.push(LocationUpdate {
            device: name.clone(),
            level: Granularity::AccessNode,
            value: Location::AccessNode(new_nn),
        });
        if old.cluster != Some(new_cluster) {
            out.updates.push(LocationUpdate {
                device: name.clone(),
                level: Granularity::Cluster,
                value: Location::Cluster(new_cluster),
            });
        }
        if old.domain != new_at.domain {
            out.updates.push(LocationUpdate {
                device: name.clone(),
                level: Granularity::Domain,
                value: Location::Domain(new_at.domain),
            });
        }
        for sub in self.subscriptions.iter().filter(|s| s.device == device && s.mode == SubscriptionMode::Pushing) {
            if let Some(u) = out.updates.iter().find(|u| u.level == sub.granularity) {
                out.notifications.push(Notification { router: sub.router, device: name.clone(), value: u.value });
            }
        }
        out.messages += out.notifications.len() as u32;
        Ok(out)
    }

    /// Applies a measurement report at the device's cluster CM. Readings from
    /// nodes outside that cluster are ignored; crossing clusters goes through
    /// [`CmTree::move_device`].
    pub fn report_measurements(
        &mut self,
        device: &str,
        readings: &[(NnId, f64)],
        now: f64,
    ) -> Result<ReportOutcome, CmError> {
        let pos = self.position(device).ok_or_else(|| CmError::NotRegistered(device.to_string()))?;
        let cluster = pos.cluster.ok_or_else(|| CmError::NotRegistered(device.to_string()))?;
        let mut entries: Vec<Candidate> = readings
            .iter()
            .filter(|(nn, s)| {
                *s >= self.config.threshold && self.attachments.get(nn).and_then(|a| a.cluster) == Some(cluster)
            })
            .map(|&(nn, strength)| Candidate { nn, strength })
            .collect();
        entries.sort_by(|a, b| b.strength.total_cmp(&a.strength).then(a.nn.cmp(&b.nn)));
        entries.dedup_by_key(|c| c.nn);
        entries.truncate(self.config.max_candidates);
        let Some(top) = entries.first().map(|c| c.nn) else {
            return Err(CmError::NoServingCandidate(device.to_string()));
        };
        let moved = if top != pos.nn { Some(self.move_device(device, top, now)?) } else { None };
        if let Some(Record::Cluster { candidates, updated_at, .. }) =
            self.records(CmId::Cluster(cluster)).get_mut(device)
        {
            *candidates = entries.clone();
            *updated_at = now;
        }
        Ok(ReportOutcome { candidates: CandidateSet { device: device.to_string(), entries }, moved })
    }

    /// Resolves a device's location from the point of view of `asking`.
    pub fn resolve(&self, asking: CmId, device: &str, granularity: Granularity) -> Result<Resolution, CmError> {
        if !self.nodes.contains_key(&asking) {
            return Err(CmError::UnknownCm(asking));
        }
        let mut at = asking;
        let mut up = 0;
        let mut record = loop {
            let node = &self.nodes[&at];
            if let Some(r) = node.records.get(device) {
                break r;
            }
            match node.parent {
                Some(p) => {
                    at = p;
                    up += 1;
                }
                None => return Err(CmError::NotFound(device.to_string())),
            }
        };
        let mut down = 0;
        let lookup = |cm: CmId| self.nodes.get(&cm).and_then(|n| n.records.get(device));
        let location = loop {
            match (record, at) {
                (Record::Global { domain, .. }, _) => {
                    if granularity == Granularity::Domain {
                        break Location::Domain(*domain);
                    }
                    at = CmId::Domain(*domain);
                    down += 1;
                    record = lookup(at).ok_or_else(|| CmError::NotFound(device.to_string()))?;
                }
                (Record::Domain { entry, .. }, CmId::Domain(d)) => match (granularity, entry) {
                    (Granularity::Domain, _) => break Location::Domain(d),
                    (_, DomainEntry::Core(nn)) => break Location::CoreNode(*nn),
                    (Granularity::Cluster, DomainEntry::Cluster(c)) => break Location::Cluster(*c),
                    (Granularity::AccessNode, DomainEntry::Cluster(c)) => {
                        at = CmId::Cluster(*c);
                        down += 1;
                        record = lookup(at).ok_or_else(|| CmError::NotFound(device.to_string()))?;
                    }
                },
                (Record::Cluster { access_nn, .. }, CmId::Cluster(c)) => {
                    break match granularity {
                        Granularity::AccessNode => Location::AccessNode(*access_nn),
                        Granularity::Cluster => Location::Cluster(c),
                        Granularity::Domain => Location::Domain(self.attachment(*access_nn)?.domain),
                    };
                }
                _ => unreachable!("record kind matches its CM level"),
            }
        };
        Ok(Resolution { location, up_hops: up, down_hops: down })
    }

    /// Candidate set of a device, resolved from `asking`.
    pub fn candidates(&self, asking: CmId, device: &str) -> Result<(CandidateSet, Resolution), CmError> {
        let res = self.resolve(asking, device, Granularity::AccessNode)?;
        let cluster = match res.location {
            Location::AccessNode(nn) => self.attachment(nn)?.cluster,
            _ => None,
        };
        let entries = cluster
            .and_then(|c| match self.nodes[&CmId::Cluster(c)].records.get(device) {
                Some(Record::Cluster { candidates, .. }) => Some(candidates.clone()),
                _ => None,
            })
            .unwrap_or_default();
        Ok((CandidateSet { device: device.to_string(), entries }, res))
    }

    /// Sweeps every record and checks that the levels agree with each other.
    pub fn check_consistency(&self) -> Result<(), String> {
        use alloc::format;
        for (cm, node) in &self.nodes {
            for (device, record) in &node.records {
                match (cm, record) {
                    (CmId::Cluster(c), Record::Cluster { access_nn, candidates, .. }) => {
                        let at = self.attachments[access_nn];
                        if at.cluster != Some(*c) {
                            return Err(format!("{device}: {access_nn} is not in {c}"));
                        }
                        if !candidates.iter().any(|x| x.nn == *access_nn) {
                            return Err(format!("{device}: serving node missing from candidate set"));
                        }
                        match self.nodes[&CmId::Domain(at.domain)].records.get(device) {
                            Some(Record::Domain { entry: DomainEntry::Cluster(dc), .. }) if dc == c => {}
                            other => return Err(format!("{device}: domain record {other:?} disagrees with {c}")),
                        }
                    }
                    (CmId::Domain(d), Record::Domain { .. }) => match self.nodes[&CmId::Global].records.get(device) {
                        Some(Record::Global { domain, .. }) if domain == d => {}
                        other => return Err(format!("{device}: global record {other:?} disagrees with {d}")),
                    },
                    (CmId::Global, Record::Global { .. }) => {
                        if self.position(device).is_none() {
                            return Err(format!("{device}: dangling global record"));
                        }
                    }
                    _ => return Err(format!("{device}: record at wrong level {cm}")),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infra::fixtures::{domain1, two_domains};
    use proptest::prelude::*;

    fn tree() -> CmTree {
        CmTree::new(&two_domains(), CmConfig::default())
    }

    const C11: CmId = CmId::Cluster(ClusterId(11));
    const C12: CmId = CmId::Cluster(ClusterId(12));
    const D1: CmId = CmId::Domain(DomainId(1));

    #[test]
    fn tree_mirrors_hierarchy() {
        let t = CmTree::new(&domain1(), CmConfig::default());
        let ids: Vec<CmId> = t.cm_ids().collect();
        assert_eq!(ids, vec![C11, C12, D1, CmId::Global]);
        assert_eq!(t.parent(C12), Some(D1));
        assert_eq!(t.parent(D1), Some(CmId::Global));
        assert_eq!(t.parent(CmId::Global), None);
    }

    #[test]
    fn fresh_registration_fills_three_levels() {
        let mut t = tree();
        let out = t.register_device("B", NnId(19), 0.0).unwrap();
        assert_eq!(out.messages, 3);
        assert_eq!(t.record_value(C12, "B"), Some(Location::AccessNode(NnId(19))));
        assert_eq!(t.record_value(D1, "B"), Some(Location::Cluster(ClusterId(12))));
        assert_eq!(t.record_value(CmId::Global, "B"), Some(Location::Domain(DomainId(1))));
        t.check_consistency().unwrap();
    }

    #[test]
    fn re_registration_is_absorbed_by_cluster() {
        let mut t = tree();
        t.register_device("B", NnId(19), 0.0).unwrap();
        let out = t.register_device("B", NnId(19), 1.0).unwrap();
        assert_eq!(out.messages, 1);
        assert!(out.updates.is_empty());
        assert_eq!(t.updated_at(CmId::Global, "B"), Some(0.0));
    }

    #[test]
    fn registration_at_core_node_fails() {
        let mut t = tree();
        assert_eq!(t.register_device("B", NnId(16), 0.0), Err(CmError::NotAccessNode(NnId(16))));
        assert_eq!(t.register_device("B", NnId(99), 0.0), Err(CmError::UnknownNode(NnId(99))));
    }

    #[test]
    fn measurement_reports_build_candidate_sets() {
        let mut t = tree();
        t.register_device("B", NnId(19), 0.0).unwrap();
        let out = t.report_measurements("B", &[(NnId(19), -70.0), (NnId(20), -75.0)], 1.0).unwrap();
        let nns: Vec<NnId> = out.candidates.nns().collect();
        assert_eq!(nns, vec![NnId(19), NnId(20)]);
        assert!(out.moved.is_none());

        let out = t.report_measurements("B", &[(NnId(20), -60.0)], 2.0).unwrap();
        assert_eq!(out.candidates.entries.len(), 1);
        assert_eq!(t.position("B").unwrap().nn, NnId(20));

        assert_eq!(t.report_measurements("B", &[(NnId(20), -95.0)], 3.0), Err(CmError::NoServingCandidate("B".into())));
        assert_eq!(t.report_measurements("X", &[(NnId(20), -60.0)], 3.0), Err(CmError::NotRegistered("X".into())));
    }

    #[test]
    fn candidate_sets_are_capped_and_sorted() {
        let mut t = tree();
        t.register_device("B", NnId(14), 0.0).unwrap();
        let out = t
            .report_measurements(
                "B",
                &[(NnId(20), -80.0), (NnId(14), -50.0), (NnId(19), -80.0), (NnId(11), -10.0)],
                1.0,
            )
            .unwrap();
        // NN 11 is in another cluster and ignored; ties break by nn id
        let nns: Vec<NnId> = out.candidates.nns().collect();
        assert_eq!(nns, vec![NnId(14), NnId(19), NnId(20)]);
        let mut t = CmTree::new(&two_domains(), CmConfig { threshold: -90.0, max_candidates: 2 });
        t.register_device("B", NnId(14), 0.0).unwrap();
        let out = t.report_measurements("B", &[(NnId(20), -80.0), (NnId(14), -50.0), (NnId(19), -80.0)], 1.0).unwrap();
        assert_eq!(out.candidates.entries.len(), 2);
    }

    #[test]
    fn resolution_walks_up_to_first_record() {
        let mut t = tree();
        t.register_device("B", NnId(19), 0.0).unwrap();
        let r = t.resolve(C11, "B", Granularity::Cluster).unwrap();
        assert_eq!(r, Resolution { location: Location::Cluster(ClusterId(12)), up_hops: 1, down_hops: 0 });
        let r = t.resolve(C12, "B", Granularity::AccessNode).unwrap();
        assert_eq!(r.hops(), 0);
        assert_eq!(r.location, Location::AccessNode(NnId(19)));
        let r = t.resolve(C11, "B", Granularity::AccessNode).unwrap();
        assert_eq!((r.up_hops, r.down_hops), (1, 1));
        let r = t.resolve(CmId::Cluster(ClusterId(21)), "B", Granularity::AccessNode).unwrap();
        assert_eq!((r.up_hops, r.down_hops), (2, 2));
        assert_eq!(r.messages(), 10);
        let r = t.resolve(CmId::Cluster(ClusterId(21)), "B", Granularity::Domain).unwrap();
        assert_eq!(r, Resolution { location: Location::Domain(DomainId(1)), up_hops: 2, down_hops: 0 });
        assert_eq!(t.resolve(C11, "nobody", Granularity::Domain), Err(CmError::NotFound("nobody".into())));
    }

    #[test]
    fn moves_touch_only_changed_levels() {
        let mut t = tree();
        t.register_device("B", NnId(19), 0.0).unwrap();

        let out = t.move_device("B", NnId(20), 1.0).unwrap();
        assert_eq!(out.updates.len(), 1);
        assert_eq!(out.messages, 1);
        assert_eq!(t.updated_at(D1, "B"), Some(0.0));
        assert_eq!(t.updated_at(CmId::Global, "B"), Some(0.0));
        assert_eq!(t.updated_at(C12, "B"), Some(1.0));

        let out = t.move_device("B", NnId(12), 2.0).unwrap();
        assert_eq!(out.updates.len(), 2);
        assert_eq!(out.messages, 3);
        assert!(!t.has_record(C12, "B"));
        assert_eq!(t.record_value(D1, "B"), Some(Location::Cluster(ClusterId(11))));
        assert_eq!(t.updated_at(CmId::Global, "B"), Some(0.0));

        let out = t.move_device("B", NnId(12), 3.0).unwrap();
        assert_eq!(out, MoveOutcome::default());

        let out = t.move_device("B", NnId(29), 4.0).unwrap();
        assert_eq!(out.updates.len(), 3);
        assert_eq!(out.messages, 5);
        assert!(!t.has_record(D1, "B"));
        assert_eq!(t.record_value(CmId::Global, "B"), Some(Location::Domain(DomainId(2))));
        t.check_consistency().unwrap();

        assert_eq!(t.move_device("Z", NnId(12), 5.0), Err(CmError::NotFound("Z".into())));
        assert_eq!(t.move_device("B", NnId(99), 5.0), Err(CmError::UnknownNode(NnId(99))));
    }

    #[test]
    fn pushing_subscribers_get_one_notification_per_change() {
        let mut t = tree();
        t.register_device("B", NnId(19), 0.0).unwrap();
        for (r, mode, g) in [
            (1, SubscriptionMode::Pushing, Granularity::Cluster),
            (2, SubscriptionMode::Pushing, Granularity::AccessNode),
            (3, SubscriptionMode::Requesting, Granularity::AccessNode),
        ] {
            t.subscribe(Subscription { router: RouterId(r), device: "B".into(), mode, granularity: g });
        }
        let out = t.move_device("B", NnId(20), 1.0).unwrap();
        assert_eq!(out.notifications.len(), 1);
        assert_eq!(out.notifications[0].router, RouterId(2));
        assert_eq!(out.messages, 2);
        let out = t.move_device("B", NnId(11), 2.0).unwrap();
        assert_eq!(out.notifications.len(), 2);
    }

    #[test]
    fn servers_are_tracked_at_domain_level() {
        let mut t = tree();
        let out = t.register_server("S", NnId(17), 0.0).unwrap();
        assert_eq!(out.messages, 2);
        let r = t.resolve(C11, "S", Granularity::Cluster).unwrap();
        assert_eq!(r.location, Location::CoreNode(NnId(17)));
        assert_eq!(t.register_server("S", NnId(12), 0.0), Err(CmError::NotCoreNode(NnId(12))));
        t.check_consistency().unwrap();
    }

    const ACCESS: [u32; 12] = [11, 12, 14, 18, 19, 20, 21, 22, 24, 28, 29, 30];

    proptest! {
        #[test]
        fn random_moves_keep_hierarchy_consistent(
            ops in proptest::collection::vec((0usize..4, 0usize..ACCESS.len()), 1..60)
        ) {
            let infra = two_domains();
            let mut t = CmTree::new(&infra, CmConfig::default());
            let devices = ["a", "b", "c", "d"];
            let mut truth: BTreeMap<&str, NnId> = BTreeMap::new();
            for (i, dev) in devices.iter().enumerate() {
                t.register_device(dev, NnId(ACCESS[i]), 0.0).unwrap();
                truth.insert(dev, NnId(ACCESS[i]));
                t.subscribe(Subscription {
                    router: RouterId(i as u32),
                    device: dev.to_string(),
                    mode: SubscriptionMode::Pushing,
                    granularity: Granularity::AccessNode,
                });
            }
            let mut last_push: BTreeMap<&str, Location> = BTreeMap::new();
            for (step, (d, n)) in ops.into_iter().enumerate() {
                let dev = devices[d];
                let nn = NnId(ACCESS[n]);
                let old = truth[dev];
                let out = t.move_device(dev, nn, step as f64).unwrap();
                let (o, n2) = (infra.node(old).unwrap(), infra.node(nn).unwrap());
                let changed = if old == nn { 0 } else if o.cluster == n2.cluster { 1 } else if o.domain == n2.domain { 2 } else { 3 };
                prop_assert_eq!(out.updates.len(), changed);
                for note in out.notifications {
                    last_push.insert(dev, note.value);
                }
                truth.insert(dev, nn);
            }
            t.check_consistency().unwrap();
            for (dev, nn) in &truth {
                let node = infra.node(*nn).unwrap();
                for asking in t.cm_ids().collect::<Vec<_>>() {
                    prop_assert_eq!(t.resolve(asking, dev, Granularity::AccessNode).unwrap().location, Location::AccessNode(*nn));
                    prop_assert_eq!(t.resolve(asking, dev, Granularity::Cluster).unwrap().location, Location::Cluster(node.cluster.unwrap()));
                    prop_assert_eq!(t.resolve(asking, dev, Granularity::Domain).unwrap().location, Location::Domain(node.domain));
                }
                if let Some(v) = last_push.get(dev) {
                    prop_assert_eq!(*v, Location::AccessNode(*nn));
                }
            }
        }
    }
}
