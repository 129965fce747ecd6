//! Physical infrastructure: network nodes (NNs), links, RAN clusters and
//! domains, plus ranked loop-free path queries.
//!
//! The hierarchy is two levels deep: every access node belongs to exactly one
//! cluster and every cluster to exactly one domain. Core nodes carry a domain
//! but no cluster.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use thiserror::Error;

use crate::ids::{ClusterId, DomainId, LinkId, NnId};
use crate::report::ValidationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum NodeKind {
    Core,
    Access,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LinkKind {
    #[default]
    Wired,
    Wireless,
}

/// Node entry as written in a scenario file.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct NodeSpec {
    pub id: NnId,
    pub kind: NodeKind,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub cluster: Option<ClusterId>,
    pub domain: DomainId,
    #[cfg_attr(feature = "serde", serde(default))]
    pub cloud_units: f64,
    /// Access-link capacity; only meaningful for access nodes.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub al_capacity_bps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LinkSpec {
    pub id: LinkId,
    pub a: NnId,
    pub b: NnId,
    pub capacity_bps: f64,
    pub delay_s: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub kind: LinkKind,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ClusterSpec {
    pub id: ClusterId,
    pub domain: DomainId,
}

/// The `infrastructure` section of a scenario.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct InfraSpec {
    #[cfg_attr(feature = "serde", serde(default))]
    pub nodes: Vec<NodeSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub links: Vec<LinkSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub clusters: Vec<ClusterSpec>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct NetworkNode {
    pub id: NnId,
    pub kind: NodeKind,
    pub cluster: Option<ClusterId>,
    pub domain: DomainId,
    pub cloud_units: f64,
    pub al_capacity_bps: Option<f64>,
}

impl NetworkNode {
    pub fn is_access(&self) -> bool {
        self.kind == NodeKind::Access
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Link {
    pub id: LinkId,
    pub a: NnId,
    pub b: NnId,
    pub capacity_bps: f64,
    pub prop_delay_s: f64,
    pub kind: LinkKind,
}

impl Link {
    /// The endpoint opposite `n`, if `n` is an endpoint.
    pub fn other(&self, n: NnId) -> Option<NnId> {
        if n == self.a {
            Some(self.b)
        } else if n == self.b {
            Some(self.a)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Cluster {
    pub id: ClusterId,
    pub domain: DomainId,
    pub members: Vec<NnId>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Domain {
    pub id: DomainId,
    pub clusters: Vec<ClusterId>,
    pub members: Vec<NnId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InfraError {
    #[error("no nodes")]
    NoNodes,
    #[error("duplicate {what} id {id}")]
    Duplicate { what: &'static str, id: u32 },
    #[error("{owner} references unknown {target}")]
    Dangling { owner: String, target: String },
    #[error("{location}: {message}")]
    Invalid { location: String, message: String },
    #[error("unknown {0}")]
    UnknownNode(NnId),
    #[error("source and destination are both {0}")]
    SameEndpoints(NnId),
    #[error("no path from {src} to {dst}")]
    NoPath { src: NnId, dst: NnId },
}

/// A loop-free NN sequence together with the links it uses.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Path {
    pub nodes: Vec<NnId>,
    pub links: Vec<LinkId>,
    pub delay_s: f64,
}

impl Path {
    pub fn hops(&self) -> usize {
        self.links.len()
    }

    pub fn src(&self) -> NnId {
        self.nodes[0]
    }

    pub fn dst(&self) -> NnId {
        self.nodes[self.nodes.len() - 1]
    }

    /// Ranking order shared by every path query: total propagation delay,
    /// then hop count, then the NN sequence.
    pub fn rank_cmp(&self, other: &Path) -> Ordering {
        self.delay_s
            .total_cmp(&other.delay_s)
            .then(self.nodes.len().cmp(&other.nodes.len()))
            .then_with(|| self.nodes.cmp(&other.nodes))
    }
}

/// Fully linked, immutable physical network.
#[derive(Debug, Clone, PartialEq)]
pub struct Infrastructure {
    nodes: BTreeMap<NnId, NetworkNode>,
    links: BTreeMap<LinkId, Link>,
    clusters: BTreeMap<ClusterId, Cluster>,
    domains: BTreeMap<DomainId, Domain>,
    /// neighbour -> best link (lowest delay, then lowest id) per node.
    adjacency: BTreeMap<NnId, BTreeMap<NnId, LinkId>>,
}

fn invalid(location: String, message: impl Into<String>) -> InfraError {
    InfraError::Invalid { location, message: message.into() }
}

/// Builds an [`Infrastructure`] from its scenario-file form, checking id
/// uniqueness and referential closure.
pub fn load_infrastructure(spec: &InfraSpec) -> Result<Infrastructure, InfraError> {
    if spec.nodes.is_empty() {
        return Err(InfraError::NoNodes);
    }

    let mut clusters: BTreeMap<ClusterId, Cluster> = BTreeMap::new();
    let mut domains: BTreeMap<DomainId, Domain> = BTreeMap::new();
    for c in &spec.clusters {
        if clusters.insert(c.id, Cluster { id: c.id, domain: c.domain, members: Vec::new() }).is_some() {
            return Err(InfraError::Duplicate { what: "cluster", id: c.id.0 });
        }
        domains
            .entry(c.domain)
            .or_insert_with(|| Domain { id: c.domain, clusters: Vec::new(), members: Vec::new() })
            .clusters
            .push(c.id);
    }

    let mut nodes = BTreeMap::new();
    for n in &spec.nodes {
        if let Some(cid) = n.cluster {
            let cluster = clusters
                .get_mut(&cid)
                .ok_or_else(|| InfraError::Dangling { owner: format!("{}", n.id), target: format!("{cid}") })?;
            if cluster.domain != n.domain {
                return Err(invalid(
                    format!("nodes[{}].cluster", n.id),
                    format!("{cid} belongs to {}, node declares {}", cluster.domain, n.domain),
                ));
            }
            cluster.members.push(n.id);
        }
        if !(n.cloud_units >= 0.0 && n.cloud_units.is_finite()) {
            return Err(invalid(format!("nodes[{}].cloud_units", n.id), "must be finite and non-negative"));
        }
        if let Some(cap) = n.al_capacity_bps {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(invalid(format!("nodes[{}].al_capacity_bps", n.id), "must be finite and positive"));
            }
        }
        let node = NetworkNode {
            id: n.id,
            kind: n.kind,
            cluster: n.cluster,
            domain: n.domain,
            cloud_units: n.cloud_units,
            al_capacity_bps: n.al_capacity_bps,
        };
        if nodes.insert(n.id, node).is_some() {
            return Err(InfraError::Duplicate { what: "nn", id: n.id.0 });
        }
        domains
            .entry(n.domain)
            .or_insert_with(|| Domain { id: n.domain, clusters: Vec::new(), members: Vec::new() })
            .members
            .push(n.id);
    }

    let mut links = BTreeMap::new();
    let mut adjacency: BTreeMap<NnId, BTreeMap<NnId, LinkId>> = nodes.keys().map(|&id| (id, BTreeMap::new())).collect();
    for l in &spec.links {
        for end in [l.a, l.b] {
            if !nodes.contains_key(&end) {
                return Err(InfraError::Dangling { owner: format!("{}", l.id), target: format!("{end}") });
            }
        }
        if l.a == l.b {
            return Err(invalid(format!("links[{}]", l.id), "endpoints must differ"));
        }
        if !(l.capacity_bps > 0.0 && l.capacity_bps.is_finite()) {
            return Err(invalid(format!("links[{}].capacity_bps", l.id), "must be finite and positive"));
        }
        if !(l.delay_s >= 0.0 && l.delay_s.is_finite()) {
            return Err(invalid(format!("links[{}].delay_s", l.id), "must be finite and non-negative"));
        }
        let link =
            Link { id: l.id, a: l.a, b: l.b, capacity_bps: l.capacity_bps, prop_delay_s: l.delay_s, kind: l.kind };
        if links.insert(l.id, link).is_some() {
            return Err(InfraError::Duplicate { what: "link", id: l.id.0 });
        }
    }
    // Parallel links collapse to the best one for path queries.
    for link in links.values() {
        for (from, to) in [(link.a, link.b), (link.b, link.a)] {
            let slot = adjacency.get_mut(&from).expect("endpoint checked");
            match slot.get(&to) {
                Some(existing) => {
                    let cur = &links[existing];
                    if (link.prop_delay_s, link.id) < (cur.prop_delay_s, cur.id) {
                        slot.insert(to, link.id);
                    }
                }
                None => {
                    slot.insert(to, link.id);
                }
            }
        }
    }

    for d in domains.values_mut() {
        d.clusters.sort();
        d.members.sort();
    }
    for c in clusters.values_mut() {
        c.members.sort();
    }

    Ok(Infrastructure { nodes, links, clusters, domains, adjacency })
}

impl Infrastructure {
    pub fn nodes(&self) -> impl Iterator<Item = &NetworkNode> {
        self.nodes.values()
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.values()
    }

    pub fn clusters(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.values()
    }

    pub fn domains(&self) -> impl Iterator<Item = &Domain> {
        self.domains.values()
    }

    pub fn node(&self, id: NnId) -> Option<&NetworkNode> {
        self.nodes.get(&id)
    }

    pub fn link(&self, id: LinkId) -> Option<&Link> {
        self.links.get(&id)
    }

    pub fn cluster(&self, id: ClusterId) -> Option<&Cluster> {
        self.clusters.get(&id)
    }

    pub fn domain(&self, id: DomainId) -> Option<&Domain> {
        self.domains.get(&id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// The link used between two adjacent nodes (the best of any parallel links).
    pub fn link_between(&self, a: NnId, b: NnId) -> Option<&Link> {
        self.adjacency.get(&a)?.get(&b).map(|id| &self.links[id])
    }

    pub fn neighbors(&self, n: NnId) -> impl Iterator<Item = (NnId, LinkId)> + '_ {
        self.adjacency.get(&n).into_iter().flat_map(|m| m.iter().map(|(&k, &v)| (k, v)))
    }

    /// Back to scenario-file form, every collection sorted by id.
    pub fn to_spec(&self) -> InfraSpec {
        InfraSpec {
            nodes: self
                .nodes
                .values()
                .map(|n| NodeSpec {
                    id: n.id,
                    kind: n.kind,
                    cluster: n.cluster,
                    domain: n.domain,
                    cloud_units: n.cloud_units,
                    al_capacity_bps: n.al_capacity_bps,
                })
                .collect(),
            links: self
                .links
                .values()
                .map(|l| LinkSpec {
                    id: l.id,
                    a: l.a,
                    b: l.b,
                    capacity_bps: l.capacity_bps,
                    delay_s: l.prop_delay_s,
                    kind: l.kind,
                })
                .collect(),
            clusters: self.clusters.values().map(|c| ClusterSpec { id: c.id, domain: c.domain }).collect(),
        }
    }

    /// Structural findings that do not prevent loading.
    pub fn validate(&self) -> ValidationReport {
        validate_infrastructure(self)
    }

    /// Up to `k` loop-free paths ranked by [`Path::rank_cmp`].
    pub fn physical_paths(&self, src: NnId, dst: NnId, k: usize) -> Result<Vec<Path>, InfraError> {
        physical_paths(self, src, dst, k)
    }

    fn path_from_nodes(&self, nodes: Vec<NnId>) -> Path {
        let mut delay = 0.0;
        let mut links = Vec::with_capacity(nodes.len().saturating_sub(1));
        for w in nodes.windows(2) {
            let link = self.link_between(w[0], w[1]).expect("path over existing adjacency");
            delay += link.prop_delay_s;
            links.push(link.id);
        }
        Path { nodes, links, delay_s: delay }
    }
}

pub fn validate_infrastructure(infra: &Infrastructure) -> ValidationReport {
    let mut report = ValidationReport::default();
    for n in infra.nodes.values() {
        match (n.kind, n.cluster) {
            (NodeKind::Access, None) => report.error(format!("nodes[{}]", n.id), "access node is not in any cluster"),
            (NodeKind::Core, Some(c)) => report
                .error(format!("nodes[{}]", n.id), format!("core node must not belong to a cluster (declares {c})")),
            _ => {}
        }
        if n.kind == NodeKind::Core && n.al_capacity_bps.is_some() {
            report.warning(format!("nodes[{}]", n.id), "al_capacity_bps is ignored on core nodes");
        }
    }
    for c in infra.clusters.values() {
        if c.members.is_empty() {
            report.warning(format!("clusters[{}]", c.id), "cluster has no access nodes");
        }
    }
    for d in infra.domains.values() {
        let components = domain_components(infra, d);
        if components > 1 {
            report.warning(
                format!("domains[{}]", d.id),
                format!("link graph inside the domain is disconnected ({components} components)"),
            );
        }
    }
    report
}

fn domain_components(infra: &Infrastructure, d: &Domain) -> usize {
    if d.members.is_empty() {
        return 0;
    }
    let index: BTreeMap<NnId, usize> = d.members.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut parent: Vec<usize> = (0..d.members.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for l in infra.links.values() {
        if let (Some(&a), Some(&b)) = (index.get(&l.a), index.get(&l.b)) {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        }
    }
    (0..parent.len()).filter(|&i| find(&mut parent, i) == i).count()
}

#[derive(Debug, Clone)]
struct Label {
    delay: f64,
    nodes: Vec<NnId>,
}

impl Label {
    fn last(&self) -> NnId {
        self.nodes[self.nodes.len() - 1]
    }
}

impl PartialEq for Label {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Label {}
impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Label {
    fn cmp(&self, other: &Self) -> Ordering {
        self.delay
            .total_cmp(&other.delay)
            .then(self.nodes.len().cmp(&other.nodes.len()))
            .then_with(|| self.nodes.cmp(&other.nodes))
    }
}

/// Label-setting search from the end of `start` to `dst`, extending `start`.
/// The ranking key is monotone under extension, so the first time `dst` is
/// popped its label is optimal.
fn best_extension(
    infra: &Infrastructure,
    start: Label,
    dst: NnId,
    blocked_nodes: &BTreeSet<NnId>,
    blocked_edges: &BTreeSet<(NnId, NnId)>,
) -> Option<Label> {
    let mut settled: BTreeSet<NnId> = BTreeSet::new();
    let mut heap = BinaryHeap::new();
    heap.push(Reverse(start));
    while let Some(Reverse(label)) = heap.pop() {
        let at = label.last();
        if at == dst {
            return Some(label);
        }
        if !settled.insert(at) {
            continue;
        }
        for (next, link) in infra.neighbors(at) {
            if settled.contains(&next)
                || blocked_nodes.contains(&next)
                || blocked_edges.contains(&(at, next))
                || label.nodes.contains(&next)
            {
                continue;
            }
            let mut nodes = label.nodes.clone();
            nodes.push(next);
            heap.push(Reverse(Label { delay: label.delay + infra.links[&link].prop_delay_s, nodes }));
        }
    }
    None
}

/// Up to `k` loop-free NN sequences from `src` to `dst`, ordered by total
/// propagation delay, then hop count, then lexicographic NN sequence
/// (Yen's algorithm over that composite key).
pub fn physical_paths(infra: &Infrastructure, src: NnId, dst: NnId, k: usize) -> Result<Vec<Path>, InfraError> {
    for n in [src, dst] {
        if !infra.nodes.contains_key(&n) {
            return Err(InfraError::UnknownNode(n));
        }
    }
    if src == dst {
        return Err(InfraError::SameEndpoints(src));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let none_nodes = BTreeSet::new();
    let none_edges = BTreeSet::new();
    let first = best_extension(infra, Label { delay: 0.0, nodes: vec![src] }, dst, &none_nodes, &none_edges)
        .ok_or(InfraError::NoPath { src, dst })?;

    let mut accepted: Vec<Label> = vec![first];
    let mut candidates: BTreeSet<Label> = BTreeSet::new();
    while accepted.len() < k {
        let prev = accepted.last().expect("non-empty").clone();
        for j in 0..prev.nodes.len() - 1 {
            let root = &prev.nodes[..=j];
            let blocked_edges: BTreeSet<(NnId, NnId)> = accepted
                .iter()
                .filter(|p| p.nodes.len() > j + 1 && &p.nodes[..=j] == root)
                .map(|p| (p.nodes[j], p.nodes[j + 1]))
                .collect();
            let blocked_nodes: BTreeSet<NnId> = root[..j].iter().copied().collect();
            let mut root_delay = 0.0;
            for w in root.windows(2) {
                root_delay += infra.link_between(w[0], w[1]).expect("adjacent").prop_delay_s;
            }
            let start = Label { delay: root_delay, nodes: root.to_vec() };
            if let Some(found) = best_extension(infra, start, dst, &blocked_nodes, &blocked_edges) {
                if !accepted.iter().any(|a| a.nodes == found.nodes) {
                    candidates.insert(found);
                }
            }
        }
        match candidates.pop_first() {
            Some(next) => accepted.push(next),
            None => break,
        }
    }
    Ok(accepted.into_iter().map(|l| infra.path_from_nodes(l.nodes)).collect())
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn ids(p: &Path) -> Vec<u32> {
        p.nodes.iter().map(|n| n.0).collect()
    }

    #[test]
    fn domain_one_has_two_clusters_one_domain() {
        let infra = domain1();
        assert_eq!(infra.clusters().count(), 2);
        assert_eq!(infra.domains().count(), 1);
        assert_eq!(infra.node_count(), 10);
        assert_eq!(infra.cluster(ClusterId(12)).unwrap().members, vec![NnId(14), NnId(19), NnId(20)]);
    }

    #[test]
    fn reference_topologies_validate_clean() {
        assert!(domain1().validate().is_empty());
        assert!(two_domains().validate().is_empty());
    }

    #[test]
    fn empty_node_list_is_rejected() {
        assert_eq!(load_infrastructure(&InfraSpec::default()), Err(InfraError::NoNodes));
        assert_eq!(InfraError::NoNodes.to_string(), "no nodes");
    }

    #[test]
    fn dangling_link_names_missing_node() {
        let mut spec = domain1_spec();
        spec.links.push(link(50, 11, 99, 1e9, 0.001));
        let err = load_infrastructure(&spec).unwrap_err();
        assert_eq!(err, InfraError::Dangling { owner: "link 50".into(), target: "nn 99".into() });
        assert!(err.to_string().contains("nn 99"));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut spec = domain1_spec();
        spec.nodes.push(spec.nodes[0].clone());
        assert_eq!(load_infrastructure(&spec), Err(InfraError::Duplicate { what: "nn", id: 11 }));
        let mut spec = domain1_spec();
        spec.links.push(link(1, 12, 18, 1e9, 0.001));
        assert_eq!(load_infrastructure(&spec), Err(InfraError::Duplicate { what: "link", id: 1 }));
    }

    #[test]
    fn bad_links_are_rejected() {
        let mut spec = domain1_spec();
        spec.links.push(link(60, 12, 12, 1e9, 0.001));
        assert!(matches!(load_infrastructure(&spec), Err(InfraError::Invalid { .. })));
        let mut spec = domain1_spec();
        spec.links.push(link(60, 12, 18, 0.0, 0.001));
        assert!(matches!(load_infrastructure(&spec), Err(InfraError::Invalid { .. })));
        let mut spec = domain1_spec();
        spec.links.push(link(60, 12, 18, f64::INFINITY, 0.001));
        assert!(matches!(load_infrastructure(&spec), Err(InfraError::Invalid { .. })));
    }

    #[test]
    fn cluster_domain_mismatch_is_rejected() {
        let mut spec = domain1_spec();
        spec.nodes[0].domain = DomainId(7);
        assert!(matches!(load_infrastructure(&spec), Err(InfraError::Invalid { .. })));
    }

    #[test]
    fn access_node_without_cluster_is_an_error_finding() {
        let mut spec = domain1_spec();
        spec.nodes[1].cluster = None;
        let report = load_infrastructure(&spec).unwrap().validate();
        assert_eq!(report.findings.len(), 1);
        assert!(report.has_errors());
        assert_eq!(report.findings[0].location, "nodes[nn 12]");
    }

    #[test]
    fn disconnected_domain_is_a_warning() {
        let mut spec = domain1_spec();
        // cut cluster 12 and NN 15 away from the rest
        spec.links.retain(|l| l.id != LinkId(6) && l.id != LinkId(11));
        let report = load_infrastructure(&spec).unwrap().validate();
        assert!(!report.has_errors());
        assert_eq!(report.findings.len(), 1);
        assert!(report.findings[0].message.contains("2 components"));
    }

    #[test]
    fn forwarding_fragment_path() {
        let infra = domain1();
        let paths = infra.physical_paths(NnId(11), NnId(17), 1).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(ids(&paths[0]), vec![11, 16, 17]);
        assert_eq!(paths[0].links, vec![LinkId(1), LinkId(2)]);
    }

    #[test]
    fn adjacent_nodes_direct_link_first() {
        let infra = domain1();
        let paths = infra.physical_paths(NnId(19), NnId(20), 3).unwrap();
        assert_eq!(ids(&paths[0]), vec![19, 20]);
        assert_eq!(ids(&paths[1]), vec![19, 14, 20]);
        assert_eq!(paths.len(), 2);
    }

    #[test]
    fn path_errors() {
        let infra = domain1();
        assert_eq!(infra.physical_paths(NnId(11), NnId(11), 1), Err(InfraError::SameEndpoints(NnId(11))));
        assert_eq!(infra.physical_paths(NnId(11), NnId(99), 1), Err(InfraError::UnknownNode(NnId(99))));
        let mut spec = domain1_spec();
        spec.links.retain(|l| l.id != LinkId(6) && l.id != LinkId(11));
        let cut = load_infrastructure(&spec).unwrap();
        assert_eq!(cut.physical_paths(NnId(11), NnId(19), 2), Err(InfraError::NoPath { src: NnId(11), dst: NnId(19) }));
    }

    // ---- oracles ----

    /// Every simple path by exhaustive DFS, sorted by the ranking key.
    fn all_simple_paths(infra: &Infrastructure, src: NnId, dst: NnId) -> Vec<Path> {
        fn dfs(infra: &Infrastructure, at: NnId, dst: NnId, stack: &mut Vec<NnId>, out: &mut Vec<Vec<NnId>>) {
            if at == dst {
                out.push(stack.clone());
                return;
            }
            for (next, _) in infra.neighbors(at) {
                if !stack.contains(&next) {
                    stack.push(next);
                    dfs(infra, next, dst, stack, out);
                    stack.pop();
                }
            }
        }
        let mut out = Vec::new();
        dfs(infra, src, dst, &mut vec![src], &mut out);
        let mut paths: Vec<Path> = out.into_iter().map(|n| infra.path_from_nodes(n)).collect();
        paths.sort_by(|a, b| a.rank_cmp(b));
        paths
    }

    /// Floyd-Warshall distance matrix over the raw link list.
    fn floyd(spec: &InfraSpec) -> BTreeMap<(NnId, NnId), f64> {
        let ids: Vec<NnId> = spec.nodes.iter().map(|n| n.id).collect();
        let mut d = BTreeMap::new();
        for &a in &ids {
            for &b in &ids {
                d.insert((a, b), if a == b { 0.0 } else { f64::INFINITY });
            }
        }
        for l in &spec.links {
            for (a, b) in [(l.a, l.b), (l.b, l.a)] {
                let e = d.get_mut(&(a, b)).unwrap();
                if l.delay_s < *e {
                    *e = l.delay_s;
                }
            }
        }
        for &m in &ids {
            for &a in &ids {
                for &b in &ids {
                    let via = d[&(a, m)] + d[&(m, b)];
                    if via < d[&(a, b)] {
                        d.insert((a, b), via);
                    }
                }
            }
        }
        d
    }

    fn random_graph() -> impl Strategy<Value = InfraSpec> {
        (proptest::collection::vec(any::<bool>(), 28), proptest::collection::vec(1u32..5, 28)).prop_map(
            |(present, delays)| {
                let nodes = (1..=8)
                    .map(|i| NodeSpec {
                        id: NnId(i),
                        kind: NodeKind::Core,
                        cluster: None,
                        domain: DomainId(1),
                        cloud_units: 0.0,
                        al_capacity_bps: None,
                    })
                    .collect();
                let mut links = Vec::new();
                let mut idx = 0;
                for a in 1..=8u32 {
                    for b in (a + 1)..=8 {
                        if present[idx] {
                            links.push(link(idx as u32 + 1, a, b, 1e9, delays[idx] as f64 * 0.001));
                        }
                        idx += 1;
                    }
                }
                InfraSpec { nodes, links, clusters: Vec::new() }
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn k_paths_match_exhaustive_enumeration(spec in random_graph(), src in 1u32..=8, dst in 1u32..=8) {
            prop_assume!(src != dst);
            let infra = load_infrastructure(&spec).unwrap();
            let oracle = all_simple_paths(&infra, NnId(src), NnId(dst));
            match infra.physical_paths(NnId(src), NnId(dst), 3) {
                Ok(paths) => {
                    let expected: Vec<Vec<NnId>> = oracle.iter().take(3).map(|p| p.nodes.clone()).collect();
                    let got: Vec<Vec<NnId>> = paths.iter().map(|p| p.nodes.clone()).collect();
                    prop_assert_eq!(got, expected);
                    for p in &paths {
                        prop_assert_eq!(p.src(), NnId(src));
                        prop_assert_eq!(p.dst(), NnId(dst));
                        let uniq: BTreeSet<_> = p.nodes.iter().collect();
                        prop_assert_eq!(uniq.len(), p.nodes.len());
                    }
                }
                Err(InfraError::NoPath { .. }) => prop_assert!(oracle.is_empty()),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn best_path_delay_matches_floyd(spec in random_graph(), src in 1u32..=8, dst in 1u32..=8) {
            prop_assume!(src != dst);
            let infra = load_infrastructure(&spec).unwrap();
            let dist = floyd(&spec)[&(NnId(src), NnId(dst))];
            match infra.physical_paths(NnId(src), NnId(dst), 1) {
                Ok(p) => prop_assert!((p[0].delay_s - dist).abs() <= 1e-12),
                Err(_) => prop_assert!(dist.is_infinite()),
            }
        }

        #[test]
        fn paths_are_deterministic(spec in random_graph()) {
            let a = load_infrastructure(&spec).unwrap();
            let b = load_infrastructure(&spec).unwrap();
            prop_assert_eq!(a.physical_paths(NnId(1), NnId(8), 4), b.physical_paths(NnId(1), NnId(8), 4));
        }
    }
}
