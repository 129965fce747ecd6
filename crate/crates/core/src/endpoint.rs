//! Devices and servers: registration ladder, service admission, hop-on
//! sending with policing, and mobility.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::cm::{CmError, CmTree, LocationUpdate};
use crate::compose::{DeployedSlice, MappingKey};
use crate::ids::{NnId, VnId, VnNodeId};
use crate::infra::Infrastructure;
use crate::slice::{OpenTunnelEnds, VnDescription};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EndpointKind {
    #[default]
    Fixed,
    Mobile,
    /// Attached to a core node; no access link and no mobility.
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Unregistered,
    NetworkRegistered,
    CmRegistered,
    SliceRegistered,
    Admitted,
}

/// One step of a mobility trace: either a direct attachment or a set of
/// signal readings whose strongest entry becomes the serving node.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(untagged))]
pub enum MobilityStep {
    Attach { at_s: f64, nn: NnId },
    Readings { at_s: f64, readings: Vec<(NnId, f64)> },
}

impl MobilityStep {
    pub fn at_s(&self) -> f64 {
        match self {
            MobilityStep::Attach { at_s, .. } | MobilityStep::Readings { at_s, .. } => *at_s,
        }
    }

    /// The access node that serves the device after this step.
    pub fn serving(&self) -> Option<NnId> {
        match self {
            MobilityStep::Attach { nn, .. } => Some(*nn),
            MobilityStep::Readings { readings, .. } => readings
                .iter()
                .copied()
                .reduce(|a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a })
                .map(|r| r.0),
        }
    }
}

/// Message counts of the registration steps that do not involve the CM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct LadderCosts {
    pub network_registration: u32,
    pub slice_registration: u32,
}

impl Default for LadderCosts {
    fn default() -> Self {
        Self { network_registration: 2, slice_registration: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistrationResult {
    pub vn: VnId,
    pub radio_id: Option<u32>,
    pub anchor: VnNodeId,
    pub ac_required: bool,
    pub messages: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EndpointError {
    #[error("unknown endpoint {0}")]
    Unknown(String),
    #[error("{0} already registered")]
    AlreadyRegistered(String),
    #[error("{0} is not registered to its slice")]
    NotRegistered(String),
    #[error("{0} has not been admitted")]
    NotAdmitted(String),
    #[error("vn {0} is not deployed")]
    NotDeployed(u32),
    #[error("{0} is outside every anchor scope")]
    NoAnchor(NnId),
    #[error("admission not applicable")]
    AdmissionNotApplicable,
    #[error("no anchor-facing tunnel for {0}")]
    NoAnchorTunnel(String),
    #[error("{0} is not mobile")]
    NotMobile(String),
    #[error("empty destination name")]
    EmptyDestination,
    #[error("unknown {0}")]
    UnknownNode(NnId),
    #[error(transparent)]
    Cm(#[from] CmError),
}

/// Sliding one-second byte counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Policer {
    window: VecDeque<(f64, f64)>,
}

impl Policer {
    pub const WINDOW_S: f64 = 1.0;

    /// Accepts `bits` at `now` if the closed window `[now - 1 s, now]` stays
    /// within `rate_bps` · 1 s plus `slack_bits`.
    pub fn offer(&mut self, now: f64, bits: f64, rate_bps: f64, slack_bits: f64) -> bool {
        while self.window.front().is_some_and(|(t, _)| *t < now - Self::WINDOW_S) {
            self.window.pop_front();
        }
        let used: f64 = self.window.iter().map(|(_, b)| b).sum();
        if used + bits <= rate_bps * Self::WINDOW_S + slack_bits {
            self.window.push_back((now, bits));
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Endpoint {
    pub name: String,
    pub kind: EndpointKind,
    pub phase: Phase,
    pub vn: VnId,
    pub radio_id: Option<u32>,
    pub anchor: Option<VnNodeId>,
    pub nn: NnId,
    pub admitted_rate_bps: f64,
    admission_key: Option<MappingKey>,
    policer: Policer,
}

impl Endpoint {
    pub fn new(name: &str, kind: EndpointKind, vn: VnId, nn: NnId) -> Self {
        Self {
            name: name.into(),
            kind,
            phase: Phase::Unregistered,
            vn,
            radio_id: None,
            anchor: None,
            nn,
            admitted_rate_bps: 0.0,
            admission_key: None,
            policer: Policer::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendOutcome {
    /// False when the policer rejected the packet.
    pub accepted: bool,
    /// Access-link grant requests this packet needed.
    pub al_messages: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MoveEvents {
    pub from: Option<NnId>,
    pub to: Option<NnId>,
    pub updates: Vec<LocationUpdate>,
    pub messages: u32,
}

/// All endpoints of a run plus the per-NN radio id counters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Endpoints {
    pub costs: LadderCosts,
    /// Slack added to every policing window.
    pub max_packet_bits: f64,
    endpoints: BTreeMap<String, Endpoint>,
    radio_counters: BTreeMap<NnId, u32>,
    admitted: BTreeMap<(VnId, MappingKey), f64>,
}

fn slice_for(deployed: &[DeployedSlice], vn: VnId) -> Result<&DeployedSlice, EndpointError> {
    deployed.iter().find(|d| d.vn.id == vn).ok_or(EndpointError::NotDeployed(vn.0))
}

/// The tunnel whose rate bounds service admission for a device at `nn`
/// anchored at `anchor`: the uplink open tunnel at `nn` when it carries a
/// rate, else the lowest-keyed tunnel into `anchor`.
pub fn anchor_facing_tunnel(vn: &VnDescription, nn: NnId, anchor: VnNodeId) -> Option<(MappingKey, f64)> {
    if let Some(o) = vn.ul_open_tunnel_at(nn) {
        if o.qos.rate_bps > 0.0 && matches!(o.ends, OpenTunnelEnds::Ul { .. }) {
            return Some((MappingKey::Open(o.id), o.qos.rate_bps));
        }
    }
    vn.tunnels.values().find(|t| t.egress == anchor).map(|t| (MappingKey::Tunnel(t.key()), t.qos.rate_bps))
}

impl Endpoints {
    pub fn new(costs: LadderCosts, max_packet_bits: f64) -> Self {
        Self { costs, max_packet_bits, ..Default::default() }
    }

    pub fn add(&mut self, endpoint: Endpoint) {
        self.endpoints.insert(endpoint.name.clone(), endpoint);
    }

    pub fn get(&self, name: &str) -> Option<&Endpoint> {
        self.endpoints.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Endpoint> {
        self.endpoints.values()
    }

    fn get_mut(&mut self, name: &str) -> Result<&mut Endpoint, EndpointError> {
        self.endpoints.get_mut(name).ok_or_else(|| EndpointError::Unknown(name.into()))
    }

    /// Runs the full ladder: network, CM and slice registration.
    pub fn register(
        &mut self,
        name: &str,
        deployed: &[DeployedSlice],
        infra: &Infrastructure,
        cm: &mut CmTree,
        now: f64,
    ) -> Result<RegistrationResult, EndpointError> {
        let costs = self.costs;
        let ep = self.endpoints.get(name).ok_or_else(|| EndpointError::Unknown(name.into()))?;
        if ep.phase != Phase::Unregistered {
            return Err(EndpointError::AlreadyRegistered(name.into()));
        }
        let slice = slice_for(deployed, ep.vn)?;
        let (kind, nn) = (ep.kind, ep.nn);
        infra.node(nn).ok_or(EndpointError::UnknownNode(nn))?;
        let anchor = slice.vn.anchor_for_nn(infra, nn).ok_or(EndpointError::NoAnchor(nn))?;

        let mut messages = costs.network_registration;
        self.get_mut(name)?.phase = Phase::NetworkRegistered;
        let reg = match kind {
            EndpointKind::Server => cm.register_server(name, nn, now)?,
            _ => cm.register_device(name, nn, now)?,
        };
        messages += reg.messages;
        self.get_mut(name)?.phase = Phase::CmRegistered;

        let radio_id = if kind == EndpointKind::Server {
            None
        } else {
            let c = self.radio_counters.entry(nn).or_insert(0);
            *c += 1;
            Some(*c)
        };
        messages += costs.slice_registration;
        let ep = self.get_mut(name)?;
        ep.phase = Phase::SliceRegistered;
        ep.radio_id = radio_id;
        ep.anchor = Some(anchor);
        Ok(RegistrationResult { vn: ep.vn, radio_id, anchor, ac_required: slice.vn.ac_required, messages })
    }

    /// Grants `rate_bps` if the anchor-facing tunnel still has room for it.
    pub fn request_service_admission(
        &mut self,
        name: &str,
        rate_bps: f64,
        deployed: &[DeployedSlice],
    ) -> Result<bool, EndpointError> {
        let ep = self.endpoints.get(name).ok_or_else(|| EndpointError::Unknown(name.into()))?;
        if ep.phase < Phase::SliceRegistered {
            return Err(EndpointError::NotRegistered(name.into()));
        }
        let slice = slice_for(deployed, ep.vn)?;
        if !slice.vn.ac_required {
            return Err(EndpointError::AdmissionNotApplicable);
        }
        let anchor = ep.anchor.ok_or_else(|| EndpointError::NotRegistered(name.into()))?;
        let (key, cap) =
            anchor_facing_tunnel(&slice.vn, ep.nn, anchor).ok_or_else(|| EndpointError::NoAnchorTunnel(name.into()))?;
        let vn = ep.vn;
        let previous = if ep.admission_key == Some(key) { ep.admitted_rate_bps } else { 0.0 };
        let used = self.admitted.get(&(vn, key)).copied().unwrap_or(0.0) - previous;
        if used + rate_bps > cap {
            return Ok(false);
        }
        self.release(name);
        *self.admitted.entry((vn, key)).or_insert(0.0) += rate_bps;
        let ep = self.get_mut(name)?;
        ep.admitted_rate_bps = rate_bps;
        ep.admission_key = Some(key);
        ep.phase = Phase::Admitted;
        Ok(true)
    }

    fn release(&mut self, name: &str) {
        if let Some(ep) = self.endpoints.get_mut(name) {
            if let Some(key) = ep.admission_key.take() {
                if let Some(v) = self.admitted.get_mut(&(ep.vn, key)) {
                    *v -= ep.admitted_rate_bps;
                }
                ep.admitted_rate_bps = 0.0;
            }
        }
    }

    /// Drops registration and admission; CM records are left to the caller.
    pub fn deregister(&mut self, name: &str) -> Result<(), EndpointError> {
        self.release(name);
        let ep = self.get_mut(name)?;
        ep.phase = Phase::Unregistered;
        ep.radio_id = None;
        ep.anchor = None;
        Ok(())
    }

    /// Admits one packet into the network. Policing uses the admitted rate
    /// on slices with admission control and the device CoS rate otherwise;
    /// servers are not policed.
    pub fn hop_on_send(
        &mut self,
        name: &str,
        destination: &str,
        size_bits: f64,
        deployed: &[DeployedSlice],
        now: f64,
    ) -> Result<SendOutcome, EndpointError> {
        if destination.is_empty() {
            return Err(EndpointError::EmptyDestination);
        }
        let slack = self.max_packet_bits;
        let ep = self.endpoints.get_mut(name).ok_or_else(|| EndpointError::Unknown(name.into()))?;
        if ep.phase < Phase::SliceRegistered {
            return Err(EndpointError::NotRegistered(name.into()));
        }
        let slice = slice_for(deployed, ep.vn)?;
        let vn = &slice.vn;
        if vn.ac_required && ep.phase != Phase::Admitted {
            return Err(EndpointError::NotAdmitted(name.into()));
        }
        if ep.kind == EndpointKind::Server {
            return Ok(SendOutcome { accepted: true, al_messages: 0 });
        }
        let rate = if vn.ac_required { ep.admitted_rate_bps } else { vn.device_cos.rate_bps };
        let accepted = ep.policer.offer(now, size_bits, rate, slack);
        let al_messages = if vn.al_policy(ep.nn).signaling_free() { 0 } else { 1 };
        Ok(SendOutcome { accepted, al_messages })
    }

    /// Applies one mobility step: location update towards the CM and, for
    /// readings, a measurement report to the serving cluster CM.
    pub fn apply_move(
        &mut self,
        name: &str,
        step: &MobilityStep,
        infra: &Infrastructure,
        cm: &mut CmTree,
        now: f64,
    ) -> Result<MoveEvents, EndpointError> {
        let ep = self.endpoints.get(name).ok_or_else(|| EndpointError::Unknown(name.into()))?;
        if ep.kind != EndpointKind::Mobile {
            return Err(EndpointError::NotMobile(name.into()));
        }
        if let MobilityStep::Readings { readings, .. } = step {
            if let Some((nn, _)) = readings.iter().find(|(nn, _)| infra.node(*nn).is_none()) {
                return Err(EndpointError::UnknownNode(*nn));
            }
        }
        let Some(target) = step.serving() else {
            return Ok(MoveEvents::default());
        };
        infra.node(target).ok_or(EndpointError::UnknownNode(target))?;
        let from = ep.nn;
        let registered = ep.phase >= Phase::CmRegistered;
        let mut events = MoveEvents { from: Some(from), to: Some(target), ..Default::default() };

        if registered {
            let same_cluster = infra.node(from).and_then(|n| n.cluster) == infra.node(target).and_then(|n| n.cluster);
            match step {
                MobilityStep::Attach { .. } => {
                    let out = cm.move_device(name, target, now)?;
                    events.messages += out.messages;
                    events.updates = out.updates;
                }
                MobilityStep::Readings { readings, .. } => {
                    if !same_cluster {
                        let out = cm.move_device(name, target, now)?;
                        events.messages += out.messages;
                        events.updates = out.updates;
                    }
                    let report = cm.report_measurements(name, readings, now)?;
                    events.messages += 1;
                    if let Some(out) = report.moved {
                        events.messages += out.messages;
                        events.updates.extend(out.updates);
                    }
                }
            }
        }
        self.get_mut(name)?.nn = target;
        if from == target && events.updates.is_empty() && matches!(step, MobilityStep::Attach { .. }) {
            return Ok(MoveEvents::default());
        }
        Ok(events)
    }

    pub fn admitted_total(&self, vn: VnId, key: MappingKey) -> f64 {
        self.admitted.get(&(vn, key)).copied().unwrap_or(0.0)
    }

    pub fn names(&self) -> Vec<String> {
        self.endpoints.keys().map(ToString::to_string).collect()
    }
}
