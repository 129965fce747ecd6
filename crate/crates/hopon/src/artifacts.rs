//! Text renderings of composed slices in the layout of the classic VN
//! configuration tables, plus the full deployed document as canonical JSON.

use std::collections::BTreeSet;
use std::fmt::Write;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use hopon_core::compose::{DeployedSlice, MappingKey, OpenTunnelTarget, Placement, RouterConfig, TunnelMapping};
use hopon_core::slice::{AlPolicy, QosSpec, VnSpec};
use hopon_core::NnId;
use serde::Serialize;

use crate::canonical::to_canonical_json;

pub const ROUTERS_FILE: &str = "routers.txt";
pub const ROUTING_FILE: &str = "routing.txt";
pub const MAPPING_FILE: &str = "mapping.txt";
pub const SDRA_OP_FILE: &str = "sdra_op.txt";
pub const DEPLOYED_FILE: &str = "deployed.json";

/// Integral values print without a fraction.
fn num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{x:.0}")
    } else {
        format!("{x}")
    }
}

fn placement(p: Placement) -> String {
    match p {
        Placement::Nn(n) => format!("NN {}", n.0),
        Placement::Cluster(c) => format!("cluster {}", c.0),
        Placement::Domain(d) => format!("domain {}", d.0),
    }
}

fn router_block(out: &mut String, r: &RouterConfig) {
    writeln!(out, "SDT-Op (VN router {}) at {}:", r.id.0, placement(r.placement)).unwrap();
    writeln!(out, " VN ID = {}:", r.vn.0).unwrap();
    for t in &r.tunnel_table {
        writeln!(out, " Tunnel {}: egress VN Node ID = {}", t.key.id.0, t.egress.0).unwrap();
    }
    for o in &r.open_tunnel_table {
        match o.target {
            OpenTunnelTarget::DestinationNn(nn) => {
                writeln!(out, " Open tunnel ID = {}: destination NN ID = {}", o.id.0, nn.0).unwrap()
            }
            OpenTunnelTarget::EgressVnNode(v) => {
                writeln!(out, " Open tunnel ID = {}: egress VN Node ID = {}", o.id.0, v.0).unwrap()
            }
        }
    }
    writeln!(out, " CM: {}", r.cm).unwrap();
}

pub fn routers_text(slices: &[DeployedSlice]) -> String {
    let mut out = String::new();
    for s in slices {
        for r in &s.routers {
            router_block(&mut out, r);
            out.push('\n');
        }
        writeln!(out, "Association of a VN to SDT-Op").unwrap();
        writeln!(out, " VN ID = {}:", s.vn.id.0).unwrap();
        for node in s.vn.nodes.keys() {
            if let Some(r) = s.router_serving(*node) {
                writeln!(out, " VN Node ID = {}, VN router ID = {}", node.0, r.id.0).unwrap();
            }
        }
        out.push('\n');
    }
    out
}

pub fn routing_text(slices: &[DeployedSlice]) -> String {
    let mut out = String::new();
    for s in slices {
        for r in s.routers.iter().filter(|r| !r.routing_table.is_empty()) {
            writeln!(out, "VN router {}", r.id.0).unwrap();
            writeln!(out, " VN ID = {}:", r.vn.0).unwrap();
            for (dest, key) in &r.routing_table.entries {
                writeln!(out, " Destination VN Node ID = {}, tunnel ID = {}", dest.0, key.id.0).unwrap();
            }
            if let Some(key) = r.routing_table.wildcard {
                writeln!(out, " All destination VN Nodes, tunnel ID = {}", key.id.0).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

fn mapping_lines(out: &mut String, m: &TunnelMapping) {
    let head = match m.key {
        MappingKey::Tunnel(k) => format!("Tunnel ID = {} (ingress VN Node ID = {})", k.id.0, k.ingress.0),
        MappingKey::Open(o) => format!("Open tunnel ID = {}", o.0),
    };
    for p in &m.paths {
        let nodes: Vec<String> = p.nodes.iter().map(|n| n.0.to_string()).collect();
        write!(out, " {head}: format = {}, NN path = {}, rate = {} bps", m.format, nodes.join(" -> "), num(p.rate_bps))
            .unwrap();
        if let Some(b) = m.latency_budget_s {
            write!(out, ", latency budget = {} s", num(b)).unwrap();
        }
        if let Some(r) = m.resource_id {
            write!(out, ", resource ID = {r}").unwrap();
        }
        out.push('\n');
    }
}

fn qos(q: &QosSpec) -> String {
    let mut s = format!("QoS rate = {} bps", num(q.rate_bps));
    if let Some(l) = q.latency_s {
        write!(s, ", latency = {} s", num(l)).unwrap();
    }
    s
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "YES"
    } else {
        "NO"
    }
}

fn al_block(out: &mut String, vn: u32, al: &AlPolicy) {
    writeln!(out, "Access Link (AL):").unwrap();
    for (dir, q) in [("DL", &al.dl_qos), ("UL", &al.ul_qos)] {
        writeln!(out, " {dir}: VN ID = {vn}: {}", qos(q)).unwrap();
        match (al.pre_assigned, al.resource_id) {
            (true, Some(id)) => writeln!(out, " AL resource pre-assignment = YES, resource ID = {id}").unwrap(),
            (p, _) => writeln!(out, " AL resource pre-assignment = {}", yes_no(p)).unwrap(),
        }
        writeln!(out, " Service based resource = {}", yes_no(al.shared)).unwrap();
    }
}

pub fn mapping_text(slices: &[DeployedSlice]) -> String {
    let mut out = String::new();
    for s in slices {
        let vn = s.vn.id.0;
        writeln!(out, "VN ID = {vn}: tunnel mapping").unwrap();
        for m in &s.mappings {
            mapping_lines(&mut out, m);
        }
        out.push('\n');
        let nns: BTreeSet<NnId> =
            s.nn_forwarding_rules.keys().copied().chain(s.al_configs.iter().map(|a| a.nn)).collect();
        for nn in nns {
            writeln!(out, "NN {}: VN ID = {vn}:", nn.0).unwrap();
            for (dest, next) in s.nn_forwarding_rules.get(&nn).into_iter().flatten() {
                writeln!(out, " Destination NN ID = {}, next NN ID = {}", dest.0, next.0).unwrap();
            }
            if let Some(al) = s.al_configs.iter().find(|a| a.nn == nn) {
                al_block(&mut out, vn, al);
            }
            out.push('\n');
        }
    }
    out
}

pub fn sdra_op_text(slices: &[DeployedSlice]) -> String {
    let mut out = String::new();
    for s in slices {
        let cos = s.sdra_op.device_cos;
        writeln!(out, "SDRA-Op: VN ID = {}:", s.vn.id.0).unwrap();
        writeln!(out, " Device CoS rate = {} bps, latency = {} s", num(cos.rate_bps), num(cos.latency_s)).unwrap();
        for c in &s.sdra_op.clusters {
            writeln!(
                out,
                " RAN cluster {}: DL rate = {} bps, UL rate = {} bps",
                c.cluster.0,
                num(c.dl_rate_bps),
                num(c.ul_rate_bps)
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}

/// JSON form of a deployed slice. The slice itself is written in its
/// scenario-file shape.
#[derive(Serialize)]
struct DeployedDoc<'a> {
    vn: VnSpec,
    routers: &'a [RouterConfig],
    mappings: &'a [TunnelMapping],
    nn_forwarding_rules: &'a std::collections::BTreeMap<NnId, std::collections::BTreeMap<NnId, NnId>>,
    al_configs: &'a [AlPolicy],
    sdra_op: &'a hopon_core::compose::SdraOpConfig,
}

pub fn deployed_json(slices: &[DeployedSlice]) -> serde_json::Result<String> {
    let docs: Vec<DeployedDoc<'_>> = slices
        .iter()
        .map(|s| DeployedDoc {
            vn: s.vn.to_spec(),
            routers: &s.routers,
            mappings: &s.mappings,
            nn_forwarding_rules: &s.nn_forwarding_rules,
            al_configs: &s.al_configs,
            sdra_op: &s.sdra_op,
        })
        .collect();
    to_canonical_json(&docs)
}

/// Writes all composition artifacts into `dir`, creating it if needed.
pub fn write_compose_outputs(dir: &Path, slices: &[DeployedSlice]) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let json = deployed_json(slices).map_err(io::Error::other)?;
    let files = [
        (ROUTERS_FILE, routers_text(slices)),
        (ROUTING_FILE, routing_text(slices)),
        (MAPPING_FILE, mapping_text(slices)),
        (SDRA_OP_FILE, sdra_op_text(slices)),
        (DEPLOYED_FILE, json),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_drop_integral_fractions() {
        assert_eq!(num(1e7), "10000000");
        assert_eq!(num(0.1), "0.1");
        assert_eq!(num(0.0), "0");
    }

    #[test]
    fn al_block_without_pre_assignment() {
        let mut out = String::new();
        al_block(&mut out, 1, &AlPolicy::unassigned(NnId(18)));
        assert!(out.contains(" AL resource pre-assignment = NO\n"));
        assert!(out.contains(" Service based resource = NO\n"));
        assert_eq!(out.matches("QoS rate = 0 bps").count(), 2);
    }
}
