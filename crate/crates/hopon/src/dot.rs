//! Graphviz export: the physical infrastructure plus one subgraph per slice
//! with its VN nodes, tunnels and open tunnels.

use std::fmt::Write;

use hopon_core::infra::{Infrastructure, NodeKind};
use hopon_core::slice::{OpenTunnelEnds, VnDescription};

pub fn to_dot(infra: &Infrastructure, slices: &[VnDescription]) -> String {
    let mut out = String::from("digraph hopon {\n  rankdir=LR;\n");
    out.push_str("  subgraph cluster_infra {\n    label=\"infrastructure\";\n");
    for n in infra.nodes() {
        let shape = if n.kind == NodeKind::Access { "box" } else { "ellipse" };
        let mut label = format!("NN {}", n.id.0);
        if let Some(c) = n.cluster {
            write!(label, "\\ncluster {}", c.0).unwrap();
        }
        writeln!(out, "    nn{} [label=\"{label}\", shape={shape}];", n.id.0).unwrap();
    }
    for l in infra.links() {
        writeln!(out, "    nn{} -> nn{} [dir=none, label=\"link {}\"];", l.a.0, l.b.0, l.id.0).unwrap();
    }
    out.push_str("  }\n");

    for vn in slices {
        let v = vn.id.0;
        writeln!(out, "  subgraph cluster_vn{v} {{\n    label=\"VN {v}\";").unwrap();
        for n in vn.nodes.values() {
            let mut label = format!("VN node {}\\nNN {}", n.id.0, n.nn.0);
            if let Some(a) = n.anchor {
                write!(label, "\\nanchor {a}").unwrap();
            }
            writeln!(out, "    vn{v}_{} [label=\"{label}\"];", n.id.0).unwrap();
        }
        for t in vn.tunnels.values() {
            writeln!(out, "    vn{v}_{} -> vn{v}_{} [label=\"tunnel {}\"];", t.ingress.0, t.egress.0, t.id.0).unwrap();
        }
        let access: std::collections::BTreeSet<u32> = vn.open_tunnels.values().map(|o| o.access_nn().0).collect();
        for nn in &access {
            writeln!(out, "    vn{v}_an{nn} [label=\"NN {nn}\", shape=box, style=dashed];").unwrap();
        }
        for o in vn.open_tunnels.values() {
            let (from, to) = match o.ends {
                OpenTunnelEnds::Dl { ingress, destination_nn } => {
                    (format!("vn{v}_{}", ingress.0), format!("vn{v}_an{}", destination_nn.0))
                }
                OpenTunnelEnds::Ul { source_nn, destination } => {
                    (format!("vn{v}_an{}", source_nn.0), format!("vn{v}_{}", destination.0))
                }
            };
            writeln!(out, "    {from} -> {to} [style=dashed, label=\"open {}\"];", o.id.0).unwrap();
        }
        out.push_str("  }\n");
    }
    out.push_str("}\n");
    out
}
