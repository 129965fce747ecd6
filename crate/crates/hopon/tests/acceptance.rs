//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use hopon::artifacts::{mapping_text, routers_text, routing_text, sdra_op_text};
use hopon::canonical::to_canonical_json;
use hopon::{execute, load_scenario};
use hopon_core::cm::CmTree;
use hopon_core::compose::{allocate_latency_budget, routing_table, BudgetSplit, ComposeError};
use hopon_core::endpoint::{Endpoint, Endpoints};
use hopon_core::sim::{prepare, run_scenario, Engine, Scenario, SimError, StepResult};
use hopon_core::slice::{parse_vn_description, DeviceCos, OpenTunnelMode, QosSpec, TunnelSpec, VnNodeSpec, VnSpec};
use hopon_core::{LinkId, NnId, TunnelId, VnId, VnNodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn scenario(name: &str) -> Scenario {
    load_scenario(&fixtures().join(name)).unwrap()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn golden_reproduction() -> Outcome {
    let (_, deployed) = prepare(&scenario("fig2.scn")).map_err(|e| e.to_string())?;
    let rendered = [
        ("routers.txt", routers_text(&deployed)),
        ("routing.txt", routing_text(&deployed)),
        ("mapping.txt", mapping_text(&deployed)),
        ("sdra_op.txt", sdra_op_text(&deployed)),
    ];
    for (file, got) in &rendered {
        let want = fs::read_to_string(fixtures().join("golden/fig2").join(file)).map_err(|e| e.to_string())?;
        ensure(*got == want, || format!("{file} differs from golden"))?;
    }
    let routing = &rendered[1].1;
    let mapping = &rendered[2].1;
    ensure(routing.contains("VN router 4\n VN ID = 1:\n All destination VN Nodes, tunnel ID = 17\n"), || {
        "router 4 wildcard missing".into()
    })?;
    ensure(
        mapping.contains(
            "NN 11: VN ID = 1:\n Destination NN ID = 13, next NN ID = 16\n Destination NN ID = 17, next NN ID = 16\n",
        ),
        || "NN 11 rule for 17 missing".into(),
    )?;
    ensure(mapping.contains(" AL resource pre-assignment = NO\n"), || "NN 18 AL block missing".into())?;
    Ok("routers, routing, mapping, sdra_op byte-identical to goldens".into())
}

fn random_vn(rng: &mut ChaCha8Rng) -> VnSpec {
    let n = rng.random_range(1..=10u32);
    let count = rng.random_range(0..=20usize);
    let mut tunnels: Vec<TunnelSpec> = Vec::new();
    for _ in 0..count {
        let (a, b, id) = (rng.random_range(1..=n), rng.random_range(1..=n), rng.random_range(1..40u32));
        if a != b && !tunnels.iter().any(|t| t.ingress.0 == a && t.id.0 == id) {
            tunnels.push(TunnelSpec {
                id: TunnelId(id),
                ingress: VnNodeId(a),
                egress: VnNodeId(b),
                qos: QosSpec::rate(1e6),
            });
        }
    }
    VnSpec {
        id: VnId(1),
        ac_required: false,
        open_tunnel_mode: OpenTunnelMode::Multicast,
        device_cos: DeviceCos { rate_bps: 1.0, latency_s: 1.0 },
        nodes: (1..=n)
            .map(|i| VnNodeSpec { id: VnNodeId(i), nn: NnId(100 + i), cluster: None, domain: None })
            .collect(),
        tunnels,
        dl_open_tunnels: vec![],
        ul_open_tunnels: vec![],
        access_links: vec![],
    }
}

/// Forward BFS hop counts from `src` over the tunnel graph.
fn hops_from(spec: &VnSpec, src: u32) -> BTreeMap<u32, u32> {
    let mut dist = BTreeMap::from([(src, 0)]);
    let mut q = VecDeque::from([src]);
    while let Some(v) = q.pop_front() {
        for t in spec.tunnels.iter().filter(|t| t.ingress.0 == v) {
            if !dist.contains_key(&t.egress.0) {
                dist.insert(t.egress.0, dist[&v] + 1);
                q.push_back(t.egress.0);
            }
        }
    }
    dist
}

fn routing_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut vns, mut pairs) = (0, 0);
    for _ in 0..256 {
        let spec = random_vn(&mut rng);
        let vn = parse_vn_description(&spec).map_err(|e| e.to_string())?;
        let n = spec.nodes.len() as u32;
        let all: Vec<BTreeMap<u32, u32>> = (1..=n).map(|s| hops_from(&spec, s)).collect();
        let dist = |a: u32, b: u32| all[(a - 1) as usize].get(&b).copied();
        let tables: BTreeMap<u32, _> = (1..=n).map(|s| (s, routing_table(&vn, &[VnNodeId(s)]))).collect();
        for src in 1..=n {
            let (table, unreachable) = &tables[&src];
            let want_unreachable: Vec<u32> = (1..=n).filter(|&d| d != src && dist(src, d).is_none()).collect();
            let got_unreachable: Vec<u32> = unreachable.iter().map(|v| v.0).collect();
            ensure(got_unreachable == want_unreachable, || format!("unreachable set differs at node {src}"))?;
            for dst in (1..=n).filter(|&d| d != src && dist(src, d).is_some()) {
                pairs += 1;
                let want = spec
                    .tunnels
                    .iter()
                    .filter(|t| t.ingress.0 == src)
                    .filter_map(|t| dist(t.egress.0, dst).map(|d| (d + 1, t.id.0)))
                    .min()
                    .map(|(_, id)| id);
                let got = table.lookup(VnNodeId(dst)).map(|k| k.id.0);
                ensure(got == want, || format!("next hop {src}->{dst}: got {got:?}, oracle {want:?}"))?;

                let (mut at, mut seen, mut hops) = (src, BTreeSet::from([src]), 0);
                while at != dst {
                    let key = tables[&at].0.lookup(VnNodeId(dst)).ok_or(format!("walk {src}->{dst} stuck at {at}"))?;
                    let t = spec.tunnels.iter().find(|t| t.ingress == key.ingress && t.id == key.id).unwrap();
                    at = t.egress.0;
                    hops += 1;
                    ensure(seen.insert(at), || format!("walk {src}->{dst} loops at {at}"))?;
                }
                ensure(hops <= n, || format!("walk {src}->{dst} took {hops} hops"))?;
                ensure(Some(hops) == dist(src, dst), || format!("walk {src}->{dst} is not shortest"))?;
            }
        }
        vns += 1;
    }
    Ok(format!("{vns} random VNs, {pairs} reachable pairs match BFS oracle, walks loop-free"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let o = execute(std::iter::once("hopon").chain(args.iter().copied()), &mut out, &mut err);
    ensure(o.code == 0, || format!("{args:?} exited {}: {}", o.code, String::from_utf8_lossy(&err)))
}

fn signaling_free() -> Outcome {
    let s = scenario("fig2.scn");
    let (infra, deployed) = prepare(&s).map_err(|e| e.to_string())?;
    let mut cm = CmTree::new(&infra, s.cm);
    let mut eps = Endpoints::new(s.sim.ladder, s.sim.max_packet_bits);
    for d in &s.devices {
        eps.add(Endpoint::new(&d.name, d.kind, d.vn, d.nn));
        let r = eps.register(&d.name, &deployed, &infra, &mut cm, 0.0).map_err(|e| e.to_string())?;
        ensure(r.messages == 7, || format!("{} registration cost {} messages", d.name, r.messages))?;
    }
    let (report, _) = run_scenario(&s, false).map_err(|e| e.to_string())?;
    let v = &report.vns[&1];
    ensure(report.signaling.registration == 7 * s.devices.len() as u64, || "registration total".into())?;
    ensure(report.signaling.per_packet_total() == 0, || format!("per-packet signaling {:?}", report.signaling))?;
    ensure(v.sent > 0 && v.delivered == v.sent, || format!("delivered {}/{}", v.delivered, v.sent))?;

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut columns = Vec::new();
    for (fixture, moves) in [("fig2.scn", 0u64), ("baseline_moves.scn", 3)] {
        let metrics = tmp.path().join(fixture).with_extension("json");
        let scn = fixtures().join(fixture);
        run_cli(&["compare", scn.to_str().unwrap(), "--metrics", metrics.to_str().unwrap()])?;
        let v: Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
        let col = &v["signaling"]["session_baseline"];
        let n = u64::from(scenario(fixture).sim.session_setup_messages);
        let (hop, base) = (col["hop_on"].as_u64(), col["session_baseline"].as_u64());
        ensure(hop == Some(0), || format!("{fixture}: hop-on session column {hop:?}"))?;
        ensure(base == Some(n * (1 + moves)) && n * (1 + moves) >= 10, || {
            format!("{fixture}: baseline column {base:?}")
        })?;
        columns.push(base.unwrap());
    }
    Ok(format!("7 messages per device, 0 per packet over {} packets; baseline session columns {columns:?}", v.sent))
}

fn handover_free() -> Outcome {
    let ratio = |f: &str| -> Result<(f64, u64), String> {
        let (r, _) = run_scenario(&scenario(f), false).map_err(|e| e.to_string())?;
        let b = &r.devices["B"];
        Ok((b.delivery_ratio, b.addressed))
    };
    let (multi, addressed) = ratio("handover_multicast.scn")?;
    let (single, _) = ratio("handover_single.scn")?;
    ensure(addressed > 0 && multi == 1.0, || format!("multicast ratio {multi}"))?;
    ensure(single < 1.0, || format!("single-tunnel ratio {single}"))?;
    Ok(format!("multicast {multi:.3} over {addressed} packets, single open tunnel {single:.3}"))
}

fn budget_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.random_range(1..=12usize);
        let delays: Vec<f64> = (0..len).map(|_| rng.random_range(1e-6..0.02)).collect();
        let max = delays.iter().cloned().fold(0.0, f64::max);
        let budget = max * len as f64 * rng.random_range(1.0..20.0);
        for split in [BudgetSplit::Equal, BudgetSplit::DelayProportional] {
            let parts = allocate_latency_budget(budget, &delays, split).map_err(|e| e.to_string())?;
            ensure(parts.len() == len, || "share count".into())?;
            let rel = (parts.iter().sum::<f64>() - budget).abs() / budget;
            worst = worst.max(rel);
            ensure(rel <= 1e-9, || format!("{split:?}: relative error {rel:e}"))?;
        }
    }
    let ex =
        allocate_latency_budget(0.1, &[0.001, 0.003], BudgetSplit::DelayProportional).map_err(|e| e.to_string())?;
    ensure(ex == [0.025, 0.075], || format!("100 ms over (1, 3) ms gave {ex:?}"))?;
    Ok(format!("1000 pairs x 2 policies, worst relative error {worst:.2e}; (1, 3) ms -> (25, 75) ms"))
}

fn admission() -> Outcome {
    let s = scenario("admission_devices.scn");
    let (infra, deployed) = prepare(&s).map_err(|e| e.to_string())?;
    let mut cm = CmTree::new(&infra, s.cm);
    let mut eps = Endpoints::new(s.sim.ladder, s.sim.max_packet_bits);
    let cos = deployed[0].vn.device_cos.rate_bps;
    let mut grants = Vec::new();
    for name in ["a", "b", "c"] {
        eps.add(Endpoint::new(name, Default::default(), VnId(1), NnId(19)));
        eps.register(name, &deployed, &infra, &mut cm, 0.0).map_err(|e| e.to_string())?;
        grants.push(eps.request_service_admission(name, cos, &deployed).map_err(|e| e.to_string())?);
    }
    ensure(grants == [true, true, false], || format!("grants {grants:?}"))?;

    let twin = scenario("admission_twin_slices.scn");
    let cap = twin.infrastructure.links[0].capacity_bps;
    let rate = twin.slices[0].tunnels[0].qos.rate_bps;
    ensure(cap == 1.5 * rate, || "fixture capacity is not 1.5x the tunnel rate".into())?;
    match prepare(&twin) {
        Err(SimError::Compose { vn: 2, source: ComposeError::Rejected(b) }) => {
            ensure(b.link == LinkId(7), || format!("bottleneck {}", b.link))?;
        }
        other => return Err(format!("second slice not rejected: {other:?}")),
    }
    Ok("device grants [yes, yes, no]; second twin slice rejected at link 7".into())
}

fn isolation() -> Outcome {
    let stats = |f: &str| -> Result<(Vec<f64>, f64), String> {
        let mut e = Engine::new(&scenario(f)).map_err(|e| e.to_string())?;
        while let StepResult::Processed { .. } = e.step().map_err(|e| e.to_string())? {}
        let lat = e.deliveries().iter().filter(|d| d.vn == VnId(1)).map(|d| d.latency_s).collect();
        Ok((lat, e.report().vns[&1].latency.variance_s2))
    };
    let s = scenario("isolation_dedicated.scn");
    let link = |id: u32| s.infrastructure.links.iter().find(|l| l.id.0 == id).unwrap();
    let (size, rate) = (f64::from(s.traffic[0].size_bits), s.slices[0].tunnels[0].qos.rate_bps);
    // NN 1 -> NN 2 -> NN 3 over links 1 and 2, each serialised at the reserved rate.
    let closed_form: f64 = [1, 2].iter().map(|&l| size / rate + link(l).delay_s).sum();

    let (lat, var) = stats("isolation_dedicated.scn")?;
    ensure(!lat.is_empty(), || "no dedicated deliveries".into())?;
    ensure(var == 0.0, || format!("dedicated variance {var:e}"))?;
    let worst = lat.iter().map(|l| (l - closed_form).abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-9, || format!("dedicated latency off closed form by {worst:e} s"))?;
    let (_, twin_var) = stats("isolation_shared.scn")?;
    ensure(twin_var > 0.0, || "shared twin shows no variance".into())?;
    Ok(format!(
        "{} packets at {closed_form:.6} s (max deviation {worst:.1e}), variance 0; shared twin variance {twin_var:.3e}",
        lat.len()
    ))
}

fn determinism() -> Outcome {
    let mut names = Vec::new();
    for entry in fs::read_dir(fixtures()).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.extension().is_some_and(|x| x == "scn") {
            names.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    names.sort();
    let mut runs = 0;
    for f in &names {
        let s = scenario(f);
        if prepare(&s).is_err() {
            continue;
        }
        let once = |s: &Scenario| run_scenario(s, false).map(|(r, _)| to_canonical_json(&r).unwrap());
        let (a, b) = (once(&s).map_err(|e| e.to_string())?, once(&s).map_err(|e| e.to_string())?);
        ensure(a == b, || format!("{f}: metrics differ between runs"))?;
        runs += 1;
    }
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scn = fixtures().join("isolation_shared.scn");
    let files: Vec<PathBuf> = ["a.json", "b.json"].iter().map(|n| tmp.path().join(n)).collect();
    for m in &files {
        run_cli(&["run", scn.to_str().unwrap(), "--metrics", m.to_str().unwrap()])?;
    }
    ensure(fs::read(&files[0]).unwrap() == fs::read(&files[1]).unwrap(), || "CLI metrics files differ".into())?;
    Ok(format!("{runs} fixtures and the CLI produce byte-identical metrics JSON on rerun"))
}

fn main() -> ExitCode {
    let criteria: [Check; 8] = [
        ("golden reproduction", golden_reproduction),
        ("routing oracle equivalence", routing_oracle),
        ("signaling-free hop-on", signaling_free),
        ("handover-free delivery", handover_free),
        ("latency budget conservation", budget_conservation),
        ("admission", admission),
        ("dedicated-resource isolation", isolation),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
