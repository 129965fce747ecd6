//! CSV form of the engine's event trace.

use std::io::Write;

use hopon_core::sim::TraceRow;

pub fn write_trace<W: Write>(w: W, rows: &[TraceRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["time_s", "event", "vn", "packet", "node", "detail"])?;
    for r in rows {
        let opt = |x: Option<String>| x.unwrap_or_default();
        out.write_record([
            format!("{:.9}", r.time_s),
            r.event.to_string(),
            r.vn.to_string(),
            opt(r.packet.map(|p| p.to_string())),
            opt(r.node.map(|n| n.to_string())),
            r.detail.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
