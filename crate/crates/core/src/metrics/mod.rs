//! Measured channel properties and their comparison with the declared table.

pub mod dist;
pub mod measure;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::chan::{
    check_requirements, declared, ChannelConfig, ChannelSpec, Count, Flag, MemClass, Ordering, OrderingReq, Selector,
    Transport,
};
use crate::fabric::TransportProfile;
use crate::workload::RunError;

pub use measure::{classify, Side, ALLOC_UNIT, HRT};

/// Node counts for the memory-scaling fits.
pub const MEMORY_NS: [u64; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredRow {
    pub selector: Selector,
    pub profile: String,
    pub hrt: f64,
    pub reqs_send: f64,
    pub reqs_recv: f64,
    pub blocking: Flag,
    pub zc_send: Flag,
    pub zc_recv: Flag,
    pub variable: Flag,
    pub mem_1_to_n: MemClass,
    pub mem_n_to_1: MemClass,
    pub transport: Option<Transport>,
    pub ordering: Ordering,
    /// No request of any kind posted by the sender / receiver.
    pub passive_send: bool,
    pub passive_recv: bool,
}

#[derive(Debug, Clone)]
pub struct MeasureParams {
    pub cfg: ChannelConfig,
    /// Messages in the synchronized run.
    pub sync_messages: u64,
    pub ordering_seeds: u64,
    pub ordering_messages: u64,
}

impl Default for MeasureParams {
    fn default() -> Self {
        MeasureParams { cfg: ChannelConfig::default(), sync_messages: 16, ordering_seeds: 2, ordering_messages: 300 }
    }
}

/// The compatible profile offering the fewest features: EFA, then 1RMA,
/// then InfiniBand.
pub fn least_capable_profile(sel: Selector) -> TransportProfile {
    let spec = declared(sel).effective();
    [TransportProfile::efa(), TransportProfile::one_rma(), TransportProfile::ib_roce()]
        .into_iter()
        .find(|p| check_requirements(&spec, &crate::fabric::Fabric::new(p.clone(), 0, Default::default())).is_ok())
        .unwrap_or_else(TransportProfile::ib_roce)
}

/// Measures every table column of `sel` on `profile`.
pub fn measure(sel: Selector, profile: &TransportProfile, p: &MeasureParams) -> Result<MeasuredRow, RunError> {
    let cfg = &p.cfg;
    let sync = measure::sync_run(sel, profile, cfg, p.sync_messages, 64)?;
    let blocking = measure::blocking_ok(sel, profile, cfg, sync.reqs_recv)?;
    let copies = measure::copy_run(sel, profile, cfg)?;
    // Payload carried entirely in immediates: no buffer to copy or size.
    let bufferless = copies.data_bytes == 0;
    let options = supports_options(sel, profile, cfg)?;
    let na_or = |b: bool| if bufferless { Flag::NotApplicable } else { Flag::from_bool(b) };
    let variable = measure::variable_ok(sel, profile, cfg)?;
    let one_n = measure::memory_points(sel, profile, cfg, Side::OneToN, &MEMORY_NS)?;
    let n_one = measure::memory_points(sel, profile, cfg, Side::NToOne, &MEMORY_NS)?;
    let ordering = measure::ordering_needed(sel, cfg, p.ordering_seeds, p.ordering_messages)?;
    Ok(MeasuredRow {
        selector: sel,
        profile: profile.cli_name().to_string(),
        hrt: sync.hrt(),
        reqs_send: sync.reqs_send,
        reqs_recv: sync.reqs_recv,
        blocking: Flag::from_bool(blocking),
        zc_send: na_or(copies.send_copy == 0),
        // Only the option path lands data at an application-chosen place.
        zc_recv: na_or(options && copies.recv_copy == 0),
        variable: na_or(variable),
        mem_1_to_n: classify(&one_n),
        mem_n_to_1: classify(&n_one),
        transport: measure::transport_of(&sync.ops),
        ordering,
        passive_send: sync.all_send == 0,
        passive_recv: sync.all_recv == 0,
    })
}

fn supports_options(sel: Selector, profile: &TransportProfile, cfg: &ChannelConfig) -> Result<bool, RunError> {
    let mut fab = crate::fabric::Fabric::new(profile.clone(), 0, Default::default());
    let (a, b) = (fab.add_endpoint(), fab.add_endpoint());
    let ch = crate::chan::open_channel(sel, &mut fab, &[a], &[b], cfg)?;
    Ok(ch.receivers[0].supports_options())
}

/// Column-wise differences between a declared row and a measurement.
pub fn mismatches(spec: &ChannelSpec, m: &MeasuredRow) -> Vec<String> {
    let spec = spec.effective();
    let mut out = Vec::new();
    let mut cmp = |name: &str, ok: bool, declared: String, measured: String| {
        if !ok {
            out.push(format!("{name}: declared {declared}, measured {measured}"));
        }
    };
    let count = |c: Count, v: f64| (c.matches(v), c.to_string(), fmt_g6(v));
    let (ok, d, v) = count(spec.hrt_latency, m.hrt);
    cmp("hrt", ok, d, v);
    let (ok, d, v) = count(spec.requests_send, m.reqs_send);
    cmp("reqs_send", ok, d, v);
    let (ok, d, v) = count(spec.requests_recv, m.reqs_recv);
    cmp("reqs_recv", ok, d, v);
    for (name, d, v) in [
        ("blocking", spec.blocking_recv, m.blocking),
        ("zc_send", spec.zero_copy_send, m.zc_send),
        ("zc_recv", spec.zero_copy_recv, m.zc_recv),
        ("variable", spec.variable_size, m.variable),
    ] {
        cmp(name, d == v, d.to_string(), v.to_string());
    }
    cmp("mem_1_to_n", spec.mem_1_to_n == m.mem_1_to_n, spec.mem_1_to_n.to_string(), m.mem_1_to_n.to_string());
    cmp("mem_n_to_1", spec.mem_n_to_1 == m.mem_n_to_1, spec.mem_n_to_1.to_string(), m.mem_n_to_1.to_string());
    let t = m.transport.map(|t| t.to_string()).unwrap_or_else(|| "none".into());
    cmp("transport", m.transport == Some(spec.transport), spec.transport.to_string(), t);
    let o = OrderingReq::Fixed(m.ordering);
    cmp("ordering", spec.ordering == o, spec.ordering.to_string(), o.to_string());
    out
}

#[derive(Debug, Clone)]
pub struct MatrixRow {
    pub declared: ChannelSpec,
    pub measured: Result<MeasuredRow, String>,
    pub diffs: Vec<String>,
}

impl MatrixRow {
    pub fn matches(&self) -> bool {
        self.measured.is_ok() && self.diffs.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
}

pub const MATRIX_HEADER: &str = "channel,profile,hrt,reqs_send,reqs_recv,blocking,zc_send,zc_recv,variable,mem_1_to_n,mem_n_to_1,transport,ordering,passive_send,passive_recv,match";

impl MatrixReport {
    pub fn matched(&self) -> usize {
        self.rows.iter().filter(|r| r.matches()).count()
    }

    pub fn all_match(&self) -> bool {
        self.matched() == self.rows.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(MATRIX_HEADER);
        s.push('\n');
        for r in &self.rows {
            let sel = r.declared.selector;
            match &r.measured {
                Ok(m) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                        sel,
                        m.profile,
                        fmt_g6(m.hrt),
                        fmt_g6(m.reqs_send),
                        fmt_g6(m.reqs_recv),
                        m.blocking,
                        m.zc_send,
                        m.zc_recv,
                        m.variable,
                        m.mem_1_to_n,
                        m.mem_n_to_1,
                        m.transport.map(|t| t.to_string()).unwrap_or_else(|| "none".into()),
                        m.ordering,
                        m.passive_send,
                        m.passive_recv,
                        r.matches()
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{sel},,,,,,,,,,,,,,,false # {}", e.replace(',', ";"));
                }
            }
        }
        s
    }

    /// One line per mismatching column.
    pub fn diff_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.rows {
            let sel = r.declared.selector;
            if let Err(e) = &r.measured {
                out.push(format!("{sel}: measurement failed: {e}"));
            }
            out.extend(r.diffs.iter().map(|d| format!("{sel}: {d}")));
        }
        out
    }
}

/// Measures each declared row on its least-capable profile and compares.
pub fn validate_matrix(specs: &[ChannelSpec], p: &MeasureParams) -> MatrixReport {
    let rows = specs
        .iter()
        .map(|spec| {
            let profile = least_capable_profile(spec.selector);
            let measured = measure(spec.selector, &profile, p).map_err(|e| e.to_string());
            let diffs = measured.as_ref().map(|m| mismatches(spec, m)).unwrap_or_default();
            MatrixRow { declared: *spec, measured, diffs }
        })
        .collect();
    MatrixReport { rows }
}

/// Formats with six significant digits, dropping trailing zeros.
pub fn fmt_g6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = 6 - 1 - x.abs().log10().floor() as i32;
    let s = format!("{:.*}", digits.max(0) as usize, x);
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g6_formatting() {
        assert_eq!(fmt_g6(3.0), "3");
        assert_eq!(fmt_g6(2.5), "2.5");
        assert_eq!(fmt_g6(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_g6(123456.7), "123457");
        assert_eq!(fmt_g6(0.0), "0");
    }

    #[test]
    fn classification_thresholds() {
        assert_eq!(classify(&[(1, 100), (2, 108), (4, 124), (8, 156)]), MemClass::O1);
        assert_eq!(classify(&[(1, 65_536), (2, 131_072), (4, 262_144), (8, 524_288)]), MemClass::ON);
        assert_eq!(classify(&[(1, 0), (2, 50_000), (4, 0), (8, 50_000)]), MemClass::Unclassified);
        assert_eq!(classify(&[(1, 5)]), MemClass::Unclassified);
    }
}
