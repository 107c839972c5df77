use std::fmt::Write as _;

use super::types::{EndpointId, Opcode, Purpose};

/// Per-endpoint instrumentation. Counters only grow; `Fabric::reset_counters`
/// clears them between workloads.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    posted: [[u64; 3]; 7],
    pub hrts_traversed: u64,
    pub dma_bytes: u64,
    /// Payload bytes named by posted data-path requests (not RECV).
    pub data_bytes: u64,
    pub cpu_copy_bytes: u64,
    pub zeroed_bytes: u64,
    pub pcie_round_trips: u64,
    pub emulated_read_trips: u64,
    pub cq_polls: u64,
    pub cq_empty_polls: u64,
    /// Currently registered bytes; tracks residency rather than a running total.
    pub registered_bytes: u64,
    pub app_registered_bytes: u64,
}

impl Counters {
    pub(crate) fn record_post(&mut self, op: Opcode, purpose: Purpose) {
        self.posted[op.index()][purpose.index()] += 1;
    }

    pub fn posted(&self, op: Opcode, purpose: Purpose) -> u64 {
        self.posted[op.index()][purpose.index()]
    }

    pub fn posted_op(&self, op: Opcode) -> u64 {
        self.posted[op.index()].iter().sum()
    }

    /// Network requests (not RECV) excluding reverse-path control traffic.
    pub fn channel_requests(&self) -> u64 {
        Opcode::ALL
            .iter()
            .filter(|op| op.is_network())
            .map(|op| self.posted(*op, Purpose::Data) + self.posted(*op, Purpose::Aux))
            .sum()
    }

    /// Every posted verb request, RECV and control included.
    pub fn all_requests(&self) -> u64 {
        self.posted.iter().flatten().sum()
    }

    pub(crate) fn clear_activity(&mut self) {
        *self = Counters {
            registered_bytes: self.registered_bytes,
            app_registered_bytes: self.app_registered_bytes,
            ..Default::default()
        };
    }

    fn metrics(&self) -> Vec<(String, u64)> {
        let mut out = Vec::new();
        for op in Opcode::ALL {
            for p in Purpose::ALL {
                let v = self.posted(op, p);
                if v > 0 {
                    let tag = match p {
                        Purpose::Data => "data",
                        Purpose::Aux => "aux",
                        Purpose::Control => "control",
                    };
                    out.push((format!("posted_{}_{}", op.as_str().to_lowercase(), tag), v));
                }
            }
        }
        out.extend([
            ("hrts_traversed".to_string(), self.hrts_traversed),
            ("dma_bytes".to_string(), self.dma_bytes),
            ("data_bytes".to_string(), self.data_bytes),
            ("cpu_copy_bytes".to_string(), self.cpu_copy_bytes),
            ("zeroed_bytes".to_string(), self.zeroed_bytes),
            ("pcie_round_trips".to_string(), self.pcie_round_trips),
            ("emulated_read_trips".to_string(), self.emulated_read_trips),
            ("cq_polls".to_string(), self.cq_polls),
            ("cq_empty_polls".to_string(), self.cq_empty_polls),
            ("registered_bytes".to_string(), self.registered_bytes),
            ("app_registered_bytes".to_string(), self.app_registered_bytes),
        ]);
        out
    }
}

/// Renders counters as `endpoint,metric,value` CSV.
pub fn dump_csv<'a>(rows: impl IntoIterator<Item = (EndpointId, &'a Counters)>) -> String {
    let mut s = String::from("endpoint,metric,value\n");
    for (ep, c) in rows {
        for (m, v) in c.metrics() {
            let _ = writeln!(s, "{ep},{m},{v}");
        }
    }
    s
}
