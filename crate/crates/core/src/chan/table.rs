//! Declared capabilities of every channel.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::fabric::{RequestKind, RequestSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Selector {
    SendRecvNormal,
    SendRecvShared,
    SendRecvBufferless,
    WslotDetached,
    WslotInlined,
    WslotImm,
    WslotReserve,
    RingDetached,
    RingImm,
    RingZeroing,
    RingNoZeroing,
    SringImm,
    SringZeroing,
    RslotDetached,
    RslotInlined,
    RslotNotify,
    RslotIndirect,
    RringDetached,
    RringInlined,
    RringNotify,
}

impl Selector {
    pub const ALL: [Selector; 20] = [
        Selector::SendRecvNormal,
        Selector::SendRecvShared,
        Selector::SendRecvBufferless,
        Selector::WslotDetached,
        Selector::WslotInlined,
        Selector::WslotImm,
        Selector::WslotReserve,
        Selector::RingDetached,
        Selector::RingImm,
        Selector::RingZeroing,
        Selector::RingNoZeroing,
        Selector::SringImm,
        Selector::SringZeroing,
        Selector::RslotDetached,
        Selector::RslotInlined,
        Selector::RslotNotify,
        Selector::RslotIndirect,
        Selector::RringDetached,
        Selector::RringInlined,
        Selector::RringNotify,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Selector::SendRecvNormal => "sendrecv.normal",
            Selector::SendRecvShared => "sendrecv.shared",
            Selector::SendRecvBufferless => "sendrecv.bufferless",
            Selector::WslotDetached => "wslot.detached",
            Selector::WslotInlined => "wslot.inlined",
            Selector::WslotImm => "wslot.imm",
            Selector::WslotReserve => "wslot.reserve",
            Selector::RingDetached => "ring.detached",
            Selector::RingImm => "ring.imm",
            Selector::RingZeroing => "ring.zeroing",
            Selector::RingNoZeroing => "ring.nozeroing",
            Selector::SringImm => "sring.imm",
            Selector::SringZeroing => "sring.zeroing",
            Selector::RslotDetached => "rslot.detached",
            Selector::RslotInlined => "rslot.inlined",
            Selector::RslotNotify => "rslot.notify",
            Selector::RslotIndirect => "rslot.indirect",
            Selector::RringDetached => "rring.detached",
            Selector::RringInlined => "rring.inlined",
            Selector::RringNotify => "rring.notify",
        }
    }

    pub fn family(self) -> Family {
        use Selector::*;
        match self {
            SendRecvNormal | SendRecvShared | SendRecvBufferless => Family::SendRecv,
            WslotDetached | WslotInlined | WslotImm | WslotReserve => Family::WriteSlot,
            RingDetached | RingImm | RingZeroing | RingNoZeroing => Family::Ring,
            SringImm | SringZeroing => Family::SharedRing,
            RslotDetached | RslotInlined | RslotNotify | RslotIndirect => Family::ReadSlot,
            RringDetached | RringInlined | RringNotify => Family::ReadRing,
        }
    }

    /// Channels whose single receiver object natively serves many senders.
    pub fn native_multi_sender(self) -> bool {
        matches!(self, Selector::SendRecvShared | Selector::WslotReserve | Selector::SringImm | Selector::SringZeroing)
    }

    /// Channels whose single sender object natively serves many readers.
    pub fn native_multi_reader(self) -> bool {
        self.family() == Family::ReadRing
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Selector::ALL.into_iter().find(|sel| sel.as_str() == s).ok_or_else(|| format!("unknown channel selector `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    SendRecv,
    WriteSlot,
    Ring,
    SharedRing,
    ReadSlot,
    ReadRing,
}

/// An exact count or a lower bound (`≥n`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Count {
    Exact(u32),
    AtLeast(u32),
}

impl Count {
    /// Whether a measured value satisfies the declaration. Lower bounds are
    /// expected to be reached exactly under synchronized measurement.
    pub fn matches(self, measured: f64) -> bool {
        let bound = match self {
            Count::Exact(n) | Count::AtLeast(n) => n as f64,
        };
        (measured - bound).abs() < 1e-9
    }
}

impl fmt::Display for Count {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Count::Exact(n) => write!(f, "{n}"),
            Count::AtLeast(n) => write!(f, ">={n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flag {
    Yes,
    No,
    NotApplicable,
    /// Depends on the second channel the protocol is composed with.
    Conditional,
}

impl Flag {
    pub fn from_bool(b: bool) -> Flag {
        if b {
            Flag::Yes
        } else {
            Flag::No
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flag::Yes => "yes",
            Flag::No => "no",
            Flag::NotApplicable => "n/a",
            Flag::Conditional => "yes/no",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemClass {
    O1,
    ON,
    Unclassified,
}

impl fmt::Display for MemClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemClass::O1 => "O(1)",
            MemClass::ON => "O(N)",
            MemClass::Unclassified => "unclassified",
        })
    }
}

/// Data-path request families as listed in the requirement column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transport {
    Send,
    Write,
    Read,
    WriteAtomic,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Send => "Send",
            Transport::Write => "Write",
            Transport::Read => "Read",
            Transport::WriteAtomic => "Write+Atomic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ordering {
    pub messages: bool,
    pub bytes: bool,
}

impl Ordering {
    pub const NONE: Ordering = Ordering { messages: false, bytes: false };
    pub const MESSAGES: Ordering = Ordering { messages: true, bytes: false };
    pub const BYTES: Ordering = Ordering { messages: false, bytes: true };
    pub const BOTH: Ordering = Ordering { messages: true, bytes: true };
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.messages, self.bytes) {
            (false, false) => "No",
            (true, false) => "Messages",
            (false, true) => "Bytes",
            (true, true) => "Messages+Bytes",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderingReq {
    Fixed(Ordering),
    /// Depends on the second channel (declared "No/Yes").
    Conditional,
}

impl fmt::Display for OrderingReq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderingReq::Fixed(o) => o.fmt(f),
            OrderingReq::Conditional => f.write_str("No/Yes"),
        }
    }
}

/// One row of the capability table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub selector: Selector,
    pub hrt_latency: Count,
    pub requests_send: Count,
    pub requests_recv: Count,
    pub blocking_recv: Flag,
    pub zero_copy_send: Flag,
    pub zero_copy_recv: Flag,
    pub variable_size: Flag,
    pub mem_1_to_n: MemClass,
    pub mem_n_to_1: MemClass,
    pub transport: Transport,
    pub ordering: OrderingReq,
}

impl ChannelSpec {
    pub fn family(&self) -> Family {
        self.selector.family()
    }

    /// Every verb the implementation posts, which the profile must offer.
    pub fn required_requests(&self) -> RequestSet {
        use RequestKind::*;
        use Selector::*;
        let kinds: &[RequestKind] = match self.selector {
            SendRecvNormal | SendRecvShared | SendRecvBufferless => &[Send],
            WslotDetached | WslotInlined | RingDetached | RingZeroing | RingNoZeroing => &[Write],
            WslotImm | RingImm => &[WriteImm],
            WslotReserve | RslotIndirect => &[Send, WriteImm],
            SringImm => &[FetchAdd, WriteImm],
            SringZeroing => &[FetchAdd, Write],
            RslotDetached | RslotInlined | RringDetached | RringInlined => &[Read],
            RslotNotify | RringNotify => &[Send, Read],
        };
        RequestSet::from_kinds(kinds)
    }

    /// Ordering requirement with conditional cells resolved by the
    /// composition this crate uses.
    pub fn required_ordering(&self) -> Ordering {
        match self.ordering {
            OrderingReq::Fixed(o) => o,
            OrderingReq::Conditional => Ordering::NONE,
        }
    }

    /// The row with conditional cells resolved to what this implementation
    /// offers.
    pub fn effective(&self) -> ChannelSpec {
        let mut s = *self;
        if s.blocking_recv == Flag::Conditional {
            s.blocking_recv = match s.selector {
                Selector::WslotDetached => Flag::No,
                _ => Flag::Yes,
            };
        }
        if s.ordering == OrderingReq::Conditional {
            s.ordering = OrderingReq::Fixed(Ordering::NONE);
        }
        s
    }
}

/// The declared table, one row per selector in [`Selector::ALL`] order.
pub fn declared_table() -> Vec<ChannelSpec> {
    Selector::ALL.into_iter().map(declared).collect()
}

pub fn declared(selector: Selector) -> ChannelSpec {
    use Count::{AtLeast as Ge, Exact as E};
    use Flag::{Conditional as C, No as N, NotApplicable as NA, Yes as Y};
    use MemClass::{O1, ON};
    use Selector::*;
    let none = OrderingReq::Fixed(Ordering::NONE);
    let row = |hrt, rs, rr, b, zs, zr, v, m1, mn, t, o| ChannelSpec {
        selector,
        hrt_latency: hrt,
        requests_send: rs,
        requests_recv: rr,
        blocking_recv: b,
        zero_copy_send: zs,
        zero_copy_recv: zr,
        variable_size: v,
        mem_1_to_n: m1,
        mem_n_to_1: mn,
        transport: t,
        ordering: o,
    };
    let msgs = OrderingReq::Fixed(Ordering::MESSAGES);
    let bytes = OrderingReq::Fixed(Ordering::BYTES);
    let both = OrderingReq::Fixed(Ordering::BOTH);
    use Transport::{Read as R, Send as S, Write as W, WriteAtomic as WA};
    match selector {
        SendRecvNormal => row(E(1), E(1), E(0), Y, Y, N, N, O1, ON, S, none),
        SendRecvShared => row(E(1), E(1), E(0), Y, Y, N, N, O1, O1, S, none),
        SendRecvBufferless => row(E(1), E(1), E(0), Y, NA, NA, NA, O1, O1, S, none),
        WslotDetached => row(E(1), E(2), E(0), C, Y, Y, N, O1, ON, W, msgs),
        WslotInlined => row(E(1), E(1), E(0), N, Y, Y, N, O1, ON, W, bytes),
        WslotImm => row(E(1), E(1), E(0), Y, Y, Y, N, O1, ON, W, none),
        WslotReserve => row(E(3), Ge(2), E(1), C, Y, Y, N, O1, O1, W, OrderingReq::Conditional),
        RingDetached => row(E(1), E(2), E(0), N, Y, N, Y, O1, ON, W, msgs),
        RingImm => row(E(1), E(1), E(0), Y, Y, N, Y, O1, ON, W, none),
        RingZeroing => row(E(1), E(1), E(0), N, Y, N, Y, O1, ON, W, bytes),
        RingNoZeroing => row(E(1), E(1), E(0), N, Y, N, Y, O1, ON, W, both),
        SringImm => row(E(3), Ge(2), E(0), Y, Y, N, Y, O1, O1, WA, none),
        SringZeroing => row(E(3), Ge(2), E(0), N, Y, N, Y, O1, O1, WA, bytes),
        RslotDetached => row(Ge(4), E(0), Ge(2), N, Y, Y, Y, O1, O1, R, none),
        RslotInlined => row(Ge(2), E(0), Ge(1), N, Y, Y, N, O1, O1, R, none),
        RslotNotify => row(E(3), E(1), E(1), C, Y, Y, Y, O1, O1, R, none),
        RslotIndirect => row(E(2), E(1), E(1), C, Y, Y, N, O1, O1, W, OrderingReq::Conditional),
        RringDetached => row(Ge(4), E(0), Ge(2), N, N, Y, Y, O1, O1, R, none),
        RringInlined => row(Ge(4), E(0), Ge(2), N, N, Y, Y, O1, O1, R, none),
        RringNotify => row(E(3), E(1), E(1), C, N, Y, Y, O1, O1, R, none),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selectors_round_trip() {
        for s in Selector::ALL {
            assert_eq!(s.as_str().parse::<Selector>().unwrap(), s);
        }
        assert!("ring.bogus".parse::<Selector>().is_err());
    }

    #[test]
    fn table_has_one_row_per_selector() {
        let t = declared_table();
        assert_eq!(t.len(), 20);
        for (row, sel) in t.iter().zip(Selector::ALL) {
            assert_eq!(row.selector, sel);
        }
    }

    #[test]
    fn every_row_is_constant_on_the_sender_side() {
        assert!(declared_table().iter().all(|r| r.mem_1_to_n == MemClass::O1));
    }

    #[test]
    fn conditional_cells_resolve() {
        let r = declared(Selector::WslotReserve).effective();
        assert_eq!(r.blocking_recv, Flag::Yes);
        assert_eq!(r.required_ordering(), Ordering::NONE);
        assert_eq!(declared(Selector::WslotDetached).effective().blocking_recv, Flag::No);
        assert_eq!(declared(Selector::RslotIndirect).effective().blocking_recv, Flag::Yes);
    }

    #[test]
    fn lower_bounds_match_only_their_bound() {
        assert!(Count::AtLeast(4).matches(4.0));
        assert!(!Count::AtLeast(4).matches(5.0));
        assert!(!Count::Exact(1).matches(1.5));
    }
}
