//! Transport profiles: which verbs a fabric offers and what ordering it keeps.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::types::Opcode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProfileName {
    IbRoce,
    Efa,
    OneRma,
    Custom,
}

/// Network request kinds a transport may implement. `Recv` is always local
/// and is therefore not part of this set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RequestKind {
    Send,
    Write,
    WriteImm,
    Read,
    FetchAdd,
    CmpSwap,
}

impl RequestKind {
    pub const ALL: [RequestKind; 6] = [
        RequestKind::Send,
        RequestKind::Write,
        RequestKind::WriteImm,
        RequestKind::Read,
        RequestKind::FetchAdd,
        RequestKind::CmpSwap,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn of(op: Opcode) -> Option<RequestKind> {
        match op {
            Opcode::Send => Some(RequestKind::Send),
            Opcode::Write => Some(RequestKind::Write),
            Opcode::WriteImm => Some(RequestKind::WriteImm),
            Opcode::Read => Some(RequestKind::Read),
            Opcode::FetchAdd => Some(RequestKind::FetchAdd),
            Opcode::CmpSwap => Some(RequestKind::CmpSwap),
            Opcode::Recv => None,
        }
    }
}

impl fmt::Display for RequestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RequestKind::Send => "SEND",
            RequestKind::Write => "WRITE",
            RequestKind::WriteImm => "WRITE_IMM",
            RequestKind::Read => "READ",
            RequestKind::FetchAdd => "FETCH_ADD",
            RequestKind::CmpSwap => "CMP_SWAP",
        };
        f.write_str(s)
    }
}

/// Small bitset over [`RequestKind`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct RequestSet(u8);

impl RequestSet {
    pub const fn empty() -> Self {
        RequestSet(0)
    }

    pub fn all() -> Self {
        Self::from_kinds(&RequestKind::ALL)
    }

    pub fn from_kinds(kinds: &[RequestKind]) -> Self {
        kinds.iter().fold(Self::empty(), |s, k| s.with(*k))
    }

    pub fn with(self, k: RequestKind) -> Self {
        RequestSet(self.0 | k.bit())
    }

    pub fn without(self, k: RequestKind) -> Self {
        RequestSet(self.0 & !k.bit())
    }

    pub fn contains(self, k: RequestKind) -> bool {
        self.0 & k.bit() != 0
    }

    pub fn is_subset(self, other: RequestSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = RequestKind> {
        RequestKind::ALL.into_iter().filter(move |k| self.contains(*k))
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Debug for RequestSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageOrder {
    InOrder,
    OutOfOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ByteOrder {
    InOrder,
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportProfile {
    pub name: ProfileName,
    pub supported_requests: RequestSet,
    pub message_order: MessageOrder,
    pub byte_order_within_message: ByteOrder,
    pub multi_packet_messages: bool,
    pub write_emulated_as_read: bool,
}

impl TransportProfile {
    /// InfiniBand and RoCE: every verb, in-order delivery, multi-packet messages.
    pub fn ib_roce() -> Self {
        TransportProfile {
            name: ProfileName::IbRoce,
            supported_requests: RequestSet::all(),
            message_order: MessageOrder::InOrder,
            byte_order_within_message: ByteOrder::InOrder,
            multi_packet_messages: true,
            write_emulated_as_read: false,
        }
    }

    /// EFA: SEND and READ only, adaptive routing reorders messages.
    pub fn efa() -> Self {
        TransportProfile {
            name: ProfileName::Efa,
            supported_requests: RequestSet::from_kinds(&[RequestKind::Send, RequestKind::Read]),
            message_order: MessageOrder::OutOfOrder,
            byte_order_within_message: ByteOrder::Relaxed,
            multi_packet_messages: false,
            write_emulated_as_read: false,
        }
    }

    /// 1RMA: READ natively, WRITE emulated by a target-issued READ.
    pub fn one_rma() -> Self {
        TransportProfile {
            name: ProfileName::OneRma,
            supported_requests: RequestSet::from_kinds(&[RequestKind::Read, RequestKind::Write]),
            message_order: MessageOrder::OutOfOrder,
            byte_order_within_message: ByteOrder::Relaxed,
            multi_packet_messages: false,
            write_emulated_as_read: true,
        }
    }

    pub fn supports(&self, k: RequestKind) -> bool {
        self.supported_requests.contains(k)
    }

    /// Parses the CLI spelling: `ib`, `efa`, `1rma`.
    pub fn from_cli(s: &str) -> Option<Self> {
        match s {
            "ib" | "roce" | "ib_roce" => Some(Self::ib_roce()),
            "efa" => Some(Self::efa()),
            "1rma" | "one_rma" => Some(Self::one_rma()),
            _ => None,
        }
    }

    pub fn cli_name(&self) -> &'static str {
        match self.name {
            ProfileName::IbRoce => "ib",
            ProfileName::Efa => "efa",
            ProfileName::OneRma => "1rma",
            ProfileName::Custom => "custom",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        let ib = TransportProfile::ib_roce();
        assert!(RequestKind::ALL.iter().all(|k| ib.supports(*k)));
        assert_eq!(ib.message_order, MessageOrder::InOrder);
        assert!(ib.multi_packet_messages);

        let efa = TransportProfile::efa();
        let kinds: Vec<_> = efa.supported_requests.iter().collect();
        assert_eq!(kinds, vec![RequestKind::Send, RequestKind::Read]);
        assert_eq!(efa.message_order, MessageOrder::OutOfOrder);
        assert!(!efa.multi_packet_messages);

        let rma = TransportProfile::one_rma();
        let kinds: Vec<_> = rma.supported_requests.iter().collect();
        assert_eq!(kinds, vec![RequestKind::Write, RequestKind::Read]);
        assert!(rma.write_emulated_as_read);
        assert!(!rma.multi_packet_messages);
    }

    #[test]
    fn request_set_ops() {
        let s = RequestSet::from_kinds(&[RequestKind::Write, RequestKind::FetchAdd]);
        assert!(s.is_subset(RequestSet::all()));
        assert!(!RequestSet::all().is_subset(s));
        assert!(!s.without(RequestKind::Write).contains(RequestKind::Write));
        assert_eq!(format!("{s:?}"), "{Write, FetchAdd}");
    }
}
