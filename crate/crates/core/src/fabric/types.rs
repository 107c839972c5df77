use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(EndpointId, "");
id_type!(RegionId, "mr");
id_type!(QpId, "qp");
id_type!(CqId, "cq");
id_type!(SrqId, "srq");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Opcode {
    Send,
    Recv,
    Write,
    WriteImm,
    Read,
    FetchAdd,
    CmpSwap,
}

impl Opcode {
    pub const ALL: [Opcode; 7] =
        [Opcode::Send, Opcode::Recv, Opcode::Write, Opcode::WriteImm, Opcode::Read, Opcode::FetchAdd, Opcode::CmpSwap];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_atomic(self) -> bool {
        matches!(self, Opcode::FetchAdd | Opcode::CmpSwap)
    }

    pub fn needs_remote(self) -> bool {
        !matches!(self, Opcode::Send | Opcode::Recv)
    }

    /// Requests that travel on the network (everything except RECV).
    pub fn is_network(self) -> bool {
        self != Opcode::Recv
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Opcode::Send => "SEND",
            Opcode::Recv => "RECV",
            Opcode::Write => "WRITE",
            Opcode::WriteImm => "WRITE_IMM",
            Opcode::Read => "READ",
            Opcode::FetchAdd => "FETCH_ADD",
            Opcode::CmpSwap => "CMP_SWAP",
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Accounting class of a request.
///
/// `Data` requests move or signal the channel's payload. `Aux` requests belong
/// to a second channel the protocol depends on (reservations, notifications,
/// advertisements). `Control` requests carry flow-control acknowledgments on
/// the reverse path; they are excluded from per-channel request counts and
/// from fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Purpose {
    #[default]
    Data,
    Aux,
    Control,
}

impl Purpose {
    pub const ALL: [Purpose; 3] = [Purpose::Data, Purpose::Aux, Purpose::Control];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One scatter/gather element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sge {
    pub region: RegionId,
    pub offset: u64,
    pub len: u32,
}

impl Sge {
    pub fn new(region: RegionId, offset: u64, len: u32) -> Self {
        Sge { region, offset, len }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteTarget {
    pub endpoint: EndpointId,
    pub region: RegionId,
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AtomicArgs {
    FetchAdd { add: u64 },
    CmpSwap { compare: u64, swap: u64 },
}

pub const MAX_SGE: usize = 16;
pub const MAX_MESSAGE: u64 = 1 << 31;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkRequest {
    pub wr_id: u64,
    pub opcode: Opcode,
    pub gather: Vec<Sge>,
    pub remote: Option<RemoteTarget>,
    pub imm: Option<u32>,
    pub atomic: Option<AtomicArgs>,
    pub signaled: bool,
    pub purpose: Purpose,
}

impl WorkRequest {
    fn base(wr_id: u64, opcode: Opcode) -> Self {
        WorkRequest {
            wr_id,
            opcode,
            gather: Vec::new(),
            remote: None,
            imm: None,
            atomic: None,
            signaled: true,
            purpose: Purpose::Data,
        }
    }

    pub fn send(wr_id: u64, gather: Vec<Sge>) -> Self {
        WorkRequest { gather, ..Self::base(wr_id, Opcode::Send) }
    }

    pub fn send_imm(wr_id: u64, gather: Vec<Sge>, imm: u32) -> Self {
        WorkRequest { gather, imm: Some(imm), ..Self::base(wr_id, Opcode::Send) }
    }

    pub fn recv(wr_id: u64, scatter: Vec<Sge>) -> Self {
        WorkRequest { gather: scatter, ..Self::base(wr_id, Opcode::Recv) }
    }

    pub fn write(wr_id: u64, gather: Vec<Sge>, remote: RemoteTarget) -> Self {
        WorkRequest { gather, remote: Some(remote), ..Self::base(wr_id, Opcode::Write) }
    }

    pub fn write_imm(wr_id: u64, gather: Vec<Sge>, remote: RemoteTarget, imm: u32) -> Self {
        WorkRequest { gather, remote: Some(remote), imm: Some(imm), ..Self::base(wr_id, Opcode::WriteImm) }
    }

    /// READ `remote` into the local scatter list.
    pub fn read(wr_id: u64, scatter: Vec<Sge>, remote: RemoteTarget) -> Self {
        WorkRequest { gather: scatter, remote: Some(remote), ..Self::base(wr_id, Opcode::Read) }
    }

    /// FETCH_ADD on the 8-byte word at `remote`; the old value lands in `result`.
    pub fn fetch_add(wr_id: u64, result: Sge, remote: RemoteTarget, add: u64) -> Self {
        WorkRequest {
            gather: vec![result],
            remote: Some(remote),
            atomic: Some(AtomicArgs::FetchAdd { add }),
            ..Self::base(wr_id, Opcode::FetchAdd)
        }
    }

    pub fn cmp_swap(wr_id: u64, result: Sge, remote: RemoteTarget, compare: u64, swap: u64) -> Self {
        WorkRequest {
            gather: vec![result],
            remote: Some(remote),
            atomic: Some(AtomicArgs::CmpSwap { compare, swap }),
            ..Self::base(wr_id, Opcode::CmpSwap)
        }
    }

    pub fn unsignaled(mut self) -> Self {
        self.signaled = false;
        self
    }

    pub fn with_purpose(mut self, purpose: Purpose) -> Self {
        self.purpose = purpose;
        self
    }

    pub fn total_len(&self) -> u64 {
        self.gather.iter().map(|s| s.len as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Ok,
    RemoteNoReceive,
    Unsupported,
    AccessError,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "OK",
            Status::RemoteNoReceive => "REMOTE_NO_RECEIVE",
            Status::Unsupported => "UNSUPPORTED",
            Status::AccessError => "ACCESS_ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionEvent {
    pub wr_id: u64,
    pub qp: QpId,
    pub status: Status,
    pub opcode: Opcode,
    pub byte_len: u32,
    pub imm: Option<u32>,
    pub atomic_old_value: Option<u64>,
    pub tick: u64,
}

impl CompletionEvent {
    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }
}
