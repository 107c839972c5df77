//! Uniform uni-directional channel API and construction.
//!
//! A channel is a set of sender and receiver objects, each confined to one
//! endpoint and driven by calling `progress`. Senders accept application
//! regions; receivers hand out regions in channel memory (`receive_region`) or
//! pull payloads straight into application buffers (the option path).

mod credit;
mod opts;
mod table;

pub mod ring;
pub mod rring;
pub mod rslot;
pub mod sendrecv;
pub mod sring;
pub mod wslot;

use thiserror::Error;

use crate::fabric::{ByteOrder, CqId, EndpointId, Fabric, FabricError, MessageOrder, RegionId};
use crate::memory::{Location, Region};

pub use credit::{AckMode, FreeTracker, PrefixTracker};
pub use table::{
    declared, declared_table, ChannelSpec, Count, Family, Flag, MemClass, Ordering, OrderingReq, Selector, Transport,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChanError {
    #[error("requirement unmet: {0}")]
    RequirementUnmet(String),
    #[error("message of {len} B exceeds the channel maximum of {max} B")]
    MessageTooLarge { len: u64, max: u64 },
    #[error("this channel signals arrival through the length and needs at least one byte")]
    EmptyMessage,
    #[error("no flow-control credit")]
    NoCredit,
    #[error("unknown handle")]
    UnknownHandle,
    #[error("region was already freed or never received")]
    DoubleFree,
    #[error("option already consumed")]
    OptionConsumed,
    #[error("destination of {dst} B is smaller than the {len} B message")]
    DstTooSmall { dst: u64, len: u64 },
    #[error("operation not offered by this channel: {0}")]
    Unsupported(&'static str),
    #[error("invalid topology: {0}")]
    Topology(&'static str),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// One sender and one receiver of a freshly opened instance.
pub(crate) type Pair = (Box<dyn ChannelSender>, Box<dyn ChannelReceiver>);
/// Many senders sharing one receiver.
pub(crate) type FanIn = (Vec<Box<dyn ChannelSender>>, Box<dyn ChannelReceiver>);
/// One sender read by many receivers.
pub(crate) type FanOut = (Box<dyn ChannelSender>, Vec<Box<dyn ChannelReceiver>>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SendHandle(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RecvHandle(pub u64);

/// Where a pending message lives, without having moved it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionOption {
    pub source: (EndpointId, RegionId, u64),
    /// Message length, or the largest possible length when the channel only
    /// learns it while pulling.
    pub length: u64,
    pub token: u64,
    /// Set when the payload already sits in receiver memory that the
    /// application may use directly; release it with `free_receive_region`.
    pub in_place: Option<Region>,
}

pub trait ChannelSender {
    fn endpoint(&self) -> EndpointId;
    fn max_message_size(&self) -> u64;
    /// A channel-owned buffer the application may fill in place to send
    /// without a copy. `None` when the application uses its own regions.
    fn send_buffer(&mut self, _fab: &mut Fabric, _len: u64) -> Result<Option<Region>, ChanError> {
        Ok(None)
    }
    fn send_region(&mut self, fab: &mut Fabric, r: Region) -> Result<SendHandle, ChanError>;
    /// True once the source region may be reused.
    fn test_send_request(&mut self, fab: &mut Fabric, h: SendHandle) -> Result<bool, ChanError>;
    /// Polls completions and advances internal state. Returns whether
    /// anything changed.
    fn progress(&mut self, fab: &mut Fabric) -> Result<bool, ChanError>;
    /// Channel buffer bytes held by messages not yet released by the receiver.
    fn occupied_bytes(&self) -> u64;
}

pub trait ChannelReceiver {
    fn endpoint(&self) -> EndpointId;
    fn receive_region(&mut self, fab: &mut Fabric) -> Result<Option<Region>, ChanError>;
    fn free_receive_region(&mut self, fab: &mut Fabric, r: Region) -> Result<(), ChanError>;
    /// Whether the zero-copy option path is offered.
    fn supports_options(&self) -> bool {
        false
    }
    fn can_receive_region(&mut self, _fab: &mut Fabric) -> Result<Option<RegionOption>, ChanError> {
        Err(ChanError::Unsupported("option path"))
    }
    fn receive_region_into(
        &mut self,
        _fab: &mut Fabric,
        _o: RegionOption,
        _dst: Region,
    ) -> Result<RecvHandle, ChanError> {
        Err(ChanError::Unsupported("option path"))
    }
    /// `Some(len)` once the payload sits in the destination.
    fn test_receive_request(&mut self, _fab: &mut Fabric, _h: RecvHandle) -> Result<Option<u64>, ChanError> {
        Err(ChanError::UnknownHandle)
    }
    fn progress(&mut self, fab: &mut Fabric) -> Result<bool, ChanError>;
    /// Queues whose events are initiated by the remote side.
    fn notify_cqs(&self) -> Vec<CqId>;
    /// Queues receiving completions of this receiver's own requests.
    fn own_cqs(&self) -> Vec<CqId>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelConfig {
    pub slot_size: u64,
    /// Slots, receive buffers or advertisements per channel instance.
    pub slots: u32,
    pub ring_capacity: u64,
    /// Releases batched per acknowledgment; 0 picks a quarter of the window.
    pub ack_batch: u32,
    pub head_loc: Location,
    pub tail_loc: Location,
    pub prefetch_bytes: u64,
    /// Read ring detached: fixed record size without length prefixes.
    pub fixed_size: Option<u64>,
    /// Read ring: ticks between a publisher's payload store and its length store.
    pub write_ticks: u64,
    /// Read-side pollers: ticks to wait before re-reading an unset bell.
    pub read_backoff: u64,
    /// Read ring notify: messages per notification.
    pub notify_batch: u32,
    /// Outstanding reservations per write-slot reserve sender.
    pub reserve_window: u32,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            slot_size: 4096,
            slots: 16,
            ring_capacity: 64 * 1024,
            ack_batch: 0,
            head_loc: Location::Host,
            tail_loc: Location::Host,
            prefetch_bytes: 4,
            fixed_size: None,
            write_ticks: 0,
            read_backoff: 0,
            notify_batch: 1,
            reserve_window: 4,
        }
    }
}

impl ChannelConfig {
    pub(crate) fn batch_for(&self, window: u64) -> u64 {
        if self.ack_batch > 0 {
            self.ack_batch as u64
        } else {
            (window / 4).max(1)
        }
    }
}

/// An opened channel: sender and receiver objects plus the links between them.
pub struct Channel {
    pub spec: ChannelSpec,
    pub senders: Vec<Box<dyn ChannelSender>>,
    pub receivers: Vec<Box<dyn ChannelReceiver>>,
    /// `(sender index, receiver index)` pairs that exchange messages.
    pub links: Vec<(usize, usize)>,
}

impl Channel {
    /// Senders whose messages reach receiver `r`.
    pub fn senders_of(&self, r: usize) -> Vec<usize> {
        self.links.iter().filter(|(_, rr)| *rr == r).map(|(s, _)| *s).collect()
    }

    /// Receivers that deliver messages from sender `s`.
    pub fn receivers_of(&self, s: usize) -> Vec<usize> {
        self.links.iter().filter(|(ss, _)| *ss == s).map(|(_, r)| *r).collect()
    }
}

/// Checks that the fabric offers every verb and ordering guarantee the
/// channel depends on.
pub fn check_requirements(spec: &ChannelSpec, fab: &Fabric) -> Result<(), ChanError> {
    let profile = fab.profile();
    for kind in spec.required_requests().iter() {
        if !profile.supports(kind) {
            return Err(ChanError::RequirementUnmet(format!("{kind} unsupported by {}", profile.cli_name())));
        }
    }
    let ord = spec.required_ordering();
    if ord.messages && profile.message_order != MessageOrder::InOrder {
        return Err(ChanError::RequirementUnmet(format!("{} does not order messages", profile.cli_name())));
    }
    if ord.bytes && profile.byte_order_within_message != ByteOrder::InOrder {
        return Err(ChanError::RequirementUnmet(format!(
            "{} does not order bytes within a message",
            profile.cli_name()
        )));
    }
    Ok(())
}

/// Opens `selector` between the given endpoints.
///
/// Either side may list several endpoints (not both). Channels that natively
/// serve many peers get one shared object on the single side; all others are
/// instantiated once per peer.
pub fn open_channel(
    selector: Selector,
    fab: &mut Fabric,
    senders: &[EndpointId],
    receivers: &[EndpointId],
    cfg: &ChannelConfig,
) -> Result<Channel, ChanError> {
    let spec = declared(selector).effective();
    check_requirements(&spec, fab)?;
    if senders.is_empty() || receivers.is_empty() {
        return Err(ChanError::Topology("both sides need an endpoint"));
    }
    if senders.len() > 1 && receivers.len() > 1 {
        return Err(ChanError::Topology("many-to-many is not supported"));
    }
    let mut ch = Channel { spec, senders: Vec::new(), receivers: Vec::new(), links: Vec::new() };

    if selector.native_multi_sender() {
        if receivers.len() > 1 {
            for &r in receivers {
                let mut one = open_channel(selector, fab, senders, &[r], cfg)?;
                let (s0, r0) = (ch.senders.len(), ch.receivers.len());
                ch.links.extend(one.links.iter().map(|(s, r)| (s + s0, r + r0)));
                ch.senders.append(&mut one.senders);
                ch.receivers.append(&mut one.receivers);
            }
            return Ok(ch);
        }
        let (s, r) = match selector {
            Selector::SendRecvShared => sendrecv::open_shared(fab, senders, receivers[0], cfg)?,
            Selector::WslotReserve => wslot::open_reserve(fab, senders, receivers[0], cfg)?,
            Selector::SringImm => sring::open(fab, senders, receivers[0], cfg, sring::Variant::Imm)?,
            Selector::SringZeroing => sring::open(fab, senders, receivers[0], cfg, sring::Variant::Zeroing)?,
            _ => unreachable!(),
        };
        ch.links = (0..s.len()).map(|i| (i, 0)).collect();
        ch.senders = s;
        ch.receivers = vec![r];
        return Ok(ch);
    }

    if selector.native_multi_reader() {
        if senders.len() > 1 {
            for &s in senders {
                let mut one = open_channel(selector, fab, &[s], receivers, cfg)?;
                let (s0, r0) = (ch.senders.len(), ch.receivers.len());
                ch.links.extend(one.links.iter().map(|(s, r)| (s + s0, r + r0)));
                ch.senders.append(&mut one.senders);
                ch.receivers.append(&mut one.receivers);
            }
            return Ok(ch);
        }
        let (s, r) = rring::open(fab, senders[0], receivers, cfg, selector)?;
        ch.links = (0..r.len()).map(|i| (0, i)).collect();
        ch.senders = vec![s];
        ch.receivers = r;
        return Ok(ch);
    }

    let pairs: Vec<(EndpointId, EndpointId)> = if senders.len() > 1 {
        senders.iter().map(|&s| (s, receivers[0])).collect()
    } else {
        receivers.iter().map(|&r| (senders[0], r)).collect()
    };
    for (i, (s, r)) in pairs.into_iter().enumerate() {
        let (tx, rx) = open_pair(selector, fab, s, r, cfg)?;
        ch.senders.push(tx);
        ch.receivers.push(rx);
        ch.links.push((i, i));
    }
    Ok(ch)
}

fn open_pair(
    sel: Selector,
    fab: &mut Fabric,
    s: EndpointId,
    r: EndpointId,
    cfg: &ChannelConfig,
) -> Result<Pair, ChanError> {
    use Selector::*;
    match sel {
        SendRecvNormal => sendrecv::open_normal(fab, s, r, cfg),
        SendRecvBufferless => sendrecv::open_bufferless(fab, s, r, cfg),
        WslotDetached => wslot::open(fab, s, r, cfg, wslot::Bell::Detached),
        WslotInlined => wslot::open(fab, s, r, cfg, wslot::Bell::Inlined),
        WslotImm => wslot::open(fab, s, r, cfg, wslot::Bell::Imm),
        RingDetached => ring::open(fab, s, r, cfg, ring::Variant::Detached),
        RingImm => ring::open(fab, s, r, cfg, ring::Variant::Imm),
        RingZeroing => ring::open(fab, s, r, cfg, ring::Variant::Zeroing),
        RingNoZeroing => ring::open(fab, s, r, cfg, ring::Variant::NoZeroing),
        RslotDetached => rslot::open(fab, s, r, cfg, rslot::Variant::Detached),
        RslotInlined => rslot::open(fab, s, r, cfg, rslot::Variant::Inlined),
        RslotNotify => rslot::open(fab, s, r, cfg, rslot::Variant::Notify),
        RslotIndirect => rslot::open(fab, s, r, cfg, rslot::Variant::Indirect),
        _ => unreachable!("multi-peer selectors are opened natively"),
    }
}

pub(crate) fn too_large(len: u64, max: u64) -> Result<(), ChanError> {
    if len > max {
        Err(ChanError::MessageTooLarge { len, max })
    } else {
        Ok(())
    }
}

pub(crate) fn status_ok(ev: &crate::fabric::CompletionEvent) -> Result<(), ChanError> {
    if ev.is_ok() {
        Ok(())
    } else {
        Err(ChanError::Transport(format!("{} {} wr={}", ev.opcode, ev.status.as_str(), ev.wr_id)))
    }
}
