//! Registered memory, circular views over it, and instrumented copies.
//!
//! A region flagged circular behaves as if the pages following its end were
//! mapped back onto its start: any window of at most `len` bytes is addressable
//! as one contiguous range, by local code and by remote requests alike.

use std::fmt::{self, Write as _};
use std::ops::BitOr;

use serde::{Deserialize, Serialize};

use crate::fabric::{EndpointId, Fabric, FabricError, Opcode, RegionId};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Access(u8);

impl Access {
    pub const NONE: Access = Access(0);
    pub const LOCAL_WRITE: Access = Access(1);
    pub const REMOTE_WRITE: Access = Access(2);
    pub const REMOTE_READ: Access = Access(4);
    pub const REMOTE_ATOMIC: Access = Access(8);
    pub const ALL: Access = Access(15);

    pub const FLAGS: [Access; 4] =
        [Access::LOCAL_WRITE, Access::REMOTE_WRITE, Access::REMOTE_READ, Access::REMOTE_ATOMIC];

    pub fn contains(self, other: Access) -> bool {
        self.0 & other.0 == other.0
    }

    /// The flag a region must carry to be the target of `op`.
    ///
    /// RECV and READ name the *local* buffer that receives bytes; every other
    /// opcode names a remote target.
    pub fn required_for(op: Opcode) -> Option<Access> {
        match op {
            Opcode::Recv => Some(Access::LOCAL_WRITE),
            Opcode::Write | Opcode::WriteImm => Some(Access::REMOTE_WRITE),
            Opcode::Read => Some(Access::REMOTE_READ),
            Opcode::FetchAdd | Opcode::CmpSwap => Some(Access::REMOTE_ATOMIC),
            Opcode::Send => None,
        }
    }
}

impl BitOr for Access {
    type Output = Access;
    fn bitor(self, rhs: Access) -> Access {
        Access(self.0 | rhs.0)
    }
}

impl fmt::Debug for Access {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = ["LOCAL_WRITE", "REMOTE_WRITE", "REMOTE_READ", "REMOTE_ATOMIC"];
        let set: Vec<_> = Access::FLAGS.iter().zip(names).filter(|(a, _)| self.contains(**a)).map(|(_, n)| n).collect();
        write!(f, "{{{}}}", set.join("|"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Location {
    Host,
    Device,
}

#[derive(Debug, Clone)]
pub struct MemoryRegion {
    pub id: RegionId,
    pub owner: EndpointId,
    pub access: Access,
    pub location: Location,
    pub circular: bool,
    /// Application buffer (message source or destination) rather than channel state.
    pub app: bool,
    pub(crate) data: Vec<u8>,
    pub(crate) live: bool,
}

impl MemoryRegion {
    pub fn len(&self) -> u64 {
        self.data.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Splits `[offset, offset+len)` into at most two physical ranges.
    pub(crate) fn ranges(&self, offset: u64, len: u64) -> Result<[(usize, usize); 2], FabricError> {
        let size = self.data.len() as u64;
        if self.circular {
            if len > size {
                return Err(FabricError::OutOfBounds { region: self.id, offset, len });
            }
            let start = offset % size;
            let first = len.min(size - start);
            Ok([(start as usize, first as usize), (0, (len - first) as usize)])
        } else {
            match offset.checked_add(len) {
                Some(end) if end <= size => Ok([(offset as usize, len as usize), (0, 0)]),
                _ => Err(FabricError::OutOfBounds { region: self.id, offset, len }),
            }
        }
    }

    pub(crate) fn read_into(&self, offset: u64, out: &mut [u8]) -> Result<(), FabricError> {
        let [(a, al), (b, bl)] = self.ranges(offset, out.len() as u64)?;
        out[..al].copy_from_slice(&self.data[a..a + al]);
        out[al..].copy_from_slice(&self.data[b..b + bl]);
        Ok(())
    }

    pub(crate) fn write_from(&mut self, offset: u64, src: &[u8]) -> Result<(), FabricError> {
        let [(a, al), (b, bl)] = self.ranges(offset, src.len() as u64)?;
        self.data[a..a + al].copy_from_slice(&src[..al]);
        self.data[b..b + bl].copy_from_slice(&src[al..]);
        Ok(())
    }

    pub(crate) fn fill(&mut self, offset: u64, len: u64, byte: u8) -> Result<(), FabricError> {
        let [(a, al), (b, bl)] = self.ranges(offset, len)?;
        self.data[a..a + al].fill(byte);
        self.data[b..b + bl].fill(byte);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    App,
    ChannelPool,
}

/// An application-visible message buffer: a window of a registered region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub region: RegionId,
    pub offset: u64,
    pub len: u64,
    pub provenance: Provenance,
}

impl Region {
    pub fn app(region: RegionId, offset: u64, len: u64) -> Self {
        Region { region, offset, len, provenance: Provenance::App }
    }

    pub fn pool(region: RegionId, offset: u64, len: u64) -> Self {
        Region { region, offset, len, provenance: Provenance::ChannelPool }
    }

    pub fn sge(&self) -> crate::fabric::Sge {
        crate::fabric::Sge::new(self.region, self.offset, self.len as u32)
    }

    pub fn sub(&self, offset: u64, len: u64) -> Region {
        Region { offset: self.offset + offset, len, ..*self }
    }
}

/// An ordered gather list of at most 16 elements.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GatherList(Vec<crate::fabric::Sge>);

impl GatherList {
    pub fn new() -> Self {
        GatherList(Vec::new())
    }

    pub fn push(&mut self, sge: crate::fabric::Sge) -> Result<(), FabricError> {
        if self.0.len() == crate::fabric::MAX_SGE {
            return Err(FabricError::TooManySges(self.0.len() + 1));
        }
        if sge.len > 0 {
            self.0.push(sge);
        }
        Ok(())
    }

    pub fn total_len(&self) -> u64 {
        self.0.iter().map(|s| s.len as u64).sum()
    }

    pub fn into_vec(self) -> Vec<crate::fabric::Sge> {
        self.0
    }

    pub fn as_slice(&self) -> &[crate::fabric::Sge] {
        &self.0
    }
}

/// Pads to the 4-byte word used for every length and bell field.
pub fn align4(n: u64) -> u64 {
    (n + 3) & !3
}

/// A logically contiguous ring over a whole region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CircularBuffer {
    pub region: RegionId,
    pub capacity: u64,
}

impl CircularBuffer {
    /// Reduces any (possibly negative-going) logical offset into the ring.
    pub fn wrap(&self, offset: i128) -> u64 {
        offset.rem_euclid(self.capacity as i128) as u64
    }

    pub fn write_window(&self, fab: &mut Fabric, offset: u64, bytes: &[u8]) -> Result<(), FabricError> {
        fab.store(self.region, offset % self.capacity, bytes)
    }

    pub fn read_window(&self, fab: &Fabric, offset: u64, len: u64) -> Result<Vec<u8>, FabricError> {
        fab.load(self.region, offset % self.capacity, len)
    }

    pub fn window(&self, offset: u64, len: u64) -> Region {
        Region::pool(self.region, offset % self.capacity, len)
    }
}

/// Turns a registered region into a circular buffer. The capacity must equal
/// the region length and be a power of two.
pub fn ring_view(fab: &mut Fabric, region: RegionId, capacity: u64) -> Result<CircularBuffer, FabricError> {
    if !capacity.is_power_of_two() || capacity < 8 {
        return Err(FabricError::BadRingCapacity(capacity));
    }
    let mr = fab.region_mut(region)?;
    if mr.len() != capacity {
        return Err(FabricError::BadRingCapacity(capacity));
    }
    mr.circular = true;
    Ok(CircularBuffer { region, capacity })
}

/// CPU copy between two regions of the same endpoint. Every channel-level copy
/// goes through here so `cpu_copy_bytes` is complete.
pub fn copy_instrumented(fab: &mut Fabric, src: &Region, dst: &Region) -> Result<(), FabricError> {
    if src.len != dst.len {
        return Err(FabricError::LengthMismatch { src: src.len, dst: dst.len });
    }
    if src.region == dst.region {
        let size = fab.region(src.region)?.len();
        if windows_overlap(src.offset, dst.offset, src.len, size) {
            return Err(FabricError::OverlappingCopy);
        }
    }
    let bytes = fab.load(src.region, src.offset, src.len)?;
    fab.store(dst.region, dst.offset, &bytes)?;
    let owner = fab.region(dst.region)?.owner;
    fab.counters_mut(owner).cpu_copy_bytes += src.len;
    Ok(())
}

fn windows_overlap(a: u64, b: u64, len: u64, size: u64) -> bool {
    if len == 0 {
        return false;
    }
    // Offsets may sit on a circular region; compare modulo its size.
    let (a, b) = (a % size, b % size);
    let d = b.abs_diff(a);
    d < len || size - d < len
}

/// `offset: 16 bytes hex` lines for golden-layout comparisons.
pub fn hexdump(bytes: &[u8], base: u64) -> String {
    let mut out = String::new();
    for (i, chunk) in bytes.chunks(16).enumerate() {
        let _ = write!(out, "{:08x}:", base + 16 * i as u64);
        for b in chunk {
            let _ = write!(out, " {b:02x}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{ClockParams, FabricConfig, TransportProfile};

    fn fab() -> (Fabric, EndpointId) {
        let mut f = Fabric::new(TransportProfile::ib_roce(), 1, FabricConfig::default());
        let ep = f.add_endpoint();
        (f, ep)
    }

    #[test]
    fn register_is_zeroed_and_tracked() {
        let (mut f, ep) = fab();
        let r = f.register(ep, 4096, Access::REMOTE_WRITE, Location::Host).unwrap();
        assert!(f.region(r).unwrap().bytes().iter().all(|b| *b == 0));
        assert_eq!(f.counters(ep).registered_bytes, 4096);
    }

    #[test]
    fn device_cap_enforced() {
        let mut f = Fabric::new(
            TransportProfile::ib_roce(),
            1,
            FabricConfig { device_cap: 1 << 18, clock: ClockParams::default(), ..Default::default() },
        );
        let ep = f.add_endpoint();
        assert!(f.register(ep, 64, Access::REMOTE_ATOMIC, Location::Device).is_ok());
        assert!(matches!(
            f.register(ep, 1 << 19, Access::REMOTE_ATOMIC, Location::Device),
            Err(FabricError::DeviceCapExceeded { .. })
        ));
    }

    #[test]
    fn wrap_write_lands_on_both_ends() {
        let (mut f, ep) = fab();
        let r = f.register(ep, 64, Access::ALL, Location::Host).unwrap();
        let ring = ring_view(&mut f, r, 64).unwrap();
        let data: Vec<u8> = (1..=16).collect();
        ring.write_window(&mut f, 64 - 8, &data).unwrap();
        let raw = f.region(r).unwrap().bytes();
        assert_eq!(&raw[56..64], &data[..8]);
        assert_eq!(&raw[0..8], &data[8..]);
    }

    #[test]
    fn full_window_is_rotation() {
        let (mut f, ep) = fab();
        let r = f.register(ep, 32, Access::ALL, Location::Host).unwrap();
        let ring = ring_view(&mut f, r, 32).unwrap();
        let data: Vec<u8> = (0..32).collect();
        ring.write_window(&mut f, 0, &data).unwrap();
        let got = ring.read_window(&f, 5, 32).unwrap();
        let want: Vec<u8> = (0..32).map(|i| ((i + 5) % 32) as u8).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn non_power_of_two_ring_rejected() {
        let (mut f, ep) = fab();
        let r = f.register(ep, 48, Access::ALL, Location::Host).unwrap();
        assert!(matches!(ring_view(&mut f, r, 48), Err(FabricError::BadRingCapacity(48))));
    }

    #[test]
    fn copy_counts_bytes_and_rejects_overlap() {
        let (mut f, ep) = fab();
        let r = f.register(ep, 256, Access::LOCAL_WRITE, Location::Host).unwrap();
        copy_instrumented(&mut f, &Region::app(r, 0, 64), &Region::app(r, 64, 64)).unwrap();
        assert_eq!(f.counters(ep).cpu_copy_bytes, 64);
        assert!(matches!(
            copy_instrumented(&mut f, &Region::app(r, 0, 64), &Region::app(r, 32, 64)),
            Err(FabricError::OverlappingCopy)
        ));
        assert!(copy_instrumented(&mut f, &Region::app(r, 0, 8), &Region::app(r, 64, 16)).is_err());
    }

    #[test]
    fn gather_list_caps_at_sixteen() {
        let mut g = GatherList::new();
        for i in 0..16 {
            g.push(crate::fabric::Sge::new(RegionId(0), i, 1)).unwrap();
        }
        assert!(g.push(crate::fabric::Sge::new(RegionId(0), 0, 1)).is_err());
        assert_eq!(g.total_len(), 16);
    }

    #[test]
    fn hexdump_format() {
        let s = hexdump(&[0xde, 0xad, 0xbe, 0xef], 0x10);
        assert_eq!(s, "00000010: de ad be ef\n");
    }
}
