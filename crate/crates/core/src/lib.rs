//! Uni-directional RDMA message channels over a deterministic simulated fabric.
//!
//! The crate is layered bottom-up: [`fabric`] simulates verbs, completion
//! queues and transport profiles; [`memory`] provides registered regions and
//! instrumented copies; [`chan`] holds the twenty channel protocols behind one
//! sender/receiver API; [`datapath`] composes channels into request/response
//! pairs; [`metrics`] measures the properties of every channel and checks them
//! against the declared table.
//!
//! ```
//! use rdmachan::chan::{open_channel, ChannelConfig, Selector};
//! use rdmachan::{Access, Fabric, FabricConfig, Region, TransportProfile};
//!
//! # fn main() -> Result<(), Box<dyn std::error::Error>> {
//! let mut fab = Fabric::new(TransportProfile::ib_roce(), 0, FabricConfig::default());
//! let (a, b) = (fab.add_endpoint(), fab.add_endpoint());
//! let mut ch = open_channel(Selector::RingZeroing, &mut fab, &[a], &[b], &ChannelConfig::default())?;
//! let buf = fab.register_app(a, 5, Access::LOCAL_WRITE)?;
//! fab.store(buf, 0, b"hello")?;
//! ch.senders[0].send_region(&mut fab, Region::app(buf, 0, 5))?;
//! fab.run_until_idle();
//! let msg = ch.receivers[0].receive_region(&mut fab)?.expect("delivered");
//! assert_eq!(fab.load(msg.region, msg.offset, msg.len)?, b"hello");
//! ch.receivers[0].free_receive_region(&mut fab, msg)?;
//! # Ok(())
//! # }
//! ```

pub mod chan;
pub mod datapath;
pub mod fabric;
pub mod memory;
pub mod metrics;
pub mod workload;

pub use fabric::{
    CompletionEvent, EndpointId, Fabric, FabricConfig, FabricError, Opcode, ReorderPolicy, TransportProfile,
};
pub use memory::{Access, Location, Region};
