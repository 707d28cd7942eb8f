//! Multi-channel point-to-point messaging, ring allreduce and halo exchange
//! benchmarks over huge-page communication buffers, plus an analytical
//! model of page-pinning overhead.

pub mod alloc;
pub mod bench;
pub mod collectives;
pub mod halo;
pub mod partition;
pub mod perfmodel;
pub mod transport;

pub use alloc::{AllocError, Allocator, BufferHandle, HighWaterCache, RoundingMode, SlotCache};
pub use collectives::{CollectiveError, RingAllreduce, RingStats};
pub use halo::{CartComm4D, Direction, ExchangeMode, HaloError, HaloPlan};
pub use partition::{get_work, partition, WorkSlice};
pub use perfmodel::{CostParams, PageLayout, PinOverlap};
pub use transport::{Backend, Channel, Endpoint, TransportConfig, TransportError};
