//! Analytical cost model for pinned zero-copy transfers.
//!
//! A transfer of `len` bytes pays a fixed per-message latency, the wire time
//! `len / wire_bw`, and a pin cost for every translation region it touches
//! that is not resident in the driver's translation cache. Regions are
//! `page_bytes * coalesce` bytes, aligned to their own size. The cache is
//! LRU over `(buffer_id, region_index)` keys.
//!
//! Huge pages shrink the region count of a transfer by up to 512x, which
//! is what keeps large messages out of the pin-dominated regime.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::alloc::{SMALL_PAGE_BYTES, TWO_MB};

/// Translation cache capacity (regions) used unless overridden. Fitted so
/// that four 1,327,104-byte buffers of fragmented 4 KiB pages (1296
/// regions) stay resident while four 3,145,728-byte buffers (3072 regions)
/// thrash. Not a measured hardware value.
pub const DEFAULT_CACHE_REGIONS: usize = 1360;
/// Buffers cycled through the cache per sweep iteration (fitted, see above).
pub const DEFAULT_SWEEP_BUFFERS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid page layout: {0}")]
    InvalidLayout(String),
    #[error("invalid cost parameters: {0}")]
    InvalidParams(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
}

/// Page size plus how many physically contiguous pages form one
/// translation region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PageLayout {
    page_bytes: usize,
    coalesce: usize,
}

impl PageLayout {
    pub fn new(page_bytes: usize, coalesce: usize) -> Result<Self, ModelError> {
        if page_bytes != SMALL_PAGE_BYTES && page_bytes != TWO_MB {
            return Err(ModelError::InvalidLayout(format!(
                "page size {page_bytes} is neither 4096 nor 2097152"
            )));
        }
        if !coalesce.is_power_of_two() || coalesce > 512 {
            return Err(ModelError::InvalidLayout(format!(
                "coalesce {coalesce} is not a power of two in 1..=512"
            )));
        }
        if page_bytes * coalesce > TWO_MB {
            return Err(ModelError::InvalidLayout(format!(
                "region of {} bytes exceeds 2 MiB",
                page_bytes * coalesce
            )));
        }
        Ok(Self {
            page_bytes,
            coalesce,
        })
    }

    /// 4 KiB pages with no physical contiguity: one region per page.
    pub fn fragmented() -> Self {
        Self {
            page_bytes: SMALL_PAGE_BYTES,
            coalesce: 1,
        }
    }

    pub fn huge() -> Self {
        Self {
            page_bytes: TWO_MB,
            coalesce: 1,
        }
    }

    pub fn page_bytes(&self) -> usize {
        self.page_bytes
    }

    pub fn coalesce(&self) -> usize {
        self.coalesce
    }

    pub fn region_bytes(&self) -> usize {
        self.page_bytes * self.coalesce
    }

    pub fn label(&self) -> String {
        match (self.page_bytes, self.coalesce) {
            (TWO_MB, _) => "2MiB".to_string(),
            (_, 1) => "4KiB-fragmented".to_string(),
            (_, c) => format!("4KiB-x{c}"),
        }
    }
}

/// How pinning work composes with time on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PinOverlap {
    /// Pin every missing region, then transmit: `wire + pins`.
    Serialized,
    /// Pinning of later regions overlaps transmission of earlier ones, so
    /// the slower stage bounds the transfer: `max(wire, pins)`.
    #[default]
    Pipelined,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    /// Bytes per second, one direction.
    pub wire_bw: f64,
    /// Seconds per region pinned.
    pub pin_cost: f64,
    /// Seconds per message.
    pub msg_latency: f64,
    pub overlap: PinOverlap,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            wire_bw: 12.5e9,
            pin_cost: 2.0e-6,
            msg_latency: 1.0e-6,
            overlap: PinOverlap::Pipelined,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.wire_bw.is_finite() && self.wire_bw > 0.0) {
            return Err(ModelError::InvalidParams(format!(
                "wire bandwidth {} must be positive",
                self.wire_bw
            )));
        }
        for (name, v) in [("pin cost", self.pin_cost), ("latency", self.msg_latency)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ModelError::InvalidParams(format!(
                    "{name} {v} must be non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Time for a transfer of `len` bytes that misses `misses` regions.
    pub fn cost(&self, len: usize, misses: u64) -> f64 {
        let wire = len as f64 / self.wire_bw;
        let pin = misses as f64 * self.pin_cost;
        let body = match self.overlap {
            PinOverlap::Serialized => wire + pin,
            PinOverlap::Pipelined => wire.max(pin),
        };
        self.msg_latency + body
    }
}

pub type RegionKey = (u64, u64);

/// LRU set of resident translation regions.
#[derive(Debug, Clone, Default)]
pub struct TidCache {
    capacity: usize,
    tick: u64,
    stamps: HashMap<RegionKey, u64>,
    order: BTreeMap<u64, RegionKey>,
}

impl TidCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn contains(&self, key: RegionKey) -> bool {
        self.stamps.contains_key(&key)
    }

    /// Mark `key` most recently used. Returns whether it was resident.
    pub fn touch(&mut self, key: RegionKey) -> bool {
        self.tick += 1;
        let tick = self.tick;
        if let Some(old) = self.stamps.insert(key, tick) {
            self.order.remove(&old);
            self.order.insert(tick, key);
            return true;
        }
        if self.capacity == 0 {
            self.stamps.remove(&key);
            return false;
        }
        self.order.insert(tick, key);
        if self.stamps.len() > self.capacity {
            if let Some((_, victim)) = self.order.pop_first() {
                self.stamps.remove(&victim);
            }
        }
        false
    }

    pub fn clear(&mut self) {
        self.stamps.clear();
        self.order.clear();
    }
}

/// Number of region-aligned regions overlapping `[offset, offset + len)`.
pub fn region_count(offset: usize, len: usize, layout: PageLayout) -> u64 {
    if len == 0 {
        return 0;
    }
    let region = layout.region_bytes();
    ((offset + len - 1) / region - offset / region + 1) as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferCost {
    pub seconds: f64,
    pub regions: u64,
    pub misses: u64,
}

impl TransferCost {
    pub fn bandwidth(&self, len: usize) -> f64 {
        len as f64 / self.seconds
    }
}

/// Model one transfer, updating the cache: every touched region becomes
/// most recently used.
pub fn transfer(
    buffer_id: u64,
    offset: usize,
    len: usize,
    layout: PageLayout,
    cache: &mut TidCache,
    params: &CostParams,
) -> TransferCost {
    let mut misses = 0;
    let regions = region_count(offset, len, layout);
    if regions > 0 {
        let first = (offset / layout.region_bytes()) as u64;
        for index in first..first + regions {
            if !cache.touch((buffer_id, index)) {
                misses += 1;
            }
        }
    }
    TransferCost {
        seconds: params.cost(len, misses),
        regions,
        misses,
    }
}

pub fn transfer_time(
    buffer_id: u64,
    offset: usize,
    len: usize,
    layout: PageLayout,
    cache: &mut TidCache,
    params: &CostParams,
) -> f64 {
    transfer(buffer_id, offset, len, layout, cache, params).seconds
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub layouts: Vec<PageLayout>,
    pub capacities: Vec<usize>,
    pub params: CostParams,
    /// Distinct buffers cycled through per iteration.
    pub buffers: usize,
    /// Unmeasured iterations that warm the cache.
    pub warmup: usize,
    pub iters: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: crate::halo::default_packet_sizes(),
            layouts: vec![PageLayout::fragmented(), PageLayout::huge()],
            capacities: vec![DEFAULT_CACHE_REGIONS],
            params: CostParams::default(),
            buffers: DEFAULT_SWEEP_BUFFERS,
            warmup: 1,
            iters: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub bytes: usize,
    pub layout: PageLayout,
    pub capacity: usize,
    /// Mean modeled seconds per transfer.
    pub seconds: f64,
    /// Bytes per second over the measured iterations.
    pub bandwidth: f64,
}

/// Cycle `buffers` buffers of `bytes` each through a fresh cache.
pub fn simulate(
    bytes: usize,
    layout: PageLayout,
    capacity: usize,
    params: &CostParams,
    buffers: usize,
    warmup: usize,
    iters: usize,
) -> SweepRow {
    let mut cache = TidCache::new(capacity);
    for _ in 0..warmup {
        for b in 0..buffers {
            transfer(b as u64, 0, bytes, layout, &mut cache, params);
        }
    }
    let mut total = 0.0;
    for _ in 0..iters {
        for b in 0..buffers {
            total += transfer(b as u64, 0, bytes, layout, &mut cache, params).seconds;
        }
    }
    let count = (buffers * iters) as f64;
    SweepRow {
        bytes,
        layout,
        capacity,
        seconds: total / count,
        bandwidth: (bytes * buffers * iters) as f64 / total,
    }
}

/// Rows ordered by layout, then capacity, then size.
pub fn model_sweep(config: &SweepConfig) -> Result<Vec<SweepRow>, ModelError> {
    config.params.validate()?;
    if config.iters == 0 || config.buffers == 0 {
        return Err(ModelError::InvalidSweep(
            "iterations and buffers must be at least 1".into(),
        ));
    }
    let mut rows = Vec::new();
    for &layout in &config.layouts {
        for &capacity in &config.capacities {
            for &bytes in &config.sizes {
                rows.push(simulate(
                    bytes,
                    layout,
                    capacity,
                    &config.params,
                    config.buffers,
                    config.warmup,
                    config.iters,
                ));
            }
        }
    }
    Ok(rows)
}
