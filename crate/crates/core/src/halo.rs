//! Four-dimensional periodic Cartesian layout and the eight-direction
//! surface exchange.
//!
//! Each rank owns an `L^4` block of a lattice and swaps one `L^3` face with
//! its neighbour in each of the directions `+x, -x, +y, -y, +z, -z, +t, -t`.
//! A face carries `bytes_per_site * L^3` bytes; the default of 96 bytes per
//! site gives the packet sizes in [`default_packet_sizes`].

use std::time::Instant;

use thiserror::Error;

use crate::transport::{Channel, Endpoint, TransportError};

pub const BYTES_PER_SITE: usize = 96;
pub const DIRECTIONS: usize = 8;
pub const DEFAULT_DIMS: [usize; 4] = [2, 2, 2, 2];
pub const DEFAULT_LOCAL_EXTENTS: [usize; 8] = [8, 16, 24, 32, 40, 48, 56, 64];
pub const MAX_COMMS_THREADS: usize = 8;

#[derive(Debug, Error)]
pub enum HaloError {
    #[error("invalid dims {0:?}: every extent must be at least 1")]
    InvalidDims([usize; 4]),
    #[error("dims {dims:?} hold {product} ranks but the endpoint has {size}")]
    SizeMismatch {
        dims: [usize; 4],
        product: usize,
        size: usize,
    },
    #[error("coordinate {coords:?} outside dims {dims:?}")]
    CoordOutOfRange { coords: [usize; 4], dims: [usize; 4] },
    #[error("rank {rank} outside a grid of {size}")]
    RankOutOfRange { rank: usize, size: usize },
    #[error("invalid dimension {0}; expected 0..4")]
    InvalidDim(usize),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("buffer for {direction} holds {actual} bytes, expected {expected}")]
    BufferSize {
        direction: Direction,
        expected: usize,
        actual: usize,
    },
    #[error("received {direction} packet differs from the neighbour's pattern at byte {index}")]
    Corrupt { direction: Direction, index: usize },
    #[error("no exchange samples to summarize")]
    NoSamples,
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub type Result<T> = std::result::Result<T, HaloError>;

pub fn packet_bytes(local_extent: usize, bytes_per_site: usize) -> usize {
    bytes_per_site * local_extent.pow(3)
}

/// Packet sizes for [`DEFAULT_LOCAL_EXTENTS`] at [`BYTES_PER_SITE`].
pub fn default_packet_sizes() -> Vec<usize> {
    DEFAULT_LOCAL_EXTENTS
        .iter()
        .map(|&l| packet_bytes(l, BYTES_PER_SITE))
        .collect()
}

/// One of the eight signed axes. Index `2 * dim` is the forward direction
/// and `2 * dim + 1` the backward one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Direction(u8);

impl Direction {
    pub const ALL: [Direction; DIRECTIONS] = [
        Direction(0),
        Direction(1),
        Direction(2),
        Direction(3),
        Direction(4),
        Direction(5),
        Direction(6),
        Direction(7),
    ];

    pub fn new(index: usize) -> Option<Self> {
        (index < DIRECTIONS).then_some(Direction(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn dim(self) -> usize {
        self.index() / 2
    }

    pub fn is_forward(self) -> bool {
        self.0.is_multiple_of(2)
    }

    pub fn opposite(self) -> Self {
        Direction(self.0 ^ 1)
    }

    pub fn label(self) -> &'static str {
        ["+x", "-x", "+y", "-y", "+z", "-z", "+t", "-t"][self.index()]
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Periodic 4-D grid of ranks, x fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CartComm4D {
    dims: [usize; 4],
}

impl Default for CartComm4D {
    fn default() -> Self {
        Self { dims: DEFAULT_DIMS }
    }
}

impl CartComm4D {
    pub fn new(dims: [usize; 4]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(HaloError::InvalidDims(dims));
        }
        Ok(Self { dims })
    }

    /// A grid that must cover exactly `size` ranks.
    pub fn for_size(dims: [usize; 4], size: usize) -> Result<Self> {
        let cart = Self::new(dims)?;
        if cart.size() != size {
            return Err(HaloError::SizeMismatch {
                dims,
                product: cart.size(),
                size,
            });
        }
        Ok(cart)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn size(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn coords(&self, rank: usize) -> Result<[usize; 4]> {
        if rank >= self.size() {
            return Err(HaloError::RankOutOfRange {
                rank,
                size: self.size(),
            });
        }
        let mut rest = rank;
        let mut out = [0; 4];
        for (c, &d) in out.iter_mut().zip(&self.dims) {
            *c = rest % d;
            rest /= d;
        }
        Ok(out)
    }

    pub fn rank_of(&self, coords: [usize; 4]) -> Result<usize> {
        if coords.iter().zip(&self.dims).any(|(c, d)| c >= d) {
            return Err(HaloError::CoordOutOfRange {
                coords,
                dims: self.dims,
            });
        }
        Ok(coords
            .iter()
            .zip(&self.dims)
            .rev()
            .fold(0, |acc, (&c, &d)| acc * d + c))
    }

    /// Rank one step along `dim`, wrapping around.
    pub fn neighbor(&self, rank: usize, dim: usize, forward: bool) -> Result<usize> {
        if dim >= 4 {
            return Err(HaloError::InvalidDim(dim));
        }
        let mut c = self.coords(rank)?;
        let extent = self.dims[dim];
        c[dim] = if forward {
            (c[dim] + 1) % extent
        } else {
            (c[dim] + extent - 1) % extent
        };
        self.rank_of(c)
    }

    pub fn neighbor_in(&self, rank: usize, direction: Direction) -> Result<usize> {
        self.neighbor(rank, direction.dim(), direction.is_forward())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeMode {
    /// One blocking sendrecv per direction, in direction order.
    Sequential,
    /// All eight directions in flight at once on one channel.
    Concurrent,
    /// All eight directions in flight at once; direction `d` travels on
    /// channel `d mod n`.
    Threaded(usize),
}

impl ExchangeMode {
    pub fn label(&self) -> &'static str {
        match self {
            ExchangeMode::Sequential => "Seq",
            ExchangeMode::Concurrent => "Concurrent",
            ExchangeMode::Threaded(_) => "Threaded",
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            ExchangeMode::Threaded(n) => *n,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HaloPlan {
    pub local_extent: usize,
    pub bytes_per_site: usize,
    pub mode: ExchangeMode,
    pub iterations: usize,
}

impl HaloPlan {
    pub fn new(local_extent: usize, mode: ExchangeMode) -> Result<Self> {
        let plan = Self {
            local_extent,
            bytes_per_site: BYTES_PER_SITE,
            mode,
            iterations: 1,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.local_extent == 0 {
            return Err(HaloError::InvalidPlan("local extent must be at least 1".into()));
        }
        if self.bytes_per_site == 0 {
            return Err(HaloError::InvalidPlan("bytes per site must be at least 1".into()));
        }
        if let ExchangeMode::Threaded(n) = self.mode {
            if !(1..=MAX_COMMS_THREADS).contains(&n) {
                return Err(HaloError::InvalidPlan(format!(
                    "comms threads must be 1..={MAX_COMMS_THREADS}, got {n}"
                )));
            }
        }
        Ok(())
    }

    pub fn packet_bytes(&self) -> usize {
        packet_bytes(self.local_extent, self.bytes_per_site)
    }
}

/// One rank's view of one exchange.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExchangeSample {
    pub seconds: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExchangeStats {
    /// Mean seconds per exchange.
    pub wall_seconds: f64,
    pub bytes_sent_per_node: f64,
    pub bytes_received_per_node: f64,
    /// Sent plus received bytes per node per second, in 10^6 bytes.
    pub bandwidth_mbps: f64,
}

/// Average samples from any mix of ranks and iterations.
pub fn exchange_stats(samples: &[ExchangeSample]) -> Result<ExchangeStats> {
    if samples.is_empty() {
        return Err(HaloError::NoSamples);
    }
    let n = samples.len() as f64;
    let wall = samples.iter().map(|s| s.seconds).sum::<f64>() / n;
    let sent = samples.iter().map(|s| s.bytes_sent as f64).sum::<f64>() / n;
    let received = samples.iter().map(|s| s.bytes_received as f64).sum::<f64>() / n;
    let bandwidth = if wall > 0.0 {
        (sent + received) / wall / 1e6
    } else {
        0.0
    };
    Ok(ExchangeStats {
        wall_seconds: wall,
        bytes_sent_per_node: sent,
        bytes_received_per_node: received,
        bandwidth_mbps: bandwidth,
    })
}

/// Exchange all eight faces. `send[d]` goes to the neighbour in direction
/// `d`; `recv[d]` receives that neighbour's face for the opposite
/// direction. The tag of a packet is the index of the direction it was
/// sent in, so the two packets exchanged with a neighbour that is both the
/// `+` and `-` neighbour stay apart. In threaded mode the packet sent in
/// direction `d` travels on `channels[d mod n]`.
pub fn halo_exchange<B>(
    plan: &HaloPlan,
    cart: &CartComm4D,
    endpoint: &Endpoint,
    channels: &[Channel],
    send: &[B],
    recv: &mut [B],
) -> Result<ExchangeSample>
where
    B: AsRef<[u8]> + AsMut<[u8]> + Send + Sync,
{
    plan.validate()?;
    let size = endpoint.size();
    if cart.size() != size {
        return Err(HaloError::SizeMismatch {
            dims: cart.dims(),
            product: cart.size(),
            size,
        });
    }
    let needed = plan.mode.channels();
    if channels.len() < needed {
        return Err(HaloError::InvalidPlan(format!(
            "mode {} needs {needed} channels, got {}",
            plan.mode.label(),
            channels.len()
        )));
    }
    if send.len() != DIRECTIONS || recv.len() != DIRECTIONS {
        return Err(HaloError::InvalidPlan(format!(
            "expected {DIRECTIONS} send and receive buffers, got {} and {}",
            send.len(),
            recv.len()
        )));
    }
    let bytes = plan.packet_bytes();
    for d in Direction::ALL {
        for actual in [send[d.index()].as_ref().len(), recv[d.index()].as_ref().len()] {
            if actual != bytes {
                return Err(HaloError::BufferSize {
                    direction: d,
                    expected: bytes,
                    actual,
                });
            }
        }
    }

    let rank = endpoint.rank();
    let neighbors: Vec<usize> = Direction::ALL
        .iter()
        .map(|&d| cart.neighbor_in(rank, d))
        .collect::<Result<_>>()?;
    let channel_of = |d: Direction| match plan.mode {
        ExchangeMode::Threaded(n) => &channels[d.index() % n],
        _ => &channels[0],
    };
    // Lane `d` shifts every rank's `d` face one step along `d`: it sends
    // `send[d]` forward and fills `recv[opposite(d)]` from the rank behind.
    let lane = |d: Direction, out: &[u8], into: &mut [u8]| -> Result<()> {
        let channel = channel_of(d);
        let tag = d.index() as u64;
        channel.send_bytes(neighbors[d.index()], tag, out)?;
        channel.recv_into(neighbors[d.opposite().index()], tag, into)?;
        Ok(())
    };
    let mut targets: Vec<Option<&mut B>> = recv.iter_mut().map(Some).collect();
    let work: Vec<(Direction, &[u8], &mut [u8])> = Direction::ALL
        .into_iter()
        .map(|d| {
            let into = targets[d.opposite().index()].take().expect("each face received once");
            (d, send[d.index()].as_ref(), into.as_mut())
        })
        .collect();

    let virtual_start = endpoint.virtual_seconds();
    let start = Instant::now();
    match plan.mode {
        ExchangeMode::Sequential => {
            for (d, out, into) in work {
                lane(d, out, into)?;
            }
        }
        ExchangeMode::Concurrent | ExchangeMode::Threaded(_) => {
            let lane = &lane;
            let results: Vec<Result<()>> = std::thread::scope(|scope| {
                let handles: Vec<_> = work
                    .into_iter()
                    .map(|(d, out, into)| scope.spawn(move || lane(d, out, into)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("halo lane panicked"))
                    .collect()
            });
            results.into_iter().collect::<Result<()>>()?;
        }
    }
    let mut seconds = start.elapsed().as_secs_f64();
    if let (Some(v0), Some(v1)) = (virtual_start, endpoint.virtual_seconds()) {
        seconds = v1 - v0;
    }
    let total = (bytes * DIRECTIONS) as u64;
    Ok(ExchangeSample {
        seconds,
        bytes_sent: total,
        bytes_received: total,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn pattern_word(rank: usize, direction: Direction, block: usize) -> u64 {
    let seed = splitmix64(((rank as u64) << 8) | direction.index() as u64);
    splitmix64(seed ^ block as u64)
}

/// Deterministic content for `rank`'s send buffer in `direction`.
pub fn fill_pattern(rank: usize, direction: Direction, buf: &mut [u8]) {
    for (block, chunk) in buf.chunks_mut(8).enumerate() {
        let word = pattern_word(rank, direction, block).to_le_bytes();
        chunk.copy_from_slice(&word[..chunk.len()]);
    }
}

/// Index of the first byte of `buf` that differs from the pattern.
pub fn pattern_mismatch(rank: usize, direction: Direction, buf: &[u8]) -> Option<usize> {
    buf.chunks(8).enumerate().find_map(|(block, chunk)| {
        let word = pattern_word(rank, direction, block).to_le_bytes();
        chunk
            .iter()
            .zip(word)
            .position(|(&a, b)| a != b)
            .map(|i| block * 8 + i)
    })
}

/// Check that every `recv[d]` of `rank` holds the pattern its neighbour in
/// direction `d` filled for the opposite direction.
pub fn verify_exchange<B: AsRef<[u8]>>(cart: &CartComm4D, rank: usize, recv: &[B]) -> Result<()> {
    for (d, buf) in Direction::ALL.into_iter().zip(recv) {
        let peer = cart.neighbor_in(rank, d)?;
        if let Some(index) = pattern_mismatch(peer, d.opposite(), buf.as_ref()) {
            return Err(HaloError::Corrupt { direction: d, index });
        }
    }
    Ok(())
}
