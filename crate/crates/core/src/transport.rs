//! Point-to-point messaging over independent channels.
//!
//! An [`Endpoint`] is one rank of a communicator. Each [`Channel`] is an
//! independent message context with its own `(source, tag)` matching space;
//! [`Endpoint::duplicate_channel`] creates another one, the same way a
//! communicator is duplicated. Distinct channels share no data-path lock,
//! so lanes driving different channels progress independently.
//!
//! Sends are buffered: they complete once the payload is queued at the
//! destination (in-process) or written to the channel's socket (TCP), whose
//! reader thread drains into the destination mailbox. A receive matches on
//! `(source, tag)` within its channel and delivers in FIFO order per key.
//!
//! Three backends exist:
//! * `InProc`: all ranks live in one process and exchange through shared
//!   mailboxes.
//! * `Tcp`: one process per rank, one socket per (peer, channel), framed
//!   with a fixed 32-byte little-endian header.
//! * `Modeled`: in-process delivery plus a virtual clock that charges each
//!   send through the [`perfmodel`](crate::perfmodel) cost model.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU16, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytemuck::Pod;
use thiserror::Error;

use crate::partition::{self, get_work};
use crate::perfmodel::{self, CostParams, PageLayout, TidCache};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const TIMEOUT_ENV: &str = "RINGBENCH_TIMEOUT_SECS";

pub const FRAME_MAGIC: [u8; 4] = *b"RBCH";
pub const FRAME_VERSION: u16 = 1;
pub const FRAME_HEADER_BYTES: usize = 32;
const MAX_PAYLOAD: u64 = 1 << 40;

const BARRIER_TAG: u64 = u64::MAX;
const HANDSHAKE_TAG: u64 = u64::MAX - 1;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    BadVersion(u16),
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("frame payload of {0} bytes is too large")]
    TooLarge(u64),
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("rank {rank} out of range for communicator of size {size}")]
    RankOutOfRange { rank: usize, size: usize },
    #[error("timed out waiting for peer {peer} tag {tag} on channel {channel}")]
    Timeout { peer: usize, tag: u64, channel: u16 },
    #[error("peer {peer} disconnected")]
    Disconnected { peer: usize },
    #[error("message from peer {peer} tag {tag} carries {actual} bytes, expected {expected}")]
    SizeMismatch {
        peer: usize,
        tag: u64,
        expected: usize,
        actual: usize,
    },
    #[error("cannot reach peer {peer} at {addr}: {reason}")]
    Unreachable {
        peer: usize,
        addr: String,
        reason: String,
    },
    #[error("hostfile line {line}: {reason}")]
    Hostfile { line: usize, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TransportError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    InProc,
    Tcp,
    Modeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransportConfig {
    pub timeout: Duration,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

impl TransportConfig {
    /// Defaults, with the timeout overridden by `RINGBENCH_TIMEOUT_SECS`.
    pub fn from_env() -> Self {
        let mut config = Self::default();
        if let Some(secs) = std::env::var(TIMEOUT_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|s| s.is_finite() && *s > 0.0)
        {
            config.timeout = Duration::from_secs_f64(secs);
        }
        config
    }
}

/// Fixed 32-byte TCP frame header. Layout (little-endian):
/// magic[0..4], version[4..6], channel[6..8], source[8..12], tag[12..20],
/// payload_len[20..28], reserved zero[28..32].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub version: u16,
    pub channel_id: u16,
    pub source_rank: u32,
    pub tag: u64,
    pub payload_len: u64,
}

impl FrameHeader {
    pub fn new(channel_id: u16, source_rank: u32, tag: u64, payload_len: u64) -> Self {
        Self {
            version: FRAME_VERSION,
            channel_id,
            source_rank,
            tag,
            payload_len,
        }
    }

    pub fn encode(&self) -> [u8; FRAME_HEADER_BYTES] {
        let mut out = [0u8; FRAME_HEADER_BYTES];
        out[0..4].copy_from_slice(&FRAME_MAGIC);
        out[4..6].copy_from_slice(&self.version.to_le_bytes());
        out[6..8].copy_from_slice(&self.channel_id.to_le_bytes());
        out[8..12].copy_from_slice(&self.source_rank.to_le_bytes());
        out[12..20].copy_from_slice(&self.tag.to_le_bytes());
        out[20..28].copy_from_slice(&self.payload_len.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8; FRAME_HEADER_BYTES]) -> std::result::Result<Self, FrameError> {
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != FRAME_MAGIC {
            return Err(FrameError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != FRAME_VERSION {
            return Err(FrameError::BadVersion(version));
        }
        let payload_len = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        if payload_len > MAX_PAYLOAD {
            return Err(FrameError::TooLarge(payload_len));
        }
        Ok(Self {
            version,
            channel_id: u16::from_le_bytes(bytes[6..8].try_into().unwrap()),
            source_rank: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            tag: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
            payload_len,
        })
    }
}

/// A header plus its payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub header: FrameHeader,
    pub payload: Vec<u8>,
}

impl WireFrame {
    pub fn new(channel_id: u16, source_rank: u32, tag: u64, payload: Vec<u8>) -> Self {
        Self {
            header: FrameHeader::new(channel_id, source_rank, tag, payload.len() as u64),
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_BYTES + self.payload.len());
        out.extend_from_slice(&self.header.encode());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decode one frame from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> std::result::Result<(Self, usize), FrameError> {
        let head: &[u8; FRAME_HEADER_BYTES] = bytes
            .get(..FRAME_HEADER_BYTES)
            .and_then(|h| h.try_into().ok())
            .ok_or(FrameError::Truncated {
                needed: FRAME_HEADER_BYTES,
                have: bytes.len(),
            })?;
        let header = FrameHeader::decode(head)?;
        let total = FRAME_HEADER_BYTES + header.payload_len as usize;
        if bytes.len() < total {
            return Err(FrameError::Truncated {
                needed: total,
                have: bytes.len(),
            });
        }
        let payload = bytes[FRAME_HEADER_BYTES..total].to_vec();
        Ok((Self { header, payload }, total))
    }

    fn read_from(stream: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; FRAME_HEADER_BYTES];
        stream.read_exact(&mut head)?;
        let header = FrameHeader::decode(&head)?;
        let mut payload = vec![0u8; header.payload_len as usize];
        stream.read_exact(&mut payload)?;
        Ok(Self { header, payload })
    }
}

/// `rank host:port` per line; `#` starts a comment. Ranks must cover
/// `0..size` exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hostfile {
    entries: Vec<String>,
}

impl Hostfile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut by_rank: HashMap<usize, (usize, String)> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| TransportError::Hostfile {
                line: line_no,
                reason,
            };
            let mut fields = line.split_whitespace();
            let (Some(rank), Some(addr), None) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(bad(format!("expected `rank host:port`, got `{line}`")));
            };
            let rank: usize = rank
                .parse()
                .map_err(|_| bad(format!("`{rank}` is not a rank")))?;
            let port_ok = addr
                .rsplit_once(':')
                .is_some_and(|(host, port)| !host.is_empty() && port.parse::<u16>().is_ok());
            if !port_ok {
                return Err(bad(format!("`{addr}` is not host:port")));
            }
            if let Some((first, _)) = by_rank.insert(rank, (line_no, addr.to_string())) {
                return Err(bad(format!("rank {rank} already listed on line {first}")));
            }
        }
        let size = by_rank.len();
        if size == 0 {
            return Err(TransportError::Hostfile {
                line: 0,
                reason: "no ranks listed".into(),
            });
        }
        let mut entries = Vec::with_capacity(size);
        for rank in 0..size {
            let (_, addr) = by_rank.remove(&rank).ok_or_else(|| TransportError::Hostfile {
                line: 0,
                reason: format!("ranks must be 0..{size}; rank {rank} is missing"),
            })?;
            entries.push(addr);
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, rank: usize) -> Option<&str> {
        self.entries.get(rank).map(String::as_str)
    }

    pub fn resolve(&self, rank: usize) -> Result<SocketAddr> {
        let entry = self.entry(rank).ok_or(TransportError::RankOutOfRange {
            rank,
            size: self.size(),
        })?;
        entry
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| TransportError::Unreachable {
                peer: rank,
                addr: entry.to_string(),
                reason: "address did not resolve".into(),
            })
    }
}

#[derive(Debug, Default)]
struct MailState {
    queues: HashMap<(usize, u64), VecDeque<Vec<u8>>>,
    disconnected: HashSet<usize>,
}

/// Incoming messages for one (rank, channel).
#[derive(Debug, Default)]
struct Mailbox {
    state: Mutex<MailState>,
    arrived: Condvar,
}

impl Mailbox {
    fn lock(&self) -> MutexGuard<'_, MailState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn push(&self, source: usize, tag: u64, payload: Vec<u8>) {
        self.lock()
            .queues
            .entry((source, tag))
            .or_default()
            .push_back(payload);
        self.arrived.notify_all();
    }

    fn mark_disconnected(&self, peer: usize) {
        self.lock().disconnected.insert(peer);
        self.arrived.notify_all();
    }

    fn pop(&self, source: usize, tag: u64, channel: u16, timeout: Duration) -> Result<Vec<u8>> {
        let deadline = Instant::now() + timeout;
        let mut state = self.lock();
        loop {
            if let Some(queue) = state.queues.get_mut(&(source, tag)) {
                if let Some(msg) = queue.pop_front() {
                    if queue.is_empty() {
                        state.queues.remove(&(source, tag));
                    }
                    return Ok(msg);
                }
            }
            if state.disconnected.contains(&source) {
                return Err(TransportError::Disconnected { peer: source });
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::Timeout {
                    peer: source,
                    tag,
                    channel,
                });
            }
            state = self
                .arrived
                .wait_timeout(state, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }
}

/// Mailboxes of every (rank, channel) of an in-process communicator.
#[derive(Debug, Default)]
struct Fabric {
    mailboxes: Mutex<HashMap<(usize, u16), Arc<Mailbox>>>,
}

impl Fabric {
    fn mailbox(&self, rank: usize, channel: u16) -> Arc<Mailbox> {
        let mut map = self.mailboxes.lock().unwrap_or_else(|e| e.into_inner());
        Arc::clone(map.entry((rank, channel)).or_default())
    }
}

type PendingStreams = Arc<(Mutex<HashMap<(usize, u16), TcpStream>>, Condvar)>;

#[derive(Debug)]
struct TcpLink {
    addrs: Vec<SocketAddr>,
    pending: PendingStreams,
    shutdown: Arc<AtomicBool>,
    acceptor: Mutex<Option<JoinHandle<()>>>,
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(handle) = self.acceptor.lock().unwrap_or_else(|e| e.into_inner()).take() {
            let _ = handle.join();
        }
    }
}

#[derive(Debug)]
enum Link {
    InProc(Arc<Fabric>),
    Tcp(TcpLink),
}

/// Model parameters for the `Modeled` backend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSetup {
    pub layout: PageLayout,
    pub params: CostParams,
    pub cache_regions: usize,
}

impl Default for ModelSetup {
    fn default() -> Self {
        Self {
            layout: PageLayout::fragmented(),
            params: CostParams::default(),
            cache_regions: perfmodel::DEFAULT_CACHE_REGIONS,
        }
    }
}

#[derive(Debug)]
struct Charge {
    tag: u64,
    channel: u16,
    seq: u64,
    addr: usize,
    len: usize,
}

#[derive(Debug)]
struct ModelState {
    setup: ModelSetup,
    cache: TidCache,
    clock: f64,
    pending: Vec<Charge>,
    seq: u64,
}

impl ModelState {
    // Charges settle in (tag, channel, send order) order so that lanes
    // racing on distinct tags or channels see the same cache history on
    // every run.
    fn settle(&mut self) {
        let mut pending = std::mem::take(&mut self.pending);
        pending.sort_by_key(|c| (c.tag, c.channel, c.seq));
        for c in pending {
            self.clock += perfmodel::transfer(
                0,
                c.addr,
                c.len,
                self.setup.layout,
                &mut self.cache,
                &self.setup.params,
            )
            .seconds;
        }
    }
}

/// Messages and payload bytes sent by one endpoint over all channels.
#[derive(Debug, Default)]
pub struct TrafficStats {
    messages: AtomicU64,
    bytes: AtomicU64,
}

impl TrafficStats {
    pub fn messages(&self) -> u64 {
        self.messages.load(Ordering::SeqCst)
    }

    pub fn bytes(&self) -> u64 {
        self.bytes.load(Ordering::SeqCst)
    }
}

#[derive(Debug)]
struct EndpointShared {
    rank: usize,
    size: usize,
    backend: Backend,
    config: TransportConfig,
    next_channel: AtomicU16,
    link: Link,
    traffic: TrafficStats,
    model: Option<Mutex<ModelState>>,
}

/// One rank of a communicator.
#[derive(Debug)]
pub struct Endpoint {
    shared: Arc<EndpointShared>,
    default: Channel,
}

/// How to build a communicator.
#[derive(Debug, Clone)]
pub enum Topology {
    InProc { size: usize },
    Modeled { size: usize, setup: ModelSetup },
    Tcp { rank: usize, hostfile: Hostfile },
}

/// Build the endpoints of `topology` this process owns: all of them for
/// the in-process backends, one for TCP.
pub fn init(topology: Topology, config: TransportConfig) -> Result<Vec<Endpoint>> {
    match topology {
        Topology::InProc { size } => Endpoint::in_proc(size, config),
        Topology::Modeled { size, setup } => Endpoint::modeled(size, setup, config),
        Topology::Tcp { rank, hostfile } => Ok(vec![Endpoint::tcp(rank, &hostfile, config)?]),
    }
}

impl Endpoint {
    pub fn in_proc(size: usize, config: TransportConfig) -> Result<Vec<Endpoint>> {
        Self::local(size, config, None)
    }

    pub fn modeled(size: usize, setup: ModelSetup, config: TransportConfig) -> Result<Vec<Endpoint>> {
        setup
            .params
            .validate()
            .map_err(|e| TransportError::InvalidArgument(e.to_string()))?;
        Self::local(size, config, Some(setup))
    }

    fn local(size: usize, config: TransportConfig, setup: Option<ModelSetup>) -> Result<Vec<Endpoint>> {
        if size == 0 {
            return Err(TransportError::InvalidArgument(
                "communicator size must be at least 1".into(),
            ));
        }
        let fabric = Arc::new(Fabric::default());
        (0..size)
            .map(|rank| {
                let model = setup.map(|setup| {
                    Mutex::new(ModelState {
                        setup,
                        cache: TidCache::new(setup.cache_regions),
                        clock: 0.0,
                        pending: Vec::new(),
                        seq: 0,
                    })
                });
                let shared = Arc::new(EndpointShared {
                    rank,
                    size,
                    backend: if setup.is_some() {
                        Backend::Modeled
                    } else {
                        Backend::InProc
                    },
                    config,
                    next_channel: AtomicU16::new(0),
                    link: Link::InProc(Arc::clone(&fabric)),
                    traffic: TrafficStats::default(),
                    model,
                });
                Self::with_default_channel(shared)
            })
            .collect()
    }

    /// Join a TCP communicator as `rank`, listening on that rank's hostfile
    /// address. Returns after every rank is connected.
    pub fn tcp(rank: usize, hostfile: &Hostfile, config: TransportConfig) -> Result<Endpoint> {
        let own = hostfile.resolve(rank)?;
        let listener = TcpListener::bind(own)?;
        Self::tcp_with_listener(rank, hostfile, listener, config)
    }

    /// As [`Endpoint::tcp`] with an already bound listener.
    pub fn tcp_with_listener(
        rank: usize,
        hostfile: &Hostfile,
        listener: TcpListener,
        config: TransportConfig,
    ) -> Result<Endpoint> {
        let size = hostfile.size();
        if rank >= size {
            return Err(TransportError::RankOutOfRange { rank, size });
        }
        let addrs = (0..size)
            .map(|r| hostfile.resolve(r))
            .collect::<Result<Vec<_>>>()?;
        listener.set_nonblocking(true)?;
        let pending: PendingStreams = Arc::default();
        let shutdown = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let pending = Arc::clone(&pending);
            let shutdown = Arc::clone(&shutdown);
            thread::Builder::new()
                .name(format!("ringbench-accept-{rank}"))
                .spawn(move || accept_loop(listener, pending, shutdown, config.timeout))?
        };
        let shared = Arc::new(EndpointShared {
            rank,
            size,
            backend: Backend::Tcp,
            config,
            next_channel: AtomicU16::new(0),
            link: Link::Tcp(TcpLink {
                addrs,
                pending,
                shutdown,
                acceptor: Mutex::new(Some(acceptor)),
            }),
            traffic: TrafficStats::default(),
            model: None,
        });
        let endpoint = Self::with_default_channel(shared)?;
        endpoint.barrier()?;
        Ok(endpoint)
    }

    fn with_default_channel(shared: Arc<EndpointShared>) -> Result<Endpoint> {
        let default = Channel::open(&shared)?;
        Ok(Endpoint { shared, default })
    }

    pub fn rank(&self) -> usize {
        self.shared.rank
    }

    pub fn size(&self) -> usize {
        self.shared.size
    }

    pub fn backend(&self) -> Backend {
        self.shared.backend
    }

    pub fn config(&self) -> TransportConfig {
        self.shared.config
    }

    /// Channel 0, created with the endpoint.
    pub fn channel(&self) -> &Channel {
        &self.default
    }

    /// New channel with its own matching space. Collective: every rank must
    /// duplicate in the same order so channel ids line up.
    pub fn duplicate_channel(&self) -> Result<Channel> {
        Channel::open(&self.shared)
    }

    /// `n` duplicated channels.
    pub fn duplicate_channels(&self, n: usize) -> Result<Vec<Channel>> {
        (0..n).map(|_| self.duplicate_channel()).collect()
    }

    pub fn traffic(&self) -> &TrafficStats {
        &self.shared.traffic
    }

    /// Modeled seconds spent sending so far, or `None` for real backends.
    pub fn virtual_seconds(&self) -> Option<f64> {
        let model = self.shared.model.as_ref()?;
        let mut state = model.lock().unwrap_or_else(|e| e.into_inner());
        state.settle();
        Some(state.clock)
    }

    /// Every rank sends an empty message to every other rank on channel 0
    /// and waits for all of theirs.
    pub fn barrier(&self) -> Result<()> {
        let me = self.rank();
        for peer in (0..self.size()).filter(|&p| p != me) {
            self.default.send_control::<u8>(peer, BARRIER_TAG, &[])?;
        }
        for peer in (0..self.size()).filter(|&p| p != me) {
            self.default.recv(peer, BARRIER_TAG)?;
        }
        Ok(())
    }
}

fn accept_loop(
    listener: TcpListener,
    pending: PendingStreams,
    shutdown: Arc<AtomicBool>,
    timeout: Duration,
) {
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((mut stream, _)) => {
                let handshake = stream
                    .set_nonblocking(false)
                    .and_then(|_| stream.set_read_timeout(Some(timeout)))
                    .map_err(TransportError::from)
                    .and_then(|_| WireFrame::read_from(&mut stream));
                match handshake {
                    Ok(frame) if frame.header.tag == HANDSHAKE_TAG => {
                        let _ = stream.set_read_timeout(None);
                        let key = (frame.header.source_rank as usize, frame.header.channel_id);
                        let (map, cv) = &*pending;
                        map.lock().unwrap_or_else(|e| e.into_inner()).insert(key, stream);
                        cv.notify_all();
                    }
                    _ => {
                        let _ = stream.shutdown(Shutdown::Both);
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(2));
            }
            Err(_) => thread::sleep(Duration::from_millis(10)),
        }
    }
}

#[derive(Debug)]
enum Peers {
    InProc(Vec<Arc<Mailbox>>),
    Tcp(Vec<Option<Mutex<TcpStream>>>),
}

#[derive(Debug)]
struct ChannelInner {
    id: u16,
    endpoint: Arc<EndpointShared>,
    mailbox: Arc<Mailbox>,
    peers: Peers,
}

impl Drop for ChannelInner {
    fn drop(&mut self) {
        if let Peers::Tcp(streams) = &self.peers {
            for stream in streams.iter().flatten() {
                let stream = stream.lock().unwrap_or_else(|e| e.into_inner());
                let _ = stream.shutdown(Shutdown::Both);
            }
        }
    }
}

/// An independent message context of one endpoint. Cheap to clone; clones
/// share the same matching space.
#[derive(Debug, Clone)]
pub struct Channel {
    inner: Arc<ChannelInner>,
}

impl Channel {
    fn open(shared: &Arc<EndpointShared>) -> Result<Channel> {
        let id = shared.next_channel.fetch_add(1, Ordering::SeqCst);
        let (mailbox, peers) = match &shared.link {
            Link::InProc(fabric) => {
                let peers = (0..shared.size).map(|r| fabric.mailbox(r, id)).collect();
                (fabric.mailbox(shared.rank, id), Peers::InProc(peers))
            }
            Link::Tcp(link) => {
                let mailbox = Arc::new(Mailbox::default());
                let streams = connect_channel(shared, link, id, &mailbox)?;
                (mailbox, Peers::Tcp(streams))
            }
        };
        Ok(Channel {
            inner: Arc::new(ChannelInner {
                id,
                endpoint: Arc::clone(shared),
                mailbox,
                peers,
            }),
        })
    }

    pub fn id(&self) -> u16 {
        self.inner.id
    }

    pub fn rank(&self) -> usize {
        self.inner.endpoint.rank
    }

    pub fn size(&self) -> usize {
        self.inner.endpoint.size
    }

    fn check_rank(&self, rank: usize) -> Result<()> {
        let size = self.size();
        if rank >= size {
            return Err(TransportError::RankOutOfRange { rank, size });
        }
        Ok(())
    }

    pub fn send_bytes(&self, dest: usize, tag: u64, payload: &[u8]) -> Result<()> {
        self.deliver(dest, tag, payload, true)
    }

    /// Send bookkeeping traffic that the modeled clock does not charge.
    pub(crate) fn send_control<T: Pod>(&self, dest: usize, tag: u64, data: &[T]) -> Result<()> {
        self.deliver(dest, tag, bytemuck::cast_slice(data), false)
    }

    fn deliver(&self, dest: usize, tag: u64, payload: &[u8], charge: bool) -> Result<()> {
        self.check_rank(dest)?;
        let endpoint = &self.inner.endpoint;
        let me = endpoint.rank;
        endpoint.traffic.messages.fetch_add(1, Ordering::Relaxed);
        endpoint
            .traffic
            .bytes
            .fetch_add(payload.len() as u64, Ordering::Relaxed);
        if let Some(model) = endpoint.model.as_ref().filter(|_| charge) {
            let mut state = model.lock().unwrap_or_else(|e| e.into_inner());
            let seq = state.seq;
            state.seq += 1;
            state.pending.push(Charge {
                tag,
                channel: self.inner.id,
                seq,
                addr: payload.as_ptr() as usize,
                len: payload.len(),
            });
        }
        if dest == me {
            self.inner.mailbox.push(me, tag, payload.to_vec());
            return Ok(());
        }
        match &self.inner.peers {
            Peers::InProc(boxes) => {
                boxes[dest].push(me, tag, payload.to_vec());
                Ok(())
            }
            Peers::Tcp(streams) => {
                let stream = streams[dest].as_ref().expect("peer stream exists");
                let header =
                    FrameHeader::new(self.inner.id, me as u32, tag, payload.len() as u64).encode();
                let mut stream = stream.lock().unwrap_or_else(|e| e.into_inner());
                stream
                    .write_all(&header)
                    .and_then(|_| stream.write_all(payload))
                    .map_err(|_| TransportError::Disconnected { peer: dest })
            }
        }
    }

    /// Block until a message from `source` with `tag` arrives on this
    /// channel, or the endpoint timeout elapses.
    pub fn recv(&self, source: usize, tag: u64) -> Result<Vec<u8>> {
        self.check_rank(source)?;
        self.inner
            .mailbox
            .pop(source, tag, self.inner.id, self.inner.endpoint.config.timeout)
    }

    pub fn send<T: Pod>(&self, dest: usize, tag: u64, data: &[T]) -> Result<()> {
        self.send_bytes(dest, tag, bytemuck::cast_slice(data))
    }

    /// Receive into `out`; the message must be exactly `out`'s size.
    pub fn recv_into<T: Pod>(&self, source: usize, tag: u64, out: &mut [T]) -> Result<()> {
        let msg = self.recv(source, tag)?;
        let dst: &mut [u8] = bytemuck::cast_slice_mut(out);
        if msg.len() != dst.len() {
            return Err(TransportError::SizeMismatch {
                peer: source,
                tag,
                expected: dst.len(),
                actual: msg.len(),
            });
        }
        dst.copy_from_slice(&msg);
        Ok(())
    }

    /// Send `send` to `dest` and receive `recv.len()` elements from
    /// `source`. Safe to call from every rank of a ring at once.
    pub fn sendrecv<T: Pod>(
        &self,
        send: &[T],
        dest: usize,
        sendtag: u64,
        recv: &mut [T],
        source: usize,
        recvtag: u64,
    ) -> Result<()> {
        self.check_rank(source)?;
        self.send(dest, sendtag, send)?;
        self.recv_into(source, recvtag, recv)
    }
}

fn connect_channel(
    shared: &EndpointShared,
    link: &TcpLink,
    id: u16,
    mailbox: &Arc<Mailbox>,
) -> Result<Vec<Option<Mutex<TcpStream>>>> {
    let me = shared.rank;
    let deadline = Instant::now() + shared.config.timeout;
    let mut streams = Vec::with_capacity(shared.size);
    for peer in 0..shared.size {
        let stream = match peer.cmp(&me) {
            std::cmp::Ordering::Equal => {
                streams.push(None);
                continue;
            }
            std::cmp::Ordering::Less => {
                let mut stream = connect_with_retry(peer, link.addrs[peer], deadline)?;
                let hello = FrameHeader::new(id, me as u32, HANDSHAKE_TAG, 0).encode();
                stream.write_all(&hello)?;
                stream
            }
            std::cmp::Ordering::Greater => await_stream(link, peer, id, deadline)?,
        };
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let mailbox = Arc::clone(mailbox);
        thread::Builder::new()
            .name(format!("ringbench-rx-{me}-{peer}-{id}"))
            .spawn(move || read_loop(reader, peer, id, mailbox))?;
        streams.push(Some(Mutex::new(stream)));
    }
    Ok(streams)
}

fn connect_with_retry(peer: usize, addr: SocketAddr, deadline: Instant) -> Result<TcpStream> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
            Ok(stream) => return Ok(stream),
            Err(e) if Instant::now() >= deadline => {
                return Err(TransportError::Unreachable {
                    peer,
                    addr: addr.to_string(),
                    reason: e.to_string(),
                })
            }
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn await_stream(link: &TcpLink, peer: usize, id: u16, deadline: Instant) -> Result<TcpStream> {
    let (map, cv) = &*link.pending;
    let mut map = map.lock().unwrap_or_else(|e| e.into_inner());
    loop {
        if let Some(stream) = map.remove(&(peer, id)) {
            return Ok(stream);
        }
        let now = Instant::now();
        if now >= deadline {
            return Err(TransportError::Unreachable {
                peer,
                addr: link.addrs[peer].to_string(),
                reason: format!("no connection for channel {id} before timeout"),
            });
        }
        map = cv
            .wait_timeout(map, deadline - now)
            .unwrap_or_else(|e| e.into_inner())
            .0;
    }
}

fn read_loop(mut stream: TcpStream, peer: usize, channel: u16, mailbox: Arc<Mailbox>) {
    loop {
        match WireFrame::read_from(&mut stream) {
            Ok(frame)
                if frame.header.channel_id == channel
                    && frame.header.source_rank as usize == peer =>
            {
                mailbox.push(peer, frame.header.tag, frame.payload);
            }
            _ => break,
        }
    }
    mailbox.mark_disconnected(peer);
}

/// Split one sendrecv across `channels`: lane `t` moves the `t`-th
/// contiguous share of both buffers on `channels[t]`, all lanes at once.
/// Lanes with empty shares still exchange a zero-length message. On
/// failure the error of the lowest-numbered failing lane is returned.
pub fn multi_channel_sendrecv<T: Pod + Send + Sync>(
    channels: &[Channel],
    send: &[T],
    dest: usize,
    sendtag: u64,
    recv: &mut [T],
    source: usize,
    recvtag: u64,
) -> Result<()> {
    let lanes = channels.len();
    if lanes == 0 {
        return Err(TransportError::InvalidArgument(
            "at least one channel is required".into(),
        ));
    }
    if lanes == 1 {
        return channels[0].sendrecv(send, dest, sendtag, recv, source, recvtag);
    }
    let recv_slices = partition::partition(recv.len(), lanes).expect("lanes >= 1");
    let recv_parts = partition::split_mut(recv, &recv_slices);
    let results: Vec<Result<()>> = thread::scope(|scope| {
        let handles: Vec<_> = channels
            .iter()
            .zip(recv_parts)
            .enumerate()
            .map(|(t, (channel, rpart))| {
                let s = get_work(send.len(), t, lanes).expect("lanes >= 1");
                let spart = &send[s.range()];
                scope.spawn(move || channel.sendrecv(spart, dest, sendtag, rpart, source, recvtag))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sendrecv lane panicked"))
            .collect()
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quick() -> TransportConfig {
        TransportConfig {
            timeout: Duration::from_millis(200),
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let h = FrameHeader::new(0x0102, 0x0a0b0c0d, 7, 3).encode();
        assert_eq!(&h[0..4], b"RBCH");
        assert_eq!(&h[4..6], &[1, 0]);
        assert_eq!(&h[6..8], &[0x02, 0x01]);
        assert_eq!(&h[8..12], &[0x0d, 0x0c, 0x0b, 0x0a]);
        assert_eq!(&h[12..20], &7u64.to_le_bytes());
        assert_eq!(&h[20..28], &3u64.to_le_bytes());
        assert_eq!(&h[28..32], &[0, 0, 0, 0]);
    }

    #[test]
    fn frame_rejects_bad_magic_and_version() {
        let mut h = FrameHeader::new(0, 0, 0, 0).encode();
        h[0] = b'X';
        assert!(matches!(FrameHeader::decode(&h), Err(FrameError::BadMagic(_))));
        let mut h = FrameHeader::new(0, 0, 0, 0).encode();
        h[4] = 9;
        assert!(matches!(FrameHeader::decode(&h), Err(FrameError::BadVersion(9))));
        let frame = WireFrame::new(1, 2, 3, vec![1, 2, 3]).encode();
        assert!(matches!(
            WireFrame::decode(&frame[..frame.len() - 1]),
            Err(FrameError::Truncated { .. })
        ));
    }

    proptest! {
        #[test]
        fn frame_round_trip(ch: u16, src: u32, tag: u64, payload in proptest::collection::vec(any::<u8>(), 0..300)) {
            let frame = WireFrame::new(ch, src, tag, payload);
            let bytes = frame.encode();
            let (back, used) = WireFrame::decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, frame);
        }
    }

    #[test]
    fn hostfile_parsing() {
        let hf = Hostfile::parse("# cluster\n1 127.0.0.1:9001\n0 localhost:9000 # head\n\n").unwrap();
        assert_eq!(hf.size(), 2);
        assert_eq!(hf.entry(0), Some("localhost:9000"));
        assert!(matches!(
            Hostfile::parse("0 a:1\n0 b:2"),
            Err(TransportError::Hostfile { line: 2, .. })
        ));
        assert!(Hostfile::parse("0 a:1\n2 b:2").is_err());
        assert!(Hostfile::parse("0 nohostport").is_err());
        assert!(Hostfile::parse("x a:1").is_err());
        assert!(Hostfile::parse("# empty\n").is_err());
    }

    #[test]
    fn init_sixteen_in_proc() {
        let eps = init(Topology::InProc { size: 16 }, quick()).unwrap();
        let ranks: Vec<_> = eps.iter().map(Endpoint::rank).collect();
        assert_eq!(ranks, (0..16).collect::<Vec<_>>());
        assert!(eps.iter().all(|e| e.size() == 16 && e.channel().id() == 0));
        assert!(Endpoint::in_proc(0, quick()).is_err());
    }

    #[test]
    fn send_recv_and_fifo() {
        let eps = Endpoint::in_proc(2, quick()).unwrap();
        eps[0].channel().send_bytes(1, 7, b"abc").unwrap();
        eps[0].channel().send_bytes(1, 7, b"def").unwrap();
        eps[0].channel().send_bytes(1, 7, b"").unwrap();
        assert_eq!(eps[1].channel().recv(0, 7).unwrap(), b"abc");
        assert_eq!(eps[1].channel().recv(0, 7).unwrap(), b"def");
        assert_eq!(eps[1].channel().recv(0, 7).unwrap(), b"");
    }

    #[test]
    fn recv_times_out_with_key() {
        let eps = Endpoint::in_proc(2, quick()).unwrap();
        match eps[1].channel().recv(0, 42) {
            Err(TransportError::Timeout { peer: 0, tag: 42, channel: 0 }) => {}
            other => panic!("expected timeout, got {other:?}"),
        }
    }

    #[test]
    fn rank_range_checked() {
        let eps = Endpoint::in_proc(2, quick()).unwrap();
        assert!(matches!(
            eps[0].channel().send_bytes(2, 0, b"x"),
            Err(TransportError::RankOutOfRange { rank: 2, size: 2 })
        ));
        assert!(eps[0].channel().recv(5, 0).is_err());
    }

    #[test]
    fn duplicate_ids_and_isolation() {
        let eps = Endpoint::in_proc(2, quick()).unwrap();
        let a: Vec<_> = eps[0].duplicate_channels(8).unwrap();
        let b: Vec<_> = eps[1].duplicate_channels(8).unwrap();
        assert_eq!(a.iter().map(Channel::id).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
        a[0].send_bytes(1, 5, b"one").unwrap();
        a[1].send_bytes(1, 5, b"two").unwrap();
        assert_eq!(b[1].recv(0, 5).unwrap(), b"two");
        assert_eq!(b[0].recv(0, 5).unwrap(), b"one");
        assert!(eps[1].channel().recv(0, 5).is_err());
    }

    #[test]
    fn size_one_duplicate_and_self_sendrecv() {
        let eps = Endpoint::in_proc(1, quick()).unwrap();
        let ch = eps[0].duplicate_channel().unwrap();
        let mut out = [0u32; 3];
        ch.sendrecv(&[1u32, 2, 3], 0, 9, &mut out, 0, 9).unwrap();
        assert_eq!(out, [1, 2, 3]);
    }

    #[test]
    fn recv_count_mismatch() {
        let eps = Endpoint::in_proc(1, quick()).unwrap();
        let mut out = [0u8; 2];
        assert!(matches!(
            eps[0].channel().sendrecv(&[1u8, 2, 3], 0, 1, &mut out, 0, 1),
            Err(TransportError::SizeMismatch { expected: 2, actual: 3, .. })
        ));
    }

    #[test]
    fn ring_sendrecv_completes() {
        let eps = Endpoint::in_proc(4, quick()).unwrap();
        let got: Vec<u64> = thread::scope(|s| {
            let hs: Vec<_> = eps
                .iter()
                .map(|ep| {
                    s.spawn(move || {
                        let r = ep.rank();
                        let mut out = [0u64];
                        ep.channel()
                            .sendrecv(&[r as u64], (r + 1) % 4, 0, &mut out, (r + 3) % 4, 0)
                            .unwrap();
                        out[0]
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(got, vec![3, 0, 1, 2]);
    }

    #[test]
    fn multi_channel_lanes_with_empty_shares() {
        let eps = Endpoint::in_proc(1, quick()).unwrap();
        let chans = eps[0].duplicate_channels(8).unwrap();
        let data: Vec<f32> = (0..5).map(|i| i as f32).collect();
        let mut out = vec![0f32; 5];
        let before = eps[0].traffic().messages();
        multi_channel_sendrecv(&chans, &data, 0, 3, &mut out, 0, 3).unwrap();
        assert_eq!(out, data);
        assert_eq!(eps[0].traffic().messages() - before, 8);
        assert!(multi_channel_sendrecv::<f32>(&[], &data, 0, 3, &mut out, 0, 3).is_err());
    }

    #[test]
    fn modeled_clock_charges_sends() {
        let setup = ModelSetup {
            params: CostParams {
                msg_latency: 0.0,
                overlap: perfmodel::PinOverlap::Serialized,
                ..CostParams::default()
            },
            ..ModelSetup::default()
        };
        let eps = Endpoint::modeled(2, setup, quick()).unwrap();
        assert_eq!(eps[0].backend(), Backend::Modeled);
        assert_eq!(eps[0].virtual_seconds(), Some(0.0));
        let buf = crate::alloc::alloc_standard(8192).unwrap();
        eps[0].channel().send_bytes(1, 0, buf.as_bytes()).unwrap();
        let t = eps[0].virtual_seconds().unwrap();
        let expected = 8192.0 / 12.5e9 + 2.0 * 2e-6;
        assert!((t - expected).abs() < 1e-15);
        assert_eq!(eps[1].virtual_seconds(), Some(0.0));
        assert_eq!(eps[1].channel().recv(0, 0).unwrap().len(), 8192);
        assert_eq!(Endpoint::in_proc(1, quick()).unwrap()[0].virtual_seconds(), None);
    }
}
