//! Command-line benchmarks: halo exchange, ring allreduce, the pinning cost
//! model sweep, and huge-page pool sizing.
//!
//! Every run writes rows with the columns
//! `source,subcommand,bytes,mode,alloc,channels,iters,comms_us,compute_us,total_us,bandwidth_MBps`.
//! `source` is `model` for rows timed by the modeled backend or the model
//! sweep and `measured` otherwise. Halo bandwidth counts bytes sent plus
//! bytes received per node; allreduce bandwidth is vector bytes over total
//! time per call.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::alloc::{AllocConfig, AllocError, AllocKind, Allocator, BufferHandle, HighWaterCache, HwPair, SlotCache};
use crate::collectives::{CollectiveError, RingAllreduce, Scratch};
use crate::halo::{self, CartComm4D, Direction, ExchangeMode, ExchangeSample, HaloError, HaloPlan};
use crate::perfmodel::{self, CostParams, ModelError, PageLayout, PinOverlap, SweepConfig};
use crate::transport::{
    Channel, Endpoint, Hostfile, ModelSetup, TransportConfig, TransportError,
};

pub const CSV_HEADER: &str =
    "source,subcommand,bytes,mode,alloc,channels,iters,comms_us,compute_us,total_us,bandwidth_MBps";
pub const MAX_HUGEPOOL_PAGES: i64 = 8000;
pub const HUGEADM: &str = "hugeadm";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("pages must be within 0..={MAX_HUGEPOOL_PAGES}, got {0}")]
    PagesOutOfRange(i64),
    #[error("`{0}` is not installed; install libhugetlbfs utilities or size the pool through /proc/sys/vm/nr_hugepages")]
    MissingUtility(&'static str),
    #[error("`{command}` failed: {detail}")]
    Utility { command: String, detail: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Halo(#[from] HaloError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Parser)]
#[command(name = "ringbench", version, about = "Halo exchange, ring allreduce and page-pinning model benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Eight-direction halo exchange on a 4-D periodic grid of ranks.
    Halo(HaloArgs),
    /// Ring allreduce over a sweep of vector lengths.
    Allreduce(AllreduceArgs),
    /// Page-pinning cost model sweep.
    Model(ModelArgs),
    /// Validate a huge-page pool size and print or run the resize command.
    Hugepool(HugepoolArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportKind {
    Inproc,
    Tcp,
    Modeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AllocChoice {
    Standard,
    Huge,
    HwCache,
    SlotCache,
}

impl AllocChoice {
    pub fn label(self) -> &'static str {
        match self {
            AllocChoice::Standard => "standard",
            AllocChoice::Huge => "huge",
            AllocChoice::HwCache => "hw-cache",
            AllocChoice::SlotCache => "slot-cache",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeChoice {
    Seq,
    Concurrent,
    Threaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OverlapChoice {
    Pipelined,
    Serialized,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, value_enum, default_value = "inproc")]
    pub transport: TransportKind,
    /// Measured iterations per row.
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    /// Unmeasured iterations before timing starts.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub markdown: Option<PathBuf>,
    /// `rank host:port` lines, one per rank (tcp transport).
    #[arg(long)]
    pub hostfile: Option<PathBuf>,
    /// This process's rank (tcp transport).
    #[arg(long)]
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelFlags {
    /// Seconds to pin one translation region.
    #[arg(long, default_value_t = 2e-6)]
    pub pin_cost: f64,
    /// Wire bandwidth per direction, bytes per second.
    #[arg(long, default_value_t = 12.5e9)]
    pub wire_bw: f64,
    /// Fixed seconds per message.
    #[arg(long, default_value_t = 1e-6)]
    pub latency: f64,
    /// Force a page size (4096 or 2097152) instead of deriving it from the
    /// allocator.
    #[arg(long)]
    pub page_bytes: Option<usize>,
    /// Contiguous small pages per translation region.
    #[arg(long, default_value_t = 1)]
    pub coalesce: usize,
    /// Translation cache capacity in regions; the default is a fitted value.
    #[arg(long, default_value_t = perfmodel::DEFAULT_CACHE_REGIONS)]
    pub cache_regions: usize,
    #[arg(long, value_enum, default_value = "pipelined")]
    pub overlap: OverlapChoice,
}

impl ModelFlags {
    pub fn params(&self) -> Result<CostParams> {
        let params = CostParams {
            wire_bw: self.wire_bw,
            pin_cost: self.pin_cost,
            msg_latency: self.latency,
            overlap: match self.overlap {
                OverlapChoice::Pipelined => PinOverlap::Pipelined,
                OverlapChoice::Serialized => PinOverlap::Serialized,
            },
        };
        params.validate()?;
        Ok(params)
    }

    fn small_pages(&self) -> Result<PageLayout> {
        Ok(PageLayout::new(crate::alloc::SMALL_PAGE_BYTES, self.coalesce)?)
    }

    /// Layout for buffers from `alloc`: huge pages map to 2 MiB regions,
    /// everything else to small pages.
    pub fn layout_for(&self, alloc: AllocChoice) -> Result<PageLayout> {
        match self.page_bytes {
            Some(bytes) if bytes == crate::alloc::TWO_MB => Ok(PageLayout::huge()),
            Some(bytes) => Ok(PageLayout::new(bytes, self.coalesce)?),
            None if alloc == AllocChoice::Huge => Ok(PageLayout::huge()),
            None => self.small_pages(),
        }
    }

    fn setup(&self, alloc: AllocChoice) -> Result<ModelSetup> {
        Ok(ModelSetup {
            layout: self.layout_for(alloc)?,
            params: self.params()?,
            cache_regions: self.cache_regions,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct HaloArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "standard")]
    pub alloc: Vec<AllocChoice>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "seq,concurrent,threaded")]
    pub mode: Vec<ModeChoice>,
    /// Channels used by the threaded mode.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(1..=8))]
    pub comms_threads: u8,
    /// Packet sizes in bytes; overrides --local-extent.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    /// Local lattice extents L; packets hold 96 * L^3 bytes.
    #[arg(long, value_delimiter = ',', default_values_t = halo::DEFAULT_LOCAL_EXTENTS)]
    pub local_extent: Vec<usize>,
    /// Grid of ranks, x,y,z,t.
    #[arg(long, value_delimiter = ',', num_args = 1, default_values_t = halo::DEFAULT_DIMS)]
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AllreduceArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "hw-cache")]
    pub alloc: Vec<AllocChoice>,
    /// Channel counts to sweep; each ring step is split across them.
    #[arg(long, value_delimiter = ',', default_value = "1", value_parser = clap::value_parser!(u8).range(1..=8))]
    pub comms_threads: Vec<u8>,
    /// Vector lengths in 32-bit floats.
    #[arg(long, value_delimiter = ',', default_values_t = default_lengths())]
    pub lengths: Vec<usize>,
    /// Ranks for the in-process transports.
    #[arg(long, default_value_t = 4)]
    pub ranks: usize,
    /// Threads for local copy and reduce loops.
    #[arg(long, default_value_t = 1)]
    pub lanes: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// Transfer sizes in bytes; overrides --local-extent.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = halo::DEFAULT_LOCAL_EXTENTS)]
    pub local_extent: Vec<usize>,
    /// Distinct buffers cycled through the translation cache.
    #[arg(long, default_value_t = perfmodel::DEFAULT_SWEEP_BUFFERS)]
    pub buffers: usize,
    #[arg(long, default_value_t = 4)]
    pub iters: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub markdown: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct HugepoolArgs {
    /// Number of 2 MiB pages to reserve.
    #[arg(long, allow_negative_numbers = true)]
    pub pages: i64,
    /// Run the resize command instead of printing it.
    #[arg(long)]
    pub execute: bool,
}

/// Powers of four from 2^6 to 2^24.
pub fn default_lengths() -> Vec<usize> {
    (3..=12).map(|k| 1usize << (2 * k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Measured,
    Model,
}

impl Source {
    pub fn label(self) -> &'static str {
        match self {
            Source::Measured => "measured",
            Source::Model => "model",
        }
    }
}

/// One output row. Times are mean microseconds per operation per rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub source: Source,
    pub subcommand: &'static str,
    pub bytes: usize,
    pub mode: String,
    pub alloc: String,
    pub channels: usize,
    pub iters: usize,
    pub comms_us: f64,
    pub compute_us: f64,
    pub total_us: f64,
    pub bandwidth_mbps: f64,
}

impl Row {
    pub fn percent_comms(&self) -> f64 {
        if self.total_us > 0.0 {
            100.0 * self.comms_us / self.total_us
        } else {
            0.0
        }
    }
}

#[derive(Serialize)]
struct CsvRecord<'a> {
    source: &'a str,
    subcommand: &'a str,
    bytes: usize,
    mode: &'a str,
    alloc: &'a str,
    channels: usize,
    iters: usize,
    comms_us: String,
    compute_us: String,
    total_us: String,
    #[serde(rename = "bandwidth_MBps")]
    bandwidth_mbps: String,
}

impl<'a> From<&'a Row> for CsvRecord<'a> {
    fn from(r: &'a Row) -> Self {
        Self {
            source: r.source.label(),
            subcommand: r.subcommand,
            bytes: r.bytes,
            mode: &r.mode,
            alloc: &r.alloc,
            channels: r.channels,
            iters: r.iters,
            comms_us: format!("{:.3}", r.comms_us),
            compute_us: format!("{:.3}", r.compute_us),
            total_us: format!("{:.3}", r.total_us),
            bandwidth_mbps: format!("{:.3}", r.bandwidth_mbps),
        }
    }
}

/// Rows as CSV text, header first.
pub fn to_csv(rows: &[Row]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for row in rows {
        w.serialize(CsvRecord::from(row))?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Collects rows, appending each to the CSV file as soon as it exists so
/// an aborted sweep keeps what it finished.
pub struct Report {
    rows: Vec<Row>,
    csv: Option<csv::Writer<File>>,
    wrote_header: bool,
    enabled: bool,
}

impl Report {
    pub fn new(csv_path: Option<&Path>, enabled: bool) -> Result<Self> {
        let csv = match csv_path {
            Some(p) if enabled => Some(csv::Writer::from_path(p)?),
            _ => None,
        };
        Ok(Self {
            rows: Vec::new(),
            csv,
            wrote_header: false,
            enabled,
        })
    }

    pub fn push(&mut self, row: Row) -> Result<()> {
        if let Some(w) = &mut self.csv {
            w.serialize(CsvRecord::from(&row))?;
            w.flush()?;
            self.wrote_header = true;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    /// Flush the CSV, write the markdown file and return the rows (none on
    /// ranks other than the reporting one).
    pub fn finish(mut self, markdown: Option<&Path>) -> Result<Vec<Row>> {
        if let Some(w) = &mut self.csv {
            if !self.wrote_header {
                w.write_record(CSV_HEADER.split(','))?;
            }
            w.flush()?;
        }
        if let (Some(path), true) = (markdown, self.enabled) {
            std::fs::write(path, render_markdown(&self.rows))?;
        }
        if !self.enabled {
            return Ok(Vec::new());
        }
        Ok(self.rows)
    }
}

fn pages_label(alloc: &str) -> &str {
    match alloc {
        "standard" => "memalign",
        other => other,
    }
}

/// Tables in the usual layout: halo and model rows pivot to one bandwidth
/// column per configuration (MB/s, sent plus received for halo), allreduce
/// rows list the timing breakdown per length.
pub fn render_markdown(rows: &[Row]) -> String {
    let mut out = String::new();
    let mut subcommands: Vec<&str> = Vec::new();
    for r in rows {
        if !subcommands.contains(&r.subcommand) {
            subcommands.push(r.subcommand);
        }
    }
    for sub in subcommands {
        let rows: Vec<&Row> = rows.iter().filter(|r| r.subcommand == sub).collect();
        if !out.is_empty() {
            out.push('\n');
        }
        if sub == "allreduce" {
            render_breakdown(&mut out, &rows);
        } else {
            render_pivot(&mut out, &rows);
        }
    }
    out
}

fn render_pivot(out: &mut String, rows: &[&Row]) {
    let mut configs: Vec<(&str, &str, usize)> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for r in rows {
        let key = (r.mode.as_str(), r.alloc.as_str(), r.channels);
        if !configs.contains(&key) {
            configs.push(key);
        }
        if !sizes.contains(&r.bytes) {
            sizes.push(r.bytes);
        }
    }
    let line = |cells: Vec<String>| format!("| {} |\n", cells.join(" | "));
    let mut header = vec!["Comms".to_string()];
    header.extend(configs.iter().map(|c| c.0.to_string()));
    out.push_str(&line(header));
    out.push_str(&line(vec!["---".to_string(); configs.len() + 1]));
    let mut pages = vec!["Pages".to_string()];
    pages.extend(configs.iter().map(|c| pages_label(c.1).to_string()));
    out.push_str(&line(pages));
    let mut channels = vec!["Channels".to_string()];
    channels.extend(configs.iter().map(|c| c.2.to_string()));
    out.push_str(&line(channels));
    for bytes in sizes {
        let mut cells = vec![bytes.to_string()];
        for c in &configs {
            let cell = rows
                .iter()
                .find(|r| r.bytes == bytes && (r.mode.as_str(), r.alloc.as_str(), r.channels) == *c)
                .map(|r| format!("{:.1}", r.bandwidth_mbps))
                .unwrap_or_default();
            cells.push(cell);
        }
        out.push_str(&line(cells));
    }
}

fn render_breakdown(out: &mut String, rows: &[&Row]) {
    out.push_str("| Length | Bytes | Pages | Channels | Comms (us) | Compute (us) | Total (us) | Comms % | MB/s |\n");
    out.push_str("| --- | --- | --- | --- | --- | --- | --- | --- | --- |\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.1} | {:.1} |\n",
            r.bytes / 4,
            r.bytes,
            pages_label(&r.alloc),
            r.channels,
            r.comms_us,
            r.compute_us,
            r.total_us,
            r.percent_comms(),
            r.bandwidth_mbps
        ));
    }
}

fn allocator_for(alloc: AllocChoice, modeled: bool) -> Allocator {
    // The modeled backend only needs the bytes; huge-page timing comes from
    // the layout, so no pool is required.
    let kind = match alloc {
        AllocChoice::Huge if !modeled => AllocKind::Huge,
        _ => AllocKind::Standard,
    };
    Allocator::new(kind, AllocConfig::from_env())
}

fn tcp_endpoint(run: &RunArgs) -> Result<Endpoint> {
    let (Some(path), Some(rank)) = (&run.hostfile, run.rank) else {
        return Err(BenchError::Config(
            "--transport tcp needs --hostfile and --rank".into(),
        ));
    };
    let hostfile = Hostfile::load(path)?;
    Ok(Endpoint::tcp(rank, &hostfile, TransportConfig::from_env())?)
}

fn local_world(transport: TransportKind, size: usize, setup: ModelSetup) -> Result<Vec<Endpoint>> {
    let config = TransportConfig::from_env();
    Ok(match transport {
        TransportKind::Modeled => Endpoint::modeled(size, setup, config)?,
        _ => Endpoint::in_proc(size, config)?,
    })
}

/// Run `body` once per rank of each world (one world per element of
/// `worlds`, all with the same size), one thread per rank, and return the
/// per-rank results in rank order.
fn run_ranks<T, F>(worlds: Vec<Vec<Endpoint>>, body: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Vec<Endpoint>) -> Result<T> + Sync,
{
    let size = worlds.first().map_or(0, Vec::len);
    let mut per_rank: Vec<Vec<Endpoint>> = (0..size).map(|_| Vec::new()).collect();
    for world in worlds {
        for (rank, ep) in world.into_iter().enumerate() {
            per_rank[rank].push(ep);
        }
    }
    let body = &body;
    let results: Vec<Result<T>> = std::thread::scope(|scope| {
        let handles: Vec<_> = per_rank
            .into_iter()
            .map(|eps| scope.spawn(move || body(eps)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// Sum `values` over all ranks of a single-process-per-rank world.
fn sum_over_ranks(endpoint: &Endpoint, values: &mut [f64]) -> Result<()> {
    let ring = RingAllreduce::with_allocator(Allocator::standard());
    ring.allreduce(endpoint, &[endpoint.channel().clone()], values)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<Vec<Row>> {
    match cli.command {
        Command::Halo(args) => run_halo(&args),
        Command::Allreduce(args) => run_allreduce(&args),
        Command::Model(args) => run_model(&args),
        Command::Hugepool(args) => {
            let report = hugepool(args.pages, args.execute)?;
            println!("{}", report.command);
            if let Some(listing) = report.listing {
                print!("{listing}");
            }
            Ok(Vec::new())
        }
    }
}

fn halo_sizes(args: &HaloArgs) -> Result<Vec<(HaloPlan, usize)>> {
    if !args.sizes.is_empty() {
        return args
            .sizes
            .iter()
            .map(|&bytes| {
                if bytes == 0 {
                    return Err(BenchError::Config("packet sizes must be positive".into()));
                }
                let plan = HaloPlan {
                    local_extent: 1,
                    bytes_per_site: bytes,
                    mode: ExchangeMode::Sequential,
                    iterations: args.run.iters,
                };
                Ok((plan, bytes))
            })
            .collect();
    }
    args.local_extent
        .iter()
        .map(|&l| {
            let mut plan = HaloPlan::new(l, ExchangeMode::Sequential)?;
            plan.iterations = args.run.iters;
            Ok((plan, plan.packet_bytes()))
        })
        .collect()
}

fn exchange_mode(mode: ModeChoice, comms_threads: usize) -> ExchangeMode {
    match mode {
        ModeChoice::Seq => ExchangeMode::Sequential,
        ModeChoice::Concurrent => ExchangeMode::Concurrent,
        ModeChoice::Threaded => ExchangeMode::Threaded(comms_threads),
    }
}

/// Halo buffers for one size: eight send faces then eight receive faces.
enum FaceStorage<'a> {
    Owned(Vec<BufferHandle>),
    Pairs(Vec<HwPair<'a>>),
}

impl FaceStorage<'_> {
    fn views(&mut self, bytes: usize) -> (Vec<&mut [u8]>, Vec<&mut [u8]>) {
        let mut send = Vec::with_capacity(halo::DIRECTIONS);
        let mut recv = Vec::with_capacity(halo::DIRECTIONS);
        match self {
            FaceStorage::Owned(handles) => {
                let (s, r) = handles.split_at_mut(halo::DIRECTIONS);
                send.extend(s.iter_mut().map(|h| &mut h.as_bytes_mut()[..bytes]));
                recv.extend(r.iter_mut().map(|h| &mut h.as_bytes_mut()[..bytes]));
            }
            FaceStorage::Pairs(pairs) => {
                for pair in pairs.iter_mut() {
                    let (s, r) = pair.split_mut();
                    send.push(&mut s.as_bytes_mut()[..bytes]);
                    recv.push(&mut r.as_bytes_mut()[..bytes]);
                }
            }
        }
        (send, recv)
    }
}

struct HaloRankState {
    allocator: Allocator,
    hw: Vec<HighWaterCache>,
    slots: SlotCache,
    choice: AllocChoice,
}

impl HaloRankState {
    fn new(choice: AllocChoice, modeled: bool) -> Self {
        let allocator = allocator_for(choice, modeled);
        Self {
            hw: (0..halo::DIRECTIONS)
                .map(|_| HighWaterCache::new(allocator.clone(), 1))
                .collect(),
            slots: SlotCache::new(allocator.clone()),
            allocator,
            choice,
        }
    }

    fn faces(&self, bytes: usize) -> Result<FaceStorage<'_>> {
        let count = 2 * halo::DIRECTIONS;
        Ok(match self.choice {
            AllocChoice::Standard | AllocChoice::Huge => FaceStorage::Owned(
                (0..count)
                    .map(|_| self.allocator.allocate(bytes))
                    .collect::<std::result::Result<_, _>>()?,
            ),
            AllocChoice::SlotCache => FaceStorage::Owned(
                (0..count)
                    .map(|_| self.slots.alloc(bytes))
                    .collect::<std::result::Result<_, _>>()?,
            ),
            AllocChoice::HwCache => FaceStorage::Pairs(
                self.hw
                    .iter()
                    .map(|c| c.alloc(bytes))
                    .collect::<std::result::Result<_, _>>()?,
            ),
        })
    }

    fn release(&self, faces: FaceStorage<'_>) {
        if let (AllocChoice::SlotCache, FaceStorage::Owned(handles)) = (self.choice, faces) {
            for h in handles {
                self.slots.free(h);
            }
        }
    }
}

/// One rank's halo measurements for every size, in size order.
fn halo_rank(
    endpoints: &[Endpoint],
    sizes: &[(HaloPlan, usize)],
    dims: [usize; 4],
    mode: ExchangeMode,
    choice: AllocChoice,
    modeled: bool,
    warmup: usize,
) -> Result<Vec<Vec<ExchangeSample>>> {
    let state = HaloRankState::new(choice, modeled);
    let mut out = Vec::with_capacity(sizes.len());
    for (i, &(plan, bytes)) in sizes.iter().enumerate() {
        let endpoint = &endpoints[i.min(endpoints.len() - 1)];
        let cart = CartComm4D::for_size(dims, endpoint.size())?;
        let plan = HaloPlan { mode, ..plan };
        plan.validate()?;
        let channels: Vec<Channel> = match mode {
            ExchangeMode::Threaded(n) => endpoint.duplicate_channels(n)?,
            _ => vec![endpoint.channel().clone()],
        };
        let mut faces = state.faces(bytes)?;
        let rank = endpoint.rank();
        let mut samples = Vec::with_capacity(plan.iterations);
        {
            let (mut send, mut recv) = faces.views(bytes);
            for (d, buf) in Direction::ALL.into_iter().zip(send.iter_mut()) {
                halo::fill_pattern(rank, d, buf);
            }
            for iter in 0..warmup + plan.iterations {
                if iter + 1 == warmup + plan.iterations {
                    recv.iter_mut().for_each(|b| b.fill(0));
                }
                endpoint.barrier()?;
                let sample = halo::halo_exchange(&plan, &cart, endpoint, &channels, &send, &mut recv)?;
                if iter >= warmup {
                    samples.push(sample);
                }
            }
            halo::verify_exchange(&cart, rank, &recv).map_err(|e| {
                BenchError::Verification(format!("rank {rank}, {bytes}-byte packets: {e}"))
            })?;
            endpoint.barrier()?;
        }
        state.release(faces);
        out.push(samples);
    }
    Ok(out)
}

fn dims_of(args: &HaloArgs) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(args.dims.as_slice())
        .map_err(|_| BenchError::Config(format!("--dims needs 4 extents, got {:?}", args.dims)))
}

pub fn run_halo(args: &HaloArgs) -> Result<Vec<Row>> {
    let run = &args.run;
    if run.iters == 0 {
        return Err(BenchError::Config("--iters must be at least 1".into()));
    }
    let dims = dims_of(args)?;
    let cart = CartComm4D::new(dims)?;
    let sizes = halo_sizes(args)?;
    let comms_threads = args.comms_threads as usize;
    let tcp = match run.transport {
        TransportKind::Tcp => Some(tcp_endpoint(run)?),
        _ => None,
    };
    let leader = tcp.as_ref().is_none_or(|ep| ep.rank() == 0);
    let mut report = Report::new(run.csv.as_deref(), leader)?;
    let modeled = run.transport == TransportKind::Modeled;
    let source = if modeled { Source::Model } else { Source::Measured };

    for &choice in &args.alloc {
        for &mode_choice in &args.mode {
            let mode = exchange_mode(mode_choice, comms_threads);
            let per_size: Vec<Vec<ExchangeSample>> = match &tcp {
                Some(endpoint) => {
                    let samples = halo_rank(std::slice::from_ref(endpoint), &sizes, dims, mode, choice, false, run.warmup)?;
                    let mut merged = Vec::with_capacity(samples.len());
                    for s in samples {
                        let n = s.len() as f64;
                        let mut sums = [
                            s.iter().map(|x| x.seconds).sum::<f64>(),
                            s.iter().map(|x| x.bytes_sent as f64).sum::<f64>(),
                            s.iter().map(|x| x.bytes_received as f64).sum::<f64>(),
                            n,
                        ];
                        sum_over_ranks(endpoint, &mut sums)?;
                        merged.push(vec![ExchangeSample {
                            seconds: sums[0] / sums[3],
                            bytes_sent: (sums[1] / sums[3]).round() as u64,
                            bytes_received: (sums[2] / sums[3]).round() as u64,
                        }]);
                    }
                    merged
                }
                None => {
                    let setup = args.model.setup(choice)?;
                    let worlds = (0..sizes.len())
                        .map(|_| local_world(run.transport, cart.size(), setup))
                        .collect::<Result<Vec<_>>>()?;
                    let ranks = run_ranks(worlds, |eps| {
                        halo_rank(&eps, &sizes, dims, mode, choice, modeled, run.warmup)
                    })?;
                    (0..sizes.len())
                        .map(|i| ranks.iter().flat_map(|r| r[i].iter().copied()).collect())
                        .collect()
                }
            };
            for ((_, bytes), samples) in sizes.iter().zip(per_size) {
                let stats = halo::exchange_stats(&samples)?;
                let us = stats.wall_seconds * 1e6;
                report.push(Row {
                    source,
                    subcommand: "halo",
                    bytes: *bytes,
                    mode: mode.label().to_string(),
                    alloc: choice.label().to_string(),
                    channels: mode.channels(),
                    iters: run.iters,
                    comms_us: us,
                    compute_us: 0.0,
                    total_us: us,
                    bandwidth_mbps: stats.bandwidth_mbps,
                })?;
            }
        }
    }
    report.finish(run.markdown.as_deref())
}

/// Value rank `rank` contributes at index `i`; small integers keep every
/// partial sum exact in f32 so any summation order verifies.
pub fn allreduce_input(rank: usize, i: usize) -> f32 {
    ((rank * 7 + i) % 13) as f32
}

pub fn allreduce_expected(size: usize, i: usize) -> f32 {
    (0..size).map(|r| allreduce_input(r, i)).sum()
}

/// Mean (comms, compute, total) seconds per call for each length.
fn allreduce_rank(
    endpoint: &Endpoint,
    ring: &RingAllreduce,
    channels: &[Channel],
    lengths: &[usize],
    warmup: usize,
    iters: usize,
) -> Result<Vec<[f64; 3]>> {
    let rank = endpoint.rank();
    let size = endpoint.size();
    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let expected: Vec<f32> = (0..len).map(|i| allreduce_expected(size, i)).collect();
        let mut data = vec![0f32; len];
        let mut sums = [0.0; 3];
        for iter in 0..warmup + iters {
            data.iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = allreduce_input(rank, i));
            let stats = ring.allreduce(endpoint, channels, &mut data)?;
            if let Some(i) = data.iter().zip(&expected).position(|(a, b)| a != b) {
                return Err(BenchError::Verification(format!(
                    "rank {rank}, length {len}: element {i} is {} but the serial sum is {}",
                    data[i], expected[i]
                )));
            }
            if iter >= warmup {
                sums[0] += stats.comms_seconds;
                sums[1] += stats.compute_seconds;
                sums[2] += stats.total_seconds;
            }
        }
        out.push(sums.map(|s| s / iters as f64));
    }
    Ok(out)
}

fn ring_for(choice: AllocChoice, modeled: bool, lanes: usize) -> RingAllreduce {
    let allocator = allocator_for(choice, modeled);
    let scratch = match choice {
        AllocChoice::Standard | AllocChoice::Huge => Scratch::Fresh(allocator),
        AllocChoice::HwCache => Scratch::high_water(allocator),
        AllocChoice::SlotCache => Scratch::Slots(SlotCache::new(allocator)),
    };
    RingAllreduce::new(scratch, lanes)
}

pub fn run_allreduce(args: &AllreduceArgs) -> Result<Vec<Row>> {
    let run = &args.run;
    if run.iters == 0 {
        return Err(BenchError::Config("--iters must be at least 1".into()));
    }
    if args.ranks == 0 {
        return Err(BenchError::Config("--ranks must be at least 1".into()));
    }
    let tcp = match run.transport {
        TransportKind::Tcp => Some(tcp_endpoint(run)?),
        _ => None,
    };
    let leader = tcp.as_ref().is_none_or(|ep| ep.rank() == 0);
    let mut report = Report::new(run.csv.as_deref(), leader)?;
    let modeled = run.transport == TransportKind::Modeled;
    let source = if modeled { Source::Model } else { Source::Measured };

    for &choice in &args.alloc {
        for &threads in &args.comms_threads {
            let threads = threads as usize;
            let means: Vec<[f64; 3]> = match &tcp {
                Some(endpoint) => {
                    let channels = endpoint.duplicate_channels(threads)?;
                    let ring = ring_for(choice, false, args.lanes);
                    let local = allreduce_rank(endpoint, &ring, &channels, &args.lengths, run.warmup, run.iters)?;
                    let mut flat: Vec<f64> = local.iter().flatten().copied().collect();
                    sum_over_ranks(endpoint, &mut flat)?;
                    let n = endpoint.size() as f64;
                    flat.chunks(3).map(|c| [c[0] / n, c[1] / n, c[2] / n]).collect()
                }
                None => {
                    let world = local_world(run.transport, args.ranks, args.model.setup(choice)?)?;
                    let per_rank = run_ranks(vec![world], |eps| {
                        let endpoint = &eps[0];
                        let channels = endpoint.duplicate_channels(threads)?;
                        let ring = ring_for(choice, modeled, args.lanes);
                        allreduce_rank(endpoint, &ring, &channels, &args.lengths, run.warmup, run.iters)
                    })?;
                    let n = per_rank.len() as f64;
                    (0..args.lengths.len())
                        .map(|i| {
                            let mut m = [0.0; 3];
                            for r in &per_rank {
                                for k in 0..3 {
                                    m[k] += r[i][k] / n;
                                }
                            }
                            m
                        })
                        .collect()
                }
            };
            for (&len, m) in args.lengths.iter().zip(means) {
                let bytes = len * std::mem::size_of::<f32>();
                report.push(Row {
                    source,
                    subcommand: "allreduce",
                    bytes,
                    mode: "Ring".to_string(),
                    alloc: choice.label().to_string(),
                    channels: threads,
                    iters: run.iters,
                    comms_us: m[0] * 1e6,
                    compute_us: m[1] * 1e6,
                    total_us: m[2] * 1e6,
                    bandwidth_mbps: if m[2] > 0.0 { bytes as f64 / m[2] / 1e6 } else { 0.0 },
                })?;
            }
        }
    }
    report.finish(run.markdown.as_deref())
}

pub fn run_model(args: &ModelArgs) -> Result<Vec<Row>> {
    let sizes = if args.sizes.is_empty() {
        args.local_extent
            .iter()
            .map(|&l| halo::packet_bytes(l, halo::BYTES_PER_SITE))
            .collect()
    } else {
        args.sizes.clone()
    };
    let layouts = match args.model.page_bytes {
        Some(_) => vec![args.model.layout_for(AllocChoice::Standard)?],
        None => vec![args.model.small_pages()?, PageLayout::huge()],
    };
    let config = SweepConfig {
        sizes,
        layouts,
        capacities: vec![args.model.cache_regions],
        params: args.model.params()?,
        buffers: args.buffers,
        warmup: args.warmup,
        iters: args.iters,
    };
    let mut report = Report::new(args.csv.as_deref(), true)?;
    for row in perfmodel::model_sweep(&config)? {
        let us = row.seconds * 1e6;
        report.push(Row {
            source: Source::Model,
            subcommand: "model",
            bytes: row.bytes,
            mode: "Transfer".to_string(),
            alloc: row.layout.label(),
            channels: 1,
            iters: args.iters,
            comms_us: us,
            compute_us: 0.0,
            total_us: us,
            bandwidth_mbps: row.bandwidth / 1e6,
        })?;
    }
    report.finish(args.markdown.as_deref())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HugepoolReport {
    /// The resize command, printed on dry runs.
    pub command: String,
    /// Pool listing after an executed resize.
    pub listing: Option<String>,
}

/// Validate a pool size of `pages` 2 MiB pages and print or run the
/// resize. Needs the privileges of the caller; never acquires any.
pub fn hugepool(pages: i64, execute: bool) -> Result<HugepoolReport> {
    if !(0..=MAX_HUGEPOOL_PAGES).contains(&pages) {
        return Err(BenchError::PagesOutOfRange(pages));
    }
    let arg = format!("--pool-pages-min=2M:{pages}");
    let command = format!("{HUGEADM} {arg}");
    if !execute {
        return Ok(HugepoolReport {
            command,
            listing: None,
        });
    }
    run_utility(&[arg.as_str()])?;
    let listing = run_utility(&["--pool-list"])?;
    Ok(HugepoolReport {
        command,
        listing: Some(listing),
    })
}

fn run_utility(args: &[&str]) -> Result<String> {
    let output = match Process::new(HUGEADM).args(args).output() {
        Ok(o) => o,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(BenchError::MissingUtility(HUGEADM))
        }
        Err(e) => return Err(e.into()),
    };
    let command = format!("{HUGEADM} {}", args.join(" "));
    if !output.status.success() {
        return Err(BenchError::Utility {
            command,
            detail: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

/// Parse arguments, run, print the markdown table and return the exit code.
pub fn main_with_args<I, T>(args: I) -> std::process::ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                std::process::ExitCode::from(2)
            } else {
                std::process::ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(rows) => {
            if !rows.is_empty() {
                let mut stdout = std::io::stdout().lock();
                let _ = stdout.write_all(render_markdown(&rows).as_bytes());
            }
            std::process::ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
