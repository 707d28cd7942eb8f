//! Communication buffer allocation.
//!
//! Three backings are available: explicit 2 MiB huge pages mapped
//! anonymously, huge pages backed by a file on a hugetlbfs mount (so other
//! processes on the node can map the same segment), and ordinary
//! 2 MiB-aligned heap memory. Huge-page requests never fall back to
//! ordinary memory on failure; the caller gets
//! [`AllocError::HugePageUnavailable`] and decides.
//!
//! On top of the raw allocators sit two caches: [`HighWaterCache`], which
//! keeps a pair of buffers and only reallocates when a longer length is
//! requested, and [`SlotCache`], which parks up to ten freed buffers and
//! hands them back to same-sized requests.

use std::alloc::Layout;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::ptr::NonNull;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use bytemuck::Pod;
use thiserror::Error;

pub const TWO_MB: usize = 2 * 1024 * 1024;
pub const SMALL_PAGE_BYTES: usize = 4096;
/// Alignment of ordinary communication buffers.
pub const COMM_BUF_ALIGN: usize = TWO_MB;
pub const DEFAULT_MAX_SHM_BYTES: usize = 1 << 30;
pub const DEFAULT_HUGE_PATH: &str = "/var/lib/hugetlbfs/group/wheel/pagesize-2MB";
pub const HUGE_PATH_ENV: &str = "RINGBENCH_HUGE_PATH";
pub const SLOT_COUNT: usize = 10;

static NEXT_BUFFER_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("huge pages unavailable for {bytes} bytes: {reason}")]
    HugePageUnavailable { bytes: usize, reason: String },
    #[error("request of {bytes} bytes exceeds the shared-segment cap of {cap} bytes")]
    ExceedsCap { bytes: usize, cap: usize },
    #[error("out of memory allocating {bytes} bytes")]
    OutOfMemory { bytes: usize },
}

pub type Result<T> = std::result::Result<T, AllocError>;

/// How byte counts are rounded up to whole 2 MiB regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoundingMode {
    /// Smallest multiple of 2 MiB that holds at least one byte.
    #[default]
    Strict,
    /// `(bytes + 2MiB) & !(2MiB - 1)`: always adds a region before masking,
    /// so already-aligned sizes gain one extra region.
    AddMask,
}

pub fn round_up_region(bytes: usize, mode: RoundingMode) -> usize {
    match mode {
        RoundingMode::Strict => bytes.max(1).div_ceil(TWO_MB) * TWO_MB,
        RoundingMode::AddMask => (bytes + TWO_MB) & !(TWO_MB - 1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backing {
    HugeAnonymous,
    HugeFileBacked,
    StandardAligned,
}

impl Backing {
    pub fn page_bytes(self) -> usize {
        match self {
            Backing::HugeAnonymous | Backing::HugeFileBacked => TWO_MB,
            Backing::StandardAligned => SMALL_PAGE_BYTES,
        }
    }

    pub fn is_huge(self) -> bool {
        !matches!(self, Backing::StandardAligned)
    }
}

/// Counts fresh mappings and true releases for one allocator.
#[derive(Debug, Default)]
pub struct AllocStats {
    allocations: AtomicU64,
    releases: AtomicU64,
}

impl AllocStats {
    pub fn allocations(&self) -> u64 {
        self.allocations.load(Ordering::SeqCst)
    }

    pub fn releases(&self) -> u64 {
        self.releases.load(Ordering::SeqCst)
    }

    /// Mappings created and not yet released.
    pub fn live(&self) -> u64 {
        self.allocations() - self.releases()
    }
}

/// An owned communication buffer. Dropping the handle releases the mapping.
#[derive(Debug)]
pub struct BufferHandle {
    id: u64,
    requested_bytes: usize,
    mapped_bytes: usize,
    backing: Backing,
    alignment: usize,
    ptr: NonNull<u8>,
    file: Option<PathBuf>,
    stats: Option<Arc<AllocStats>>,
}

// SAFETY: the handle exclusively owns its mapping; shared access only hands
// out `&[u8]` and mutation requires `&mut self`.
unsafe impl Send for BufferHandle {}
unsafe impl Sync for BufferHandle {}

impl BufferHandle {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn requested_bytes(&self) -> usize {
        self.requested_bytes
    }

    pub fn mapped_bytes(&self) -> usize {
        self.mapped_bytes
    }

    pub fn backing(&self) -> Backing {
        self.backing
    }

    pub fn alignment(&self) -> usize {
        self.alignment
    }

    /// Path of the hugetlbfs file behind a shared segment.
    pub fn segment_path(&self) -> Option<&Path> {
        self.file.as_deref()
    }

    pub fn as_ptr(&self) -> *const u8 {
        self.ptr.as_ptr()
    }

    pub fn as_bytes(&self) -> &[u8] {
        // SAFETY: ptr is valid for mapped_bytes >= requested_bytes bytes and
        // initialized (zeroed at allocation).
        unsafe { std::slice::from_raw_parts(self.ptr.as_ptr(), self.requested_bytes) }
    }

    pub fn as_bytes_mut(&mut self) -> &mut [u8] {
        // SAFETY: as above, and `&mut self` guarantees exclusivity.
        unsafe { std::slice::from_raw_parts_mut(self.ptr.as_ptr(), self.requested_bytes) }
    }

    /// The first `len` elements of the buffer viewed as `T`.
    ///
    /// Panics if `len` elements do not fit in the requested size.
    pub fn typed<T: Pod>(&self, len: usize) -> &[T] {
        let bytes = len * std::mem::size_of::<T>();
        bytemuck::cast_slice(&self.as_bytes()[..bytes])
    }

    pub fn typed_mut<T: Pod>(&mut self, len: usize) -> &mut [T] {
        let bytes = len * std::mem::size_of::<T>();
        bytemuck::cast_slice_mut(&mut self.as_bytes_mut()[..bytes])
    }
}

impl AsRef<[u8]> for BufferHandle {
    fn as_ref(&self) -> &[u8] {
        self.as_bytes()
    }
}

impl AsMut<[u8]> for BufferHandle {
    fn as_mut(&mut self) -> &mut [u8] {
        self.as_bytes_mut()
    }
}

impl Drop for BufferHandle {
    fn drop(&mut self) {
        match self.backing {
            Backing::StandardAligned => {
                let layout = Layout::from_size_align(self.mapped_bytes, self.alignment)
                    .expect("layout was valid at allocation");
                // SAFETY: allocated with exactly this layout in alloc_standard.
                unsafe { std::alloc::dealloc(self.ptr.as_ptr(), layout) };
            }
            Backing::HugeAnonymous | Backing::HugeFileBacked => {
                #[cfg(target_os = "linux")]
                // SAFETY: the region was returned by mmap with this length.
                unsafe {
                    libc::munmap(self.ptr.as_ptr().cast(), self.mapped_bytes);
                }
            }
        }
        if let Some(path) = self.file.take() {
            let _ = std::fs::remove_file(path);
        }
        if let Some(stats) = &self.stats {
            stats.releases.fetch_add(1, Ordering::SeqCst);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocConfig {
    pub rounding: RoundingMode,
    /// Directory on a hugetlbfs mount for shared segments.
    pub huge_path: PathBuf,
    pub max_shm_bytes: usize,
}

impl Default for AllocConfig {
    fn default() -> Self {
        Self {
            rounding: RoundingMode::Strict,
            huge_path: PathBuf::from(DEFAULT_HUGE_PATH),
            max_shm_bytes: DEFAULT_MAX_SHM_BYTES,
        }
    }
}

impl AllocConfig {
    /// Defaults, with the shared-segment directory taken from
    /// `RINGBENCH_HUGE_PATH` when set.
    pub fn from_env() -> Self {
        let mut config = Self::default();
        if let Some(path) = std::env::var_os(HUGE_PATH_ENV) {
            config.huge_path = PathBuf::from(path);
        }
        config
    }
}

fn next_id() -> u64 {
    NEXT_BUFFER_ID.fetch_add(1, Ordering::Relaxed)
}

/// 2 MiB-aligned ordinary allocation, zero-filled.
pub fn alloc_standard(bytes: usize) -> Result<BufferHandle> {
    if bytes == 0 {
        return Err(AllocError::InvalidArgument("zero-length buffer"));
    }
    let mapped = bytes.div_ceil(SMALL_PAGE_BYTES) * SMALL_PAGE_BYTES;
    let layout = Layout::from_size_align(mapped, COMM_BUF_ALIGN)
        .map_err(|_| AllocError::OutOfMemory { bytes })?;
    // SAFETY: layout has non-zero size.
    let raw = unsafe { std::alloc::alloc_zeroed(layout) };
    let ptr = NonNull::new(raw).ok_or(AllocError::OutOfMemory { bytes })?;
    Ok(BufferHandle {
        id: next_id(),
        requested_bytes: bytes,
        mapped_bytes: mapped,
        backing: Backing::StandardAligned,
        alignment: COMM_BUF_ALIGN,
        ptr,
        file: None,
        stats: None,
    })
}

/// Buffer backed by explicit 2 MiB pages.
///
/// With `shared` the mapping is a file under `config.huge_path`, created
/// mode 0666 and mapped populated, so other processes on the node can open
/// it by [`BufferHandle::segment_path`]. Fresh mappings are zeroed.
pub fn alloc_huge(bytes: usize, shared: bool, config: &AllocConfig) -> Result<BufferHandle> {
    if bytes == 0 {
        return Err(AllocError::InvalidArgument("zero-length buffer"));
    }
    let mapped = round_up_region(bytes, config.rounding);
    if mapped > config.max_shm_bytes {
        return Err(AllocError::ExceedsCap {
            bytes: mapped,
            cap: config.max_shm_bytes,
        });
    }
    let id = next_id();
    let (ptr, file) = if shared {
        map_huge_file(bytes, mapped, id, &config.huge_path)?
    } else {
        (map_huge_anonymous(bytes, mapped)?, None)
    };
    // First touch.
    // SAFETY: ptr is a fresh writable mapping of `mapped` bytes.
    unsafe { std::ptr::write_bytes(ptr.as_ptr(), 0, mapped) };
    Ok(BufferHandle {
        id,
        requested_bytes: bytes,
        mapped_bytes: mapped,
        backing: if shared {
            Backing::HugeFileBacked
        } else {
            Backing::HugeAnonymous
        },
        alignment: TWO_MB,
        ptr,
        file,
        stats: None,
    })
}

#[cfg(target_os = "linux")]
fn mmap_failed(bytes: usize) -> AllocError {
    AllocError::HugePageUnavailable {
        bytes,
        reason: std::io::Error::last_os_error().to_string(),
    }
}

#[cfg(target_os = "linux")]
fn map_huge_anonymous(bytes: usize, mapped: usize) -> Result<NonNull<u8>> {
    let flags = libc::MAP_SHARED | libc::MAP_ANONYMOUS | libc::MAP_HUGETLB;
    // SAFETY: anonymous mapping with no address hint.
    let raw = unsafe {
        libc::mmap(
            std::ptr::null_mut(),
            mapped,
            libc::PROT_READ | libc::PROT_WRITE,
            flags,
            -1,
            0,
        )
    };
    if raw == libc::MAP_FAILED {
        return Err(mmap_failed(bytes));
    }
    Ok(NonNull::new(raw.cast()).expect("mmap returned null without MAP_FAILED"))
}

#[cfg(target_os = "linux")]
fn map_huge_file(
    bytes: usize,
    mapped: usize,
    id: u64,
    dir: &Path,
) -> Result<(NonNull<u8>, Option<PathBuf>)> {
    use std::os::unix::fs::OpenOptionsExt;
    use std::os::unix::io::AsRawFd;

    let path = dir.join(format!("ringbench_shm_{}_{}", std::process::id(), id));
    let unavailable = |e: std::io::Error| AllocError::HugePageUnavailable {
        bytes,
        reason: format!("{}: {e}", path.display()),
    };
    let file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(false)
        .mode(0o666)
        .open(&path)
        .map_err(unavailable)?;
    if let Err(e) = file.set_len(mapped as u64) {
        let _ = std::fs::remove_file(&path);
        return Err(unavailable(e));
    }
    let flags = libc::MAP_SHARED | libc::MAP_POPULATE | libc::MAP_HUGETLB;
    // SAFETY: fd is open read-write and sized to `mapped`.
    let raw = unsafe {
        libc::mmap(
            std::ptr::null_mut(),
            mapped,
            libc::PROT_READ | libc::PROT_WRITE,
            flags,
            file.as_raw_fd(),
            0,
        )
    };
    if raw == libc::MAP_FAILED {
        let err = mmap_failed(bytes);
        let _ = std::fs::remove_file(&path);
        return Err(err);
    }
    let ptr = NonNull::new(raw.cast()).expect("mmap returned null without MAP_FAILED");
    Ok((ptr, Some(path)))
}

#[cfg(not(target_os = "linux"))]
fn map_huge_anonymous(bytes: usize, _mapped: usize) -> Result<NonNull<u8>> {
    Err(AllocError::HugePageUnavailable {
        bytes,
        reason: "explicit huge pages are only supported on Linux".into(),
    })
}

#[cfg(not(target_os = "linux"))]
fn map_huge_file(
    bytes: usize,
    _mapped: usize,
    _id: u64,
    _dir: &Path,
) -> Result<(NonNull<u8>, Option<PathBuf>)> {
    Err(AllocError::HugePageUnavailable {
        bytes,
        reason: "explicit huge pages are only supported on Linux".into(),
    })
}

/// Total and free 2 MiB pages in the system pool, from `/proc/meminfo`.
pub fn huge_pool_pages() -> Option<(u64, u64)> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let field = |name: &str| {
        info.lines()
            .find(|l| l.starts_with(name))
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|v| v.parse::<u64>().ok())
    };
    Some((field("HugePages_Total:")?, field("HugePages_Free:")?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocKind {
    Standard,
    Huge,
    HugeShared,
}

/// A raw allocator of one backing kind that counts what it hands out.
#[derive(Debug, Clone)]
pub struct Allocator {
    kind: AllocKind,
    config: AllocConfig,
    stats: Arc<AllocStats>,
}

impl Allocator {
    pub fn new(kind: AllocKind, config: AllocConfig) -> Self {
        Self {
            kind,
            config,
            stats: Arc::new(AllocStats::default()),
        }
    }

    pub fn standard() -> Self {
        Self::new(AllocKind::Standard, AllocConfig::default())
    }

    pub fn kind(&self) -> AllocKind {
        self.kind
    }

    pub fn config(&self) -> &AllocConfig {
        &self.config
    }

    pub fn stats(&self) -> &Arc<AllocStats> {
        &self.stats
    }

    pub fn allocate(&self, bytes: usize) -> Result<BufferHandle> {
        let mut handle = match self.kind {
            AllocKind::Standard => alloc_standard(bytes)?,
            AllocKind::Huge => alloc_huge(bytes, false, &self.config)?,
            AllocKind::HugeShared => alloc_huge(bytes, true, &self.config)?,
        };
        self.stats.allocations.fetch_add(1, Ordering::SeqCst);
        handle.stats = Some(Arc::clone(&self.stats));
        Ok(handle)
    }
}

#[derive(Debug, Default)]
struct HwState {
    buffer: Option<BufferHandle>,
    output: Option<BufferHandle>,
    allocated_length: usize,
}

/// A `buffer`/`output` pair that is only reallocated when a call needs a
/// longer length than any seen since the last [`HighWaterCache::dealloc`].
#[derive(Debug)]
pub struct HighWaterCache {
    allocator: Allocator,
    elem_bytes: usize,
    state: Mutex<HwState>,
}

impl HighWaterCache {
    pub fn new(allocator: Allocator, elem_bytes: usize) -> Self {
        assert!(elem_bytes > 0, "element size must be non-zero");
        Self {
            allocator,
            elem_bytes,
            state: Mutex::new(HwState::default()),
        }
    }

    pub fn allocator(&self) -> &Allocator {
        &self.allocator
    }

    pub fn elem_bytes(&self) -> usize {
        self.elem_bytes
    }

    pub fn allocated_length(&self) -> usize {
        self.lock().allocated_length
    }

    fn lock(&self) -> MutexGuard<'_, HwState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Borrow a pair with capacity for at least `length` elements. A zero
    /// length is treated as one.
    pub fn alloc(&self, length: usize) -> Result<HwPair<'_>> {
        let length = length.max(1);
        let mut state = self.lock();
        if length > state.allocated_length {
            state.buffer = None;
            state.output = None;
            state.allocated_length = 0;
            let bytes = length * self.elem_bytes;
            let buffer = self.allocator.allocate(bytes)?;
            let output = self.allocator.allocate(bytes)?;
            state.buffer = Some(buffer);
            state.output = Some(output);
            state.allocated_length = length;
        }
        Ok(HwPair { state })
    }

    /// Release both buffers. Idempotent.
    pub fn dealloc(&self) {
        let mut state = self.lock();
        state.buffer = None;
        state.output = None;
        state.allocated_length = 0;
    }
}

/// Exclusive access to the cached pair for the duration of one operation.
pub struct HwPair<'a> {
    state: MutexGuard<'a, HwState>,
}

impl HwPair<'_> {
    pub fn buffer(&self) -> &BufferHandle {
        self.state.buffer.as_ref().expect("pair is populated")
    }

    pub fn output(&self) -> &BufferHandle {
        self.state.output.as_ref().expect("pair is populated")
    }

    pub fn capacity(&self) -> usize {
        self.state.allocated_length
    }

    pub fn split_mut(&mut self) -> (&mut BufferHandle, &mut BufferHandle) {
        let state = &mut *self.state;
        (
            state.buffer.as_mut().expect("pair is populated"),
            state.output.as_mut().expect("pair is populated"),
        )
    }
}

#[derive(Debug)]
struct Slot {
    class: usize,
    handle: BufferHandle,
}

#[derive(Debug, Default)]
struct SlotState {
    slots: [Option<Slot>; SLOT_COUNT],
    victim: usize,
}

/// Ten-entry cache of freed buffers with round-robin eviction.
///
/// Requests are rounded to whole 2 MiB size classes and every buffer the
/// cache allocates is sized to its class, so a parked buffer can serve any
/// later request of the same class. Reused buffers keep their old contents.
#[derive(Debug)]
pub struct SlotCache {
    allocator: Allocator,
    state: Mutex<SlotState>,
}

impl SlotCache {
    pub fn new(allocator: Allocator) -> Self {
        Self {
            allocator,
            state: Mutex::new(SlotState::default()),
        }
    }

    pub fn allocator(&self) -> &Allocator {
        &self.allocator
    }

    fn lock(&self) -> MutexGuard<'_, SlotState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn alloc(&self, bytes: usize) -> Result<BufferHandle> {
        if bytes == 0 {
            return Err(AllocError::InvalidArgument("zero-length buffer"));
        }
        let class = round_up_region(bytes, RoundingMode::Strict);
        {
            let mut state = self.lock();
            let hit = state
                .slots
                .iter_mut()
                .find(|s| s.as_ref().is_some_and(|s| s.class == class));
            if let Some(slot) = hit {
                return Ok(slot.take().expect("matched a full slot").handle);
            }
        }
        self.allocator.allocate(class)
    }

    /// Park `handle` for reuse. When all slots are full the round-robin
    /// victim is evicted and released.
    pub fn free(&self, handle: BufferHandle) {
        let class = round_up_region(handle.requested_bytes(), RoundingMode::Strict);
        let evicted = {
            let mut state = self.lock();
            let index = match state.slots.iter().position(Option::is_none) {
                Some(empty) => empty,
                None => {
                    let v = state.victim;
                    state.victim = (v + 1) % SLOT_COUNT;
                    v
                }
            };
            state.slots[index].replace(Slot { class, handle })
        };
        drop(evicted);
    }

    pub fn len(&self) -> usize {
        self.lock().slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn victim_cursor(&self) -> usize {
        self.lock().victim
    }

    pub fn cached_ids(&self) -> Vec<u64> {
        self.lock()
            .slots
            .iter()
            .flatten()
            .map(|s| s.handle.id())
            .collect()
    }

    /// Release every parked buffer.
    pub fn clear(&self) {
        let drained: Vec<_> = self.lock().slots.iter_mut().filter_map(Option::take).collect();
        drop(drained);
    }
}
