//! Ring allreduce with chunked multi-channel transfers and lane-parallel
//! local copy and reduce loops.
//!
//! Each rank's vector is cut into `P` contiguous chunks with
//! [`partition`](crate::partition::partition). During the scatter-reduce
//! phase rank `r` sends chunk `(r - s) mod P` to its right neighbour at step
//! `s` and folds the chunk `(r - s - 1) mod P` arriving from the left into
//! its own copy. After `P - 1` steps rank `r` owns the finished chunk
//! `(r + 1) mod P`; the allgather phase then circulates finished chunks
//! verbatim for another `P - 1` steps, so every rank ends with bitwise
//! identical output.

use std::fmt::Debug;
use std::ops::Add;
use std::time::Instant;

use bytemuck::Pod;
use thiserror::Error;

use crate::alloc::{AllocError, Allocator, BufferHandle, HighWaterCache, HwPair, SlotCache};
use crate::partition::{self, WorkSlice};
use crate::transport::{multi_channel_sendrecv, Channel, Endpoint, TransportError};

/// Below this many elements per lane the local loops run on the caller's
/// thread; spawning costs more than the work.
const MIN_ELEMS_PER_LANE: usize = 16 * 1024;

const PHASE_PREAMBLE: u64 = 0;
const PHASE_SCATTER: u64 = 1;
const PHASE_GATHER: u64 = 2;

#[derive(Debug, Error)]
pub enum CollectiveError {
    #[error("length mismatch: {expected} vs {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("rank {rank} holds {actual} elements of kind {actual_kind}, this rank holds {expected} of kind {expected_kind}")]
    RankMismatch {
        rank: usize,
        expected: usize,
        actual: usize,
        expected_kind: u8,
        actual_kind: u8,
    },
    #[error("at least one channel is required")]
    NoChannels,
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

pub type Result<T> = std::result::Result<T, CollectiveError>;

/// Element types the allreduce can sum.
pub trait Reducible: Pod + Send + Sync + Add<Output = Self> + PartialEq + Debug {
    /// Wire code exchanged in the preamble so ranks with different element
    /// types fail instead of reinterpreting each other's bytes.
    const KIND: u8;
}

impl Reducible for f32 {
    const KIND: u8 = 1;
}

impl Reducible for f64 {
    const KIND: u8 = 2;
}

impl Reducible for i64 {
    const KIND: u8 = 3;
}

impl Reducible for i32 {
    const KIND: u8 = 4;
}

fn effective_lanes(len: usize, lanes: usize) -> usize {
    lanes.clamp(1, (len / MIN_ELEMS_PER_LANE).max(1))
}

fn lane_zip<T, U, F>(dst: &mut [T], src: &[U], lanes: usize, f: F)
where
    T: Send,
    U: Sync,
    F: Fn(&mut [T], &[U]) + Sync,
{
    let lanes = effective_lanes(dst.len(), lanes);
    if lanes == 1 {
        f(dst, src);
        return;
    }
    let slices = partition::partition(dst.len(), lanes).expect("lanes >= 1");
    let parts = partition::split_mut(dst, &slices);
    let f = &f;
    std::thread::scope(|scope| {
        for (part, s) in parts.into_iter().zip(&slices) {
            let src = &src[s.range()];
            scope.spawn(move || f(part, src));
        }
    });
}

/// `dst[i] += src[i]`, split across `lanes` threads.
pub fn local_reduce<T: Reducible>(dst: &mut [T], src: &[T], lanes: usize) -> Result<()> {
    if dst.len() != src.len() {
        return Err(CollectiveError::LengthMismatch {
            expected: dst.len(),
            actual: src.len(),
        });
    }
    lane_zip(dst, src, lanes, |d, s| {
        for (d, &s) in d.iter_mut().zip(s) {
            *d = *d + s;
        }
    });
    Ok(())
}

/// `dst = src`, split across `lanes` threads.
pub fn local_copy<T: Pod + Send + Sync>(dst: &mut [T], src: &[T], lanes: usize) -> Result<()> {
    if dst.len() != src.len() {
        return Err(CollectiveError::LengthMismatch {
            expected: dst.len(),
            actual: src.len(),
        });
    }
    lane_zip(dst, src, lanes, |d, s| d.copy_from_slice(s));
    Ok(())
}

/// Where the allreduce gets its receive scratch and output buffers.
#[derive(Debug)]
pub enum Scratch {
    /// Allocate a new pair on every call.
    Fresh(Allocator),
    /// Keep the pair between calls, growing it only when needed.
    HighWater(HighWaterCache),
    /// Borrow both buffers from a ten-slot cache and hand them back after.
    Slots(SlotCache),
}

impl Scratch {
    pub fn high_water(allocator: Allocator) -> Self {
        Scratch::HighWater(HighWaterCache::new(allocator, 1))
    }

    pub fn allocator(&self) -> &Allocator {
        match self {
            Scratch::Fresh(a) => a,
            Scratch::HighWater(c) => c.allocator(),
            Scratch::Slots(c) => c.allocator(),
        }
    }

    fn acquire(&self, bytes: usize) -> Result<ScratchPair<'_>> {
        let bytes = bytes.max(1);
        Ok(match self {
            Scratch::Fresh(a) => ScratchPair::Owned(Some((a.allocate(bytes)?, a.allocate(bytes)?)), None),
            Scratch::HighWater(c) => ScratchPair::Cached(c.alloc(bytes)?),
            Scratch::Slots(c) => ScratchPair::Owned(Some((c.alloc(bytes)?, c.alloc(bytes)?)), Some(c)),
        })
    }
}

enum ScratchPair<'a> {
    Cached(HwPair<'a>),
    Owned(Option<(BufferHandle, BufferHandle)>, Option<&'a SlotCache>),
}

impl ScratchPair<'_> {
    fn split(&mut self) -> (&mut BufferHandle, &mut BufferHandle) {
        match self {
            ScratchPair::Cached(pair) => pair.split_mut(),
            ScratchPair::Owned(pair, _) => {
                let (a, b) = pair.as_mut().expect("pair is held until drop");
                (a, b)
            }
        }
    }
}

impl Drop for ScratchPair<'_> {
    fn drop(&mut self) {
        if let ScratchPair::Owned(pair, Some(cache)) = self {
            if let Some((a, b)) = pair.take() {
                cache.free(a);
                cache.free(b);
            }
        }
    }
}

/// Timing of one allreduce call on one rank.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RingStats {
    /// Time inside channel calls (modeled seconds on the modeled backend).
    pub comms_seconds: f64,
    /// Local copies, reductions and scratch acquisition.
    pub compute_seconds: f64,
    pub total_seconds: f64,
    /// Messages this rank sent, preamble included.
    pub messages: u64,
}

impl RingStats {
    pub fn percent_comms(&self) -> f64 {
        if self.total_seconds > 0.0 {
            100.0 * self.comms_seconds / self.total_seconds
        } else {
            0.0
        }
    }
}

/// Tag for `(phase, step, chunk)`; distinct per step so one channel can
/// carry the whole ring without ambiguity.
pub fn ring_tag(phase: u64, step: usize, chunk: usize) -> u64 {
    (phase << 48) | ((step as u64) << 32) | chunk as u64
}

/// Elements rank `rank` sends in one ring allreduce of `len` elements over
/// `size` ranks: every chunk except the two it never forwards.
pub fn ring_elements_sent(len: usize, size: usize, rank: usize) -> usize {
    if size <= 1 {
        return 0;
    }
    let chunks = partition::partition(len, size).expect("size >= 1");
    2 * len - chunks[(rank + 1) % size].length - chunks[(rank + 2) % size].length
}

/// Messages each rank sends in one call: the length preamble to every
/// other rank plus one per channel per ring step.
pub fn ring_messages(size: usize, channels: usize) -> u64 {
    if size <= 1 {
        return (size.saturating_sub(1)) as u64;
    }
    ((size - 1) + 2 * (size - 1) * channels) as u64
}

/// Serial replay of the ring's float accumulation order: chunk `c` starts
/// from rank `c`'s values and each following rank adds its own on the left.
pub fn ring_order_sum<T: Reducible>(inputs: &[Vec<T>]) -> Vec<T> {
    let p = inputs.len();
    assert!(p > 0, "at least one rank");
    let len = inputs[0].len();
    let mut out = inputs[0].clone();
    for (c, chunk) in partition::partition(len, p).unwrap().into_iter().enumerate() {
        for i in chunk.range() {
            let mut acc = inputs[c][i];
            for k in 1..p {
                acc = inputs[(c + k) % p][i] + acc;
            }
            out[i] = acc;
        }
    }
    out
}

/// Sum-allreduce over every rank of an endpoint.
#[derive(Debug)]
pub struct RingAllreduce {
    scratch: Scratch,
    lanes: usize,
}

impl RingAllreduce {
    /// `lanes` threads drive the local copy and reduce loops.
    pub fn new(scratch: Scratch, lanes: usize) -> Self {
        Self {
            scratch,
            lanes: lanes.max(1),
        }
    }

    /// High-water scratch from `allocator`.
    pub fn with_allocator(allocator: Allocator) -> Self {
        Self::new(Scratch::high_water(allocator), 1)
    }

    pub fn scratch(&self) -> &Scratch {
        &self.scratch
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    /// Replace `data` with the elementwise sum of every rank's `data`.
    /// Every rank must call with the same channels (by id), length and
    /// element type.
    pub fn allreduce<T: Reducible>(
        &self,
        endpoint: &Endpoint,
        channels: &[Channel],
        data: &mut [T],
    ) -> Result<RingStats> {
        if channels.is_empty() {
            return Err(CollectiveError::NoChannels);
        }
        let start = Instant::now();
        let virtual_start = endpoint.virtual_seconds();
        let messages_start = endpoint.traffic().messages();
        let mut comms = 0.0;
        let mut compute = 0.0;

        let t = Instant::now();
        preamble::<T>(endpoint, &channels[0], data.len())?;
        comms += t.elapsed().as_secs_f64();

        let size = endpoint.size();
        if size > 1 {
            let n = data.len();
            let t = Instant::now();
            let mut pair = self.scratch.acquire(std::mem::size_of_val(data))?;
            let (recv_buf, out_buf) = pair.split();
            let scratch = recv_buf.typed_mut::<T>(n);
            let output = out_buf.typed_mut::<T>(n);
            local_copy(output, data, self.lanes)?;
            compute += t.elapsed().as_secs_f64();

            let chunks = partition::partition(n, size).expect("size >= 1");
            let rank = endpoint.rank();
            let right = (rank + 1) % size;
            let left = (rank + size - 1) % size;

            for step in 0..size - 1 {
                let send_c = (rank + size - step) % size;
                let recv_c = (rank + 2 * size - step - 1) % size;
                let rs = chunks[recv_c];
                let t = Instant::now();
                multi_channel_sendrecv(
                    channels,
                    &output[chunks[send_c].range()],
                    right,
                    ring_tag(PHASE_SCATTER, step, send_c),
                    &mut scratch[rs.range()],
                    left,
                    ring_tag(PHASE_SCATTER, step, recv_c),
                )?;
                comms += t.elapsed().as_secs_f64();
                let t = Instant::now();
                local_reduce(&mut output[rs.range()], &scratch[rs.range()], self.lanes)?;
                compute += t.elapsed().as_secs_f64();
            }

            for step in 0..size - 1 {
                let send_c = (rank + size + 1 - step) % size;
                let recv_c = (rank + size - step) % size;
                let (send, recv) = disjoint(output, chunks[send_c], chunks[recv_c]);
                let t = Instant::now();
                multi_channel_sendrecv(
                    channels,
                    send,
                    right,
                    ring_tag(PHASE_GATHER, step, send_c),
                    recv,
                    left,
                    ring_tag(PHASE_GATHER, step, recv_c),
                )?;
                comms += t.elapsed().as_secs_f64();
            }

            let t = Instant::now();
            local_copy(data, output, self.lanes)?;
            drop(pair);
            compute += t.elapsed().as_secs_f64();
        }

        let messages = endpoint.traffic().messages() - messages_start;
        let mut total = start.elapsed().as_secs_f64();
        if let (Some(v0), Some(v1)) = (virtual_start, endpoint.virtual_seconds()) {
            comms = v1 - v0;
            total = comms + compute;
        }
        Ok(RingStats {
            comms_seconds: comms,
            compute_seconds: compute,
            total_seconds: total,
            messages,
        })
    }
}

/// Exchange `(length, kind)` with every rank so mismatched calls fail on
/// all ranks instead of corrupting or hanging the ring.
fn preamble<T: Reducible>(endpoint: &Endpoint, channel: &Channel, len: usize) -> Result<()> {
    let me = endpoint.rank();
    let tag = ring_tag(PHASE_PREAMBLE, 0, 0);
    let mine = [len as u64, T::KIND as u64];
    let others: Vec<usize> = (0..endpoint.size()).filter(|&r| r != me).collect();
    for &peer in &others {
        channel.send_control(peer, tag, &mine)?;
    }
    let mut mismatch = None;
    for &peer in &others {
        let mut theirs = [0u64; 2];
        channel.recv_into(peer, tag, &mut theirs)?;
        if theirs != mine && mismatch.is_none() {
            mismatch = Some(CollectiveError::RankMismatch {
                rank: peer,
                expected: len,
                actual: theirs[0] as usize,
                expected_kind: T::KIND,
                actual_kind: theirs[1] as u8,
            });
        }
    }
    mismatch.map_or(Ok(()), Err)
}

/// Shared view of chunk `a` and mutable view of chunk `b` of one buffer.
fn disjoint<T>(data: &mut [T], a: WorkSlice, b: WorkSlice) -> (&[T], &mut [T]) {
    debug_assert!(a.end() <= b.offset || b.end() <= a.offset);
    if a.offset < b.offset || (a.offset == b.offset && a.is_empty()) {
        let (head, tail) = data.split_at_mut(b.offset);
        (&head[a.range()], &mut tail[..b.length])
    } else {
        let (head, tail) = data.split_at_mut(a.offset);
        (&tail[..a.length], &mut head[b.range()])
    }
}
