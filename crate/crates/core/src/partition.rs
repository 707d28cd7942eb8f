//! Contiguous partitioning of a 1-D workload across lanes.
//!
//! Lane `me` of `units` receives either `nwork / units` or `nwork / units + 1`
//! elements. The shorter shares come first, so the slices tile `0..nwork`
//! in lane order with no gaps.

use std::ops::Range;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PartitionError {
    #[error("invalid argument: unit count must be at least 1")]
    ZeroUnits,
}

/// A contiguous `(offset, length)` share of a 1-D workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct WorkSlice {
    pub offset: usize,
    pub length: usize,
}

impl WorkSlice {
    pub const EMPTY: WorkSlice = WorkSlice {
        offset: 0,
        length: 0,
    };

    pub fn new(offset: usize, length: usize) -> Self {
        Self { offset, length }
    }

    pub fn end(&self) -> usize {
        self.offset + self.length
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.end()
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }
}

/// Share of `nwork` elements owned by lane `me` out of `units` lanes.
///
/// Lanes with `me >= units` get an empty slice at offset 0. The comparison
/// against the backfill point is strict: lane `me == backfill` is the first
/// long lane and needs no offset correction.
pub fn get_work(nwork: usize, me: usize, units: usize) -> Result<WorkSlice, PartitionError> {
    if units == 0 {
        return Err(PartitionError::ZeroUnits);
    }
    if me >= units {
        return Ok(WorkSlice::EMPTY);
    }
    let basework = nwork / units;
    let backfill = units - nwork % units;
    let length = (nwork + me) / units;
    let mut offset = basework * me;
    if me > backfill {
        offset += me - backfill;
    }
    Ok(WorkSlice { offset, length })
}

/// All `units` slices of `nwork`, in lane order.
pub fn partition(nwork: usize, units: usize) -> Result<Vec<WorkSlice>, PartitionError> {
    (0..units.max(1))
        .map(|me| get_work(nwork, me, units))
        .collect()
}

/// Split `data` into the mutable sub-slices described by a contiguous
/// partition of `data.len()`.
pub(crate) fn split_mut<'a, T>(data: &'a mut [T], slices: &[WorkSlice]) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(slices.len());
    let mut rest = data;
    let mut cursor = 0;
    for slice in slices {
        debug_assert_eq!(slice.offset, cursor);
        let (head, tail) = std::mem::take(&mut rest).split_at_mut(slice.length);
        out.push(head);
        rest = tail;
        cursor += slice.length;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn even_split() {
        assert_eq!(get_work(8, 2, 4).unwrap(), WorkSlice::new(4, 2));
    }

    #[test]
    fn uneven_split_after_backfill() {
        // basework 2, backfill 4 - 10 % 4 = 2, lane 3 > 2 gains one offset.
        assert_eq!(get_work(10, 3, 4).unwrap(), WorkSlice::new(7, 3));
    }

    #[test]
    fn lane_beyond_units_is_empty() {
        assert_eq!(get_work(10, 7, 4).unwrap(), WorkSlice::EMPTY);
    }

    #[test]
    fn empty_work() {
        assert_eq!(get_work(0, 0, 3).unwrap(), WorkSlice::EMPTY);
    }

    #[test]
    fn zero_units_rejected() {
        assert_eq!(get_work(5, 0, 0), Err(PartitionError::ZeroUnits));
        assert_eq!(partition(5, 0), Err(PartitionError::ZeroUnits));
    }

    #[test]
    fn partition_examples() {
        let p = partition(10, 4).unwrap();
        let pairs: Vec<_> = p.iter().map(|s| (s.offset, s.length)).collect();
        assert_eq!(pairs, vec![(0, 2), (2, 2), (4, 3), (7, 3)]);

        assert_eq!(partition(5, 1).unwrap(), vec![WorkSlice::new(0, 5)]);

        // nwork < units: backfill = 2, so lanes 0 and 1 are empty and lane 2
        // is the first long lane.
        let pairs: Vec<_> = partition(3, 5)
            .unwrap()
            .iter()
            .map(|s| (s.offset, s.length))
            .collect();
        assert_eq!(pairs, vec![(0, 0), (0, 0), (0, 1), (1, 1), (2, 1)]);
    }

    #[test]
    fn table_scale_counts() {
        let slices = partition(25_165_824, 8).unwrap();
        assert!(slices.iter().all(|s| s.length == 3_145_728));
        assert_eq!(slices[7].end(), 25_165_824);
    }

    #[test]
    fn split_mut_matches_partition() {
        let mut data: Vec<u32> = (0..10).collect();
        let slices = partition(10, 4).unwrap();
        let parts = split_mut(&mut data, &slices);
        assert_eq!(parts.len(), 4);
        assert_eq!(parts[2], &mut [4, 5, 6][..]);
        assert_eq!(parts[3], &mut [7, 8, 9][..]);
    }

    proptest! {
        #[test]
        fn tiles_exactly(nwork in 0usize..1_000_000, units in 1usize..=512) {
            let slices = partition(nwork, units).unwrap();
            prop_assert_eq!(slices.len(), units);
            prop_assert_eq!(slices[0].offset, 0);
            for w in slices.windows(2) {
                prop_assert_eq!(w[1].offset, w[0].end());
            }
            prop_assert_eq!(slices.iter().map(|s| s.length).sum::<usize>(), nwork);
            let base = nwork / units;
            for s in &slices {
                prop_assert!(s.length == base || s.length == base + 1);
            }
            prop_assert_eq!(partition(nwork, units).unwrap(), slices);
        }
    }
}
