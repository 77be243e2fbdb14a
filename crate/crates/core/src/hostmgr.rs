//! Host-side embedding store and the per-worker cache buffers.
//!
//! The [`HostStore`] is the authoritative table. Features are partitioned
//! across workers with [`shard_owner`]; under the cache strategy a worker's
//! working features are lent to its [`CacheBuffer`], updated there, and
//! returned when evicted. A lent feature lives in exactly one buffer and its
//! host copy must not be read until it comes back.
//!
//! A resident feature may be evicted only when it is
//!
//! 1. not pinned by a batch that is still training, and
//! 2. not needed by the batch being prepared or by any lookahead batch.
//!
//! Among eligible features the least recently used go first.

use std::collections::BTreeSet;

use fnv::{FnvHashMap, FnvHashSet};
use ndarray::Array2;
use rand::Rng;

use crate::comm::{param_state_bytes, plain_bytes, LedgerSnapshot};
use crate::error::{Error, Result};
use crate::ids::{FeatureId, SlotId};
use crate::rng;

/// Half-width of the uniform initialization range of new embeddings.
pub const INIT_RANGE: f64 = 0.01;

/// Worker responsible for feature `f` (modulo hashing).
#[inline]
pub fn shard_owner(f: FeatureId, workers: usize) -> usize {
    (f.get() % workers as u64) as usize
}

/// Embedding of one feature together with its Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub embedding: Vec<f64>,
    pub momentum: Vec<f64>,
    pub velocity: Vec<f64>,
    /// Number of optimizer steps this feature has received.
    pub steps: u64,
}

impl ParamState {
    /// First-touch state of `feature`: embedding uniform in
    /// `[-INIT_RANGE, INIT_RANGE]`, zero optimizer state. Depends only on
    /// the seed and the feature, never on touch order.
    pub fn init(seed: u64, feature: FeatureId, dim: usize) -> Self {
        let mut r = rng::stream(seed, "embedding", feature.get());
        Self {
            embedding: (0..dim)
                .map(|_| r.random_range(-INIT_RANGE..=INIT_RANGE))
                .collect(),
            momentum: vec![0.0; dim],
            velocity: vec![0.0; dim],
            steps: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct HostEntry {
    state: ParamState,
    lent_to: Option<usize>,
}

/// Where the authoritative copy of a feature currently is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Untouched,
    Host,
    Worker(usize),
}

/// The full embedding table. Entries are created lazily on first touch.
#[derive(Debug, Clone)]
pub struct HostStore {
    dim: usize,
    seed: u64,
    table: FnvHashMap<FeatureId, HostEntry>,
}

impl HostStore {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            table: FnvHashMap::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    fn entry(&mut self, f: FeatureId) -> &mut HostEntry {
        let (seed, dim) = (self.seed, self.dim);
        self.table.entry(f).or_insert_with(|| HostEntry {
            state: ParamState::init(seed, f, dim),
            lent_to: None,
        })
    }

    pub fn location(&self, f: FeatureId) -> Location {
        match self.table.get(&f) {
            None => Location::Untouched,
            Some(HostEntry { lent_to: None, .. }) => Location::Host,
            Some(HostEntry {
                lent_to: Some(w), ..
            }) => Location::Worker(*w),
        }
    }

    /// Mutable access to a feature held on the host.
    ///
    /// Panics if the feature is lent to a worker buffer.
    pub fn state_mut(&mut self, f: FeatureId) -> &mut ParamState {
        let e = self.entry(f);
        assert!(e.lent_to.is_none(), "feature {f} is lent to worker {:?}", e.lent_to);
        &mut e.state
    }

    /// A copy of a host-held feature, leaving the host copy authoritative.
    pub fn copy_of(&mut self, f: FeatureId) -> ParamState {
        self.state_mut(f).clone()
    }

    /// Hands the feature to `worker`'s buffer. The host copy goes stale
    /// until [`restore`](Self::restore).
    pub fn lend(&mut self, f: FeatureId, worker: usize) -> ParamState {
        let e = self.entry(f);
        assert!(e.lent_to.is_none(), "feature {f} already lent to worker {:?}", e.lent_to);
        e.lent_to = Some(worker);
        e.state.clone()
    }

    pub fn restore(&mut self, f: FeatureId, worker: usize, state: ParamState) {
        let e = self
            .table
            .get_mut(&f)
            .unwrap_or_else(|| panic!("restoring feature {f} that was never lent"));
        assert_eq!(e.lent_to, Some(worker), "feature {f} is not lent to worker {worker}");
        e.lent_to = None;
        e.state = state;
    }

    /// Host copy of a feature's embedding, if the host copy is authoritative.
    pub fn embedding(&self, f: FeatureId) -> Option<&[f64]> {
        self.table
            .get(&f)
            .filter(|e| e.lent_to.is_none())
            .map(|e| e.state.embedding.as_slice())
    }

    /// Host-held entries ordered by feature id.
    pub fn sorted_states(&self) -> Vec<(FeatureId, &ParamState)> {
        let mut v: Vec<_> = self
            .table
            .iter()
            .filter(|(_, e)| e.lent_to.is_none())
            .map(|(f, e)| (*f, &e.state))
            .collect();
        v.sort_unstable_by_key(|(f, _)| *f);
        v
    }

    pub fn lent_count(&self) -> usize {
        self.table.values().filter(|e| e.lent_to.is_some()).count()
    }
}

#[derive(Debug, Clone)]
struct Slot {
    feature: FeatureId,
    state: ParamState,
    pins: u32,
    needed_soon: bool,
    last_use: u64,
}

/// Fixed-capacity store of one worker's working parameters.
#[derive(Debug, Clone)]
pub struct CacheBuffer {
    worker: usize,
    slots: Vec<Option<Slot>>,
    index: FnvHashMap<FeatureId, SlotId>,
    free: BTreeSet<u32>,
    clock: u64,
}

/// Outcome of admission planning for one worker.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Admission {
    /// Owned features of the next batch that must be pushed to the buffer.
    pub working: Vec<FeatureId>,
    /// Resident features to pull back to the host to make room.
    pub noworking: Vec<FeatureId>,
}

/// Not enough evictable slots to admit the next batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shortfall {
    pub worker: usize,
    pub missing: usize,
}

impl CacheBuffer {
    pub fn new(worker: usize, capacity: usize) -> Self {
        Self {
            worker,
            slots: vec![None; capacity],
            index: FnvHashMap::default(),
            free: (0..capacity as u32).collect(),
            clock: 0,
        }
    }

    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn occupied(&self) -> usize {
        self.index.len()
    }

    pub fn free_slots(&self) -> usize {
        self.free.len()
    }

    pub fn is_resident(&self, f: FeatureId) -> bool {
        self.index.contains_key(&f)
    }

    pub fn slot_of(&self, f: FeatureId) -> Option<SlotId> {
        self.index.get(&f).copied()
    }

    /// Resident features in slot order; `None` for empty slots.
    pub fn slot_contents(&self) -> Vec<Option<FeatureId>> {
        self.slots
            .iter()
            .map(|s| s.as_ref().map(|s| s.feature))
            .collect()
    }

    pub fn resident(&self) -> impl Iterator<Item = FeatureId> + '_ {
        self.slots.iter().flatten().map(|s| s.feature)
    }

    fn slot(&self, f: FeatureId) -> Option<&Slot> {
        let id = self.index.get(&f)?;
        self.slots[id.index()].as_ref()
    }

    fn slot_mut(&mut self, f: FeatureId) -> Option<&mut Slot> {
        let id = *self.index.get(&f)?;
        self.slots[id.index()].as_mut()
    }

    pub fn embedding(&self, f: FeatureId) -> Option<&[f64]> {
        self.slot(f).map(|s| s.state.embedding.as_slice())
    }

    pub fn state_mut(&mut self, f: FeatureId) -> Option<&mut ParamState> {
        self.slot_mut(f).map(|s| &mut s.state)
    }

    pub fn is_pinned(&self, f: FeatureId) -> bool {
        self.slot(f).is_some_and(|s| s.pins > 0)
    }

    pub fn is_needed_soon(&self, f: FeatureId) -> bool {
        self.slot(f).is_some_and(|s| s.needed_soon)
    }

    pub fn pinned_count(&self) -> usize {
        self.slots.iter().flatten().filter(|s| s.pins > 0).count()
    }

    pub fn needed_soon_count(&self) -> usize {
        self.slots.iter().flatten().filter(|s| s.needed_soon).count()
    }

    /// Marks `f` as required by an in-flight batch.
    pub fn pin(&mut self, f: FeatureId) {
        let s = self.slot_mut(f).unwrap_or_else(|| panic!("pinning non-resident feature {f}"));
        s.pins += 1;
    }

    /// Releases one pin of `f`: the batch that needed it finished updating.
    pub fn unpin(&mut self, f: FeatureId) {
        let s = self.slot_mut(f).unwrap_or_else(|| panic!("unpinning non-resident feature {f}"));
        assert!(s.pins > 0, "unpinning feature {f} that is not pinned");
        s.pins -= 1;
    }

    /// Records a use of `f` for LRU ordering.
    pub fn touch(&mut self, f: FeatureId) {
        self.clock += 1;
        let clock = self.clock;
        if let Some(s) = self.slot_mut(f) {
            s.last_use = clock;
        }
    }

    /// Sets `needed_soon` on exactly the resident features in `soon`.
    pub fn mark_needed_soon(&mut self, soon: &FnvHashSet<FeatureId>) {
        for s in self.slots.iter_mut().flatten() {
            s.needed_soon = soon.contains(&s.feature);
        }
    }

    /// Decides which features to push and which to pull so that every
    /// feature of `next` fits.
    ///
    /// `next` are this worker's features of the batch being prepared;
    /// `in_flight` are features of batches that may still be training.
    /// Needed-soon flags must be current (see [`mark_needed_soon`]).
    ///
    /// [`mark_needed_soon`]: Self::mark_needed_soon
    pub fn plan(
        &self,
        next: &[FeatureId],
        in_flight: &FnvHashSet<FeatureId>,
    ) -> std::result::Result<Admission, Shortfall> {
        let working: Vec<FeatureId> = next.iter().copied().filter(|f| !self.is_resident(*f)).collect();
        let need = working.len().saturating_sub(self.free.len());
        let mut noworking = Vec::new();
        if need > 0 {
            let next_set: FnvHashSet<FeatureId> = next.iter().copied().collect();
            let mut eligible: Vec<(u64, FeatureId)> = self
                .slots
                .iter()
                .flatten()
                .filter(|s| {
                    s.pins == 0
                        && !s.needed_soon
                        && !in_flight.contains(&s.feature)
                        && !next_set.contains(&s.feature)
                })
                .map(|s| (s.last_use, s.feature))
                .collect();
            if eligible.len() < need {
                return Err(Shortfall {
                    worker: self.worker,
                    missing: need - eligible.len(),
                });
            }
            eligible.sort_unstable();
            noworking.extend(eligible[..need].iter().map(|(_, f)| *f));
        }
        Ok(Admission { working, noworking })
    }

    /// Places `state` into the lowest free slot.
    pub fn admit(&mut self, f: FeatureId, state: ParamState) -> Option<SlotId> {
        assert!(!self.is_resident(f), "feature {f} already resident");
        let slot = self.free.pop_first()?;
        self.clock += 1;
        self.slots[slot as usize] = Some(Slot {
            feature: f,
            state,
            pins: 0,
            needed_soon: true,
            last_use: self.clock,
        });
        self.index.insert(f, SlotId::new(slot));
        Some(SlotId::new(slot))
    }

    /// Removes `f` from the buffer.
    ///
    /// Panics if `f` is pinned or needed soon: evicting it would break an
    /// in-flight update or force an immediate re-fetch.
    pub fn evict(&mut self, f: FeatureId) -> ParamState {
        let id = self
            .index
            .remove(&f)
            .unwrap_or_else(|| panic!("evicting non-resident feature {f}"));
        let slot = self.slots[id.index()].take().expect("index points at an occupied slot");
        assert!(slot.pins == 0, "evicting pinned feature {f}");
        assert!(!slot.needed_soon, "evicting feature {f} that is needed soon");
        self.free.insert(id.get());
        slot.state
    }

    /// Empties the buffer regardless of flags. Used at the end of a run once
    /// nothing is in flight.
    pub fn drain(&mut self) -> Vec<(FeatureId, ParamState)> {
        self.index.clear();
        self.free = (0..self.slots.len() as u32).collect();
        self.slots
            .iter_mut()
            .filter_map(Option::take)
            .map(|s| {
                assert!(s.pins == 0, "draining pinned feature {}", s.feature);
                (s.feature, s.state)
            })
            .collect()
    }

    /// Checks that the slot array, the index and the free list agree.
    pub fn check_consistency(&self) {
        let mut seen = 0;
        for (i, s) in self.slots.iter().enumerate() {
            match s {
                Some(s) => {
                    seen += 1;
                    assert_eq!(self.index.get(&s.feature), Some(&SlotId::new(i as u32)));
                    assert!(!self.free.contains(&(i as u32)));
                }
                None => assert!(self.free.contains(&(i as u32))),
            }
        }
        assert_eq!(seen, self.index.len());
        assert_eq!(seen + self.free.len(), self.slots.len());
    }
}

/// Features of `batch` owned by `worker`, in batch order.
pub fn owned_by(batch: &[FeatureId], worker: usize, workers: usize) -> Vec<FeatureId> {
    batch
        .iter()
        .copied()
        .filter(|f| shard_owner(*f, workers) == worker)
        .collect()
}

/// Plans admission of `global_ids` into every worker's buffer.
///
/// `lookahead` holds the unique features of the next batches, `in_flight`
/// the features of batches still training. Each buffer's needed-soon flags
/// are refreshed from `global_ids` and `lookahead` first.
pub fn manager_get(
    buffers: &mut [CacheBuffer],
    global_ids: &[FeatureId],
    lookahead: &[&[FeatureId]],
    in_flight: &FnvHashSet<FeatureId>,
) -> std::result::Result<Vec<Admission>, Shortfall> {
    let workers = buffers.len();
    let soon: FnvHashSet<FeatureId> = global_ids
        .iter()
        .chain(lookahead.iter().flat_map(|b| b.iter()))
        .copied()
        .collect();
    buffers
        .iter_mut()
        .map(|buf| {
            buf.mark_needed_soon(&soon);
            let next = owned_by(global_ids, buf.worker(), workers);
            buf.plan(&next, in_flight)
        })
        .collect()
}

/// Copies `working` from the host into `buffer`, lending each feature.
pub fn push_parameters_to_cache(
    host: &mut HostStore,
    buffer: &mut CacheBuffer,
    working: &[FeatureId],
) -> Result<LedgerSnapshot> {
    if working.len() > buffer.free_slots() {
        return Err(Error::CapacityDeadlock {
            step: 0,
            worker: buffer.worker(),
            capacity: buffer.capacity(),
            occupied: buffer.occupied(),
            pinned: buffer.pinned_count(),
            needed_soon: buffer.needed_soon_count(),
            shortfall: working.len() - buffer.free_slots(),
        });
    }
    for &f in working {
        let state = host.lend(f, buffer.worker());
        buffer.admit(f, state).expect("free slot checked above");
    }
    Ok(LedgerSnapshot {
        host_to_worker_bytes: param_state_bytes(working.len() as u64, host.dim()),
        ..Default::default()
    })
}

/// Returns `noworking` from `buffer` to the host.
///
/// Panics if any of them is pinned or needed soon.
pub fn pull_parameters_to_host(
    host: &mut HostStore,
    buffer: &mut CacheBuffer,
    noworking: &[FeatureId],
) -> LedgerSnapshot {
    for &f in noworking {
        let state = buffer.evict(f);
        host.restore(f, buffer.worker(), state);
    }
    LedgerSnapshot {
        worker_to_host_bytes: param_state_bytes(noworking.len() as u64, host.dim()),
        swap_events: noworking.len() as u64,
        ..Default::default()
    }
}

/// Local common embedding of one worker read from its cache buffer: row `k`
/// is the embedding of `global_ids[k]` if this worker owns it, else zeros.
pub fn gather_cache(
    buffer: &CacheBuffer,
    global_ids: &[FeatureId],
    workers: usize,
    dim: usize,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((global_ids.len(), dim));
    for (k, &f) in global_ids.iter().enumerate() {
        if shard_owner(f, workers) != buffer.worker() {
            continue;
        }
        let e = buffer.embedding(f).ok_or(Error::NotResident {
            worker: buffer.worker(),
            feature: f.get(),
        })?;
        out.row_mut(k).assign(&ndarray::aview1(e));
    }
    Ok(out)
}

/// Local common embedding read straight from the host store (host strategy).
/// Charges the embedding rows, without optimizer state, as host-to-worker
/// traffic.
pub fn gather_host(
    host: &mut HostStore,
    worker: usize,
    global_ids: &[FeatureId],
    workers: usize,
) -> (Array2<f64>, LedgerSnapshot) {
    let dim = host.dim();
    let mut out = Array2::zeros((global_ids.len(), dim));
    let mut owned = 0u64;
    for (k, &f) in global_ids.iter().enumerate() {
        if shard_owner(f, workers) == worker {
            owned += 1;
            out.row_mut(k)
                .assign(&ndarray::aview1(&host.state_mut(f).embedding));
        }
    }
    let charge = LedgerSnapshot {
        host_to_worker_bytes: plain_bytes(owned * dim as u64),
        ..Default::default()
    };
    (out, charge)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u64]) -> Vec<FeatureId> {
        v.iter().copied().map(FeatureId::new).collect()
    }

    fn set(v: &[u64]) -> FnvHashSet<FeatureId> {
        ids(v).into_iter().collect()
    }

    #[test]
    fn shard_owner_is_modulo() {
        assert_eq!(shard_owner(FeatureId::new(6), 2), 0);
        assert_eq!(shard_owner(FeatureId::new(7), 2), 1);
        let mut cells = vec![Vec::new(); 4];
        for f in 0..1000 {
            cells[shard_owner(FeatureId::new(f), 4)].push(f);
        }
        let mut all: Vec<u64> = cells.concat();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert!(cells.iter().all(|c| c.len() == 250));
    }

    fn filled(capacity: usize, resident: &[u64], host: &mut HostStore) -> CacheBuffer {
        let mut buf = CacheBuffer::new(0, capacity);
        push_parameters_to_cache(host, &mut buf, &ids(resident)).unwrap();
        buf
    }

    #[test]
    fn twelve_slot_example() {
        let mut host = HostStore::new(4, 1);
        let mut bufs = vec![filled(12, &[1, 3, 2, 5, 4, 6, 12, 13, 14, 15, 9], &mut host)];
        for f in [3, 2, 5, 4] {
            bufs[0].pin(FeatureId::new(f));
        }
        let plan = manager_get(&mut bufs, &ids(&[6, 7, 8]), &[], &FnvHashSet::default()).unwrap();
        assert_eq!(plan[0].working, ids(&[7, 8]));
        assert_eq!(plan[0].noworking.len(), 1);
        assert_eq!(plan[0].noworking, ids(&[1]));

        let pulled = pull_parameters_to_host(&mut host, &mut bufs[0], &plan[0].noworking);
        assert_eq!(pulled.swap_events, 1);
        push_parameters_to_cache(&mut host, &mut bufs[0], &plan[0].working).unwrap();
        let contents: Vec<u64> = bufs[0].slot_contents().into_iter().map(|f| f.unwrap().get()).collect();
        assert_eq!(contents, vec![7, 3, 2, 5, 4, 6, 12, 13, 14, 15, 9, 8]);
        bufs[0].check_consistency();
    }

    #[test]
    fn in_flight_features_are_protected_like_pins() {
        let mut host = HostStore::new(2, 1);
        let mut bufs = vec![filled(3, &[1, 2, 3], &mut host)];
        let plan = manager_get(&mut bufs, &ids(&[4]), &[], &set(&[1, 2])).unwrap();
        assert_eq!(plan[0].noworking, ids(&[3]));
        let short = manager_get(&mut bufs, &ids(&[4, 5]), &[], &set(&[1, 2])).unwrap_err();
        assert_eq!(short, Shortfall { worker: 0, missing: 1 });
    }

    #[test]
    fn lookahead_features_are_not_evicted() {
        let mut host = HostStore::new(2, 1);
        let mut bufs = vec![filled(3, &[1, 2, 3], &mut host)];
        let ahead = ids(&[1]);
        let plan = manager_get(&mut bufs, &ids(&[4]), &[&ahead], &FnvHashSet::default()).unwrap();
        assert_eq!(plan[0].noworking, ids(&[2]));
        assert!(bufs[0].is_needed_soon(FeatureId::new(1)));
    }

    #[test]
    fn lru_prefers_least_recent() {
        let mut host = HostStore::new(2, 1);
        let mut bufs = vec![filled(3, &[1, 2, 3], &mut host)];
        bufs[0].touch(FeatureId::new(1));
        let plan = manager_get(&mut bufs, &ids(&[4]), &[], &FnvHashSet::default()).unwrap();
        assert_eq!(plan[0].noworking, ids(&[2]));
    }

    #[test]
    fn resident_batch_moves_nothing() {
        let mut host = HostStore::new(2, 1);
        let mut bufs = vec![filled(3, &[1, 2, 3], &mut host)];
        let plan = manager_get(&mut bufs, &ids(&[3, 1]), &[], &FnvHashSet::default()).unwrap();
        assert_eq!(plan[0], Admission::default());
    }

    #[test]
    fn cold_start_admits_everything() {
        let mut host = HostStore::new(80, 1);
        let mut bufs = vec![CacheBuffer::new(0, 12)];
        let plan = manager_get(&mut bufs, &ids(&[10, 20]), &[], &FnvHashSet::default()).unwrap();
        assert_eq!(plan[0].working, ids(&[10, 20]));
        assert!(plan[0].noworking.is_empty());
        let charge = push_parameters_to_cache(&mut host, &mut bufs[0], &plan[0].working).unwrap();
        assert_eq!(charge.host_to_worker_bytes, 2 * 80 * 4 * 3);
        assert_eq!(host.location(FeatureId::new(10)), Location::Worker(0));
    }

    #[test]
    fn plan_only_covers_owned_features() {
        let mut bufs = vec![CacheBuffer::new(0, 4), CacheBuffer::new(1, 4)];
        let plan = manager_get(&mut bufs, &ids(&[1, 2, 3, 4]), &[], &FnvHashSet::default()).unwrap();
        assert_eq!(plan[0].working, ids(&[2, 4]));
        assert_eq!(plan[1].working, ids(&[1, 3]));
    }

    #[test]
    fn push_and_pull_charges() {
        let mut host = HostStore::new(80, 1);
        let mut buf = CacheBuffer::new(0, 4);
        let none = push_parameters_to_cache(&mut host, &mut buf, &[]).unwrap();
        assert_eq!(none, LedgerSnapshot::default());
        push_parameters_to_cache(&mut host, &mut buf, &ids(&[1])).unwrap();
        buf.mark_needed_soon(&FnvHashSet::default());
        let pulled = pull_parameters_to_host(&mut host, &mut buf, &ids(&[1]));
        assert_eq!(pulled.worker_to_host_bytes, 960);
        assert_eq!(pulled.swap_events, 1);
        assert_eq!(pull_parameters_to_host(&mut host, &mut buf, &[]), LedgerSnapshot::default());
        assert_eq!(host.location(FeatureId::new(1)), Location::Host);
    }

    #[test]
    fn push_into_full_buffer_is_a_capacity_error() {
        let mut host = HostStore::new(2, 1);
        let mut buf = filled(1, &[1], &mut host);
        let err = push_parameters_to_cache(&mut host, &mut buf, &ids(&[2])).unwrap_err();
        assert!(matches!(err, Error::CapacityDeadlock { shortfall: 1, .. }), "{err}");
    }

    #[test]
    #[should_panic(expected = "evicting pinned feature")]
    fn pulling_a_pinned_feature_panics() {
        let mut host = HostStore::new(2, 1);
        let mut buf = filled(2, &[1], &mut host);
        buf.mark_needed_soon(&FnvHashSet::default());
        buf.pin(FeatureId::new(1));
        pull_parameters_to_host(&mut host, &mut buf, &ids(&[1]));
    }

    #[test]
    #[should_panic(expected = "needed soon")]
    fn pulling_a_needed_feature_panics() {
        let mut host = HostStore::new(2, 1);
        let mut buf = filled(2, &[1], &mut host);
        pull_parameters_to_host(&mut host, &mut buf, &ids(&[1]));
    }

    #[test]
    fn lazy_init_is_deterministic_and_bounded() {
        let a = ParamState::init(9, FeatureId::new(42), 16);
        assert_eq!(a, ParamState::init(9, FeatureId::new(42), 16));
        assert_ne!(a, ParamState::init(9, FeatureId::new(43), 16));
        assert!(a.embedding.iter().all(|x| x.abs() <= INIT_RANGE));
        assert!(a.momentum.iter().chain(&a.velocity).all(|&x| x == 0.0));
        let mut host = HostStore::new(16, 9);
        assert_eq!(host.location(FeatureId::new(42)), Location::Untouched);
        let mut buf = CacheBuffer::new(0, 1);
        push_parameters_to_cache(&mut host, &mut buf, &ids(&[42])).unwrap();
        assert_eq!(buf.embedding(FeatureId::new(42)), Some(&a.embedding[..]));
    }

    #[test]
    fn gather_zeroes_unowned_rows() {
        let mut host = HostStore::new(2, 5);
        let mut w0 = CacheBuffer::new(0, 4);
        let mut w1 = CacheBuffer::new(1, 4);
        // Two workers: 2 is even (worker 0); 1 and 3 are odd (worker 1).
        push_parameters_to_cache(&mut host, &mut w1, &ids(&[1, 3])).unwrap();
        push_parameters_to_cache(&mut host, &mut w0, &ids(&[2])).unwrap();
        let g = ids(&[1, 3, 2]);
        let m1 = gather_cache(&w1, &g, 2, 2).unwrap();
        let m0 = gather_cache(&w0, &g, 2, 2).unwrap();
        assert_eq!(m1.row(0).to_vec(), w1.embedding(g[0]).unwrap());
        assert_eq!(m1.row(1).to_vec(), w1.embedding(g[1]).unwrap());
        assert_eq!(m1.row(2).to_vec(), vec![0.0, 0.0]);
        assert_eq!(m0.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(m0.row(2).to_vec(), w0.embedding(g[2]).unwrap());

        let nothing = gather_cache(&w0, &ids(&[1, 3]), 2, 2).unwrap();
        assert!(nothing.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gather_reports_missing_owned_feature() {
        let buf = CacheBuffer::new(0, 4);
        let err = gather_cache(&buf, &ids(&[2]), 2, 3).unwrap_err();
        assert!(matches!(err, Error::NotResident { worker: 0, feature: 2 }));
    }

    #[test]
    fn single_worker_gather_matches_direct_lookup() {
        let mut host = HostStore::new(3, 2);
        let g = ids(&[9, 4, 7]);
        let mut buf = CacheBuffer::new(0, 3);
        let mut reference = HostStore::new(3, 2);
        push_parameters_to_cache(&mut host, &mut buf, &g).unwrap();
        let cached = gather_cache(&buf, &g, 1, 3).unwrap();
        let (direct, charge) = gather_host(&mut reference, 0, &g, 1);
        assert_eq!(cached, direct);
        assert_eq!(charge.host_to_worker_bytes, 3 * 3 * 4);
        for (k, f) in g.iter().enumerate() {
            assert_eq!(direct.row(k).to_vec(), ParamState::init(2, *f, 3).embedding);
        }
    }
}
