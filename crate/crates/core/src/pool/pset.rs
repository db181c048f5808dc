use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::SpaceId;
use crate::device::PhysicalHandle;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("unknown physical handle {0}")]
    UnknownHandle(PhysicalHandle),
    #[error("{space} is not a referrer of {handle}")]
    UnknownReferrer { handle: PhysicalHandle, space: SpaceId },
    #[error("{space} already references {handle}")]
    DuplicateReferrer { handle: PhysicalHandle, space: SpaceId },
    #[error("{0} is on the free list and must be taken before mapping")]
    HandleIsFree(PhysicalHandle),
    #[error("{0} is not free")]
    HandleNotFree(PhysicalHandle),
    #[error("unknown virtual space {0}")]
    UnknownSpace(SpaceId),
    #[error("{0} is not in use")]
    SpaceNotInUse(SpaceId),
    #[error("{0} is not available")]
    SpaceNotAvailable(SpaceId),
    #[error("{0} still has mapped pages")]
    SpaceStillMapped(SpaceId),
    #[error("{space} has only {pages} pages")]
    CapacityExceeded { space: SpaceId, pages: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChunkState {
    /// On the reuse list, referenced by nothing.
    Free,
    /// Handed out by an allocation and not yet mapped anywhere.
    Pending,
    /// Referenced by at least one virtual space.
    Active,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhysicalEntry {
    pub handle: PhysicalHandle,
    pub referrers: BTreeSet<SpaceId>,
    pub state: ChunkState,
}

impl PhysicalEntry {
    pub fn ref_count(&self) -> usize {
        self.referrers.len()
    }
}

/// Sorted set of physical entries with hard-link style reference counts.
#[derive(Debug, Clone, Default)]
pub struct PSet {
    entries: BTreeMap<PhysicalHandle, PhysicalEntry>,
    free: BTreeSet<PhysicalHandle>,
}

impl PSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn get(&self, handle: PhysicalHandle) -> Option<&PhysicalEntry> {
        self.entries.get(&handle)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PhysicalEntry> {
        self.entries.values()
    }

    pub fn free_handles(&self) -> Vec<PhysicalHandle> {
        self.free.iter().copied().collect()
    }

    /// Registers a freshly created chunk as Pending.
    pub fn insert_created(&mut self, handle: PhysicalHandle) {
        self.entries.insert(
            handle,
            PhysicalEntry { handle, referrers: BTreeSet::new(), state: ChunkState::Pending },
        );
    }

    /// Takes up to `n` Free entries, lowest handle first, marking them Pending.
    pub fn take_free(&mut self, n: usize) -> Vec<PhysicalHandle> {
        let taken: Vec<_> = self.free.iter().take(n).copied().collect();
        for h in &taken {
            self.free.remove(h);
            self.entries.get_mut(h).expect("free handles are present").state = ChunkState::Pending;
        }
        taken
    }

    /// Puts a Pending entry that was never mapped back on the free list.
    pub fn give_back(&mut self, handle: PhysicalHandle) -> Result<(), PoolError> {
        let e = self.entries.get_mut(&handle).ok_or(PoolError::UnknownHandle(handle))?;
        if e.state == ChunkState::Pending {
            e.state = ChunkState::Free;
            self.free.insert(handle);
        }
        Ok(())
    }

    pub fn incref(&mut self, handle: PhysicalHandle, space: SpaceId) -> Result<usize, PoolError> {
        let e = self.entries.get_mut(&handle).ok_or(PoolError::UnknownHandle(handle))?;
        if e.state == ChunkState::Free {
            return Err(PoolError::HandleIsFree(handle));
        }
        if !e.referrers.insert(space) {
            return Err(PoolError::DuplicateReferrer { handle, space });
        }
        e.state = ChunkState::Active;
        Ok(e.referrers.len())
    }

    /// Drops one reference. At zero the entry goes to the free list; it is not destroyed.
    pub fn decref(&mut self, handle: PhysicalHandle, space: SpaceId) -> Result<usize, PoolError> {
        let e = self.entries.get_mut(&handle).ok_or(PoolError::UnknownHandle(handle))?;
        if !e.referrers.remove(&space) {
            return Err(PoolError::UnknownReferrer { handle, space });
        }
        let left = e.referrers.len();
        if left == 0 {
            e.state = ChunkState::Free;
            self.free.insert(handle);
        }
        Ok(left)
    }

    /// Erases a Free entry.
    pub fn remove_free(&mut self, handle: PhysicalHandle) -> Result<(), PoolError> {
        match self.entries.get(&handle) {
            None => Err(PoolError::UnknownHandle(handle)),
            Some(e) if e.state != ChunkState::Free => Err(PoolError::HandleNotFree(handle)),
            Some(_) => {
                self.entries.remove(&handle);
                self.free.remove(&handle);
                Ok(())
            }
        }
    }

    /// Erases a Pending entry (rollback of a creation that will be destroyed).
    pub(crate) fn remove_pending(&mut self, handle: PhysicalHandle) {
        if self.entries.get(&handle).map(|e| e.state) == Some(ChunkState::Pending) {
            self.entries.remove(&handle);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pset_with_free(n: u64) -> PSet {
        let mut p = PSet::new();
        for i in 0..n {
            p.insert_created(PhysicalHandle(i));
            p.give_back(PhysicalHandle(i)).unwrap();
        }
        p
    }

    #[test]
    fn take_free_returns_at_most_available() {
        let mut p = pset_with_free(3);
        let got = p.take_free(5);
        assert_eq!(got.len(), 3);
        assert!(got.iter().all(|h| p.get(*h).unwrap().state != ChunkState::Free));
        assert_eq!(p.free_count(), 0);
        assert!(p.take_free(0).is_empty());
    }

    #[test]
    fn refcount_like_hard_links() {
        let mut p = PSet::new();
        let h = PhysicalHandle(1);
        p.insert_created(h);
        let (a, b) = (SpaceId(10), SpaceId(20));
        assert_eq!(p.incref(h, a), Ok(1));
        assert_eq!(p.incref(h, b), Ok(2));
        assert_eq!(p.incref(h, b), Err(PoolError::DuplicateReferrer { handle: h, space: b }));
        assert_eq!(p.decref(h, a), Ok(1));
        assert_eq!(p.get(h).unwrap().state, ChunkState::Active);
        assert_eq!(p.decref(h, a), Err(PoolError::UnknownReferrer { handle: h, space: a }));
        assert_eq!(p.decref(h, b), Ok(0));
        assert_eq!(p.get(h).unwrap().state, ChunkState::Free);
        assert_eq!(p.free_handles(), vec![h]);
        assert_eq!(p.incref(h, a), Err(PoolError::HandleIsFree(h)));
    }

    #[test]
    fn only_free_entries_are_removed() {
        let mut p = PSet::new();
        let h = PhysicalHandle(4);
        p.insert_created(h);
        p.incref(h, SpaceId(1)).unwrap();
        assert_eq!(p.remove_free(h), Err(PoolError::HandleNotFree(h)));
        p.decref(h, SpaceId(1)).unwrap();
        p.remove_free(h).unwrap();
        assert!(p.is_empty());
    }
}
