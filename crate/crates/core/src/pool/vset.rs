use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::PoolError;
use crate::device::{PhysicalHandle, VirtualRange};
use crate::types::{RecordId, RequestId};

/// A virtual space is identified by the base of its range; bases are never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpaceId(pub u64);

impl std::fmt::Display for SpaceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VA{:#x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceState {
    Available,
    InUse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceOwner {
    Request(RequestId),
    Prefix(RecordId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualSpace {
    pub id: SpaceId,
    pub range: VirtualRange,
    /// Mapped slots always form a prefix of this table.
    pub page_table: Vec<Option<PhysicalHandle>>,
    pub mapped: usize,
    pub state: SpaceState,
    pub owner: Option<SpaceOwner>,
}

impl VirtualSpace {
    pub fn page_count(&self) -> usize {
        self.page_table.len()
    }

    pub fn mapped_handles(&self) -> impl Iterator<Item = PhysicalHandle> + '_ {
        self.page_table[..self.mapped].iter().map(|h| h.expect("mapped prefix"))
    }

    pub fn remaining_pages(&self) -> usize {
        self.page_count() - self.mapped
    }
}

/// Sorted set of virtual spaces.
#[derive(Debug, Clone, Default)]
pub struct VSet {
    spaces: BTreeMap<SpaceId, VirtualSpace>,
    available: BTreeSet<SpaceId>,
}

impl VSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.spaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spaces.is_empty()
    }

    pub fn available_count(&self) -> usize {
        self.available.len()
    }

    /// Takes the lowest-addressed Available space with at least `min_pages`
    /// pages and marks it InUse.
    pub fn acquire(&mut self, min_pages: usize, owner: SpaceOwner) -> Option<SpaceId> {
        let id = *self
            .available
            .iter()
            .find(|id| self.spaces[id].page_count() >= min_pages)?;
        self.available.remove(&id);
        let space = self.spaces.get_mut(&id).expect("available ids are present");
        space.state = SpaceState::InUse;
        space.owner = Some(owner);
        Some(id)
    }

    /// Registers a freshly reserved range as an InUse space.
    pub fn insert_reserved(&mut self, range: VirtualRange, owner: SpaceOwner) -> SpaceId {
        let id = SpaceId(range.base);
        let space = VirtualSpace {
            id,
            range,
            page_table: vec![None; range.page_count],
            mapped: 0,
            state: SpaceState::InUse,
            owner: Some(owner),
        };
        self.spaces.insert(id, space);
        id
    }

    pub fn get(&self, id: SpaceId) -> Option<&VirtualSpace> {
        self.spaces.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &VirtualSpace> {
        self.spaces.values()
    }

    pub fn push_mapping(&mut self, id: SpaceId, handle: PhysicalHandle) -> Result<usize, PoolError> {
        let space = self.spaces.get_mut(&id).ok_or(PoolError::UnknownSpace(id))?;
        if space.state != SpaceState::InUse {
            return Err(PoolError::SpaceNotInUse(id));
        }
        let page = space.mapped;
        if page >= space.page_count() {
            return Err(PoolError::CapacityExceeded { space: id, pages: space.page_count() });
        }
        space.page_table[page] = Some(handle);
        space.mapped += 1;
        Ok(page)
    }

    /// Removes the last mapping, returning its page index and handle.
    pub fn pop_mapping(&mut self, id: SpaceId) -> Option<(usize, PhysicalHandle)> {
        let space = self.spaces.get_mut(&id)?;
        if space.mapped == 0 {
            return None;
        }
        space.mapped -= 1;
        let page = space.mapped;
        let handle = space.page_table[page].take().expect("mapped prefix");
        Some((page, handle))
    }

    /// Returns an InUse space with no mappings to the Available pool.
    pub fn release(&mut self, id: SpaceId) -> Result<(), PoolError> {
        let space = self.spaces.get_mut(&id).ok_or(PoolError::UnknownSpace(id))?;
        if space.mapped > 0 {
            return Err(PoolError::SpaceStillMapped(id));
        }
        space.state = SpaceState::Available;
        space.owner = None;
        self.available.insert(id);
        Ok(())
    }

    /// Erases an Available space.
    pub fn remove(&mut self, id: SpaceId) -> Result<VirtualSpace, PoolError> {
        match self.spaces.get(&id) {
            None => Err(PoolError::UnknownSpace(id)),
            Some(s) if s.state != SpaceState::Available => Err(PoolError::SpaceNotAvailable(id)),
            Some(_) => {
                self.available.remove(&id);
                Ok(self.spaces.remove(&id).expect("present"))
            }
        }
    }

    pub fn available_ids(&self) -> Vec<SpaceId> {
        self.available.iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn range(base: u64, pages: usize) -> VirtualRange {
        VirtualRange { base, length_bytes: pages as u64 * 2, page_count: pages }
    }

    const OWNER: SpaceOwner = SpaceOwner::Request(RequestId(1));

    #[test]
    fn empty_vset_has_nothing_to_acquire() {
        let mut v = VSet::new();
        assert_eq!(v.acquire(1, OWNER), None);
    }

    #[test]
    fn released_space_is_reused() {
        let mut v = VSet::new();
        let a = v.insert_reserved(range(10, 4), OWNER);
        let _b = v.insert_reserved(range(100, 4), OWNER);
        v.release(a).unwrap();
        assert_eq!(v.get(a).unwrap().state, SpaceState::Available);
        let got = v.acquire(4, SpaceOwner::Request(RequestId(7))).unwrap();
        assert_eq!(got, a);
        assert_eq!(v.get(a).unwrap().state, SpaceState::InUse);
        assert_eq!(v.get(a).unwrap().owner, Some(SpaceOwner::Request(RequestId(7))));
        assert_eq!(v.acquire(4, OWNER), None);
    }

    #[test]
    fn mappings_are_append_only() {
        let mut v = VSet::new();
        let a = v.insert_reserved(range(10, 2), OWNER);
        assert_eq!(v.push_mapping(a, PhysicalHandle(5)), Ok(0));
        assert_eq!(v.push_mapping(a, PhysicalHandle(3)), Ok(1));
        assert!(matches!(v.push_mapping(a, PhysicalHandle(4)), Err(PoolError::CapacityExceeded { .. })));
        assert_eq!(v.release(a), Err(PoolError::SpaceStillMapped(a)));
        assert_eq!(v.pop_mapping(a), Some((1, PhysicalHandle(3))));
        assert_eq!(v.pop_mapping(a), Some((0, PhysicalHandle(5))));
        assert_eq!(v.pop_mapping(a), None);
        v.release(a).unwrap();
        assert!(v.remove(a).is_ok());
        assert!(v.is_empty());
    }

    #[test]
    fn remove_requires_available() {
        let mut v = VSet::new();
        let a = v.insert_reserved(range(10, 2), OWNER);
        assert_eq!(v.remove(a), Err(PoolError::SpaceNotAvailable(a)));
    }
}
