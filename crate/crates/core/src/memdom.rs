//! Symbolic model of memory domains: 4-kB pages grouped into domains, per-thread
//! page privileges, a first-fit block allocator for the stack domain and the
//! privilege downgrade applied to a forked child.
//!
//! Nothing here touches real page tables. Domain pages are readable by every
//! thread at baseline; writing one needs an explicit grant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAGE_SIZE: usize = 4096;

/// Default cap on modeled domain pages (16 MiB).
pub const DEFAULT_PAGE_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PageId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainId(pub u32);

/// The domain holding runtime call-stack records.
pub const STACK_DOMAIN: DomainId = DomainId(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ThreadId(pub u32);

pub const MAIN_RUNTIME: ThreadId = ThreadId(0);
pub const STACK_INSPECTOR: ThreadId = ThreadId(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PagePriv {
    None,
    Read,
    ReadWrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

impl PagePriv {
    fn permits(self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self >= PagePriv::Read,
            AccessKind::Write => self == PagePriv::ReadWrite,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub len: usize,
    pub allocated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainPage {
    pub id: PageId,
    pub domain: DomainId,
    /// Tiles `[0, PAGE_SIZE)` in offset order; adjacent free blocks are merged.
    pub blocks: Vec<Block>,
}

impl DomainPage {
    fn new(id: PageId, domain: DomainId) -> Self {
        DomainPage {
            id,
            domain,
            blocks: vec![Block {
                offset: 0,
                len: PAGE_SIZE,
                allocated: false,
            }],
        }
    }

    pub fn has_free(&self) -> bool {
        self.blocks.iter().any(|b| !b.allocated)
    }

    pub fn allocated_bytes(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.allocated)
            .map(|b| b.len)
            .sum()
    }

    pub fn free_bytes(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| !b.allocated)
            .map(|b| b.len)
            .sum()
    }

    fn coalesce(&mut self) {
        let mut merged: Vec<Block> = Vec::with_capacity(self.blocks.len());
        for b in self.blocks.drain(..) {
            match merged.last_mut() {
                Some(prev) if !prev.allocated && !b.allocated => prev.len += b.len,
                _ => merged.push(b),
            }
        }
        self.blocks = merged;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadPolicy {
    pub thread: ThreadId,
    /// Explicit privileges; domain pages missing here are at baseline (read).
    pub page_privs: BTreeMap<PageId, PagePriv>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockHandle {
    pub page: PageId,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub thread: ThreadId,
    pub page: PageId,
    pub kind: AccessKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemdomError {
    #[error("allocation size {0} outside 1..={PAGE_SIZE}")]
    InvalidSize(usize),
    #[error("model page cap of {cap} pages exceeded")]
    OutOfModelMemory { cap: usize },
    #[error("unknown domain page {0:?}")]
    UnknownPage(PageId),
    #[error("unknown thread {0:?}")]
    UnknownThread(ThreadId),
    #[error("no allocated block at {0:?}")]
    InvalidHandle(BlockHandle),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemdomCounters {
    /// Calls to `set_page_priv`, including the ones made by the allocator.
    pub priv_changes: u64,
    pub faults: u64,
    pub allocs: u64,
    pub frees: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressSpaceModel {
    pages: BTreeMap<PageId, DomainPage>,
    policies: BTreeMap<ThreadId, ThreadPolicy>,
    active_thread: ThreadId,
    page_cap: usize,
    next_page: u64,
    counters: MemdomCounters,
}

impl Default for AddressSpaceModel {
    fn default() -> Self {
        Self::new(DEFAULT_PAGE_CAP)
    }
}

impl AddressSpaceModel {
    /// Empty space with the main-runtime and stack-inspector policies.
    pub fn new(page_cap: usize) -> Self {
        let policies = [MAIN_RUNTIME, STACK_INSPECTOR]
            .into_iter()
            .map(|t| {
                (
                    t,
                    ThreadPolicy {
                        thread: t,
                        page_privs: BTreeMap::new(),
                    },
                )
            })
            .collect();
        AddressSpaceModel {
            pages: BTreeMap::new(),
            policies,
            active_thread: MAIN_RUNTIME,
            page_cap,
            next_page: 0,
            counters: MemdomCounters::default(),
        }
    }

    pub fn pages(&self) -> impl Iterator<Item = &DomainPage> {
        self.pages.values()
    }

    pub fn page(&self, id: PageId) -> Option<&DomainPage> {
        self.pages.get(&id)
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn threads(&self) -> impl Iterator<Item = ThreadId> + '_ {
        self.policies.keys().copied()
    }

    pub fn policy(&self, thread: ThreadId) -> Option<&ThreadPolicy> {
        self.policies.get(&thread)
    }

    pub fn active_thread(&self) -> ThreadId {
        self.active_thread
    }

    /// Context switch: allocation happens on behalf of the active thread.
    pub fn switch_to(&mut self, thread: ThreadId) -> Result<(), MemdomError> {
        if !self.policies.contains_key(&thread) {
            return Err(MemdomError::UnknownThread(thread));
        }
        self.active_thread = thread;
        Ok(())
    }

    pub fn counters(&self) -> MemdomCounters {
        self.counters
    }

    pub fn page_cap(&self) -> usize {
        self.page_cap
    }

    /// Carries instrumentation over when a process image is replaced.
    pub fn restore_counters(&mut self, counters: MemdomCounters) {
        self.counters = counters;
    }

    /// Privilege `thread` currently holds on `page`.
    pub fn effective_priv(&self, thread: ThreadId, page: PageId) -> PagePriv {
        if !self.pages.contains_key(&page) {
            // ordinary memory outside every domain
            return PagePriv::ReadWrite;
        }
        self.policies
            .get(&thread)
            .and_then(|p| p.page_privs.get(&page).copied())
            .unwrap_or(PagePriv::Read)
    }

    /// Domain pages `thread` can currently write.
    pub fn writable_pages(&self, thread: ThreadId) -> Vec<PageId> {
        self.pages
            .keys()
            .copied()
            .filter(|&p| self.effective_priv(thread, p) == PagePriv::ReadWrite)
            .collect()
    }

    pub fn set_page_priv(
        &mut self,
        thread: ThreadId,
        page: PageId,
        privs: PagePriv,
    ) -> Result<(), MemdomError> {
        if !self.pages.contains_key(&page) {
            return Err(MemdomError::UnknownPage(page));
        }
        let policy = self
            .policies
            .get_mut(&thread)
            .ok_or(MemdomError::UnknownThread(thread))?;
        if privs == PagePriv::Read {
            policy.page_privs.remove(&page);
        } else {
            policy.page_privs.insert(page, privs);
        }
        self.counters.priv_changes += 1;
        Ok(())
    }

    /// Checks one memory access. A fault is an ordinary result.
    pub fn access(
        &mut self,
        thread: ThreadId,
        page: PageId,
        offset: usize,
        kind: AccessKind,
    ) -> Result<(), Fault> {
        let ok = offset < PAGE_SIZE && self.effective_priv(thread, page).permits(kind);
        if ok {
            Ok(())
        } else {
            self.counters.faults += 1;
            Err(Fault { thread, page, kind })
        }
    }

    /// Grants write on `pages` for `thread`, returning what to restore.
    fn open_write_window(&mut self, thread: ThreadId, pages: &[PageId]) -> Vec<(PageId, PagePriv)> {
        let mut saved = Vec::with_capacity(pages.len());
        for &p in pages {
            saved.push((p, self.effective_priv(thread, p)));
            self.set_page_priv(thread, p, PagePriv::ReadWrite)
                .expect("window pages exist");
        }
        saved
    }

    fn close_write_window(&mut self, thread: ThreadId, saved: Vec<(PageId, PagePriv)>) {
        for (p, prev) in saved {
            self.set_page_priv(thread, p, prev)
                .expect("window pages exist");
        }
    }

    /// First-fit allocation of a stack-domain block for the active thread.
    ///
    /// While the allocator runs, the active thread can write every domain page
    /// that has a free chunk (and a freshly added page); the previous
    /// privileges are restored before returning.
    pub fn memdom_alloc(&mut self, size: usize) -> Result<BlockHandle, MemdomError> {
        if size == 0 || size > PAGE_SIZE {
            return Err(MemdomError::InvalidSize(size));
        }
        let thread = self.active_thread;
        let with_free: Vec<PageId> = self
            .pages
            .values()
            .filter(|p| p.domain == STACK_DOMAIN && p.has_free())
            .map(|p| p.id)
            .collect();
        let mut saved = self.open_write_window(thread, &with_free);

        let found = with_free.iter().find_map(|pid| {
            let page = &self.pages[pid];
            page.blocks
                .iter()
                .position(|b| !b.allocated && b.len >= size)
                .map(|idx| (*pid, idx))
        });
        let (page_id, idx) = match found {
            Some(hit) => hit,
            None => {
                if self.pages.len() >= self.page_cap {
                    self.close_write_window(thread, saved);
                    return Err(MemdomError::OutOfModelMemory { cap: self.page_cap });
                }
                let id = PageId(self.next_page);
                self.next_page += 1;
                self.pages.insert(id, DomainPage::new(id, STACK_DOMAIN));
                saved.extend(self.open_write_window(thread, &[id]));
                (id, 0)
            }
        };

        let page = self.pages.get_mut(&page_id).expect("page exists");
        let block = page.blocks[idx];
        page.blocks[idx] = Block {
            offset: block.offset,
            len: size,
            allocated: true,
        };
        if block.len > size {
            page.blocks.insert(
                idx + 1,
                Block {
                    offset: block.offset + size,
                    len: block.len - size,
                    allocated: false,
                },
            );
        }
        let handle = BlockHandle {
            page: page_id,
            offset: block.offset,
            len: size,
        };
        let wrote = self.access(thread, page_id, handle.offset, AccessKind::Write);
        debug_assert!(wrote.is_ok(), "allocator writes inside its window");
        self.close_write_window(thread, saved);
        self.counters.allocs += 1;
        Ok(handle)
    }

    /// Releases a block previously returned by `memdom_alloc`.
    pub fn memdom_free(&mut self, handle: BlockHandle) -> Result<(), MemdomError> {
        let thread = self.active_thread;
        let page = self
            .pages
            .get(&handle.page)
            .ok_or(MemdomError::InvalidHandle(handle))?;
        let idx = page
            .blocks
            .iter()
            .position(|b| b.allocated && b.offset == handle.offset && b.len == handle.len)
            .ok_or(MemdomError::InvalidHandle(handle))?;
        let saved = self.open_write_window(thread, &[handle.page]);
        let wrote = self.access(thread, handle.page, handle.offset, AccessKind::Write);
        debug_assert!(wrote.is_ok(), "free writes inside its window");
        let page = self.pages.get_mut(&handle.page).expect("page exists");
        page.blocks[idx].allocated = false;
        page.coalesce();
        self.close_write_window(thread, saved);
        self.counters.frees += 1;
        Ok(())
    }

    /// Checks that each page's blocks tile the page, without adjacent free
    /// blocks. Returns the first offending page.
    pub fn check_tiling(&self) -> Result<(), PageId> {
        for page in self.pages.values() {
            let mut next = 0;
            let mut prev_free = false;
            for b in &page.blocks {
                if b.offset != next || b.len == 0 || (prev_free && !b.allocated) {
                    return Err(page.id);
                }
                next += b.len;
                prev_free = !b.allocated;
            }
            if next != PAGE_SIZE {
                return Err(page.id);
            }
        }
        Ok(())
    }
}

/// Copies the address space for a child process, dropping every write
/// privilege on stack-domain pages. The child's counters start at zero.
pub fn fork_address_space(parent: &AddressSpaceModel) -> AddressSpaceModel {
    let mut child = parent.clone();
    child.counters = MemdomCounters::default();
    let stack_pages: Vec<PageId> = child
        .pages
        .values()
        .filter(|p| p.domain == STACK_DOMAIN)
        .map(|p| p.id)
        .collect();
    for policy in child.policies.values_mut() {
        for page in &stack_pages {
            if policy.page_privs.get(page) == Some(&PagePriv::ReadWrite) {
                policy.page_privs.remove(page);
            }
        }
    }
    child
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_page_alloc_into_empty_space() {
        let mut s = AddressSpaceModel::default();
        let h = s.memdom_alloc(4096).unwrap();
        assert_eq!(h.offset, 0);
        assert_eq!(s.page_count(), 1);
        let page = s.page(h.page).unwrap();
        assert_eq!(page.blocks.len(), 1);
        assert!(page.blocks[0].allocated);
    }

    #[test]
    fn first_fit_on_same_page() {
        let mut s = AddressSpaceModel::default();
        let a = s.memdom_alloc(100).unwrap();
        let b = s.memdom_alloc(100).unwrap();
        assert_eq!(a.page, b.page);
        assert_eq!((a.offset, b.offset), (0, 100));
    }

    #[test]
    fn new_page_when_nothing_fits() {
        let mut s = AddressSpaceModel::default();
        s.memdom_alloc(4000).unwrap();
        let b = s.memdom_alloc(200).unwrap();
        assert_eq!(s.page_count(), 2);
        assert_eq!(b.offset, 0);
        let c = s.memdom_alloc(96).unwrap();
        assert_eq!(c.page, PageId(0));
        assert_eq!(c.offset, 4000);
    }

    #[test]
    fn invalid_sizes() {
        let mut s = AddressSpaceModel::default();
        assert_eq!(s.memdom_alloc(0), Err(MemdomError::InvalidSize(0)));
        assert_eq!(s.memdom_alloc(4097), Err(MemdomError::InvalidSize(4097)));
    }

    #[test]
    fn page_cap_enforced() {
        let mut s = AddressSpaceModel::new(2);
        s.memdom_alloc(4096).unwrap();
        s.memdom_alloc(4096).unwrap();
        assert_eq!(
            s.memdom_alloc(1),
            Err(MemdomError::OutOfModelMemory { cap: 2 })
        );
        assert!(s.writable_pages(MAIN_RUNTIME).is_empty());
    }

    #[test]
    fn allocation_restores_privileges() {
        let mut s = AddressSpaceModel::default();
        let h = s.memdom_alloc(64).unwrap();
        assert!(s.writable_pages(MAIN_RUNTIME).is_empty());
        assert!(s
            .access(MAIN_RUNTIME, h.page, 0, AccessKind::Write)
            .is_err());
        // two changes for the new page; the second alloc opens and closes one more window
        assert_eq!(s.counters().priv_changes, 2);
        s.memdom_alloc(64).unwrap();
        assert_eq!(s.counters().priv_changes, 4);
    }

    #[test]
    fn free_coalesces() {
        let mut s = AddressSpaceModel::default();
        let a = s.memdom_alloc(100).unwrap();
        let b = s.memdom_alloc(100).unwrap();
        s.memdom_free(a).unwrap();
        s.memdom_free(b).unwrap();
        let page = s.page(a.page).unwrap();
        assert_eq!(page.blocks.len(), 1);
        assert!(!page.blocks[0].allocated);
        assert_eq!(s.memdom_free(a), Err(MemdomError::InvalidHandle(a)));
        s.check_tiling().unwrap();
    }

    #[test]
    fn grant_then_revoke() {
        let mut s = AddressSpaceModel::default();
        let h = s.memdom_alloc(10).unwrap();
        s.set_page_priv(MAIN_RUNTIME, h.page, PagePriv::ReadWrite)
            .unwrap();
        assert!(s.access(MAIN_RUNTIME, h.page, 5, AccessKind::Write).is_ok());
        s.set_page_priv(MAIN_RUNTIME, h.page, PagePriv::Read)
            .unwrap();
        assert_eq!(s.effective_priv(MAIN_RUNTIME, h.page), PagePriv::Read);
    }

    #[test]
    fn revoke_without_grant_stays_read() {
        let mut s = AddressSpaceModel::default();
        let h = s.memdom_alloc(10).unwrap();
        s.set_page_priv(STACK_INSPECTOR, h.page, PagePriv::Read)
            .unwrap();
        assert_eq!(s.effective_priv(STACK_INSPECTOR, h.page), PagePriv::Read);
    }

    #[test]
    fn grant_counter_counts_calls() {
        let mut s = AddressSpaceModel::default();
        let pages: Vec<PageId> = (0..5).map(|_| s.memdom_alloc(4096).unwrap().page).collect();
        let before = s.counters().priv_changes;
        for p in &pages {
            s.set_page_priv(MAIN_RUNTIME, *p, PagePriv::ReadWrite)
                .unwrap();
        }
        assert_eq!(s.counters().priv_changes - before, 5);
    }

    #[test]
    fn unknown_page_and_thread() {
        let mut s = AddressSpaceModel::default();
        assert_eq!(
            s.set_page_priv(MAIN_RUNTIME, PageId(9), PagePriv::ReadWrite),
            Err(MemdomError::UnknownPage(PageId(9)))
        );
        let h = s.memdom_alloc(1).unwrap();
        assert_eq!(
            s.set_page_priv(ThreadId(7), h.page, PagePriv::ReadWrite),
            Err(MemdomError::UnknownThread(ThreadId(7)))
        );
        assert!(s.switch_to(ThreadId(7)).is_err());
    }

    #[test]
    fn baseline_reads_and_write_faults() {
        let mut s = AddressSpaceModel::default();
        let h = s.memdom_alloc(128).unwrap();
        assert_eq!(
            s.access(MAIN_RUNTIME, h.page, 0, AccessKind::Write),
            Err(Fault {
                thread: MAIN_RUNTIME,
                page: h.page,
                kind: AccessKind::Write
            })
        );
        for t in [MAIN_RUNTIME, STACK_INSPECTOR] {
            assert!(s.access(t, h.page, 17, AccessKind::Read).is_ok());
        }
        assert_eq!(s.counters().faults, 1);
        // memory outside every domain is unrestricted
        assert!(s
            .access(MAIN_RUNTIME, PageId(999), 0, AccessKind::Write)
            .is_ok());
        assert!(s
            .access(MAIN_RUNTIME, h.page, PAGE_SIZE, AccessKind::Read)
            .is_err());
    }

    #[test]
    fn explicit_none_blocks_reads() {
        let mut s = AddressSpaceModel::default();
        let h = s.memdom_alloc(8).unwrap();
        s.set_page_priv(MAIN_RUNTIME, h.page, PagePriv::None)
            .unwrap();
        assert!(s.access(MAIN_RUNTIME, h.page, 0, AccessKind::Read).is_err());
    }

    #[test]
    fn fork_drops_write() {
        let mut parent = AddressSpaceModel::default();
        let pages: Vec<PageId> = (0..3)
            .map(|_| parent.memdom_alloc(4096).unwrap().page)
            .collect();
        for p in &pages {
            parent
                .set_page_priv(MAIN_RUNTIME, *p, PagePriv::ReadWrite)
                .unwrap();
        }
        let mut child = fork_address_space(&parent);
        assert_eq!(child.page_count(), 3);
        for t in [MAIN_RUNTIME, STACK_INSPECTOR] {
            assert!(child.writable_pages(t).is_empty());
        }
        for p in &pages {
            assert!(child
                .access(MAIN_RUNTIME, *p, 0, AccessKind::Write)
                .is_err());
        }
        assert_eq!(parent.writable_pages(MAIN_RUNTIME), pages);
    }

    #[test]
    fn fork_empty_and_independence() {
        let parent = AddressSpaceModel::default();
        let mut child = fork_address_space(&parent);
        assert_eq!(child, parent);
        assert_eq!(child.counters(), MemdomCounters::default());
        child.memdom_alloc(10).unwrap();
        assert_eq!(parent.page_count(), 0);
        assert_eq!(child.page_count(), 1);
    }
}
