//! Enclave page cache cost model.
//!
//! Objects are laid out on consecutive pages of a flat enclave address space
//! at allocation time. Every heap access maps to one page; a resident page is
//! free, a non-resident page costs `fault_penalty` and evicts the least
//! recently used page when the cache is full.

use std::collections::{BTreeSet, HashMap, VecDeque};

use crate::ir::{CostHook, Word};

pub const PAGE_WORDS: Word = 512;
pub const DEFAULT_EPC_PAGES: usize = 22;
pub const DEFAULT_FAULT_PENALTY: u64 = 1000;

#[derive(Debug, Clone)]
pub struct EpcModel {
    /// `None` models an unbounded cache: only compulsory misses occur.
    capacity: Option<usize>,
    fault_penalty: u64,
    /// Front is most recently used.
    resident: VecDeque<u64>,
    base_page: HashMap<Word, u64>,
    next_page: u64,
    hits: u64,
    misses: u64,
}

impl Default for EpcModel {
    fn default() -> Self {
        EpcModel::new(DEFAULT_EPC_PAGES, DEFAULT_FAULT_PENALTY)
    }
}

impl EpcModel {
    pub fn new(epc_pages: usize, fault_penalty: u64) -> Self {
        EpcModel::build(Some(epc_pages), fault_penalty)
    }

    pub fn unbounded(fault_penalty: u64) -> Self {
        EpcModel::build(None, fault_penalty)
    }

    fn build(capacity: Option<usize>, fault_penalty: u64) -> Self {
        EpcModel {
            capacity,
            fault_penalty,
            resident: VecDeque::new(),
            base_page: HashMap::new(),
            next_page: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn fault_penalty(&self) -> u64 {
        self.fault_penalty
    }

    pub fn resident_len(&self) -> usize {
        self.resident.len()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    /// Cold cache and empty layout.
    pub fn reset(&mut self) {
        *self = EpcModel::build(self.capacity, self.fault_penalty);
    }

    /// Touch one page and return the surcharge in cycles.
    pub fn epc_access(&mut self, page: u64) -> u64 {
        if let Some(pos) = self.resident.iter().position(|&p| p == page) {
            self.resident.remove(pos);
            self.resident.push_front(page);
            self.hits += 1;
            return 0;
        }
        self.misses += 1;
        match self.capacity {
            Some(0) => return self.fault_penalty,
            Some(cap) if self.resident.len() >= cap => {
                self.resident.pop_back();
            }
            _ => {}
        }
        self.resident.push_front(page);
        self.fault_penalty
    }

    /// Page holding word `offset` of object `handle`. Objects never seen at
    /// allocation (foreign handles) get a fresh page range on first touch.
    pub fn page_of(&mut self, handle: Word, offset: Word) -> u64 {
        let base = match self.base_page.get(&handle) {
            Some(&b) => b,
            None => self.layout(handle, PAGE_WORDS),
        };
        base + (offset.max(0) / PAGE_WORDS) as u64
    }

    fn layout(&mut self, handle: Word, size: Word) -> u64 {
        let pages = (size.max(1) as u64).div_ceil(PAGE_WORDS as u64);
        let base = self.next_page;
        self.next_page += pages;
        self.base_page.insert(handle, base);
        base
    }
}

impl CostHook for EpcModel {
    fn on_alloc(&mut self, handle: Word, size: Word) -> u64 {
        self.layout(handle, size);
        0
    }

    fn on_access(&mut self, handle: Word, offset: Word) -> u64 {
        let page = self.page_of(handle, offset);
        self.epc_access(page)
    }
}

/// Total surcharge of a page trace under a fresh cache of `epc_pages`.
pub fn trace_cost(trace: &[u64], epc_pages: usize, fault_penalty: u64) -> u64 {
    let mut m = EpcModel::new(epc_pages, fault_penalty);
    trace.iter().map(|&p| m.epc_access(p)).sum()
}

/// Distinct pages of a trace, for working-set accounting.
pub fn distinct_pages(trace: &[u64]) -> usize {
    trace.iter().collect::<BTreeSet<_>>().len()
}
