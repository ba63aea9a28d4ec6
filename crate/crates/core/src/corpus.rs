//! Built-in workload programs.

use crate::ir::{parse_program, IRProgram, Word};

#[derive(Debug, Clone, Copy)]
pub struct CorpusProgram {
    pub name: &'static str,
    pub source: &'static str,
    pub input: &'static [Word],
}

impl CorpusProgram {
    pub fn parse(&self) -> IRProgram {
        parse_program(self.source).unwrap_or_else(|e| panic!("corpus program {}: {e}", self.name))
    }
}

pub const SUM_LOOP: CorpusProgram = CorpusProgram {
    name: "sum_loop",
    source: include_str!("../corpus/sum_loop.ir"),
    input: &[],
};

pub const MATMUL8: CorpusProgram = CorpusProgram {
    name: "matmul8",
    source: include_str!("../corpus/matmul8.ir"),
    input: &[],
};

pub const STRCOPY: CorpusProgram = CorpusProgram {
    name: "strcopy",
    source: include_str!("../corpus/strcopy.ir"),
    input: &[12],
};

pub const FSM: CorpusProgram = CorpusProgram {
    name: "fsm",
    source: include_str!("../corpus/fsm.ir"),
    input: &[4, 40],
};

pub const KVLOOKUP: CorpusProgram = CorpusProgram {
    name: "kvlookup",
    source: include_str!("../corpus/kvlookup.ir"),
    input: &[],
};

/// Performs 100 overflow writes and 100 overflow reads on a 10-cell object.
pub const OOB_RING: CorpusProgram = CorpusProgram {
    name: "oob_ring",
    source: include_str!("../corpus/oob_ring.ir"),
    input: &[],
};

/// Page sweep; input is `[pages, stride_words, sweeps]`.
pub const PAGE_SWEEP: CorpusProgram = CorpusProgram {
    name: "page_sweep",
    source: include_str!("../corpus/page_sweep.ir"),
    input: &[4, 1, 2],
};

/// Uses bitwise operations that encoded execution cannot express.
pub const CHECKSUM_XOR: CorpusProgram = CorpusProgram {
    name: "checksum_xor",
    source: include_str!("../corpus/checksum_xor.ir"),
    input: &[3, 5],
};

/// The fault-injection and overhead workloads.
pub const WORKLOADS: [CorpusProgram; 5] = [SUM_LOOP, MATMUL8, STRCOPY, FSM, KVLOOKUP];

pub fn by_name(name: &str) -> Option<CorpusProgram> {
    WORKLOADS
        .iter()
        .chain([OOB_RING, PAGE_SWEEP, CHECKSUM_XOR].iter())
        .find(|p| p.name == name)
        .copied()
}
