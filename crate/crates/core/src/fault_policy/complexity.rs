//! Log-analysis kernels of fixed asymptotic cost, used by the built-in
//! benchmark hooks. Each returns a score derived from the window so the work
//! cannot be optimised away.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Complexity {
    O1,
    On,
    On2,
    On3,
}

impl Complexity {
    pub const ALL: [Complexity; 4] = [
        Complexity::O1,
        Complexity::On,
        Complexity::On2,
        Complexity::On3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Complexity::O1 => "o1",
            Complexity::On => "on",
            Complexity::On2 => "on2",
            Complexity::On3 => "on3",
        }
    }
}

impl std::str::FromStr for Complexity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Complexity::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown complexity {s:?}"))
    }
}

/// Run the kernel over per-line lengths.
pub fn analyze(c: Complexity, lens: &[u16]) -> u64 {
    match c {
        Complexity::O1 => lens.last().copied().unwrap_or(0) as u64,
        Complexity::On => lens.iter().map(|&l| l as u64).sum(),
        Complexity::On2 => pairs(lens),
        Complexity::On3 => triples(lens),
    }
}

/// Number of ordered pairs `i < j` with equal length.
fn pairs(lens: &[u16]) -> u64 {
    let mut n = 0u64;
    for (i, &a) in lens.iter().enumerate() {
        n += lens[i + 1..].iter().filter(|&&b| b == a).count() as u64;
    }
    n
}

/// Number of triples `i < j < k` with `len[i] + len[j] == len[k]`.
fn triples(lens: &[u16]) -> u64 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was detected at runtime.
        return unsafe { triples_avx2(lens) };
    }
    triples_generic(lens)
}

/// Same loop compiled with 256-bit lanes.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn triples_avx2(lens: &[u16]) -> u64 {
    triples_generic(lens)
}

#[inline(always)]
fn triples_generic(lens: &[u16]) -> u64 {
    let mut n = 0u64;
    for i in 0..lens.len() {
        for j in i + 1..lens.len() {
            let s = lens[i].wrapping_add(lens[j]);
            n += count_equal(&lens[j + 1..], s);
        }
    }
    n
}

/// Lane-friendly equality count: narrow accumulators over bounded chunks.
#[inline(always)]
fn count_equal(xs: &[u16], s: u16) -> u64 {
    xs.chunks(u16::MAX as usize)
        .map(|c| {
            c.iter()
                .fold(0u16, |acc, &k| acc.wrapping_add((k == s) as u16)) as u64
        })
        .sum()
}

pub fn line_lengths<S: AsRef<str>>(lines: &[S]) -> Vec<u16> {
    lines
        .iter()
        .map(|l| l.as_ref().len().min(u16::MAX as usize) as u16)
        .collect()
}
