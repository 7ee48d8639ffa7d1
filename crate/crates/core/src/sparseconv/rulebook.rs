use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::sparsemap::{SparseMap, Site};

/// Per-offset `(input site, output site)` index pairs for a submanifold
/// convolution. Offsets are ordered row-major over the kernel window:
/// offset index `o = ky * k + kx` is the displacement
/// `(kx - k/2, ky - k/2)` in `(i, j)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rulebook {
    kernel_size: usize,
    n_sites: usize,
    pairs: Vec<Vec<(usize, usize)>>,
}

impl Rulebook {
    pub fn build(map: &SparseMap, kernel_size: usize) -> Result<Self> {
        Self::build_segments(&[map.sites()], kernel_size)
    }

    pub fn build_batch(maps: &[SparseMap], kernel_size: usize) -> Result<Self> {
        let segs: Vec<&[Site]> = maps.iter().map(|m| m.sites()).collect();
        Self::build_segments(&segs, kernel_size)
    }

    /// Sites of consecutive segments are indexed contiguously; pairs never
    /// link sites of different segments.
    pub fn build_segments(segments: &[&[Site]], kernel_size: usize) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size must be odd, got {kernel_size}")));
        }
        let n_sites = segments.iter().map(|s| s.len()).sum();
        let mut index: HashMap<(usize, Site), usize> = HashMap::with_capacity(n_sites);
        let mut next = 0;
        for (b, seg) in segments.iter().enumerate() {
            for &s in seg.iter() {
                if index.insert((b, s), next).is_some() {
                    return Err(Error::config(format!("duplicate site {s:?} in segment {b}")));
                }
                next += 1;
            }
        }
        let r = (kernel_size / 2) as i64;
        let mut pairs = Vec::with_capacity(kernel_size * kernel_size);
        for dj in -r..=r {
            for di in -r..=r {
                let mut list = Vec::new();
                let mut out = 0;
                for (b, seg) in segments.iter().enumerate() {
                    for &(i, j) in seg.iter() {
                        if let Some(&inp) = index.get(&(b, (i + di, j + dj))) {
                            list.push((inp, out));
                        }
                        out += 1;
                    }
                }
                pairs.push(list);
            }
        }
        Ok(Rulebook {
            kernel_size,
            n_sites,
            pairs,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_offsets(&self) -> usize {
        self.pairs.len()
    }

    pub fn center(&self) -> usize {
        self.pairs.len() / 2
    }

    pub fn offset(&self, o: usize) -> (i64, i64) {
        let k = self.kernel_size;
        let r = (k / 2) as i64;
        ((o % k) as i64 - r, (o / k) as i64 - r)
    }

    pub fn pairs(&self, o: usize) -> &[(usize, usize)] {
        &self.pairs[o]
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}
