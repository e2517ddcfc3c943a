//! Block-sparse and causal masks over global token indices.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which (query, key) pairs take part in attention.
///
/// Sparsity is expressed on a grid of `block_size × block_size` token blocks:
/// a `(query_block, key_block)` pair listed in `skip` is never computed. The
/// optional `causal` flag additionally masks every key after its query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    pub block_size: usize,
    #[serde(default)]
    pub skip: BTreeSet<(usize, usize)>,
    #[serde(default)]
    pub causal: bool,
}

impl BlockMask {
    pub fn causal() -> Self {
        Self {
            block_size: 1,
            skip: BTreeSet::new(),
            causal: true,
        }
    }

    pub fn from_blocks(block_size: usize, skip: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidArgument("mask block_size must be at least 1".into()));
        }
        Ok(Self {
            block_size,
            skip: skip.into_iter().collect(),
            causal: false,
        })
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    /// Reads a mask from a JSON file such as
    /// `{"block_size": 4, "skip": [[0, 1]], "causal": false}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mask: Self = serde_json::from_str(&text)?;
        if mask.block_size == 0 {
            return Err(Error::InvalidArgument("mask block_size must be at least 1".into()));
        }
        Ok(mask)
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        if self.causal && k > q {
            return false;
        }
        self.skip.is_empty() || !self.skip.contains(&(q / self.block_size, k / self.block_size))
    }

    /// True when no pair in `queries × keys` is allowed.
    pub fn skips(&self, queries: Range<usize>, keys: Range<usize>) -> bool {
        if queries.is_empty() || keys.is_empty() {
            return true;
        }
        if self.causal && keys.start > queries.end - 1 {
            return true;
        }
        if self.skip.is_empty() {
            return false;
        }
        let bs = self.block_size;
        for qb in queries.start / bs..=(queries.end - 1) / bs {
            for kb in keys.start / bs..=(keys.end - 1) / bs {
                if self.skip.contains(&(qb, kb)) {
                    continue;
                }
                let q_hi = queries.end.min((qb + 1) * bs) - 1;
                let k_lo = keys.start.max(kb * bs);
                if !(self.causal && k_lo > q_hi) {
                    return false;
                }
            }
        }
        true
    }

    /// Rejects masks that leave some query row of a `seq_len` sequence
    /// without any key, since its softmax would be undefined.
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::InvalidArgument("mask block_size must be at least 1".into()));
        }
        for q in 0..seq_len {
            let limit = if self.causal { q + 1 } else { seq_len };
            if !(0..limit).any(|k| self.allows(q, k)) {
                return Err(Error::FullyMaskedRow { row: q });
            }
        }
        Ok(())
    }
}

/// A mask positioned over one block of a larger problem: local row `r` is
/// global query `q_offset + r`, local column `c` is global key `k_offset + c`.
/// Keys at or beyond `key_limit` (padding) are always masked.
#[derive(Debug, Clone, Copy)]
pub struct MaskWindow<'a> {
    pub mask: Option<&'a BlockMask>,
    pub q_offset: usize,
    pub k_offset: usize,
    pub key_limit: usize,
}

impl Default for MaskWindow<'_> {
    fn default() -> Self {
        Self::unmasked()
    }
}

impl<'a> MaskWindow<'a> {
    pub fn unmasked() -> Self {
        Self {
            mask: None,
            q_offset: 0,
            k_offset: 0,
            key_limit: usize::MAX,
        }
    }

    pub fn new(mask: Option<&'a BlockMask>, q_offset: usize, k_offset: usize, key_limit: usize) -> Self {
        Self {
            mask,
            q_offset,
            k_offset,
            key_limit,
        }
    }

    /// Window for a sub-block starting at local `(row, col)`.
    pub fn shifted(&self, row: usize, col: usize) -> Self {
        Self {
            q_offset: self.q_offset + row,
            k_offset: self.k_offset + col,
            ..*self
        }
    }

    /// True when every pair is allowed, so kernels can skip per-element checks.
    pub fn is_dense(&self, rows: usize, cols: usize) -> bool {
        if self.k_offset + cols > self.key_limit {
            return false;
        }
        match self.mask {
            None => true,
            Some(m) => {
                if m.causal && self.k_offset + cols > self.q_offset + 1 {
                    return false;
                }
                if m.skip.is_empty() {
                    return true;
                }
                (0..rows).all(|r| (0..cols).all(|c| m.allows(self.q_offset + r, self.k_offset + c)))
            }
        }
    }

    #[inline]
    pub fn allows(&self, r: usize, c: usize) -> bool {
        let k = self.k_offset + c;
        if k >= self.key_limit {
            return false;
        }
        self.mask.is_none_or(|m| m.allows(self.q_offset + r, k))
    }

    /// True when the `rows × cols` block at this window has nothing to compute.
    pub fn skips(&self, rows: usize, cols: usize) -> bool {
        if rows == 0 || cols == 0 || self.k_offset >= self.key_limit {
            return true;
        }
        let cols = cols.min(self.key_limit - self.k_offset);
        self.mask.is_some_and(|m| {
            m.skips(
                self.q_offset..self.q_offset + rows,
                self.k_offset..self.k_offset + cols,
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_skips(m: &BlockMask, q: Range<usize>, k: Range<usize>) -> bool {
        q.clone().all(|i| k.clone().all(|j| !m.allows(i, j)))
    }

    #[test]
    fn causal_allows_lower_triangle() {
        let m = BlockMask::causal();
        assert!(m.allows(3, 3));
        assert!(m.allows(3, 0));
        assert!(!m.allows(3, 4));
        assert!(m.skips(0..4, 4..8));
        assert!(!m.skips(4..8, 0..4));
        assert!(!m.skips(0..4, 3..8));
        m.validate(16).unwrap();
    }

    #[test]
    fn block_skip_matches_brute_force() {
        let m = BlockMask::from_blocks(2, [(0, 1), (1, 0), (2, 3)]).unwrap();
        let mc = m.clone().with_causal(true);
        for mask in [&m, &mc] {
            for qs in 0..8 {
                for qe in qs + 1..=8 {
                    for ks in 0..8 {
                        for ke in ks + 1..=8 {
                            assert_eq!(
                                mask.skips(qs..qe, ks..ke),
                                brute_skips(mask, qs..qe, ks..ke),
                                "{qs}..{qe} x {ks}..{ke}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn validate_rejects_empty_rows() {
        let m = BlockMask::from_blocks(2, [(1, 0), (1, 1)]).unwrap();
        assert!(matches!(m.validate(4), Err(Error::FullyMaskedRow { row: 2 })));
        let causal_first = BlockMask::from_blocks(1, [(0, 0)]).unwrap().with_causal(true);
        assert!(matches!(causal_first.validate(3), Err(Error::FullyMaskedRow { row: 0 })));
        assert!(BlockMask::from_blocks(0, []).is_err());
    }

    #[test]
    fn window_respects_padding_and_offsets() {
        let m = BlockMask::causal();
        let w = MaskWindow::new(Some(&m), 4, 2, 6);
        assert!(w.allows(0, 2));
        assert!(!w.allows(0, 3));
        assert!(!w.allows(3, 4));
        assert!(!w.is_dense(4, 4));
        assert!(MaskWindow::new(Some(&m), 8, 0, 16).is_dense(4, 4));
        assert!(MaskWindow::new(None, 0, 6, 6).skips(2, 2));
        assert!(!MaskWindow::unmasked().skips(2, 2));
        assert!(MaskWindow::new(Some(&m), 0, 4, 16).skips(4, 4));
    }

    #[test]
    fn load_from_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.json");
        std::fs::write(&path, r#"{"block_size": 4, "skip": [[0, 1]], "causal": true}"#).unwrap();
        let m = BlockMask::load(&path).unwrap();
        assert_eq!(m.block_size, 4);
        assert!(m.causal);
        assert!(m.skip.contains(&(0, 1)));
    }
}
