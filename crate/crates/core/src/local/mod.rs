//! Single-device attention over one (query partition, key partition) pair.
//!
//! Results are *unnormalized* partials `(O, m, l)`: `O = exp(S - m) V` with
//! running row max `m` and row sum `l`. Partials from different key blocks
//! combine with [`PartialAttn::merge`], the same online-softmax recurrence the
//! ring uses across devices, and are normalized once by
//! [`PartialAttn::finalize`].
//!
//! The untiled kernel materializes the whole score block. The tiled kernel
//! walks `tile_rows × tile_cols` tiles and never holds more than one score
//! tile at a time.

mod mask;

pub use mask::{BlockMask, MaskWindow};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reference::AttnOutput;
use crate::tensor::{dot, Matrix, Real, Vector};

/// Tile geometry for the tiled kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub tile_rows: usize,
    pub tile_cols: usize,
    /// Modeled SRAM size the tile length was derived from, if any.
    pub sram_bytes: Option<usize>,
}

impl TileSpec {
    pub fn new(tile_rows: usize, tile_cols: usize) -> Result<Self> {
        let t = Self {
            tile_rows,
            tile_cols,
            sram_bytes: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn square(len: usize) -> Result<Self> {
        Self::new(len, len)
    }

    /// Tile length `M / (4 d)` in tokens, where `M` is the SRAM size in
    /// elements, floored, at least 1, and clamped to `partition_len`.
    pub fn from_sram(sram_bytes: usize, head_dim: usize, bytes_per_element: usize, partition_len: usize) -> Result<Self> {
        if head_dim == 0 || bytes_per_element == 0 || partition_len == 0 {
            return Err(Error::InvalidArgument(
                "tile derivation needs positive head_dim, element width and partition length".into(),
            ));
        }
        let len = (sram_bytes / (4 * head_dim * bytes_per_element)).max(1).min(partition_len);
        Ok(Self {
            tile_rows: len,
            tile_cols: len,
            sram_bytes: Some(sram_bytes),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_rows == 0 || self.tile_cols == 0 {
            return Err(Error::InvalidArgument("tile dimensions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Work and modeled memory traffic of one kernel call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelStats {
    pub flops: u64,
    /// Element reads and writes against device main memory (HBM) under the
    /// tiling model: score tiles of the tiled kernel stay on chip.
    pub hbm_accesses: u64,
    pub tiles_computed: u64,
    pub tiles_skipped: u64,
}

impl KernelStats {
    pub fn absorb(&mut self, other: &KernelStats) {
        self.flops += other.flops;
        self.hbm_accesses += other.hbm_accesses;
        self.tiles_computed += other.tiles_computed;
        self.tiles_skipped += other.tiles_skipped;
    }
}

/// Unnormalized attention over a subset of keys.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAttn<T: Real = f64> {
    /// `Σ exp(s - m) v` per row.
    pub o: Matrix<T>,
    /// Running row max of the scaled scores; `-inf` until a key is seen.
    pub m: Vector<T>,
    /// Running row sum of `exp(s - m)`.
    pub l: Vector<T>,
}

#[inline]
fn rescale<T: Real>(m: T, m_new: T) -> T {
    if m == T::neg_infinity() {
        T::zero()
    } else {
        (m - m_new).exp()
    }
}

impl<T: Real> PartialAttn<T> {
    /// The identity of [`merge`](Self::merge): `O = 0, l = 0, m = -inf`.
    pub fn empty(rows: usize, head_dim: usize) -> Self {
        Self {
            o: Matrix::zeros(rows, head_dim),
            m: Vector::filled(rows, T::neg_infinity()),
            l: Vector::zeros(rows),
        }
    }

    pub fn rows(&self) -> usize {
        self.o.rows()
    }

    /// Folds `other` (same rows, different keys) into `self`:
    ///
    /// ```text
    /// m' = max(m, m₂)
    /// l' = e^(m - m') l + e^(m₂ - m') l₂
    /// O' = e^(m - m') O + e^(m₂ - m') O₂
    /// ```
    pub fn merge(&mut self, other: &PartialAttn<T>) -> Result<()> {
        if self.o.shape() != other.o.shape() {
            return Err(Error::Shape(format!(
                "cannot merge partial {:?} into {:?}",
                other.o.shape(),
                self.o.shape()
            )));
        }
        for r in 0..self.rows() {
            let (m1, m2) = (self.m[r], other.m[r]);
            let m_new = m1.max(m2);
            if m_new == T::neg_infinity() {
                continue;
            }
            let a = rescale(m1, m_new);
            let b = rescale(m2, m_new);
            self.l[r] = a * self.l[r] + b * other.l[r];
            for (x, &y) in self.o.row_mut(r).iter_mut().zip(other.o.row(r)) {
                *x = a * *x + b * y;
            }
            self.m[r] = m_new;
        }
        Ok(())
    }

    /// Normalizes by `diag(l)⁻¹` and returns `lse = m + log l`.
    pub fn finalize(&self) -> Result<AttnOutput<T>> {
        for r in 0..self.rows() {
            if !(self.l[r] > T::zero()) {
                return Err(Error::FullyMaskedRow { row: r });
            }
        }
        let o = self.o.div_rows(&self.l)?;
        let lse = Vector::from_vec(
            self.m
                .iter()
                .zip(self.l.iter())
                .map(|(&m, &l)| m + l.ln())
                .collect(),
        );
        if !lse.is_finite() {
            return Err(crate::tensor::TensorError::NonFinite { op: "finalize" }.into());
        }
        Ok(AttnOutput { o, lse })
    }

    fn write_rows(&mut self, start: usize, part: &PartialAttn<T>) -> Result<()> {
        self.o.write_rows(start, &part.o)?;
        self.m.as_mut_slice()[start..start + part.rows()].copy_from_slice(part.m.as_slice());
        self.l.as_mut_slice()[start..start + part.rows()].copy_from_slice(part.l.as_slice());
        Ok(())
    }
}

fn check_operands<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "local block Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if !(q.is_finite() && k.is_finite() && v.is_finite()) {
        return Err(crate::tensor::TensorError::NonFinite { op: "local attention input" }.into());
    }
    Ok(())
}

/// Computes one score block in a single buffer: `S = Q Kᵀ · scale`, then in
/// place `P = exp(S - rowmax)`, then `O = P V`.
fn dense_block<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    scale: T,
    window: &MaskWindow<'_>,
) -> Result<PartialAttn<T>> {
    let (rows, cols) = (q.rows(), k.rows());
    let dense = window.is_dense(rows, cols);
    let mut p = q.matmul_transposed(k)?;
    let mut m = Vector::filled(rows, T::neg_infinity());
    let mut l = Vector::zeros(rows);
    for r in 0..rows {
        let row = p.row_mut(r);
        let mut mx = T::neg_infinity();
        for (c, x) in row.iter_mut().enumerate() {
            *x *= scale;
            if (dense || window.allows(r, c)) && *x > mx {
                mx = *x;
            }
        }
        let mut sum = T::zero();
        for (c, x) in row.iter_mut().enumerate() {
            if mx != T::neg_infinity() && (dense || window.allows(r, c)) {
                *x = (*x - mx).exp();
                sum += *x;
            } else {
                *x = T::zero();
            }
        }
        m[r] = mx;
        l[r] = sum;
    }
    let o = p.matmul(v)?;
    Ok(PartialAttn { o, m, l })
}

/// The local forward without tiling: one materialized score block.
pub fn local_forward_untiled<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, scale: T) -> Result<PartialAttn<T>> {
    check_operands(q, k, v)?;
    dense_block(q, k, v, scale, &MaskWindow::unmasked())
}

/// Tiled local forward. Returns the same partial as the untiled kernel
/// (within rounding) with fully masked tiles skipped. Errors if the mask
/// leaves a query row with no key.
pub fn local_forward_tiled<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    scale: T,
    tiles: &TileSpec,
    mask: Option<&BlockMask>,
) -> Result<PartialAttn<T>> {
    local_forward_tiled_in_order(q, k, v, scale, tiles, mask, None)
}

/// [`local_forward_tiled`] visiting key tiles in `key_order` (a permutation of
/// tile indices) instead of left to right.
pub fn local_forward_tiled_in_order<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    scale: T,
    tiles: &TileSpec,
    mask: Option<&BlockMask>,
    key_order: Option<&[usize]>,
) -> Result<PartialAttn<T>> {
    let window = MaskWindow::new(mask, 0, 0, usize::MAX);
    let (part, _) = forward_block(q, k, v, scale, Some(tiles), &window, key_order)?
        .ok_or(Error::FullyMaskedRow { row: 0 })?;
    if let Some(row) = (0..part.rows()).find(|&r| !(part.l[r] > T::zero())) {
        return Err(Error::FullyMaskedRow { row });
    }
    Ok(part)
}

/// General forward kernel used by the ring. `None` means the mask skips the
/// whole block, so no compute happens. Rows that see no key in this block
/// come back with `m = -inf, l = 0`.
pub fn forward_block<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    scale: T,
    tiles: Option<&TileSpec>,
    window: &MaskWindow<'_>,
    key_order: Option<&[usize]>,
) -> Result<Option<(PartialAttn<T>, KernelStats)>> {
    check_operands(q, k, v)?;
    let (rows, cols, d) = (q.rows(), k.rows(), q.cols() as u64);
    if window.skips(rows, cols) {
        return Ok(None);
    }
    let mut stats = KernelStats::default();
    let Some(tiles) = tiles else {
        let part = dense_block(q, k, v, scale, window)?;
        let (r, c) = (rows as u64, cols as u64);
        stats.flops = 4 * r * c * d;
        stats.hbm_accesses = 2 * r * d + 2 * c * d + 4 * r * c;
        stats.tiles_computed = 1;
        return Ok(Some((part, stats)));
    };
    tiles.validate()?;
    let (tr, tc) = (tiles.tile_rows.min(rows), tiles.tile_cols.min(cols));
    let n_key_tiles = cols.div_ceil(tc);
    let order: Vec<usize> = match key_order {
        Some(o) => {
            let mut sorted = o.to_vec();
            sorted.sort_unstable();
            if sorted != (0..n_key_tiles).collect::<Vec<_>>() {
                return Err(Error::InvalidArgument(format!(
                    "key tile order must permute 0..{n_key_tiles}"
                )));
            }
            o.to_vec()
        }
        None => (0..n_key_tiles).collect(),
    };
    let mut out = PartialAttn::empty(rows, q.cols());
    for qs in (0..rows).step_by(tr) {
        let qlen = tr.min(rows - qs);
        let q_tile = q.row_block(qs, qlen)?;
        let mut acc = PartialAttn::empty(qlen, q.cols());
        stats.hbm_accesses += 2 * qlen as u64 * d;
        for &kt in &order {
            let ks = kt * tc;
            let klen = tc.min(cols - ks);
            let w = window.shifted(qs, ks);
            if w.skips(qlen, klen) {
                stats.tiles_skipped += 1;
                continue;
            }
            let k_tile = k.row_block(ks, klen)?;
            let v_tile = v.row_block(ks, klen)?;
            let part = dense_block(&q_tile, &k_tile, &v_tile, scale, &w)?;
            acc.merge(&part)?;
            stats.tiles_computed += 1;
            stats.flops += 4 * (qlen * klen) as u64 * d;
            stats.hbm_accesses += 2 * klen as u64 * d;
        }
        out.write_rows(qs, &acc)?;
    }
    Ok(Some((out, stats)))
}

/// Additive gradient contributions of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads<T: Real = f64> {
    /// Rows of the query block (travels with the query payload).
    pub dq: Matrix<T>,
    /// Rows of the key block (stays on the key's device).
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
}

/// Operands of a backward block: the traveling query side `(Q, dO, lse, D)`
/// against a pinned key side `(K, V)`.
#[derive(Debug, Clone, Copy)]
pub struct BackwardOperands<'a, T: Real> {
    pub q: &'a Matrix<T>,
    pub k: &'a Matrix<T>,
    pub v: &'a Matrix<T>,
    pub d_o: &'a Matrix<T>,
    pub lse: &'a Vector<T>,
    pub delta: &'a Vector<T>,
}

impl<T: Real> BackwardOperands<'_, T> {
    fn check(&self) -> Result<()> {
        check_operands(self.q, self.k, self.v)?;
        let rows = self.q.rows();
        if self.d_o.shape() != self.q.shape() || self.lse.len() != rows || self.delta.len() != rows {
            return Err(Error::Shape(format!(
                "backward block: Q {:?}, dO {:?}, lse {}, D {}",
                self.q.shape(),
                self.d_o.shape(),
                self.lse.len(),
                self.delta.len()
            )));
        }
        Ok(())
    }
}

/// Gradient contributions of one tile pair, accumulated into `acc` at the
/// given row offsets. Recomputes `P = exp(S - lse)` in one buffer, then turns
/// it into `dS = P ∘ (dO Vᵀ - D)` in place.
#[allow(clippy::too_many_arguments)]
fn backward_tile<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    d_o: &Matrix<T>,
    lse: &[T],
    delta: &[T],
    scale: T,
    window: &MaskWindow<'_>,
    acc: &mut BlockGrads<T>,
    q_start: usize,
    k_start: usize,
) -> Result<()> {
    let (rows, cols) = (q.rows(), k.rows());
    let dense = window.is_dense(rows, cols);
    let mut p = q.matmul_transposed(k)?;
    for r in 0..rows {
        for (c, x) in p.row_mut(r).iter_mut().enumerate() {
            *x = if dense || window.allows(r, c) {
                (*x * scale - lse[r]).exp()
            } else {
                T::zero()
            };
        }
    }
    let dv = p.transposed_matmul(d_o)?;
    add_rows(&mut acc.dv, k_start, &dv, T::one())?;
    drop(dv);
    for r in 0..rows {
        let g = d_o.row(r);
        for (c, x) in p.row_mut(r).iter_mut().enumerate() {
            if *x != T::zero() {
                *x *= dot(g, v.row(c)) - delta[r];
            }
        }
    }
    let dq = p.matmul(k)?;
    add_rows(&mut acc.dq, q_start, &dq, scale)?;
    drop(dq);
    let dk = p.transposed_matmul(q)?;
    add_rows(&mut acc.dk, k_start, &dk, scale)?;
    Ok(())
}

fn add_rows<T: Real>(dst: &mut Matrix<T>, start: usize, src: &Matrix<T>, alpha: T) -> Result<()> {
    for r in 0..src.rows() {
        for (x, &y) in dst.row_mut(start + r).iter_mut().zip(src.row(r)) {
            *x += alpha * y;
        }
    }
    if dst.is_finite() {
        Ok(())
    } else {
        Err(crate::tensor::TensorError::NonFinite { op: "gradient accumulation" }.into())
    }
}

/// Backward of one unmasked block; `tiles = None` is the untiled kernel.
#[allow(clippy::too_many_arguments)]
pub fn local_backward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    d_o: &Matrix<T>,
    lse: &Vector<T>,
    delta: &Vector<T>,
    scale: T,
    tiles: Option<&TileSpec>,
) -> Result<BlockGrads<T>> {
    let ops = BackwardOperands { q, k, v, d_o, lse, delta };
    Ok(backward_block(&ops, scale, tiles, &MaskWindow::unmasked())?
        .map(|(g, _)| g)
        .unwrap_or_else(|| BlockGrads {
            dq: Matrix::zeros(q.rows(), q.cols()),
            dk: Matrix::zeros(k.rows(), k.cols()),
            dv: Matrix::zeros(k.rows(), k.cols()),
        }))
}

/// General backward kernel used by the ring; `None` when the mask skips the
/// whole block.
pub fn backward_block<T: Real>(
    ops: &BackwardOperands<'_, T>,
    scale: T,
    tiles: Option<&TileSpec>,
    window: &MaskWindow<'_>,
) -> Result<Option<(BlockGrads<T>, KernelStats)>> {
    ops.check()?;
    let (rows, cols, d) = (ops.q.rows(), ops.k.rows(), ops.q.cols());
    if window.skips(rows, cols) {
        return Ok(None);
    }
    let mut acc = BlockGrads {
        dq: Matrix::zeros(rows, d),
        dk: Matrix::zeros(cols, d),
        dv: Matrix::zeros(cols, d),
    };
    let mut stats = KernelStats::default();
    let d64 = d as u64;
    let Some(tiles) = tiles else {
        backward_tile(
            ops.q,
            ops.k,
            ops.v,
            ops.d_o,
            ops.lse.as_slice(),
            ops.delta.as_slice(),
            scale,
            window,
            &mut acc,
            0,
            0,
        )?;
        let (r, c) = (rows as u64, cols as u64);
        stats.flops = 10 * r * c * d64;
        stats.hbm_accesses = 3 * r * d64 + 4 * c * d64 + 2 * r + 4 * r * c;
        stats.tiles_computed = 1;
        return Ok(Some((acc, stats)));
    };
    tiles.validate()?;
    let (tr, tc) = (tiles.tile_rows.min(rows), tiles.tile_cols.min(cols));
    for ks in (0..cols).step_by(tc) {
        let klen = tc.min(cols - ks);
        let k_tile = ops.k.row_block(ks, klen)?;
        let v_tile = ops.v.row_block(ks, klen)?;
        for qs in (0..rows).step_by(tr) {
            let qlen = tr.min(rows - qs);
            let w = window.shifted(qs, ks);
            if w.skips(qlen, klen) {
                stats.tiles_skipped += 1;
                continue;
            }
            let q_tile = ops.q.row_block(qs, qlen)?;
            let do_tile = ops.d_o.row_block(qs, qlen)?;
            backward_tile(
                &q_tile,
                &k_tile,
                &v_tile,
                &do_tile,
                &ops.lse.as_slice()[qs..qs + qlen],
                &ops.delta.as_slice()[qs..qs + qlen],
                scale,
                &w,
                &mut acc,
                qs,
                ks,
            )?;
            let (r, c) = (qlen as u64, klen as u64);
            stats.tiles_computed += 1;
            stats.flops += 10 * r * c * d64;
            stats.hbm_accesses += 3 * r * d64 + 4 * c * d64 + 2 * r;
        }
    }
    Ok(Some((acc, stats)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{backward_dense, forward_dense, AttnProblem};
    use crate::rng::random_matrix;
    use crate::tensor::meter;
    use proptest::prelude::*;

    fn qkv(n: usize, d: usize, seed: u64) -> (Matrix, Matrix, Matrix) {
        (
            random_matrix(n, d, seed),
            random_matrix(n, d, seed + 1),
            random_matrix(n, d, seed + 2),
        )
    }

    fn close(a: &PartialAttn, b: &PartialAttn, tol: f64) -> bool {
        a.o.max_abs_diff(&b.o) < tol && a.m.max_abs_diff(&b.m) < tol && a.l.max_abs_diff(&b.l) < tol
    }

    #[test]
    fn tile_from_sram() {
        // 4 KiB SRAM, d = 8, f64: 4096 / (4 * 8 * 8) = 16 tokens.
        let t = TileSpec::from_sram(4096, 8, 8, 64).unwrap();
        assert_eq!((t.tile_rows, t.tile_cols), (16, 16));
        assert_eq!(TileSpec::from_sram(4096, 8, 8, 10).unwrap().tile_rows, 10);
        assert_eq!(TileSpec::from_sram(10, 8, 8, 64).unwrap().tile_rows, 1);
        assert!(TileSpec::new(0, 2).is_err());
    }

    #[test]
    fn merge_unit_case() {
        let mut a = PartialAttn {
            o: Matrix::zeros(1, 1),
            m: Vector::from_vec(vec![1.0]),
            l: Vector::from_vec(vec![2.0]),
        };
        let b = PartialAttn {
            o: Matrix::zeros(1, 1),
            m: Vector::from_vec(vec![3.0]),
            l: Vector::from_vec(vec![4.0]),
        };
        a.merge(&b).unwrap();
        assert_eq!(a.m[0], 3.0);
        // 2 e^{-2} + 4
        assert!((a.l[0] - 4.270_670_566_473_225_f64).abs() < 1e-12);
        assert!((a.l[0] - (2.0 * (-2.0f64).exp() + 4.0)).abs() < 1e-15);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let (q, k, v) = qkv(3, 2, 4);
        let part = local_forward_untiled(&q, &k, &v, 0.5).unwrap();
        let mut acc = PartialAttn::empty(3, 2);
        acc.merge(&part).unwrap();
        assert_eq!(acc, part);
        assert!(acc.merge(&PartialAttn::empty(2, 2)).is_err());
    }

    #[test]
    fn untiled_single_entry() {
        let q = Matrix::from_rows(&[[0.5, 1.0]]).unwrap();
        let k = Matrix::from_rows(&[[2.0, -1.0]]).unwrap();
        let v = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let p = local_forward_untiled(&q, &k, &v, 0.5).unwrap();
        assert_eq!(p.m[0], 0.0);
        assert_eq!(p.l[0], 1.0);
        assert_eq!(p.o, v);
    }

    #[test]
    fn untiled_zero_query() {
        let (_, k, v) = qkv(4, 3, 7);
        let q = Matrix::zeros(2, 3);
        let p = local_forward_untiled(&q, &k, &v, 0.7).unwrap();
        for r in 0..2 {
            assert_eq!(p.m[r], 0.0);
            assert_eq!(p.l[r], 4.0);
            for c in 0..3 {
                let col_sum: f64 = (0..4).map(|j| v.get(j, c)).sum();
                assert!((p.o.get(r, c) - col_sum).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn untiled_matches_dense_block() {
        let (q, k, v) = qkv(4, 4, 10);
        let p = local_forward_untiled(&q, &k, &v, 0.5).unwrap();
        let dense = forward_dense(&AttnProblem::with_scale(q, k, v, 0.5).unwrap()).unwrap();
        // Undo normalization: O_part = diag(l) O, lse = m + ln l.
        let restored = dense.o.scale_rows(&p.l).unwrap();
        assert!(restored.max_abs_diff(&p.o) < 1e-12);
        for r in 0..4 {
            assert!((p.m[r] + p.l[r].ln() - dense.lse[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_tile_is_bitwise_untiled() {
        let (q, k, v) = qkv(8, 4, 20);
        let untiled = local_forward_untiled(&q, &k, &v, 0.5).unwrap();
        let tiled = local_forward_tiled(&q, &k, &v, 0.5, &TileSpec::square(8).unwrap(), None).unwrap();
        assert_eq!(untiled, tiled);
    }

    #[test]
    fn unit_tiles_match_untiled() {
        let (q, k, v) = qkv(8, 4, 21);
        let untiled = local_forward_untiled(&q, &k, &v, 0.5).unwrap();
        let tiled = local_forward_tiled(&q, &k, &v, 0.5, &TileSpec::square(1).unwrap(), None).unwrap();
        let (a, b) = (untiled.finalize().unwrap(), tiled.finalize().unwrap());
        assert!(a.o.max_abs_diff(&b.o) < 1e-10);
        assert!(a.lse.max_abs_diff(&b.lse) < 1e-10);
    }

    #[test]
    fn causal_tiled_matches_masked_dense() {
        let (q, k, v) = qkv(8, 4, 22);
        let mask = BlockMask::causal();
        let tiled = local_forward_tiled(&q, &k, &v, 0.5, &TileSpec::new(3, 2).unwrap(), Some(&mask)).unwrap();
        let dense = forward_dense(
            &AttnProblem::with_scale(q, k, v, 0.5)
                .unwrap()
                .with_mask(Some(mask))
                .unwrap(),
        )
        .unwrap();
        let out = tiled.finalize().unwrap();
        assert!(out.o.max_abs_diff(&dense.o) < 1e-10);
        assert!(out.lse.max_abs_diff(&dense.lse) < 1e-10);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let (q, k, v) = qkv(4, 2, 23);
        let mask = BlockMask::from_blocks(2, [(1, 0), (1, 1)]).unwrap();
        let err = local_forward_tiled(&q, &k, &v, 0.5, &TileSpec::square(2).unwrap(), Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 2 }));
    }

    #[test]
    fn skipped_block_reports_none() {
        let (q, k, v) = qkv(4, 2, 24);
        let mask = BlockMask::causal();
        let w = MaskWindow::new(Some(&mask), 0, 4, usize::MAX);
        assert!(forward_block(&q, &k, &v, 0.5, None, &w, None).unwrap().is_none());
        let w = MaskWindow::new(Some(&mask), 4, 0, usize::MAX);
        let (_, stats) = forward_block(&q, &k, &v, 0.5, Some(&TileSpec::square(2).unwrap()), &w, None)
            .unwrap()
            .unwrap();
        assert_eq!(stats.tiles_computed, 4);
    }

    #[test]
    fn tiled_forward_never_materializes_square_block() {
        let (q, k, v) = qkv(16, 4, 25);
        let tiles = TileSpec::square(4).unwrap();
        let (res, report) = meter::measure(|| forward_block(&q, &k, &v, 0.5, Some(&tiles), &MaskWindow::unmasked(), None));
        res.unwrap().unwrap();
        assert_eq!(report.count_shape(16, 16), 0);
        assert!(report.largest_allocation() <= 16 * 4);
        assert!(report.peak_live_elements <= 8 * (4 * 4 + 16 * 4));

        let (res, report) = meter::measure(|| forward_block(&q, &k, &v, 0.5, None, &MaskWindow::unmasked(), None));
        res.unwrap().unwrap();
        assert_eq!(report.count_shape(16, 16), 1);
    }

    #[test]
    fn backward_zero_upstream() {
        let (q, k, v) = qkv(4, 3, 30);
        let g = local_backward(&q, &k, &v, &Matrix::zeros(4, 3), &Vector::zeros(4), &Vector::zeros(4), 0.5, None).unwrap();
        assert_eq!(g.dq.max_abs() + g.dk.max_abs() + g.dv.max_abs(), 0.0);
    }

    #[test]
    fn backward_single_block_equals_dense() {
        let (q, k, v) = qkv(6, 3, 31);
        let p = AttnProblem::new(q.clone(), k.clone(), v.clone()).unwrap();
        let d_o = random_matrix(6, 3, 40);
        let fwd = forward_dense(&p).unwrap();
        let delta = d_o.hadamard(&fwd.o).unwrap().rowsum().unwrap();
        let dense = backward_dense(&p, &d_o).unwrap();
        for tiles in [None, Some(TileSpec::square(2).unwrap()), Some(TileSpec::new(4, 1).unwrap())] {
            let g = local_backward(&q, &k, &v, &d_o, &fwd.lse, &delta, p.scale, tiles.as_ref()).unwrap();
            assert!(g.dq.max_abs_diff(&dense.dq) < 1e-12);
            assert!(g.dk.max_abs_diff(&dense.dk) < 1e-12);
            assert!(g.dv.max_abs_diff(&dense.dv) < 1e-12);
        }
    }

    #[test]
    fn backward_block_sum_over_key_partitions() {
        // Summing contributions over every key partition rebuilds the dense gradients.
        let n = 8;
        let (q, k, v) = qkv(n, 2, 50);
        let p = AttnProblem::new(q.clone(), k.clone(), v.clone()).unwrap();
        let d_o = random_matrix(n, 2, 51);
        let fwd = forward_dense(&p).unwrap();
        let delta = d_o.hadamard(&fwd.o).unwrap().rowsum().unwrap();
        let dense = backward_dense(&p, &d_o).unwrap();
        let mut dq = Matrix::zeros(n, 2);
        let mut dk = Vec::new();
        let mut dv = Vec::new();
        for j in 0..4 {
            let kj = k.row_block(2 * j, 2).unwrap();
            let vj = v.row_block(2 * j, 2).unwrap();
            let g = local_backward(&q, &kj, &vj, &d_o, &fwd.lse, &delta, p.scale, Some(&TileSpec::square(1).unwrap())).unwrap();
            dq.add_assign(&g.dq).unwrap();
            dk.push(g.dk);
            dv.push(g.dv);
        }
        assert!(dq.max_abs_diff(&dense.dq) < 1e-8);
        assert!(Matrix::vstack(&dk).unwrap().max_abs_diff(&dense.dk) < 1e-8);
        assert!(Matrix::vstack(&dv).unwrap().max_abs_diff(&dense.dv) < 1e-8);
    }

    #[test]
    fn backward_shape_errors() {
        let (q, k, v) = qkv(4, 3, 30);
        assert!(local_backward(&q, &k, &v, &Matrix::zeros(3, 3), &Vector::zeros(4), &Vector::zeros(4), 0.5, None).is_err());
        assert!(local_backward(&q, &k, &v, &Matrix::zeros(4, 3), &Vector::zeros(3), &Vector::zeros(4), 0.5, None).is_err());
    }

    #[test]
    fn tiled_backward_never_materializes_square_block() {
        let n = 16;
        let (q, k, v) = qkv(n, 4, 60);
        let d_o = random_matrix(n, 4, 61);
        let ops = BackwardOperands {
            q: &q,
            k: &k,
            v: &v,
            d_o: &d_o,
            lse: &Vector::zeros(n),
            delta: &Vector::zeros(n),
        };
        let tiles = TileSpec::square(4).unwrap();
        let (res, report) = meter::measure(|| backward_block(&ops, 0.5, Some(&tiles), &MaskWindow::unmasked()));
        res.unwrap().unwrap();
        assert_eq!(report.count_shape(n, n), 0);
        let (res, report) = meter::measure(|| backward_block(&ops, 0.5, None, &MaskWindow::unmasked()));
        res.unwrap().unwrap();
        assert_eq!(report.count_shape(n, n), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn tiled_equals_untiled(seed in 0u64..10_000, n in 1usize..=32, d in 1usize..=8, pick in 0usize..4) {
            let (q, k, v) = qkv(n, d, seed);
            let size = [1, 2, (n / 2).max(1), n][pick];
            let untiled = local_forward_untiled(&q, &k, &v, 0.3).unwrap();
            let tiled = local_forward_tiled(&q, &k, &v, 0.3, &TileSpec::square(size).unwrap(), None).unwrap();
            let (a, b) = (untiled.finalize().unwrap(), tiled.finalize().unwrap());
            prop_assert!(a.o.max_abs_diff(&b.o) < 1e-10);
            prop_assert!(a.lse.max_abs_diff(&b.lse) < 1e-10);
        }

        #[test]
        fn key_tile_order_is_irrelevant(seed in 0u64..10_000, n in 2usize..=24, tile in 1usize..6) {
            let (q, k, v) = qkv(n, 3, seed);
            let tiles = TileSpec::square(tile).unwrap();
            let count = n.div_ceil(tile.min(n));
            let reversed: Vec<usize> = (0..count).rev().collect();
            let fwd = local_forward_tiled(&q, &k, &v, 0.4, &tiles, None).unwrap().finalize().unwrap();
            let rev = local_forward_tiled_in_order(&q, &k, &v, 0.4, &tiles, None, Some(&reversed)).unwrap().finalize().unwrap();
            prop_assert!(fwd.o.max_abs_diff(&rev.o) < 1e-10);
            prop_assert!(fwd.lse.max_abs_diff(&rev.lse) < 1e-10);
        }

        #[test]
        fn partial_merge_commutes(seed in 0u64..10_000, n in 1usize..10) {
            let (q, k, v) = qkv(n, 2, seed);
            let (_, k2, v2) = qkv(n, 2, seed + 100);
            let a = local_forward_untiled(&q, &k, &v, 1.0).unwrap();
            let b = local_forward_untiled(&q, &k2, &v2, 1.0).unwrap();
            let mut ab = a.clone();
            ab.merge(&b).unwrap();
            let mut ba = b.clone();
            ba.merge(&a).unwrap();
            prop_assert!(close(&ab, &ba, 1e-12));
        }
    }
}
