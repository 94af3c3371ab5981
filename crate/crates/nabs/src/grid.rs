use crate::error::{Error, Result};
use sha2::{Digest, Sha256};

/// Dimension cap for stack-allocated cell boxes; the model catalog tops out at 5.
pub const MAX_DIM: usize = 8;

/// Absolute snap tolerance in index units. Neutralizes floating-point jitter
/// when a rectangle edge lands exactly on a cell boundary.
const SNAP: f64 = 1e-9;

/// Nonempty axis-aligned box `[lo, hi]`. Emptiness is expressed as
/// `Option<HyperRect>` at the call sites that need it.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperRect {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl HyperRect {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.iter().chain(hi.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rect bound"));
        }
        if lo.iter().zip(&hi).any(|(a, b)| a > b) {
            return Err(Error::InvalidGrid(format!(
                "rect lower bound exceeds upper bound: {lo:?} > {hi:?}"
            )));
        }
        Ok(HyperRect { lo, hi })
    }

    pub fn from_center_radius(center: &[f64], radius: &[f64]) -> Result<Self> {
        let lo = center.iter().zip(radius).map(|(c, r)| c - r).collect();
        let hi = center.iter().zip(radius).map(|(c, r)| c + r).collect();
        HyperRect::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn radius(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (b - a)).collect()
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// Closed containment of `other` in `self`.
    pub fn contains_rect(&self, other: &HyperRect) -> bool {
        self.dim() == other.dim()
            && self
                .lo
                .iter()
                .zip(&other.lo)
                .all(|(a, b)| b >= a)
            && self.hi.iter().zip(&other.hi).all(|(a, b)| b <= a)
    }

    /// Closed intersection test (boundary touch counts).
    pub fn intersects(&self, other: &HyperRect) -> bool {
        self.dim() == other.dim()
            && self
                .lo
                .iter()
                .zip(&other.hi)
                .all(|(a, b)| a <= b)
            && self.hi.iter().zip(&other.lo).all(|(a, b)| a >= b)
    }
}

/// Axis-aligned box of cell indices `[lo, hi]` (inclusive), the exact return
/// shape of both quantization maps on a rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellBox {
    n: u8,
    lo: [u32; MAX_DIM],
    hi: [u32; MAX_DIM],
}

impl CellBox {
    pub fn new(lo: &[u32], hi: &[u32]) -> Self {
        assert!(lo.len() == hi.len() && lo.len() <= MAX_DIM);
        debug_assert!(lo.iter().zip(hi).all(|(a, b)| a <= b));
        let mut b = CellBox {
            n: lo.len() as u8,
            lo: [0; MAX_DIM],
            hi: [0; MAX_DIM],
        };
        b.lo[..lo.len()].copy_from_slice(lo);
        b.hi[..hi.len()].copy_from_slice(hi);
        b
    }

    pub fn dim(&self) -> usize {
        self.n as usize
    }

    pub fn lo(&self) -> &[u32] {
        &self.lo[..self.n as usize]
    }

    pub fn hi(&self) -> &[u32] {
        &self.hi[..self.n as usize]
    }

    /// Number of cells spanned.
    pub fn count(&self) -> u64 {
        self.lo()
            .iter()
            .zip(self.hi())
            .map(|(a, b)| (b - a + 1) as u64)
            .product()
    }

    /// Closed containment of `other` in `self`, per dimension.
    pub fn contains_box(&self, other: &CellBox) -> bool {
        self.n == other.n
            && self
                .lo()
                .iter()
                .zip(other.lo())
                .all(|(a, b)| b >= a)
            && self.hi().iter().zip(other.hi()).all(|(a, b)| b <= a)
    }

    pub fn contains_multi(&self, idx: &[u32]) -> bool {
        idx.len() == self.dim()
            && idx
                .iter()
                .enumerate()
                .all(|(d, k)| *k >= self.lo[d] && *k <= self.hi[d])
    }

    /// Flat indices of all spanned cells in ascending (row-major) order.
    pub fn iter_flat<'a>(&'a self, grid: &'a Grid) -> CellBoxIter<'a> {
        debug_assert_eq!(self.dim(), grid.dim());
        CellBoxIter {
            cbox: self,
            grid,
            cur: *self.lo_array(),
            done: false,
        }
    }

    fn lo_array(&self) -> &[u32; MAX_DIM] {
        &self.lo
    }
}

pub struct CellBoxIter<'a> {
    cbox: &'a CellBox,
    grid: &'a Grid,
    cur: [u32; MAX_DIM],
    done: bool,
}

impl Iterator for CellBoxIter<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.done {
            return None;
        }
        let n = self.cbox.dim();
        let flat = self.grid.multi_to_flat(&self.cur[..n]);
        // Row-major advance: last dimension varies fastest.
        let mut d = n;
        loop {
            if d == 0 {
                self.done = true;
                break;
            }
            d -= 1;
            if self.cur[d] < self.cbox.hi[d] {
                self.cur[d] += 1;
                break;
            }
            self.cur[d] = self.cbox.lo[d];
        }
        Some(flat)
    }
}

/// Uniform rectangular partition of a box. Cell `k` (multi-index) has center
/// `lb + (k + 1/2) * eta` and radius `eta / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lb: Vec<f64>,
    ub: Vec<f64>,
    eta: Vec<f64>,
    counts: Vec<u32>,
    strides: Vec<usize>,
    num_cells: usize,
}

impl Grid {
    /// Strict constructor: `counts(i) * eta(i)` must reproduce the box width
    /// within 1e-9 relative tolerance.
    pub fn new(lb: Vec<f64>, ub: Vec<f64>, eta: Vec<f64>) -> Result<Self> {
        Self::build(lb, ub, eta, false)
    }

    /// Snapping constructor: rounds the cell count per dimension and adjusts
    /// `eta` so an integer number of cells tiles the box exactly.
    pub fn with_target_eta(lb: Vec<f64>, ub: Vec<f64>, eta: Vec<f64>) -> Result<Self> {
        Self::build(lb, ub, eta, true)
    }

    fn build(lb: Vec<f64>, ub: Vec<f64>, mut eta: Vec<f64>, snap_eta: bool) -> Result<Self> {
        let d = lb.len();
        if d == 0 || d > MAX_DIM {
            return Err(Error::InvalidGrid(format!(
                "dimension {d} outside supported range 1..={MAX_DIM}"
            )));
        }
        if ub.len() != d || eta.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: ub.len().max(eta.len()) });
        }
        if lb.iter().chain(ub.iter()).chain(eta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid parameter"));
        }
        let mut counts = Vec::with_capacity(d);
        for i in 0..d {
            if !(lb[i] < ub[i]) {
                return Err(Error::InvalidGrid(format!(
                    "empty box in dimension {i}: [{}, {}]",
                    lb[i], ub[i]
                )));
            }
            if !(eta[i] > 0.0) {
                return Err(Error::InvalidGrid(format!("eta({i}) must be positive")));
            }
            let width = ub[i] - lb[i];
            let c = (width / eta[i]).round();
            if !(c >= 1.0) || c > u32::MAX as f64 {
                return Err(Error::InvalidGrid(format!(
                    "cell count in dimension {i} out of range"
                )));
            }
            if snap_eta {
                eta[i] = width / c;
            } else if ((c * eta[i] - width) / width).abs() > 1e-9 {
                return Err(Error::InvalidGrid(format!(
                    "eta({i}) = {} does not tile [{}, {}] evenly",
                    eta[i], lb[i], ub[i]
                )));
            }
            counts.push(c as u32);
        }
        let mut num_cells: usize = 1;
        for &c in &counts {
            num_cells = num_cells
                .checked_mul(c as usize)
                .ok_or_else(|| Error::InvalidGrid("grid cell count overflows".into()))?;
        }
        let mut strides = vec![1usize; d];
        for i in (0..d.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * counts[i + 1] as usize;
        }
        Ok(Grid { lb, ub, eta, counts, strides, num_cells })
    }

    pub fn dim(&self) -> usize {
        self.lb.len()
    }

    pub fn lb(&self) -> &[f64] {
        &self.lb
    }

    pub fn ub(&self) -> &[f64] {
        &self.ub
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    /// Sum of per-dimension cell counts; the classification output layer is
    /// twice this.
    pub fn count_sum(&self) -> usize {
        self.counts.iter().map(|&c| c as usize).sum()
    }

    pub fn bounding_rect(&self) -> HyperRect {
        HyperRect { lo: self.lb.clone(), hi: self.ub.clone() }
    }

    pub fn cell_radius(&self) -> Vec<f64> {
        self.eta.iter().map(|e| 0.5 * e).collect()
    }

    /// Row-major flattening, dimension 0 outermost.
    pub fn multi_to_flat(&self, multi: &[u32]) -> usize {
        debug_assert_eq!(multi.len(), self.dim());
        multi
            .iter()
            .zip(&self.strides)
            .map(|(k, s)| *k as usize * s)
            .sum()
    }

    pub fn flat_to_multi(&self, flat: usize) -> Vec<u32> {
        debug_assert!(flat < self.num_cells);
        let mut rem = flat;
        self.strides
            .iter()
            .map(|s| {
                let k = rem / s;
                rem %= s;
                k as u32
            })
            .collect()
    }

    pub fn center_of_multi(&self, multi: &[u32]) -> Vec<f64> {
        multi
            .iter()
            .enumerate()
            .map(|(i, &k)| self.lb[i] + (k as f64 + 0.5) * self.eta[i])
            .collect()
    }

    pub fn center_of_flat(&self, flat: usize) -> Vec<f64> {
        self.center_of_multi(&self.flat_to_multi(flat))
    }

    /// Allocation-free center lookup for hot scan loops.
    pub fn center_of_flat_into(&self, flat: usize, out: &mut [f64]) {
        debug_assert!(flat < self.num_cells);
        debug_assert_eq!(out.len(), self.dim());
        let mut rem = flat;
        for (i, s) in self.strides.iter().enumerate() {
            let k = rem / s;
            rem %= s;
            out[i] = self.lb[i] + (k as f64 + 0.5) * self.eta[i];
        }
    }

    /// Closed cell box `[lb + k*eta, lb + (k+1)*eta]`.
    pub fn cell_rect(&self, multi: &[u32]) -> HyperRect {
        let lo: Vec<f64> = multi
            .iter()
            .enumerate()
            .map(|(i, &k)| self.lb[i] + k as f64 * self.eta[i])
            .collect();
        let hi: Vec<f64> = multi
            .iter()
            .enumerate()
            .map(|(i, &k)| self.lb[i] + (k as f64 + 1.0) * self.eta[i])
            .collect();
        HyperRect { lo, hi }
    }

    /// Over-approximating quantization: cells whose closed box intersects the
    /// closed rect (boundary touch counts), clipped to the grid. `None` when
    /// no cell qualifies.
    pub fn over_box(&self, rect: &HyperRect) -> Option<CellBox> {
        debug_assert_eq!(rect.dim(), self.dim());
        let mut lo = [0u32; MAX_DIM];
        let mut hi = [0u32; MAX_DIM];
        for i in 0..self.dim() {
            let t_lo = (rect.lo[i] - self.lb[i]) / self.eta[i];
            let t_hi = (rect.hi[i] - self.lb[i]) / self.eta[i];
            let (a, b) = Self::clip_range(
                (t_lo - 1.0 - SNAP).ceil(),
                (t_hi + SNAP).floor(),
                self.counts[i],
            )?;
            lo[i] = a;
            hi[i] = b;
        }
        Some(CellBox { n: self.dim() as u8, lo, hi })
    }

    /// Under-approximating quantization: cells whose closed box is contained
    /// in the closed rect. `None` when no cell qualifies.
    pub fn under_box(&self, rect: &HyperRect) -> Option<CellBox> {
        debug_assert_eq!(rect.dim(), self.dim());
        self.under_box_raw(rect.lo(), rect.hi())
    }

    /// `under_box` on raw bounds; tolerates an inverted or non-finite interval
    /// (returns `None`), which arises when decoding balls from trained nets.
    pub fn under_box_raw(&self, lo_v: &[f64], hi_v: &[f64]) -> Option<CellBox> {
        let mut lo = [0u32; MAX_DIM];
        let mut hi = [0u32; MAX_DIM];
        for i in 0..self.dim() {
            if !lo_v[i].is_finite() && !hi_v[i].is_finite() && lo_v[i].is_nan() {
                return None;
            }
            let t_lo = (lo_v[i] - self.lb[i]) / self.eta[i];
            let t_hi = (hi_v[i] - self.lb[i]) / self.eta[i];
            let (a, b) = Self::clip_range(
                (t_lo - SNAP).ceil(),
                (t_hi - 1.0 + SNAP).floor(),
                self.counts[i],
            )?;
            lo[i] = a;
            hi[i] = b;
        }
        Some(CellBox { n: self.dim() as u8, lo, hi })
    }

    /// Cells whose closed box lies inside the ball `[c - r, c + r]`;
    /// equivalently, cells whose center is within `r - eta/2` of `c`.
    pub fn ball_box(&self, center: &[f64], radius: &[f64]) -> Option<CellBox> {
        let lo: Vec<f64> = center.iter().zip(radius).map(|(c, r)| c - r).collect();
        let hi: Vec<f64> = center.iter().zip(radius).map(|(c, r)| c + r).collect();
        self.under_box_raw(&lo, &hi)
    }

    fn clip_range(lo_f: f64, hi_f: f64, count: u32) -> Option<(u32, u32)> {
        if lo_f.is_nan() || hi_f.is_nan() {
            return None;
        }
        let last = (count - 1) as f64;
        if hi_f < 0.0 || lo_f > last || hi_f < lo_f {
            return None;
        }
        Some((lo_f.max(0.0) as u32, hi_f.min(last) as u32))
    }

    /// Cell containing a continuous point, `None` outside the grid box.
    /// Points on interior boundaries resolve to the upper cell.
    pub fn cell_of_point(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut flat = 0usize;
        for i in 0..self.dim() {
            let t = (x[i] - self.lb[i]) / self.eta[i];
            if !t.is_finite() || t < -SNAP || t > self.counts[i] as f64 + SNAP {
                return None;
            }
            let k = (t.floor().max(0.0) as u32).min(self.counts[i] - 1);
            flat += k as usize * self.strides[i];
        }
        Some(flat)
    }

    /// Whether a rect stays inside the grid box (closed containment with snap
    /// slack); used for admissibility of reachable sets.
    pub fn contains_rect(&self, rect: &HyperRect) -> bool {
        (0..self.dim()).all(|i| {
            let slack = SNAP * self.eta[i];
            rect.lo[i] >= self.lb[i] - slack && rect.hi[i] <= self.ub[i] + slack
        })
    }

    /// Stable content digest used for provenance checks across artifacts.
    pub fn digest(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.dim() as u64).to_le_bytes());
        for v in self.lb.iter().chain(&self.ub).chain(&self.eta) {
            h.update(v.to_le_bytes());
        }
        for c in &self.counts {
            h.update((*c as u64).to_le_bytes());
        }
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_1d() -> Grid {
        Grid::new(vec![0.0], vec![5.0], vec![0.05]).unwrap()
    }

    /// Brute-force oracle: scan every cell, test closed intersection.
    fn over_oracle(grid: &Grid, rect: &HyperRect) -> Vec<usize> {
        (0..grid.num_cells())
            .filter(|&f| grid.cell_rect(&grid.flat_to_multi(f)).intersects(rect))
            .collect()
    }

    /// Brute-force oracle: scan every cell, test closed containment.
    fn under_oracle(grid: &Grid, rect: &HyperRect) -> Vec<usize> {
        (0..grid.num_cells())
            .filter(|&f| rect.contains_rect(&grid.cell_rect(&grid.flat_to_multi(f))))
            .collect()
    }

    fn flats(grid: &Grid, b: Option<CellBox>) -> Vec<usize> {
        b.map(|b| b.iter_flat(grid).collect()).unwrap_or_default()
    }

    #[test]
    fn over_box_examples() {
        let g = grid_1d();
        let rect = HyperRect::new(vec![0.9], vec![1.1]).unwrap();
        let got = flats(&g, g.over_box(&rect));
        assert_eq!(got, vec![17, 18, 19, 20, 21, 22]);
        assert_eq!(got, over_oracle(&g, &rect));

        // One full cell box picks up its boundary-touching neighbors.
        let cell_rect = g.cell_rect(&[40]);
        let got = flats(&g, g.over_box(&cell_rect));
        assert_eq!(got, vec![39, 40, 41]);
        assert_eq!(got, over_oracle(&g, &cell_rect));

        // Entire grid box gives every cell.
        let all = flats(&g, g.over_box(&g.bounding_rect()));
        assert_eq!(all.len(), g.num_cells());
    }

    #[test]
    fn under_box_examples() {
        let g = grid_1d();
        let rect = HyperRect::new(vec![0.9], vec![1.1]).unwrap();
        let got = flats(&g, g.under_box(&rect));
        assert_eq!(got, vec![18, 19, 20, 21]);
        assert_eq!(got, under_oracle(&g, &rect));

        // Rect smaller than one cell contains no cell.
        let tiny = HyperRect::new(vec![1.01], vec![1.04]).unwrap();
        assert!(g.under_box(&tiny).is_none());

        // Grid box contains every cell.
        let all = flats(&g, g.under_box(&g.bounding_rect()));
        assert_eq!(all.len(), g.num_cells());
    }

    #[test]
    fn rects_outside_grid_are_empty() {
        let g = grid_1d();
        let r = HyperRect::new(vec![7.0], vec![8.0]).unwrap();
        assert!(g.over_box(&r).is_none());
        assert!(g.under_box(&r).is_none());
        let r = HyperRect::new(vec![-3.0], vec![-1.0]).unwrap();
        assert!(g.over_box(&r).is_none());
    }

    #[test]
    fn multi_flat_round_trip() {
        let g = Grid::new(vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0], vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(g.counts(), &[2, 4, 6]);
        assert_eq!(g.num_cells(), 48);
        for f in 0..g.num_cells() {
            assert_eq!(g.multi_to_flat(&g.flat_to_multi(f)), f);
        }
        // Row-major: last dimension varies fastest.
        assert_eq!(g.multi_to_flat(&[0, 0, 1]), 1);
        assert_eq!(g.multi_to_flat(&[0, 1, 0]), 6);
        assert_eq!(g.multi_to_flat(&[1, 0, 0]), 24);
    }

    #[test]
    fn snapped_eta_tiles_exactly() {
        use std::f64::consts::PI;
        let g = Grid::with_target_eta(vec![-PI], vec![PI], vec![0.2]).unwrap();
        assert_eq!(g.counts(), &[31]);
        let width = 2.0 * PI;
        assert!((g.counts()[0] as f64 * g.eta()[0] - width).abs() < 1e-12);
        // Strict constructor rejects the unsnapped eta.
        assert!(Grid::new(vec![-PI], vec![PI], vec![0.2]).is_err());
    }

    #[test]
    fn cell_of_point_boundaries() {
        let g = grid_1d();
        assert_eq!(g.cell_of_point(&[0.0]), Some(0));
        assert_eq!(g.cell_of_point(&[5.0]), Some(99));
        assert_eq!(g.cell_of_point(&[0.05]), Some(1));
        assert_eq!(g.cell_of_point(&[-0.01]), None);
        assert_eq!(g.cell_of_point(&[5.01]), None);
    }

    #[test]
    fn ball_box_is_under_of_ball_rect() {
        let g = grid_1d();
        // Exact ball of cells {18..22}: center 1.025, radius 0.125.
        let b = g.ball_box(&[1.025], &[0.125]).unwrap();
        assert_eq!(b.lo(), &[18]);
        assert_eq!(b.hi(), &[22]);
        // Radius below half a cell decodes to nothing.
        assert!(g.ball_box(&[1.025], &[0.01]).is_none());
    }

    #[test]
    fn cellbox_iteration_and_count() {
        let g = Grid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![0.25, 0.25]).unwrap();
        let b = CellBox::new(&[1, 2], &[2, 3]);
        assert_eq!(b.count(), 4);
        let cells: Vec<usize> = b.iter_flat(&g).collect();
        assert_eq!(cells, vec![6, 7, 10, 11]);
        assert!(b.contains_box(&CellBox::new(&[1, 2], &[1, 2])));
        assert!(!b.contains_box(&CellBox::new(&[0, 2], &[1, 2])));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// quantize_under(g, r) is a subset of quantize_over(g, r).
            #[test]
            fn under_subset_of_over(
                a in -1.0f64..6.0,
                w in 0.0f64..4.0,
                b in -1.0f64..6.0,
                h in 0.0f64..4.0,
            ) {
                let g = Grid::new(vec![0.0, 0.0], vec![5.0, 5.0], vec![0.25, 0.25]).unwrap();
                let rect = HyperRect::new(vec![a, b], vec![a + w, b + h]).unwrap();
                let under: Vec<usize> = flats(&g, g.under_box(&rect));
                let over: Vec<usize> = flats(&g, g.over_box(&rect));
                for c in &under {
                    prop_assert!(over.contains(c));
                }
                // Both agree with the brute-force oracles.
                prop_assert_eq!(under, under_oracle(&g, &rect));
                prop_assert_eq!(over, over_oracle(&g, &rect));
            }
        }
    }
}
