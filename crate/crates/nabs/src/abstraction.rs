use crate::cellset::CellSet;
use crate::error::{Error, Result};
use crate::grid::{CellBox, Grid, MAX_DIM};
use crate::models::ModelSpec;
use rayon::prelude::*;

/// Dense per-(state, input) storage of one cell box per pair, the common
/// layout of the forward table and the backward hulls. Flat pair index is
/// `state_flat * |U| + input_flat`; corner records hold the lower then upper
/// state multi-index.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBoxes {
    state_grid: Grid,
    input_grid: Grid,
    flags: Vec<u8>,
    corners: Vec<i32>,
}

impl PairBoxes {
    pub fn empty(state_grid: Grid, input_grid: Grid) -> Result<Self> {
        let pairs = state_grid
            .num_cells()
            .checked_mul(input_grid.num_cells())
            .ok_or_else(|| Error::InvalidGrid("pair count overflows".into()))?;
        let n = state_grid.dim();
        Ok(PairBoxes {
            state_grid,
            input_grid,
            flags: vec![0; pairs],
            corners: vec![0; pairs * 2 * n],
        })
    }

    /// Rebuilds from raw parts, validating corner ranges for flagged pairs.
    pub fn from_raw(
        state_grid: Grid,
        input_grid: Grid,
        flags: Vec<u8>,
        corners: Vec<i32>,
    ) -> Result<Self> {
        let pairs = state_grid
            .num_cells()
            .checked_mul(input_grid.num_cells())
            .ok_or_else(|| Error::InvalidGrid("pair count overflows".into()))?;
        let n = state_grid.dim();
        if flags.len() != pairs || corners.len() != pairs * 2 * n {
            return Err(Error::Format("table length mismatch".into()));
        }
        for (p, &f) in flags.iter().enumerate() {
            if f > 1 {
                return Err(Error::Format(format!("pair {p}: flag byte {f}")));
            }
            if f == 1 {
                let rec = &corners[p * 2 * n..(p + 1) * 2 * n];
                for i in 0..n {
                    let (lo, hi) = (rec[i], rec[n + i]);
                    if lo < 0 || hi < lo || hi as u32 >= state_grid.counts()[i] {
                        return Err(Error::Format(format!(
                            "pair {p}: corner ({lo}, {hi}) outside grid"
                        )));
                    }
                }
            }
        }
        Ok(PairBoxes { state_grid, input_grid, flags, corners })
    }

    pub fn state_grid(&self) -> &Grid {
        &self.state_grid
    }

    pub fn input_grid(&self) -> &Grid {
        &self.input_grid
    }

    pub fn num_pairs(&self) -> usize {
        self.flags.len()
    }

    pub fn pair_index(&self, state: usize, input: usize) -> usize {
        state * self.input_grid.num_cells() + input
    }

    pub fn split_pair(&self, pair: usize) -> (usize, usize) {
        let nu = self.input_grid.num_cells();
        (pair / nu, pair % nu)
    }

    pub fn get_pair(&self, pair: usize) -> Option<CellBox> {
        if self.flags[pair] == 0 {
            return None;
        }
        let n = self.state_grid.dim();
        let rec = &self.corners[pair * 2 * n..(pair + 1) * 2 * n];
        let mut lo = [0u32; MAX_DIM];
        let mut hi = [0u32; MAX_DIM];
        for i in 0..n {
            lo[i] = rec[i] as u32;
            hi[i] = rec[n + i] as u32;
        }
        Some(CellBox::new(&lo[..n], &hi[..n]))
    }

    pub fn get(&self, state: usize, input: usize) -> Option<CellBox> {
        self.get_pair(self.pair_index(state, input))
    }

    pub fn set_pair(&mut self, pair: usize, cbox: Option<CellBox>) {
        let n = self.state_grid.dim();
        match cbox {
            None => self.flags[pair] = 0,
            Some(b) => {
                self.flags[pair] = 1;
                let rec = &mut self.corners[pair * 2 * n..(pair + 1) * 2 * n];
                for i in 0..n {
                    rec[i] = b.lo()[i] as i32;
                    rec[n + i] = b.hi()[i] as i32;
                }
            }
        }
    }

    /// Number of flagged (admissible / nonempty) pairs.
    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f == 1).count()
    }

    /// Total transition count in the expanded convention: the sum over
    /// flagged pairs of the number of cells each box spans.
    pub fn expanded_count(&self) -> u64 {
        (0..self.num_pairs())
            .into_par_iter()
            .map(|p| self.get_pair(p).map_or(0, |b| b.count()))
            .sum()
    }

    pub(crate) fn flags(&self) -> &[u8] {
        &self.flags
    }

    pub(crate) fn corners(&self) -> &[i32] {
        &self.corners
    }

    /// True when every cell of the box is in `set`.
    pub fn box_in_set(&self, b: &CellBox, set: &CellSet) -> bool {
        b.iter_flat(&self.state_grid).all(|c| set.contains(c))
    }
}

/// Forward abstraction: per (state cell, input cell), the corner cells of the
/// over-approximated reachable rectangle, or inadmissible when that rectangle
/// leaves the state box.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractionTable {
    pub boxes: PairBoxes,
}

/// Per (successor cell, input cell), the exact bounding box of the
/// predecessor set, or empty when that cell is never reached under the input.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardHulls {
    pub boxes: PairBoxes,
}

/// Bytes a table of this shape occupies on disk (records only; the header is
/// a few hundred bytes).
pub fn table_record_bytes(state_grid: &Grid, input_grid: &Grid) -> u64 {
    let pairs = state_grid.num_cells() as u64 * input_grid.num_cells() as u64;
    pairs * (1 + 2 * state_grid.dim() as u64 * 4)
}

/// Builds the forward abstraction by evaluating the reachable rectangle of
/// every (state cell, input cell) pair at the cell center and radius.
pub fn build_forward(
    model: &ModelSpec,
    state_grid: &Grid,
    input_grid: &Grid,
    disk_budget_bytes: Option<u64>,
) -> Result<AbstractionTable> {
    check_grid_covers(state_grid, &model.state_box, "state")?;
    check_grid_covers(input_grid, &model.input_box, "input")?;
    if let Some(budget) = disk_budget_bytes {
        let needed = table_record_bytes(state_grid, input_grid);
        if needed > budget {
            return Err(Error::BudgetExceeded { needed, budget });
        }
    }

    let n = state_grid.dim();
    let nu = input_grid.num_cells();
    let cell_radius = state_grid.cell_radius();

    // The growth radius depends only on the input cell: one evaluation per
    // input, reused across all states.
    let growth: Vec<Vec<f64>> = (0..nu)
        .map(|u| model.growth_radius(&cell_radius, &input_grid.center_of_flat(u)))
        .collect::<Result<_>>()?;
    let input_centers: Vec<Vec<f64>> = (0..nu).map(|u| input_grid.center_of_flat(u)).collect();

    let mut table = PairBoxes::empty(state_grid.clone(), input_grid.clone())?;
    let ns = state_grid.num_cells();
    let rows: Vec<Vec<(u8, CellBox)>> = (0..ns)
        .into_par_iter()
        .map(|s| {
            let center = state_grid.center_of_flat(s);
            let mut row = Vec::with_capacity(nu);
            for u in 0..nu {
                let flow = model
                    .nominal_flow(&center, &input_centers[u])
                    .expect("cell centers are finite");
                let rect = crate::grid::HyperRect::from_center_radius(&flow, &growth[u])
                    .expect("growth radius is nonnegative");
                if state_grid.contains_rect(&rect) {
                    let b = state_grid
                        .over_box(&rect)
                        .expect("rect inside the grid quantizes to at least one cell");
                    row.push((1u8, b));
                } else {
                    row.push((0u8, CellBox::new(&vec![0; n], &vec![0; n])));
                }
            }
            row
        })
        .collect();
    for (s, row) in rows.into_iter().enumerate() {
        for (u, (flag, b)) in row.into_iter().enumerate() {
            let pair = table.pair_index(s, u);
            table.set_pair(pair, if flag == 1 { Some(b) } else { None });
        }
    }
    Ok(AbstractionTable { boxes: table })
}

fn check_grid_covers(grid: &Grid, rect: &crate::grid::HyperRect, what: &str) -> Result<()> {
    let ok = grid
        .lb()
        .iter()
        .zip(rect.lo())
        .all(|(a, b)| (a - b).abs() <= 1e-9)
        && grid.ub().iter().zip(rect.hi()).all(|(a, b)| (a - b).abs() <= 1e-9);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidGrid(format!("{what} grid does not cover the model box")))
    }
}

/// One linear scan over forward entries, accumulating per (successor, input)
/// the min/max predecessor multi-indices. Sharded by input cell; shards write
/// disjoint outputs, so the result is independent of thread count.
pub fn build_backward(table: &AbstractionTable) -> Result<BackwardHulls> {
    let boxes = &table.boxes;
    let sg = boxes.state_grid();
    let n = sg.dim();
    let ns = sg.num_cells();
    let nu = boxes.input_grid().num_cells();

    let per_input: Vec<Vec<(u32, [u32; MAX_DIM], [u32; MAX_DIM])>> = (0..nu)
        .into_par_iter()
        .map(|u| {
            // hull[s'] = (hit, lo, hi) over predecessors of s' under input u
            let mut hull = vec![(0u32, [u32::MAX; MAX_DIM], [0u32; MAX_DIM]); ns];
            for s in 0..ns {
                if let Some(b) = boxes.get(s, u) {
                    let multi = sg.flat_to_multi(s);
                    for succ in b.iter_flat(sg) {
                        let h = &mut hull[succ];
                        h.0 = 1;
                        for i in 0..n {
                            h.1[i] = h.1[i].min(multi[i]);
                            h.2[i] = h.2[i].max(multi[i]);
                        }
                    }
                }
            }
            hull
        })
        .collect();

    let mut out = PairBoxes::empty(sg.clone(), boxes.input_grid().clone())?;
    for (u, hull) in per_input.into_iter().enumerate() {
        for (s, (hit, lo, hi)) in hull.into_iter().enumerate() {
            if hit == 1 {
                let pair = out.pair_index(s, u);
                out.set_pair(pair, Some(CellBox::new(&lo[..n], &hi[..n])));
            }
        }
    }
    Ok(BackwardHulls { boxes: out })
}

/// Pre operator: states having some admissible input whose entire successor
/// set lies in `p`.
pub fn pre(table: &AbstractionTable, p: &CellSet) -> CellSet {
    let boxes = &table.boxes;
    let ns = boxes.state_grid().num_cells();
    let nu = boxes.input_grid().num_cells();
    assert_eq!(p.len(), ns, "pre target must range over the state grid");
    let mut out = CellSet::new(ns);
    let winners: Vec<usize> = (0..ns)
        .into_par_iter()
        .filter(|&s| {
            (0..nu).any(|u| boxes.get(s, u).is_some_and(|b| boxes.box_in_set(&b, p)))
        })
        .collect();
    for s in winners {
        out.insert(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::HyperRect;

    /// 1D toy: 3 cells, 1 input, transitions 0 -> {1}, 1 -> {2}, 2 -> {2}.
    pub(crate) fn toy_table() -> AbstractionTable {
        let sg = Grid::new(vec![0.0], vec![3.0], vec![1.0]).unwrap();
        let ug = Grid::new(vec![0.0], vec![1.0], vec![1.0]).unwrap();
        let mut boxes = PairBoxes::empty(sg, ug).unwrap();
        boxes.set_pair(0, Some(CellBox::new(&[1], &[1])));
        boxes.set_pair(1, Some(CellBox::new(&[2], &[2])));
        boxes.set_pair(2, Some(CellBox::new(&[2], &[2])));
        AbstractionTable { boxes }
    }

    fn desk_car2d() -> (ModelSpec, Grid, Grid) {
        let model = ModelSpec::builtin("car2d").unwrap();
        let sg = Grid::new(vec![0.0, 0.0], vec![5.0, 5.0], vec![0.1, 0.1]).unwrap();
        let ug =
            Grid::with_target_eta(vec![-1.0, -1.0], vec![1.0, 1.0], vec![0.23, 0.23]).unwrap();
        (model, sg, ug)
    }

    #[test]
    fn desk_grid_pair_count() {
        let (model, sg, ug) = desk_car2d();
        assert_eq!(sg.num_cells(), 2500);
        assert_eq!(ug.num_cells(), 81);
        let table = build_forward(&model, &sg, &ug, None).unwrap();
        assert_eq!(table.boxes.num_pairs(), 202_500);
        // Interior cells are admissible; cells pushed over the edge are not.
        assert!(table.boxes.flagged_count() > 0);
        assert!(table.boxes.flagged_count() < table.boxes.num_pairs());
    }

    #[test]
    fn forward_corners_match_quantized_reach_rects() {
        let (model, sg, ug) = desk_car2d();
        let table = build_forward(&model, &sg, &ug, None).unwrap();
        let radius = sg.cell_radius();
        // Spot-check 1000 deterministically spread pairs against a fresh
        // recomputation through the public one-pair path.
        let total = table.boxes.num_pairs();
        for k in 0..1000 {
            let pair = k * (total / 1000) + 17;
            let (s, u) = table.boxes.split_pair(pair);
            let rect = model
                .reach_rect(&sg.center_of_flat(s), &radius, &ug.center_of_flat(u))
                .unwrap();
            let expect = if sg.contains_rect(&rect) {
                Some(sg.over_box(&rect).unwrap())
            } else {
                None
            };
            assert_eq!(table.boxes.get(s, u), expect, "pair {pair}");
        }
    }

    #[test]
    fn budget_guard_trips() {
        let (model, sg, ug) = desk_car2d();
        let err = build_forward(&model, &sg, &ug, Some(1000)).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
    }

    #[test]
    fn backward_toy_hand_enumeration() {
        let hulls = build_backward(&toy_table()).unwrap();
        assert_eq!(hulls.boxes.get(0, 0), None);
        assert_eq!(hulls.boxes.get(1, 0), Some(CellBox::new(&[0], &[0])));
        assert_eq!(hulls.boxes.get(2, 0), Some(CellBox::new(&[1], &[2])));
    }

    #[test]
    fn backward_hulls_contain_all_predecessors() {
        let model = ModelSpec::builtin("car2d").unwrap();
        let sg = Grid::new(vec![0.0, 0.0], vec![5.0, 5.0], vec![0.5, 0.5]).unwrap();
        let ug = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![0.5, 0.5]).unwrap();
        let table = build_forward(&model, &sg, &ug, None).unwrap();
        let hulls = build_backward(&table).unwrap();
        // Exhaustive: every forward edge is inside the matching hull.
        for s in 0..sg.num_cells() {
            let multi = sg.flat_to_multi(s);
            for u in 0..ug.num_cells() {
                if let Some(b) = table.boxes.get(s, u) {
                    for succ in b.iter_flat(&sg) {
                        let hull = hulls.boxes.get(succ, u).expect("hit cell has a hull");
                        assert!(hull.contains_multi(&multi));
                    }
                }
            }
        }
        // And every hull is tight: its corner cells are actual predecessors.
        for s in 0..sg.num_cells() {
            for u in 0..ug.num_cells() {
                if let Some(hull) = hulls.boxes.get(s, u) {
                    let pred_boxes: Vec<CellBox> = (0..sg.num_cells())
                        .filter_map(|x| {
                            table.boxes.get(x, u).and_then(|b| {
                                b.iter_flat(&sg).any(|c| c == s).then(|| {
                                    let m = sg.flat_to_multi(x);
                                    CellBox::new(&m, &m)
                                })
                            })
                        })
                        .collect();
                    assert!(!pred_boxes.is_empty());
                    for i in 0..sg.dim() {
                        let lo = pred_boxes.iter().map(|b| b.lo()[i]).min().unwrap();
                        let hi = pred_boxes.iter().map(|b| b.hi()[i]).max().unwrap();
                        assert_eq!(hull.lo()[i], lo);
                        assert_eq!(hull.hi()[i], hi);
                    }
                }
            }
        }
    }

    /// With u = 0 and no disturbance the planar car is symmetric: the
    /// backward hull of a cell equals its forward box.
    #[test]
    fn symmetric_dynamics_reflect() {
        let mut model = ModelSpec::builtin("car2d").unwrap();
        model.dist_radius = vec![0.0, 0.0];
        let sg = Grid::new(vec![0.0, 0.0], vec![5.0, 5.0], vec![0.25, 0.25]).unwrap();
        // Input grid with a single cell centered exactly at u = 0.
        let ug = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![2.0, 2.0]).unwrap();
        assert_eq!(ug.center_of_flat(0), vec![0.0, 0.0]);
        let table = build_forward(&model, &sg, &ug, None).unwrap();
        let hulls = build_backward(&table).unwrap();
        for s in (0..sg.num_cells()).step_by(sg.num_cells() / 10) {
            let fwd = table.boxes.get(s, 0);
            // Interior cells: forward box equals backward hull by symmetry.
            let multi = sg.flat_to_multi(s);
            let interior = multi
                .iter()
                .zip(sg.counts())
                .all(|(k, c)| *k >= 2 && *k + 2 < *c);
            if interior {
                assert_eq!(fwd, hulls.boxes.get(s, 0), "cell {s}");
            }
        }
    }

    #[test]
    fn pre_examples() {
        let table = toy_table();
        let ns = 3;
        // P = everything: all states with at least one admissible input.
        let all = CellSet::from_indices(ns, 0..ns);
        assert_eq!(pre(&table, &all).count(), 3);
        // P = empty set: empty result.
        assert!(pre(&table, &CellSet::new(ns)).is_empty());
        // P = {2}: hand enumeration gives {1, 2}.
        let p = CellSet::from_indices(ns, [2]);
        let got = pre(&table, &p);
        assert_eq!(got.iter().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn pre_is_monotone() {
        let model = ModelSpec::builtin("car2d").unwrap();
        let sg = Grid::new(vec![0.0, 0.0], vec![5.0, 5.0], vec![0.5, 0.5]).unwrap();
        let ug = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let table = build_forward(&model, &sg, &ug, None).unwrap();
        let ns = sg.num_cells();
        // Nested rect-shaped sets P ⊆ Q.
        let p_rect = HyperRect::new(vec![1.0, 1.0], vec![3.0, 3.0]).unwrap();
        let q_rect = HyperRect::new(vec![0.5, 0.5], vec![4.0, 4.0]).unwrap();
        let to_set = |r: &HyperRect| {
            let b = sg.over_box(r).unwrap();
            CellSet::from_indices(ns, b.iter_flat(&sg))
        };
        let pre_p = pre(&table, &to_set(&p_rect));
        let pre_q = pre(&table, &to_set(&q_rect));
        assert!(pre_p.is_subset_of(&pre_q));
    }
}
