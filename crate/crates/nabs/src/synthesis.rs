//! On-the-fly reach-avoid synthesis from corrected transition
//! representations, the baseline Pre fixed point it must stay inside, and an
//! independent validator that model-checks any produced controller against
//! the exact table.

use crate::abstraction::AbstractionTable;
use crate::cellset::CellSet;
use crate::error::{Error, Result};
use crate::grid::{Grid, HyperRect};
use crate::repr::TransitionSource;
use rayon::prelude::*;

/// Continuous reach-avoid specification: reach some goal rect while never
/// touching an avoid rect.
#[derive(Debug, Clone)]
pub struct ReachAvoidSpec {
    pub goal: Vec<HyperRect>,
    pub avoid: Vec<HyperRect>,
}

impl ReachAvoidSpec {
    pub fn new(goal: Vec<HyperRect>, avoid: Vec<HyperRect>) -> Result<Self> {
        for g in &goal {
            for a in &avoid {
                if g.intersects(a) {
                    return Err(Error::InvalidSpec(
                        "goal and avoid rectangles overlap".into(),
                    ));
                }
            }
        }
        Ok(ReachAvoidSpec { goal, avoid })
    }

    pub fn check_within(&self, domain: &HyperRect) -> Result<()> {
        for r in self.goal.iter().chain(&self.avoid) {
            if !domain.contains_rect(r) {
                return Err(Error::InvalidSpec(format!(
                    "specification rect {r:?} leaves the state box"
                )));
            }
        }
        Ok(())
    }
}

/// Discrete under-approximation of the goal and over-approximation of the
/// avoid set. Errs on the safe side in both directions.
pub fn discretize_spec(spec: &ReachAvoidSpec, grid: &Grid) -> Result<(CellSet, CellSet)> {
    let ns = grid.num_cells();
    let mut w0 = CellSet::new(ns);
    for g in &spec.goal {
        if let Some(b) = grid.under_box(g) {
            for c in b.iter_flat(grid) {
                w0.insert(c);
            }
        }
    }
    let mut avoid = CellSet::new(ns);
    for a in &spec.avoid {
        if let Some(b) = grid.over_box(a) {
            for c in b.iter_flat(grid) {
                avoid.insert(c);
            }
        }
    }
    if w0.intersects(&avoid) {
        return Err(Error::InvalidSpec(
            "discretized goal and avoid sets overlap".into(),
        ));
    }
    Ok((w0, avoid))
}

/// Memoryless feedback controller: winning set, per-cell insertion stage, and
/// the valid input cells collected when the cell was won. Goal cells carry
/// rank 0 and no inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub state_grid: Grid,
    pub input_grid: Grid,
    pub w0: CellSet,
    pub winning: CellSet,
    /// Insertion stage per flat cell; `u32::MAX` outside the winning set.
    pub ranks: Vec<u32>,
    /// Valid input cells per flat cell, ascending; empty outside `L \ W_0`.
    pub inputs: Vec<Vec<u32>>,
}

impl Controller {
    pub fn valid_inputs(&self, cell: usize) -> &[u32] {
        &self.inputs[cell]
    }

    /// Number of state-input pairs stored.
    pub fn pair_count(&self) -> u64 {
        self.inputs.iter().map(|v| v.len() as u64).sum()
    }
}

/// Per-iteration sets kept for the testable lemma statements and the
/// full-pool cross-check.
#[derive(Debug, Clone, Default)]
pub struct SynthesisTrace {
    /// Candidate pool S_i per iteration.
    pub pools: Vec<CellSet>,
    /// New winners W_{i+1} per iteration.
    pub winners: Vec<CellSet>,
}

fn check_sets(grid: &Grid, w0: &CellSet, avoid: &CellSet) -> Result<()> {
    let ns = grid.num_cells();
    if w0.len() != ns || avoid.len() != ns {
        return Err(Error::Provenance(
            "goal/avoid sets range over a different grid".into(),
        ));
    }
    if w0.intersects(avoid) {
        return Err(Error::InvalidSpec("goal cells intersect avoid cells".into()));
    }
    Ok(())
}

/// Reach-avoid synthesis driven by a corrected representation: each round
/// expands a candidate pool from the backward boxes of the current frontier,
/// then keeps the candidates whose forward box stays inside the winning set.
///
/// With `full_pool` the pool is expanded from the whole winning set instead
/// of the frontier; the result must be identical and the flag exists to
/// cross-check exactly that.
pub fn synthesize_neural(
    source: &dyn TransitionSource,
    w0: &CellSet,
    avoid: &CellSet,
    full_pool: bool,
) -> Result<(Controller, SynthesisTrace)> {
    let grid = source.state_grid().clone();
    check_sets(&grid, w0, avoid)?;
    let ns = grid.num_cells();
    let nu = source.input_grid().num_cells();

    let mut winning = w0.clone();
    let mut ranks = vec![u32::MAX; ns];
    for c in w0.iter() {
        ranks[c] = 0;
    }
    let mut inputs: Vec<Vec<u32>> = vec![Vec::new(); ns];
    let mut frontier: Vec<usize> = w0.iter().collect();
    let mut trace = SynthesisTrace::default();

    let mut stage: u32 = 0;
    while !frontier.is_empty() {
        stage += 1;
        if stage as usize > ns + 1 {
            return Err(Error::Synthesis(
                "iteration cap exceeded; winning set failed to stabilize".into(),
            ));
        }
        let pool_cells: Vec<usize> = if full_pool { winning.iter().collect() } else { frontier };

        // Candidate pool: union of backward boxes over the pool, all inputs.
        let pool = pool_cells
            .par_iter()
            .fold(
                || CellSet::new(ns),
                |mut acc, &c| {
                    for u in 0..nu {
                        if let Some(b) = source.backward_box(c, u) {
                            for cell in b.iter_flat(&grid) {
                                acc.insert(cell);
                            }
                        }
                    }
                    acc
                },
            )
            .reduce(
                || CellSet::new(ns),
                |mut a, b| {
                    a.union_with(&b);
                    a
                },
            );

        let mut candidates = pool.clone();
        candidates.difference_with(&winning);
        candidates.difference_with(avoid);

        // Winner selection: candidates with some input whose forward box is
        // nonempty and contained in the current winning set.
        let cand_list: Vec<usize> = candidates.iter().collect();
        let winners: Vec<(usize, Vec<u32>)> = cand_list
            .par_iter()
            .filter_map(|&c| {
                let mut us = Vec::new();
                for u in 0..nu {
                    if let Some(b) = source.forward_box(c, u) {
                        if b.iter_flat(&grid).all(|cell| winning.contains(cell)) {
                            us.push(u as u32);
                        }
                    }
                }
                if us.is_empty() {
                    None
                } else {
                    Some((c, us))
                }
            })
            .collect();

        let mut new_frontier = Vec::with_capacity(winners.len());
        let mut winner_set = CellSet::new(ns);
        for (c, us) in winners {
            winner_set.insert(c);
            new_frontier.push(c);
            ranks[c] = stage;
            inputs[c] = us;
        }
        winning.union_with(&winner_set);
        trace.pools.push(pool);
        trace.winners.push(winner_set);
        frontier = new_frontier;
    }

    Ok((
        Controller {
            state_grid: grid,
            input_grid: source.input_grid().clone(),
            w0: w0.clone(),
            winning,
            ranks,
            inputs,
        },
        trace,
    ))
}

/// Baseline synthesis: the least fixed point of P -> W_0 ∪ (Pre(P) \ A) over
/// the exact table, with a maximally permissive controller (every input valid
/// at the cell's first winning stage).
pub fn synthesize_baseline(
    table: &AbstractionTable,
    w0: &CellSet,
    avoid: &CellSet,
) -> Result<Controller> {
    let grid = table.boxes.state_grid().clone();
    check_sets(&grid, w0, avoid)?;
    let ns = grid.num_cells();
    let nu = table.boxes.input_grid().num_cells();

    let mut winning = w0.clone();
    let mut ranks = vec![u32::MAX; ns];
    for c in w0.iter() {
        ranks[c] = 0;
    }
    let mut inputs: Vec<Vec<u32>> = vec![Vec::new(); ns];

    let mut stage: u32 = 0;
    loop {
        stage += 1;
        if stage as usize > ns + 1 {
            return Err(Error::Synthesis(
                "iteration cap exceeded; winning set failed to stabilize".into(),
            ));
        }
        let winners: Vec<(usize, Vec<u32>)> = (0..ns)
            .into_par_iter()
            .filter_map(|c| {
                if winning.contains(c) || avoid.contains(c) {
                    return None;
                }
                let mut us = Vec::new();
                for u in 0..nu {
                    if let Some(b) = table.boxes.get(c, u) {
                        if b.iter_flat(&grid).all(|cell| winning.contains(cell)) {
                            us.push(u as u32);
                        }
                    }
                }
                if us.is_empty() {
                    None
                } else {
                    Some((c, us))
                }
            })
            .collect();
        if winners.is_empty() {
            break;
        }
        for (c, us) in winners {
            winning.insert(c);
            ranks[c] = stage;
            inputs[c] = us;
        }
    }

    Ok(Controller {
        state_grid: grid,
        input_grid: table.boxes.input_grid().clone(),
        w0: w0.clone(),
        winning,
        ranks,
        inputs,
    })
}

/// Outcome of an independent controller check.
#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Pass,
    Fail { cell: usize, input: Option<usize>, reason: String },
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

/// Model-checks a controller against the exact table: every stored pair must
/// be admissible, its true successors must avoid the avoid set, stay winning,
/// and strictly decrease the insertion rank; every non-goal winning cell must
/// have at least one input. A pass certifies that every closed-loop run from
/// the winning set reaches the goal cells.
pub fn validate_controller(
    table: &AbstractionTable,
    controller: &Controller,
    w0: &CellSet,
    avoid: &CellSet,
) -> Verdict {
    let grid = table.boxes.state_grid();
    let ns = grid.num_cells();
    if controller.state_grid != *table.boxes.state_grid()
        || controller.input_grid != *table.boxes.input_grid()
    {
        return Verdict::Fail { cell: 0, input: None, reason: "grid mismatch".into() };
    }
    if &controller.w0 != w0 {
        return Verdict::Fail { cell: 0, input: None, reason: "goal set mismatch".into() };
    }
    for c in 0..ns {
        let is_winning = controller.winning.contains(c);
        let is_goal = w0.contains(c);
        if is_goal && !is_winning {
            return Verdict::Fail { cell: c, input: None, reason: "goal cell not winning".into() };
        }
        if is_winning && avoid.contains(c) {
            return Verdict::Fail { cell: c, input: None, reason: "winning cell in avoid".into() };
        }
        if is_winning != (controller.ranks[c] != u32::MAX) {
            return Verdict::Fail { cell: c, input: None, reason: "rank/winning mismatch".into() };
        }
        if is_winning && !is_goal && controller.inputs[c].is_empty() {
            return Verdict::Fail {
                cell: c,
                input: None,
                reason: "winning cell without inputs".into(),
            };
        }
        if (!is_winning || is_goal) && !controller.inputs[c].is_empty() {
            return Verdict::Fail {
                cell: c,
                input: None,
                reason: "inputs stored outside the controller domain".into(),
            };
        }
        for &u in &controller.inputs[c] {
            let Some(b) = table.boxes.get(c, u as usize) else {
                return Verdict::Fail {
                    cell: c,
                    input: Some(u as usize),
                    reason: "inadmissible pair in controller".into(),
                };
            };
            for succ in b.iter_flat(grid) {
                if avoid.contains(succ) {
                    return Verdict::Fail {
                        cell: c,
                        input: Some(u as usize),
                        reason: format!("successor {succ} lies in the avoid set"),
                    };
                }
                if !controller.winning.contains(succ) {
                    return Verdict::Fail {
                        cell: c,
                        input: Some(u as usize),
                        reason: format!("successor {succ} leaves the winning set"),
                    };
                }
                if controller.ranks[succ] >= controller.ranks[c] {
                    return Verdict::Fail {
                        cell: c,
                        input: Some(u as usize),
                        reason: format!("successor {succ} does not decrease rank"),
                    };
                }
            }
        }
    }
    Verdict::Pass
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::{build_backward, build_forward, BackwardHulls, PairBoxes};
    use crate::grid::CellBox;
    use crate::models::ModelSpec;
    use crate::repr::LookupSource;

    fn toy_table() -> AbstractionTable {
        let sg = Grid::new(vec![0.0], vec![3.0], vec![1.0]).unwrap();
        let ug = Grid::new(vec![0.0], vec![1.0], vec![1.0]).unwrap();
        let mut boxes = PairBoxes::empty(sg, ug).unwrap();
        boxes.set_pair(0, Some(CellBox::new(&[1], &[1])));
        boxes.set_pair(1, Some(CellBox::new(&[2], &[2])));
        boxes.set_pair(2, Some(CellBox::new(&[2], &[2])));
        AbstractionTable { boxes }
    }

    fn desk_instance() -> (AbstractionTable, BackwardHulls, CellSet, CellSet) {
        let model = ModelSpec::builtin("car2d").unwrap();
        let sg = Grid::new(vec![0.0, 0.0], vec![5.0, 5.0], vec![0.25, 0.25]).unwrap();
        let ug = Grid::with_target_eta(vec![-1.0, -1.0], vec![1.0, 1.0], vec![0.5, 0.5]).unwrap();
        let table = build_forward(&model, &sg, &ug, None).unwrap();
        let hulls = build_backward(&table).unwrap();
        let spec = ReachAvoidSpec::new(
            vec![HyperRect::new(vec![3.2, 3.2], vec![4.8, 4.8]).unwrap()],
            vec![HyperRect::new(vec![2.0, 2.0], vec![2.5, 2.5]).unwrap()],
        )
        .unwrap();
        let (w0, avoid) = discretize_spec(&spec, &sg).unwrap();
        (table, hulls, w0, avoid)
    }

    #[test]
    fn discretize_desk_goal_ball() {
        let grid = Grid::new(vec![0.0, 0.0], vec![5.0, 5.0], vec![0.1, 0.1]).unwrap();
        let spec = ReachAvoidSpec::new(
            vec![HyperRect::new(vec![3.2, 3.2], vec![4.8, 4.8]).unwrap()],
            vec![],
        )
        .unwrap();
        let (w0, avoid) = discretize_spec(&spec, &grid).unwrap();
        assert_eq!(w0.count(), 256);
        assert!(avoid.is_empty());
    }

    #[test]
    fn discretize_guards_against_overlap() {
        let grid = Grid::new(vec![0.0], vec![5.0], vec![0.5]).unwrap();
        // Boundary-touching rects are rejected up front by the spec type.
        assert!(ReachAvoidSpec::new(
            vec![HyperRect::new(vec![1.0], vec![2.0]).unwrap()],
            vec![HyperRect::new(vec![2.0], vec![2.3]).unwrap()],
        )
        .is_err());
        // Bypassing that check, the quantized sets collide in the boundary
        // cell and discretization aborts.
        let touching = ReachAvoidSpec {
            goal: vec![HyperRect::new(vec![1.0], vec![2.0]).unwrap()],
            avoid: vec![HyperRect::new(vec![2.0], vec![2.3]).unwrap()],
        };
        assert!(discretize_spec(&touching, &grid).is_err());
        // Strictly disjoint rects never collide after quantization: the goal
        // is under-approximated and the avoid over-approximation can only
        // reach cells that intersect the avoid rect itself.
        let spec = ReachAvoidSpec::new(
            vec![HyperRect::new(vec![1.0], vec![2.0]).unwrap()],
            vec![HyperRect::new(vec![2.1], vec![2.4]).unwrap()],
        )
        .unwrap();
        let (w0, avoid) = discretize_spec(&spec, &grid).unwrap();
        assert!(!w0.intersects(&avoid));
    }

    #[test]
    fn toy_fixed_point_by_hand() {
        let table = toy_table();
        let hulls = build_backward(&table).unwrap();
        let w0 = CellSet::from_indices(3, [2]);
        let avoid = CellSet::new(3);
        let base = synthesize_baseline(&table, &w0, &avoid).unwrap();
        assert_eq!(base.winning.iter().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(base.ranks[2], 0);
        assert_eq!(base.ranks[1], 1);
        assert_eq!(base.ranks[0], 2);
        assert_eq!(base.inputs[1], vec![0]);
        assert_eq!(base.inputs[0], vec![0]);
        assert!(base.inputs[2].is_empty());

        let src = LookupSource { table: &table, hulls: &hulls };
        let (neural, trace) = synthesize_neural(&src, &w0, &avoid, false).unwrap();
        assert_eq!(neural, base);
        // Two productive iterations plus the empty closing one.
        assert_eq!(trace.winners.iter().filter(|w| !w.is_empty()).count(), 2);
    }

    #[test]
    fn empty_goal_returns_empty_controller() {
        let table = toy_table();
        let hulls = build_backward(&table).unwrap();
        let src = LookupSource { table: &table, hulls: &hulls };
        let w0 = CellSet::new(3);
        let (c, _) = synthesize_neural(&src, &w0, &CellSet::new(3), false).unwrap();
        assert!(c.winning.is_empty());
        assert_eq!(c.pair_count(), 0);
    }

    #[test]
    fn lookup_equals_baseline_on_desk_instance() {
        let (table, hulls, w0, avoid) = desk_instance();
        let base = synthesize_baseline(&table, &w0, &avoid).unwrap();
        let src = LookupSource { table: &table, hulls: &hulls };
        let (neural, _) = synthesize_neural(&src, &w0, &avoid, false).unwrap();
        // Exact equality: winning set, ranks, and per-cell input sets.
        assert_eq!(neural, base);
        assert!(base.winning.count() > w0.count());
    }

    #[test]
    fn full_pool_gives_identical_result() {
        let (table, hulls, w0, avoid) = desk_instance();
        let src = LookupSource { table: &table, hulls: &hulls };
        let (a, _) = synthesize_neural(&src, &w0, &avoid, false).unwrap();
        let (b, _) = synthesize_neural(&src, &w0, &avoid, true).unwrap();
        assert_eq!(a, b);
    }

    /// Candidate pool soundness: the truly newly-winnable cells of each
    /// baseline round are inside the pool of the matching neural round.
    #[test]
    fn pool_covers_newly_winnable() {
        let (table, hulls, w0, avoid) = desk_instance();
        let src = LookupSource { table: &table, hulls: &hulls };
        let (_, trace) = synthesize_neural(&src, &w0, &avoid, false).unwrap();
        let grid = table.boxes.state_grid();
        let ns = grid.num_cells();
        let nu = table.boxes.input_grid().num_cells();
        // Brute-force round-by-round recomputation of the baseline stages.
        let mut p = w0.clone();
        for (pool, winners) in trace.pools.iter().zip(&trace.winners) {
            let mut truly_new = CellSet::new(ns);
            for c in 0..ns {
                if p.contains(c) || avoid.contains(c) {
                    continue;
                }
                let wins = (0..nu).any(|u| {
                    table
                        .boxes
                        .get(c, u)
                        .is_some_and(|b| b.iter_flat(grid).all(|x| p.contains(x)))
                });
                if wins {
                    truly_new.insert(c);
                }
            }
            assert!(truly_new.is_subset_of(pool), "pool misses a winnable cell");
            assert_eq!(&truly_new, winners, "lookup winners must be exact");
            p.union_with(&truly_new);
        }
    }

    struct InflatedSource<'a> {
        inner: LookupSource<'a>,
    }

    impl TransitionSource for InflatedSource<'_> {
        fn state_grid(&self) -> &Grid {
            self.inner.state_grid()
        }

        fn input_grid(&self) -> &Grid {
            self.inner.input_grid()
        }

        fn forward_box(&self, s: usize, u: usize) -> Option<CellBox> {
            // One extra cell on every side, clipped to the grid.
            let grid = self.inner.state_grid();
            self.inner.forward_box(s, u).map(|b| {
                let lo: Vec<u32> = b.lo().iter().map(|v| v.saturating_sub(1)).collect();
                let hi: Vec<u32> = b
                    .hi()
                    .iter()
                    .zip(grid.counts())
                    .map(|(v, c)| (v + 1).min(c - 1))
                    .collect();
                CellBox::new(&lo, &hi)
            })
        }

        fn backward_box(&self, s: usize, u: usize) -> Option<CellBox> {
            self.inner.backward_box(s, u)
        }
    }

    /// A sound but conservative source can only shrink the winning set, and
    /// the result still passes the independent validator.
    #[test]
    fn conservative_source_shrinks_winning_set() {
        let (table, hulls, w0, avoid) = desk_instance();
        let base = synthesize_baseline(&table, &w0, &avoid).unwrap();
        let src = InflatedSource { inner: LookupSource { table: &table, hulls: &hulls } };
        let (neural, _) = synthesize_neural(&src, &w0, &avoid, false).unwrap();
        assert!(neural.winning.is_subset_of(&base.winning));
        assert!(neural.winning.count() < base.winning.count());
        assert!(validate_controller(&table, &neural, &w0, &avoid).is_pass());
    }

    #[test]
    fn validator_passes_baseline_and_catches_faults() {
        let (table, _, w0, avoid) = desk_instance();
        let base = synthesize_baseline(&table, &w0, &avoid).unwrap();
        assert!(validate_controller(&table, &base, &w0, &avoid).is_pass());

        // Fault injection: give one controlled cell an input whose true
        // successors touch the avoid set.
        let grid = table.boxes.state_grid();
        let nu = table.boxes.input_grid().num_cells();
        let (victim, bad_input) = base
            .winning
            .iter()
            .filter(|&c| !base.w0.contains(c))
            .find_map(|c| {
                (0..nu).find_map(|u| {
                    let hits_avoid = table
                        .boxes
                        .get(c, u)
                        .is_some_and(|b| b.iter_flat(grid).any(|s| avoid.contains(s)));
                    (hits_avoid && !base.inputs[c].contains(&(u as u32))).then_some((c, u as u32))
                })
            })
            .expect("some winning cell borders the avoid block");
        let mut broken = base.clone();
        broken.inputs[victim].push(bad_input);
        broken.inputs[victim].sort_unstable();
        let verdict = validate_controller(&table, &broken, &w0, &avoid);
        match verdict {
            Verdict::Fail { cell, input, .. } => {
                assert_eq!(cell, victim);
                assert_eq!(input, Some(bad_input as usize));
            }
            Verdict::Pass => panic!("fault not detected"),
        }

        // Vacuous pass: controller over the goal set only.
        let trivial = Controller {
            state_grid: base.state_grid.clone(),
            input_grid: base.input_grid.clone(),
            w0: w0.clone(),
            winning: w0.clone(),
            ranks: {
                let mut r = vec![u32::MAX; base.ranks.len()];
                for c in w0.iter() {
                    r[c] = 0;
                }
                r
            },
            inputs: vec![Vec::new(); base.ranks.len()],
        };
        assert!(validate_controller(&table, &trivial, &w0, &avoid).is_pass());
    }
}
