//! Controller compression for deployment: a classifier over input cells plus
//! an exception lookup table covering every state where the classifier's
//! argmax is invalid, and a closed-loop simulator for the deployed artifact.

use crate::cellset::CellSet;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::models::ModelSpec;
use crate::nn::{argmax, BatchSource, Mlp, MlpConfig, TrainReport};
use crate::repr::{Footprint, UnitScaler};
use crate::synthesis::{Controller, Verdict};
use ndarray::{Array2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Training set for controller compression: one record per controlled cell,
/// the target a multi-hot vector over input cells with ones at the valid
/// inputs.
#[derive(Debug, Clone)]
pub struct ControllerDataset {
    pub state_grid: Grid,
    pub input_grid: Grid,
    /// Cells of `L \ W_0`, ascending.
    pub cells: Vec<u32>,
    /// Valid input lists aligned with `cells`; each nonempty, ascending.
    pub valid: Vec<Vec<u32>>,
}

/// Multi-hot encoding of a valid-input set over `|U|` classes.
pub fn encode_input_set(num_inputs: usize, valid: &[u32], out: &mut [f64]) {
    debug_assert_eq!(out.len(), num_inputs);
    out.fill(0.0);
    for &u in valid {
        out[u as usize] = 1.0;
    }
}

/// Positions of the ones, ascending: the inverse of `encode_input_set`.
pub fn decode_input_set(code: &[f64]) -> Vec<u32> {
    code.iter()
        .enumerate()
        .filter(|(_, v)| **v == 1.0)
        .map(|(i, _)| i as u32)
        .collect()
}

pub fn build_controller_dataset(controller: &Controller) -> Result<ControllerDataset> {
    let mut cells = Vec::new();
    let mut valid = Vec::new();
    for c in controller.winning.iter() {
        if controller.w0.contains(c) {
            continue;
        }
        let inputs = controller.valid_inputs(c);
        if inputs.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "winning cell {c} has no valid inputs"
            )));
        }
        cells.push(c as u32);
        valid.push(inputs.to_vec());
    }
    Ok(ControllerDataset {
        state_grid: controller.state_grid.clone(),
        input_grid: controller.input_grid.clone(),
        cells,
        valid,
    })
}

pub struct ControllerBatchSource<'a> {
    ds: &'a ControllerDataset,
    sscale: UnitScaler,
}

impl<'a> ControllerBatchSource<'a> {
    pub fn new(ds: &'a ControllerDataset) -> Self {
        ControllerBatchSource { sscale: UnitScaler::from_grid(&ds.state_grid), ds }
    }
}

impl BatchSource for ControllerBatchSource<'_> {
    fn len(&self) -> usize {
        self.ds.cells.len()
    }

    fn input_dim(&self) -> usize {
        self.ds.state_grid.dim()
    }

    fn target_dim(&self) -> usize {
        self.ds.input_grid.num_cells()
    }

    fn fill(
        &mut self,
        indices: &[usize],
        mut inputs: ArrayViewMut2<f64>,
        mut targets: ArrayViewMut2<f64>,
    ) -> Result<()> {
        for (row, &idx) in indices.iter().enumerate() {
            let cell = self.ds.cells[idx] as usize;
            let center = self.ds.state_grid.center_of_flat(cell);
            let mut xr = inputs.row_mut(row);
            for (i, v) in center.iter().enumerate() {
                xr[i] = self.sscale.to_unit(i, *v);
            }
            encode_input_set(
                self.ds.input_grid.num_cells(),
                &self.ds.valid[idx],
                targets.row_mut(row).as_slice_mut().expect("row-contiguous targets"),
            );
        }
        Ok(())
    }
}

/// Deployable controller: classifier argmax off the exception set, exact
/// lookup on it. All answers are valid inputs of the original controller by
/// construction.
#[derive(Debug, Clone)]
pub struct CompressedController {
    pub net: Mlp,
    pub state_grid: Grid,
    pub input_grid: Grid,
    pub w0: CellSet,
    pub winning: CellSet,
    pub exceptions: CellSet,
    /// `(cell, valid inputs)` for every exception cell, sorted by cell.
    pub exception_inputs: Vec<(u32, Vec<u32>)>,
    pub err_c: f64,
}

/// Answer of the deployed controller at a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Query {
    Input(u32),
    GoalReached,
    OutsideWinning,
}

impl CompressedController {
    fn exception_lookup(&self, cell: u32) -> Option<&[u32]> {
        self.exception_inputs
            .binary_search_by_key(&cell, |e| e.0)
            .ok()
            .map(|i| self.exception_inputs[i].1.as_slice())
    }

    /// Ties and exception answers both break toward the lowest input index.
    pub fn query(&self, cell: usize) -> Query {
        if !self.winning.contains(cell) {
            return Query::OutsideWinning;
        }
        if self.w0.contains(cell) {
            return Query::GoalReached;
        }
        if self.exceptions.contains(cell) {
            let inputs = self.exception_lookup(cell as u32).expect("exception cell has inputs");
            return Query::Input(inputs[0]);
        }
        let scale = UnitScaler::from_grid(&self.state_grid);
        let center = self.state_grid.center_of_flat(cell);
        let x: Vec<f64> = center.iter().enumerate().map(|(i, v)| scale.to_unit(i, *v)).collect();
        let out = self.net.forward(&x).expect("finite normalized input");
        Query::Input(argmax(&out) as u32)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CompressionStats {
    pub train: TrainReport,
    /// Every controlled cell landed in the exception table; the artifact is
    /// still sound but saves nothing.
    pub no_compression: bool,
}

/// Trains the controller classifier and builds the exception table from an
/// exhaustive argmax-validity scan. err_C counts exceptions against |L|.
pub fn train_compressed_controller(
    controller: &Controller,
    cfg: MlpConfig,
) -> Result<(CompressedController, CompressionStats)> {
    let ds = build_controller_dataset(controller)?;
    if ds.cells.is_empty() {
        return Err(Error::InvalidConfig(
            "controller has no controlled cells to compress".into(),
        ));
    }
    let mut net = Mlp::init(cfg)?;
    let train = net.train_sgd(&mut ControllerBatchSource::new(&ds))?;
    let cc = build_compressed_controller(net, controller, &ds)?;
    let no_compression = cc.exceptions.count() == ds.cells.len();
    Ok((cc, CompressionStats { train, no_compression }))
}

/// Exception scan for an already-trained classifier.
pub fn build_compressed_controller(
    net: Mlp,
    controller: &Controller,
    ds: &ControllerDataset,
) -> Result<CompressedController> {
    if net.input_dim() != ds.state_grid.dim() || net.output_dim() != ds.input_grid.num_cells() {
        return Err(Error::InvalidConfig("classifier shape does not match grids".into()));
    }
    let scale = UnitScaler::from_grid(&ds.state_grid);
    let chunk = 2048usize;
    let ranges: Vec<(usize, usize)> = (0..ds.cells.len().div_ceil(chunk))
        .map(|k| (k * chunk, ((k + 1) * chunk).min(ds.cells.len())))
        .collect();
    let mut exception_inputs: Vec<(u32, Vec<u32>)> = ranges
        .into_par_iter()
        .flat_map_iter(|(a, b)| {
            let mut x = Array2::zeros((b - a, ds.state_grid.dim()));
            for (row, &cell) in ds.cells[a..b].iter().enumerate() {
                let center = ds.state_grid.center_of_flat(cell as usize);
                for (i, v) in center.iter().enumerate() {
                    x[[row, i]] = scale.to_unit(i, *v);
                }
            }
            let pred = net.forward_batch(x.view());
            let mut misses = Vec::new();
            for (row, (&cell, valid)) in ds.cells[a..b].iter().zip(&ds.valid[a..b]).enumerate() {
                let choice = argmax(pred.row(row).as_slice().unwrap()) as u32;
                if !valid.contains(&choice) {
                    misses.push((cell, valid.clone()));
                }
            }
            misses
        })
        .collect();
    exception_inputs.sort_unstable_by_key(|e| e.0);
    let mut exceptions = CellSet::new(ds.state_grid.num_cells());
    for (c, _) in &exception_inputs {
        exceptions.insert(*c as usize);
    }
    let err_c = exception_inputs.len() as f64 / controller.winning.count() as f64;
    Ok(CompressedController {
        net,
        state_grid: ds.state_grid.clone(),
        input_grid: ds.input_grid.clone(),
        w0: controller.w0.clone(),
        winning: controller.winning.clone(),
        exceptions,
        exception_inputs,
        err_c,
    })
}

/// Exhaustive check that the deployed controller answers a valid input of the
/// original controller at every controlled cell, and that both artifacts
/// agree on the winning domain.
pub fn validate_compressed(cc: &CompressedController, controller: &Controller) -> Verdict {
    if cc.state_grid != controller.state_grid || cc.input_grid != controller.input_grid {
        return Verdict::Fail { cell: 0, input: None, reason: "grid mismatch".into() };
    }
    if cc.w0 != controller.w0 || cc.winning != controller.winning {
        return Verdict::Fail { cell: 0, input: None, reason: "domain mismatch".into() };
    }
    for c in controller.winning.iter() {
        if controller.w0.contains(c) {
            continue;
        }
        match cc.query(c) {
            Query::Input(u) if controller.valid_inputs(c).contains(&u) => {}
            Query::Input(u) => {
                return Verdict::Fail {
                    cell: c,
                    input: Some(u as usize),
                    reason: "deployed controller answers an invalid input".into(),
                }
            }
            other => {
                return Verdict::Fail {
                    cell: c,
                    input: None,
                    reason: format!("unexpected answer {other:?} inside the domain"),
                }
            }
        }
    }
    Verdict::Pass
}

/// Single-choice controller induced by the deployed artifact, with the
/// original insertion ranks; feeding it to `validate_controller` model-checks
/// the deployed behavior against the exact abstraction.
pub fn determinize(cc: &CompressedController, controller: &Controller) -> Result<Controller> {
    let ns = controller.state_grid.num_cells();
    let mut inputs = vec![Vec::new(); ns];
    for c in controller.winning.iter() {
        if controller.w0.contains(c) {
            continue;
        }
        match cc.query(c) {
            Query::Input(u) => inputs[c] = vec![u],
            other => {
                return Err(Error::Soundness(format!(
                    "deployed controller answered {other:?} at winning cell {c}"
                )))
            }
        }
    }
    Ok(Controller {
        state_grid: controller.state_grid.clone(),
        input_grid: controller.input_grid.clone(),
        w0: controller.w0.clone(),
        winning: controller.winning.clone(),
        ranks: controller.ranks.clone(),
        inputs,
    })
}

/// Network plus exception-record bytes, the deployable memory figure.
pub fn deploy_footprint(cc: &CompressedController) -> Footprint {
    let exception_bytes: u64 = cc
        .exception_inputs
        .iter()
        .map(|(_, v)| 4 + 4 + 4 * v.len() as u64)
        .sum();
    Footprint {
        network_bytes: crate::repr::network_bytes(&cc.net),
        correction_bytes: 0,
        exception_bytes,
        excluded_bitset_bytes: 0,
    }
}

// ---------------------------------------------------------------------------
// Closed-loop simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TraceStep {
    pub t: f64,
    pub x: Vec<f64>,
    pub cell: usize,
    pub input_cell: u32,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimOutcome {
    ReachedGoal { steps: usize },
    StartOutsideWinning,
    EnteredAvoid { step: usize },
    LeftDomain { step: usize },
    StepLimitExceeded,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub outcome: SimOutcome,
    pub trace: Vec<TraceStep>,
}

/// Runs the deployed controller against the continuous model under a seeded
/// piecewise-constant disturbance: quantize, query, integrate, repeat.
/// Success is reaching a goal cell before touching the avoid set, leaving the
/// state box, or exhausting the step budget.
pub fn simulate_closed_loop(
    model: &ModelSpec,
    cc: &CompressedController,
    avoid: &CellSet,
    x0: &[f64],
    max_steps: usize,
    seed: u64,
) -> Result<SimResult> {
    if x0.len() != model.n {
        return Err(Error::DimensionMismatch { expected: model.n, got: x0.len() });
    }
    if avoid.len() != cc.state_grid.num_cells() {
        return Err(Error::Provenance("avoid set ranges over a different grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.to_vec();
    let mut trace = Vec::new();
    for step in 0..max_steps {
        let Some(cell) = cc.state_grid.cell_of_point(&x) else {
            return Ok(SimResult { outcome: SimOutcome::LeftDomain { step }, trace });
        };
        if avoid.contains(cell) {
            return Ok(SimResult { outcome: SimOutcome::EnteredAvoid { step }, trace });
        }
        let input_cell = match cc.query(cell) {
            Query::GoalReached => {
                return Ok(SimResult { outcome: SimOutcome::ReachedGoal { steps: step }, trace })
            }
            Query::OutsideWinning => {
                return Ok(SimResult { outcome: SimOutcome::StartOutsideWinning, trace })
            }
            Query::Input(u) => u,
        };
        let u = cc.input_grid.center_of_flat(input_cell as usize);
        trace.push(TraceStep {
            t: step as f64 * model.tau,
            x: x.clone(),
            cell,
            input_cell,
            input: u.clone(),
        });
        x = model.disturbed_step(&x, &u, &mut rng)?;
    }
    Ok(SimResult { outcome: SimOutcome::StepLimitExceeded, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::{build_backward, build_forward};
    use crate::grid::HyperRect;
    use crate::nn::Activation;
    use crate::repr::LookupSource;
    use crate::synthesis::{
        discretize_spec, synthesize_neural, validate_controller, ReachAvoidSpec,
    };

    fn toy_controller() -> Controller {
        // 1D grid of 5 cells, 3 input cells; goal is cell 4.
        let sg = Grid::new(vec![0.0], vec![5.0], vec![1.0]).unwrap();
        let ug = Grid::new(vec![-1.0], vec![1.0], vec![2.0 / 3.0]).unwrap();
        let w0 = CellSet::from_indices(5, [4]);
        let mut winning = w0.clone();
        for c in 0..4 {
            winning.insert(c);
        }
        Controller {
            state_grid: sg,
            input_grid: ug,
            w0,
            winning,
            ranks: vec![4, 3, 2, 1, 0],
            inputs: vec![vec![2], vec![1, 2], vec![2], vec![0, 2], vec![]],
        }
    }

    #[test]
    fn dataset_round_trips_valid_sets() {
        let ctrl = toy_controller();
        let ds = build_controller_dataset(&ctrl).unwrap();
        assert_eq!(ds.cells, vec![0, 1, 2, 3]);
        let nu = ds.input_grid.num_cells();
        for (cell, valid) in ds.cells.iter().zip(&ds.valid) {
            let mut code = vec![0.0; nu];
            encode_input_set(nu, valid, &mut code);
            assert_eq!(code.len(), nu);
            assert_eq!(&decode_input_set(&code), valid);
            assert_eq!(valid, &ctrl.inputs[*cell as usize]);
            assert!(!valid.is_empty());
        }
    }

    #[test]
    fn single_cell_controller_dataset() {
        let mut ctrl = toy_controller();
        ctrl.winning = CellSet::from_indices(5, [2, 4]);
        ctrl.inputs = vec![vec![], vec![], vec![0, 1], vec![], vec![]];
        ctrl.ranks = vec![u32::MAX, u32::MAX, 1, u32::MAX, 0];
        let ds = build_controller_dataset(&ctrl).unwrap();
        assert_eq!(ds.cells, vec![2]);
        let mut code = vec![0.0; 3];
        encode_input_set(3, &ds.valid[0], &mut code);
        assert_eq!(code.iter().filter(|v| **v == 1.0).count(), 2);
    }

    #[test]
    fn memorizer_has_no_exceptions() {
        let ctrl = toy_controller();
        let mut cfg = MlpConfig::new(vec![1, 24, 3], Activation::Tanh, 5);
        cfg.learning_rate = 0.05;
        cfg.epochs = 4000;
        cfg.batch_size = 4;
        let (cc, stats) = train_compressed_controller(&ctrl, cfg).unwrap();
        assert!(cc.exceptions.is_empty(), "err_c = {}", cc.err_c);
        assert_eq!(cc.err_c, 0.0);
        assert!(!stats.no_compression);
        assert!(validate_compressed(&cc, &ctrl).is_pass());
    }

    #[test]
    fn untrained_net_falls_back_to_lookup() {
        let ctrl = toy_controller();
        let mut cfg = MlpConfig::new(vec![1, 4, 3], Activation::Relu, 1);
        cfg.epochs = 0;
        let (cc, _) = train_compressed_controller(&ctrl, cfg).unwrap();
        // Whatever the exception set is, every answer is valid.
        assert!(validate_compressed(&cc, &ctrl).is_pass());
        // Exception answers use the lowest valid input.
        for (cell, inputs) in &cc.exception_inputs {
            assert_eq!(cc.query(*cell as usize), Query::Input(inputs[0]));
            assert_eq!(inputs[0], *ctrl.inputs[*cell as usize].iter().min().unwrap());
        }
    }

    #[test]
    fn query_outcomes_and_fault_injection() {
        let ctrl = toy_controller();
        let mut cfg = MlpConfig::new(vec![1, 24, 3], Activation::Tanh, 5);
        cfg.learning_rate = 0.05;
        cfg.epochs = 4000;
        cfg.batch_size = 4;
        let (mut cc, _) = train_compressed_controller(&ctrl, cfg).unwrap();
        assert_eq!(cc.query(4), Query::GoalReached);
        let mut outside = cc.clone();
        outside.winning.remove(0);
        assert_eq!(outside.query(0), Query::OutsideWinning);

        // Tampering: replace the exception table with a record answering an
        // input that is invalid at that cell.
        cc.exceptions.insert(1);
        cc.exception_inputs = vec![(1, vec![0])];
        let verdict = validate_compressed(&cc, &ctrl);
        match verdict {
            Verdict::Fail { cell, .. } => assert_eq!(cell, 1),
            Verdict::Pass => panic!("tampering not detected"),
        }
    }

    /// End-to-end on a small planar-car instance: compress the synthesized
    /// controller, cross-check with the determinized model check, then run
    /// seeded closed-loop simulations from winning cells.
    #[test]
    fn closed_loop_simulations_reach_goal() {
        let model = ModelSpec::builtin("car2d").unwrap();
        let sg = Grid::new(vec![0.0, 0.0], vec![5.0, 5.0], vec![0.25, 0.25]).unwrap();
        let ug = Grid::with_target_eta(vec![-1.0, -1.0], vec![1.0, 1.0], vec![0.5, 0.5]).unwrap();
        let table = build_forward(&model, &sg, &ug, None).unwrap();
        let hulls = build_backward(&table).unwrap();
        let spec = ReachAvoidSpec::new(
            vec![HyperRect::new(vec![3.2, 3.2], vec![4.8, 4.8]).unwrap()],
            vec![HyperRect::new(vec![1.5, 1.5], vec![2.0, 2.0]).unwrap()],
        )
        .unwrap();
        let (w0, avoid) = discretize_spec(&spec, &sg).unwrap();
        let src = LookupSource { table: &table, hulls: &hulls };
        let (ctrl, _) = synthesize_neural(&src, &w0, &avoid, false).unwrap();
        assert!(validate_controller(&table, &ctrl, &w0, &avoid).is_pass());

        let mut cfg = MlpConfig::new(vec![2, 20, 40, ug.num_cells()], Activation::Relu, 11);
        cfg.learning_rate = 2e-3;
        cfg.epochs = 300;
        cfg.batch_size = 256;
        let (cc, _) = train_compressed_controller(&ctrl, cfg).unwrap();
        assert!(validate_compressed(&cc, &ctrl).is_pass());
        let det = determinize(&cc, &ctrl).unwrap();
        assert!(validate_controller(&table, &det, &w0, &avoid).is_pass());

        // Immediate success from a goal cell, empty trace.
        let goal_cell = w0.iter().next().unwrap();
        let gx = sg.center_of_flat(goal_cell);
        let r = simulate_closed_loop(&model, &cc, &avoid, &gx, 100, 3).unwrap();
        assert_eq!(r.outcome, SimOutcome::ReachedGoal { steps: 0 });
        assert!(r.trace.is_empty());

        // Rejection outside the winning domain (if any such cell exists).
        if let Some(dead) =
            (0..sg.num_cells()).find(|c| !ctrl.winning.contains(*c) && !avoid.contains(*c))
        {
            let dx = sg.center_of_flat(dead);
            let r = simulate_closed_loop(&model, &cc, &avoid, &dx, 100, 3).unwrap();
            assert_eq!(r.outcome, SimOutcome::StartOutsideWinning);
        }

        // Every seeded run from a winning cell center reaches the goal and
        // never touches the avoid set on the way.
        let winning_cells: Vec<usize> = ctrl.winning.iter().collect();
        for (k, &cell) in winning_cells.iter().step_by(7).enumerate() {
            let x0 = sg.center_of_flat(cell);
            let r = simulate_closed_loop(&model, &cc, &avoid, &x0, 500, 1000 + k as u64).unwrap();
            match r.outcome {
                SimOutcome::ReachedGoal { .. } => {}
                other => panic!("run from cell {cell} ended with {other:?}"),
            }
            for step in &r.trace {
                assert!(ctrl.winning.contains(step.cell));
                assert!(!avoid.contains(step.cell));
            }
        }
    }
}
