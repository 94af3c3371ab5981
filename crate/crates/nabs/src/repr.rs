//! Dataset extraction and corrected neural representations of the
//! abstraction.
//!
//! Two compression routes exist. The regression route trains nets on the
//! center/radius of the tightest ball around each reachable set, then
//! inflates every output by the componentwise worst-case training error. The
//! classification route trains nets on multi-hot corner indices and stores an
//! exception lookup table for the pairs whose decoded box fails to cover the
//! true set. Both routes end with an exhaustive certification scan; a
//! violation there is a hard error, never a warning.

use crate::abstraction::{AbstractionTable, BackwardHulls};
use crate::cellset::CellSet;
use crate::error::{Error, Result};
use crate::grid::{CellBox, Grid, HyperRect, MAX_DIM};
use crate::nn::{BatchSource, Mlp, MlpConfig, TrainReport};
use ndarray::{Array2, ArrayViewMut2};
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn tag(&self) -> u8 {
        match self {
            Direction::Forward => 0,
            Direction::Backward => 1,
        }
    }

    pub fn from_tag(t: u8) -> Option<Direction> {
        match t {
            0 => Some(Direction::Forward),
            1 => Some(Direction::Backward),
            _ => None,
        }
    }
}

/// Affine map between original units and the [-1, 1] training range, one
/// scale per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitScaler {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl UnitScaler {
    pub fn from_grid(grid: &Grid) -> Self {
        UnitScaler { lo: grid.lb().to_vec(), hi: grid.ub().to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn to_unit(&self, i: usize, v: f64) -> f64 {
        2.0 * (v - self.lo[i]) / (self.hi[i] - self.lo[i]) - 1.0
    }

    pub fn from_unit(&self, i: usize, v: f64) -> f64 {
        self.lo[i] + (v + 1.0) * 0.5 * (self.hi[i] - self.lo[i])
    }

    /// Scale factor for half-widths (no shift).
    pub fn half_width(&self, i: usize) -> f64 {
        0.5 * (self.hi[i] - self.lo[i])
    }
}

// ---------------------------------------------------------------------------
// Ball datasets (regression route)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BallRecord {
    pub pair: u64,
    pub center: Vec<f64>,
    pub radius: Vec<f64>,
}

/// Per flagged pair, the tightest l-inf ball covering the reachable (or
/// predecessor-hull) cells: center of the corner-cell centers, radius of half
/// their span plus half a cell. Excluded pairs (inadmissible forward, empty
/// backward) are listed separately.
#[derive(Debug, Clone)]
pub struct BallDataset {
    pub direction: Direction,
    pub state_grid: Grid,
    pub input_grid: Grid,
    pub records: Vec<BallRecord>,
    pub excluded: CellSet,
}

pub fn ball_of_box(grid: &Grid, b: &CellBox) -> (Vec<f64>, Vec<f64>) {
    let g_l = grid.center_of_multi(b.lo());
    let g_u = grid.center_of_multi(b.hi());
    let center: Vec<f64> = g_l.iter().zip(&g_u).map(|(a, b)| 0.5 * (a + b)).collect();
    let radius: Vec<f64> = g_l
        .iter()
        .zip(&g_u)
        .enumerate()
        .map(|(i, (a, b))| 0.5 * (b - a) + 0.5 * grid.eta()[i])
        .collect();
    (center, radius)
}

fn extract_ball(boxes: &crate::abstraction::PairBoxes, direction: Direction) -> BallDataset {
    let grid = boxes.state_grid();
    let mut records = Vec::with_capacity(boxes.flagged_count());
    let mut excluded = CellSet::new(boxes.num_pairs());
    for pair in 0..boxes.num_pairs() {
        match boxes.get_pair(pair) {
            Some(b) => {
                let (center, radius) = ball_of_box(grid, &b);
                records.push(BallRecord { pair: pair as u64, center, radius });
            }
            None => excluded.insert(pair),
        }
    }
    BallDataset {
        direction,
        state_grid: grid.clone(),
        input_grid: boxes.input_grid().clone(),
        records,
        excluded,
    }
}

/// Builds the forward and backward regression datasets.
pub fn extract_ball_datasets(
    table: &AbstractionTable,
    hulls: &BackwardHulls,
) -> (BallDataset, BallDataset) {
    (
        extract_ball(&table.boxes, Direction::Forward),
        extract_ball(&hulls.boxes, Direction::Backward),
    )
}

/// Normalized (state, input) centers for a pair index.
fn fill_pair_input(
    state_grid: &Grid,
    input_grid: &Grid,
    sscale: &UnitScaler,
    uscale: &UnitScaler,
    pair: usize,
    mut row: ndarray::ArrayViewMut1<f64>,
) {
    let nu = input_grid.num_cells();
    let (s, u) = (pair / nu, pair % nu);
    let n = state_grid.dim();
    let m = input_grid.dim();
    let mut sc = [0.0; MAX_DIM];
    let mut uc = [0.0; MAX_DIM];
    state_grid.center_of_flat_into(s, &mut sc[..n]);
    input_grid.center_of_flat_into(u, &mut uc[..m]);
    for i in 0..n {
        row[i] = sscale.to_unit(i, sc[i]);
    }
    for j in 0..m {
        row[n + j] = uscale.to_unit(j, uc[j]);
    }
}

/// In-memory streaming view of a ball dataset: normalized inputs, normalized
/// center/radius targets.
pub struct BallBatchSource<'a> {
    ds: &'a BallDataset,
    sscale: UnitScaler,
    uscale: UnitScaler,
}

impl<'a> BallBatchSource<'a> {
    pub fn new(ds: &'a BallDataset) -> Self {
        BallBatchSource {
            sscale: UnitScaler::from_grid(&ds.state_grid),
            uscale: UnitScaler::from_grid(&ds.input_grid),
            ds,
        }
    }
}

impl BatchSource for BallBatchSource<'_> {
    fn len(&self) -> usize {
        self.ds.records.len()
    }

    fn input_dim(&self) -> usize {
        self.ds.state_grid.dim() + self.ds.input_grid.dim()
    }

    fn target_dim(&self) -> usize {
        2 * self.ds.state_grid.dim()
    }

    fn fill(
        &mut self,
        indices: &[usize],
        mut inputs: ArrayViewMut2<f64>,
        mut targets: ArrayViewMut2<f64>,
    ) -> Result<()> {
        let n = self.ds.state_grid.dim();
        for (row, &idx) in indices.iter().enumerate() {
            let rec = &self.ds.records[idx];
            fill_pair_input(
                &self.ds.state_grid,
                &self.ds.input_grid,
                &self.sscale,
                &self.uscale,
                rec.pair as usize,
                inputs.row_mut(row),
            );
            let mut t = targets.row_mut(row);
            for i in 0..n {
                t[i] = self.sscale.to_unit(i, rec.center[i]);
                t[n + i] = rec.radius[i] / self.sscale.half_width(i);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Regression representation
// ---------------------------------------------------------------------------

/// Trained forward/backward ball nets plus the componentwise worst-case
/// deviations that make their outputs sound.
#[derive(Debug, Clone)]
pub struct RegressionRepr {
    pub net_f: Mlp,
    pub net_b: Mlp,
    pub state_grid: Grid,
    pub input_grid: Grid,
    pub e_f_center: Vec<f64>,
    pub e_f_radius: Vec<f64>,
    pub e_b_center: Vec<f64>,
    pub e_b_radius: Vec<f64>,
    pub excluded_f: CellSet,
    pub excluded_b: CellSet,
}

impl RegressionRepr {
    /// Total forward correction e_F = e_F^c + e_F^r.
    pub fn e_f(&self) -> Vec<f64> {
        self.e_f_center.iter().zip(&self.e_f_radius).map(|(a, b)| a + b).collect()
    }

    pub fn e_b(&self) -> Vec<f64> {
        self.e_b_center.iter().zip(&self.e_b_radius).map(|(a, b)| a + b).collect()
    }

    fn net_and_parts(&self, dir: Direction) -> (&Mlp, &CellSet, Vec<f64>) {
        match dir {
            Direction::Forward => (&self.net_f, &self.excluded_f, self.e_f()),
            Direction::Backward => (&self.net_b, &self.excluded_b, self.e_b()),
        }
    }

    /// Raw net output for a pair, denormalized to original units.
    fn raw_ball(&self, net: &Mlp, state: usize, input: usize) -> (Vec<f64>, Vec<f64>) {
        let sscale = UnitScaler::from_grid(&self.state_grid);
        let uscale = UnitScaler::from_grid(&self.input_grid);
        let n = self.state_grid.dim();
        let m = self.input_grid.dim();
        let sc = self.state_grid.center_of_flat(state);
        let uc = self.input_grid.center_of_flat(input);
        let mut x = vec![0.0; n + m];
        for i in 0..n {
            x[i] = sscale.to_unit(i, sc[i]);
        }
        for j in 0..m {
            x[n + j] = uscale.to_unit(j, uc[j]);
        }
        let out = net.forward(&x).expect("finite normalized input");
        let center: Vec<f64> = (0..n).map(|i| sscale.from_unit(i, out[i])).collect();
        let radius: Vec<f64> = (0..n).map(|i| out[n + i] * sscale.half_width(i)).collect();
        (center, radius)
    }

    /// Corrected ball `[N^c - N^r - e, N^c + N^r + e]` in original units;
    /// `None` for an excluded pair (inadmissible forward / empty backward).
    pub fn corrected_ball(&self, dir: Direction, state: usize, input: usize) -> Option<HyperRect> {
        let (net, excluded, e) = self.net_and_parts(dir);
        let pair = state * self.input_grid.num_cells() + input;
        if excluded.contains(pair) {
            return None;
        }
        let (center, radius) = self.raw_ball(net, state, input);
        let corrected: Vec<f64> = radius
            .iter()
            .zip(&e)
            .map(|(r, e)| (r + e).max(0.0))
            .collect();
        Some(HyperRect::from_center_radius(&center, &corrected).expect("finite ball"))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReprTrainStats {
    pub forward: TrainReport,
    pub backward: TrainReport,
}

/// Trains both regression nets on the ball datasets, then exhaustively scans
/// every record to fix the soundness corrections and certify coverage.
pub fn train_regression_repr(
    fwd: &BallDataset,
    bwd: &BallDataset,
    cfg_f: MlpConfig,
    cfg_b: MlpConfig,
) -> Result<(RegressionRepr, ReprTrainStats)> {
    if fwd.records.is_empty() || bwd.records.is_empty() {
        return Err(Error::InvalidConfig("empty ball dataset".into()));
    }
    let mut net_f = Mlp::init(cfg_f)?;
    let mut net_b = Mlp::init(cfg_b)?;
    let rep_f = net_f.train_sgd(&mut BallBatchSource::new(fwd))?;
    let rep_b = net_b.train_sgd(&mut BallBatchSource::new(bwd))?;
    build_regression_repr(net_f, net_b, fwd, bwd)
        .map(|r| (r, ReprTrainStats { forward: rep_f, backward: rep_b }))
}

/// Fixes corrections for already-trained nets and certifies coverage.
pub fn build_regression_repr(
    net_f: Mlp,
    net_b: Mlp,
    fwd: &BallDataset,
    bwd: &BallDataset,
) -> Result<RegressionRepr> {
    let (efc, efr) = max_ball_deviation(&net_f, fwd)?;
    let (ebc, ebr) = max_ball_deviation(&net_b, bwd)?;
    let repr = RegressionRepr {
        net_f,
        net_b,
        state_grid: fwd.state_grid.clone(),
        input_grid: fwd.input_grid.clone(),
        e_f_center: efc,
        e_f_radius: efr,
        e_b_center: ebc,
        e_b_radius: ebr,
        excluded_f: fwd.excluded.clone(),
        excluded_b: bwd.excluded.clone(),
    };
    certify_regression(&repr, fwd, Direction::Forward)?;
    certify_regression(&repr, bwd, Direction::Backward)?;
    Ok(repr)
}

/// Componentwise max |c - N^c| and |r - N^r| over the whole dataset, in
/// original units.
pub fn max_ball_deviation(net: &Mlp, ds: &BallDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = ds.state_grid.dim();
    let sscale = UnitScaler::from_grid(&ds.state_grid);
    let total = ds.records.len();
    let ranges: Vec<(usize, usize)> = chunk_ranges(total, 2048);
    let (ec, er) = ranges
        .into_par_iter()
        .map(|(a, b)| {
            let mut src = BallBatchSource::new(ds);
            let idx: Vec<usize> = (a..b).collect();
            let mut x = Array2::zeros((b - a, src.input_dim()));
            let mut t = Array2::zeros((b - a, src.target_dim()));
            src.fill(&idx, x.view_mut(), t.view_mut()).expect("in-memory fill");
            let pred = net.forward_batch(x.view());
            let mut ec = vec![0.0f64; n];
            let mut er = vec![0.0f64; n];
            for (row, rec) in ds.records[a..b].iter().enumerate() {
                let p = pred.row(row);
                for i in 0..n {
                    let c_hat = sscale.from_unit(i, p[i]);
                    let r_hat = p[n + i] * sscale.half_width(i);
                    ec[i] = ec[i].max((rec.center[i] - c_hat).abs());
                    er[i] = er[i].max((rec.radius[i] - r_hat).abs());
                }
            }
            (ec, er)
        })
        .reduce(
            || (vec![0.0; n], vec![0.0; n]),
            |(mut ac, mut ar), (bc, br)| {
                for i in 0..n {
                    ac[i] = ac[i].max(bc[i]);
                    ar[i] = ar[i].max(br[i]);
                }
                (ac, ar)
            },
        );
    Ok((ec, er))
}

fn chunk_ranges(total: usize, size: usize) -> Vec<(usize, usize)> {
    (0..total.div_ceil(size))
        .map(|k| (k * size, ((k + 1) * size).min(total)))
        .collect()
}

/// Exhaustive certificate: for every record, the decoded corrected box covers
/// the true cell box. Fails hard on the first violation.
fn certify_regression(repr: &RegressionRepr, ds: &BallDataset, dir: Direction) -> Result<()> {
    let grid = &ds.state_grid;
    let nu = ds.input_grid.num_cells();
    let violation = ds
        .records
        .par_iter()
        .filter_map(|rec| {
            let truth = grid
                .ball_box(&rec.center, &rec.radius)
                .expect("dataset ball spans at least one cell");
            let (s, u) = (rec.pair as usize / nu, rec.pair as usize % nu);
            let ball = repr.corrected_ball(dir, s, u).expect("record pairs are not excluded");
            match grid.ball_box(&ball.center(), &ball.radius()) {
                Some(decoded) if decoded.contains_box(&truth) => None,
                _ => Some(rec.pair),
            }
        })
        .min();
    match violation {
        None => Ok(()),
        Some(pair) => Err(Error::Soundness(format!(
            "corrected {dir:?} ball fails to cover pair {pair}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Corner datasets (classification route)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CornerRecord {
    pub pair: u64,
    pub corners: CellBox,
}

/// Per flagged pair, the corner cell indices of the reachable (or hull) box,
/// the classification targets in multi-hot form.
#[derive(Debug, Clone)]
pub struct CornerDataset {
    pub direction: Direction,
    pub state_grid: Grid,
    pub input_grid: Grid,
    pub records: Vec<CornerRecord>,
    pub excluded: CellSet,
}

/// Length of the multi-hot vector: a lower and an upper block per dimension.
pub fn corner_code_len(grid: &Grid) -> usize {
    2 * grid.count_sum()
}

/// Multi-hot encoding: for each dimension, one 1 in the lower block at the
/// lower corner index and one 1 in the upper block at the upper corner index.
pub fn encode_corners(grid: &Grid, corners: &CellBox, out: &mut [f64]) {
    debug_assert_eq!(out.len(), corner_code_len(grid));
    out.fill(0.0);
    let mut offset = 0;
    for i in 0..grid.dim() {
        let block = grid.counts()[i] as usize;
        out[offset + corners.lo()[i] as usize] = 1.0;
        out[offset + block + corners.hi()[i] as usize] = 1.0;
        offset += 2 * block;
    }
}

/// Argmax decode per block; `None` when some dimension decodes with
/// lower > upper.
pub fn decode_corners(grid: &Grid, output: &[f64]) -> Option<CellBox> {
    debug_assert_eq!(output.len(), corner_code_len(grid));
    let mut lo = [0u32; MAX_DIM];
    let mut hi = [0u32; MAX_DIM];
    let mut offset = 0;
    for i in 0..grid.dim() {
        let block = grid.counts()[i] as usize;
        let l = crate::nn::argmax(&output[offset..offset + block]) as u32;
        let h = crate::nn::argmax(&output[offset + block..offset + 2 * block]) as u32;
        if l > h {
            return None;
        }
        lo[i] = l;
        hi[i] = h;
        offset += 2 * block;
    }
    Some(CellBox::new(&lo[..grid.dim()], &hi[..grid.dim()]))
}

fn extract_corner(boxes: &crate::abstraction::PairBoxes, direction: Direction) -> CornerDataset {
    let mut records = Vec::with_capacity(boxes.flagged_count());
    let mut excluded = CellSet::new(boxes.num_pairs());
    for pair in 0..boxes.num_pairs() {
        match boxes.get_pair(pair) {
            Some(b) => records.push(CornerRecord { pair: pair as u64, corners: b }),
            None => excluded.insert(pair),
        }
    }
    CornerDataset {
        direction,
        state_grid: boxes.state_grid().clone(),
        input_grid: boxes.input_grid().clone(),
        records,
        excluded,
    }
}

pub fn extract_corner_datasets(
    table: &AbstractionTable,
    hulls: &BackwardHulls,
) -> (CornerDataset, CornerDataset) {
    (
        extract_corner(&table.boxes, Direction::Forward),
        extract_corner(&hulls.boxes, Direction::Backward),
    )
}

pub struct CornerBatchSource<'a> {
    ds: &'a CornerDataset,
    sscale: UnitScaler,
    uscale: UnitScaler,
}

impl<'a> CornerBatchSource<'a> {
    pub fn new(ds: &'a CornerDataset) -> Self {
        CornerBatchSource {
            sscale: UnitScaler::from_grid(&ds.state_grid),
            uscale: UnitScaler::from_grid(&ds.input_grid),
            ds,
        }
    }
}

impl BatchSource for CornerBatchSource<'_> {
    fn len(&self) -> usize {
        self.ds.records.len()
    }

    fn input_dim(&self) -> usize {
        self.ds.state_grid.dim() + self.ds.input_grid.dim()
    }

    fn target_dim(&self) -> usize {
        corner_code_len(&self.ds.state_grid)
    }

    fn fill(
        &mut self,
        indices: &[usize],
        mut inputs: ArrayViewMut2<f64>,
        mut targets: ArrayViewMut2<f64>,
    ) -> Result<()> {
        for (row, &idx) in indices.iter().enumerate() {
            let rec = &self.ds.records[idx];
            fill_pair_input(
                &self.ds.state_grid,
                &self.ds.input_grid,
                &self.sscale,
                &self.uscale,
                rec.pair as usize,
                inputs.row_mut(row),
            );
            encode_corners(
                &self.ds.state_grid,
                &rec.corners,
                targets.row_mut(row).as_slice_mut().expect("row-contiguous targets"),
            );
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Classification representation
// ---------------------------------------------------------------------------

/// Sorted exception table: pair index to exact corner box.
#[derive(Debug, Clone, Default)]
pub struct ExceptionTable {
    entries: Vec<(u64, CellBox)>,
}

impl ExceptionTable {
    pub fn from_sorted(entries: Vec<(u64, CellBox)>) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Format("exception table not strictly sorted".into()));
        }
        Ok(ExceptionTable { entries })
    }

    pub fn get(&self, pair: u64) -> Option<&CellBox> {
        self.entries
            .binary_search_by_key(&pair, |e| e.0)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u64, CellBox)] {
        &self.entries
    }
}

/// Corner-classifier nets plus exception tables holding the exact boxes of
/// every misclassified pair.
#[derive(Debug, Clone)]
pub struct ClassificationRepr {
    pub net_f: Mlp,
    pub net_b: Mlp,
    pub state_grid: Grid,
    pub input_grid: Grid,
    pub exceptions_f: ExceptionTable,
    pub exceptions_b: ExceptionTable,
    pub excluded_f: CellSet,
    pub excluded_b: CellSet,
    pub err_f: f64,
    pub err_b: f64,
}

impl ClassificationRepr {
    /// Corrected output: stored exact box on exceptions, decoded argmax box
    /// elsewhere; `None` for excluded pairs.
    pub fn corrected_box(&self, dir: Direction, state: usize, input: usize) -> Option<CellBox> {
        let (net, exceptions, excluded) = match dir {
            Direction::Forward => (&self.net_f, &self.exceptions_f, &self.excluded_f),
            Direction::Backward => (&self.net_b, &self.exceptions_b, &self.excluded_b),
        };
        let pair = (state * self.input_grid.num_cells() + input) as u64;
        if excluded.contains(pair as usize) {
            return None;
        }
        if let Some(b) = exceptions.get(pair) {
            return Some(*b);
        }
        let out = self.decode_raw(net, state, input);
        // Off-exception pairs were certified at build time; a failed decode
        // here would mean the artifact was tampered with.
        debug_assert!(out.is_some(), "uncertified decode for pair {pair}");
        out
    }

    fn decode_raw(&self, net: &Mlp, state: usize, input: usize) -> Option<CellBox> {
        let sscale = UnitScaler::from_grid(&self.state_grid);
        let uscale = UnitScaler::from_grid(&self.input_grid);
        let n = self.state_grid.dim();
        let m = self.input_grid.dim();
        let sc = self.state_grid.center_of_flat(state);
        let uc = self.input_grid.center_of_flat(input);
        let mut x = vec![0.0; n + m];
        for i in 0..n {
            x[i] = sscale.to_unit(i, sc[i]);
        }
        for j in 0..m {
            x[n + j] = uscale.to_unit(j, uc[j]);
        }
        let out = net.forward(&x).expect("finite normalized input");
        decode_corners(&self.state_grid, &out)
    }
}

/// Abort threshold for the exception fraction, a config knob.
pub const DEFAULT_ABORT_FRACTION: f64 = 0.5;

/// Trains the corner classifiers, scans every pair, and collects the
/// misclassified ones together with their exact boxes.
pub fn train_classification_repr(
    fwd: &CornerDataset,
    bwd: &CornerDataset,
    cfg_f: MlpConfig,
    cfg_b: MlpConfig,
    abort_fraction: f64,
) -> Result<(ClassificationRepr, ReprTrainStats)> {
    if fwd.records.is_empty() || bwd.records.is_empty() {
        return Err(Error::InvalidConfig("empty corner dataset".into()));
    }
    let mut net_f = Mlp::init(cfg_f)?;
    let mut net_b = Mlp::init(cfg_b)?;
    let rep_f = net_f.train_sgd(&mut CornerBatchSource::new(fwd))?;
    let rep_b = net_b.train_sgd(&mut CornerBatchSource::new(bwd))?;
    build_classification_repr(net_f, net_b, fwd, bwd, abort_fraction)
        .map(|r| (r, ReprTrainStats { forward: rep_f, backward: rep_b }))
}

/// Exception-collection and assembly for already-trained classifier nets.
pub fn build_classification_repr(
    net_f: Mlp,
    net_b: Mlp,
    fwd: &CornerDataset,
    bwd: &CornerDataset,
    abort_fraction: f64,
) -> Result<ClassificationRepr> {
    let total_pairs = fwd.state_grid.num_cells() * fwd.input_grid.num_cells();
    let (exc_f, err_f) = collect_exceptions(&net_f, fwd, total_pairs)?;
    let (exc_b, err_b) = collect_exceptions(&net_b, bwd, total_pairs)?;
    for err in [err_f, err_b] {
        if err > abort_fraction {
            return Err(Error::CompressionIneffective { rate: err, limit: abort_fraction });
        }
    }
    Ok(ClassificationRepr {
        net_f,
        net_b,
        state_grid: fwd.state_grid.clone(),
        input_grid: fwd.input_grid.clone(),
        exceptions_f: exc_f,
        exceptions_b: exc_b,
        excluded_f: fwd.excluded.clone(),
        excluded_b: bwd.excluded.clone(),
        err_f,
        err_b,
    })
}

/// Pairs whose decoded box fails to cover the true box join the exception
/// table with their exact corners. The rate is measured against all
/// state-input pairs.
fn collect_exceptions(
    net: &Mlp,
    ds: &CornerDataset,
    total_pairs: usize,
) -> Result<(ExceptionTable, f64)> {
    let grid = &ds.state_grid;
    let mut entries: Vec<(u64, CellBox)> = chunk_ranges(ds.records.len(), 2048)
        .into_par_iter()
        .flat_map_iter(|(a, b)| {
            let mut src = CornerBatchSource::new(ds);
            let idx: Vec<usize> = (a..b).collect();
            let mut x = Array2::zeros((b - a, src.input_dim()));
            let mut t = Array2::zeros((b - a, src.target_dim()));
            src.fill(&idx, x.view_mut(), t.view_mut()).expect("in-memory fill");
            let pred = net.forward_batch(x.view());
            let mut misses = Vec::new();
            for (row, rec) in ds.records[a..b].iter().enumerate() {
                let ok = decode_corners(grid, pred.row(row).as_slice().unwrap())
                    .is_some_and(|d| d.contains_box(&rec.corners));
                if !ok {
                    misses.push((rec.pair, rec.corners));
                }
            }
            misses
        })
        .collect();
    entries.sort_unstable_by_key(|e| e.0);
    let err = entries.len() as f64 / total_pairs as f64;
    Ok((ExceptionTable::from_sorted(entries)?, err))
}

// ---------------------------------------------------------------------------
// Transition sources and mismatch rates
// ---------------------------------------------------------------------------

/// Anything that can answer forward/backward over-approximated successor
/// (resp. predecessor-hull) cell boxes per pair: the exact tables, or either
/// corrected representation.
pub trait TransitionSource: Sync {
    fn state_grid(&self) -> &Grid;
    fn input_grid(&self) -> &Grid;
    /// `None` means the pair is inadmissible (no usable transition).
    fn forward_box(&self, state: usize, input: usize) -> Option<CellBox>;
    /// `None` means no predecessors under this input.
    fn backward_box(&self, state: usize, input: usize) -> Option<CellBox>;
}

/// Zero-error source reading the tables directly.
pub struct LookupSource<'a> {
    pub table: &'a AbstractionTable,
    pub hulls: &'a BackwardHulls,
}

impl TransitionSource for LookupSource<'_> {
    fn state_grid(&self) -> &Grid {
        self.table.boxes.state_grid()
    }

    fn input_grid(&self) -> &Grid {
        self.table.boxes.input_grid()
    }

    fn forward_box(&self, state: usize, input: usize) -> Option<CellBox> {
        self.table.boxes.get(state, input)
    }

    fn backward_box(&self, state: usize, input: usize) -> Option<CellBox> {
        self.hulls.boxes.get(state, input)
    }
}

impl TransitionSource for RegressionRepr {
    fn state_grid(&self) -> &Grid {
        &self.state_grid
    }

    fn input_grid(&self) -> &Grid {
        &self.input_grid
    }

    fn forward_box(&self, state: usize, input: usize) -> Option<CellBox> {
        let ball = self.corrected_ball(Direction::Forward, state, input)?;
        self.state_grid.ball_box(&ball.center(), &ball.radius())
    }

    fn backward_box(&self, state: usize, input: usize) -> Option<CellBox> {
        let ball = self.corrected_ball(Direction::Backward, state, input)?;
        self.state_grid.ball_box(&ball.center(), &ball.radius())
    }
}

impl TransitionSource for ClassificationRepr {
    fn state_grid(&self) -> &Grid {
        &self.state_grid
    }

    fn input_grid(&self) -> &Grid {
        &self.input_grid
    }

    fn forward_box(&self, state: usize, input: usize) -> Option<CellBox> {
        self.corrected_box(Direction::Forward, state, input)
    }

    fn backward_box(&self, state: usize, input: usize) -> Option<CellBox> {
        self.corrected_box(Direction::Backward, state, input)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MismatchRates {
    pub d_f: f64,
    pub d_b: f64,
    /// Expanded transition counts of the true relations and the induced ones.
    pub true_f: u64,
    pub induced_f: u64,
    pub true_b: u64,
    pub induced_b: u64,
}

/// Exhaustive pairwise scan of the induced transition systems: expanded
/// counts, mismatch rates d = |T^N \ T| / |T|, and a hard containment check
/// T ⊆ T^N on the way.
///
/// The backward comparison is against the stored predecessor hulls, the
/// relation the backward representation actually compresses.
pub fn induced_transitions(
    source: &dyn TransitionSource,
    table: &AbstractionTable,
    hulls: &BackwardHulls,
) -> Result<MismatchRates> {
    let (true_f, induced_f) = scan_direction(source, &table.boxes, Direction::Forward)?;
    let (true_b, induced_b) = scan_direction(source, &hulls.boxes, Direction::Backward)?;
    Ok(MismatchRates {
        d_f: (induced_f - true_f) as f64 / true_f as f64,
        d_b: (induced_b - true_b) as f64 / true_b as f64,
        true_f,
        induced_f,
        true_b,
        induced_b,
    })
}

fn scan_direction(
    source: &dyn TransitionSource,
    truth: &crate::abstraction::PairBoxes,
    dir: Direction,
) -> Result<(u64, u64)> {
    let num_pairs = truth.num_pairs();
    let nu = truth.input_grid().num_cells();
    let (true_sum, induced_sum, violation) = (0..num_pairs)
        .into_par_iter()
        .map(|pair| {
            let (s, u) = (pair / nu, pair % nu);
            match truth.get_pair(pair) {
                None => (0u64, 0u64, None),
                Some(tb) => {
                    let ib = match dir {
                        Direction::Forward => source.forward_box(s, u),
                        Direction::Backward => source.backward_box(s, u),
                    };
                    match ib {
                        Some(ib) if ib.contains_box(&tb) => (tb.count(), ib.count(), None),
                        _ => (0, 0, Some(pair)),
                    }
                }
            }
        })
        .reduce(
            || (0, 0, None),
            |a, b| {
                let v = match (a.2, b.2) {
                    (Some(x), Some(y)) => Some(x.min(y)),
                    (x, y) => x.or(y),
                };
                (a.0 + b.0, a.1 + b.1, v)
            },
        );
    if let Some(pair) = violation {
        return Err(Error::Soundness(format!(
            "{dir:?} representation fails to cover pair {pair}"
        )));
    }
    Ok((true_sum, induced_sum))
}

// ---------------------------------------------------------------------------
// Memory accounting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct Footprint {
    pub network_bytes: u64,
    pub correction_bytes: u64,
    pub exception_bytes: u64,
    pub excluded_bitset_bytes: u64,
}

impl Footprint {
    pub fn total(&self) -> u64 {
        self.network_bytes
            + self.correction_bytes
            + self.exception_bytes
            + self.excluded_bitset_bytes
    }
}

/// Serialized network size: header plus 8 bytes per parameter.
pub fn network_bytes(net: &Mlp) -> u64 {
    crate::format::network_to_bytes(net).len() as u64
}

pub fn regression_footprint(repr: &RegressionRepr) -> Footprint {
    let n = repr.state_grid.dim() as u64;
    Footprint {
        network_bytes: network_bytes(&repr.net_f) + network_bytes(&repr.net_b),
        correction_bytes: 4 * n * 8,
        exception_bytes: 0,
        excluded_bitset_bytes: (repr.excluded_f.words().len() + repr.excluded_b.words().len())
            as u64
            * 8,
    }
}

pub fn classification_footprint(repr: &ClassificationRepr) -> Footprint {
    let n = repr.state_grid.dim() as u64;
    // One pair index plus two corner multi-indices per exception record.
    let rec = 8 + 2 * n * 4;
    Footprint {
        network_bytes: network_bytes(&repr.net_f) + network_bytes(&repr.net_b),
        correction_bytes: 0,
        exception_bytes: (repr.exceptions_f.len() + repr.exceptions_b.len()) as u64 * rec,
        excluded_bitset_bytes: (repr.excluded_f.words().len() + repr.excluded_b.words().len())
            as u64
            * 8,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TableFootprint {
    /// Corner format: one flag byte plus two corner multi-indices per pair.
    pub corner_bytes: u64,
    /// Expanded successor-list format: per flagged pair an 8-byte length plus
    /// 8 bytes per transition.
    pub expanded_bytes: u64,
}

pub fn table_footprint(boxes: &crate::abstraction::PairBoxes) -> TableFootprint {
    let n = boxes.state_grid().dim() as u64;
    TableFootprint {
        corner_bytes: boxes.num_pairs() as u64 * (1 + 2 * n * 4),
        expanded_bytes: boxes.flagged_count() as u64 * 8 + boxes.expanded_count() * 8,
    }
}

// ---------------------------------------------------------------------------
// Disk-backed datasets
// ---------------------------------------------------------------------------

const BALL_MAGIC: &[u8; 8] = b"NABS-DS1";
const CORNER_MAGIC: &[u8; 8] = b"NABS-DZ1";

struct DatasetHeader {
    state_grid: Grid,
    input_grid: Grid,
    records: usize,
    data_offset: u64,
}

fn parse_dataset_header(
    bytes: &[u8],
    magic: &[u8; 8],
    rec_bytes: impl Fn(usize) -> usize,
) -> Result<DatasetHeader> {
    let mut r = crate::format::ByteReader::new(bytes);
    if r.take(8)? != magic {
        return Err(Error::Format("wrong dataset magic".into()));
    }
    let dir = r.read_u8()?;
    Direction::from_tag(dir).ok_or_else(|| Error::Format("bad direction tag".into()))?;
    let state_grid = crate::format::read_grid(&mut r)?;
    let input_grid = crate::format::read_grid(&mut r)?;
    let pairs = state_grid
        .num_cells()
        .checked_mul(input_grid.num_cells())
        .ok_or_else(|| Error::Format("pair count overflows".into()))?;
    let _excluded = crate::format::read_cellset(&mut r, pairs)?;
    let records = r.read_u64()? as usize;
    if records > pairs {
        return Err(Error::Format("more records than pairs".into()));
    }
    let rec = rec_bytes(state_grid.dim()) as u64;
    let data_offset = r.pos() as u64;
    if bytes.len() as u64 != data_offset + records as u64 * rec {
        return Err(Error::Format("dataset length mismatch".into()));
    }
    Ok(DatasetHeader { state_grid, input_grid, records, data_offset })
}

fn ball_rec_bytes(n: usize) -> usize {
    8 + 2 * n * 8
}

fn corner_rec_bytes(n: usize) -> usize {
    8 + 2 * n * 4
}

/// Structural check of a ball dataset file, including record bounds.
pub fn validate_ball_dataset_bytes(bytes: &[u8]) -> Result<()> {
    let h = parse_dataset_header(bytes, BALL_MAGIC, ball_rec_bytes)?;
    let n = h.state_grid.dim();
    let pairs = h.state_grid.num_cells() * h.input_grid.num_cells();
    let rec = ball_rec_bytes(n);
    for k in 0..h.records {
        let off = h.data_offset as usize + k * rec;
        let mut r = crate::format::ByteReader::new(&bytes[off..off + rec]);
        let pair = r.read_u64()?;
        if pair as usize >= pairs {
            return Err(Error::Format("record pair out of range".into()));
        }
        for _ in 0..2 * n {
            let v = r.read_f64()?;
            if !v.is_finite() {
                return Err(Error::Format("non-finite ball value".into()));
            }
        }
    }
    Ok(())
}

/// Structural check of a corner dataset file, including record bounds.
pub fn validate_corner_dataset_bytes(bytes: &[u8]) -> Result<()> {
    let h = parse_dataset_header(bytes, CORNER_MAGIC, corner_rec_bytes)?;
    let n = h.state_grid.dim();
    let pairs = h.state_grid.num_cells() * h.input_grid.num_cells();
    let rec = corner_rec_bytes(n);
    for k in 0..h.records {
        let off = h.data_offset as usize + k * rec;
        let mut r = crate::format::ByteReader::new(&bytes[off..off + rec]);
        let pair = r.read_u64()?;
        if pair as usize >= pairs {
            return Err(Error::Format("record pair out of range".into()));
        }
        let mut lo = [0i32; MAX_DIM];
        for v in lo.iter_mut().take(n) {
            *v = r.read_i32()?;
        }
        for i in 0..n {
            let hi = r.read_i32()?;
            if lo[i] < 0 || hi < lo[i] || hi as u32 >= h.state_grid.counts()[i] {
                return Err(Error::Format("corner out of range".into()));
            }
        }
    }
    Ok(())
}

/// Writes a ball dataset for batch-streamed training.
pub fn write_ball_dataset(path: &Path, ds: &BallDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BALL_MAGIC)?;
    w.write_all(&[ds.direction.tag()])?;
    w.write_all(&crate::format::grid_to_bytes(&ds.state_grid))?;
    w.write_all(&crate::format::grid_to_bytes(&ds.input_grid))?;
    w.write_all(&crate::format::cellset_to_bytes(&ds.excluded))?;
    w.write_all(&(ds.records.len() as u64).to_le_bytes())?;
    for rec in &ds.records {
        w.write_all(&rec.pair.to_le_bytes())?;
        for v in rec.center.iter().chain(&rec.radius) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Streams a ball dataset file as normalized training batches.
pub struct DiskBallSource {
    file: File,
    state_grid: Grid,
    input_grid: Grid,
    sscale: UnitScaler,
    uscale: UnitScaler,
    records: usize,
    data_offset: u64,
}

impl DiskBallSource {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let mut head = Vec::new();
        file.read_to_end(&mut head)?;
        let h = parse_dataset_header(&head, BALL_MAGIC, ball_rec_bytes)?;
        file.seek(SeekFrom::Start(0))?;
        Ok(DiskBallSource {
            file,
            sscale: UnitScaler::from_grid(&h.state_grid),
            uscale: UnitScaler::from_grid(&h.input_grid),
            state_grid: h.state_grid,
            input_grid: h.input_grid,
            records: h.records,
            data_offset: h.data_offset,
        })
    }
}

impl BatchSource for DiskBallSource {
    fn len(&self) -> usize {
        self.records
    }

    fn input_dim(&self) -> usize {
        self.state_grid.dim() + self.input_grid.dim()
    }

    fn target_dim(&self) -> usize {
        2 * self.state_grid.dim()
    }

    fn prefers_sequential_batches(&self) -> bool {
        true
    }

    fn fill(
        &mut self,
        indices: &[usize],
        mut inputs: ArrayViewMut2<f64>,
        mut targets: ArrayViewMut2<f64>,
    ) -> Result<()> {
        let n = self.state_grid.dim();
        let rec_bytes = 8 + 2 * n * 8;
        if indices.iter().any(|&i| i >= self.records) {
            return Err(Error::Format("record index out of range".into()));
        }
        let span = read_span(&mut self.file, self.data_offset, rec_bytes, indices)?;
        for (row, buf) in span.iter_records(indices).enumerate() {
            let mut r = crate::format::ByteReader::new(buf);
            let pair = r.read_u64()? as usize;
            fill_pair_input(
                &self.state_grid,
                &self.input_grid,
                &self.sscale,
                &self.uscale,
                pair,
                inputs.row_mut(row),
            );
            let mut t = targets.row_mut(row);
            for i in 0..n {
                t[i] = self.sscale.to_unit(i, r.read_f64()?);
            }
            for i in 0..n {
                t[n + i] = r.read_f64()? / self.sscale.half_width(i);
            }
        }
        Ok(())
    }
}

/// One batch worth of raw record bytes: a single contiguous read when the
/// indices form a run, per-record reads otherwise.
struct SpanBuf {
    bytes: Vec<u8>,
    rec_bytes: usize,
    contiguous_from: Option<usize>,
}

impl SpanBuf {
    fn iter_records<'a>(&'a self, indices: &'a [usize]) -> impl Iterator<Item = &'a [u8]> + 'a {
        indices.iter().enumerate().map(move |(k, &idx)| {
            let slot = match self.contiguous_from {
                Some(base) => idx - base,
                None => k,
            };
            &self.bytes[slot * self.rec_bytes..(slot + 1) * self.rec_bytes]
        })
    }
}

fn read_span(
    file: &mut File,
    data_offset: u64,
    rec_bytes: usize,
    indices: &[usize],
) -> Result<SpanBuf> {
    let contiguous = indices
        .windows(2)
        .all(|w| w[1] == w[0] + 1);
    if contiguous && !indices.is_empty() {
        let base = indices[0];
        let mut bytes = vec![0u8; indices.len() * rec_bytes];
        file.seek(SeekFrom::Start(data_offset + (base * rec_bytes) as u64))?;
        file.read_exact(&mut bytes)?;
        Ok(SpanBuf { bytes, rec_bytes, contiguous_from: Some(base) })
    } else {
        let mut bytes = vec![0u8; indices.len() * rec_bytes];
        for (k, &idx) in indices.iter().enumerate() {
            file.seek(SeekFrom::Start(data_offset + (idx * rec_bytes) as u64))?;
            file.read_exact(&mut bytes[k * rec_bytes..(k + 1) * rec_bytes])?;
        }
        Ok(SpanBuf { bytes, rec_bytes, contiguous_from: None })
    }
}

/// Writes a corner dataset for batch-streamed training.
pub fn write_corner_dataset(path: &Path, ds: &CornerDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CORNER_MAGIC)?;
    w.write_all(&[ds.direction.tag()])?;
    w.write_all(&crate::format::grid_to_bytes(&ds.state_grid))?;
    w.write_all(&crate::format::grid_to_bytes(&ds.input_grid))?;
    w.write_all(&crate::format::cellset_to_bytes(&ds.excluded))?;
    w.write_all(&(ds.records.len() as u64).to_le_bytes())?;
    for rec in &ds.records {
        w.write_all(&rec.pair.to_le_bytes())?;
        for i in 0..ds.state_grid.dim() {
            w.write_all(&(rec.corners.lo()[i] as i32).to_le_bytes())?;
        }
        for i in 0..ds.state_grid.dim() {
            w.write_all(&(rec.corners.hi()[i] as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Streams a corner dataset file as normalized multi-hot training batches.
pub struct DiskCornerSource {
    file: File,
    state_grid: Grid,
    input_grid: Grid,
    sscale: UnitScaler,
    uscale: UnitScaler,
    records: usize,
    data_offset: u64,
}

impl DiskCornerSource {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let mut head = Vec::new();
        file.read_to_end(&mut head)?;
        let h = parse_dataset_header(&head, CORNER_MAGIC, corner_rec_bytes)?;
        file.seek(SeekFrom::Start(0))?;
        Ok(DiskCornerSource {
            file,
            sscale: UnitScaler::from_grid(&h.state_grid),
            uscale: UnitScaler::from_grid(&h.input_grid),
            state_grid: h.state_grid,
            input_grid: h.input_grid,
            records: h.records,
            data_offset: h.data_offset,
        })
    }
}

impl BatchSource for DiskCornerSource {
    fn len(&self) -> usize {
        self.records
    }

    fn input_dim(&self) -> usize {
        self.state_grid.dim() + self.input_grid.dim()
    }

    fn target_dim(&self) -> usize {
        corner_code_len(&self.state_grid)
    }

    fn prefers_sequential_batches(&self) -> bool {
        true
    }

    fn fill(
        &mut self,
        indices: &[usize],
        mut inputs: ArrayViewMut2<f64>,
        mut targets: ArrayViewMut2<f64>,
    ) -> Result<()> {
        let n = self.state_grid.dim();
        let rec_bytes = 8 + 2 * n * 4;
        if indices.iter().any(|&i| i >= self.records) {
            return Err(Error::Format("record index out of range".into()));
        }
        let span = read_span(&mut self.file, self.data_offset, rec_bytes, indices)?;
        for (row, buf) in span.iter_records(indices).enumerate() {
            let mut r = crate::format::ByteReader::new(buf);
            let pair = r.read_u64()? as usize;
            fill_pair_input(
                &self.state_grid,
                &self.input_grid,
                &self.sscale,
                &self.uscale,
                pair,
                inputs.row_mut(row),
            );
            let mut lo = [0u32; MAX_DIM];
            let mut hi = [0u32; MAX_DIM];
            for v in lo.iter_mut().take(n) {
                *v = r.read_i32()? as u32;
            }
            for v in hi.iter_mut().take(n) {
                *v = r.read_i32()? as u32;
            }
            let b = CellBox::new(&lo[..n], &hi[..n]);
            encode_corners(
                &self.state_grid,
                &b,
                targets.row_mut(row).as_slice_mut().expect("row-contiguous targets"),
            );
        }
        Ok(())
    }
}
