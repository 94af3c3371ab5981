//! Binary artifact formats. Everything is little-endian. Each file starts
//! with an 8-byte magic, and every parser here is total: malformed input
//! yields `Error::Format`, never a panic or an unbounded allocation.
//!
//! Magics:
//!   NABS-TF1  forward transition table
//!   NABS-TB1  backward predecessor hulls
//!   NABS-NN1  network parameters
//!   NABS-RB1  regression representation bundle
//!   NABS-RC1  classification representation bundle
//!   NABS-CT1  synthesized controller
//!   NABS-DC1  deployable compressed controller
//!   NABS-DS1  ball dataset (regression training)
//!   NABS-DZ1  corner dataset (classification training)

use crate::abstraction::{AbstractionTable, BackwardHulls, PairBoxes};
use crate::cellset::CellSet;
use crate::error::{Error, Result};
use crate::grid::{CellBox, Grid, MAX_DIM};
use crate::nn::{Activation, Mlp, MlpConfig};
use ndarray::{Array1, Array2};
use std::path::Path;

pub const MAGIC_TABLE_FWD: &[u8; 8] = b"NABS-TF1";
pub const MAGIC_TABLE_BWD: &[u8; 8] = b"NABS-TB1";
pub const MAGIC_NETWORK: &[u8; 8] = b"NABS-NN1";
pub const MAGIC_REGRESSION: &[u8; 8] = b"NABS-RB1";
pub const MAGIC_CLASSIFICATION: &[u8; 8] = b"NABS-RC1";
pub const MAGIC_CONTROLLER: &[u8; 8] = b"NABS-CT1";
pub const MAGIC_DEPLOY: &[u8; 8] = b"NABS-DC1";

const FORMAT_VERSION: u32 = 1;

/// Build metadata embedded in every artifact header; loaders refuse inputs
/// whose hash disagrees with the active configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub build_seconds: f64,
}

impl Provenance {
    pub fn new(config_hash: [u8; 32], seed: u64) -> Self {
        Provenance { config_hash, seed, build_seconds: 0.0 }
    }

    pub fn check_hash(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.config_hash != expected {
            return Err(Error::Provenance(
                "artifact was built from a different configuration".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Low-level reader
// ---------------------------------------------------------------------------

/// Bounds-checked cursor over a byte slice.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!(
                "truncated input: wanted {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn read_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn read_i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn read_i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn read_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads a count that is about to drive an allocation of `elem_bytes`
    /// per element; rejects counts the remaining input cannot back.
    pub fn read_count(&mut self, elem_bytes: usize) -> Result<usize> {
        let count = self.read_u64()?;
        let need = count.checked_mul(elem_bytes as u64);
        match need {
            Some(need) if need <= self.remaining() as u64 => Ok(count as usize),
            _ => Err(Error::Format(format!("count {count} exceeds input size"))),
        }
    }

    pub fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic: expected {:?}",
                std::str::from_utf8(magic).unwrap_or("?")
            )));
        }
        let version = self.read_u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        Ok(())
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn put_magic(out: &mut Vec<u8>, magic: &[u8; 8]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
}

// ---------------------------------------------------------------------------
// Shared codecs
// ---------------------------------------------------------------------------

pub fn grid_to_bytes(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(grid.dim() as u64).to_le_bytes());
    for v in grid.lb().iter().chain(grid.ub()).chain(grid.eta()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in grid.counts() {
        out.extend_from_slice(&(*c as i64).to_le_bytes());
    }
    out
}

pub fn read_grid(r: &mut ByteReader) -> Result<Grid> {
    let d = r.read_u64()? as usize;
    if d == 0 || d > MAX_DIM {
        return Err(Error::Format(format!("grid dimension {d} out of range")));
    }
    let mut lb = vec![0.0; d];
    let mut ub = vec![0.0; d];
    let mut eta = vec![0.0; d];
    for v in lb.iter_mut().chain(ub.iter_mut()).chain(eta.iter_mut()) {
        *v = r.read_f64()?;
    }
    let mut counts = vec![0i64; d];
    for c in counts.iter_mut() {
        *c = r.read_i64()?;
    }
    let grid =
        Grid::new(lb, ub, eta).map_err(|e| Error::Format(format!("grid parameters: {e}")))?;
    for (i, c) in counts.iter().enumerate() {
        if *c != grid.counts()[i] as i64 {
            return Err(Error::Format("stored cell counts disagree with eta".into()));
        }
    }
    Ok(grid)
}

pub fn cellset_to_bytes(set: &CellSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for w in set.words() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn read_cellset(r: &mut ByteReader, expected_len: usize) -> Result<CellSet> {
    let len = r.read_u64()? as usize;
    if len != expected_len {
        return Err(Error::Format(format!(
            "bitset length {len} does not match expected {expected_len}"
        )));
    }
    let words_needed = len.div_ceil(64);
    if words_needed * 8 > r.remaining() {
        return Err(Error::Format("bitset truncated".into()));
    }
    let mut words = Vec::with_capacity(words_needed);
    for _ in 0..words_needed {
        words.push(r.read_u64()?);
    }
    CellSet::from_words(len, words)
        .ok_or_else(|| Error::Format("bitset has stray bits beyond its length".into()))
}

fn provenance_to_bytes(p: &Provenance) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&p.config_hash);
    out.extend_from_slice(&p.seed.to_le_bytes());
    out.extend_from_slice(&p.build_seconds.to_le_bytes());
    out
}

fn read_provenance(r: &mut ByteReader) -> Result<Provenance> {
    let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let seed = r.read_u64()?;
    let build_seconds = r.read_f64()?;
    Ok(Provenance { config_hash: hash, seed, build_seconds })
}

// ---------------------------------------------------------------------------
// Network files
// ---------------------------------------------------------------------------

pub fn network_to_bytes(net: &Mlp) -> Vec<u8> {
    let cfg = net.config();
    let mut out = Vec::new();
    put_magic(&mut out, MAGIC_NETWORK);
    out.extend_from_slice(&(cfg.layer_sizes.len() as u32).to_le_bytes());
    for p in &cfg.layer_sizes {
        out.extend_from_slice(&(*p as u32).to_le_bytes());
    }
    out.push(cfg.activation.tag());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&cfg.learning_rate.to_le_bytes());
    out.extend_from_slice(&(cfg.epochs as u64).to_le_bytes());
    out.extend_from_slice(&(cfg.batch_size as u64).to_le_bytes());
    for (w, b) in net.weights().iter().zip(net.biases()) {
        for v in w.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in b.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn network_from_reader(r: &mut ByteReader) -> Result<Mlp> {
    r.expect_magic(MAGIC_NETWORK)?;
    let layers = r.read_u32()? as usize;
    if !(2..=256).contains(&layers) {
        return Err(Error::Format(format!("layer count {layers} out of range")));
    }
    let mut sizes = Vec::with_capacity(layers);
    for _ in 0..layers {
        let p = r.read_u32()? as usize;
        if p == 0 || p > 1 << 20 {
            return Err(Error::Format(format!("layer size {p} out of range")));
        }
        sizes.push(p);
    }
    let activation = Activation::from_tag(r.read_u8()?)
        .ok_or_else(|| Error::Format("unknown activation tag".into()))?;
    let seed = r.read_u64()?;
    let learning_rate = r.read_f64()?;
    let epochs = r.read_u64()? as usize;
    let batch_size = r.read_u64()? as usize;
    if !(learning_rate > 0.0) || !learning_rate.is_finite() || batch_size == 0 {
        return Err(Error::Format("bad training hyperparameters".into()));
    }
    let config = MlpConfig {
        layer_sizes: sizes.clone(),
        activation,
        seed,
        learning_rate,
        epochs,
        batch_size,
    };
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for win in sizes.windows(2) {
        let (pi, po) = (win[0], win[1]);
        pi.checked_mul(po)
            .and_then(|n| n.checked_add(po))
            .and_then(|n| n.checked_mul(8))
            .filter(|n| *n <= r.remaining())
            .ok_or_else(|| Error::Format("network parameters truncated".into()))?;
        let mut w = Array2::<f64>::zeros((pi, po));
        for v in w.iter_mut() {
            *v = r.read_f64()?;
        }
        let mut b = Array1::<f64>::zeros(po);
        for v in b.iter_mut() {
            *v = r.read_f64()?;
        }
        weights.push(w);
        biases.push(b);
    }
    Mlp::from_parts(config, weights, biases).map_err(|e| Error::Format(e.to_string()))
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<Mlp> {
    let mut r = ByteReader::new(bytes);
    let net = network_from_reader(&mut r)?;
    r.expect_end()?;
    Ok(net)
}

fn put_network_blob(out: &mut Vec<u8>, net: &Mlp) {
    let blob = network_to_bytes(net);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
}

fn read_network_blob(r: &mut ByteReader) -> Result<Mlp> {
    let len = r.read_count(1)?;
    let blob = r.take(len)?;
    network_from_bytes(blob)
}

// ---------------------------------------------------------------------------
// Transition tables
// ---------------------------------------------------------------------------

fn table_to_bytes(boxes: &PairBoxes, magic: &[u8; 8], prov: &Provenance) -> Vec<u8> {
    let n = boxes.state_grid().dim();
    let mut out = Vec::new();
    put_magic(&mut out, magic);
    out.extend_from_slice(&provenance_to_bytes(prov));
    out.extend_from_slice(&grid_to_bytes(boxes.state_grid()));
    out.extend_from_slice(&grid_to_bytes(boxes.input_grid()));
    out.extend_from_slice(&(boxes.num_pairs() as u64).to_le_bytes());
    let flags = boxes.flags();
    let corners = boxes.corners();
    for pair in 0..boxes.num_pairs() {
        out.push(flags[pair]);
        for c in &corners[pair * 2 * n..(pair + 1) * 2 * n] {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

fn table_from_bytes(bytes: &[u8], magic: &[u8; 8]) -> Result<(PairBoxes, Provenance)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(magic)?;
    let prov = read_provenance(&mut r)?;
    let state_grid = read_grid(&mut r)?;
    let input_grid = read_grid(&mut r)?;
    let pairs = state_grid
        .num_cells()
        .checked_mul(input_grid.num_cells())
        .ok_or_else(|| Error::Format("pair count overflows".into()))?;
    let n = state_grid.dim();
    let rec_bytes = 1 + 2 * n * 4;
    let declared = r.read_count(rec_bytes)?;
    if declared != pairs {
        return Err(Error::Format(format!(
            "table declares {declared} pairs, grids give {pairs}"
        )));
    }
    let mut flags = vec![0u8; pairs];
    let mut corners = vec![0i32; pairs * 2 * n];
    for pair in 0..pairs {
        flags[pair] = r.read_u8()?;
        for c in corners[pair * 2 * n..(pair + 1) * 2 * n].iter_mut() {
            *c = r.read_i32()?;
        }
    }
    r.expect_end()?;
    let boxes = PairBoxes::from_raw(state_grid, input_grid, flags, corners)?;
    Ok((boxes, prov))
}

pub fn forward_table_to_bytes(table: &AbstractionTable, prov: &Provenance) -> Vec<u8> {
    table_to_bytes(&table.boxes, MAGIC_TABLE_FWD, prov)
}

pub fn forward_table_from_bytes(bytes: &[u8]) -> Result<(AbstractionTable, Provenance)> {
    let (boxes, prov) = table_from_bytes(bytes, MAGIC_TABLE_FWD)?;
    Ok((AbstractionTable { boxes }, prov))
}

pub fn backward_table_to_bytes(hulls: &BackwardHulls, prov: &Provenance) -> Vec<u8> {
    table_to_bytes(&hulls.boxes, MAGIC_TABLE_BWD, prov)
}

pub fn backward_table_from_bytes(bytes: &[u8]) -> Result<(BackwardHulls, Provenance)> {
    let (boxes, prov) = table_from_bytes(bytes, MAGIC_TABLE_BWD)?;
    Ok((BackwardHulls { boxes }, prov))
}

// ---------------------------------------------------------------------------
// Representation bundles
// ---------------------------------------------------------------------------

use crate::repr::{ClassificationRepr, ExceptionTable, RegressionRepr};

fn put_f64_slice(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f64_vec(r: &mut ByteReader, len: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; len];
    for x in v.iter_mut() {
        *x = r.read_f64()?;
    }
    Ok(v)
}

pub fn regression_to_bytes(repr: &RegressionRepr, prov: &Provenance) -> Vec<u8> {
    let mut out = Vec::new();
    put_magic(&mut out, MAGIC_REGRESSION);
    out.extend_from_slice(&provenance_to_bytes(prov));
    out.extend_from_slice(&grid_to_bytes(&repr.state_grid));
    out.extend_from_slice(&grid_to_bytes(&repr.input_grid));
    put_f64_slice(&mut out, &repr.e_f_center);
    put_f64_slice(&mut out, &repr.e_f_radius);
    put_f64_slice(&mut out, &repr.e_b_center);
    put_f64_slice(&mut out, &repr.e_b_radius);
    out.extend_from_slice(&cellset_to_bytes(&repr.excluded_f));
    out.extend_from_slice(&cellset_to_bytes(&repr.excluded_b));
    put_network_blob(&mut out, &repr.net_f);
    put_network_blob(&mut out, &repr.net_b);
    out
}

pub fn regression_from_bytes(bytes: &[u8]) -> Result<(RegressionRepr, Provenance)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC_REGRESSION)?;
    let prov = read_provenance(&mut r)?;
    let state_grid = read_grid(&mut r)?;
    let input_grid = read_grid(&mut r)?;
    let n = state_grid.dim();
    let pairs = state_grid
        .num_cells()
        .checked_mul(input_grid.num_cells())
        .ok_or_else(|| Error::Format("pair count overflows".into()))?;
    let e_f_center = read_f64_vec(&mut r, n)?;
    let e_f_radius = read_f64_vec(&mut r, n)?;
    let e_b_center = read_f64_vec(&mut r, n)?;
    let e_b_radius = read_f64_vec(&mut r, n)?;
    for v in [&e_f_center, &e_f_radius, &e_b_center, &e_b_radius] {
        if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::Format("corrections must be nonnegative".into()));
        }
    }
    let excluded_f = read_cellset(&mut r, pairs)?;
    let excluded_b = read_cellset(&mut r, pairs)?;
    let net_f = read_network_blob(&mut r)?;
    let net_b = read_network_blob(&mut r)?;
    r.expect_end()?;
    let m = input_grid.dim();
    for net in [&net_f, &net_b] {
        if net.input_dim() != n + m || net.output_dim() != 2 * n {
            return Err(Error::Format("network shape does not match grids".into()));
        }
    }
    Ok((
        RegressionRepr {
            net_f,
            net_b,
            state_grid,
            input_grid,
            e_f_center,
            e_f_radius,
            e_b_center,
            e_b_radius,
            excluded_f,
            excluded_b,
        },
        prov,
    ))
}

fn put_exceptions(out: &mut Vec<u8>, n: usize, exc: &ExceptionTable) {
    out.extend_from_slice(&(exc.len() as u64).to_le_bytes());
    for (pair, b) in exc.entries() {
        out.extend_from_slice(&pair.to_le_bytes());
        for i in 0..n {
            out.extend_from_slice(&(b.lo()[i] as i32).to_le_bytes());
        }
        for i in 0..n {
            out.extend_from_slice(&(b.hi()[i] as i32).to_le_bytes());
        }
    }
}

fn read_exceptions(r: &mut ByteReader, grid: &Grid, pairs: usize) -> Result<ExceptionTable> {
    let n = grid.dim();
    let rec_bytes = 8 + 2 * n * 4;
    let count = r.read_count(rec_bytes)?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let pair = r.read_u64()?;
        if pair as usize >= pairs {
            return Err(Error::Format(format!("exception pair {pair} out of range")));
        }
        let mut lo = [0u32; MAX_DIM];
        let mut hi = [0u32; MAX_DIM];
        for i in 0..n {
            let v = r.read_i32()?;
            if v < 0 || v as u32 >= grid.counts()[i] {
                return Err(Error::Format("exception corner out of range".into()));
            }
            lo[i] = v as u32;
        }
        for i in 0..n {
            let v = r.read_i32()?;
            if v < 0 || v as u32 >= grid.counts()[i] || (v as u32) < lo[i] {
                return Err(Error::Format("exception corner out of range".into()));
            }
            hi[i] = v as u32;
        }
        entries.push((pair, CellBox::new(&lo[..n], &hi[..n])));
    }
    ExceptionTable::from_sorted(entries)
}

pub fn classification_to_bytes(repr: &ClassificationRepr, prov: &Provenance) -> Vec<u8> {
    let n = repr.state_grid.dim();
    let mut out = Vec::new();
    put_magic(&mut out, MAGIC_CLASSIFICATION);
    out.extend_from_slice(&provenance_to_bytes(prov));
    out.extend_from_slice(&grid_to_bytes(&repr.state_grid));
    out.extend_from_slice(&grid_to_bytes(&repr.input_grid));
    out.extend_from_slice(&repr.err_f.to_le_bytes());
    out.extend_from_slice(&repr.err_b.to_le_bytes());
    out.extend_from_slice(&cellset_to_bytes(&repr.excluded_f));
    out.extend_from_slice(&cellset_to_bytes(&repr.excluded_b));
    put_exceptions(&mut out, n, &repr.exceptions_f);
    put_exceptions(&mut out, n, &repr.exceptions_b);
    put_network_blob(&mut out, &repr.net_f);
    put_network_blob(&mut out, &repr.net_b);
    out
}

pub fn classification_from_bytes(bytes: &[u8]) -> Result<(ClassificationRepr, Provenance)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC_CLASSIFICATION)?;
    let prov = read_provenance(&mut r)?;
    let state_grid = read_grid(&mut r)?;
    let input_grid = read_grid(&mut r)?;
    let pairs = state_grid
        .num_cells()
        .checked_mul(input_grid.num_cells())
        .ok_or_else(|| Error::Format("pair count overflows".into()))?;
    let err_f = r.read_f64()?;
    let err_b = r.read_f64()?;
    if !(0.0..=1.0).contains(&err_f) || !(0.0..=1.0).contains(&err_b) {
        return Err(Error::Format("rates must lie in [0, 1]".into()));
    }
    let excluded_f = read_cellset(&mut r, pairs)?;
    let excluded_b = read_cellset(&mut r, pairs)?;
    let exceptions_f = read_exceptions(&mut r, &state_grid, pairs)?;
    let exceptions_b = read_exceptions(&mut r, &state_grid, pairs)?;
    let net_f = read_network_blob(&mut r)?;
    let net_b = read_network_blob(&mut r)?;
    r.expect_end()?;
    let (n, m) = (state_grid.dim(), input_grid.dim());
    let code = crate::repr::corner_code_len(&state_grid);
    for net in [&net_f, &net_b] {
        if net.input_dim() != n + m || net.output_dim() != code {
            return Err(Error::Format("network shape does not match grids".into()));
        }
    }
    Ok((
        ClassificationRepr {
            net_f,
            net_b,
            state_grid,
            input_grid,
            exceptions_f,
            exceptions_b,
            excluded_f,
            excluded_b,
            err_f,
            err_b,
        },
        prov,
    ))
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::build_forward;
    use crate::models::ModelSpec;

    fn prov() -> Provenance {
        Provenance { config_hash: [7; 32], seed: 42, build_seconds: 1.25 }
    }

    #[test]
    fn table_round_trip_is_bit_exact() {
        let model = ModelSpec::builtin("car2d").unwrap();
        let sg = Grid::new(vec![0.0, 0.0], vec![5.0, 5.0], vec![0.5, 0.5]).unwrap();
        let ug = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let table = build_forward(&model, &sg, &ug, None).unwrap();
        let bytes = forward_table_to_bytes(&table, &prov());
        let (back, p) = forward_table_from_bytes(&bytes).unwrap();
        assert_eq!(back.boxes, table.boxes);
        assert_eq!(p, prov());
        let again = forward_table_to_bytes(&back, &p);
        assert_eq!(again, bytes);
    }

    #[test]
    fn table_rejects_corruption() {
        let model = ModelSpec::builtin("car2d").unwrap();
        let sg = Grid::new(vec![0.0, 0.0], vec![5.0, 5.0], vec![1.0, 1.0]).unwrap();
        let ug = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let table = build_forward(&model, &sg, &ug, None).unwrap();
        let bytes = forward_table_to_bytes(&table, &prov());
        // Wrong magic.
        assert!(backward_table_from_bytes(&bytes).is_err());
        // Truncation.
        assert!(forward_table_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        // Flag byte outside {0, 1}.
        let mut bad = bytes.clone();
        let flag_pos = bad.len() - (1 + 2 * 2 * 4) * sg.num_cells() * ug.num_cells();
        bad[flag_pos] = 9;
        assert!(forward_table_from_bytes(&bad).is_err());
        // Trailing garbage.
        let mut long = bytes.clone();
        long.push(0);
        assert!(forward_table_from_bytes(&long).is_err());
    }

    #[test]
    fn network_round_trip_is_bit_exact() {
        let cfg = MlpConfig::new(vec![3, 7, 2], Activation::Relu, 9);
        let net = Mlp::init(cfg).unwrap();
        let bytes = network_to_bytes(&net);
        let back = network_from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(network_to_bytes(&back), bytes);
    }

    #[test]
    fn network_rejects_nonsense() {
        assert!(network_from_bytes(b"").is_err());
        assert!(network_from_bytes(b"NABS-NN1\x01\x00\x00\x00").is_err());
        let cfg = MlpConfig::new(vec![2, 2], Activation::Tanh, 0);
        let net = Mlp::init(cfg).unwrap();
        let mut bytes = network_to_bytes(&net);
        // NaN parameter.
        let last = bytes.len() - 8;
        bytes[last..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(network_from_bytes(&bytes).is_err());
    }
}

// ---------------------------------------------------------------------------
// Controller files
// ---------------------------------------------------------------------------

use crate::synthesis::Controller;

pub fn controller_to_bytes(c: &Controller, prov: &Provenance) -> Vec<u8> {
    let mut out = Vec::new();
    put_magic(&mut out, MAGIC_CONTROLLER);
    out.extend_from_slice(&provenance_to_bytes(prov));
    out.extend_from_slice(&grid_to_bytes(&c.state_grid));
    out.extend_from_slice(&grid_to_bytes(&c.input_grid));
    out.extend_from_slice(&cellset_to_bytes(&c.w0));
    let controlled: Vec<usize> =
        c.winning.iter().filter(|&cell| !c.w0.contains(cell)).collect();
    out.extend_from_slice(&(controlled.len() as u64).to_le_bytes());
    for cell in controlled {
        out.extend_from_slice(&(cell as u32).to_le_bytes());
        out.extend_from_slice(&c.ranks[cell].to_le_bytes());
        let inputs = &c.inputs[cell];
        out.extend_from_slice(&(inputs.len() as u32).to_le_bytes());
        for u in inputs {
            out.extend_from_slice(&u.to_le_bytes());
        }
    }
    out
}

pub fn controller_from_bytes(bytes: &[u8]) -> Result<(Controller, Provenance)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC_CONTROLLER)?;
    let prov = read_provenance(&mut r)?;
    let state_grid = read_grid(&mut r)?;
    let input_grid = read_grid(&mut r)?;
    let ns = state_grid.num_cells();
    let nu = input_grid.num_cells();
    let w0 = read_cellset(&mut r, ns)?;
    // Smallest possible record: cell + rank + empty input list.
    let count = r.read_count(12)?;
    let mut winning = w0.clone();
    let mut ranks = vec![u32::MAX; ns];
    for c in w0.iter() {
        ranks[c] = 0;
    }
    let mut inputs: Vec<Vec<u32>> = vec![Vec::new(); ns];
    let mut prev_cell: Option<u32> = None;
    for _ in 0..count {
        let cell = r.read_u32()?;
        if cell as usize >= ns {
            return Err(Error::Format(format!("controller cell {cell} out of range")));
        }
        if prev_cell.is_some_and(|p| p >= cell) {
            return Err(Error::Format("controller records not sorted".into()));
        }
        prev_cell = Some(cell);
        if w0.contains(cell as usize) {
            return Err(Error::Format("controller record inside the goal set".into()));
        }
        let rank = r.read_u32()?;
        if rank == 0 || rank == u32::MAX {
            return Err(Error::Format(format!("bad rank {rank} for cell {cell}")));
        }
        let k = r.read_u32()? as usize;
        if k == 0 {
            return Err(Error::Format(format!("cell {cell} has no inputs")));
        }
        if k * 4 > r.remaining() {
            return Err(Error::Format("controller inputs truncated".into()));
        }
        let mut us = Vec::with_capacity(k);
        for _ in 0..k {
            let u = r.read_u32()?;
            if u as usize >= nu {
                return Err(Error::Format(format!("input cell {u} out of range")));
            }
            if us.last().is_some_and(|last| *last >= u) {
                return Err(Error::Format("input list not strictly ascending".into()));
            }
            us.push(u);
        }
        winning.insert(cell as usize);
        ranks[cell as usize] = rank;
        inputs[cell as usize] = us;
    }
    r.expect_end()?;
    Ok((
        Controller { state_grid, input_grid, w0, winning, ranks, inputs },
        prov,
    ))
}

// ---------------------------------------------------------------------------
// Deployable bundles
// ---------------------------------------------------------------------------

use crate::deployment::CompressedController;

pub fn deploy_to_bytes(cc: &CompressedController, prov: &Provenance) -> Vec<u8> {
    let mut out = Vec::new();
    put_magic(&mut out, MAGIC_DEPLOY);
    out.extend_from_slice(&provenance_to_bytes(prov));
    out.extend_from_slice(&grid_to_bytes(&cc.state_grid));
    out.extend_from_slice(&grid_to_bytes(&cc.input_grid));
    out.extend_from_slice(&cellset_to_bytes(&cc.w0));
    out.extend_from_slice(&cellset_to_bytes(&cc.winning));
    out.extend_from_slice(&cc.err_c.to_le_bytes());
    out.extend_from_slice(&(cc.exception_inputs.len() as u64).to_le_bytes());
    for (cell, us) in &cc.exception_inputs {
        out.extend_from_slice(&cell.to_le_bytes());
        out.extend_from_slice(&(us.len() as u32).to_le_bytes());
        for u in us {
            out.extend_from_slice(&u.to_le_bytes());
        }
    }
    put_network_blob(&mut out, &cc.net);
    out
}

pub fn deploy_from_bytes(bytes: &[u8]) -> Result<(CompressedController, Provenance)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC_DEPLOY)?;
    let prov = read_provenance(&mut r)?;
    let state_grid = read_grid(&mut r)?;
    let input_grid = read_grid(&mut r)?;
    let ns = state_grid.num_cells();
    let nu = input_grid.num_cells();
    let w0 = read_cellset(&mut r, ns)?;
    let winning = read_cellset(&mut r, ns)?;
    if !w0.is_subset_of(&winning) {
        return Err(Error::Format("goal cells must be winning".into()));
    }
    let err_c = r.read_f64()?;
    if !(0.0..=1.0).contains(&err_c) {
        return Err(Error::Format("rate must lie in [0, 1]".into()));
    }
    let count = r.read_count(8)?;
    let mut exceptions = CellSet::new(ns);
    let mut exception_inputs = Vec::with_capacity(count);
    let mut prev: Option<u32> = None;
    for _ in 0..count {
        let cell = r.read_u32()?;
        if cell as usize >= ns
            || !winning.contains(cell as usize)
            || w0.contains(cell as usize)
        {
            return Err(Error::Format(format!("bad exception cell {cell}")));
        }
        if prev.is_some_and(|p| p >= cell) {
            return Err(Error::Format("exception records not sorted".into()));
        }
        prev = Some(cell);
        let k = r.read_u32()? as usize;
        if k == 0 || k * 4 > r.remaining() {
            return Err(Error::Format("bad exception input list".into()));
        }
        let mut us = Vec::with_capacity(k);
        for _ in 0..k {
            let u = r.read_u32()?;
            if u as usize >= nu {
                return Err(Error::Format(format!("input cell {u} out of range")));
            }
            us.push(u);
        }
        exceptions.insert(cell as usize);
        exception_inputs.push((cell, us));
    }
    let net = read_network_blob(&mut r)?;
    r.expect_end()?;
    if net.input_dim() != state_grid.dim() || net.output_dim() != nu {
        return Err(Error::Format("network shape does not match grids".into()));
    }
    Ok((
        CompressedController {
            net,
            state_grid,
            input_grid,
            w0,
            winning,
            exceptions,
            exception_inputs,
            err_c,
        },
        prov,
    ))
}

#[cfg(test)]
mod controller_format_tests {
    use super::*;
    use crate::abstraction::{build_backward, build_forward};
    use crate::deployment::train_compressed_controller;
    use crate::grid::HyperRect;
    use crate::models::ModelSpec;
    use crate::nn::Activation;
    use crate::repr::LookupSource;
    use crate::synthesis::{discretize_spec, synthesize_neural, ReachAvoidSpec};

    fn built() -> (Controller, CompressedController) {
        let model = ModelSpec::builtin("car2d").unwrap();
        let sg = Grid::new(vec![0.0, 0.0], vec![5.0, 5.0], vec![0.25, 0.25]).unwrap();
        let ug = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![0.5, 0.5]).unwrap();
        let table = build_forward(&model, &sg, &ug, None).unwrap();
        let hulls = build_backward(&table).unwrap();
        let spec = ReachAvoidSpec::new(
            vec![HyperRect::new(vec![3.0, 3.0], vec![4.5, 4.5]).unwrap()],
            vec![],
        )
        .unwrap();
        let (w0, avoid) = discretize_spec(&spec, &sg).unwrap();
        let src = LookupSource { table: &table, hulls: &hulls };
        let (ctrl, _) = synthesize_neural(&src, &w0, &avoid, false).unwrap();
        let mut cfg = MlpConfig::new(vec![2, 12, ug.num_cells()], Activation::Relu, 5);
        cfg.epochs = 50;
        cfg.batch_size = 64;
        let (cc, _) = train_compressed_controller(&ctrl, cfg).unwrap();
        (ctrl, cc)
    }

    #[test]
    fn controller_round_trip() {
        let (ctrl, cc) = built();
        let prov = Provenance { config_hash: [3; 32], seed: 1, build_seconds: 0.5 };
        let bytes = controller_to_bytes(&ctrl, &prov);
        let (back, p) = controller_from_bytes(&bytes).unwrap();
        assert_eq!(back, ctrl);
        assert_eq!(p, prov);
        assert_eq!(controller_to_bytes(&back, &p), bytes);

        let dbytes = deploy_to_bytes(&cc, &prov);
        let (dback, _) = deploy_from_bytes(&dbytes).unwrap();
        assert_eq!(dback.winning, cc.winning);
        assert_eq!(dback.exception_inputs, cc.exception_inputs);
        assert_eq!(dback.net, cc.net);
        assert_eq!(deploy_to_bytes(&dback, &prov), dbytes);
    }

    #[test]
    fn controller_rejects_malformed() {
        let (ctrl, _) = built();
        let prov = Provenance::new([0; 32], 0);
        let bytes = controller_to_bytes(&ctrl, &prov);
        assert!(controller_from_bytes(&bytes[..bytes.len() / 2]).is_err());
        // Rank zero outside the goal set.
        let mut bad = bytes.clone();
        // First record starts right after header: locate by re-serializing
        // an empty controller of the same grids and measuring its length.
        let empty = Controller {
            state_grid: ctrl.state_grid.clone(),
            input_grid: ctrl.input_grid.clone(),
            w0: ctrl.w0.clone(),
            winning: ctrl.w0.clone(),
            ranks: {
                let mut r = vec![u32::MAX; ctrl.ranks.len()];
                for c in ctrl.w0.iter() {
                    r[c] = 0;
                }
                r
            },
            inputs: vec![Vec::new(); ctrl.inputs.len()],
        };
        let header_len = controller_to_bytes(&empty, &prov).len();
        bad[header_len + 4..header_len + 8].copy_from_slice(&0u32.to_le_bytes());
        assert!(controller_from_bytes(&bad).is_err());
    }
}
