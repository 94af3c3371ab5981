use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Hidden-layer activation; the output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn tag(&self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Activation> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply(&self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        }
    }

    /// Derivative expressed through the activation *output*.
    fn deriv_from_output(&self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Layer widths p_0..p_v (input through output).
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, seed: u64) -> Self {
        let lr = match activation {
            Activation::Tanh => 1e-3,
            Activation::Relu => 1e-4,
        };
        MlpConfig {
            layer_sizes,
            activation,
            seed,
            learning_rate: lr,
            epochs: 200,
            batch_size: 1024,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        if self.layer_sizes.iter().any(|&p| p == 0) {
            return Err(Error::InvalidConfig("zero-sized layer".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Streaming dataset of (input, target) rows, batch-addressable by index.
/// Disk-backed implementations seek; in-memory ones copy.
pub trait BatchSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn input_dim(&self) -> usize;
    fn target_dim(&self) -> usize;
    /// Fills `inputs`/`targets` (one row per index). Both views have
    /// `indices.len()` rows.
    fn fill(
        &mut self,
        indices: &[usize],
        inputs: ArrayViewMut2<f64>,
        targets: ArrayViewMut2<f64>,
    ) -> Result<()>;
    /// Disk-backed sources answer true: epochs then shuffle whole batch
    /// blocks instead of single records, so every batch is one contiguous
    /// read. The gradient is a mean over the batch either way.
    fn prefers_sequential_batches(&self) -> bool {
        false
    }
}

/// In-memory batch source.
pub struct MemorySource {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl MemorySource {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Self {
        assert_eq!(inputs.nrows(), targets.nrows());
        MemorySource { inputs, targets }
    }
}

impl BatchSource for MemorySource {
    fn len(&self) -> usize {
        self.inputs.nrows()
    }

    fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    fn target_dim(&self) -> usize {
        self.targets.ncols()
    }

    fn fill(
        &mut self,
        indices: &[usize],
        mut inputs: ArrayViewMut2<f64>,
        mut targets: ArrayViewMut2<f64>,
    ) -> Result<()> {
        for (row, &idx) in indices.iter().enumerate() {
            inputs.row_mut(row).assign(&self.inputs.row(idx));
            targets.row_mut(row).assign(&self.targets.row(idx));
        }
        Ok(())
    }
}

/// Dense feed-forward network with 64-bit parameters and a deterministic
/// seeded life cycle: same seed and data order, same parameter bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    weights: Vec<Array2<f64>>, // (in, out)
    biases: Vec<Array1<f64>>,
    config: MlpConfig,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainReport {
    /// Mean MSE over the final epoch; `None` when zero epochs were run.
    pub final_epoch_mean_loss: Option<f64>,
    pub epochs_run: usize,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, drawn from a counter-based PRNG
    /// keyed by the config seed.
    pub fn init(config: MlpConfig) -> Result<Mlp> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in config.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut mat = Array2::<f64>::zeros((fan_in, fan_out));
            for v in mat.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
            weights.push(mat);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Mlp { weights, biases, config })
    }

    /// Builds a network from explicit parameters (tests, file loading).
    pub fn from_parts(
        config: MlpConfig,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Mlp> {
        config.validate()?;
        let v = config.layer_sizes.len() - 1;
        if weights.len() != v || biases.len() != v {
            return Err(Error::InvalidConfig("wrong number of layers".into()));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != config.layer_sizes[i]
                || w.ncols() != config.layer_sizes[i + 1]
                || b.len() != config.layer_sizes[i + 1]
            {
                return Err(Error::InvalidConfig(format!("layer {i} has wrong shape")));
            }
            if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameter"));
            }
        }
        Ok(Mlp { weights, biases, config })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.config.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.config.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.config
            .layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        let mut a = input.to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = b.to_vec();
            for (j, aj) in a.iter().enumerate() {
                let row = w.row(j);
                for (o, acc) in next.iter_mut().enumerate() {
                    *acc += row[o] * aj;
                }
            }
            if l != last {
                for v in next.iter_mut() {
                    *v = match self.config.activation {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.max(0.0),
                    };
                }
            }
            a = next;
        }
        Ok(a)
    }

    /// Batched forward pass, one sample per row.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(input.ncols(), self.input_dim());
        let last = self.weights.len() - 1;
        let mut a = input.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(w);
            z += b;
            if l != last {
                self.config.activation.apply(&mut z);
            }
            a = z;
        }
        a
    }

    /// Mean squared error of the batch under the current parameters.
    pub fn batch_loss(&self, input: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
        let pred = self.forward_batch(input);
        let diff = &pred - &target;
        diff.mapv(|d| d * d).mean().unwrap_or(0.0)
    }

    /// Loss and parameter gradients of the batch MSE (mean over rows and
    /// output dimensions).
    pub fn loss_and_grads(
        &self,
        input: ArrayView2<f64>,
        target: ArrayView2<f64>,
    ) -> (f64, Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let v = self.weights.len();
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(v + 1);
        acts.push(input.to_owned());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(w);
            z += b;
            if l != v - 1 {
                self.config.activation.apply(&mut z);
            }
            acts.push(z);
        }
        let pred = &acts[v];
        let diff = pred - &target;
        let loss = diff.mapv(|d| d * d).mean().unwrap_or(0.0);
        let scale = 2.0 / (diff.nrows() * diff.ncols()) as f64;

        let mut grad_w = vec![Array2::zeros((0, 0)); v];
        let mut grad_b = vec![Array1::zeros(0); v];
        let mut delta = diff.mapv(|d| d * scale);
        for l in (0..v).rev() {
            grad_w[l] = acts[l].t().dot(&delta);
            grad_b[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut prev = delta.dot(&self.weights[l].t());
                prev.zip_mut_with(&acts[l], |d, &a| {
                    *d *= self.config.activation.deriv_from_output(a)
                });
                delta = prev;
            }
        }
        (loss, grad_w, grad_b)
    }

    fn sgd_step(&mut self, input: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
        let (loss, grad_w, grad_b) = self.loss_and_grads(input, target);
        let lr = self.config.learning_rate;
        for (w, g) in self.weights.iter_mut().zip(&grad_w) {
            w.scaled_add(-lr, g);
        }
        for (b, g) in self.biases.iter_mut().zip(&grad_b) {
            b.scaled_add(-lr, g);
        }
        loss
    }

    /// Minibatch SGD on MSE: `epochs` passes over the data, reshuffled each
    /// epoch by a seeded permutation. Single-threaded and bit-deterministic.
    pub fn train_sgd(&mut self, source: &mut dyn BatchSource) -> Result<TrainReport> {
        if source.is_empty() {
            return Err(Error::InvalidConfig("empty training set".into()));
        }
        if source.input_dim() != self.input_dim() || source.target_dim() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: source.input_dim(),
            });
        }
        let n = source.len();
        let batch = self.config.batch_size.min(n);
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let block_mode = source.prefers_sequential_batches();
        let num_blocks = n.div_ceil(batch);
        let mut order: Vec<usize> = if block_mode {
            (0..num_blocks).collect()
        } else {
            (0..n).collect()
        };
        let mut xbuf = Array2::<f64>::zeros((batch, source.input_dim()));
        let mut tbuf = Array2::<f64>::zeros((batch, source.target_dim()));

        let mut final_loss = None;
        let mut indices = Vec::with_capacity(batch);
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut shuffle_rng);
            let mut loss_sum = 0.0;
            let mut run_batch = |indices: &[usize],
                                 net: &mut Mlp,
                                 source: &mut dyn BatchSource|
             -> Result<f64> {
                let b = indices.len();
                let mut xv = xbuf.slice_mut(ndarray::s![..b, ..]);
                let mut tv = tbuf.slice_mut(ndarray::s![..b, ..]);
                source.fill(indices, xv.view_mut(), tv.view_mut())?;
                let loss = net.sgd_step(xv.view(), tv.view());
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged(format!(
                        "epoch {epoch}: batch loss {loss}"
                    )));
                }
                Ok(loss * b as f64)
            };
            if block_mode {
                for &block in &order {
                    let start = block * batch;
                    let end = (start + batch).min(n);
                    indices.clear();
                    indices.extend(start..end);
                    loss_sum += run_batch(&indices, self, source)?;
                }
            } else {
                for chunk in order.chunks(batch) {
                    // The batch gradient is a mean over rows; reading in
                    // ascending index order changes nothing.
                    indices.clear();
                    indices.extend_from_slice(chunk);
                    indices.sort_unstable();
                    loss_sum += run_batch(&indices, self, source)?;
                }
            }
            final_loss = Some(loss_sum / n as f64);
        }
        Ok(TrainReport {
            final_epoch_mean_loss: final_loss,
            epochs_run: self.config.epochs,
        })
    }

    #[cfg(test)]
    pub(crate) fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.param_count() * 8);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in b.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Componentwise maximum absolute prediction error over the whole source.
pub fn prediction_error_regression(net: &Mlp, source: &mut dyn BatchSource) -> Result<Vec<f64>> {
    let q = net.output_dim();
    let mut err = vec![0.0f64; q];
    scan(net, source, |pred, target| {
        for ((e, p), t) in err.iter_mut().zip(pred).zip(target) {
            *e = e.max((p - t).abs());
        }
    })?;
    Ok(err)
}

/// Fraction of samples whose argmax output lands on an invalid (zero) label.
pub fn prediction_error_classification(net: &Mlp, source: &mut dyn BatchSource) -> Result<f64> {
    let mut misses = 0usize;
    let n = source.len();
    scan(net, source, |pred, target| {
        let arg = argmax(pred);
        if target[arg] == 0.0 {
            misses += 1;
        }
    })?;
    Ok(misses as f64 / n as f64)
}

/// Lowest-index argmax; ties break toward the smaller index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn scan(
    net: &Mlp,
    source: &mut dyn BatchSource,
    mut visit: impl FnMut(&[f64], &[f64]),
) -> Result<()> {
    let n = source.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let chunk_size = 2048.min(n);
    let mut xbuf = Array2::<f64>::zeros((chunk_size, source.input_dim()));
    let mut tbuf = Array2::<f64>::zeros((chunk_size, source.target_dim()));
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(chunk_size) {
        let b = chunk.len();
        let mut xv = xbuf.slice_mut(ndarray::s![..b, ..]);
        let mut tv = tbuf.slice_mut(ndarray::s![..b, ..]);
        source.fill(chunk, xv.view_mut(), tv.view_mut())?;
        let pred = net.forward_batch(xv.view());
        let tview = tv.view();
        for r in 0..b {
            visit(
                pred.row(r).as_slice().unwrap(),
                tview.row(r).as_slice().unwrap(),
            );
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct ContinuityIndex {
    pub value: f64,
    /// Whether every pair was checked; a sampled result is a lower bound.
    pub exact: bool,
}

/// Maximum pairwise output/input l2-distance ratio over the inputs. Exact up
/// to 5000 inputs; beyond that, a seeded sample of 5000^2 pairs yields a
/// labeled lower bound.
pub fn continuity_index(net: &Mlp, inputs: ArrayView2<f64>, seed: u64) -> Result<ContinuityIndex> {
    let n = inputs.nrows();
    if n < 2 {
        return Err(Error::InvalidConfig("continuity index needs >= 2 inputs".into()));
    }
    let outputs = net.forward_batch(inputs);
    let ratio = |i: usize, j: usize| -> f64 {
        let mut din = 0.0;
        for (a, b) in inputs.row(i).iter().zip(inputs.row(j)) {
            din += (a - b) * (a - b);
        }
        if din == 0.0 {
            return 0.0;
        }
        let mut dout = 0.0;
        for (a, b) in outputs.row(i).iter().zip(outputs.row(j)) {
            dout += (a - b) * (a - b);
        }
        (dout / din).sqrt()
    };
    let mut best = 0.0f64;
    if n <= 5000 {
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.max(ratio(i, j));
            }
        }
        Ok(ContinuityIndex { value: best, exact: true })
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5000usize * 5000 {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                best = best.max(ratio(i, j));
            }
        }
        Ok(ContinuityIndex { value: best, exact: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(sizes: &[usize], act: Activation, seed: u64) -> MlpConfig {
        MlpConfig::new(sizes.to_vec(), act, seed)
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = Mlp::init(cfg(&[3, 5, 2], Activation::Tanh, 42)).unwrap();
        let b = Mlp::init(cfg(&[3, 5, 2], Activation::Tanh, 42)).unwrap();
        assert_eq!(a.param_bytes(), b.param_bytes());
        let c = Mlp::init(cfg(&[3, 5, 2], Activation::Tanh, 43)).unwrap();
        assert_ne!(a.param_bytes(), c.param_bytes());
    }

    #[test]
    fn param_count_shape_arithmetic() {
        let net = Mlp::init(cfg(&[2, 3, 1], Activation::Tanh, 0)).unwrap();
        assert_eq!(net.param_count(), 2 * 3 + 3 + 3 * 1 + 1);
        assert!(Mlp::init(cfg(&[2, 0, 1], Activation::Tanh, 0)).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let c = cfg(&[3, 4, 2], Activation::Tanh, 0);
        let net = Mlp::from_parts(
            c,
            vec![Array2::zeros((3, 4)), Array2::zeros((4, 2))],
            vec![Array1::zeros(4), Array1::zeros(2)],
        )
        .unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_identity_layer() {
        let c = cfg(&[2, 2], Activation::Tanh, 0);
        let net = Mlp::from_parts(c, vec![Array2::eye(2)], vec![Array1::zeros(2)]).unwrap();
        assert_eq!(net.forward(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
    }

    /// Hand evaluation oracle for a 1-2-1 tanh net.
    #[test]
    fn hand_built_net_matches_manual_arithmetic() {
        let c = cfg(&[1, 2, 1], Activation::Tanh, 0);
        let net = Mlp::from_parts(
            c,
            vec![array![[0.5, -1.2]], array![[2.0], [0.7]]],
            vec![array![0.1, -0.3], array![0.05]],
        )
        .unwrap();
        let x = 0.8f64;
        let h1 = (0.5 * x + 0.1).tanh();
        let h2 = (-1.2 * x - 0.3).tanh();
        let expect = 2.0 * h1 + 0.7 * h2 + 0.05;
        let got = net.forward(&[x]).unwrap()[0];
        assert!((got - expect).abs() < 1e-12);
        // Batched path agrees with the scalar path.
        let batch = net.forward_batch(array![[x]].view());
        assert!((batch[[0, 0]] - expect).abs() < 1e-12);
    }

    /// Analytic oracle: least squares fit of y = 2x through the origin-biased
    /// single neuron recovers the slope.
    #[test]
    fn fits_linear_map() {
        let xs: Vec<f64> = (0..100).map(|i| -1.0 + 2.0 * i as f64 / 99.0).collect();
        let inputs = Array2::from_shape_vec((100, 1), xs.clone()).unwrap();
        let targets = Array2::from_shape_vec((100, 1), xs.iter().map(|x| 2.0 * x).collect()).unwrap();
        let mut source = MemorySource::new(inputs, targets);
        let mut c = cfg(&[1, 1], Activation::Tanh, 7);
        c.learning_rate = 0.01;
        c.epochs = 2000;
        c.batch_size = 100;
        let mut net = Mlp::init(c).unwrap();
        let report = net.train_sgd(&mut source).unwrap();
        assert!((net.weights()[0][[0, 0]] - 2.0).abs() < 1e-3);
        assert!(report.final_epoch_mean_loss.unwrap() < 1e-5);
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let mut c = cfg(&[2, 3, 1], Activation::Tanh, 5);
        c.epochs = 0;
        let mut net = Mlp::init(c).unwrap();
        let before = net.param_bytes();
        let mut source = MemorySource::new(Array2::zeros((4, 2)), Array2::zeros((4, 1)));
        let report = net.train_sgd(&mut source).unwrap();
        assert_eq!(net.param_bytes(), before);
        assert!(report.final_epoch_mean_loss.is_none());
    }

    /// Central finite differences oracle (h = 1e-6) for backprop gradients.
    #[test]
    fn gradient_check_against_finite_differences() {
        let c = cfg(&[2, 3, 2], Activation::Tanh, 11);
        let net = Mlp::init(c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let (_, grad_w, grad_b) = net.loss_and_grads(x.view(), t.view());

        let h = 1e-6;
        for l in 0..net.weights.len() {
            for idx in 0..net.weights[l].len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.weights[l].as_slice_mut().unwrap()[idx] += h;
                minus.weights[l].as_slice_mut().unwrap()[idx] -= h;
                let fd =
                    (plus.batch_loss(x.view(), t.view()) - minus.batch_loss(x.view(), t.view()))
                        / (2.0 * h);
                let an = grad_w[l].as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    ((fd - an) / denom).abs() < 1e-5,
                    "weight grad mismatch layer {l} idx {idx}: fd={fd} an={an}"
                );
            }
            for idx in 0..net.biases[l].len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.biases[l][idx] += h;
                minus.biases[l][idx] -= h;
                let fd =
                    (plus.batch_loss(x.view(), t.view()) - minus.batch_loss(x.view(), t.view()))
                        / (2.0 * h);
                let an = grad_b[l][idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(((fd - an) / denom).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = Array2::from_shape_fn((64, 2), |_| rng.random_range(-1.0..1.0));
            let t = x.mapv(|v| v * 0.5);
            let mut source = MemorySource::new(x, t);
            let mut c = cfg(&[2, 4, 2], Activation::Relu, 17);
            c.epochs = 20;
            c.batch_size = 16;
            let mut net = Mlp::init(c).unwrap();
            net.train_sgd(&mut source).unwrap();
            net.param_bytes()
        };
        assert_eq!(run(), run());
    }

    /// Full-batch descent on a convex single-layer problem never increases
    /// the epoch loss.
    #[test]
    fn convex_loss_non_increasing() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let inputs = Array2::from_shape_vec((50, 1), xs.clone()).unwrap();
        let targets =
            Array2::from_shape_vec((50, 1), xs.iter().map(|x| 3.0 * x - 1.0).collect()).unwrap();
        let mut c = cfg(&[1, 1], Activation::Tanh, 2);
        c.learning_rate = 0.05;
        c.epochs = 1;
        c.batch_size = 50;
        let mut net = Mlp::init(c).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let mut source = MemorySource::new(inputs.clone(), targets.clone());
            let r = net.train_sgd(&mut source).unwrap();
            let loss = r.final_epoch_mean_loss.unwrap();
            assert!(loss <= last + 1e-15, "loss increased: {loss} > {last}");
            last = loss;
        }
    }

    #[test]
    fn regression_error_examples() {
        // Exact memorizer has zero error.
        let ident = Mlp::from_parts(
            cfg(&[1, 1], Activation::Tanh, 0),
            vec![Array2::eye(1)],
            vec![Array1::zeros(1)],
        )
        .unwrap();
        let xs = array![[0.1], [0.5], [-0.3]];
        let mut src = MemorySource::new(xs.clone(), xs.clone());
        assert_eq!(prediction_error_regression(&ident, &mut src).unwrap(), vec![0.0]);

        // Constant-zero net against targets 1 and -2 has max error 2.
        let zero = Mlp::from_parts(
            cfg(&[1, 1], Activation::Tanh, 0),
            vec![Array2::zeros((1, 1))],
            vec![Array1::zeros(1)],
        )
        .unwrap();
        let mut src = MemorySource::new(array![[0.0], [1.0]], array![[1.0], [-2.0]]);
        assert_eq!(prediction_error_regression(&zero, &mut src).unwrap(), vec![2.0]);

        // Extending the dataset never decreases the error.
        let mut small = MemorySource::new(array![[0.0]], array![[1.0]]);
        let mut big = MemorySource::new(array![[0.0], [1.0]], array![[1.0], [-2.0]]);
        let e_small = prediction_error_regression(&zero, &mut small).unwrap();
        let e_big = prediction_error_regression(&zero, &mut big).unwrap();
        assert!(e_big[0] >= e_small[0]);
    }

    #[test]
    fn classification_error_examples() {
        // Constant net predicting class 0, valid everywhere: zero error.
        let constant = Mlp::from_parts(
            cfg(&[1, 2], Activation::Relu, 0),
            vec![Array2::zeros((1, 2))],
            vec![array![1.0, 0.0]],
        )
        .unwrap();
        let mut src = MemorySource::new(array![[0.0], [1.0]], array![[1.0, 0.0], [1.0, 1.0]]);
        assert_eq!(prediction_error_classification(&constant, &mut src).unwrap(), 0.0);

        // One of two points forces a miss: rate one half.
        let mut src = MemorySource::new(array![[0.0], [1.0]], array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(prediction_error_classification(&constant, &mut src).unwrap(), 0.5);
    }

    #[test]
    fn continuity_index_examples() {
        let inputs = array![[0.0], [0.5], [1.0]];
        // Constant net: index 0.
        let constant = Mlp::from_parts(
            cfg(&[1, 1], Activation::Tanh, 0),
            vec![Array2::zeros((1, 1))],
            vec![array![4.0]],
        )
        .unwrap();
        assert_eq!(continuity_index(&constant, inputs.view(), 0).unwrap().value, 0.0);

        // Identity: index 1.
        let ident = Mlp::from_parts(
            cfg(&[1, 1], Activation::Tanh, 0),
            vec![Array2::eye(1)],
            vec![Array1::zeros(1)],
        )
        .unwrap();
        let ci = continuity_index(&ident, inputs.view(), 0).unwrap();
        assert!(ci.exact && (ci.value - 1.0).abs() < 1e-12);

        // y = 3x: index 3.
        let tripler = Mlp::from_parts(
            cfg(&[1, 1], Activation::Tanh, 0),
            vec![array![[3.0]]],
            vec![Array1::zeros(1)],
        )
        .unwrap();
        let ci = continuity_index(&tripler, inputs.view(), 0).unwrap();
        assert!((ci.value - 3.0).abs() < 1e-12);
    }
}

