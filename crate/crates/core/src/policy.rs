//! From-scratch feedforward policy: ReLU MLP forward pass, reverse-mode
//! gradients, ADAM training with optional early stopping, input featurization
//! for both pipelines, and a self-contained binary policy file format.

use crate::attitude_math::quat_normalize;
pub use crate::attitude_math::mrp_error;
use crate::linmpc::ReferenceWindow;
use crate::sim::RobotState;
use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed policy file: {0}")]
    Format(String),
}

/// Fully connected ReLU network with identity output and a frozen per-feature
/// input standardization baked into the policy so inference is
/// self-contained.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    pub dims: Vec<usize>,
    /// weights[l] has shape dims[l+1] × dims[l].
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub norm_mean: DVector<f64>,
    pub norm_std: DVector<f64>,
}

impl MlpPolicy {
    /// Uniform fan-in initialization: W ~ U(−1/√n_in, 1/√n_in), biases zero.
    pub fn new(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let bound = 1.0 / (dims[l] as f64).sqrt();
            weights.push(DMatrix::from_fn(dims[l + 1], dims[l], |_, _| rng.gen_range(-bound..bound)));
            biases.push(DVector::zeros(dims[l + 1]));
        }
        Self {
            dims: dims.to_vec(),
            weights,
            biases,
            norm_mean: DVector::zeros(dims[0]),
            norm_std: DVector::from_element(dims[0], 1.0),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn set_normalization(&mut self, mean: DVector<f64>, std: DVector<f64>) {
        assert_eq!(mean.len(), self.input_dim());
        assert_eq!(std.len(), self.input_dim());
        self.norm_mean = mean;
        self.norm_std = std.map(|s| s.max(1e-8));
    }

    pub fn forward(&self, input: &DVector<f64>) -> Result<DVector<f64>, PolicyError> {
        if input.len() != self.input_dim() {
            return Err(PolicyError::DimMismatch(format!(
                "input has dim {}, policy expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut a = (input - &self.norm_mean).component_div(&self.norm_std);
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            a = w * a + b;
            if l < last {
                a.apply(|v| *v = v.max(0.0));
            }
        }
        Ok(a)
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    // ------------------------------------------------------------------
    // Policy file: magic, layer count, dims, row-major weights, biases,
    // normalization vectors; all little-endian f64/u32. Round-trips
    // bit-exactly.
    // ------------------------------------------------------------------

    const MAGIC: &'static [u8] = b"TUBEIL-MLP-v1\n";

    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), PolicyError> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let write_vec = |w: &mut W, v: &[f64]| -> std::io::Result<()> {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        for (wm, b) in self.weights.iter().zip(&self.biases) {
            // row-major
            for i in 0..wm.nrows() {
                for j in 0..wm.ncols() {
                    w.write_all(&wm[(i, j)].to_le_bytes())?;
                }
            }
            write_vec(w, b.as_slice())?;
        }
        write_vec(w, self.norm_mean.as_slice())?;
        write_vec(w, self.norm_std.as_slice())?;
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self, PolicyError> {
        let mut magic = vec![0u8; Self::MAGIC.len()];
        r.read_exact(&mut magic)?;
        if magic != Self::MAGIC {
            return Err(PolicyError::Format("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let nlayers = u32::from_le_bytes(u32buf) as usize;
        if !(2..=16).contains(&nlayers) {
            return Err(PolicyError::Format(format!("implausible layer count {nlayers}")));
        }
        let mut dims = Vec::with_capacity(nlayers);
        for _ in 0..nlayers {
            r.read_exact(&mut u32buf)?;
            dims.push(u32::from_le_bytes(u32buf) as usize);
        }
        let read_f64s = |r: &mut R, n: usize| -> Result<Vec<f64>, PolicyError> {
            let mut buf = vec![0u8; 8 * n];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..nlayers - 1 {
            let (rows, cols) = (dims[l + 1], dims[l]);
            let vals = read_f64s(r, rows * cols)?;
            weights.push(DMatrix::from_fn(rows, cols, |i, j| vals[i * cols + j]));
            biases.push(DVector::from_vec(read_f64s(r, rows)?));
        }
        let norm_mean = DVector::from_vec(read_f64s(r, dims[0])?);
        let norm_std = DVector::from_vec(read_f64s(r, dims[0])?);
        Ok(Self { dims, weights, biases, norm_mean, norm_std })
    }

    pub fn save_file(&self, path: &std::path::Path) -> Result<(), PolicyError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)
    }

    pub fn load_file(path: &std::path::Path) -> Result<Self, PolicyError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load(&mut f)
    }
}

/// Parameter-shaped gradient container.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub dw: Vec<DMatrix<f64>>,
    pub db: Vec<DVector<f64>>,
}

impl Gradients {
    fn zeros_like(p: &MlpPolicy) -> Self {
        Self {
            dw: p.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            db: p.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }
}

/// Mean-squared-error imitation loss over a batch with reverse-mode
/// gradients: loss = (1/B)·Σ ‖π_θ(x) − u‖².
pub fn mse_loss_and_grad(
    policy: &MlpPolicy,
    inputs: &[&DVector<f64>],
    targets: &[&DVector<f64>],
) -> (f64, Gradients) {
    assert!(!inputs.is_empty(), "empty batch");
    assert_eq!(inputs.len(), targets.len());
    let nl = policy.weights.len();
    let mut grads = Gradients::zeros_like(policy);
    let mut loss = 0.0;
    let inv_b = 1.0 / inputs.len() as f64;
    for (x, u) in inputs.iter().zip(targets) {
        // Forward pass, keeping activations.
        let mut acts: Vec<DVector<f64>> = Vec::with_capacity(nl + 1);
        acts.push((*x - &policy.norm_mean).component_div(&policy.norm_std));
        let mut pre: Vec<DVector<f64>> = Vec::with_capacity(nl);
        for l in 0..nl {
            let z = &policy.weights[l] * acts.last().unwrap() + &policy.biases[l];
            pre.push(z.clone());
            let a = if l < nl - 1 { z.map(|v| v.max(0.0)) } else { z };
            acts.push(a);
        }
        let err = acts.last().unwrap() - *u;
        loss += err.norm_squared() * inv_b;
        // Backward pass.
        let mut delta = 2.0 * inv_b * err;
        for l in (0..nl).rev() {
            grads.dw[l] += &delta * acts[l].transpose();
            grads.db[l] += &delta;
            if l > 0 {
                let mut d = policy.weights[l].transpose() * delta;
                for i in 0..d.len() {
                    if pre[l - 1][i] <= 0.0 {
                        d[i] = 0.0;
                    }
                }
                delta = d;
            }
        }
    }
    (loss, grads)
}

/// ADAM optimizer state (first/second moments and step counter).
pub struct AdamState {
    m: Gradients,
    v: Gradients,
    t: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamState {
    pub fn new(policy: &MlpPolicy) -> Self {
        Self { m: Gradients::zeros_like(policy), v: Gradients::zeros_like(policy), t: 0 }
    }

    pub fn step(&mut self, policy: &mut MlpPolicy, grads: &Gradients, cfg: &AdamConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let upd = |param: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *param -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        };
        for l in 0..policy.weights.len() {
            for i in 0..policy.weights[l].len() {
                let g = grads.dw[l].as_slice()[i];
                upd(
                    &mut policy.weights[l].as_mut_slice()[i],
                    g,
                    &mut self.m.dw[l].as_mut_slice()[i],
                    &mut self.v.dw[l].as_mut_slice()[i],
                );
            }
            for i in 0..policy.biases[l].len() {
                let g = grads.db[l][i];
                upd(&mut policy.biases[l][i], g, &mut self.m.db[l][i], &mut self.v.db[l][i]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset and training loop.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Demo,
    Augmented,
    FineTune,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub inputs: Vec<DVector<f64>>,
    pub targets: Vec<DVector<f64>>,
    pub provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn push(&mut self, input: DVector<f64>, target: DVector<f64>, tag: Provenance) {
        if let Some(first) = self.inputs.first() {
            assert_eq!(input.len(), first.len(), "dataset input dims must agree");
            assert_eq!(target.len(), self.targets[0].len(), "dataset target dims must agree");
        }
        self.inputs.push(input);
        self.targets.push(target);
        self.provenance.push(tag);
    }

    pub fn extend(&mut self, other: &Dataset) {
        for i in 0..other.len() {
            self.push(other.inputs[i].clone(), other.targets[i].clone(), other.provenance[i]);
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn count(&self, tag: Provenance) -> usize {
        self.provenance.iter().filter(|p| **p == tag).count()
    }

    /// Per-feature mean and standard deviation, for freezing normalization.
    pub fn feature_stats(&self) -> (DVector<f64>, DVector<f64>) {
        assert!(!self.is_empty());
        let d = self.inputs[0].len();
        let n = self.len() as f64;
        let mut mean = DVector::zeros(d);
        for x in &self.inputs {
            mean += x;
        }
        mean /= n;
        let mut var: DVector<f64> = DVector::zeros(d);
        for x in &self.inputs {
            let c = x - &mean;
            var += c.component_mul(&c);
        }
        var /= n;
        (mean, var.map(f64::sqrt))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Early stopping patience; `None` disables validation-based stopping.
    pub patience: Option<usize>,
    pub val_split: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainOpts {
    pub fn linear(cfg: &crate::config::TrainConfig) -> Self {
        Self {
            adam: AdamConfig { lr: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps },
            epochs: cfg.linear_epochs,
            patience: None,
            val_split: 0.0,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        }
    }

    pub fn nonlinear(cfg: &crate::config::TrainConfig) -> Self {
        Self {
            adam: AdamConfig { lr: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps },
            epochs: cfg.nonlinear_max_epochs,
            patience: Some(cfg.patience),
            val_split: cfg.val_split,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Minibatch ADAM training. With a validation split and patience, training
/// stops once validation loss has not improved for `patience` epochs and the
/// best-validation parameters (not the last epoch's) are restored.
pub fn train(policy: &mut MlpPolicy, data: &Dataset, opts: &TrainOpts) -> TrainReport {
    assert!(!data.is_empty(), "cannot train on an empty dataset");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (opts.val_split * data.len() as f64).round() as usize;
    let n_val = if opts.patience.is_some() { n_val.min(data.len() - 1) } else { 0 };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx: Vec<usize> = train_idx.to_vec();

    let eval = |policy: &MlpPolicy, idx: &[usize]| -> f64 {
        if idx.is_empty() {
            return f64::NAN;
        }
        let inputs: Vec<&DVector<f64>> = idx.iter().map(|&i| &data.inputs[i]).collect();
        let targets: Vec<&DVector<f64>> = idx.iter().map(|&i| &data.targets[i]).collect();
        inputs
            .iter()
            .zip(&targets)
            .map(|(x, u)| (policy.forward(x).unwrap() - *u).norm_squared())
            .sum::<f64>()
            / idx.len() as f64
    };

    let mut adam = AdamState::new(policy);
    let mut report = TrainReport { train_loss: Vec::new(), val_loss: Vec::new(), best_epoch: 0, epochs_run: 0 };
    let mut best: Option<(f64, Vec<DMatrix<f64>>, Vec<DVector<f64>>)> = None;
    let mut since_best = 0usize;

    for epoch in 0..opts.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in train_idx.chunks(opts.batch_size.max(1)) {
            let inputs: Vec<&DVector<f64>> = chunk.iter().map(|&i| &data.inputs[i]).collect();
            let targets: Vec<&DVector<f64>> = chunk.iter().map(|&i| &data.targets[i]).collect();
            let (loss, grads) = mse_loss_and_grad(policy, &inputs, &targets);
            adam.step(policy, &grads, &opts.adam);
            epoch_loss += loss;
            batches += 1;
        }
        report.train_loss.push(epoch_loss / batches.max(1) as f64);
        report.epochs_run = epoch + 1;

        if opts.patience.is_some() && !val_idx.is_empty() {
            let vl = eval(policy, val_idx);
            report.val_loss.push(vl);
            if best.as_ref().map_or(true, |(b, _, _)| vl < *b) {
                best = Some((vl, policy.weights.clone(), policy.biases.clone()));
                report.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= opts.patience.unwrap() {
                    break;
                }
            }
        } else {
            report.best_epoch = epoch;
        }
    }
    if let Some((_, w, b)) = best {
        policy.weights = w;
        policy.biases = b;
    }
    report
}

// ---------------------------------------------------------------------------
// Featurization.
// ---------------------------------------------------------------------------

/// Policy input for the linear task: the 8-dim state followed by the N
/// future reference knots (position, velocity), 8 + 6N values.
pub fn featurize_linear(state: &DVector<f64>, refw: &ReferenceWindow) -> Result<DVector<f64>, PolicyError> {
    if state.len() != 8 {
        return Err(PolicyError::DimMismatch(format!("state dim {} != 8", state.len())));
    }
    let n = refw.points.len() - 1;
    let mut out = DVector::zeros(8 + 6 * n);
    out.rows_mut(0, 8).copy_from(state);
    for (k, (p, v)) in refw.points[1..].iter().enumerate() {
        let base = 8 + 6 * k;
        out[base] = p.x;
        out[base + 1] = p.y;
        out[base + 2] = p.z;
        out[base + 3] = v.x;
        out[base + 4] = v.y;
        out[base + 5] = v.z;
    }
    Ok(out)
}

/// Policy input for the flip task: [p, v, q, t, p_des], 14 values. The
/// quaternion is sign-flipped against `prev_q` for temporal continuity; the
/// corrected quaternion is returned for use as the next `prev_q`.
pub fn featurize_flip(
    state: &RobotState,
    t: f64,
    p_des: &Vector3<f64>,
    prev_q: &Vector4<f64>,
) -> (DVector<f64>, Vector4<f64>) {
    let q = quat_normalize(&state.attitude);
    let q = if q.dot(prev_q) < 0.0 { -q } else { q };
    let mut out = DVector::zeros(14);
    for i in 0..3 {
        out[i] = state.position[i];
        out[3 + i] = state.velocity[i];
        out[11 + i] = p_des[i];
    }
    for i in 0..4 {
        out[6 + i] = q[i];
    }
    out[10] = t;
    (out, q)
}
