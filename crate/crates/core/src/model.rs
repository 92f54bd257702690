//! A small dense classifier with a normalization layer.
//!
//! The network is `flatten -> dense(H) -> norm -> relu -> dense(C)`. At
//! adaptation time only the normalization affine parameters (gamma, beta)
//! are trainable; pretraining updates everything. Batch norm uses the
//! statistics of the current batch (no running averages), layer norm
//! normalizes per sample.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::numerics::{argmax, entropy, softmax, Matrix, Rng};
use crate::transforms::TransformSpec;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    BatchNorm,
    LayerNorm,
}

impl NormKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "batch" | "batch_norm" => NormKind::BatchNorm,
            "layer" | "layer_norm" => NormKind::LayerNorm,
            other => {
                return Err(Error::Config(format!(
                    "unknown norm kind '{other}' (expected batch or layer)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormKind::BatchNorm => "batch",
            NormKind::LayerNorm => "layer",
        }
    }
}

/// Normalization layer with per-feature affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub kind: NormKind,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

/// Per-sample inference output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// `argmax` of the probabilities; ties break toward the lowest index.
    pub pseudo_label: usize,
    /// Shannon entropy of `probs` in nats, in `[0, ln C]`.
    pub entropy: f64,
}

/// Gradient with respect to the adaptation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptGradient {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AdaptGradient {
    pub fn zeros(hidden: usize) -> Self {
        AdaptGradient {
            gamma: vec![0.0; hidden],
            beta: vec![0.0; hidden],
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.gamma
            .iter()
            .chain(&self.beta)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ParamSnapshot {
    w1: Matrix,
    b1: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
    vel_gamma: Vec<f64>,
    vel_beta: Vec<f64>,
}

/// The classifier state: parameters, adaptation momentum buffers, and an
/// optional snapshot to reset to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    input_dim: usize,
    hidden: usize,
    classes: usize,
    w1: Matrix,
    b1: Vec<f64>,
    norm: NormLayer,
    w2: Matrix,
    b2: Vec<f64>,
    /// Momentum buffers for the trainable (gamma, beta) parameters.
    vel_gamma: Vec<f64>,
    vel_beta: Vec<f64>,
    snapshot: Option<Box<ParamSnapshot>>,
}

/// Activations cached by a forward pass, enough to backpropagate the
/// entropy loss into (gamma, beta).
pub struct ForwardCache {
    /// Normalized pre-affine activations (B x H).
    x_hat: Matrix,
    /// Post-affine activations (B x H); the relu mask is `y > 0`.
    y: Matrix,
    probs: Matrix,
    entropies: Vec<f64>,
}

impl ModelState {
    /// Fresh model with He-initialized dense layers, gamma = 1, beta = 0.
    pub fn new(
        input_dim: usize,
        hidden: usize,
        classes: usize,
        norm_kind: NormKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        if classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let s1 = (2.0 / input_dim as f64).sqrt();
        let w1 = Matrix::from_fn(input_dim, hidden, |_, _| s1 * rng.normal());
        let s2 = (2.0 / hidden as f64).sqrt();
        let w2 = Matrix::from_fn(hidden, classes, |_, _| s2 * rng.normal());
        Ok(ModelState {
            input_dim,
            hidden,
            classes,
            w1,
            b1: vec![0.0; hidden],
            norm: NormLayer {
                kind: norm_kind,
                gamma: vec![1.0; hidden],
                beta: vec![0.0; hidden],
                eps: NORM_EPS,
            },
            w2,
            b2: vec![0.0; classes],
            vel_gamma: vec![0.0; hidden],
            vel_beta: vec![0.0; hidden],
            snapshot: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn norm(&self) -> &NormLayer {
        &self.norm
    }

    pub fn frozen_params(&self) -> (&Matrix, &[f64], &Matrix, &[f64]) {
        (&self.w1, &self.b1, &self.w2, &self.b2)
    }

    pub fn momentum_buffers(&self) -> (&[f64], &[f64]) {
        (&self.vel_gamma, &self.vel_beta)
    }

    /// Runs the batch through the network.
    ///
    /// Batch norm draws its statistics from this batch and needs at least
    /// two samples; a single-sample batch is a configuration error that
    /// points at layer norm.
    pub fn forward(&self, batch: &Batch) -> Result<Vec<Prediction>> {
        Ok(self.forward_cached(batch)?.0)
    }

    /// Forward pass that also returns the cached activations needed by
    /// [`ModelState::grad_adapt_params`].
    pub fn forward_cached(&self, batch: &Batch) -> Result<(Vec<Prediction>, ForwardCache)> {
        let x = batch.to_matrix(self.input_dim)?;
        self.forward_matrix(&x)
    }

    fn forward_matrix(&self, x: &Matrix) -> Result<(Vec<Prediction>, ForwardCache)> {
        let b = x.rows();
        if b == 0 {
            return Err(Error::EmptyInput("forward"));
        }
        if self.norm.kind == NormKind::BatchNorm && b < 2 {
            return Err(Error::Config(
                "batch norm needs batch size >= 2 for batch statistics; \
                 use layer norm for single-sample streams"
                    .into(),
            ));
        }
        let z1 = x.matmul(&self.w1)?.add_row_vector(&self.b1)?;
        let (x_hat, _, _) = normalize(&z1, self.norm.kind, self.norm.eps);
        let mut y = x_hat.clone();
        for r in 0..b {
            let row = y.row_mut(r);
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.norm.gamma[j] * *v + self.norm.beta[j];
            }
        }
        let a = y.map(|v| v.max(0.0));
        let logits = a.matmul(&self.w2)?.add_row_vector(&self.b2)?;

        let mut preds = Vec::with_capacity(b);
        let mut probs_m = Matrix::zeros(b, self.classes);
        let mut entropies = Vec::with_capacity(b);
        for r in 0..b {
            let row_logits = logits.row(r).to_vec();
            let probs = softmax(&row_logits)?;
            let ent = entropy(&probs);
            probs_m.row_mut(r).copy_from_slice(&probs);
            entropies.push(ent);
            preds.push(Prediction {
                pseudo_label: argmax(&probs),
                entropy: ent,
                logits: row_logits,
                probs,
            });
        }
        let cache = ForwardCache {
            x_hat,
            y,
            probs: probs_m,
            entropies,
        };
        Ok((preds, cache))
    }

    /// Gradient of `sum_i w_i * Ent_i / max(1, m)` with respect to
    /// (gamma, beta), where `m` is the number of strictly positive weights.
    ///
    /// The weights are treated as constants; no gradient flows through
    /// them. An all-zero weight vector yields a zero gradient.
    pub fn grad_adapt_params(&self, cache: &ForwardCache, weights: &[f64]) -> Result<AdaptGradient> {
        let b = cache.probs.rows();
        if weights.len() != b {
            return Err(Error::DimensionMismatch {
                context: "grad_adapt_params",
                expected: format!("{b} weights"),
                actual: format!("{}", weights.len()),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::NonFiniteInput {
                context: "grad_adapt_params weights",
            });
        }
        let active = weights.iter().filter(|w| **w > 0.0).count();
        let mut grad = AdaptGradient::zeros(self.hidden);
        if active == 0 {
            return Ok(grad);
        }
        let scale = 1.0 / active as f64;
        for i in 0..b {
            if weights[i] == 0.0 {
                continue;
            }
            let w = weights[i] * scale;
            let probs = cache.probs.row(i);
            let ent = cache.entropies[i];
            // dEnt/dz_k = -p_k (ln p_k + Ent)
            let g_logits: Vec<f64> = probs
                .iter()
                .map(|&p| if p > 0.0 { -w * p * (p.ln() + ent) } else { 0.0 })
                .collect();
            for j in 0..self.hidden {
                if cache.y.get(i, j) <= 0.0 {
                    continue; // relu gate
                }
                let mut g_a = 0.0;
                for (k, g) in g_logits.iter().enumerate() {
                    g_a += g * self.w2.get(j, k);
                }
                grad.gamma[j] += g_a * cache.x_hat.get(i, j);
                grad.beta[j] += g_a;
            }
        }
        Ok(grad)
    }

    /// SGD step with classic momentum on the adaptation parameters only:
    /// `v <- momentum * v + g`, `theta <- theta - lr * v`.
    pub fn sgd_step(&mut self, grad: &AdaptGradient, lr: f64, momentum: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        for j in 0..self.hidden {
            self.vel_gamma[j] = momentum * self.vel_gamma[j] + grad.gamma[j];
            self.norm.gamma[j] -= lr * self.vel_gamma[j];
            self.vel_beta[j] = momentum * self.vel_beta[j] + grad.beta[j];
            self.norm.beta[j] -= lr * self.vel_beta[j];
        }
        Ok(())
    }

    /// Stores the current parameters and momentum buffers for a later
    /// [`ModelState::reset`].
    pub fn take_snapshot(&mut self) {
        self.snapshot = Some(Box::new(ParamSnapshot {
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            gamma: self.norm.gamma.clone(),
            beta: self.norm.beta.clone(),
            w2: self.w2.clone(),
            b2: self.b2.clone(),
            vel_gamma: self.vel_gamma.clone(),
            vel_beta: self.vel_beta.clone(),
        }));
    }

    /// Restores the snapshot exactly; the snapshot stays in place so reset
    /// is idempotent.
    pub fn reset(&mut self) -> Result<()> {
        let snap = self
            .snapshot
            .as_ref()
            .ok_or_else(|| Error::State("reset called without a snapshot".into()))?;
        self.w1 = snap.w1.clone();
        self.b1 = snap.b1.clone();
        self.norm.gamma = snap.gamma.clone();
        self.norm.beta = snap.beta.clone();
        self.w2 = snap.w2.clone();
        self.b2 = snap.b2.clone();
        self.vel_gamma = snap.vel_gamma.clone();
        self.vel_beta = snap.vel_beta.clone();
        Ok(())
    }

    pub fn has_snapshot(&self) -> bool {
        self.snapshot.is_some()
    }
}

/// Normalizes `z` (B x H). Returns `(x_hat, means, inv_stds)` where the
/// statistics are per feature for batch norm and per sample for layer norm.
fn normalize(z: &Matrix, kind: NormKind, eps: f64) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (b, h) = (z.rows(), z.cols());
    match kind {
        NormKind::BatchNorm => {
            let mut means = vec![0.0; h];
            for r in 0..b {
                for (j, v) in z.row(r).iter().enumerate() {
                    means[j] += v;
                }
            }
            means.iter_mut().for_each(|m| *m /= b as f64);
            let mut vars = vec![0.0; h];
            for r in 0..b {
                for (j, v) in z.row(r).iter().enumerate() {
                    let d = v - means[j];
                    vars[j] += d * d;
                }
            }
            let inv_stds: Vec<f64> = vars
                .iter()
                .map(|v| 1.0 / (v / b as f64 + eps).sqrt())
                .collect();
            let x_hat = Matrix::from_fn(b, h, |r, j| (z.get(r, j) - means[j]) * inv_stds[j]);
            (x_hat, means, inv_stds)
        }
        NormKind::LayerNorm => {
            let mut means = vec![0.0; b];
            let mut inv_stds = vec![0.0; b];
            for r in 0..b {
                let row = z.row(r);
                let mean = row.iter().sum::<f64>() / h as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
                means[r] = mean;
                inv_stds[r] = 1.0 / (var + eps).sqrt();
            }
            let x_hat = Matrix::from_fn(b, h, |r, j| (z.get(r, j) - means[r]) * inv_stds[r]);
            (x_hat, means, inv_stds)
        }
    }
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

/// Optional PLPD-based sample filter applied after a warm-up phase: only
/// samples whose prediction drops by more than `threshold` under the
/// transform keep contributing to the loss.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlpdFilter {
    pub threshold: f64,
    /// Fraction of the epochs trained conventionally before the filter
    /// kicks in.
    pub warmup_frac: f64,
    pub transform: TransformSpec,
}

impl Default for PlpdFilter {
    fn default() -> Self {
        PlpdFilter {
            threshold: 0.2,
            warmup_frac: 0.25,
            transform: TransformSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub plpd_filter: Option<PlpdFilter>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            lr: 0.005,
            momentum: 0.9,
            batch_size: 64,
            plpd_filter: None,
        }
    }
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub updates: u64,
    /// Batches skipped after warm-up because the filter passed no sample.
    pub post_warmup_skipped: u64,
    pub post_warmup_updates: u64,
    pub final_train_accuracy: f64,
}

struct FullGradients {
    w1: Matrix,
    b1: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl ModelState {
    /// Supervised cross-entropy pretraining over all parameters with SGD
    /// momentum. With a `plpd_filter`, batches after the warm-up phase drop
    /// samples whose prediction survives the object-destructive transform.
    pub fn pretrain(
        &mut self,
        train: &[crate::data::LabeledImage],
        cfg: &PretrainConfig,
        rng: &mut Rng,
    ) -> Result<PretrainReport> {
        if train.is_empty() {
            return Err(Error::EmptyInput("pretrain: training set"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("pretrain batch size must be >= 1".into()));
        }
        // Two independent streams so the filtered variant consumes transform
        // randomness without disturbing the shuffle sequence.
        let mut shuffle_rng = Rng::new(rng.next_u64());
        let mut transform_rng = Rng::new(rng.next_u64());

        let mut vel = FullGradients {
            w1: Matrix::zeros(self.input_dim, self.hidden),
            b1: vec![0.0; self.hidden],
            gamma: vec![0.0; self.hidden],
            beta: vec![0.0; self.hidden],
            w2: Matrix::zeros(self.hidden, self.classes),
            b2: vec![0.0; self.classes],
        };
        let warmup_epochs = cfg
            .plpd_filter
            .as_ref()
            .map(|f| (f.warmup_frac * cfg.epochs as f64).round() as usize)
            .unwrap_or(cfg.epochs);
        let mut report = PretrainReport {
            epochs: cfg.epochs,
            ..Default::default()
        };

        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..cfg.epochs {
            shuffle_rng.shuffle(&mut order);
            let filtering = cfg
                .plpd_filter
                .as_ref()
                .filter(|_| epoch >= warmup_epochs);
            for chunk in batch_ranges(order.len(), cfg.batch_size, self.norm.kind) {
                let batch = Batch::from_samples(chunk.iter().map(|&i| &train[order[i]]));
                let mut mask = vec![true; batch.len()];
                if let Some(filter) = filtering {
                    let preds = self.forward(&batch)?;
                    let transformed = batch.map_images(|img| {
                        filter.transform.apply(img, &mut transform_rng)
                    })?;
                    let aux = self.forward_aux(&transformed)?;
                    for (i, keep) in mask.iter_mut().enumerate() {
                        let y_hat = preds[i].pseudo_label;
                        let plpd = preds[i].probs[y_hat] - aux[i].probs[y_hat];
                        *keep = plpd > filter.threshold;
                    }
                    if mask.iter().all(|k| !k) {
                        report.post_warmup_skipped += 1;
                        continue;
                    }
                }
                let grads = self.cross_entropy_gradients(&batch, &mask)?;
                self.apply_full_step(&grads, &mut vel, cfg.lr, cfg.momentum);
                report.updates += 1;
                if filtering.is_some() {
                    report.post_warmup_updates += 1;
                }
            }
        }
        report.final_train_accuracy = self.accuracy(train, cfg.batch_size)?;
        Ok(report)
    }

    /// Forward used for auxiliary (transformed) inputs; a single-sample
    /// batch under batch norm is duplicated so batch statistics exist.
    pub(crate) fn forward_aux(&self, batch: &Batch) -> Result<Vec<Prediction>> {
        if batch.len() == 1 && self.norm.kind == NormKind::BatchNorm {
            let doubled = batch.repeated_twice();
            let mut preds = self.forward(&doubled)?;
            preds.truncate(1);
            return Ok(preds);
        }
        self.forward(batch)
    }

    fn accuracy(&self, samples: &[crate::data::LabeledImage], batch_size: usize) -> Result<f64> {
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..samples.len()).collect();
        for chunk in batch_ranges(idx.len(), batch_size.max(2), self.norm.kind) {
            let batch = Batch::from_samples(chunk.iter().map(|&i| &samples[i]));
            let preds = self.forward(&batch)?;
            correct += preds
                .iter()
                .zip(&batch.labels)
                .filter(|(p, &l)| p.pseudo_label == l)
                .count();
        }
        Ok(correct as f64 / samples.len() as f64)
    }

    /// Cross-entropy gradients over all parameters, restricted to the
    /// masked samples (loss normalized by the number of kept samples).
    fn cross_entropy_gradients(&self, batch: &Batch, mask: &[bool]) -> Result<FullGradients> {
        let x = batch.to_matrix(self.input_dim)?;
        let b = x.rows();
        let h = self.hidden;
        let kept = mask.iter().filter(|k| **k).count().max(1) as f64;

        let z1 = x.matmul(&self.w1)?.add_row_vector(&self.b1)?;
        let (x_hat, means, inv_stds) = normalize(&z1, self.norm.kind, self.norm.eps);
        let mut y = x_hat.clone();
        for r in 0..b {
            for (j, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = self.norm.gamma[j] * *v + self.norm.beta[j];
            }
        }
        let a = y.map(|v| v.max(0.0));
        let logits = a.matmul(&self.w2)?.add_row_vector(&self.b2)?;

        // d(cross-entropy)/d(logits) = (p - onehot) / kept for kept samples.
        let mut d_logits = Matrix::zeros(b, self.classes);
        for r in 0..b {
            if !mask[r] {
                continue;
            }
            let probs = softmax(logits.row(r))?;
            for (k, &p) in probs.iter().enumerate() {
                let target = if batch.labels[r] == k { 1.0 } else { 0.0 };
                d_logits.set(r, k, (p - target) / kept);
            }
        }

        let d_w2 = a.transpose().matmul(&d_logits)?;
        let d_b2 = column_sums(&d_logits);
        let d_a = d_logits.matmul(&self.w2.transpose())?;
        let d_y = Matrix::from_fn(b, h, |r, j| {
            if y.get(r, j) > 0.0 {
                d_a.get(r, j)
            } else {
                0.0
            }
        });
        let mut d_gamma = vec![0.0; h];
        let mut d_beta = vec![0.0; h];
        for r in 0..b {
            for j in 0..h {
                d_gamma[j] += d_y.get(r, j) * x_hat.get(r, j);
                d_beta[j] += d_y.get(r, j);
            }
        }
        let d_x_hat = Matrix::from_fn(b, h, |r, j| d_y.get(r, j) * self.norm.gamma[j]);
        let d_z1 = normalize_backward(&z1, &x_hat, &d_x_hat, &means, &inv_stds, self.norm.kind);
        let d_w1 = x.transpose().matmul(&d_z1)?;
        let d_b1 = column_sums(&d_z1);

        Ok(FullGradients {
            w1: d_w1,
            b1: d_b1,
            gamma: d_gamma,
            beta: d_beta,
            w2: d_w2,
            b2: d_b2,
        })
    }

    fn apply_full_step(&mut self, g: &FullGradients, vel: &mut FullGradients, lr: f64, momentum: f64) {
        let step = |p: &mut f64, v: &mut f64, g: f64| {
            *v = momentum * *v + g;
            *p -= lr * *v;
        };
        for (p, (v, g)) in self
            .w1
            .data_mut()
            .iter_mut()
            .zip(vel.w1.data_mut().iter_mut().zip(g.w1.data()))
        {
            step(p, v, *g);
        }
        for (p, (v, g)) in self.b1.iter_mut().zip(vel.b1.iter_mut().zip(&g.b1)) {
            step(p, v, *g);
        }
        for (p, (v, g)) in self
            .norm
            .gamma
            .iter_mut()
            .zip(vel.gamma.iter_mut().zip(&g.gamma))
        {
            step(p, v, *g);
        }
        for (p, (v, g)) in self
            .norm
            .beta
            .iter_mut()
            .zip(vel.beta.iter_mut().zip(&g.beta))
        {
            step(p, v, *g);
        }
        for (p, (v, g)) in self
            .w2
            .data_mut()
            .iter_mut()
            .zip(vel.w2.data_mut().iter_mut().zip(g.w2.data()))
        {
            step(p, v, *g);
        }
        for (p, (v, g)) in self.b2.iter_mut().zip(vel.b2.iter_mut().zip(&g.b2)) {
            step(p, v, *g);
        }
    }
}

/// Gradient of the normalization with respect to its input.
fn normalize_backward(
    z: &Matrix,
    _x_hat: &Matrix,
    d_x_hat: &Matrix,
    means: &[f64],
    inv_stds: &[f64],
    kind: NormKind,
) -> Matrix {
    let (b, h) = (z.rows(), z.cols());
    match kind {
        NormKind::BatchNorm => {
            let n = b as f64;
            let mut d_var = vec![0.0; h];
            let mut d_mean = vec![0.0; h];
            for j in 0..h {
                let inv = inv_stds[j];
                let mut dv = 0.0;
                for r in 0..b {
                    dv += d_x_hat.get(r, j) * (z.get(r, j) - means[j]);
                }
                d_var[j] = dv * (-0.5) * inv.powi(3);
                let mut dm = 0.0;
                let mut centered_sum = 0.0;
                for r in 0..b {
                    dm += d_x_hat.get(r, j) * (-inv);
                    centered_sum += z.get(r, j) - means[j];
                }
                d_mean[j] = dm + d_var[j] * (-2.0 / n) * centered_sum;
            }
            Matrix::from_fn(b, h, |r, j| {
                d_x_hat.get(r, j) * inv_stds[j]
                    + d_var[j] * 2.0 * (z.get(r, j) - means[j]) / n
                    + d_mean[j] / n
            })
        }
        NormKind::LayerNorm => {
            let n = h as f64;
            let mut d_var = vec![0.0; b];
            let mut d_mean = vec![0.0; b];
            for r in 0..b {
                let inv = inv_stds[r];
                let mut dv = 0.0;
                let mut dm = 0.0;
                let mut centered_sum = 0.0;
                for j in 0..h {
                    dv += d_x_hat.get(r, j) * (z.get(r, j) - means[r]);
                    dm += d_x_hat.get(r, j) * (-inv);
                    centered_sum += z.get(r, j) - means[r];
                }
                d_var[r] = dv * (-0.5) * inv.powi(3);
                d_mean[r] = dm + d_var[r] * (-2.0 / n) * centered_sum;
            }
            Matrix::from_fn(b, h, |r, j| {
                d_x_hat.get(r, j) * inv_stds[r]
                    + d_var[r] * 2.0 * (z.get(r, j) - means[r]) / n
                    + d_mean[r] / n
            })
        }
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (j, v) in m.row(r).iter().enumerate() {
            sums[j] += v;
        }
    }
    sums
}

/// Splits `0..len` into consecutive batches. A trailing single-sample batch
/// is merged into the previous one when batch norm is in play, since batch
/// statistics need two samples.
fn batch_ranges(len: usize, batch_size: usize, norm: NormKind) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + batch_size).min(len);
        out.push((start..end).collect());
        start = end;
    }
    if norm == NormKind::BatchNorm && out.len() > 1 {
        if let Some(last) = out.last() {
            if last.len() == 1 {
                let tail = out.pop().unwrap();
                out.last_mut().unwrap().extend(tail);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"DYOCKPT1";

impl ModelState {
    /// Serializes shapes, parameters, and momentum buffers; round-trips
    /// bit-exact.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let kind: u32 = match self.norm.kind {
            NormKind::BatchNorm => 0,
            NormKind::LayerNorm => 1,
        };
        for v in [
            kind,
            self.input_dim as u32,
            self.hidden as u32,
            self.classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.norm.eps.to_le_bytes());
        let mut push = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(self.w1.data());
        push(&self.b1);
        push(&self.norm.gamma);
        push(&self.norm.beta);
        push(self.w2.data());
        push(&self.b2);
        push(&self.vel_gamma);
        push(&self.vel_beta);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::Format {
                    offset: *off,
                    message: format!("truncated checkpoint: wanted {n} more bytes"),
                });
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let magic = take(&mut off, 8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad checkpoint magic".into(),
            });
        }
        let read_u32 = |off: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()))
        };
        let kind = match read_u32(&mut off)? {
            0 => NormKind::BatchNorm,
            1 => NormKind::LayerNorm,
            other => {
                return Err(Error::Format {
                    offset: 8,
                    message: format!("unknown norm kind tag {other}"),
                })
            }
        };
        let input_dim = read_u32(&mut off)? as usize;
        let hidden = read_u32(&mut off)? as usize;
        let classes = read_u32(&mut off)? as usize;
        let eps = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let read_vec = |off: &mut usize, n: usize| -> Result<Vec<f64>> {
            let raw = take(off, n * 8)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let w1 = Matrix::from_vec(input_dim, hidden, read_vec(&mut off, input_dim * hidden)?)?;
        let b1 = read_vec(&mut off, hidden)?;
        let gamma = read_vec(&mut off, hidden)?;
        let beta = read_vec(&mut off, hidden)?;
        let w2 = Matrix::from_vec(hidden, classes, read_vec(&mut off, hidden * classes)?)?;
        let b2 = read_vec(&mut off, classes)?;
        let vel_gamma = read_vec(&mut off, hidden)?;
        let vel_beta = read_vec(&mut off, hidden)?;
        if off != bytes.len() {
            return Err(Error::Format {
                offset: off,
                message: format!("{} trailing bytes", bytes.len() - off),
            });
        }
        Ok(ModelState {
            input_dim,
            hidden,
            classes,
            w1,
            b1,
            norm: NormLayer {
                kind,
                gamma,
                beta,
                eps,
            },
            w2,
            b2,
            vel_gamma,
            vel_beta,
            snapshot: None,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Batch, LabeledImage};
    use crate::transforms::ImageGrid;

    fn tiny_image(vals: &[f64], h: usize, w: usize, c: usize) -> ImageGrid {
        let mut img = ImageGrid::new(h, w, c);
        img.data.copy_from_slice(vals);
        img
    }

    fn random_batch(rng: &mut Rng, b: usize, h: usize, w: usize, c: usize) -> Batch {
        let images: Vec<ImageGrid> = (0..b)
            .map(|_| {
                let mut img = ImageGrid::new(h, w, c);
                img.data.iter_mut().for_each(|v| *v = rng.next_f64());
                img
            })
            .collect();
        Batch {
            labels: vec![0; images.len()],
            groups: vec![0; images.len()],
            images,
        }
    }

    fn tiny_model(norm: NormKind, seed: u64) -> ModelState {
        let mut rng = Rng::new(seed);
        ModelState::new(4, 2, 2, norm, &mut rng).unwrap()
    }

    #[test]
    fn equal_logits_give_max_entropy() {
        let mut rng = Rng::new(1);
        let mut m = ModelState::new(4, 3, 5, NormKind::LayerNorm, &mut rng).unwrap();
        // Zero the output layer: logits collapse to b2 = 0 for every input.
        m.w2 = Matrix::zeros(3, 5);
        let batch = random_batch(&mut rng, 3, 2, 2, 1);
        let preds = m.forward(&batch).unwrap();
        for p in preds {
            assert!((p.entropy - 5.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_class_entropy_matches_direct_evaluation() {
        // probs (0.9, 0.1) -> 0.3251 by direct -sum p ln p.
        let probs = softmax(&[0.9f64.ln(), 0.1f64.ln()]).unwrap();
        assert!((probs[0] - 0.9).abs() < 1e-12);
        assert!((entropy(&probs) - 0.325082973391448).abs() < 1e-10);
    }

    #[test]
    fn entropy_in_bounds_and_argmax_consistent() {
        let mut rng = Rng::new(2);
        let m = ModelState::new(8, 6, 4, NormKind::BatchNorm, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 5, 2, 2, 2);
        for p in m.forward(&batch).unwrap() {
            assert!(p.entropy >= 0.0 && p.entropy <= 4.0f64.ln() + 1e-12);
            assert_eq!(p.pseudo_label, argmax(&p.logits));
        }
    }

    #[test]
    fn batch_norm_rejects_single_sample() {
        let mut rng = Rng::new(3);
        let m = ModelState::new(4, 2, 2, NormKind::BatchNorm, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 1, 2, 2, 1);
        match m.forward(&batch) {
            Err(Error::Config(msg)) => assert!(msg.contains("layer norm")),
            other => panic!("expected configuration error, got {other:?}"),
        }
    }

    #[test]
    fn batch_norm_invariant_to_input_batch_affine_rescale() {
        let mut rng = Rng::new(4);
        let mut m = ModelState::new(4, 3, 2, NormKind::BatchNorm, &mut rng).unwrap();
        // The epsilon stabilizer breaks exact scale invariance at the
        // ~eps/var level, so the standardization property is checked with a
        // vanishing epsilon and re-checked loosely at the production value.
        m.norm.eps = 1e-12;
        let batch = random_batch(&mut rng, 6, 2, 2, 1);
        let mut scaled = batch.clone();
        for img in &mut scaled.images {
            img.data.iter_mut().for_each(|v| *v = 2.0 * *v + 0.3);
        }
        let check = |m: &ModelState, tol: f64| {
            let a = m.forward(&batch).unwrap();
            let b = m.forward(&scaled).unwrap();
            for (pa, pb) in a.iter().zip(&b) {
                for (x, y) in pa.logits.iter().zip(&pb.logits) {
                    assert!(
                        (x - y).abs() < tol,
                        "batch norm output changed under affine input rescale: {x} vs {y}"
                    );
                }
            }
        };
        check(&m, 1e-8);
        m.norm.eps = NORM_EPS;
        check(&m, 1e-4);
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let mut rng = Rng::new(5);
        let m = tiny_model(NormKind::LayerNorm, 5);
        let batch = random_batch(&mut rng, 3, 2, 2, 1);
        let (_, cache) = m.forward_cached(&batch).unwrap();
        let g = m.grad_adapt_params(&cache, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences_single_sample() {
        let mut rng = Rng::new(6);
        let mut m = tiny_model(NormKind::LayerNorm, 6);
        // Nudge gamma/beta off their init so the check is not at a special point.
        m.norm.gamma = vec![1.3, 0.7];
        m.norm.beta = vec![0.1, -0.2];
        let batch = random_batch(&mut rng, 1, 2, 2, 1);
        let weights = vec![1.0];
        let (_, cache) = m.forward_cached(&batch).unwrap();
        let g = m.grad_adapt_params(&cache, &weights).unwrap();

        let h = 1e-6;
        let loss = |m: &ModelState| -> f64 {
            let preds = m.forward(&batch).unwrap();
            preds[0].entropy
        };
        for j in 0..2 {
            for (analytic, pick) in [(g.gamma[j], true), (g.beta[j], false)] {
                let mut plus = m.clone();
                let mut minus = m.clone();
                if pick {
                    plus.norm.gamma[j] += h;
                    minus.norm.gamma[j] -= h;
                } else {
                    plus.norm.beta[j] += h;
                    minus.norm.beta[j] -= h;
                }
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((analytic - fd) / denom).abs() < 1e-4,
                    "param {j}: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gradient_scales_exactly_with_weights() {
        let mut rng = Rng::new(7);
        let m = tiny_model(NormKind::LayerNorm, 7);
        let batch = random_batch(&mut rng, 3, 2, 2, 1);
        let (_, cache) = m.forward_cached(&batch).unwrap();
        let w1 = vec![0.5, 1.5, 2.0];
        let w2: Vec<f64> = w1.iter().map(|w| w * 2.0).collect();
        let g1 = m.grad_adapt_params(&cache, &w1).unwrap();
        let g2 = m.grad_adapt_params(&cache, &w2).unwrap();
        for (a, b) in g1.gamma.iter().zip(&g2.gamma) {
            assert_eq!(2.0 * a, *b, "power-of-two weight scaling must be exact");
        }
        for (a, b) in g1.beta.iter().zip(&g2.beta) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn sgd_semantics_and_mask() {
        let mut m = tiny_model(NormKind::LayerNorm, 8);
        let before = m.clone();
        let g = AdaptGradient {
            gamma: vec![0.5, -1.0],
            beta: vec![0.25, 0.0],
        };
        // Momentum 0, one step: theta - lr * g.
        m.sgd_step(&g, 0.1, 0.0).unwrap();
        assert_eq!(m.norm.gamma[0], before.norm.gamma[0] - 0.05);
        assert_eq!(m.norm.beta[0], before.norm.beta[0] - 0.025);
        // Frozen parameters bitwise unchanged.
        assert_eq!(m.w1, before.w1);
        assert_eq!(m.b1, before.b1);
        assert_eq!(m.w2, before.w2);
        assert_eq!(m.b2, before.b2);
    }

    #[test]
    fn sgd_momentum_unrolls_as_expected() {
        let mut m = tiny_model(NormKind::LayerNorm, 9);
        let start = m.norm.gamma[0];
        let g = AdaptGradient {
            gamma: vec![1.0, 0.0],
            beta: vec![0.0, 0.0],
        };
        let lr = 0.01;
        m.sgd_step(&g, lr, 0.9).unwrap();
        m.sgd_step(&g, lr, 0.9).unwrap();
        // v1 = g, v2 = 0.9 g + g = 1.9 g, total = lr * (1 + 1.9) * g.
        let expect = start - lr * (1.0 + 1.9);
        assert!((m.norm.gamma[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_model_unchanged() {
        let mut m = tiny_model(NormKind::LayerNorm, 10);
        let before = m.clone();
        m.sgd_step(&AdaptGradient::zeros(2), 0.1, 0.9).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn snapshot_reset_restores_exactly() {
        let mut rng = Rng::new(11);
        let mut m = tiny_model(NormKind::LayerNorm, 11);
        let batch = random_batch(&mut rng, 2, 2, 2, 1);
        m.take_snapshot();
        let before = m.forward(&batch).unwrap();
        for _ in 0..10 {
            let (_, cache) = m.forward_cached(&batch).unwrap();
            let g = m.grad_adapt_params(&cache, &[1.0, 1.0]).unwrap();
            m.sgd_step(&g, 0.05, 0.9).unwrap();
        }
        m.reset().unwrap();
        let after = m.forward(&batch).unwrap();
        assert_eq!(before, after);
        // Idempotent.
        m.reset().unwrap();
        assert_eq!(before, m.forward(&batch).unwrap());
    }

    #[test]
    fn reset_without_snapshot_is_a_state_error() {
        let mut m = tiny_model(NormKind::LayerNorm, 12);
        assert!(matches!(m.reset(), Err(Error::State(_))));
    }

    #[test]
    fn snapshot_after_adaptation_pins_adapted_state() {
        let mut rng = Rng::new(13);
        let mut m = tiny_model(NormKind::LayerNorm, 13);
        let batch = random_batch(&mut rng, 2, 2, 2, 1);
        let (_, cache) = m.forward_cached(&batch).unwrap();
        let g = m.grad_adapt_params(&cache, &[1.0, 1.0]).unwrap();
        m.sgd_step(&g, 0.05, 0.0).unwrap();
        let adapted_gamma = m.norm.gamma.clone();
        m.take_snapshot();
        m.sgd_step(&g, 0.05, 0.0).unwrap();
        m.reset().unwrap();
        assert_eq!(m.norm.gamma, adapted_gamma);
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let mut rng = Rng::new(14);
        let mut m = ModelState::new(9, 5, 3, NormKind::BatchNorm, &mut rng).unwrap();
        m.vel_gamma[2] = 0.123456789;
        let bytes = m.to_bytes();
        let back = ModelState::from_bytes(&bytes).unwrap();
        assert_eq!(m, back);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let m = tiny_model(NormKind::LayerNorm, 15);
        let mut bytes = m.to_bytes();
        bytes[0] ^= 0xff;
        assert!(matches!(
            ModelState::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        let good = m.to_bytes();
        assert!(matches!(
            ModelState::from_bytes(&good[..good.len() - 3]),
            Err(Error::Format { .. })
        ));
    }

    fn separable_set(n: usize, rng: &mut Rng) -> Vec<LabeledImage> {
        // Class 0 lights the first two pixels, class 1 the last two.
        (0..n)
            .map(|i| {
                let class = i % 2;
                let base = rng.uniform(0.6, 1.0);
                let noise = rng.uniform(0.0, 0.1);
                let vals = if class == 0 {
                    [base, base, noise, noise]
                } else {
                    [noise, noise, base, base]
                };
                LabeledImage {
                    image: tiny_image(&vals, 2, 2, 1),
                    class_label: class,
                    group_id: class * 2,
                    source_digit: class as u8,
                }
            })
            .collect()
    }

    #[test]
    fn pretrain_fits_separable_toy_set() {
        let mut rng = Rng::new(16);
        let train = separable_set(200, &mut rng);

        // Independent oracle: logistic regression trained on the same data
        // with plain gradient descent must also clear 90%.
        let mut w = [0.0f64; 4];
        let mut b = 0.0;
        for _ in 0..200 {
            let mut gw = [0.0f64; 4];
            let mut gb = 0.0;
            for s in &train {
                let z: f64 = s.image.data.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + b;
                let p = crate::numerics::sigmoid(z);
                let err = p - s.class_label as f64;
                for (g, x) in gw.iter_mut().zip(&s.image.data) {
                    *g += err * x;
                }
                gb += err;
            }
            for (w, g) in w.iter_mut().zip(&gw) {
                *w -= 0.5 * g / train.len() as f64;
            }
            b -= 0.5 * gb / train.len() as f64;
        }
        let oracle_acc = train
            .iter()
            .filter(|s| {
                let z: f64 =
                    s.image.data.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + b;
                (z > 0.0) == (s.class_label == 1)
            })
            .count() as f64
            / train.len() as f64;
        assert!(oracle_acc > 0.9, "oracle only reached {oracle_acc}");

        let mut m = ModelState::new(4, 8, 2, NormKind::LayerNorm, &mut Rng::new(17)).unwrap();
        let cfg = PretrainConfig {
            epochs: 1,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 16,
            plpd_filter: None,
        };
        let report = m.pretrain(&train, &cfg, &mut Rng::new(18)).unwrap();
        assert!(
            report.final_train_accuracy > 0.9,
            "pretrain reached only {}",
            report.final_train_accuracy
        );
    }

    #[test]
    fn plpd_filter_that_always_passes_matches_plain_pretraining() {
        let mut rng = Rng::new(19);
        let train = separable_set(60, &mut rng);
        let cfg_plain = PretrainConfig {
            epochs: 4,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 8,
            plpd_filter: None,
        };
        let cfg_filtered = PretrainConfig {
            plpd_filter: Some(PlpdFilter {
                threshold: -1.0, // PLPD >= -1 always
                warmup_frac: 0.5,
                transform: TransformSpec::patch_shuffle(2),
            }),
            ..cfg_plain.clone()
        };
        let mut a = ModelState::new(4, 4, 2, NormKind::LayerNorm, &mut Rng::new(20)).unwrap();
        let mut b = a.clone();
        a.pretrain(&train, &cfg_plain, &mut Rng::new(21)).unwrap();
        b.pretrain(&train, &cfg_filtered, &mut Rng::new(21)).unwrap();
        assert_eq!(a, b, "always-passing filter must reproduce plain training");
    }

    #[test]
    fn impossible_plpd_threshold_stops_post_warmup_updates() {
        let mut rng = Rng::new(22);
        let train = separable_set(60, &mut rng);
        let cfg = PretrainConfig {
            epochs: 4,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 8,
            plpd_filter: Some(PlpdFilter {
                threshold: 1.1, // PLPD <= 1 always
                warmup_frac: 0.5,
                transform: TransformSpec::patch_shuffle(2),
            }),
        };
        let mut m = ModelState::new(4, 4, 2, NormKind::LayerNorm, &mut Rng::new(23)).unwrap();
        let report = m.pretrain(&train, &cfg, &mut Rng::new(24)).unwrap();
        assert_eq!(report.post_warmup_updates, 0);
        assert!(report.post_warmup_skipped > 0);
    }

    #[test]
    fn pretrain_rejects_empty_training_set() {
        let mut m = tiny_model(NormKind::LayerNorm, 25);
        let cfg = PretrainConfig::default();
        assert!(matches!(
            m.pretrain(&[], &cfg, &mut Rng::new(0)),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        // Covers the full backward pass including the normalization
        // statistics, which only pretraining exercises.
        for (norm, seed) in [(NormKind::BatchNorm, 26u64), (NormKind::LayerNorm, 27)] {
            let mut rng = Rng::new(seed);
            let mut m = ModelState::new(4, 3, 2, norm, &mut rng).unwrap();
            m.norm.gamma = vec![1.2, 0.8, 1.05];
            m.norm.beta = vec![0.1, -0.15, 0.02];
            let mut batch = random_batch(&mut rng, 4, 2, 2, 1);
            batch.labels = vec![0, 1, 1, 0];
            let mask = vec![true, true, false, true];

            let loss = |m: &ModelState| -> f64 {
                let preds = m.forward(&batch).unwrap();
                let kept = mask.iter().filter(|k| **k).count() as f64;
                preds
                    .iter()
                    .zip(&batch.labels)
                    .zip(&mask)
                    .filter(|(_, &keep)| keep)
                    .map(|((p, &l), _)| -p.probs[l].ln())
                    .sum::<f64>()
                    / kept
            };
            let g = m.cross_entropy_gradients(&batch, &mask).unwrap();
            let h = 1e-6;
            let check = |analytic: f64, poke: &mut dyn FnMut(&mut ModelState, f64), tag: &str| {
                let mut plus = m.clone();
                poke(&mut plus, h);
                let mut minus = m.clone();
                poke(&mut minus, -h);
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((analytic - fd) / denom).abs() < 1e-4,
                    "{norm:?} {tag}: analytic {analytic} vs fd {fd}"
                );
            };
            for i in [0usize, 5, 11] {
                check(g.w1.data()[i], &mut |m, d| m.w1.data_mut()[i] += d, "w1");
            }
            for j in 0..3 {
                check(g.b1[j], &mut |m, d| m.b1[j] += d, "b1");
                check(g.gamma[j], &mut |m, d| m.norm.gamma[j] += d, "gamma");
                check(g.beta[j], &mut |m, d| m.norm.beta[j] += d, "beta");
            }
            for i in 0..6 {
                check(g.w2.data()[i], &mut |m, d| m.w2.data_mut()[i] += d, "w2");
            }
            for k in 0..2 {
                check(g.b2[k], &mut |m, d| m.b2[k] += d, "b2");
            }
        }
    }
}
