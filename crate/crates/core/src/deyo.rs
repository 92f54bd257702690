//! The test-time adaptation engine.
//!
//! Each incoming batch is predicted first (online protocol: infer, then
//! adapt). Samples pass an entropy gate, survivors are re-predicted under
//! an object-destructive transform to score how much the prediction leans
//! on object shape (PLPD: the drop of the pseudo-label's probability), and
//! the selected samples contribute a weighted entropy loss whose gradient
//! updates only the normalization affine parameters. With every component
//! toggle off the loop reduces to Tent: plain entropy minimization on all
//! samples.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::metrics::area_of;
use crate::model::{ModelState, Prediction};
use crate::numerics::Rng;
use crate::transforms::TransformSpec;

/// Thresholds, weighting toggles, and optimizer settings for a run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdaptConfig {
    pub classes: usize,
    /// Entropy gate: keep samples with entropy strictly below this.
    pub tau_ent: f64,
    /// PLPD gate: keep samples with PLPD strictly above this.
    pub tau_plpd: f64,
    /// Normalizer inside the entropy weighting term.
    pub ent0: f64,
    pub transform: TransformSpec,
    /// Learning rate; 0 runs the full selection pipeline without updates.
    pub lr: f64,
    pub momentum: f64,
    pub use_ent_select: bool,
    pub use_plpd_select: bool,
    pub use_ent_weight: bool,
    pub use_plpd_weight: bool,
    /// Restore the pre-stream parameters when the stream ends.
    pub reset_after_run: bool,
}

/// The four component toggles of one ablation cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ComponentFlags {
    pub select_ent: bool,
    pub select_plpd: bool,
    pub weight_ent: bool,
    pub weight_plpd: bool,
}

impl AdaptConfig {
    /// Full configuration with the standard defaults for `classes` classes.
    pub fn deyo(classes: usize) -> Self {
        let ln_c = (classes as f64).ln();
        AdaptConfig {
            classes,
            tau_ent: 0.5 * ln_c,
            tau_plpd: 0.2,
            ent0: 0.4 * ln_c,
            transform: TransformSpec::patch_shuffle(4),
            lr: 0.0025,
            momentum: 0.9,
            use_ent_select: true,
            use_plpd_select: true,
            use_ent_weight: true,
            use_plpd_weight: true,
            reset_after_run: false,
        }
    }

    /// Entropy minimization on every sample with unit weights.
    pub fn tent(classes: usize) -> Self {
        AdaptConfig {
            use_ent_select: false,
            use_plpd_select: false,
            use_ent_weight: false,
            use_plpd_weight: false,
            ..Self::deyo(classes)
        }
    }

    /// Two-class biased-stream preset: entropy filtering off, the entropy
    /// weighting normalizer at ln C, and a 0.5 PLPD gate (near-one-hot
    /// predictions need the large threshold). The learning rate is raised
    /// for the small desk-scale model, which adapts only 256 parameters
    /// over a few dozen steps.
    pub fn biased_two_class() -> Self {
        AdaptConfig {
            use_ent_select: false,
            ent0: 2.0f64.ln(),
            tau_plpd: 0.5,
            lr: 0.15,
            ..Self::deyo(2)
        }
    }

    pub fn with_flags(mut self, flags: ComponentFlags) -> Self {
        self.use_ent_select = flags.select_ent;
        self.use_plpd_select = flags.select_plpd;
        self.use_ent_weight = flags.weight_ent;
        self.use_plpd_weight = flags.weight_plpd;
        self
    }

    pub fn flags(&self) -> ComponentFlags {
        ComponentFlags {
            select_ent: self.use_ent_select,
            select_plpd: self.use_plpd_select,
            weight_ent: self.use_ent_weight,
            weight_plpd: self.use_plpd_weight,
        }
    }

    fn needs_plpd(&self) -> bool {
        self.use_plpd_select || self.use_plpd_weight
    }

    pub fn validate(&self) -> Result<()> {
        let ln_c = (self.classes as f64).ln();
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if !(self.tau_ent > 0.0 && self.tau_ent <= ln_c + 1e-12) {
            return Err(Error::Config(format!(
                "tau_ent must be in (0, ln C] = (0, {ln_c:.6}], got {}",
                self.tau_ent
            )));
        }
        for (name, v) in [
            ("tau_plpd", self.tau_plpd),
            ("ent0", self.ent0),
            ("lr", self.lr),
            ("momentum", self.momentum),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        if self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Drop of the pseudo-label's probability under the transform:
/// `(p(x) - p(x'))` at `argmax p(x)`. Always in `[-1, 1]`; exactly 0 when
/// the transform is the identity.
pub fn plpd(pred_x: &Prediction, pred_xp: &Prediction) -> f64 {
    let y_hat = pred_x.pseudo_label;
    pred_x.probs[y_hat] - pred_xp.probs[y_hat]
}

/// True iff every enabled criterion passes; disabled criteria always pass.
pub fn select(entropy: f64, plpd: f64, cfg: &AdaptConfig) -> bool {
    (!cfg.use_ent_select || entropy < cfg.tau_ent)
        && (!cfg.use_plpd_select || plpd > cfg.tau_plpd)
}

/// Sample weight `alpha`: `exp(-(Ent - Ent0))` plus `exp(PLPD)`, with each
/// term gated by its toggle. Both off gives the plain unit weight.
pub fn weight(entropy: f64, plpd: f64, cfg: &AdaptConfig) -> f64 {
    if !cfg.use_ent_weight && !cfg.use_plpd_weight {
        return 1.0;
    }
    let mut alpha = 0.0;
    if cfg.use_ent_weight {
        alpha += (-(entropy - cfg.ent0)).exp();
    }
    if cfg.use_plpd_weight {
        alpha += plpd.exp();
    }
    alpha
}

/// Per-sample diagnostics for one batch, recorded before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDiag {
    pub entropy: f64,
    /// Present only if the configuration needed the auxiliary forward for
    /// this sample (entropy-gate survivors when any PLPD component is on).
    pub plpd: Option<f64>,
    pub selected: bool,
    /// The loss weight alpha; 0 for unselected samples.
    pub weight: f64,
    pub pseudo_label: usize,
    pub correct: bool,
    /// Entropy/PLPD quadrant (1-4) when PLPD is known.
    pub area: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchDiagnostics {
    pub samples: Vec<SampleDiag>,
    /// Samples that passed the entropy gate.
    pub entropy_survivors: usize,
    pub selected_count: usize,
}

/// Run-level operation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct RunCounters {
    /// Main forwards: one per stream sample.
    pub forwards_main: u64,
    /// Auxiliary (transformed) forwards: one per entropy-gate survivor when
    /// a PLPD component is enabled.
    pub forwards_aux: u64,
    /// Samples that contributed to a backward pass.
    pub backwards: u64,
    /// Samples that passed the full selection.
    pub selected: u64,
}

/// One adaptation step on a batch.
///
/// Order of operations: main forward, entropy gate, transform + auxiliary
/// forward for survivors only, PLPD gate, weights, one SGD step on the
/// normalization affine parameters. Predictions are recorded before the
/// update. An empty selection performs no update but still emits
/// diagnostics.
pub fn adapt_batch(
    model: &mut ModelState,
    batch: &Batch,
    cfg: &AdaptConfig,
    transform_rng: &mut Rng,
    counters: &mut RunCounters,
) -> Result<BatchDiagnostics> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("adapt_batch"));
    }
    let b = batch.len();
    let (preds, cache) = model.forward_cached(batch)?;
    counters.forwards_main += b as u64;

    let survivors: Vec<usize> = (0..b)
        .filter(|&i| !cfg.use_ent_select || preds[i].entropy < cfg.tau_ent)
        .collect();

    let mut plpd_vals: Vec<Option<f64>> = vec![None; b];
    if cfg.needs_plpd() && !survivors.is_empty() {
        let sub = batch.subset(&survivors);
        let transformed = sub.map_images(|img| cfg.transform.apply(img, transform_rng))?;
        let aux_preds = model.forward_aux(&transformed)?;
        counters.forwards_aux += survivors.len() as u64;
        for (&i, aux) in survivors.iter().zip(&aux_preds) {
            plpd_vals[i] = Some(plpd(&preds[i], aux));
        }
    }

    let mut weights = vec![0.0; b];
    let mut selected_count = 0usize;
    for &i in &survivors {
        let p = plpd_vals[i].unwrap_or(0.0);
        if !cfg.use_plpd_select || p > cfg.tau_plpd {
            weights[i] = weight(preds[i].entropy, p, cfg);
            selected_count += 1;
        }
    }
    counters.selected += selected_count as u64;

    if selected_count > 0 && cfg.lr > 0.0 {
        let grad = model.grad_adapt_params(&cache, &weights)?;
        model.sgd_step(&grad, cfg.lr, cfg.momentum)?;
        counters.backwards += selected_count as u64;
    }

    let samples = (0..b)
        .map(|i| SampleDiag {
            entropy: preds[i].entropy,
            plpd: plpd_vals[i],
            selected: weights[i] > 0.0,
            weight: weights[i],
            pseudo_label: preds[i].pseudo_label,
            correct: preds[i].pseudo_label == batch.labels[i],
            area: plpd_vals[i].map(|p| area_of(preds[i].entropy, p, cfg.tau_ent, cfg.tau_plpd)),
        })
        .collect();
    Ok(BatchDiagnostics {
        samples,
        entropy_survivors: survivors.len(),
        selected_count,
    })
}

/// One diagnostics row per stream sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub batch_idx: usize,
    pub entropy: f64,
    pub plpd: Option<f64>,
    pub selected: bool,
    pub weight: f64,
    pub pred: usize,
    pub label: usize,
    pub group: usize,
    pub area: Option<u8>,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchTally {
    pub batch_len: usize,
    pub entropy_survivors: usize,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub records: Vec<SampleRecord>,
    pub counters: RunCounters,
    pub tallies: Vec<BatchTally>,
}

impl RunResult {
    /// Accuracy of the pre-update predictions over the whole stream.
    pub fn accuracy(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.correct).count() as f64 / self.records.len() as f64
    }
}

/// Adapts sequentially over the stream; accuracy comes from the pre-update
/// predictions. With `cfg.reset_after_run` the parameters are restored at
/// stream end.
pub fn run_stream(
    model: &mut ModelState,
    stream: &[Batch],
    cfg: &AdaptConfig,
    transform_seed: u64,
) -> Result<RunResult> {
    cfg.validate()?;
    if cfg.reset_after_run {
        model.take_snapshot();
    }
    let mut rng = Rng::new(transform_seed);
    let mut counters = RunCounters::default();
    let mut records = Vec::new();
    let mut tallies = Vec::new();
    for (batch_idx, batch) in stream.iter().enumerate() {
        let diag = adapt_batch(model, batch, cfg, &mut rng, &mut counters)?;
        tallies.push(BatchTally {
            batch_len: batch.len(),
            entropy_survivors: diag.entropy_survivors,
            selected: diag.selected_count,
        });
        for (i, s) in diag.samples.into_iter().enumerate() {
            records.push(SampleRecord {
                batch_idx,
                entropy: s.entropy,
                plpd: s.plpd,
                selected: s.selected,
                weight: s.weight,
                pred: s.pseudo_label,
                label: batch.labels[i],
                group: batch.groups[i],
                area: s.area,
                correct: s.correct,
            });
        }
    }
    if cfg.reset_after_run {
        model.reset()?;
    }
    Ok(RunResult {
        records,
        counters,
        tallies,
    })
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    /// 1-based row index in the component grid.
    pub index: usize,
    pub label: String,
    pub flags: ComponentFlags,
    pub result: RunResult,
    pub model: ModelState,
}

/// All 16 component combinations in grid order: the selection pair is the
/// outer loop, the weighting pair the inner one, each cycling through
/// off/off, off/on, on/off, on/on. Row 1 is Tent, row 16 the full method.
pub fn ablation_grid(
    base_model: &ModelState,
    stream: &[Batch],
    base_cfg: &AdaptConfig,
    transform_seed: u64,
) -> Result<Vec<AblationCell>> {
    let toggles = [(false, false), (false, true), (true, false), (true, true)];
    let mut cells = Vec::with_capacity(16);
    let mut index = 0;
    for &(s_ent, s_plpd) in &toggles {
        for &(w_ent, w_plpd) in &toggles {
            index += 1;
            let flags = ComponentFlags {
                select_ent: s_ent,
                select_plpd: s_plpd,
                weight_ent: w_ent,
                weight_plpd: w_plpd,
            };
            let cfg = base_cfg.clone().with_flags(flags);
            let mut model = base_model.clone();
            let result = run_stream(&mut model, stream, &cfg, transform_seed)?;
            cells.push(AblationCell {
                index,
                label: cell_label(index, flags),
                flags,
                result,
                model,
            });
        }
    }
    Ok(cells)
}

fn cell_label(index: usize, f: ComponentFlags) -> String {
    match index {
        1 => "(1) tent".to_string(),
        16 => "(16) deyo".to_string(),
        _ => {
            let mut parts = Vec::new();
            if f.select_ent {
                parts.push("s_ent");
            }
            if f.select_plpd {
                parts.push("s_plpd");
            }
            if f.weight_ent {
                parts.push("w_ent");
            }
            if f.weight_plpd {
                parts.push("w_plpd");
            }
            format!("({index}) {}", parts.join("+"))
        }
    }
}
