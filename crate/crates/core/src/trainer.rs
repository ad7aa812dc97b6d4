//! Nested-loop training.
//!
//! The upper level fits [`ModelParams`] to pseudo-labels by Adam. The lower
//! level produces those labels with rule-based fusion: once from the captured
//! sequences during warm-up, then once per joint round from the union of the
//! captured sequences and the model's current corrections.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{sort_by_mean_intensity, Scene};
use crate::error::{Error, Result};
use crate::fusion::{fuse, make_pseudo_label, FusionParams};
use crate::losses::{total_loss, LossConfig};
use crate::model::{backward, correct, forward, save_checkpoint, ModelDims, ModelParams, ParamGrads};
use crate::raster::{global_stats, Image};

pub const WARMUP_CHECKPOINT: &str = "ckpt_warmup.lx";
pub const RUN_LOG: &str = "run_log.csv";

pub fn round_checkpoint_name(round: usize) -> String {
    format!("ckpt_round_{round}.lx")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub joint_rounds: usize,
    pub epochs_per_round: usize,
    /// Warm-up starts here and follows a cosine down to
    /// `lr_warmup_start * lr_warmup_final_ratio` on its last epoch.
    pub lr_warmup_start: f64,
    pub lr_warmup_final_ratio: f64,
    /// Constant rate for every joint round.
    pub lr_joint: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Largest tolerated mean absolute pseudo-label change per round.
    pub drift_threshold: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 30,
            joint_rounds: 5,
            epochs_per_round: 10,
            lr_warmup_start: 5e-3,
            lr_warmup_final_ratio: 0.1,
            lr_joint: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            drift_threshold: 0.15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("train: {m}")));
        if self.epochs_per_round == 0 {
            return bad("epochs_per_round must be >= 1");
        }
        if !(self.lr_warmup_start > 0.0 && self.lr_joint > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(self.lr_warmup_final_ratio > 0.0 && self.lr_warmup_final_ratio <= 1.0) {
            return bad("lr_warmup_final_ratio must be in (0, 1]");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if !(self.drift_threshold > 0.0) {
            return bad("drift_threshold must be > 0");
        }
        Ok(())
    }

    /// Learning rate of warm-up epoch `epoch` (zero-based).
    pub fn warmup_lr(&self, epoch: usize) -> f64 {
        let start = self.lr_warmup_start;
        let end = start * self.lr_warmup_final_ratio;
        if self.warmup_epochs <= 1 {
            return start;
        }
        let t = epoch as f64 / (self.warmup_epochs - 1) as f64;
        end + 0.5 * (start - end) * (1.0 + (PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    WarmUp,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::WarmUp => "warmup",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub phase: Phase,
    /// Number of completed joint rounds.
    pub round: usize,
    /// Current pseudo-label of each scene.
    pub labels: Vec<Image>,
    pub label_hashes: Vec<u64>,
    /// Mean pseudo-label change of each completed joint round.
    pub drift_history: Vec<f64>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let n = params.values().len();
        Self {
            params,
            adam: AdamState::new(n),
            phase: Phase::WarmUp,
            round: 0,
            labels: Vec::new(),
            label_hashes: Vec::new(),
            drift_history: Vec::new(),
        }
    }

    fn set_labels(&mut self, labels: Vec<Image>) {
        self.label_hashes = labels.iter().map(label_hash).collect();
        self.labels = labels;
    }
}

/// First eight bytes of the SHA-256 of the label samples.
pub fn label_hash(img: &Image) -> u64 {
    let mut h = Sha256::new();
    h.update((img.width() as u64).to_le_bytes());
    h.update((img.height() as u64).to_le_bytes());
    for v in img.data() {
        h.update(v.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}

fn combined_hash(hashes: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for v in hashes {
        h.update(v.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}

/// Bias-corrected Adam update of `state.params`.
pub fn adam_step(state: &mut TrainState, grads: &ParamGrads, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if grads.dims() != state.params.dims() {
        return Err(Error::InvalidParameter("gradient shape does not match parameters".into()));
    }
    if let Some(index) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient { index });
    }
    let adam = &mut state.adam;
    adam.step += 1;
    let t = adam.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in state
        .params
        .values_mut()
        .iter_mut()
        .zip(grads.values())
        .zip(adam.m.iter_mut())
        .zip(adam.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    pub round: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub drift: f64,
    /// Digest of every scene's pseudo-label during the epoch.
    pub label_digest: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,round,epoch,mean_loss,lr,drift\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.phase.name(),
                r.round,
                r.epoch,
                r.mean_loss,
                r.lr,
                r.drift
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub mean_loss: f64,
    pub drift: f64,
    pub label_luminance: f64,
    /// Smallest and largest per-scene pseudo-label mean luminance.
    pub label_luminance_range: (f64, f64),
    pub wall_time: Duration,
}

impl RoundReport {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &RoundReport) -> bool {
        self.round == other.round
            && self.mean_loss == other.mean_loss
            && self.drift == other.drift
            && self.label_luminance == other.label_luminance
            && self.label_luminance_range == other.label_luminance_range
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub reports: Vec<RoundReport>,
    pub log: RunLog,
}

/// Per-scene data reused across epochs.
struct Prepared {
    /// Dark-to-bright order of the scene's images.
    order: Vec<usize>,
}

/// Drives both training phases. The fusion parameters are fixed at
/// construction and only ever read.
#[derive(Clone, Debug)]
pub struct Trainer {
    train: TrainConfig,
    loss: LossConfig,
    fusion: FusionParams,
    dims: ModelDims,
}

impl Trainer {
    pub fn new(train: TrainConfig, loss: LossConfig, fusion: FusionParams, dims: ModelDims) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        fusion.validate()?;
        dims.validate()?;
        Ok(Self {
            train,
            loss,
            fusion,
            dims,
        })
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn fusion(&self) -> &FusionParams {
        &self.fusion
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    fn prepare(&self, data: &[Scene]) -> Result<Vec<Prepared>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in data {
            if s.images.is_empty() {
                return Err(Error::EmptyInput);
            }
            for img in &s.images[1..] {
                s.images[0].check_same_dims(img)?;
            }
        }
        Ok(data
            .iter()
            .map(|s| Prepared {
                order: sort_by_mean_intensity(&s.images),
            })
            .collect())
    }

    /// Loss of one scene and its parameter gradient.
    fn scene_step(
        &self,
        params: &ModelParams,
        scene: &Scene,
        prep: &Prepared,
        target: &Image<f64>,
    ) -> Result<(f64, ParamGrads)> {
        let fwds: Vec<_> = scene.images.par_iter().map(|img| forward(params, img)).collect();
        let preds: Vec<Image<f64>> = fwds.iter().map(|f| f.corrected.clone()).collect();
        let descriptors: Vec<f64> = prep.order.iter().map(|&i| fwds[i].descriptor).collect();
        let loss = total_loss(&preds, target, &descriptors, &self.loss)?;
        let mut g_desc = vec![0.0; preds.len()];
        for (k, &i) in prep.order.iter().enumerate() {
            g_desc[i] = loss.descriptor_grads[k];
        }
        let parts = (0..preds.len())
            .into_par_iter()
            .map(|i| backward(params, &fwds[i].cache, &loss.pred_grads[i], g_desc[i]))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = ParamGrads::zeros(self.dims)?;
        for g in &parts {
            grads.accumulate(g)?;
        }
        Ok((loss.value, grads))
    }

    fn epoch_seed(&self, round: usize, epoch: usize) -> u64 {
        self.train
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(((round as u64) << 32) | epoch as u64)
    }

    fn run_epoch(
        &self,
        state: &mut TrainState,
        data: &[Scene],
        prepared: &[Prepared],
        targets: &[Image<f64>],
        lr: f64,
        epoch: usize,
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.epoch_seed(state.round, epoch)));
        let mut total = 0.0;
        for s in order {
            let (loss, grads) = self.scene_step(&state.params, &data[s], &prepared[s], &targets[s])?;
            adam_step(state, &grads, lr, &self.train)?;
            total += loss;
        }
        Ok(total / data.len() as f64)
    }

    /// Fits the identity-initialized model to fixed pseudo-labels fused from
    /// the captured sequences alone.
    pub fn warm_up(&self, data: &[Scene], log: &mut RunLog) -> Result<TrainState> {
        let prepared = self.prepare(data)?;
        let mut state = TrainState::new(ModelParams::init_identity(self.dims)?);
        let labels = data
            .par_iter()
            .map(|s| make_pseudo_label(&s.images, None, &self.fusion))
            .collect::<Result<Vec<_>>>()?;
        state.set_labels(labels);
        let digest = combined_hash(&state.label_hashes);
        let targets: Vec<Image<f64>> = state.labels.iter().map(|l| l.convert()).collect();
        for epoch in 0..self.train.warmup_epochs {
            let lr = self.train.warmup_lr(epoch);
            let mean_loss = self.run_epoch(&mut state, data, &prepared, &targets, lr, epoch)?;
            log.epochs.push(EpochRecord {
                phase: Phase::WarmUp,
                round: 0,
                epoch,
                mean_loss,
                lr,
                drift: 0.0,
                label_digest: digest,
            });
        }
        state.phase = Phase::Joint;
        Ok(state)
    }

    /// One joint round: correct every input with the current model, refuse
    /// the union into new pseudo-labels, then train against them.
    pub fn joint_round(
        &self,
        mut state: TrainState,
        data: &[Scene],
        log: &mut RunLog,
    ) -> Result<(TrainState, RoundReport)> {
        if state.phase != Phase::Joint {
            return Err(Error::InvalidParameter("joint round requires a warmed-up state".into()));
        }
        if state.labels.len() != data.len() {
            return Err(Error::InvalidParameter(format!(
                "state holds {} labels for {} scenes",
                state.labels.len(),
                data.len()
            )));
        }
        let started = Instant::now();
        let prepared = self.prepare(data)?;
        let params = &state.params;
        let labels = data
            .par_iter()
            .map(|s| {
                let corrected: Vec<Image> = s.images.iter().map(|img| correct(params, img)).collect();
                make_pseudo_label(&s.images, Some(&corrected), &self.fusion)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut drift = 0.0;
        for (new, old) in labels.iter().zip(&state.labels) {
            drift += new.mean_abs_diff(old)?;
        }
        drift /= data.len() as f64;
        let lum: Vec<f64> = labels
            .iter()
            .map(|l| global_stats(l).mean_luminance())
            .collect();
        let label_luminance = lum.iter().sum::<f64>() / lum.len() as f64;
        let label_luminance_range = lum
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));

        state.set_labels(labels);
        state.round += 1;
        state.drift_history.push(drift);
        let digest = combined_hash(&state.label_hashes);
        let targets: Vec<Image<f64>> = state.labels.iter().map(|l| l.convert()).collect();

        let lr = self.train.lr_joint;
        let mut loss_sum = 0.0;
        for epoch in 0..self.train.epochs_per_round {
            let mean_loss = self.run_epoch(&mut state, data, &prepared, &targets, lr, epoch)?;
            loss_sum += mean_loss;
            log.epochs.push(EpochRecord {
                phase: Phase::Joint,
                round: state.round,
                epoch,
                mean_loss,
                lr,
                drift,
                label_digest: digest,
            });
        }
        let report = RoundReport {
            round: state.round,
            mean_loss: loss_sum / self.train.epochs_per_round as f64,
            drift,
            label_luminance,
            label_luminance_range,
            wall_time: started.elapsed(),
        };
        Ok((state, report))
    }

    /// Warm-up followed by the configured joint rounds. With `out_dir`, writes
    /// a checkpoint after each phase or round and keeps the run log current.
    pub fn train(&self, data: &[Scene], out_dir: Option<&Path>) -> Result<TrainOutcome> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        let mut log = RunLog::default();
        let mut state = self.warm_up(data, &mut log)?;
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join(WARMUP_CHECKPOINT), &state.params)?;
            fs::write(dir.join(RUN_LOG), log.to_csv())?;
        }
        let mut reports = Vec::with_capacity(self.train.joint_rounds);
        let mut exceeded_last = false;
        for _ in 0..self.train.joint_rounds {
            let (next, report) = self.joint_round(state, data, &mut log)?;
            state = next;
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join(round_checkpoint_name(report.round)), &state.params)?;
                fs::write(dir.join(RUN_LOG), log.to_csv())?;
            }
            let exceeded = report.drift > self.train.drift_threshold;
            if exceeded && exceeded_last {
                return Err(Error::DriftAbort {
                    round: report.round,
                    drift: report.drift,
                    threshold: self.train.drift_threshold,
                });
            }
            exceeded_last = exceeded;
            reports.push(report);
        }
        Ok(TrainOutcome { state, reports, log })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub corrected: Vec<Image>,
    /// The single corrected image for N = 1, otherwise fusion of all corrections.
    pub fused: Image,
}

/// Corrects every image of an arbitrary-length sequence; longer sequences are
/// then fused.
pub fn infer(params: &ModelParams, seq: &[Image], fusion: &FusionParams) -> Result<Inference> {
    if seq.is_empty() {
        return Err(Error::EmptyInput);
    }
    let corrected: Vec<Image> = seq.par_iter().map(|img| correct(params, img)).collect();
    let fused = if corrected.len() == 1 {
        corrected[0].clone()
    } else {
        fuse(&corrected, fusion)?
    };
    Ok(Inference { corrected, fused })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        TrainState::new(ModelParams::init_identity(ModelDims::default()).unwrap())
    }

    #[test]
    fn zero_grads_keep_params() {
        let mut s = state();
        let before = s.params.clone();
        let g = ParamGrads::zeros(ModelDims::default()).unwrap();
        adam_step(&mut s, &g, 1e-2, &TrainConfig::default()).unwrap();
        assert_eq!(s.params, before);
        assert_eq!(s.adam.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = TrainConfig::default();
        let mut s = state();
        let before = s.params.clone();
        let mut g = ParamGrads::zeros(ModelDims::default()).unwrap();
        for (i, v) in g.values_mut().iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.3 } else { -2.0 };
        }
        let lr = 1e-3;
        adam_step(&mut s, &g, lr, &cfg).unwrap();
        for ((a, b), gv) in s.params.values().iter().zip(before.values()).zip(g.values()) {
            let expected = -lr * gv / (gv.abs() + cfg.adam_eps);
            assert!(((a - b) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = state();
        let mut g = ParamGrads::zeros(ModelDims::default()).unwrap();
        g.values_mut()[17] = f64::NAN;
        assert!(matches!(
            adam_step(&mut s, &g, 1e-3, &TrainConfig::default()),
            Err(Error::NonFiniteGradient { index: 17 })
        ));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert!((cfg.warmup_lr(0) - 5e-3).abs() < 1e-18);
        assert!((cfg.warmup_lr(29) - 5e-4).abs() < 1e-15);
        assert!((1..30).all(|e| cfg.warmup_lr(e) < cfg.warmup_lr(e - 1)));
    }

    #[test]
    fn infer_rejects_empty() {
        let p = ModelParams::init_identity(ModelDims::default()).unwrap();
        assert!(matches!(infer(&p, &[], &FusionParams::default()), Err(Error::EmptyInput)));
    }
}
