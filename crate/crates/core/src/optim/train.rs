//! Mini-batch training with best-epoch snapshotting.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::objective::loss_and_grad;
use super::{ParamSet, StoredParams};
use crate::error::{invalid, Error, Result};
use crate::gates::{self, GateState, DEFAULT_MU, DEFAULT_SIGMA};
use crate::graph;
use crate::grouping::{self, TemperatureSchedule, DEFAULT_P_MAIN};
use crate::losses::{Batch, FeatureGraph, FrozenNoise, LossBreakdown, LossConfig};
use crate::par::Exec;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub groups: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub sigma: f64,
    pub adam: AdamConfig,
    pub p_main: f64,
    pub start_t: f64,
    pub min_t: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            epochs: 1000,
            batch_size: 100,
            loss: LossConfig::new(1.0, 1.0),
            sigma: DEFAULT_SIGMA,
            adam: AdamConfig::default(),
            p_main: DEFAULT_P_MAIN,
            start_t: TemperatureSchedule::DEFAULT_START,
            min_t: TemperatureSchedule::DEFAULT_MIN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        self.loss.validate()?;
        TemperatureSchedule::new(self.start_t, self.min_t, self.epochs)?;
        if self.groups < 2 || self.groups > d {
            return Err(invalid(format!("group count must lie in [2, {d}], got {}", self.groups)));
        }
        let min_rows = self.loss.k + 1;
        if n < min_rows {
            return Err(invalid(format!("{n} samples cannot form a batch of at least K+1 = {min_rows}")));
        }
        if self.batch_size < min_rows {
            return Err(invalid(format!("batch size {} is below K+1 = {min_rows}", self.batch_size)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid("gate noise scale must be positive"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// One row of the loss history: epoch means of each weighted term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub smooth: f64,
    pub feature_weighted: f64,
    pub reg_weighted: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainStatus {
    Completed,
    /// Stopped on a non-finite loss or gradient; the model holds the last
    /// good snapshot.
    Diverged { epoch: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ParamSet,
    pub sigma: f64,
    /// `None` when no epoch completed.
    pub best_epoch: Option<usize>,
    pub best_loss: f64,
    /// Spectral warm-start labels of the features.
    pub init_labels: Vec<usize>,
}

impl TrainedModel {
    pub fn gate_state(&self) -> GateState {
        GateState { mu: self.params.mu.clone(), sigma: self.sigma }
    }

    /// Features of each group under the arg-max assignment.
    pub fn hard_groups(&self) -> Vec<Vec<usize>> {
        let labels = grouping::hard_assignment(&self.params.logits);
        let mut groups = vec![Vec::new(); self.params.n_groups()];
        for (i, g) in labels.into_iter().enumerate() {
            groups[g].push(i);
        }
        groups
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
    pub status: TrainStatus,
}

/// Feature graph, spectral warm start, gate means and the scaled orthonormal
/// projection.
pub fn initialize<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(ParamSet, FeatureGraph, Vec<usize>)> {
    let fg = FeatureGraph::from_data(x, cfg.loss.k)?;
    let c = cfg.groups;
    let labels = graph::spectral_cluster(&fg.l_feat, c, rng.random())?;
    let logits = grouping::init_logits(&labels, c, cfg.p_main)?;
    let mut sizes = vec![0usize; c];
    for &l in &labels {
        sizes[l] += 1;
    }
    let gauss = DMatrix::from_fn(c, c, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    let mut q = gauss.qr().q();
    for (j, mut row) in q.row_iter_mut().enumerate() {
        row /= sizes[j].max(1) as f64;
    }
    let params = ParamSet { logits, mu: DVector::from_element(c, DEFAULT_MU), q };
    Ok((params, fg, labels))
}

/// Shuffled row batches; a short tail below `min_rows` joins the previous batch.
pub fn make_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, min_rows: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = perm.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < min_rows) {
        let tail = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    batches
}

fn gather_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

pub fn train(x: &DMatrix<f64>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (n, d) = x.shape();
    cfg.validate(n, d)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("training data contains non-finite values"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut params, fg, init_labels) = initialize(x, cfg, &mut rng)?;
    let schedule = TemperatureSchedule::new(cfg.start_t, cfg.min_t, cfg.epochs)?;
    let mut adam = Adam::new(cfg.adam, &params);
    let c = cfg.groups;

    let mut model = TrainedModel {
        params: params.clone(),
        sigma: cfg.sigma,
        best_epoch: None,
        best_loss: f64::INFINITY,
        init_labels,
    };
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let temperature = schedule.temperature_at(epoch);
        let batches = make_batches(n, cfg.batch_size, cfg.loss.k + 1, &mut rng);
        let mut sums = [0.0f64; 4];
        for rows in &batches {
            let xb = gather_rows(x, rows);
            let noise = FrozenNoise {
                gumbel: grouping::gumbel_noise(d, c, &mut rng),
                gate: gates::gate_noise(c, cfg.sigma, &mut rng),
            };
            let batch = Batch { x: &xb, noise: &noise, temperature, sigma: cfg.sigma };
            let step = loss_and_grad(batch, &params, &fg, &cfg.loss);
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(Error::Numerical(reason)) => {
                    return Ok(diverged(model, history, epoch, reason));
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Ok(diverged(model, history, epoch, format!("non-finite loss {loss:?}")));
            }
            accumulate(&mut sums, &loss, &cfg.loss);
            adam.step(&mut params, &grads);
            if !params.is_finite() {
                return Ok(diverged(model, history, epoch, "non-finite parameters after update".into()));
            }
        }
        let k = batches.len() as f64;
        let record = EpochRecord {
            epoch,
            total: sums[0] / k,
            smooth: sums[1] / k,
            feature_weighted: sums[2] / k,
            reg_weighted: sums[3] / k,
            temperature,
        };
        log::debug!(
            "epoch={} L={:.6e} L_s={:.6e} l1L_f={:.6e} l2L_reg={:.6e} T={:.4}",
            record.epoch,
            record.total,
            record.smooth,
            record.feature_weighted,
            record.reg_weighted,
            record.temperature
        );
        if record.total < model.best_loss {
            model.best_loss = record.total;
            model.best_epoch = Some(epoch);
            model.params = params.clone();
        }
        history.push(record);
    }
    Ok(TrainOutcome { model, history, status: TrainStatus::Completed })
}

fn accumulate(sums: &mut [f64; 4], loss: &LossBreakdown, cfg: &LossConfig) {
    sums[0] += loss.total;
    sums[1] += loss.smooth;
    sums[2] += cfg.lambda1 * loss.feature;
    sums[3] += cfg.lambda2 * loss.reg;
}

fn diverged(model: TrainedModel, history: Vec<EpochRecord>, epoch: usize, reason: String) -> TrainOutcome {
    log::warn!("training stopped at epoch {epoch}: {reason}");
    TrainOutcome { model, history, status: TrainStatus::Diverged { epoch, reason } }
}

/// Independent runs fanned out over `exec`, results in input order.
pub fn train_many(x: &DMatrix<f64>, configs: &[TrainConfig], exec: Exec) -> Vec<Result<TrainOutcome>> {
    exec.map(configs.len(), |i| train(x, &configs[i]))
}

/// On-disk form of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub params: StoredParams,
    pub sigma: f64,
    pub best_epoch: Option<usize>,
    pub best_loss: Option<f64>,
    pub init_labels: Vec<usize>,
    pub status: TrainStatus,
}

impl Checkpoint {
    pub fn new(outcome: &TrainOutcome, config: &TrainConfig) -> Self {
        let m = &outcome.model;
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: *config,
            params: StoredParams::from(&m.params),
            sigma: m.sigma,
            best_epoch: m.best_epoch,
            best_loss: m.best_loss.is_finite().then_some(m.best_loss),
            init_labels: m.init_labels.clone(),
            status: outcome.status.clone(),
        }
    }

    pub fn model(&self) -> Result<TrainedModel> {
        Ok(TrainedModel {
            params: ParamSet::try_from(&self.params)?,
            sigma: self.sigma,
            best_epoch: self.best_epoch,
            best_loss: self.best_loss.unwrap_or(f64::INFINITY),
            init_labels: self.init_labels.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(file)?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(invalid(format!(
                "checkpoint schema {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
                ck.schema_version
            )));
        }
        Ok(ck)
    }
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "L", "L_s", "lambda1_L_f", "lambda2_L_reg", "temperature"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.total.to_string(),
            r.smooth.to_string(),
            r.feature_weighted.to_string(),
            r.reg_weighted.to_string(),
            r.temperature.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
