//! Learnable feature-to-group assignment through a Gumbel-Softmax relaxation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Open01};

use crate::error::{invalid, Result};

/// Default probability mass put on the warm-start cluster.
pub const DEFAULT_P_MAIN: f64 = 0.7;

/// Linear temperature decay clipped below at `min_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub start_t: f64,
    pub min_t: f64,
    pub epochs: usize,
}

impl TemperatureSchedule {
    pub const DEFAULT_START: f64 = 10.0;
    pub const DEFAULT_MIN: f64 = 1e-2;

    pub fn new(start_t: f64, min_t: f64, epochs: usize) -> Result<Self> {
        if !(min_t > 0.0) || !(start_t >= min_t) || !start_t.is_finite() {
            return Err(invalid(format!(
                "temperature schedule needs start_t >= min_t > 0, got start_t = {start_t}, min_t = {min_t}"
            )));
        }
        if epochs == 0 {
            return Err(invalid("temperature schedule needs at least one epoch"));
        }
        Ok(Self { start_t, min_t, epochs })
    }

    pub fn with_epochs(epochs: usize) -> Self {
        Self { start_t: Self::DEFAULT_START, min_t: Self::DEFAULT_MIN, epochs: epochs.max(1) }
    }

    pub fn temperature_at(&self, epoch: usize) -> f64 {
        let frac = epoch as f64 / self.epochs as f64;
        (self.start_t - (self.start_t - self.min_t) * frac).max(self.min_t)
    }
}

/// `d x C` assignment logits and the current temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingState {
    pub logits: DMatrix<f64>,
    pub temperature: f64,
}

impl GroupingState {
    pub fn new(logits: DMatrix<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(invalid("logits must be finite"));
        }
        Ok(Self { logits, temperature })
    }

    pub fn n_features(&self) -> usize {
        self.logits.nrows()
    }

    pub fn n_groups(&self) -> usize {
        self.logits.ncols()
    }
}

/// i.i.d. standard Gumbel noise `-ln(-ln u)`.
pub fn gumbel_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let u: f64 = Open01.sample(rng);
        -(-u.ln()).ln()
    })
}

/// Row-wise softmax of `(logits + noise) / T`.
pub fn relaxed_assignment(logits: &DMatrix<f64>, noise: &DMatrix<f64>, temperature: f64) -> DMatrix<f64> {
    let mut m = (logits + noise) / temperature;
    softmax_rows_in_place(&mut m);
    m
}

pub(crate) fn softmax_rows_in_place(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Draw a relaxed assignment with fresh Gumbel noise.
pub fn sample_assignment<R: Rng + ?Sized>(state: &GroupingState, rng: &mut R) -> DMatrix<f64> {
    let g = gumbel_noise(state.n_features(), state.n_groups(), rng);
    relaxed_assignment(&state.logits, &g, state.temperature)
}

/// Noise-free argmax group per feature; ties go to the lowest index.
pub fn hard_assignment(logits: &DMatrix<f64>) -> Vec<usize> {
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Warm-start logits: `log(p_main / p_rest)` on the assigned cluster, 0 elsewhere.
pub fn init_logits(labels: &[usize], c: usize, p_main: f64) -> Result<DMatrix<f64>> {
    if c < 2 {
        return Err(invalid("warm-start logits need at least 2 groups"));
    }
    if !(p_main > 1.0 / c as f64 && p_main < 1.0) {
        return Err(invalid(format!("p_main must lie in (1/C, 1), got {p_main} with C = {c}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(invalid(format!("label {l} out of range for C = {c}")));
    }
    let delta = warm_start_margin(c, p_main);
    let mut logits = DMatrix::zeros(labels.len(), c);
    for (i, &l) in labels.iter().enumerate() {
        logits[(i, l)] = delta;
    }
    Ok(logits)
}

/// `log(p_main / p_rest)` with `p_rest = (1 - p_main) / (C - 1)`.
pub fn warm_start_margin(c: usize, p_main: f64) -> f64 {
    let p_rest = (1.0 - p_main) / (c as f64 - 1.0);
    (p_main / p_rest).ln()
}
