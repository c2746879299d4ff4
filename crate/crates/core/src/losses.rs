//! Binary cross-entropy and the NT-Xent contrastive objective, both with
//! analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const BCE_EPS: f64 = 1e-12;
pub const TAU_INIT: f64 = 0.5;
pub const TAU_FLOOR: f64 = 0.1;

/// Mean binary cross-entropy and its gradient with respect to `y_hat`.
pub fn bce_loss(y_hat: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if y_hat.is_empty() {
        return Err(Error::config("BCE over an empty batch"));
    }
    if y_hat.len() != y.len() {
        return Err(Error::shape("bce", y_hat.len(), y.len()));
    }
    let n = y_hat.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y_hat.len());
    for (&p, &t) in y_hat.iter().zip(y) {
        if !p.is_finite() {
            return Err(Error::numeric("bce", format!("non-finite prediction {p}")));
        }
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        grad.push(-(t / p - (1.0 - t) / (1.0 - p)) / n);
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureClamp {
    /// Falling below the floor pins tau at the floor for the rest of training.
    #[default]
    Freeze,
    /// Proposals below the floor are clipped but later updates still apply.
    PerStep,
}

/// Learnable contrastive temperature with a lower floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureState {
    pub tau: f64,
    pub frozen: bool,
    pub floor: f64,
    pub init: f64,
    #[serde(default)]
    pub clamp: TemperatureClamp,
}

impl Default for TemperatureState {
    fn default() -> Self {
        TemperatureState::new(TAU_INIT, TAU_FLOOR, TemperatureClamp::Freeze)
    }
}

impl TemperatureState {
    pub fn new(init: f64, floor: f64, clamp: TemperatureClamp) -> Self {
        TemperatureState {
            tau: init,
            frozen: false,
            floor,
            init,
            clamp,
        }
    }

    /// Fixed temperature that never trains.
    pub fn fixed(tau: f64) -> Self {
        TemperatureState {
            tau,
            frozen: true,
            floor: tau.min(TAU_FLOOR),
            init: tau,
            clamp: TemperatureClamp::Freeze,
        }
    }
}

pub fn apply_temperature_update(temp: TemperatureState, proposed: f64) -> Result<TemperatureState> {
    if !proposed.is_finite() {
        return Err(Error::numeric("temperature", format!("proposed tau {proposed}")));
    }
    if temp.frozen {
        return Ok(temp);
    }
    let mut next = temp;
    if proposed < temp.floor {
        next.tau = temp.floor;
        next.frozen = temp.clamp == TemperatureClamp::Freeze;
    } else {
        next.tau = proposed;
    }
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct NtXentOutput {
    pub loss: f64,
    pub d_z: Tensor,
    /// Zero when the temperature is frozen.
    pub d_tau: f64,
}

/// NT-Xent over `2K` rows where rows `2m` and `2m+1` form a positive pair.
pub fn nt_xent_loss(z: &Tensor, temp: &TemperatureState) -> Result<NtXentOutput> {
    let (rows, d) = match z.shape.as_slice() {
        &[r, d] if r >= 2 && r % 2 == 0 && d >= 1 => (r, d),
        _ => return Err(Error::shape("nt_xent", "(2K, d) with K >= 1", &z.shape)),
    };
    let tau = temp.tau;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::numeric("nt_xent", format!("temperature {tau}")));
    }
    let mut norms = Vec::with_capacity(rows);
    let mut unit = vec![0.0; rows * d];
    for i in 0..rows {
        let row = &z.data[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::numeric("nt_xent", format!("row {i} has norm {norm}")));
        }
        norms.push(norm);
        for (u, v) in unit[i * d..(i + 1) * d].iter_mut().zip(row) {
            *u = v / norm;
        }
    }
    let mut sim = vec![0.0; rows * rows];
    for i in 0..rows {
        for k in 0..rows {
            sim[i * rows + k] = (0..d).map(|t| unit[i * d + t] * unit[k * d + t]).sum();
        }
    }

    // g[i][k] = dL/dsim_ik from anchor i's term.
    let scale = 1.0 / rows as f64;
    let mut loss = 0.0;
    let mut d_tau = 0.0;
    let mut g = vec![0.0; rows * rows];
    for i in 0..rows {
        let j = i ^ 1;
        let logits: Vec<f64> = (0..rows).map(|k| sim[i * rows + k] / tau).collect();
        let max = (0..rows).filter(|&k| k != i).map(|k| logits[k]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..rows).filter(|&k| k != i).map(|k| (logits[k] - max).exp()).sum();
        let lse = max + denom.ln();
        loss += lse - logits[j];
        let mut expected_sim = 0.0;
        for k in (0..rows).filter(|&k| k != i) {
            let p = (logits[k] - lse).exp();
            expected_sim += p * sim[i * rows + k];
            g[i * rows + k] = scale * (p - if k == j { 1.0 } else { 0.0 }) / tau;
        }
        d_tau += (sim[i * rows + j] - expected_sim) / (tau * tau);
    }
    loss *= scale;
    d_tau *= scale;
    if !loss.is_finite() {
        return Err(Error::numeric("nt_xent", "non-finite loss"));
    }

    let mut d_z = Tensor::zeros(&[rows, d]);
    for i in 0..rows {
        let mut d_unit = vec![0.0; d];
        for k in 0..rows {
            let w = g[i * rows + k] + g[k * rows + i];
            if w != 0.0 {
                for t in 0..d {
                    d_unit[t] += w * unit[k * d + t];
                }
            }
        }
        let u = &unit[i * d..(i + 1) * d];
        let radial: f64 = u.iter().zip(&d_unit).map(|(a, b)| a * b).sum();
        for t in 0..d {
            d_z.data[i * d + t] = (d_unit[t] - u[t] * radial) / norms[i];
        }
    }
    Ok(NtXentOutput {
        loss,
        d_z,
        d_tau: if temp.frozen { 0.0 } else { d_tau },
    })
}
