//! Linear probes on frozen embeddings.

use nalgebra::{DMatrix, DVector};

use super::image_tensor;
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::nn::{sigmoid, Mode, ModelParams};
use crate::records::{ImageGrid, ImageRef};

/// Eval-mode visual embeddings, one row per image.
pub fn embed(model: &ModelParams, images: &[ImageRef], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let (h, w) = (model.config.visual.input_height, model.config.visual.input_width);
    let d = model.config.visual.output_dim();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let grids: Vec<ImageGrid> = chunk.iter().map(|i| i.load().as_ref().clone()).collect();
        let (z, _) = model.encode_visual(&image_tensor(&grids, h, w)?, Mode::Eval)?;
        out.extend(z.data.chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// L2-regularized logistic regression on standardized features, fitted by
/// Newton's method.
#[derive(Debug, Clone)]
pub struct LogisticProbe {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticProbe {
    pub fn fit(x: &[Vec<f64>], y: &[u8], l2: f64) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::shape("probe", n, y.len()));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::data("probe rows differ in width"));
        }
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let sd: Vec<f64> = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if v > 1e-24 { v.sqrt() } else { 1.0 }
            })
            .collect();
        let design = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { (x[i][j - 1] - mean[j - 1]) / sd[j - 1] });
        let target = DVector::from_iterator(n, y.iter().map(|&v| f64::from(v)));
        let mut penalty = DMatrix::identity(d + 1, d + 1) * l2;
        penalty[(0, 0)] = 1e-9;
        let mut beta = DVector::zeros(d + 1);
        for _ in 0..100 {
            let p = (&design * &beta).map(sigmoid);
            let weights = p.map(|v| (v * (1.0 - v)).max(1e-12));
            let grad = design.transpose() * (&p - &target) / n as f64 + &penalty * &beta;
            let mut weighted = design.clone();
            for (mut row, w) in weighted.row_iter_mut().zip(weights.iter()) {
                row *= *w;
            }
            let hessian = design.transpose() * weighted / n as f64 + &penalty;
            let step = hessian
                .cholesky()
                .ok_or_else(|| Error::numeric("probe", "Hessian not positive definite"))?
                .solve(&grad);
            beta -= &step;
            if step.amax() < 1e-10 {
                break;
            }
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("probe", "non-finite coefficients"));
        }
        Ok(LogisticProbe {
            mean,
            sd,
            weights: beta.iter().skip(1).copied().collect(),
            bias: beta[0],
        })
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let logit: f64 = x
            .iter()
            .zip(&self.mean)
            .zip(&self.sd)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| w * (v - m) / s)
            .sum();
        sigmoid(self.bias + logit)
    }
}

/// Test AUROC of a logistic probe fitted on the training embeddings.
pub fn linear_probe_auroc(
    train_x: &[Vec<f64>],
    train_y: &[u8],
    test_x: &[Vec<f64>],
    test_y: &[u8],
    l2: f64,
) -> Result<f64> {
    let probe = LogisticProbe::fit(train_x, train_y, l2)?;
    let scores: Vec<f64> = test_x.iter().map(|r| probe.score(r)).collect();
    auroc(&scores, test_y)
}
