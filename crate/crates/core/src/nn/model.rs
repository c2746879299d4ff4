use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, named, relu, relu_backward,
    BatchNorm, BnCache, Conv2d, Dense, Mode, ResidualBlock, ResidualCache,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::features::FEATURE_DIM;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Both branches feed the fusion head.
    Multimodal,
    /// The EHR branch is switched off and its fusion input is held at zero.
    ImageOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    /// One residual stage per entry; stages after the first halve the resolution.
    pub widths: Vec<usize>,
}

impl Default for VisualConfig {
    fn default() -> Self {
        VisualConfig {
            input_height: 64,
            input_width: 64,
            stem_channels: 8,
            stem_stride: 2,
            stem_pool: true,
            widths: vec![8, 16, 32, 64],
        }
    }
}

impl VisualConfig {
    pub fn output_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.stem_channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub visual: VisualConfig,
    pub ehr_input_dim: usize,
    pub ehr_hidden: usize,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub fusion: FusionMode,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            visual: VisualConfig::default(),
            ehr_input_dim: FEATURE_DIM,
            ehr_hidden: 16,
            projection_hidden: 64,
            projection_dim: 32,
            fusion: FusionMode::Multimodal,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let v = &self.visual;
        if v.input_height == 0 || v.input_width == 0 || v.stem_channels == 0 || v.stem_stride == 0 {
            return Err(Error::config("visual encoder dimensions must be positive"));
        }
        if v.widths.contains(&0) || self.ehr_input_dim == 0 || self.ehr_hidden == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.projection_hidden == 0 || self.projection_dim == 0 {
            return Err(Error::config("projection widths must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::config("batch-norm momentum must be in [0,1] and eps positive"));
        }
        Ok(())
    }
}

/// Residual CNN mapping `(B, H, W)` images to `(B, d_v)` embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoder {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub stem_pool: bool,
    pub blocks: Vec<ResidualBlock>,
}

#[derive(Debug, Clone)]
pub struct VisualCache {
    stamp: u64,
    input: Tensor,
    stem_bn: BnCache,
    stem_out: Tensor,
    blocks: Vec<ResidualCache>,
    final_shape: Vec<usize>,
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let v = &cfg.visual;
        let stem = Conv2d::new(1, v.stem_channels, 3, v.stem_stride, 1, rng);
        let mut blocks = Vec::with_capacity(v.widths.len());
        let mut c_in = v.stem_channels;
        for (i, &w) in v.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(ResidualBlock::new(c_in, w, stride, cfg.bn_momentum, cfg.bn_eps, rng));
            c_in = w;
        }
        VisualEncoder {
            stem,
            stem_bn: BatchNorm::new(v.stem_channels, cfg.bn_momentum, cfg.bn_eps),
            stem_pool: v.stem_pool,
            blocks,
        }
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, VisualCache)> {
        let input = match *x.shape.as_slice() {
            [b, h, w] => x.clone().reshape(&[b, 1, h, w])?,
            [_, 1, _, _] => x.clone(),
            _ => return Err(Error::shape("visual.input", "(B, H, W)", &x.shape)),
        };
        let h = self.stem.forward(&input, "visual.stem.conv")?;
        let (a, stem_bn) = self.stem_bn.forward(&h, mode, "visual.stem.bn")?;
        let stem_out = relu(&a);
        stem_out.check_finite("visual.stem")?;
        let mut cur = if self.stem_pool {
            avg_pool2(&stem_out, "visual.stem.pool")?
        } else {
            stem_out.clone()
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, cache) = block.forward(&cur, mode, &format!("visual.block{i}"))?;
            blocks.push(cache);
            cur = out;
        }
        let z = global_avg_pool(&cur, "visual.pool")?;
        Ok((
            z,
            VisualCache {
                stamp: 0,
                input,
                stem_bn,
                stem_out,
                blocks,
                final_shape: cur.shape,
            },
        ))
    }

    fn backward(&self, cache: &VisualCache, dz: &Tensor, grad: &mut VisualEncoder) {
        let mut d = global_avg_pool_backward(&cache.final_shape, dz);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            d = block.backward(&cache.blocks[i], &d, &mut grad.blocks[i]);
        }
        if self.stem_pool {
            d = avg_pool2_backward(&cache.stem_out.shape, &d);
        }
        let d_a = relu_backward(&cache.stem_out, &d);
        let d_h = self.stem_bn.backward(&cache.stem_bn, &d_a, &mut grad.stem_bn);
        self.stem.backward(&cache.input, &d_h, &mut grad.stem);
    }

    fn update_running(&mut self, cache: &VisualCache) {
        self.stem_bn.update_running(&cache.stem_bn);
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            block.update_running(c);
        }
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = named("stem.conv", self.stem.params());
        out.extend(named("stem.bn", self.stem_bn.params()));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(named(&format!("block{i}"), b.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.stem.params_mut();
        out.extend(self.stem_bn.params_mut());
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out
    }
}

/// Dense, batch-norm, ReLU, applied twice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EhrEncoder {
    pub dense1: Dense,
    pub bn1: BatchNorm,
    pub dense2: Dense,
    pub bn2: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct EhrCache {
    stamp: u64,
    x: Tensor,
    bn1: BnCache,
    r1: Tensor,
    bn2: BnCache,
    out: Tensor,
}

impl EhrEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        EhrEncoder {
            dense1: Dense::new(cfg.ehr_input_dim, cfg.ehr_hidden, rng),
            bn1: BatchNorm::new(cfg.ehr_hidden, cfg.bn_momentum, cfg.bn_eps),
            dense2: Dense::new(cfg.ehr_hidden, cfg.ehr_hidden, rng),
            bn2: BatchNorm::new(cfg.ehr_hidden, cfg.bn_momentum, cfg.bn_eps),
        }
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, EhrCache)> {
        let h1 = self.dense1.forward(x, "ehr.dense1")?;
        let (a1, bn1) = self.bn1.forward(&h1, mode, "ehr.bn1")?;
        let r1 = relu(&a1);
        let h2 = self.dense2.forward(&r1, "ehr.dense2")?;
        let (a2, bn2) = self.bn2.forward(&h2, mode, "ehr.bn2")?;
        let out = relu(&a2);
        out.check_finite("ehr")?;
        Ok((
            out.clone(),
            EhrCache {
                stamp: 0,
                x: x.clone(),
                bn1,
                r1,
                bn2,
                out,
            },
        ))
    }

    fn backward(&self, cache: &EhrCache, dz: &Tensor, grad: &mut EhrEncoder) {
        let d_a2 = relu_backward(&cache.out, dz);
        let d_h2 = self.bn2.backward(&cache.bn2, &d_a2, &mut grad.bn2);
        let d_r1 = self.dense2.backward(&cache.r1, &d_h2, &mut grad.dense2);
        let d_a1 = relu_backward(&cache.r1, &d_r1);
        let d_h1 = self.bn1.backward(&cache.bn1, &d_a1, &mut grad.bn1);
        self.dense1.backward(&cache.x, &d_h1, &mut grad.dense1);
    }

    fn update_running(&mut self, cache: &EhrCache) {
        self.bn1.update_running(&cache.bn1);
        self.bn2.update_running(&cache.bn2);
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = named("dense1", self.dense1.params());
        out.extend(named("bn1", self.bn1.params()));
        out.extend(named("dense2", self.dense2.params()));
        out.extend(named("bn2", self.bn2.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.dense1.params_mut();
        out.extend(self.bn1.params_mut());
        out.extend(self.dense2.params_mut());
        out.extend(self.bn2.params_mut());
        out
    }
}

/// Two-layer MLP used on top of the visual embedding during pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub dense1: Dense,
    pub dense2: Dense,
}

#[derive(Debug, Clone)]
pub struct ProjectionCache {
    stamp: u64,
    z: Tensor,
    hidden: Tensor,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        ProjectionHead {
            dense1: Dense::new(cfg.visual.output_dim(), cfg.projection_hidden, rng),
            dense2: Dense::new(cfg.projection_hidden, cfg.projection_dim, rng),
        }
    }
}

/// Output of [`ModelParams::forward_fused`].
#[derive(Debug, Clone)]
pub struct FusedOutput {
    pub y_hat: Vec<f64>,
    pub p_oct: Vec<f64>,
    pub p_ehr: Vec<f64>,
    pub cache: ForwardCache,
}

/// Activations retained by one fused forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    visual: VisualCache,
    ehr: Option<EhrCache>,
    z_oct: Tensor,
    fused_in: Tensor,
    y_hat: Vec<f64>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.y_hat.len()
    }
}

/// Every learnable block of the classifier plus the pretraining projection head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub visual: VisualEncoder,
    pub ehr: EhrEncoder,
    pub head_oct: Dense,
    pub head_ehr: Dense,
    pub head_fuse: Dense,
    pub projection: Option<ProjectionHead>,
    /// Identifies the parameter state a cache was produced from.
    #[serde(skip, default = "fresh_stamp")]
    stamp: u64,
}

pub type Gradients = ModelParams;

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.visual == other.visual
            && self.ehr == other.ehr
            && self.head_oct == other.head_oct
            && self.head_ehr == other.head_ehr
            && self.head_fuse == other.head_fuse
            && self.projection == other.projection
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ModelParams {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let visual = VisualEncoder::new(&config, rng);
        let ehr = EhrEncoder::new(&config, rng);
        let head_oct = Dense::new(config.visual.output_dim(), 1, rng);
        let head_ehr = Dense::new(config.ehr_hidden, 1, rng);
        let mut head_fuse = Dense::zeros(2, 1);
        head_fuse.weight.data = vec![1.0, 1.0];
        let projection = Some(ProjectionHead::new(&config, rng));
        Ok(ModelParams {
            config,
            visual,
            ehr,
            head_oct,
            head_ehr,
            head_fuse,
            projection,
            stamp: fresh_stamp(),
        })
    }

    /// Re-draws every head and the EHR encoder while keeping the visual
    /// encoder. Used when fine-tuning from pretrained weights.
    pub fn reinitialize_heads<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fresh = ModelParams::new(self.config.clone(), rng).expect("config already validated");
        self.ehr = fresh.ehr;
        self.head_oct = fresh.head_oct;
        self.head_ehr = fresh.head_ehr;
        self.head_fuse = fresh.head_fuse;
        self.touch();
    }

    /// Marks the parameters as modified so that earlier caches are rejected.
    pub fn touch(&mut self) {
        self.stamp = fresh_stamp();
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    /// Zero-valued gradient container with the same layout.
    pub fn zeros_like(&self) -> Gradients {
        let mut g = self.clone();
        for t in g.params_mut() {
            t.fill(0.0);
        }
        g
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = named("visual", self.visual.params());
        out.extend(named("ehr", self.ehr.params()));
        out.extend(named("head_oct", self.head_oct.params()));
        out.extend(named("head_ehr", self.head_ehr.params()));
        out.extend(named("head_fuse", self.head_fuse.params()));
        if let Some(p) = &self.projection {
            out.extend(named("projection.dense1", p.dense1.params()));
            out.extend(named("projection.dense2", p.dense2.params()));
        }
        out
    }

    /// Mutable views of all learnable tensors in [`Self::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.stamp = fresh_stamp();
        let mut out = self.visual.params_mut();
        out.extend(self.ehr.params_mut());
        out.extend(self.head_oct.params_mut());
        out.extend(self.head_ehr.params_mut());
        out.extend(self.head_fuse.params_mut());
        if let Some(p) = &mut self.projection {
            out.extend(p.dense1.params_mut());
            out.extend(p.dense2.params_mut());
        }
        out
    }

    /// Visual encoder followed by the projection head, the tensors that
    /// contrastive pretraining updates.
    pub fn pretrain_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.stamp = fresh_stamp();
        let mut out = self.visual.params_mut();
        if let Some(p) = &mut self.projection {
            out.extend(p.dense1.params_mut());
            out.extend(p.dense2.params_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn encode_visual(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, VisualCache)> {
        let (z, mut cache) = self.visual.forward(x, mode)?;
        cache.stamp = self.stamp;
        Ok((z, cache))
    }

    pub fn encode_ehr(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, EhrCache)> {
        if x.shape.len() != 2 || x.shape[1] != self.config.ehr_input_dim {
            return Err(Error::shape("ehr.input", ["B".to_string(), self.config.ehr_input_dim.to_string()], &x.shape));
        }
        let (z, mut cache) = self.ehr.forward(x, mode)?;
        cache.stamp = self.stamp;
        Ok((z, cache))
    }

    pub fn project(&self, z: &Tensor) -> Result<(Tensor, ProjectionCache)> {
        let head = self
            .projection
            .as_ref()
            .ok_or_else(|| Error::state("model has no projection head"))?;
        let hidden = relu(&head.dense1.forward(z, "projection.dense1")?);
        let out = head.dense2.forward(&hidden, "projection.dense2")?;
        out.check_finite("projection")?;
        Ok((
            out,
            ProjectionCache {
                stamp: self.stamp,
                z: z.clone(),
                hidden,
            },
        ))
    }

    fn check_stamp(&self, stamp: u64, what: &str) -> Result<()> {
        if stamp != self.stamp {
            return Err(Error::state(format!(
                "{what} cache was produced by a different parameter state"
            )));
        }
        Ok(())
    }

    /// Backward through the projection head; returns `dL/dz`.
    pub fn backward_projection(&self, cache: &ProjectionCache, d_out: &Tensor, grads: &mut Gradients) -> Result<Tensor> {
        self.check_stamp(cache.stamp, "projection")?;
        let (head, ghead) = match (&self.projection, &mut grads.projection) {
            (Some(h), Some(g)) => (h, g),
            _ => return Err(Error::state("model has no projection head")),
        };
        let d_hidden = head.dense2.backward(&cache.hidden, d_out, &mut ghead.dense2);
        let d_pre = relu_backward(&cache.hidden, &d_hidden);
        Ok(head.dense1.backward(&cache.z, &d_pre, &mut ghead.dense1))
    }

    pub fn backward_visual(&self, cache: &VisualCache, dz: &Tensor, grads: &mut Gradients) -> Result<()> {
        self.check_stamp(cache.stamp, "visual")?;
        self.visual.backward(cache, dz, &mut grads.visual);
        Ok(())
    }

    pub fn backward_ehr(&self, cache: &EhrCache, dz: &Tensor, grads: &mut Gradients) -> Result<()> {
        self.check_stamp(cache.stamp, "ehr")?;
        self.ehr.backward(cache, dz, &mut grads.ehr);
        Ok(())
    }

    pub fn forward_fused(&self, x_oct: &Tensor, x_ehr: Option<&Tensor>, mode: Mode) -> Result<FusedOutput> {
        let b = x_oct.shape.first().copied().unwrap_or(0);
        let (z_oct, visual) = self.encode_visual(x_oct, mode)?;
        z_oct.check_finite("visual")?;
        let p_oct = self.head_oct.forward(&z_oct, "head_oct")?;
        p_oct.check_finite("head_oct")?;
        let (p_ehr, ehr) = match self.config.fusion {
            FusionMode::ImageOnly => (Tensor::zeros(&[b, 1]), None),
            FusionMode::Multimodal => {
                let x = x_ehr.ok_or_else(|| Error::config("multimodal model needs EHR features"))?;
                if x.shape.first() != Some(&b) {
                    return Err(Error::shape("fusion", format!("EHR batch of {b}"), &x.shape));
                }
                let (z, cache) = self.encode_ehr(x, mode)?;
                let p = self.head_ehr.forward(&z, "head_ehr")?;
                p.check_finite("head_ehr")?;
                (p, Some(cache))
            }
        };
        let mut fused = Vec::with_capacity(2 * b);
        for i in 0..b {
            fused.push(p_oct.data[i]);
            fused.push(p_ehr.data[i]);
        }
        let fused_in = Tensor::from_vec(&[b, 2], fused)?;
        let logit = self.head_fuse.forward(&fused_in, "head_fuse")?;
        logit.check_finite("head_fuse")?;
        let y_hat: Vec<f64> = logit.data.iter().map(|&v| sigmoid(v)).collect();
        Ok(FusedOutput {
            y_hat: y_hat.clone(),
            p_oct: p_oct.data,
            p_ehr: p_ehr.data,
            cache: ForwardCache {
                stamp: self.stamp,
                visual,
                ehr,
                z_oct,
                fused_in,
                y_hat,
            },
        })
    }

    /// Gradients of the loss given `dL/dy_hat`. The cache is consumed so it
    /// cannot be replayed.
    pub fn backward(&self, cache: ForwardCache, d_y_hat: &[f64]) -> Result<Gradients> {
        self.backward_with_aux(cache, d_y_hat, None, None)
    }

    /// As [`Self::backward`], with optional extra gradients arriving directly
    /// at the per-modality logits.
    pub fn backward_with_aux(
        &self,
        cache: ForwardCache,
        d_y_hat: &[f64],
        d_p_oct: Option<&[f64]>,
        d_p_ehr: Option<&[f64]>,
    ) -> Result<Gradients> {
        self.check_stamp(cache.stamp, "forward")?;
        let b = cache.batch_size();
        for (name, len) in [
            ("d_y_hat", Some(d_y_hat.len())),
            ("d_p_oct", d_p_oct.map(<[f64]>::len)),
            ("d_p_ehr", d_p_ehr.map(<[f64]>::len)),
        ] {
            if let Some(len) = len {
                if len != b {
                    return Err(Error::shape(format!("backward.{name}"), b, len));
                }
            }
        }
        if let Some(i) = d_y_hat.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("backward", format!("non-finite upstream gradient at {i}")));
        }
        let mut grads = self.zeros_like();
        let d_logit = Tensor::from_vec(
            &[b, 1],
            d_y_hat.iter().zip(&cache.y_hat).map(|(d, y)| d * y * (1.0 - y)).collect(),
        )?;
        let d_fused = self.head_fuse.backward(&cache.fused_in, &d_logit, &mut grads.head_fuse);
        let mut d_p_oct_t = Tensor::from_vec(&[b, 1], d_fused.data.iter().step_by(2).copied().collect())?;
        let mut d_p_ehr_t = Tensor::from_vec(&[b, 1], d_fused.data.iter().skip(1).step_by(2).copied().collect())?;
        if let Some(extra) = d_p_oct {
            d_p_oct_t.data.iter_mut().zip(extra).for_each(|(a, e)| *a += e);
        }
        if let Some(extra) = d_p_ehr {
            d_p_ehr_t.data.iter_mut().zip(extra).for_each(|(a, e)| *a += e);
        }
        let dz_oct = self.head_oct.backward(&cache.z_oct, &d_p_oct_t, &mut grads.head_oct);
        self.visual.backward(&cache.visual, &dz_oct, &mut grads.visual);
        if let Some(ehr) = &cache.ehr {
            let dz_ehr = self.head_ehr.backward(&ehr.out, &d_p_ehr_t, &mut grads.head_ehr);
            self.ehr.backward(ehr, &dz_ehr, &mut grads.ehr);
        }
        Ok(grads)
    }

    /// Folds training-mode batch statistics into running estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        self.visual.update_running(&cache.visual);
        if let Some(e) = &cache.ehr {
            self.ehr.update_running(e);
        }
    }

    pub fn update_visual_running_stats(&mut self, cache: &VisualCache) {
        self.visual.update_running(cache);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            visual: VisualConfig {
                input_height: 8,
                input_width: 8,
                stem_channels: 2,
                stem_stride: 1,
                stem_pool: true,
                widths: vec![2, 3],
            },
            ehr_input_dim: 5,
            ehr_hidden: 4,
            projection_hidden: 4,
            projection_dim: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_visual_shapes() {
        let mut r = rng::from_seed(1);
        let m = ModelParams::new(ModelConfig::default(), &mut r).unwrap();
        let x = Tensor::zeros(&[2, 64, 64]);
        let (z, _) = m.encode_visual(&x, Mode::Eval).unwrap();
        assert_eq!(z.shape, vec![2, 64]);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut r = rng::from_seed(2);
        let mut m = ModelParams::new(tiny_config(), &mut r).unwrap();
        let x = Tensor::zeros(&[2, 8, 8]);
        let e = Tensor::zeros(&[2, 5]);
        let out = m.forward_fused(&x, Some(&e), Mode::Train).unwrap();
        m.params_mut()[0].data[0] += 1.0;
        assert!(matches!(m.backward(out.cache, &[1.0, 1.0]), Err(Error::State(_))));
    }

    #[test]
    fn wrong_ehr_width_is_shape_error() {
        let mut r = rng::from_seed(3);
        let m = ModelParams::new(tiny_config(), &mut r).unwrap();
        let err = m.encode_ehr(&Tensor::zeros(&[2, 6]), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Shape { ref layer, .. } if layer == "ehr.input"));
    }
}
