//! A small convolutional fusion network with hand-rolled backpropagation.
//!
//! The model maps a `C x H x W` stack to a single logit: a sequence of
//! 3x3-conv / ReLU / 2x2-max-pool blocks, global average pooling, and a
//! fully connected head. Everything is f64 and strictly sequential, so
//! forward, backward and training are bit-reproducible.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_rng;

/// Architecture of the fusion model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModelConfig {
    pub input_channels: usize,
    /// Channel widths of the conv blocks.
    pub conv_block_widths: Vec<usize>,
    pub input_resolution: (usize, usize),
}

impl FusionModelConfig {
    pub fn new(input_channels: usize, conv_block_widths: Vec<usize>, input_resolution: (usize, usize)) -> Self {
        Self { input_channels, conv_block_widths, input_resolution }
    }

    /// Default four-block widths.
    pub fn default_widths() -> Vec<usize> {
        vec![32, 32, 64, 128]
    }

    fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.conv_block_widths.is_empty() {
            return Err(Error::InvalidConfig("need >= 1 input channel and >= 1 conv block".into()));
        }
        let (mut h, mut w) = self.input_resolution;
        for (i, _) in self.conv_block_widths.iter().enumerate() {
            if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "resolution {:?} too small (or odd) for {} pooling blocks; stuck at block {i} with {h}x{w}",
                    self.input_resolution,
                    self.conv_block_widths.len()
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    /// `(out, in, 3, 3)`
    weight: Array4<f64>,
    bias: Array1<f64>,
}

#[derive(Debug, Clone)]
struct FcHead {
    /// `(features,)` -> scalar
    weight: Array1<f64>,
    bias: f64,
}

/// The fusion network `f_theta`.
#[derive(Debug, Clone)]
pub struct FusionModel {
    config: FusionModelConfig,
    blocks: Vec<ConvBlock>,
    head: FcHead,
}

/// Per-item forward caches needed by the backward pass.
pub struct ForwardCache {
    block_inputs: Vec<Array3<f64>>,
    preacts: Vec<Array3<f64>>,
    pool_argmax: Vec<Array3<u8>>,
    features: Array1<f64>,
}

impl FusionModel {
    /// Build with deterministic He-style initialization from `init_seed`.
    pub fn build(config: FusionModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(init_seed, "fusion_model_init");
        let mut blocks = Vec::with_capacity(config.conv_block_widths.len());
        let mut in_ch = config.input_channels;
        for &out_ch in &config.conv_block_widths {
            let fan_in = in_ch * 9;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let weight = Array4::from_shape_fn((out_ch, in_ch, 3, 3), |_| normal.sample(&mut rng));
            blocks.push(ConvBlock { weight, bias: Array1::zeros(out_ch) });
            in_ch = out_ch;
        }
        let normal = Normal::new(0.0, (1.0 / in_ch as f64).sqrt()).unwrap();
        let head = FcHead {
            weight: Array1::from_shape_fn(in_ch, |_| normal.sample(&mut rng)),
            bias: 0.0,
        };
        Ok(Self { config, blocks, head })
    }

    pub fn config(&self) -> &FusionModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for b in &self.blocks {
            n += b.weight.len() + b.bias.len();
        }
        n + self.head.weight.len() + 1
    }

    /// Flatten all parameters in a stable order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in &self.blocks {
            out.extend(b.weight.iter());
            out.extend(b.bias.iter());
        }
        out.extend(self.head.weight.iter());
        out.push(self.head.bias);
        out
    }

    /// Write back parameters flattened by [`Self::params_flat`].
    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        for b in &mut self.blocks {
            for v in b.weight.iter_mut() {
                *v = params[offset];
                offset += 1;
            }
            for v in b.bias.iter_mut() {
                *v = params[offset];
                offset += 1;
            }
        }
        for v in self.head.weight.iter_mut() {
            *v = params[offset];
            offset += 1;
        }
        self.head.bias = params[offset];
        Ok(())
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.config.input_channels || (h, w) != self.config.input_resolution {
            return Err(Error::LayoutMismatch(format!(
                "input {c}x{h}x{w} does not match model {}x{:?}",
                self.config.input_channels, self.config.input_resolution
            )));
        }
        Ok(())
    }

    /// Forward pass to the scalar logit.
    pub fn forward(&self, x: &Array3<f64>) -> Result<f64> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Forward pass keeping the intermediates for backprop.
    pub fn forward_cached(&self, x: &Array3<f64>) -> Result<(f64, ForwardCache)> {
        self.check_input(x)?;
        let mut cache = ForwardCache {
            block_inputs: Vec::with_capacity(self.blocks.len()),
            preacts: Vec::with_capacity(self.blocks.len()),
            pool_argmax: Vec::with_capacity(self.blocks.len()),
            features: Array1::zeros(0),
        };
        let mut current = x.clone();
        for block in &self.blocks {
            cache.block_inputs.push(current.clone());
            let pre = conv3x3_same(&current, &block.weight, &block.bias);
            cache.preacts.push(pre.clone());
            let act = pre.mapv(|v| v.max(0.0));
            let (pooled, argmax) = max_pool_2x2(&act);
            cache.pool_argmax.push(argmax);
            current = pooled;
        }
        let (c, h, w) = current.dim();
        let features = Array1::from_shape_fn(c, |o| {
            current.index_axis(Axis(0), o).sum() / (h * w) as f64
        });
        let logit = self.head.weight.dot(&features) + self.head.bias;
        cache.features = features;
        Ok((logit, cache))
    }

    /// Backpropagate `d_logit` through the cache, returning the flat
    /// parameter gradient (same order as [`Self::params_flat`]).
    pub fn backward(&self, cache: &ForwardCache, d_logit: f64) -> Vec<f64> {
        let n_blocks = self.blocks.len();
        let mut grad_blocks: Vec<(Array4<f64>, Array1<f64>)> = Vec::with_capacity(n_blocks);

        // Head gradients.
        let d_head_weight = cache.features.mapv(|f| f * d_logit);
        let d_head_bias = d_logit;
        let d_features = self.head.weight.mapv(|w| w * d_logit);

        // Undo the global average pool.
        let last_pooled_dim = {
            let (h, w) = pooled_dims(self.config.input_resolution, n_blocks);
            (self.config.conv_block_widths[n_blocks - 1], h, w)
        };
        let (c_last, h_last, w_last) = last_pooled_dim;
        let scale = 1.0 / (h_last * w_last) as f64;
        let mut d_current = Array3::from_shape_fn((c_last, h_last, w_last), |(o, _, _)| {
            d_features[o] * scale
        });

        for i in (0..n_blocks).rev() {
            let d_act = max_pool_2x2_backward(&d_current, &cache.pool_argmax[i]);
            let mut d_pre = d_act;
            d_pre.zip_mut_with(&cache.preacts[i], |g, &pre| {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            });
            let (dw, db, d_input) =
                conv3x3_same_backward(&cache.block_inputs[i], &self.blocks[i].weight, &d_pre);
            grad_blocks.push((dw, db));
            d_current = d_input;
        }
        grad_blocks.reverse();

        let mut flat = Vec::with_capacity(self.param_count());
        for (dw, db) in &grad_blocks {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        flat.extend(d_head_weight.iter());
        flat.push(d_head_bias);
        flat
    }
}

fn pooled_dims(input: (usize, usize), n_blocks: usize) -> (usize, usize) {
    (input.0 >> n_blocks, input.1 >> n_blocks)
}

/// 3x3 convolution, stride 1, zero padding 1, via im2col + matmul.
fn conv3x3_same(input: &Array3<f64>, weight: &Array4<f64>, bias: &Array1<f64>) -> Array3<f64> {
    let (c_in, h, w) = input.dim();
    let c_out = weight.shape()[0];
    let cols = im2col(input);
    let w2 = weight
        .view()
        .into_shape_with_order((c_out, c_in * 9))
        .expect("conv weight reshape");
    let mut out2 = w2.dot(&cols);
    for o in 0..c_out {
        out2.row_mut(o).mapv_inplace(|v| v + bias[o]);
    }
    out2.into_shape_with_order((c_out, h, w)).expect("conv output reshape")
}

/// Gradients of [`conv3x3_same`] w.r.t. weight, bias and input.
fn conv3x3_same_backward(
    input: &Array3<f64>,
    weight: &Array4<f64>,
    d_out: &Array3<f64>,
) -> (Array4<f64>, Array1<f64>, Array3<f64>) {
    let (c_in, h, w) = input.dim();
    let c_out = weight.shape()[0];
    let cols = im2col(input);
    let d_out2 = d_out
        .view()
        .into_shape_with_order((c_out, h * w))
        .expect("grad reshape");
    let dw2 = d_out2.dot(&cols.t());
    let dw = dw2
        .into_shape_with_order((c_out, c_in, 3, 3))
        .expect("weight grad reshape");
    let db = Array1::from_shape_fn(c_out, |o| d_out2.row(o).sum());
    let w2 = weight
        .view()
        .into_shape_with_order((c_out, c_in * 9))
        .expect("conv weight reshape");
    let d_cols = w2.t().dot(&d_out2);
    let d_input = col2im(&d_cols, c_in, h, w);
    (dw, db, d_input)
}

/// Unfold 3x3 neighborhoods (zero padded) into a `(C*9, H*W)` matrix.
fn im2col(input: &Array3<f64>) -> Array2<f64> {
    let (c_in, h, w) = input.dim();
    let mut cols = Array2::zeros((c_in * 9, h * w));
    for c in 0..c_in {
        let plane = input.index_axis(Axis(0), c);
        for kr in 0..3usize {
            for kc in 0..3usize {
                let row = c * 9 + kr * 3 + kc;
                for r in 0..h {
                    let sr = r as isize + kr as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    for col in 0..w {
                        let sc = col as isize + kc as isize - 1;
                        if sc < 0 || sc >= w as isize {
                            continue;
                        }
                        cols[[row, r * w + col]] = plane[[sr as usize, sc as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `(C*9, H*W)` gradient matrix back onto the input layout.
fn col2im(d_cols: &Array2<f64>, c_in: usize, h: usize, w: usize) -> Array3<f64> {
    let mut d_input = Array3::zeros((c_in, h, w));
    for c in 0..c_in {
        for kr in 0..3usize {
            for kc in 0..3usize {
                let row = c * 9 + kr * 3 + kc;
                for r in 0..h {
                    let sr = r as isize + kr as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    for col in 0..w {
                        let sc = col as isize + kc as isize - 1;
                        if sc < 0 || sc >= w as isize {
                            continue;
                        }
                        d_input[[c, sr as usize, sc as usize]] += d_cols[[row, r * w + col]];
                    }
                }
            }
        }
    }
    d_input
}

/// 2x2 max pooling with stride 2; the argmax (0..4, row-major within the
/// window) is kept for the backward pass. Ties resolve to the first maximum.
fn max_pool_2x2(input: &Array3<f64>) -> (Array3<f64>, Array3<u8>) {
    let (c, h, w) = input.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    let mut argmax = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0u8;
                for dr in 0..2usize {
                    for dc in 0..2usize {
                        let v = input[[ch, 2 * r + dr, 2 * col + dc]];
                        if v > best {
                            best = v;
                            best_idx = (dr * 2 + dc) as u8;
                        }
                    }
                }
                out[[ch, r, col]] = best;
                argmax[[ch, r, col]] = best_idx;
            }
        }
    }
    (out, argmax)
}

fn max_pool_2x2_backward(d_out: &Array3<f64>, argmax: &Array3<u8>) -> Array3<f64> {
    let (c, oh, ow) = d_out.dim();
    let mut d_input = Array3::zeros((c, oh * 2, ow * 2));
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let idx = argmax[[ch, r, col]] as usize;
                let (dr, dc) = (idx / 2, idx % 2);
                d_input[[ch, 2 * r + dr, 2 * col + dc]] += d_out[[ch, r, col]];
            }
        }
    }
    d_input
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean class-weighted binary cross-entropy over a batch of logits. The
/// positive class term is scaled by `pos_weight`.
pub fn class_weighted_loss(logits: &[f64], labels: &[u8], pos_weight: f64) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::InvalidInput("logits and labels must be nonempty and aligned".into()));
    }
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| {
            if y == 1 {
                pos_weight * softplus(-l)
            } else {
                softplus(l)
            }
        })
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Per-logit gradient of [`class_weighted_loss`].
pub fn class_weighted_loss_grad(logits: &[f64], labels: &[u8], pos_weight: f64) -> Vec<f64> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| {
            let s = sigmoid(l);
            if y == 1 {
                pos_weight * (s - 1.0) / n
            } else {
                s / n
            }
        })
        .collect()
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(param_count: usize, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * self.weight_decay * params[i];
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Cosine-annealed learning rate for epoch `t` of `total`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs <= 1 {
        return base_lr;
    }
    let progress = epoch as f64 / total_epochs as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;
    use rand::Rng;

    fn tiny_config() -> FusionModelConfig {
        FusionModelConfig::new(2, vec![4, 6], (8, 8))
    }

    fn random_input<Rg: Rng>(config: &FusionModelConfig, rng: &mut Rg) -> Array3<f64> {
        Array3::from_shape_fn(
            (config.input_channels, config.input_resolution.0, config.input_resolution.1),
            |_| rng.gen_range(-1.0..1.0),
        )
    }

    #[test]
    fn build_is_deterministic() {
        let a = FusionModel::build(tiny_config(), 42).unwrap();
        let b = FusionModel::build(tiny_config(), 42).unwrap();
        let mut rng = derive_rng(0, "probe");
        let x = random_input(&tiny_config(), &mut rng);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        let c = FusionModel::build(tiny_config(), 43).unwrap();
        assert_ne!(a.forward(&x).unwrap(), c.forward(&x).unwrap());
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let model = FusionModel::build(tiny_config(), 1).unwrap();
        let x = Array3::zeros((3, 8, 8));
        assert!(matches!(model.forward(&x), Err(Error::LayoutMismatch(_))));
    }

    #[test]
    fn too_small_resolution_rejected() {
        let config = FusionModelConfig::new(2, vec![4, 4, 4], (4, 4));
        assert!(matches!(FusionModel::build(config, 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn logit_finite_on_placeholder_range() {
        let model = FusionModel::build(tiny_config(), 7).unwrap();
        let mut rng = derive_rng(7, "finite");
        for _ in 0..10 {
            let x = random_input(&tiny_config(), &mut rng);
            assert!(model.forward(&x).unwrap().is_finite());
        }
        let x = Array3::from_elem((2, 8, 8), -1.0);
        assert!(model.forward(&x).unwrap().is_finite());
    }

    #[test]
    fn params_round_trip() {
        let mut model = FusionModel::build(tiny_config(), 11).unwrap();
        let params = model.params_flat();
        assert_eq!(params.len(), model.param_count());
        let mut shifted = params.clone();
        for v in &mut shifted {
            *v += 0.5;
        }
        model.set_params_flat(&shifted).unwrap();
        assert_eq!(model.params_flat(), shifted);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let loss = class_weighted_loss(&[0.0, 0.0], &[0, 1], 1.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let loss = class_weighted_loss(&[30.0, -30.0], &[1, 0], 2.0).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        let logits = vec![0.3, -0.7, 1.2];
        let labels = vec![1, 0, 1];
        let pos_weight = 1.7;
        let analytic = class_weighted_loss_grad(&logits, &labels, pos_weight);
        let step = 1e-6;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus[i] += step;
            let mut minus = logits.clone();
            minus[i] -= step;
            let numeric = (class_weighted_loss(&plus, &labels, pos_weight).unwrap()
                - class_weighted_loss(&minus, &labels, pos_weight).unwrap())
                / (2.0 * step);
            assert!((analytic[i] - numeric).abs() < 1e-8);
        }
    }

    #[test]
    fn model_gradient_matches_central_differences() {
        // End-to-end check: d(loss)/d(theta) for loss = weighted BCE of the
        // model logit, against central finite differences at step 1e-3.
        let config = FusionModelConfig::new(2, vec![3, 4], (8, 8));
        let mut model = FusionModel::build(config.clone(), 5).unwrap();
        let mut rng = derive_rng(5, "gradcheck");
        let x = random_input(&config, &mut rng);
        let label = 1u8;
        let pos_weight = 1.3;

        let (logit, cache) = model.forward_cached(&x).unwrap();
        let d_logit = class_weighted_loss_grad(&[logit], &[label], pos_weight)[0];
        let analytic = model.backward(&cache, d_logit);

        let params = model.params_flat();
        let step = 1e-3;
        // Spot-check a deterministic sample of coordinates.
        let stride = (params.len() / 25).max(1);
        for i in (0..params.len()).step_by(stride) {
            let mut plus = params.clone();
            plus[i] += step;
            model.set_params_flat(&plus).unwrap();
            let lp = class_weighted_loss(&[model.forward(&x).unwrap()], &[label], pos_weight).unwrap();
            let mut minus = params.clone();
            minus[i] -= step;
            model.set_params_flat(&minus).unwrap();
            let lm = class_weighted_loss(&[model.forward(&x).unwrap()], &[label], pos_weight).unwrap();
            let numeric = (lp - lm) / (2.0 * step);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic[i] - numeric).abs() / denom < 1e-4,
                "param {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
        model.set_params_flat(&params).unwrap();
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut params = vec![1.0, -1.0];
        let grads = vec![0.5, -0.5];
        let mut opt = AdamW::new(2, 0.0);
        opt.step(&mut params, &grads, 0.1);
        assert!(params[0] < 1.0);
        assert!(params[1] > -1.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!(cosine_lr(1.0, 9, 10) < 0.05);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
    }
}
