//! The classification network: eight convolutional layers and two fully
//! connected layers.
//!
//! Layer sequence (pooling after conv 1, 2, 5, 8; ReLU after every conv and
//! after FC1):
//!
//! ```text
//! conv 5×5 (w) → pool → conv 3×3 (w) → pool
//! → conv 3×3 (2w) ×3 → pool → dropout 0.25
//! → conv 3×3 (2w) ×3 → pool → dropout 0.25
//! → flatten → FC (4w) → dropout 0.5 → FC (num_classes) → softmax
//! ```
//!
//! With the default width `w = 32` this is the 32/64-map, FC-128
//! configuration; `base_width` scales every stage down proportionally so
//! gradient checks can run on a micro network. All convolutions preserve
//! spatial size; the four pooling stages shrink the patch by 16×, so
//! `patch_px` must be divisible by 16.
//!
//! The trained network converts to fully-convolutional form: FC1 becomes a
//! `(patch_px/16)×(patch_px/16)` convolution and FC2 a 1×1 convolution,
//! letting [`Network::fcn_forward`] produce class probabilities on a stride-16
//! grid over an arbitrarily large input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{
    conv2d_backward, conv2d_forward, dropout_backward, dropout_forward, fully_connected_backward,
    fully_connected_forward, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward,
    softmax_cross_entropy, softmax_cross_entropy_backward, Mode,
};
use crate::tensor::{Scalar, Tensor};

/// Input channels: RGB histology images.
pub const IN_CHANNELS: usize = 3;

const N_CONV: usize = 8;
/// Convolutions followed by a 2×2 pooling stage (0-based indices).
const POOL_AFTER: [usize; 4] = [0, 1, 4, 7];

/// Shape of the network, parameterized by class count, patch size, and width.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureConfig {
    /// 20 for the area model, 21 for the combined model with background.
    pub num_classes: usize,
    /// Square patch side in pixels; divisible by 16.
    pub patch_px: usize,
    /// Feature-map width of the first two convolutions (32 for the full
    /// network); later stages use `2·base_width` and FC1 `4·base_width`.
    pub base_width: usize,
    /// Dropout rate after each of the last two pooling stages.
    pub dropout_pool: f64,
    /// Dropout rate between the two fully connected layers.
    pub dropout_fc: f64,
}

impl ArchitectureConfig {
    /// The full-size architecture: 32/64 feature maps, 128 FC units.
    pub fn full(num_classes: usize, patch_px: usize) -> Self {
        ArchitectureConfig {
            num_classes,
            patch_px,
            base_width: 32,
            dropout_pool: 0.25,
            dropout_fc: 0.5,
        }
    }

    /// Proportionally scaled-down network (4/8 maps, 16 FC units) small
    /// enough for finite-difference gradient checks.
    pub fn micro() -> Self {
        ArchitectureConfig {
            num_classes: 2,
            patch_px: 16,
            base_width: 4,
            dropout_pool: 0.25,
            dropout_fc: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.patch_px == 0 || !self.patch_px.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "patch size must be a positive multiple of 16 (four pooling stages), got {}",
                self.patch_px
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base width must be positive".into()));
        }
        for rate in [self.dropout_pool, self.dropout_fc] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!(
                    "dropout rate must be in [0, 1), got {rate}"
                )));
            }
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub values: Tensor<T>,
}

/// All parameters of a network, in fixed architecture order:
/// `conv1.weight, conv1.bias, …, conv8.bias, fc1.weight, fc1.bias,
/// fc2.weight, fc2.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T: Scalar> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn from_entries(entries: Vec<Param<T>>) -> Self {
        NetworkParams { entries }
    }

    pub fn entries(&self) -> &[Param<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param<T>] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.values)
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    values: p.values.cast(),
                })
                .collect(),
        }
    }

    fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.entries[idx].values
    }

    fn vec(&self, idx: usize) -> &[T] {
        self.entries[idx].values.as_slice()
    }
}

// Entry indices in architecture order.
fn conv_w(i: usize) -> usize {
    2 * i
}
fn conv_b(i: usize) -> usize {
    2 * i + 1
}
const FC1_W: usize = 2 * N_CONV;
const FC1_B: usize = FC1_W + 1;
const FC2_W: usize = FC1_W + 2;
const FC2_B: usize = FC1_W + 3;
const N_ENTRIES: usize = FC1_W + 4;

/// Activations cached by a training-mode forward pass, consumed by
/// [`Network::backward`].
pub struct ForwardCache<T: Scalar> {
    conv_inputs: Vec<Tensor<T>>,
    conv_pre: Vec<Tensor<T>>,
    pool_in_shapes: Vec<Vec<usize>>,
    pool_argmax: Vec<Vec<u32>>,
    drop_masks: Vec<Option<Vec<bool>>>,
    fc1_input: Vec<T>,
    fc1_pre: Vec<T>,
    fc2_input: Vec<T>,
    /// Class probabilities of the pass.
    pub probs: Vec<T>,
    /// Cross-entropy loss of the pass.
    pub loss: f64,
    label: usize,
}

/// Network description derived from an [`ArchitectureConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ArchitectureConfig,
}

/// Per-convolution plan: (in channels, out channels, kernel, pad).
type ConvPlan = [(usize, usize, usize, usize); N_CONV];

impl Network {
    pub fn new(config: ArchitectureConfig) -> Result<Self> {
        config.validate()?;
        Ok(Network { config })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    fn conv_plan(&self) -> ConvPlan {
        let w = self.config.base_width;
        let w2 = 2 * w;
        [
            (IN_CHANNELS, w, 5, 2),
            (w, w, 3, 1),
            (w, w2, 3, 1),
            (w2, w2, 3, 1),
            (w2, w2, 3, 1),
            (w2, w2, 3, 1),
            (w2, w2, 3, 1),
            (w2, w2, 3, 1),
        ]
    }

    /// Spatial side of the final feature maps: `patch_px / 16`.
    pub fn final_side(&self) -> usize {
        self.config.patch_px / 16
    }

    /// Flattened input dimension of FC1 (channel-major, row-major within
    /// channel — the tensor's native row-major order).
    pub fn fc1_input_dim(&self) -> usize {
        let s = self.final_side();
        2 * self.config.base_width * s * s
    }

    /// Width of FC1's output (128 for the full network).
    pub fn fc1_output_dim(&self) -> usize {
        4 * self.config.base_width
    }

    /// Parameter names and shapes in architecture order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::with_capacity(N_ENTRIES);
        for (i, &(c_in, c_out, k, _)) in self.conv_plan().iter().enumerate() {
            shapes.push((format!("conv{}.weight", i + 1), vec![c_out, c_in, k, k]));
            shapes.push((format!("conv{}.bias", i + 1), vec![c_out]));
        }
        shapes.push((
            "fc1.weight".into(),
            vec![self.fc1_output_dim(), self.fc1_input_dim()],
        ));
        shapes.push(("fc1.bias".into(), vec![self.fc1_output_dim()]));
        shapes.push((
            "fc2.weight".into(),
            vec![self.config.num_classes, self.fc1_output_dim()],
        ));
        shapes.push(("fc2.bias".into(), vec![self.config.num_classes]));
        shapes
    }

    /// Parameter shapes of the fully-convolutional form: FC1 reinterpreted as
    /// a `(patch/16)³`-volume convolution, FC2 as 1×1.
    pub fn dense_param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = self.param_shapes();
        let s = self.final_side();
        shapes[FC1_W].1 = vec![self.fc1_output_dim(), 2 * self.config.base_width, s, s];
        shapes[FC2_W].1 = vec![self.config.num_classes, self.fc1_output_dim(), 1, 1];
        shapes
    }

    /// Checks that `params` matches this architecture exactly.
    pub fn validate_params<T: Scalar>(&self, params: &NetworkParams<T>) -> Result<()> {
        self.validate_against(params, &self.param_shapes())
    }

    /// Checks `params` against the fully-convolutional shapes.
    pub fn validate_dense_params<T: Scalar>(&self, params: &NetworkParams<T>) -> Result<()> {
        self.validate_against(params, &self.dense_param_shapes())
    }

    fn validate_against<T: Scalar>(
        &self,
        params: &NetworkParams<T>,
        shapes: &[(String, Vec<usize>)],
    ) -> Result<()> {
        if params.entries.len() != shapes.len() {
            return Err(Error::WeightsShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.entries.len()
            )));
        }
        for (param, (name, shape)) in params.entries.iter().zip(shapes) {
            if &param.name != name {
                return Err(Error::WeightsShapeMismatch(format!(
                    "expected tensor '{name}', found '{}'",
                    param.name
                )));
            }
            if param.values.shape() != shape {
                return Err(Error::WeightsShapeMismatch(format!(
                    "tensor '{name}' has shape {:?}, architecture expects {shape:?}",
                    param.values.shape()
                )));
            }
        }
        Ok(())
    }

    /// Initializes parameters: weights from `uniform(−a, a)` with
    /// `a = sqrt(3 / fan_in)` per layer, every bias exactly 0.1.
    pub fn init_params<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> NetworkParams<T> {
        let entries = self
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let values = if name.ends_with(".bias") {
                    Tensor::filled(&shape, T::from_f64(0.1))
                } else {
                    // fan_in: everything but the leading output dimension.
                    let fan_in: usize = shape[1..].iter().product();
                    let a = (3.0 / fan_in as f64).sqrt();
                    let data = (0..shape.iter().product())
                        .map(|_| T::from_f64(rng.random_range(-a..a)))
                        .collect();
                    Tensor::from_vec(&shape, data).unwrap()
                };
                Param { name, values }
            })
            .collect();
        NetworkParams { entries }
    }

    fn check_patch<T: Scalar>(&self, patch: &Tensor<T>) -> Result<()> {
        let p = self.config.patch_px;
        if patch.shape() != [IN_CHANNELS, p, p] {
            return Err(Error::Shape(format!(
                "patch shape {:?} != [{IN_CHANNELS}, {p}, {p}]",
                patch.shape()
            )));
        }
        Ok(())
    }

    /// Which dropout slot (if any) follows pooling stage `j`.
    fn dropout_slot_after_pool(j: usize) -> Option<usize> {
        match j {
            2 => Some(0),
            3 => Some(1),
            _ => None,
        }
    }

    /// Runs the shared convolutional stack. Returns the final feature maps;
    /// fills the cache when one is supplied (training mode).
    fn conv_stack<T: Scalar>(
        &self,
        params: &NetworkParams<T>,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        mut cache: Option<&mut ForwardCache<T>>,
    ) -> Result<Tensor<T>> {
        let plan = self.conv_plan();
        let mut x = input.clone();
        let mut pool_idx = 0;
        for (i, &(_, _, _, pad)) in plan.iter().enumerate() {
            if let Some(c) = cache.as_deref_mut() {
                c.conv_inputs.push(x.clone());
            }
            let pre = conv2d_forward(&x, params.tensor(conv_w(i)), params.vec(conv_b(i)), pad)?;
            x = relu_forward(&pre);
            if let Some(c) = cache.as_deref_mut() {
                c.conv_pre.push(pre);
            }
            if POOL_AFTER.contains(&i) {
                let in_shape = x.shape().to_vec();
                let (pooled, argmax) = maxpool2_forward(&x)?;
                x = pooled;
                if let Some(c) = cache.as_deref_mut() {
                    c.pool_in_shapes.push(in_shape);
                    c.pool_argmax.push(argmax);
                }
                if let Some(slot) = Self::dropout_slot_after_pool(pool_idx) {
                    let (dropped, mask) = dropout_forward(&x, self.config.dropout_pool, rng, mode)?;
                    x = dropped;
                    if let Some(c) = cache.as_deref_mut() {
                        debug_assert_eq!(c.drop_masks.len(), slot);
                        c.drop_masks.push(mask);
                    }
                }
                pool_idx += 1;
            }
        }
        Ok(x)
    }

    /// Runs the fully connected head on flattened features. Returns logits.
    fn fc_head<T: Scalar>(
        &self,
        params: &NetworkParams<T>,
        flat: Vec<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        mut cache: Option<&mut ForwardCache<T>>,
    ) -> Result<Vec<T>> {
        let pre = fully_connected_forward(&flat, params.tensor(FC1_W), params.vec(FC1_B))?;
        if let Some(c) = cache.as_deref_mut() {
            c.fc1_input = flat;
            c.fc1_pre = pre.clone();
        }
        let hidden = Tensor::from_vec(&[pre.len()], pre)?;
        let hidden = relu_forward(&hidden);
        let (hidden, mask) = dropout_forward(&hidden, self.config.dropout_fc, rng, mode)?;
        let hidden = hidden.into_vec();
        let logits = fully_connected_forward(&hidden, params.tensor(FC2_W), params.vec(FC2_B))?;
        if let Some(c) = cache {
            c.drop_masks.push(mask);
            c.fc2_input = hidden;
        }
        Ok(logits)
    }

    /// Forward pass on one patch. Returns class probabilities summing to 1.
    /// Inference mode is deterministic; the RNG is only consulted for
    /// dropout in train mode.
    pub fn forward<T: Scalar>(
        &self,
        params: &NetworkParams<T>,
        patch: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<T>> {
        self.validate_params(params)?;
        self.check_patch(patch)?;
        let features = self.conv_stack(params, patch, mode, rng, None)?;
        let logits = self.fc_head(params, features.into_vec(), mode, rng, None)?;
        let (probs, _) = softmax_cross_entropy(&logits, 0)?;
        Ok(probs)
    }

    /// Cross-entropy loss of one labeled patch in the given mode, without
    /// building a backward cache. The loss is accumulated in f64 and stays
    /// finite even when the label's probability underflows.
    pub fn loss<T: Scalar>(
        &self,
        params: &NetworkParams<T>,
        patch: &Tensor<T>,
        label: usize,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        self.validate_params(params)?;
        self.check_patch(patch)?;
        if label >= self.config.num_classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let features = self.conv_stack(params, patch, mode, rng, None)?;
        let logits = self.fc_head(params, features.into_vec(), mode, rng, None)?;
        let (_, loss) = softmax_cross_entropy(&logits, label)?;
        Ok(loss)
    }

    /// Training-mode forward pass that caches everything the backward pass
    /// needs and computes the cross-entropy loss against `label`.
    pub fn forward_train<T: Scalar>(
        &self,
        params: &NetworkParams<T>,
        patch: &Tensor<T>,
        label: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardCache<T>> {
        self.validate_params(params)?;
        self.check_patch(patch)?;
        if label >= self.config.num_classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let mut cache = ForwardCache {
            conv_inputs: Vec::with_capacity(N_CONV),
            conv_pre: Vec::with_capacity(N_CONV),
            pool_in_shapes: Vec::with_capacity(POOL_AFTER.len()),
            pool_argmax: Vec::with_capacity(POOL_AFTER.len()),
            drop_masks: Vec::with_capacity(3),
            fc1_input: Vec::new(),
            fc1_pre: Vec::new(),
            fc2_input: Vec::new(),
            probs: Vec::new(),
            loss: 0.0,
            label,
        };
        let features = self.conv_stack(params, patch, Mode::Train, rng, Some(&mut cache))?;
        let logits = self.fc_head(
            params,
            features.into_vec(),
            Mode::Train,
            rng,
            Some(&mut cache),
        )?;
        let (probs, loss) = softmax_cross_entropy(&logits, label)?;
        cache.probs = probs;
        cache.loss = loss;
        Ok(cache)
    }

    /// Backward pass from a cached training forward. Returns gradient tensors
    /// aligned with the parameter entries (same order, same shapes).
    pub fn backward<T: Scalar>(
        &self,
        params: &NetworkParams<T>,
        cache: &ForwardCache<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut grads: Vec<Tensor<T>> = self
            .param_shapes()
            .iter()
            .map(|(_, shape)| Tensor::zeros(shape))
            .collect();

        // Loss → logits.
        let dlogits = softmax_cross_entropy_backward(&cache.probs, cache.label)?;

        // FC2.
        let (dhidden, gw2, gb2) =
            fully_connected_backward(&cache.fc2_input, params.tensor(FC2_W), &dlogits)?;
        grads[FC2_W] = gw2;
        grads[FC2_B] = Tensor::from_vec(&[gb2.len()], gb2)?;

        // Dropout between the FC layers, then FC1's ReLU.
        let dhidden = Tensor::from_vec(&[dhidden.len()], dhidden)?;
        let dhidden = dropout_backward(
            &dhidden,
            cache.drop_masks[2].as_deref(),
            self.config.dropout_fc,
        )?;
        let fc1_pre = Tensor::from_vec(&[cache.fc1_pre.len()], cache.fc1_pre.clone())?;
        let dfc1_pre = relu_backward(&fc1_pre, &dhidden)?;

        // FC1 and un-flatten.
        let (dflat, gw1, gb1) =
            fully_connected_backward(&cache.fc1_input, params.tensor(FC1_W), dfc1_pre.as_slice())?;
        grads[FC1_W] = gw1;
        grads[FC1_B] = Tensor::from_vec(&[gb1.len()], gb1)?;
        let s = self.final_side();
        let mut g = Tensor::from_vec(&[2 * self.config.base_width, s, s], dflat)?;

        // Convolutional stack in reverse.
        let plan = self.conv_plan();
        let mut pool_idx = POOL_AFTER.len();
        for i in (0..N_CONV).rev() {
            if POOL_AFTER.contains(&i) {
                pool_idx -= 1;
                if let Some(slot) = Self::dropout_slot_after_pool(pool_idx) {
                    g = dropout_backward(
                        &g,
                        cache.drop_masks[slot].as_deref(),
                        self.config.dropout_pool,
                    )?;
                }
                g = maxpool2_backward(
                    &cache.pool_in_shapes[pool_idx],
                    &cache.pool_argmax[pool_idx],
                    &g,
                )?;
            }
            g = relu_backward(&cache.conv_pre[i], &g)?;
            let (dinput, gw, gb) = conv2d_backward(
                &cache.conv_inputs[i],
                params.tensor(conv_w(i)),
                params.vec(conv_b(i)),
                plan[i].3,
                &g,
            )?;
            grads[conv_w(i)] = gw;
            grads[conv_b(i)] = Tensor::from_vec(&[gb.len()], gb)?;
            g = dinput;
        }
        Ok(grads)
    }

    /// Converts trained patch-model parameters to fully-convolutional form:
    /// `fc1.weight [m, C·s·s]` reshapes to a conv kernel `[m, C, s, s]`
    /// (valid because flattening is channel-major row-major), `fc2.weight`
    /// to `[K, m, 1, 1]`.
    pub fn convert_to_fully_convolutional<T: Scalar>(
        &self,
        params: &NetworkParams<T>,
    ) -> Result<NetworkParams<T>> {
        self.validate_params(params)?;
        let mut dense = params.clone();
        let shapes = self.dense_param_shapes();
        for idx in [FC1_W, FC2_W] {
            let reshaped = dense.entries[idx].values.clone().reshape(&shapes[idx].1)?;
            dense.entries[idx].values = reshaped;
        }
        Ok(dense)
    }

    /// Dense forward pass with fully-convolutional parameters.
    ///
    /// `image` is `[3, H, W]` with `H, W` multiples of 16 and at least
    /// `patch_px`. Returns per-position class probabilities
    /// `[num_classes, gh, gw]` on the stride-16 output grid, where
    /// `gh = (H − patch_px)/16 + 1`; position `(i, j)` equals the patch
    /// forward on the crop at `(16·i, 16·j)`.
    pub fn fcn_forward<T: Scalar>(
        &self,
        dense: &NetworkParams<T>,
        image: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.validate_dense_params(dense)?;
        let shape = image.shape();
        let p = self.config.patch_px;
        if shape.len() != 3 || shape[0] != IN_CHANNELS {
            return Err(Error::Shape(format!(
                "dense input must be [{IN_CHANNELS}, H, W], got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h < p || w < p || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Shape(format!(
                "dense input {h}x{w} must be ≥ patch size {p} and divisible by 16"
            )));
        }
        // Dropout never fires in inference mode; the RNG is untouched.
        let mut rng = crate::rng::derive_rng(0, &[]);
        let features = self.conv_stack(dense, image, Mode::Inference, &mut rng, None)?;

        let hidden = conv2d_forward(&features, dense.tensor(FC1_W), dense.vec(FC1_B), 0)?;
        let hidden = relu_forward(&hidden);
        let logits = conv2d_forward(&hidden, dense.tensor(FC2_W), dense.vec(FC2_B), 0)?;
        softmax_map(&logits)
    }
}

/// Applies a per-position softmax over the channel dimension of a logit map
/// `[K, h, w]`.
pub fn softmax_map<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "logit map must be [K, h, w], got {shape:?}"
        )));
    }
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    let src = logits.as_slice();
    let mut out = Tensor::zeros(shape);
    let dst = out.as_mut_slice();
    let mut column = vec![T::ZERO; k];
    for pos in 0..n {
        for c in 0..k {
            column[c] = src[c * n + pos];
        }
        let (probs, _) = softmax_cross_entropy(&column, 0)?;
        for c in 0..k {
            dst[c * n + pos] = probs[c];
        }
    }
    Ok(out)
}
