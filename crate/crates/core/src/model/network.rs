use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::kernels::{col2im, dot, im2col, max_pool, max_pool_backward, pooled_dims, transpose, volume, Dims, Real};
use super::{ModelConfig, ModelError};

// tensor slots within one encoder block
const CONV_W: usize = 0;
const CONV_B: usize = 1;
const BN_GAMMA: usize = 2;
const BN_BETA: usize = 3;
const BN_MEAN: usize = 4;
const BN_VAR: usize = 5;
const PER_BLOCK: usize = 6;

/// Patch-matrix height below which weight gradients use dot products.
const NARROW_PATCH: usize = 64;

const FC1_W: usize = 0;
const FC1_B: usize = 1;
const FC2_W: usize = 2;
const FC2_B: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl TensorKind {
    pub fn trainable(self) -> bool {
        !matches!(self, TensorKind::RunningMean | TensorKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub data: Vec<T>,
}

impl<T> ParamTensor<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn trainable(&self) -> bool {
        self.kind.trainable()
    }
}

/// Learned weights, biases and batch-norm statistics, addressed by stable
/// names such as `encoders.csf.block1.conv.weight` or `head.fc2.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParameters<T> {
    config: ModelConfig,
    tensors: Vec<ParamTensor<T>>,
}

/// A batch laid out as `batch x channels x volume(dims)`.
#[derive(Debug, Clone, Copy)]
pub struct InputBatch<'a, T> {
    pub data: &'a [T],
    pub batch: usize,
    pub channels: usize,
    pub dims: Dims,
}

impl<'a, T> InputBatch<'a, T> {
    pub fn new(data: &'a [T], batch: usize, channels: usize, dims: Dims) -> Self {
        InputBatch { data, batch, channels, dims }
    }
}

pub enum Mode<'a> {
    /// Batch statistics in batch norm, dropout drawn from the given generator.
    Train(&'a mut ChaCha8Rng),
    /// Running statistics in batch norm, dropout disabled.
    Eval,
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub batch: usize,
    pub n_classes: usize,
    /// `batch x n_classes`
    pub logits: Vec<T>,
    /// One `batch x embedding_dim` buffer per modality.
    pub embeddings: Vec<Vec<T>>,
    /// Post-ReLU output of each encoder's last block, `batch x channels x volume(last_dims)`.
    pub last_activations: Vec<Vec<T>>,
    pub last_dims: Dims,
}

/// Per-block batch statistics from a training-mode pass.
#[derive(Debug, Clone)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    dims: Dims,
    input: Vec<T>,
    xhat: Vec<T>,
    activated: Vec<T>,
    inv_std: Vec<T>,
    argmax: Option<Vec<u32>>,
    stats: Option<BatchNormStats<T>>,
}

/// Intermediate values retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    train: bool,
    batch: usize,
    encoders: Vec<Vec<BlockCache<T>>>,
    fused: Vec<T>,
    hidden: Vec<T>,
    dropout_mask: Option<Vec<T>>,
    dropped: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Fingerprint of the piecewise-linear region the pass landed in: every
    /// ReLU sign and max-pool winner. Two passes share a fingerprint only if
    /// no kink lies between them (up to hash collisions).
    pub fn activation_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for blocks in &self.encoders {
            for blk in blocks {
                for chunk in blk.activated.chunks(64) {
                    let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, v)| acc | (((*v > T::zero()) as u64) << i));
                    bits.hash(&mut h);
                }
                if let Some(arg) = &blk.argmax {
                    arg.hash(&mut h);
                }
            }
        }
        for v in &self.hidden {
            (*v > T::zero()).hash(&mut h);
        }
        h.finish()
    }
}

/// Gradients aligned with [`NetworkParameters::tensors`]; running-statistic
/// slots stay empty.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<Vec<T>>,
    /// Gradient of the loss with respect to each encoder's last-block
    /// activation, when requested.
    pub activation_grads: Option<Vec<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &NetworkParameters<T>) -> Self {
        Gradients {
            params: params
                .tensors
                .iter()
                .map(|t| if t.trainable() { vec![T::zero(); t.len()] } else { Vec::new() })
                .collect(),
            activation_grads: None,
        }
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|v| v.is_finite())
    }
}

fn he_normal<T: Real>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect()
}

impl<T: Real> NetworkParameters<T> {
    /// Allocate and initialize every tensor. Weights are drawn from a
    /// fan-in-scaled normal (ReLU gain), biases and shifts start at zero,
    /// batch-norm scales and running variances at one.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kvol = volume(config.kernel_dims());
        let mut tensors = Vec::new();
        for modality in &config.modalities {
            let prefix = format!("encoders.{}", modality.name().to_ascii_lowercase());
            let mut cin = 1;
            for (j, &cout) in config.encoder_channels.iter().enumerate() {
                let block = format!("{prefix}.block{j}");
                let fan_in = cin * kvol;
                tensors.push(ParamTensor {
                    name: format!("{block}.conv.weight"),
                    shape: weight_shape(cout, cin, config),
                    kind: TensorKind::Weight,
                    data: he_normal(&mut rng, cout * fan_in, fan_in),
                });
                tensors.push(ParamTensor {
                    name: format!("{block}.conv.bias"),
                    shape: vec![cout],
                    kind: TensorKind::Bias,
                    data: vec![T::zero(); cout],
                });
                for (suffix, kind, init) in [
                    ("bn.weight", TensorKind::BnScale, T::one()),
                    ("bn.bias", TensorKind::BnShift, T::zero()),
                    ("bn.running_mean", TensorKind::RunningMean, T::zero()),
                    ("bn.running_var", TensorKind::RunningVar, T::one()),
                ] {
                    tensors.push(ParamTensor {
                        name: format!("{block}.{suffix}"),
                        shape: vec![cout],
                        kind,
                        data: vec![init; cout],
                    });
                }
                cin = cout;
            }
        }
        for (name, fan_in, fan_out) in [
            ("fc1", config.fused_dim, config.head_hidden),
            ("fc2", config.head_hidden, config.n_classes),
        ] {
            tensors.push(ParamTensor {
                name: format!("head.{name}.weight"),
                shape: vec![fan_out, fan_in],
                kind: TensorKind::Weight,
                data: he_normal(&mut rng, fan_out * fan_in, fan_in),
            });
            tensors.push(ParamTensor {
                name: format!("head.{name}.bias"),
                shape: vec![fan_out],
                kind: TensorKind::Bias,
                data: vec![T::zero(); fan_out],
            });
        }
        Ok(NetworkParameters { config: config.clone(), tensors })
    }

    /// Reassemble parameters from named tensors, checking every name and
    /// shape against the layout implied by `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self, ModelError> {
        let mut params = Self::build(config, 0)?;
        let mut by_name: std::collections::HashMap<String, (Vec<usize>, Vec<T>)> =
            named.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
        for t in &mut params.tensors {
            let (shape, data) = by_name
                .remove(&t.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor `{}`", t.name)))?;
            if shape != t.shape || data.len() != t.len() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    t.name, shape, t.shape
                )));
            }
            t.data = data;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ModelError::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        params.check_finite()?;
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[ParamTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable()).map(|t| t.len()).sum()
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        match self.tensors.iter().find(|t| t.data.iter().any(|v| !v.is_finite())) {
            Some(t) => Err(ModelError::NonFinite(t.name.clone())),
            None => Ok(()),
        }
    }

    pub fn cast<U: Real>(&self) -> NetworkParameters<U> {
        NetworkParameters {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    kind: t.kind,
                    data: t.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
                })
                .collect(),
        }
    }

    fn block_index(&self, encoder: usize, block: usize) -> usize {
        (encoder * self.config.n_blocks() + block) * PER_BLOCK
    }

    fn head_index(&self) -> usize {
        self.config.modalities.len() * self.config.n_blocks() * PER_BLOCK
    }

    fn validate_input(&self, input: &InputBatch<'_, T>) -> Result<(), ModelError> {
        let cfg = &self.config;
        if input.channels != cfg.modalities.len() {
            return Err(ModelError::Shape(format!(
                "expected {} input channels, got {}",
                cfg.modalities.len(),
                input.channels
            )));
        }
        if input.batch == 0 {
            return Err(ModelError::Shape("empty batch".into()));
        }
        let min = cfg.min_spatial_extent();
        let pool = cfg.pool_dims();
        for axis in 0..3 {
            let needed = if pool[axis] > 1 { min } else { 1 };
            if input.dims[axis] < needed {
                return Err(ModelError::Shape(format!(
                    "spatial dims {:?} too small: axis {axis} needs at least {needed}",
                    input.dims
                )));
            }
        }
        if cfg.spatial_rank == super::SpatialRank::TwoD && input.dims[2] != 1 {
            return Err(ModelError::Shape(format!("2D model expects z extent 1, got {:?}", input.dims)));
        }
        let expected = input.batch * input.channels * volume(input.dims);
        if input.data.len() != expected {
            return Err(ModelError::Shape(format!(
                "input buffer holds {} values, expected {expected}",
                input.data.len()
            )));
        }
        Ok(())
    }

    /// Inference without retaining backward caches (eval mode).
    pub fn infer(&self, input: &InputBatch<'_, T>) -> Result<ForwardTrace<T>, ModelError> {
        self.run_forward(input, Mode::Eval, false).map(|(trace, _)| trace)
    }

    /// Forward pass retaining everything [`Self::backward`] needs.
    pub fn forward(&self, input: &InputBatch<'_, T>, mode: Mode<'_>) -> Result<(ForwardTrace<T>, ForwardCache<T>), ModelError> {
        self.run_forward(input, mode, true).map(|(trace, cache)| (trace, cache.expect("cache requested")))
    }

    fn run_forward(
        &self,
        input: &InputBatch<'_, T>,
        mut mode: Mode<'_>,
        keep: bool,
    ) -> Result<(ForwardTrace<T>, Option<ForwardCache<T>>), ModelError> {
        self.validate_input(input)?;
        let cfg = &self.config;
        let train = mode.is_train();
        let batch = input.batch;
        let s_in = volume(input.dims);
        let n_mod = cfg.modalities.len();

        let mut embeddings = Vec::with_capacity(n_mod);
        let mut last_activations = Vec::with_capacity(n_mod);
        let mut encoder_caches = Vec::with_capacity(n_mod);
        let mut last_dims = input.dims;
        for m in 0..n_mod {
            let mut x = Vec::with_capacity(batch * s_in);
            for b in 0..batch {
                let off = (b * n_mod + m) * s_in;
                x.extend_from_slice(&input.data[off..off + s_in]);
            }
            let (emb, act, dims, caches) = self.encoder_forward(m, x, input.dims, batch, train, keep);
            embeddings.push(emb);
            last_activations.push(act);
            encoder_caches.push(caches);
            last_dims = dims;
        }

        // fuse: batch x (n_mod * emb)
        let e = cfg.embedding_dim;
        let f = cfg.fused_dim;
        let mut fused = vec![T::zero(); batch * f];
        for b in 0..batch {
            for (m, emb) in embeddings.iter().enumerate() {
                fused[b * f + m * e..b * f + (m + 1) * e].copy_from_slice(&emb[b * e..(b + 1) * e]);
            }
        }

        let h = cfg.head_hidden;
        let hi = self.head_index();
        let mut hidden = vec![T::zero(); batch * h];
        linear_forward(&fused, batch, f, &self.tensors[hi + FC1_W].data, &self.tensors[hi + FC1_B].data, h, &mut hidden);
        for v in &mut hidden {
            *v = v.max(T::zero());
        }
        let (dropped, dropout_mask) = match &mut mode {
            Mode::Train(rng) if cfg.dropout_p > 0.0 => {
                let scale = T::lit(1.0 / (1.0 - cfg.dropout_p));
                let mask: Vec<T> = (0..hidden.len())
                    .map(|_| if rng.gen::<f64>() < cfg.dropout_p { T::zero() } else { scale })
                    .collect();
                (hidden.iter().zip(&mask).map(|(&a, &m)| a * m).collect(), Some(mask))
            }
            _ => (hidden.clone(), None),
        };
        let nc = cfg.n_classes;
        let mut logits = vec![T::zero(); batch * nc];
        linear_forward(&dropped, batch, h, &self.tensors[hi + FC2_W].data, &self.tensors[hi + FC2_B].data, nc, &mut logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("logits".into()));
        }

        let trace = ForwardTrace { batch, n_classes: nc, logits, embeddings, last_activations, last_dims };
        let cache = keep.then(|| ForwardCache {
            train,
            batch,
            encoders: encoder_caches,
            fused,
            hidden,
            dropout_mask,
            dropped,
        });
        Ok((trace, cache))
    }

    #[allow(clippy::type_complexity)]
    fn encoder_forward(
        &self,
        m: usize,
        mut x: Vec<T>,
        mut dims: Dims,
        batch: usize,
        train: bool,
        keep: bool,
    ) -> (Vec<T>, Vec<T>, Dims, Vec<BlockCache<T>>) {
        let cfg = &self.config;
        let kernel = cfg.kernel_dims();
        let pool = cfg.pool_dims();
        let kvol = volume(kernel);
        let n_blocks = cfg.n_blocks();
        let eps = T::lit(cfg.bn_eps);
        let mut caches = Vec::new();
        let mut cin = 1;
        for j in 0..n_blocks {
            let cout = cfg.encoder_channels[j];
            let s = volume(dims);
            let base = self.block_index(m, j);
            let w = &self.tensors[base + CONV_W].data;
            let bias = &self.tensors[base + CONV_B].data;

            let mut y = vec![T::zero(); batch * cout * s];
            let mut col = vec![T::zero(); cin * kvol * s];
            for b in 0..batch {
                im2col(&x[b * cin * s..(b + 1) * cin * s], cin, dims, kernel, &mut col);
                let yb = &mut y[b * cout * s..(b + 1) * cout * s];
                T::gemm(cout, cin * kvol, s, T::one(), w, false, &col, false, T::zero(), yb);
                for (c, row) in yb.chunks_exact_mut(s).enumerate() {
                    for v in row {
                        *v += bias[c];
                    }
                }
            }
            drop(col);

            // batch norm
            let gamma = &self.tensors[base + BN_GAMMA].data;
            let beta = &self.tensors[base + BN_BETA].data;
            let n = batch * s;
            let (mean, var, stats) = if train {
                let mut mean = vec![T::zero(); cout];
                let mut var = vec![T::zero(); cout];
                for c in 0..cout {
                    let mut acc = 0.0f64;
                    for b in 0..batch {
                        acc += y[(b * cout + c) * s..(b * cout + c + 1) * s].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                    }
                    let mu = acc / n as f64;
                    let mut sq = 0.0f64;
                    for b in 0..batch {
                        sq += y[(b * cout + c) * s..(b * cout + c + 1) * s]
                            .iter()
                            .map(|v| {
                                let d = v.to_f64().unwrap() - mu;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[c] = T::lit(mu);
                    var[c] = T::lit(sq / n as f64);
                }
                let stats = BatchNormStats { mean: mean.clone(), var: var.clone(), count: n };
                (mean, var, Some(stats))
            } else {
                (
                    self.tensors[base + BN_MEAN].data.clone(),
                    self.tensors[base + BN_VAR].data.clone(),
                    None,
                )
            };
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut xhat = if keep { vec![T::zero(); y.len()] } else { Vec::new() };
            for b in 0..batch {
                for c in 0..cout {
                    let range = (b * cout + c) * s..(b * cout + c + 1) * s;
                    let (mu, is, g, bt) = (mean[c], inv_std[c], gamma[c], beta[c]);
                    if keep {
                        for (xh, v) in xhat[range.clone()].iter_mut().zip(&mut y[range]) {
                            *xh = (*v - mu) * is;
                            *v = (g * *xh + bt).max(T::zero());
                        }
                    } else {
                        for v in &mut y[range] {
                            *v = (g * (*v - mu) * is + bt).max(T::zero());
                        }
                    }
                }
            }

            let is_last = j + 1 == n_blocks;
            if is_last {
                let inv = T::one() / T::lit(s as f64);
                let mut emb = vec![T::zero(); batch * cout];
                for (e, row) in emb.iter_mut().zip(y.chunks_exact(s)) {
                    *e = row.iter().copied().sum::<T>() * inv;
                }
                if keep {
                    caches.push(BlockCache {
                        dims,
                        input: x,
                        xhat,
                        activated: y.clone(),
                        inv_std,
                        argmax: None,
                        stats,
                    });
                }
                return (emb, y, dims, caches);
            }

            let od = pooled_dims(dims, pool);
            let so = volume(od);
            let mut pooled = vec![T::zero(); batch * cout * so];
            let mut argmax = vec![0u32; batch * cout * so];
            max_pool(&y, batch * cout, dims, pool, &mut pooled, &mut argmax);
            if keep {
                caches.push(BlockCache {
                    dims,
                    input: x,
                    xhat,
                    activated: y,
                    inv_std,
                    argmax: Some(argmax),
                    stats,
                });
            }
            x = pooled;
            dims = od;
            cin = cout;
        }
        unreachable!("encoder has at least one block")
    }

    /// Backpropagate `dlogits` (gradient of the loss with respect to the
    /// logits, `batch x n_classes`) through the cached pass.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T], want_activation_grads: bool) -> Gradients<T> {
        let cfg = &self.config;
        let batch = cache.batch;
        let nc = cfg.n_classes;
        let h = cfg.head_hidden;
        let f = cfg.fused_dim;
        let e = cfg.embedding_dim;
        let hi = self.head_index();
        assert_eq!(dlogits.len(), batch * nc, "dlogits shape");
        let mut grads = Gradients::zeros_like(self);

        // fc2
        T::gemm(nc, batch, h, T::one(), dlogits, true, &cache.dropped, false, T::zero(), &mut grads.params[hi + FC2_W]);
        column_sums(dlogits, batch, nc, &mut grads.params[hi + FC2_B]);
        let mut dh = vec![T::zero(); batch * h];
        T::gemm(batch, nc, h, T::one(), dlogits, false, &self.tensors[hi + FC2_W].data, false, T::zero(), &mut dh);
        if let Some(mask) = &cache.dropout_mask {
            for (g, m) in dh.iter_mut().zip(mask) {
                *g *= *m;
            }
        }
        for (g, &a) in dh.iter_mut().zip(&cache.hidden) {
            if a <= T::zero() {
                *g = T::zero();
            }
        }
        // fc1
        T::gemm(h, batch, f, T::one(), &dh, true, &cache.fused, false, T::zero(), &mut grads.params[hi + FC1_W]);
        column_sums(&dh, batch, h, &mut grads.params[hi + FC1_B]);
        let mut dfused = vec![T::zero(); batch * f];
        T::gemm(batch, h, f, T::one(), &dh, false, &self.tensors[hi + FC1_W].data, false, T::zero(), &mut dfused);

        let mut activation_grads = want_activation_grads.then(Vec::new);
        for (m, blocks) in cache.encoders.iter().enumerate() {
            let mut demb = vec![T::zero(); batch * e];
            for b in 0..batch {
                demb[b * e..(b + 1) * e].copy_from_slice(&dfused[b * f + m * e..b * f + (m + 1) * e]);
            }
            let act_grad = self.encoder_backward(m, blocks, batch, cache.train, &demb, &mut grads);
            if let Some(list) = activation_grads.as_mut() {
                list.push(act_grad);
            }
        }
        grads.activation_grads = activation_grads;
        grads
    }

    /// Returns the gradient with respect to the last block's activation.
    fn encoder_backward(
        &self,
        m: usize,
        blocks: &[BlockCache<T>],
        batch: usize,
        train: bool,
        demb: &[T],
        grads: &mut Gradients<T>,
    ) -> Vec<T> {
        let cfg = &self.config;
        let kernel = cfg.kernel_dims();
        let kvol = volume(kernel);
        let n_blocks = blocks.len();
        let last = &blocks[n_blocks - 1];
        let s_last = volume(last.dims);
        let c_last = cfg.encoder_channels[n_blocks - 1];
        let inv = T::one() / T::lit(s_last as f64);
        let mut d = vec![T::zero(); batch * c_last * s_last];
        for (row, &g) in d.chunks_exact_mut(s_last).zip(demb) {
            row.fill(g * inv);
        }
        let act_grad = d.clone();

        for j in (0..n_blocks).rev() {
            let blk = &blocks[j];
            let cout = cfg.encoder_channels[j];
            let cin = if j == 0 { 1 } else { cfg.encoder_channels[j - 1] };
            let s = volume(blk.dims);
            let base = self.block_index(m, j);

            // d currently holds the gradient w.r.t. this block's output
            // (post-pool for non-last blocks).
            let mut dy = if let Some(argmax) = &blk.argmax {
                let so = d.len() / (batch * cout);
                let mut up = vec![T::zero(); batch * cout * s];
                max_pool_backward(&d, argmax, batch * cout, s, so, &mut up);
                up
            } else {
                d
            };
            for (g, &a) in dy.iter_mut().zip(&blk.activated) {
                if a <= T::zero() {
                    *g = T::zero();
                }
            }

            // batch norm
            let gamma = &self.tensors[base + BN_GAMMA].data;
            let n = T::lit((batch * s) as f64);
            for c in 0..cout {
                let mut sum_dy = T::zero();
                let mut sum_dy_xhat = T::zero();
                for b in 0..batch {
                    let r = (b * cout + c) * s..(b * cout + c + 1) * s;
                    for (g, xh) in dy[r.clone()].iter().zip(&blk.xhat[r]) {
                        sum_dy += *g;
                        sum_dy_xhat += *g * *xh;
                    }
                }
                grads.params[base + BN_GAMMA][c] = sum_dy_xhat;
                grads.params[base + BN_BETA][c] = sum_dy;
                let k = gamma[c] * blk.inv_std[c];
                for b in 0..batch {
                    let r = (b * cout + c) * s..(b * cout + c + 1) * s;
                    if train {
                        let mean_dy = sum_dy / n;
                        let mean_dy_xhat = sum_dy_xhat / n;
                        for (g, xh) in dy[r.clone()].iter_mut().zip(&blk.xhat[r]) {
                            *g = k * (*g - mean_dy - *xh * mean_dy_xhat);
                        }
                    } else {
                        for g in &mut dy[r] {
                            *g *= k;
                        }
                    }
                }
            }

            // convolution
            let w = &self.tensors[base + CONV_W].data;
            let kk = cin * kvol;
            // The weight gradient contracts over the long spatial axis. A
            // narrow patch matrix (first block) is cheapest as row dot
            // products; otherwise a transposed copy keeps GEMM packing
            // contiguous.
            let narrow = kk < NARROW_PATCH;
            let mut col = vec![T::zero(); kk * s];
            let mut col_t = if narrow { Vec::new() } else { vec![T::zero(); kk * s] };
            let mut dx = if j > 0 { vec![T::zero(); batch * cin * s] } else { Vec::new() };
            let mut dcol = if j > 0 { vec![T::zero(); kk * s] } else { Vec::new() };
            for b in 0..batch {
                let dyb = &dy[b * cout * s..(b + 1) * cout * s];
                im2col(&blk.input[b * cin * s..(b + 1) * cin * s], cin, blk.dims, kernel, &mut col);
                let dw = &mut grads.params[base + CONV_W];
                if narrow {
                    for (co, g) in dyb.chunks_exact(s).enumerate() {
                        for (r, patch) in col.chunks_exact(s).enumerate() {
                            dw[co * kk + r] += dot(g, patch);
                        }
                    }
                } else {
                    transpose(&col, kk, s, &mut col_t);
                    T::gemm(cout, s, kk, T::one(), dyb, false, &col_t, false, T::one(), dw);
                }
                for (c, row) in dyb.chunks_exact(s).enumerate() {
                    grads.params[base + CONV_B][c] += row.iter().copied().sum::<T>();
                }
                if j > 0 {
                    T::gemm(kk, cout, s, T::one(), w, true, dyb, false, T::zero(), &mut dcol);
                    col2im(&dcol, cin, blk.dims, kernel, &mut dx[b * cin * s..(b + 1) * cin * s]);
                }
            }
            d = dx;
        }
        act_grad
    }

    /// Fold training-mode batch statistics into the running estimates:
    /// `running = (1 - momentum) * running + momentum * batch`, with the
    /// variance unbiased by `n / (n - 1)`.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        if !cache.train {
            return;
        }
        let momentum = T::lit(self.config.bn_momentum);
        for (m, blocks) in cache.encoders.iter().enumerate() {
            for (j, blk) in blocks.iter().enumerate() {
                let Some(stats) = &blk.stats else { continue };
                let base = self.block_index(m, j);
                let unbias = if stats.count > 1 {
                    T::lit(stats.count as f64 / (stats.count - 1) as f64)
                } else {
                    T::one()
                };
                for (r, &v) in self.tensors[base + BN_MEAN].data.iter_mut().zip(&stats.mean) {
                    *r = (T::one() - momentum) * *r + momentum * v;
                }
                for (r, &v) in self.tensors[base + BN_VAR].data.iter_mut().zip(&stats.var) {
                    *r = (T::one() - momentum) * *r + momentum * v * unbias;
                }
            }
        }
    }
}

fn weight_shape(cout: usize, cin: usize, config: &ModelConfig) -> Vec<usize> {
    let k = config.conv_kernel;
    match config.spatial_rank {
        super::SpatialRank::ThreeD => vec![cout, cin, k, k, k],
        super::SpatialRank::TwoD => vec![cout, cin, k, k],
    }
}

/// `out = x * w^T + b` with `x: rows x inp`, `w: outp x inp`.
fn linear_forward<T: Real>(x: &[T], rows: usize, inp: usize, w: &[T], b: &[T], outp: usize, out: &mut [T]) {
    T::gemm(rows, inp, outp, T::one(), x, false, w, true, T::zero(), out);
    for row in out.chunks_exact_mut(outp) {
        for (v, &bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
}

fn column_sums<T: Real>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    out.fill(T::zero());
    for row in x.chunks_exact(cols).take(rows) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Row-wise softmax of a `rows x classes` logit buffer.
pub fn softmax<T: Real>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Mean (optionally class-weighted) cross-entropy and its gradient with
/// respect to the logits. With weights, the loss is
/// `sum_i w[y_i] * ce_i / sum_i w[y_i]`.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], classes: usize, targets: &[usize], class_weights: Option<&[f64]>) -> (f64, Vec<T>) {
    let probs = softmax(logits, classes);
    let weights: Vec<f64> = targets
        .iter()
        .map(|&t| class_weights.map_or(1.0, |w| w[t]))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
        let p = probs[i * classes + t].to_f64().unwrap().max(1e-300);
        loss -= w * p.ln();
        grad[i * classes + t] -= T::one();
        let scale = T::lit(w / total);
        for g in &mut grad[i * classes..(i + 1) * classes] {
            *g *= scale;
        }
    }
    (loss / total, grad)
}
