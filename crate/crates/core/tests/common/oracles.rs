//! Independent reference computations used to check the implementation.
//! Nothing here calls the code paths it is used to verify.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxfuse::model::{softmax_cross_entropy, InputBatch, Mode, ModelConfig, NetworkParameters, SpatialRank};

/// Trainable parameter count from the layer arithmetic alone.
pub fn closed_form_param_count(cfg: &ModelConfig) -> usize {
    let k = cfg.conv_kernel;
    let kvol = match cfg.spatial_rank {
        SpatialRank::ThreeD => k * k * k,
        SpatialRank::TwoD => k * k,
    };
    let mut per_encoder = 0;
    let mut cin = 1;
    for &cout in &cfg.encoder_channels {
        per_encoder += cout * (cin * kvol + 1); // conv weight + bias
        per_encoder += 2 * cout; // bn scale + shift
        cin = cout;
    }
    let head = cfg.head_hidden * (cfg.fused_dim + 1) + cfg.n_classes * (cfg.head_hidden + 1);
    per_encoder * cfg.modalities.len() + head
}

/// ROC-AUC by enumerating every positive/negative pair; ties count 1/2.
pub fn brute_force_auc(truth: &[bool], scores: &[f64]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &ti) in truth.iter().enumerate() {
        if !ti {
            continue;
        }
        for (j, &tj) in truth.iter().enumerate() {
            if tj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose +/- step straddled a ReLU or max-pool kink.
    pub kinked: usize,
    /// Error of plain central differences at the nominal step.
    pub rel_error: f64,
    /// Error after re-evaluating kinked entries at a halved step until the
    /// activation pattern is unchanged on both sides.
    pub rel_error_kink_aware: f64,
}

/// Compare analytic parameter gradients of the training-mode cross-entropy
/// loss with central finite differences. Each tensor is checked on up to
/// `max_entries` evenly spaced entries; errors are
/// `|g_analytic - g_fd| / max(|g_analytic|, |g_fd|, 1e-7)` over that subvector.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    params: &NetworkParameters<f64>,
    input: &[f64],
    batch: usize,
    dims: [usize; 3],
    targets: &[usize],
    step: f64,
    max_entries: usize,
    dropout_seed: u64,
) -> Vec<TensorCheck> {
    let cfg = params.config().clone();
    let channels = cfg.modalities.len();
    let eval = |p: &NetworkParameters<f64>| -> (f64, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let x = InputBatch::new(input, batch, channels, dims);
        let (trace, cache) = p.forward(&x, Mode::Train(&mut rng)).unwrap();
        let loss = softmax_cross_entropy(&trace.logits, cfg.n_classes, targets, None).0;
        (loss, cache.activation_fingerprint())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let x = InputBatch::new(input, batch, channels, dims);
    let (trace, cache) = params.forward(&x, Mode::Train(&mut rng)).unwrap();
    let base_pattern = cache.activation_fingerprint();
    let (_, dlogits) = softmax_cross_entropy(&trace.logits, cfg.n_classes, targets, None);
    let grads = params.backward(&cache, &dlogits, false);

    let mut out = Vec::new();
    let mut work = params.clone();
    for (ti, tensor) in params.tensors().iter().enumerate() {
        if !tensor.trainable() {
            continue;
        }
        let n = tensor.len();
        let stride = (n / max_entries.min(n)).max(1);
        let (mut diff2, mut diff2_ka, mut a2, mut f2, mut f2_ka) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut checked = 0;
        let mut kinked = 0;
        for idx in (0..n).step_by(stride).take(max_entries) {
            let orig = tensor.data[idx];
            let mut central = |h: f64| {
                work.tensors_mut()[ti].data[idx] = orig + h;
                let (up, pu) = eval(&work);
                work.tensors_mut()[ti].data[idx] = orig - h;
                let (down, pd) = eval(&work);
                work.tensors_mut()[ti].data[idx] = orig;
                ((up - down) / (2.0 * h), pu == base_pattern && pd == base_pattern)
            };
            let (fd, clean) = central(step);
            let mut fd_ka = fd;
            if !clean {
                kinked += 1;
                let mut h = step;
                while h > 1e-7 {
                    h *= 0.5;
                    let (v, ok) = central(h);
                    fd_ka = v;
                    if ok {
                        break;
                    }
                }
            }
            let an = grads.params[ti][idx];
            diff2 += (an - fd).powi(2);
            diff2_ka += (an - fd_ka).powi(2);
            a2 += an * an;
            f2 += fd * fd;
            f2_ka += fd_ka * fd_ka;
            checked += 1;
        }
        out.push(TensorCheck {
            name: tensor.name.clone(),
            checked,
            kinked,
            rel_error: diff2.sqrt() / a2.sqrt().max(f2.sqrt()).max(1e-7),
            rel_error_kink_aware: diff2_ka.sqrt() / a2.sqrt().max(f2_ka.sqrt()).max(1e-7),
        });
    }
    out
}
