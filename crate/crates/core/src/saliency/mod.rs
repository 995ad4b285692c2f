//! GradCAM saliency for the late-fusion network.
//!
//! The explained layer is the last convolution block of one modality
//! encoder: after global average pooling the spatial layout is gone, so that
//! block is the last place a class-discriminative map can be read off.

mod overlay;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Dims, InputBatch, Mode, ModelError, NetworkParameters};
use crate::phantom::GroundTruthMasks;
use crate::train::Sample;
use crate::types::{GridError, MaskGrid, Modality, ModalityStack, VolumeGrid};

pub use overlay::{export_overlay, hot_colormap, render_overlay, Plane};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("branch {0} is not part of this model")]
    UnknownBranch(String),
    #[error("target class {class} out of range for {classes} classes")]
    Class { class: usize, classes: usize },
    #[error("saliency grid {saliency:?} does not match {other:?}")]
    Dims { saliency: Dims, other: Dims },
    #[error("{plane} slice {index} out of range (extent {extent})")]
    SliceIndex { plane: &'static str, index: usize, extent: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("cannot write overlay: {0}")]
    Image(#[from] image::ImageError),
}

/// Which encoder to explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SaliencyTarget {
    Branch(Modality),
    /// Average of the per-branch normalized maps, renormalized.
    MeanOfBranches,
}

impl SaliencyTarget {
    pub fn name(self) -> String {
        match self {
            SaliencyTarget::Branch(m) => m.name().to_string(),
            SaliencyTarget::MeanOfBranches => "mean".to_string(),
        }
    }
}

impl std::str::FromStr for SaliencyTarget {
    type Err = SaliencyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("mean") {
            return Ok(SaliencyTarget::MeanOfBranches);
        }
        s.parse::<Modality>().map(SaliencyTarget::Branch).map_err(|_| SaliencyError::UnknownBranch(s.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct SaliencyVolume {
    /// Values in `[0, 1]` on the grid of the explained input.
    pub values: VolumeGrid,
    pub target_class: usize,
    pub target_branch: String,
    pub layer: String,
    /// True when the raw map was identically zero.
    pub degenerate: bool,
}

/// Class-activation map of `target_class` for a single input of
/// `channels x volume(dims)` values (channels in the model's modality order).
///
/// With `A_k` the activations of the branch's last block and `g_k` the
/// gradient of the target logit with respect to them, the raw map is
/// `ReLU(sum_k mean(g_k) * A_k)`. It is resampled trilinearly to `dims` and
/// min-max normalized; an all-zero raw map stays zero and is flagged
/// degenerate.
pub fn gradcam(
    params: &NetworkParameters<f32>,
    input: &[f32],
    dims: Dims,
    spacing: [f64; 3],
    target_class: usize,
    target: SaliencyTarget,
) -> Result<SaliencyVolume, SaliencyError> {
    params.check_finite()?;
    let cfg = params.config();
    if target_class >= cfg.n_classes {
        return Err(SaliencyError::Class { class: target_class, classes: cfg.n_classes });
    }
    let branches: Vec<usize> = match target {
        SaliencyTarget::Branch(m) => vec![cfg
            .modalities
            .iter()
            .position(|&x| x == m)
            .ok_or_else(|| SaliencyError::UnknownBranch(m.name().to_string()))?],
        SaliencyTarget::MeanOfBranches => (0..cfg.modalities.len()).collect(),
    };
    let batch = InputBatch::new(input, 1, cfg.modalities.len(), dims);
    let (trace, cache) = params.forward(&batch, Mode::Eval)?;
    let mut dlogits = vec![0.0f32; cfg.n_classes];
    dlogits[target_class] = 1.0;
    let grads = params.backward(&cache, &dlogits, true);
    let act_grads = grads.activation_grads.expect("activation gradients requested");

    let coarse = trace.last_dims;
    let s = coarse.iter().product::<usize>();
    let mut acc = vec![0.0f64; dims.iter().product()];
    let mut any = false;
    for &m in &branches {
        let raw = cam(&trace.last_activations[m], &act_grads[m], s);
        let fine = resample_trilinear(&raw, coarse, dims);
        if let Some(norm) = min_max(&fine) {
            any = true;
            for (a, v) in acc.iter_mut().zip(norm) {
                *a += v;
            }
        }
    }
    let values = if any { min_max(&acc).unwrap_or_else(|| vec![0.0; acc.len()]) } else { vec![0.0; acc.len()] };
    let layer = match target {
        SaliencyTarget::Branch(m) => format!("encoders.{}.block{}", m.name().to_ascii_lowercase(), cfg.n_blocks() - 1),
        SaliencyTarget::MeanOfBranches => format!("encoders.*.block{}", cfg.n_blocks() - 1),
    };
    Ok(SaliencyVolume {
        values: VolumeGrid::new(dims, spacing, values.into_iter().map(|v| v as f32).collect())?,
        target_class,
        target_branch: target.name(),
        layer,
        degenerate: !any,
    })
}

/// [`gradcam`] on a full modality stack, taking the channels the model uses.
pub fn gradcam_stack(
    params: &NetworkParameters<f32>,
    stack: &ModalityStack,
    target_class: usize,
    target: SaliencyTarget,
) -> Result<SaliencyVolume, SaliencyError> {
    let input = Sample::from_stack(stack, &params.config().modalities, 0).data;
    gradcam(params, &input, stack.dims(), stack.spacing(), target_class, target)
}

/// `ReLU(sum_k alpha_k A_k)` with `alpha_k` the spatial mean of `g_k`.
/// `acts` and `grads` are `channels x s`.
pub fn cam(acts: &[f32], grads: &[f32], s: usize) -> Vec<f64> {
    let mut raw = vec![0.0f64; s];
    for (a, g) in acts.chunks_exact(s).zip(grads.chunks_exact(s)) {
        let alpha = g.iter().map(|&v| v as f64).sum::<f64>() / s as f64;
        for (r, &v) in raw.iter_mut().zip(a) {
            *r += alpha * v as f64;
        }
    }
    for r in &mut raw {
        *r = r.max(0.0);
    }
    raw
}

/// Scale to `[0, 1]` by the range; `None` when the maximum is not positive.
fn min_max(v: &[f64]) -> Option<Vec<f64>> {
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > 0.0) {
        return None;
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let span = hi - lo;
    Some(v.iter().map(|&x| if span > 0.0 { (x - lo) / span } else { 1.0 }).collect())
}

/// Sample positions and weights for one axis, voxel centres aligned.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Separable linear interpolation from `src_dims` to `dst_dims`.
pub fn resample_trilinear(src: &[f64], src_dims: Dims, dst_dims: Dims) -> Vec<f64> {
    let [sx, sy, sz] = src_dims;
    let [dx, dy, dz] = dst_dims;
    let (tx, ty, tz) = (axis_taps(sx, dx), axis_taps(sy, dy), axis_taps(sz, dz));
    let mut a = vec![0.0; dx * sy * sz];
    for row in 0..sy * sz {
        for (x, &(i0, i1, w)) in tx.iter().enumerate() {
            a[x + dx * row] = src[i0 + sx * row] * (1.0 - w) + src[i1 + sx * row] * w;
        }
    }
    let mut b = vec![0.0; dx * dy * sz];
    for z in 0..sz {
        for (y, &(i0, i1, w)) in ty.iter().enumerate() {
            for x in 0..dx {
                b[x + dx * (y + dy * z)] = a[x + dx * (i0 + sy * z)] * (1.0 - w) + a[x + dx * (i1 + sy * z)] * w;
            }
        }
    }
    let plane = dx * dy;
    let mut out = vec![0.0; plane * dz];
    for (z, &(i0, i1, w)) in tz.iter().enumerate() {
        for p in 0..plane {
            out[p + plane * z] = b[p + plane * i0] * (1.0 - w) + b[p + plane * i1] * w;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMean {
    pub mean: f64,
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub brain: RegionMean,
    pub ventricle: RegionMean,
    pub cortex: RegionMean,
    pub outside_brain: RegionMean,
}

impl RegionStats {
    /// Ventricle mean over outside-brain mean; infinite when the outside is
    /// exactly zero and the ventricles are not.
    pub fn ventricle_ratio(&self) -> f64 {
        self.ventricle.mean / self.outside_brain.mean
    }
}

fn region_mean(values: &[f32], mask: impl Iterator<Item = bool>) -> RegionMean {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (&v, m) in values.iter().zip(mask) {
        if m {
            sum += v as f64;
            n += 1;
        }
    }
    RegionMean { mean: if n == 0 { f64::NAN } else { sum / n as f64 }, voxels: n }
}

pub fn region_saliency_stats(saliency: &SaliencyVolume, masks: &GroundTruthMasks) -> Result<RegionStats, SaliencyError> {
    let dims = saliency.values.dims();
    let check = |m: &MaskGrid| {
        if m.dims() == dims {
            Ok(())
        } else {
            Err(SaliencyError::Dims { saliency: dims, other: m.dims() })
        }
    };
    check(&masks.brain)?;
    check(&masks.ventricle)?;
    check(&masks.cortex)?;
    let v = saliency.values.voxels();
    let within = |m: &MaskGrid| region_mean(v, m.as_slice().iter().copied());
    Ok(RegionStats {
        brain: within(&masks.brain),
        ventricle: within(&masks.ventricle),
        cortex: within(&masks.cortex),
        outside_brain: region_mean(v, masks.brain.as_slice().iter().map(|&b| !b)),
    })
}
