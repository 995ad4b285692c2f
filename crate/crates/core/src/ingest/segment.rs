//! Fallback tissue segmentation: a three-component univariate Gaussian
//! mixture fitted to in-mask T1 intensities by expectation-maximization.
//! Components are ordered by mean and read as CSF < GM < WM.

use thiserror::Error;

use crate::types::{GridError, MaskGrid, VolumeGrid};

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("brain mask is empty")]
    EmptyMask,
    #[error("mask dims {mask:?} differ from volume dims {volume:?}")]
    DimsMismatch { mask: [usize; 3], volume: [usize; 3] },
    #[error("degenerate input: {0} distinct intensities inside the mask, need at least 3")]
    Degenerate(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    /// Sorted by ascending mean.
    pub components: [MixtureComponent; 3],
    /// Mean per-sample log-likelihood at convergence.
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl GaussianMixture {
    /// Posterior responsibilities of each component for intensity `x`.
    pub fn posteriors(&self, x: f64) -> [f64; 3] {
        let mut logp = [0.0; 3];
        for (lp, c) in logp.iter_mut().zip(&self.components) {
            *lp = log_weighted_density(x, c);
        }
        let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = logp.map(|l| (l - max).exp());
        let z: f64 = p.iter().sum();
        for v in &mut p {
            *v /= z;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TissueMaps {
    pub gm: VolumeGrid,
    pub wm: VolumeGrid,
    pub csf: VolumeGrid,
    pub mixture: GaussianMixture,
}

fn log_weighted_density(x: f64, c: &MixtureComponent) -> f64 {
    let d = x - c.mean;
    c.weight.ln() - 0.5 * (2.0 * std::f64::consts::PI * c.variance).ln() - d * d / (2.0 * c.variance)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fit the mixture. Initialization is deterministic: means at the 10th,
/// 50th and 90th percentiles, equal weights, and the pooled within-group
/// variance of the partition induced by those means.
pub fn fit_mixture(values: &[f64]) -> Result<GaussianMixture, SegmentationError> {
    if values.is_empty() {
        return Err(SegmentationError::EmptyMask);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut distinct = 1;
    for w in sorted.windows(2) {
        if w[1] != w[0] {
            distinct += 1;
            if distinct >= 3 {
                break;
            }
        }
    }
    if distinct < 3 {
        return Err(SegmentationError::Degenerate(distinct));
    }

    let n = values.len() as f64;
    let total_mean = values.iter().sum::<f64>() / n;
    let total_var = values.iter().map(|v| (v - total_mean).powi(2)).sum::<f64>() / n;
    let var_floor = (total_var * 1e-8).max(1e-12);

    let means = [quantile(&sorted, 0.10), quantile(&sorted, 0.50), quantile(&sorted, 0.90)];
    let mut ss = 0.0;
    for &v in values {
        let nearest = means
            .iter()
            .map(|m| (v - m).abs())
            .fold(f64::INFINITY, f64::min);
        ss += nearest * nearest;
    }
    let pooled = (ss / n).max(var_floor);
    let mut comps = means.map(|mean| MixtureComponent { weight: 1.0 / 3.0, mean, variance: pooled });

    let mut resp = vec![[0.0f64; 3]; values.len()];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut ll = prev_ll;
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..MAX_ITERATIONS {
        iterations = it + 1;
        // E step
        let mut total = 0.0;
        for (r, &x) in resp.iter_mut().zip(values) {
            let mut logp = [0.0; 3];
            for (lp, c) in logp.iter_mut().zip(&comps) {
                *lp = log_weighted_density(x, c);
            }
            let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (ri, lp) in r.iter_mut().zip(logp) {
                *ri = (lp - max).exp();
                z += *ri;
            }
            for ri in r.iter_mut() {
                *ri /= z;
            }
            total += max + z.ln();
        }
        ll = total / n;

        // M step
        for (k, c) in comps.iter_mut().enumerate() {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk <= 1e-12 {
                continue;
            }
            let mean = resp.iter().zip(values).map(|(r, &x)| r[k] * x).sum::<f64>() / nk;
            let var = resp.iter().zip(values).map(|(r, &x)| r[k] * (x - mean).powi(2)).sum::<f64>() / nk;
            *c = MixtureComponent { weight: nk / n, mean, variance: var.max(var_floor) };
        }

        if (ll - prev_ll).abs() < TOLERANCE {
            converged = true;
            break;
        }
        prev_ll = ll;
    }
    comps.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    Ok(GaussianMixture { components: comps, log_likelihood: ll, iterations, converged })
}

/// Segment a T1 volume into GM/WM/CSF posterior maps inside `brain_mask`;
/// voxels outside the mask get zero in all three maps.
pub fn fallback_tissue_segmentation(t1: &VolumeGrid, brain_mask: &MaskGrid) -> Result<TissueMaps, SegmentationError> {
    if brain_mask.dims() != t1.dims() {
        return Err(SegmentationError::DimsMismatch { mask: brain_mask.dims(), volume: t1.dims() });
    }
    let values: Vec<f64> = t1
        .voxels()
        .iter()
        .zip(brain_mask.as_slice())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .collect();
    if values.is_empty() {
        return Err(SegmentationError::EmptyMask);
    }
    let mixture = fit_mixture(&values)?;
    let n = t1.len();
    let (mut csf, mut gm, mut wm) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
    for (i, (&v, &m)) in t1.voxels().iter().zip(brain_mask.as_slice()).enumerate() {
        if m {
            let p = mixture.posteriors(v as f64);
            csf[i] = p[0] as f32;
            gm[i] = p[1] as f32;
            wm[i] = p[2] as f32;
        }
    }
    let grid = |v| VolumeGrid::new(t1.dims(), t1.spacing(), v);
    Ok(TissueMaps { gm: grid(gm)?, wm: grid(wm)?, csf: grid(csf)?, mixture })
}
