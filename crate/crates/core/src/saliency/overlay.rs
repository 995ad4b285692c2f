use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{SaliencyError, SaliencyVolume};
use crate::types::VolumeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    /// Fixed z; image is X wide and Y tall.
    Axial,
    /// Fixed y; image is X wide and Z tall, superior at the top.
    Coronal,
    /// Fixed x; image is Y wide and Z tall, superior at the top.
    Sagittal,
}

impl Plane {
    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }

    fn extent(self, dims: [usize; 3]) -> usize {
        match self {
            Plane::Axial => dims[2],
            Plane::Coronal => dims[1],
            Plane::Sagittal => dims[0],
        }
    }

    /// Image size and the voxel behind pixel `(col, row)`.
    fn layout(self, dims: [usize; 3], index: usize) -> (u32, u32, impl Fn(u32, u32) -> [usize; 3]) {
        let [nx, ny, nz] = dims;
        let (w, h) = match self {
            Plane::Axial => (nx, ny),
            Plane::Coronal => (nx, nz),
            Plane::Sagittal => (ny, nz),
        };
        let at = move |c: u32, r: u32| {
            let (c, r) = (c as usize, r as usize);
            match self {
                Plane::Axial => [c, r, index],
                Plane::Coronal => [c, index, nz - 1 - r],
                Plane::Sagittal => [index, c, nz - 1 - r],
            }
        };
        (w as u32, h as u32, at)
    }
}

impl std::str::FromStr for Plane {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            _ => Err(format!("unknown plane `{s}` (expected axial, coronal or sagittal)")),
        }
    }
}

/// Black-red-yellow-white ramp: red rises over `[0, 1/3]`, green over
/// `[1/3, 2/3]`, blue over `[2/3, 1]`.
pub fn hot_colormap(s: f32) -> [f32; 3] {
    let s = s.clamp(0.0, 1.0);
    [(3.0 * s).min(1.0), (3.0 * s - 1.0).clamp(0.0, 1.0), (3.0 * s - 2.0).clamp(0.0, 1.0)]
}

/// Grayscale slice of `volume` (scaled by the whole volume's range) with
/// saliency `s` blended on top in [`hot_colormap`] at opacity `0.6 * s`.
/// Zero saliency leaves the grayscale pixel untouched.
pub fn render_overlay(volume: &VolumeGrid, saliency: &SaliencyVolume, plane: Plane, index: usize) -> Result<RgbImage, SaliencyError> {
    let dims = volume.dims();
    if saliency.values.dims() != dims {
        return Err(SaliencyError::Dims { saliency: saliency.values.dims(), other: dims });
    }
    let extent = plane.extent(dims);
    if index >= extent {
        return Err(SaliencyError::SliceIndex { plane: plane.name(), index, extent });
    }
    let vox = volume.voxels();
    let lo = vox.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = vox.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h, at) = plane.layout(dims, index);
    let img = RgbImage::from_fn(w, h, |c, r| {
        let [x, y, z] = at(c, r);
        let gray = (volume.get(x, y, z) - lo) / span;
        let s = saliency.values.get(x, y, z);
        let a = 0.6 * s;
        let color = hot_colormap(s);
        let px = |k: usize| (((1.0 - a) * gray + a * color[k]) * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    Ok(img)
}

pub fn export_overlay(
    volume: &VolumeGrid,
    saliency: &SaliencyVolume,
    plane: Plane,
    index: usize,
    path: &Path,
) -> Result<(), SaliencyError> {
    render_overlay(volume, saliency, plane, index)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
