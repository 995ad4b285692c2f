use std::path::{Path, PathBuf};

use serde::Serialize;
use voxfuse::ingest::{load_subject, read_manifest, write_nifti_volume, NiftiDatatype};
use voxfuse::model::{checkpoint, SpatialRank};
use voxfuse::phantom::read_masks;
use voxfuse::saliency::{gradcam, gradcam_stack, region_saliency_stats, render_overlay, Plane, RegionStats, SaliencyTarget};
use voxfuse::train::slices::{extract_slices, slice_dims};
use voxfuse::VolumeGrid;

use crate::artifacts::write_json;
use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct GradcamArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub data_root: Option<PathBuf>,
    pub subject: String,
    pub branch: String,
    pub class: usize,
    pub plane: Plane,
    /// Defaults to the middle slice.
    pub index: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct SaliencyStats {
    pub subject_id: String,
    pub target_class: usize,
    pub target_branch: String,
    pub layer: String,
    pub degenerate: bool,
    pub regions: RegionStats,
    pub ventricle_to_outside_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct GradcamOutputs {
    pub saliency: PathBuf,
    pub overlay: PathBuf,
    pub stats: Option<PathBuf>,
}

fn plane_axis(plane: Plane) -> u8 {
    match plane {
        Plane::Sagittal => 0,
        Plane::Coronal => 1,
        Plane::Axial => 2,
    }
}

pub fn run_gradcam(args: &GradcamArgs) -> Result<GradcamOutputs, CliError> {
    let target: SaliencyTarget = args.branch.parse().map_err(CliError::config)?;
    let (params, _) = checkpoint::load(&args.checkpoint)
        .map_err(|e| CliError::Config(format!("cannot load checkpoint {}: {e}", args.checkpoint.display())))?;
    let manifest = read_manifest(&args.manifest)
        .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", args.manifest.display())))?;
    let record = manifest
        .records
        .iter()
        .find(|r| r.subject_id == args.subject)
        .ok_or_else(|| CliError::Config(format!("subject {} is not in {}", args.subject, args.manifest.display())))?;
    let env_root = std::env::var_os(crate::config::DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let root = args
        .data_root
        .clone()
        .or(env_root)
        .unwrap_or_else(|| args.manifest.parent().map(Path::to_path_buf).unwrap_or_default());
    let stack = load_subject(record, &root).map_err(CliError::runtime)?.stack;
    let cfg = params.config().clone();
    if let SaliencyTarget::Branch(m) = target {
        if !cfg.modalities.contains(&m) {
            return Err(CliError::Config(format!("branch {m} is not part of this model ({:?})", cfg.modalities)));
        }
    }

    let dims = stack.dims();
    let axis = plane_axis(args.plane);
    let extent = dims[axis as usize];
    let index = args.index.unwrap_or(extent / 2);
    if index >= extent {
        return Err(CliError::Config(format!("{} index {index} out of range (extent {extent})", args.plane.name())));
    }
    let tag = format!("{}_{}_class{}", args.subject, target.name(), args.class);
    std::fs::create_dir_all(&args.out)?;
    let saliency_path = args.out.join(format!("{tag}.nii.gz"));
    let overlay_path = args.out.join(format!("{tag}_{}{index}.png", args.plane.name()));

    let (saliency, anatomy, overlay_plane, overlay_index) = match cfg.spatial_rank {
        SpatialRank::ThreeD => {
            let s = gradcam_stack(&params, &stack, args.class, target).map_err(CliError::config)?;
            (s, stack.channel(cfg.modalities[0]).clone(), args.plane, index)
        }
        SpatialRank::TwoD => {
            let grid = stack.channel(cfg.modalities[0]);
            let (_, values) = extract_slices(grid, axis, 0.0).into_iter().nth(index).expect("index checked");
            let sd = slice_dims(dims, axis);
            let s = gradcam(&params, &values, sd, [1.0; 3], args.class, target).map_err(CliError::config)?;
            (s, VolumeGrid::new(sd, [1.0; 3], values).map_err(CliError::runtime)?, Plane::Axial, 0)
        }
    };
    write_nifti_volume(&saliency_path, &saliency.values, NiftiDatatype::Float32).map_err(CliError::runtime)?;
    render_overlay(&anatomy, &saliency, overlay_plane, overlay_index)
        .map_err(CliError::runtime)?
        .save_with_format(&overlay_path, image::ImageFormat::Png)
        .map_err(CliError::runtime)?;

    let mut stats_path = None;
    if cfg.spatial_rank == SpatialRank::ThreeD {
        if let Some(masks) = read_masks(&root, &args.subject).map_err(CliError::runtime)? {
            let regions = region_saliency_stats(&saliency, &masks).map_err(CliError::runtime)?;
            let stats = SaliencyStats {
                subject_id: args.subject.clone(),
                target_class: saliency.target_class,
                target_branch: saliency.target_branch.clone(),
                layer: saliency.layer.clone(),
                degenerate: saliency.degenerate,
                ventricle_to_outside_ratio: regions.ventricle_ratio(),
                regions,
            };
            let p = args.out.join(format!("{tag}_stats.json"));
            write_json(&p, &stats)?;
            stats_path = Some(p);
        }
    }
    Ok(GradcamOutputs { saliency: saliency_path, overlay: overlay_path, stats: stats_path })
}
