//! Synthetic ellipsoid "brains" with known geometry.
//!
//! Each phantom is a brain ellipsoid with a gray-matter shell of fixed
//! thickness, a white-matter core and a central CSF ventricle. Demented
//! phantoms get larger ventricles and a thinner cortex. T1 intensities are
//! piecewise constant per tissue (CSF 0.2, GM 0.5, WM 0.8), multiplied by a
//! smooth subject-specific texture field, plus Gaussian noise inside the
//! brain. Everything is a pure function of the spec.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::manifest::{write_manifest, ManifestError};
use crate::ingest::zscore_nonzero;
use crate::ingest::nifti::{read_nifti_volume, write_nifti_volume, NiftiDatatype, NiftiError};
use crate::types::{BinaryLabel, Cdr, GridError, MaskGrid, Modality, ModalityStack, Sex, SubjectRecord, VolumeGrid};

pub const CSF_INTENSITY: f32 = 0.2;
pub const GM_INTENSITY: f32 = 0.5;
pub const WM_INTENSITY: f32 = 0.8;

/// Brain and ventricle semi-axes as fractions of the grid extent per axis.
const BRAIN_RADII: [f64; 3] = [0.42, 0.45, 0.40];
const VENTRICLE_RADII: [f64; 3] = [0.10, 0.14, 0.08];

/// Number of cosine components in the texture field.
const TEXTURE_TERMS: usize = 4;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("ventricle semi-axis {axis} ({ventricle:.2} voxels) does not fit inside the white-matter core ({core:.2} voxels)")]
    Geometry { axis: usize, ventricle: f64, core: f64 },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("cohort needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("demented fraction must lie in [0, 1], got {0}")]
    Fraction(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub cdr: Cdr,
    /// Multiplier on the ventricle semi-axes; at least 1.
    pub ventricle_scale: f64,
    /// Gray-matter shell thickness in voxels before thinning.
    pub cortex_thickness: f64,
    /// Voxels removed from the shell thickness for Demented phantoms.
    pub cortex_thinning: f64,
    pub texture_seed: u64,
    /// Peak relative deviation of the multiplicative texture field.
    pub texture_amplitude: f64,
    /// Relative per-subject perturbation of the brain and ventricle radii,
    /// drawn uniformly in `[-jitter, jitter]` from the texture seed.
    pub anatomy_jitter: f64,
    pub noise_sigma: f64,
}

impl PhantomSpec {
    pub fn new(cdr: Cdr, texture_seed: u64) -> Self {
        let demented = cdr != Cdr::None;
        PhantomSpec {
            dims: [32, 32, 32],
            cdr,
            ventricle_scale: if demented { 1.6 } else { 1.0 },
            cortex_thickness: 3.0,
            cortex_thinning: 1.0,
            texture_seed,
            texture_amplitude: 0.10,
            anatomy_jitter: 0.0,
            noise_sigma: 0.05,
        }
    }

    pub fn is_demented(&self) -> bool {
        self.cdr != Cdr::None
    }

    fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.dims.iter().any(|&d| d == 0) {
            return bad(format!("dims must be positive, got {:?}", self.dims));
        }
        if !(self.ventricle_scale >= 1.0) || !self.ventricle_scale.is_finite() {
            return bad(format!("ventricle_scale must be >= 1, got {}", self.ventricle_scale));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.cortex_thickness > 0.0) || !(self.cortex_thinning >= 0.0) || self.cortex_thinning >= self.cortex_thickness {
            return bad(format!(
                "need cortex_thickness > cortex_thinning >= 0, got {} and {}",
                self.cortex_thickness, self.cortex_thinning
            ));
        }
        if !(0.0..1.0).contains(&self.texture_amplitude) {
            return bad(format!("texture_amplitude must lie in [0, 1), got {}", self.texture_amplitude));
        }
        if !(0.0..0.5).contains(&self.anatomy_jitter) {
            return bad(format!("anatomy_jitter must lie in [0, 0.5), got {}", self.anatomy_jitter));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMasks {
    pub brain: MaskGrid,
    pub ventricle: MaskGrid,
    pub cortex: MaskGrid,
}

#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub record: SubjectRecord,
    pub stack: ModalityStack,
    pub masks: GroundTruthMasks,
}

impl PhantomSubject {
    /// The stack as ingestion would return it after a write/read round
    /// trip: T1 z-scored over nonzero voxels, tissue maps unchanged.
    pub fn preprocessed(&self) -> ModalityStack {
        let [t1, gm, wm, csf] = self.stack.channels().clone();
        ModalityStack::new(self.stack.subject_id(), [zscore_nonzero(&t1), gm, wm, csf]).expect("same geometry")
    }
}

struct Texture {
    terms: Vec<([f64; 3], f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut terms = Vec::with_capacity(TEXTURE_TERMS);
        let mut total = 0.0;
        while terms.len() < TEXTURE_TERMS {
            let k = [rng.gen_range(0..=2) as f64, rng.gen_range(0..=2) as f64, rng.gen_range(0..=2) as f64];
            if k == [0.0; 3] {
                continue;
            }
            let amp: f64 = rng.gen_range(0.5..1.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            total += amp;
            terms.push((k, amp, phase));
        }
        for t in &mut terms {
            t.1 /= total;
        }
        Texture { terms }
    }

    /// Value in `[-1, 1]` at normalized position `p ∈ [0, 1]^3`.
    fn at(&self, p: [f64; 3]) -> f64 {
        self.terms
            .iter()
            .map(|(k, a, ph)| a * (std::f64::consts::TAU * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) + ph).cos())
            .sum()
    }
}

fn ellipsoid_distance(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    ((p[0] - c[0]) / r[0]).powi(2) + ((p[1] - c[1]) / r[1]).powi(2) + ((p[2] - c[2]) / r[2]).powi(2)
}

fn jittered(base: [f64; 3], dims: [usize; 3], jitter: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut r = [0.0; 3];
    for a in 0..3 {
        let j = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
        r[a] = base[a] * dims[a] as f64 * (1.0 + j);
    }
    r
}

/// Generate one phantom. The record carries no file paths; `write_cohort`
/// fills them in.
pub fn generate_phantom_subject(subject_id: &str, age: f64, spec: &PhantomSpec) -> Result<PhantomSubject, PhantomError> {
    spec.validate()?;
    let dims = spec.dims;
    let mut anat_rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    anat_rng.set_stream(0);
    let brain_r = jittered(BRAIN_RADII, dims, spec.anatomy_jitter, &mut anat_rng);
    let mut vent_r = jittered(VENTRICLE_RADII, dims, spec.anatomy_jitter, &mut anat_rng);
    for r in &mut vent_r {
        *r *= spec.ventricle_scale;
    }
    let thickness = if spec.is_demented() { spec.cortex_thickness - spec.cortex_thinning } else { spec.cortex_thickness };
    let core_r = brain_r.map(|r| r - thickness);
    for a in 0..3 {
        if vent_r[a] >= core_r[a] {
            return Err(PhantomError::Geometry { axis: a, ventricle: vent_r[a], core: core_r[a] });
        }
    }

    let mut tex_rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    tex_rng.set_stream(1);
    let texture = Texture::new(&mut tex_rng);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    noise_rng.set_stream(2);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");

    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let n: usize = dims.iter().product();
    let mut brain = vec![false; n];
    let mut ventricle = vec![false; n];
    let mut cortex = vec![false; n];
    let mut t1 = vec![0.0f32; n];
    let (mut gm, mut wm, mut csf) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                if ellipsoid_distance(p, c, brain_r) <= 1.0 {
                    brain[i] = true;
                    let base = if ellipsoid_distance(p, c, vent_r) <= 1.0 {
                        ventricle[i] = true;
                        csf[i] = 1.0;
                        CSF_INTENSITY
                    } else if ellipsoid_distance(p, c, core_r) > 1.0 {
                        cortex[i] = true;
                        gm[i] = 1.0;
                        GM_INTENSITY
                    } else {
                        wm[i] = 1.0;
                        WM_INTENSITY
                    };
                    let q = [x as f64 / dims[0] as f64, y as f64 / dims[1] as f64, z as f64 / dims[2] as f64];
                    let field = 1.0 + spec.texture_amplitude * texture.at(q);
                    let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
                    // keep in-brain voxels nonzero so the brain mask survives
                    // the nonzero-T1 convention
                    t1[i] = ((base as f64 * field + eps) as f32).max(1e-3);
                }
                i += 1;
            }
        }
    }

    let spacing = [1.0; 3];
    let grid = |v| VolumeGrid::new(dims, spacing, v);
    let stack = ModalityStack::new(subject_id, [grid(t1)?, grid(gm)?, grid(wm)?, grid(csf)?])?;
    let masks = GroundTruthMasks {
        brain: MaskGrid::new(dims, brain)?,
        ventricle: MaskGrid::new(dims, ventricle)?,
        cortex: MaskGrid::new(dims, cortex)?,
    };
    let record = SubjectRecord::new(subject_id, spec.cdr, age).map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;
    Ok(PhantomSubject { record, stack, masks })
}

/// Cohort-wide generator settings; per-subject specs derive from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortOptions {
    pub size: usize,
    pub demented_ventricle_scale: f64,
    pub cortex_thickness: f64,
    pub cortex_thinning: f64,
    pub texture_amplitude: f64,
    pub anatomy_jitter: f64,
    pub noise_sigma: f64,
}

impl Default for CohortOptions {
    fn default() -> Self {
        CohortOptions {
            size: 32,
            demented_ventricle_scale: 1.6,
            cortex_thickness: 3.0,
            cortex_thinning: 1.0,
            texture_amplitude: 0.10,
            anatomy_jitter: 0.0,
            noise_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomCohort {
    pub subjects: Vec<PhantomSubject>,
    pub specs: Vec<PhantomSpec>,
}

/// Split `total` into parts proportional to `weights` by largest remainder;
/// ties go to the earlier part.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Demented grades (CDR 0.5 / 1 / 2) are apportioned 70:28:2, the
/// proportions of the labelled cohort this toolkit targets.
const DEMENTED_GRADES: [(Cdr, f64); 3] = [(Cdr::VeryMild, 70.0), (Cdr::Mild, 28.0), (Cdr::Moderate, 2.0)];

pub fn subject_id(index: usize) -> String {
    format!("sub-{:04}", index + 1)
}

pub fn generate_phantom_cohort(
    n_subjects: usize,
    demented_fraction: f64,
    base_seed: u64,
    options: &CohortOptions,
) -> Result<PhantomCohort, PhantomError> {
    if n_subjects < 2 {
        return Err(PhantomError::TooFewSubjects(n_subjects));
    }
    if !(0.0..=1.0).contains(&demented_fraction) {
        return Err(PhantomError::Fraction(demented_fraction));
    }
    let n_dem = (n_subjects as f64 * demented_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut rng);

    let grade_counts = largest_remainder(n_dem, &DEMENTED_GRADES.map(|g| g.1));
    let mut cdrs = vec![Cdr::None; n_subjects];
    let mut pos = 0;
    for ((cdr, _), count) in DEMENTED_GRADES.iter().zip(grade_counts) {
        for &i in &order[pos..pos + count] {
            cdrs[i] = *cdr;
        }
        pos += count;
    }

    let mut subjects = Vec::with_capacity(n_subjects);
    let mut specs = Vec::with_capacity(n_subjects);
    for (i, &cdr) in cdrs.iter().enumerate() {
        let demented = cdr != Cdr::None;
        let age = (rng.gen_range(60.0..90.0f64) * 10.0).round() / 10.0;
        let mmse = if demented { rng.gen_range(18..=28) } else { rng.gen_range(27..=30) } as f64;
        let sex = if rng.gen_bool(0.5) { Sex::Female } else { Sex::Male };
        let spec = PhantomSpec {
            dims: [options.size; 3],
            cdr,
            ventricle_scale: if demented { options.demented_ventricle_scale } else { 1.0 },
            cortex_thickness: options.cortex_thickness,
            cortex_thinning: options.cortex_thinning,
            texture_seed: base_seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            texture_amplitude: options.texture_amplitude,
            anatomy_jitter: options.anatomy_jitter,
            noise_sigma: options.noise_sigma,
        };
        let mut subject = generate_phantom_subject(&subject_id(i), age, &spec)?;
        subject.record = subject
            .record
            .with_mmse(mmse)
            .map_err(|e| PhantomError::InvalidSpec(e.to_string()))?
            .with_sex(sex);
        subjects.push(subject);
        specs.push(spec);
    }
    Ok(PhantomCohort { subjects, specs })
}

impl PhantomCohort {
    pub fn count(&self, label: BinaryLabel) -> usize {
        self.subjects.iter().filter(|s| s.record.label().value() == label).count()
    }
}

pub fn volume_path(subject_id: &str, modality: Modality) -> String {
    format!("volumes/{subject_id}_{}.nii.gz", modality.name())
}

pub fn mask_path(subject_id: &str, region: &str) -> String {
    format!("masks/{subject_id}_{region}.nii.gz")
}

pub const MASK_REGIONS: [&str; 3] = ["brain", "ventricle", "cortex"];

/// Write the cohort as NIfTI volumes, masks and `manifest.csv` under `dir`.
/// Returns the manifest path. Paths in the manifest are relative to `dir`.
pub fn write_cohort(dir: &Path, cohort: &PhantomCohort) -> Result<PathBuf, PhantomError> {
    fs::create_dir_all(dir.join("volumes"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut records = Vec::with_capacity(cohort.subjects.len());
    for s in &cohort.subjects {
        let id = s.stack.subject_id();
        let mut record = s.record.clone();
        for m in Modality::ALL {
            let rel = volume_path(id, m);
            write_nifti_volume(dir.join(&rel), s.stack.channel(m), NiftiDatatype::Float32)?;
            record = record.with_path(m, rel);
        }
        let spacing = s.stack.spacing();
        for (region, mask) in MASK_REGIONS.iter().zip([&s.masks.brain, &s.masks.ventricle, &s.masks.cortex]) {
            write_nifti_volume(dir.join(mask_path(id, region)), &mask.to_volume(spacing), NiftiDatatype::Uint8)?;
        }
        records.push(record);
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// Load the ground-truth masks written by `write_cohort`, if all exist.
pub fn read_masks(root: &Path, subject_id: &str) -> Result<Option<GroundTruthMasks>, PhantomError> {
    let paths: Vec<PathBuf> = MASK_REGIONS.iter().map(|r| root.join(mask_path(subject_id, r))).collect();
    if !paths.iter().all(|p| p.exists()) {
        return Ok(None);
    }
    let mut masks = Vec::with_capacity(3);
    for p in &paths {
        masks.push(MaskGrid::from_volume(&read_nifti_volume(p)?, |v| v > 0.5));
    }
    let cortex = masks.pop().expect("three masks");
    let ventricle = masks.pop().expect("three masks");
    let brain = masks.pop().expect("three masks");
    Ok(Some(GroundTruthMasks { brain, ventricle, cortex }))
}
