//! Domain data model shared by every stage of the pipeline.
//!
//! Voxel buffers use one axis order everywhere: `x` varies fastest, then `y`,
//! then `z`. The flat index of voxel `(x, y, z)` is `x + nx * (y + ny * z)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("invalid CDR rating {0}: expected one of 0, 0.5, 1, 2")]
    InvalidCdr(f64),
    #[error("invalid sex `{0}`: expected M, F or empty")]
    InvalidSex(String),
    #[error("invalid modality `{0}`: expected T1, GM, WM or CSF")]
    InvalidModality(String),
    #[error("MMSE {0} outside [0, 30]")]
    InvalidMmse(f64),
    #[error("subject id must be non-empty")]
    EmptySubjectId,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimensions must be positive, got {0:?}")]
    NonPositiveDims([usize; 3]),
    #[error("voxel spacing must be strictly positive, got {0:?}")]
    NonPositiveSpacing([f64; 3]),
    #[error("buffer holds {got} voxels but dims {dims:?} require {expected}")]
    LengthMismatch { dims: [usize; 3], expected: usize, got: usize },
    #[error("channel {channel} has dims {got:?}/spacing {got_spacing:?}, expected {expected:?}/{expected_spacing:?}")]
    Misaligned {
        channel: Modality,
        expected: [usize; 3],
        got: [usize; 3],
        expected_spacing: [f64; 3],
        got_spacing: [f64; 3],
    },
    #[error("tissue channel {channel} has value {value} outside [0, 1]")]
    TissueOutOfRange { channel: Modality, value: f32 },
}

/// Clinical Dementia Rating as recorded in the cohort manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cdr {
    None,
    VeryMild,
    Mild,
    Moderate,
}

impl Cdr {
    pub const ALL: [Cdr; 4] = [Cdr::None, Cdr::VeryMild, Cdr::Mild, Cdr::Moderate];

    pub fn from_value(value: f64) -> Result<Self, LabelError> {
        const EPS: f64 = 1e-9;
        Self::ALL
            .into_iter()
            .find(|c| (c.value() - value).abs() < EPS)
            .ok_or(LabelError::InvalidCdr(value))
    }

    pub fn value(self) -> f64 {
        match self {
            Cdr::None => 0.0,
            Cdr::VeryMild => 0.5,
            Cdr::Mild => 1.0,
            Cdr::Moderate => 2.0,
        }
    }
}

impl fmt::Display for Cdr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}", self.value())
    }
}

impl Serialize for Cdr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Cdr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Cdr::from_value(v).map_err(serde::de::Error::custom)
    }
}

/// Binary screening label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinaryLabel {
    NonDemented,
    Demented,
}

impl BinaryLabel {
    pub fn index(self) -> usize {
        match self {
            BinaryLabel::NonDemented => 0,
            BinaryLabel::Demented => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(BinaryLabel::NonDemented),
            1 => Some(BinaryLabel::Demented),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryLabel::NonDemented => "NonDemented",
            BinaryLabel::Demented => "Demented",
        }
    }
}

/// Four-level label used by the slice diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FineLabel {
    NonDemented,
    VeryMild,
    Mild,
    Moderate,
}

impl FineLabel {
    pub const ALL: [FineLabel; 4] = [
        FineLabel::NonDemented,
        FineLabel::VeryMild,
        FineLabel::Mild,
        FineLabel::Moderate,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FineLabel::NonDemented => "Non-demented",
            FineLabel::VeryMild => "Very mild dementia",
            FineLabel::Mild => "Mild dementia",
            FineLabel::Moderate => "Moderate dementia",
        }
    }
}

/// Paired binary and fine-grained label. Constructed only through
/// [`map_cdr_to_binary`] so the two views always agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiagnosisLabel {
    value: BinaryLabel,
    fine_grained: FineLabel,
}

impl DiagnosisLabel {
    pub fn value(&self) -> BinaryLabel {
        self.value
    }

    pub fn fine_grained(&self) -> FineLabel {
        self.fine_grained
    }
}

impl From<Cdr> for DiagnosisLabel {
    fn from(cdr: Cdr) -> Self {
        let fine_grained = match cdr {
            Cdr::None => FineLabel::NonDemented,
            Cdr::VeryMild => FineLabel::VeryMild,
            Cdr::Mild => FineLabel::Mild,
            Cdr::Moderate => FineLabel::Moderate,
        };
        let value = if cdr == Cdr::None {
            BinaryLabel::NonDemented
        } else {
            BinaryLabel::Demented
        };
        DiagnosisLabel { value, fine_grained }
    }
}

/// Map a raw CDR rating to its diagnosis label. Every rating above zero is
/// grouped into the single Demented class.
pub fn map_cdr_to_binary(cdr: f64) -> Result<DiagnosisLabel, LabelError> {
    Cdr::from_value(cdr).map(DiagnosisLabel::from)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum Sex {
    Male,
    Female,
    #[default]
    Unknown,
}

impl FromStr for Sex {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "M" | "m" | "male" | "Male" => Ok(Sex::Male),
            "F" | "f" | "female" | "Female" => Ok(Sex::Female),
            "" | "U" | "unknown" | "Unknown" => Ok(Sex::Unknown),
            other => Err(LabelError::InvalidSex(other.to_string())),
        }
    }
}

impl Sex {
    pub fn code(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
            Sex::Unknown => "",
        }
    }
}

/// Input modality, in canonical channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    T1,
    GM,
    WM,
    CSF,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::GM, Modality::WM, Modality::CSF];

    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::GM => "GM",
            Modality::WM => "WM",
            Modality::CSF => "CSF",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T1" => Ok(Modality::T1),
            "GM" => Ok(Modality::GM),
            "WM" => Ok(Modality::WM),
            "CSF" => Ok(Modality::CSF),
            _ => Err(LabelError::InvalidModality(s.to_string())),
        }
    }
}

/// One subject of a cross-sectional cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub cdr: Cdr,
    pub age: f64,
    pub mmse: Option<f64>,
    pub sex: Sex,
    pub modality_paths: BTreeMap<Modality, String>,
}

impl SubjectRecord {
    pub fn new(subject_id: impl Into<String>, cdr: Cdr, age: f64) -> Result<Self, LabelError> {
        let subject_id = subject_id.into();
        if subject_id.trim().is_empty() {
            return Err(LabelError::EmptySubjectId);
        }
        Ok(SubjectRecord {
            subject_id,
            cdr,
            age,
            mmse: None,
            sex: Sex::Unknown,
            modality_paths: BTreeMap::new(),
        })
    }

    pub fn with_mmse(mut self, mmse: f64) -> Result<Self, LabelError> {
        if !(0.0..=30.0).contains(&mmse) {
            return Err(LabelError::InvalidMmse(mmse));
        }
        self.mmse = Some(mmse);
        Ok(self)
    }

    pub fn with_sex(mut self, sex: Sex) -> Self {
        self.sex = sex;
        self
    }

    pub fn with_path(mut self, modality: Modality, path: impl Into<String>) -> Self {
        self.modality_paths.insert(modality, path.into());
        self
    }

    pub fn label(&self) -> DiagnosisLabel {
        DiagnosisLabel::from(self.cdr)
    }
}

/// Per-class row of a cohort summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub cdr: Cdr,
    pub label: FineLabel,
    pub count: usize,
    pub mean_age: Option<f64>,
    pub mean_mmse: Option<f64>,
    pub male: usize,
    pub female: usize,
    pub unknown_sex: usize,
}

/// Tabulate counts, mean age, mean MMSE and sex counts per CDR class.
/// Rows appear in ascending CDR order and only for classes present.
pub fn cohort_summary(records: &[SubjectRecord]) -> Vec<CohortRow> {
    Cdr::ALL
        .into_iter()
        .filter_map(|cdr| {
            let members: Vec<&SubjectRecord> = records.iter().filter(|r| r.cdr == cdr).collect();
            if members.is_empty() {
                return None;
            }
            let ages: Vec<f64> = members.iter().map(|r| r.age).filter(|a| a.is_finite()).collect();
            let mmse: Vec<f64> = members.iter().filter_map(|r| r.mmse).collect();
            let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
            let count_sex = |s: Sex| members.iter().filter(|r| r.sex == s).count();
            Some(CohortRow {
                cdr,
                label: DiagnosisLabel::from(cdr).fine_grained(),
                count: members.len(),
                mean_age: mean(&ages),
                mean_mmse: mean(&mmse),
                male: count_sex(Sex::Male),
                female: count_sex(Sex::Female),
                unknown_sex: count_sex(Sex::Unknown),
            })
        })
        .collect()
}

/// Real-valued volume with `x` fastest in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self, GridError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(GridError::NonPositiveDims(dims));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(GridError::NonPositiveSpacing(spacing));
        }
        let expected = dims.iter().product();
        if voxels.len() != expected {
            return Err(GridError::LengthMismatch { dims, expected, got: voxels.len() });
        }
        Ok(VolumeGrid { dims, spacing, voxels })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, GridError> {
        Self::new(dims, spacing, vec![0.0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn same_geometry(&self, other: &VolumeGrid) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> VolumeGrid {
        VolumeGrid {
            dims: self.dims,
            spacing: self.spacing,
            voxels: self.voxels.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Boolean volume sharing the [`VolumeGrid`] axis order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGrid {
    dims: [usize; 3],
    mask: Vec<bool>,
}

impl MaskGrid {
    pub fn new(dims: [usize; 3], mask: Vec<bool>) -> Result<Self, GridError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(GridError::NonPositiveDims(dims));
        }
        let expected = dims.iter().product();
        if mask.len() != expected {
            return Err(GridError::LengthMismatch { dims, expected, got: mask.len() });
        }
        Ok(MaskGrid { dims, mask })
    }

    pub fn from_volume(volume: &VolumeGrid, pred: impl Fn(f32) -> bool) -> Self {
        MaskGrid {
            dims: volume.dims(),
            mask: volume.voxels().iter().map(|&v| pred(v)).collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_subset_of(&self, other: &MaskGrid) -> bool {
        self.dims == other.dims && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    pub fn is_disjoint(&self, other: &MaskGrid) -> bool {
        self.dims == other.dims && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !(a && b))
    }

    pub fn to_volume(&self, spacing: [f64; 3]) -> VolumeGrid {
        let voxels = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        VolumeGrid::new(self.dims, spacing, voxels).expect("mask dims already validated")
    }
}

/// Four aligned channels in the fixed order `[T1, GM, WM, CSF]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStack {
    subject_id: String,
    channels: [VolumeGrid; 4],
}

impl ModalityStack {
    pub fn new(subject_id: impl Into<String>, channels: [VolumeGrid; 4]) -> Result<Self, GridError> {
        let reference = &channels[0];
        for (grid, modality) in channels.iter().zip(Modality::ALL).skip(1) {
            if !grid.same_geometry(reference) {
                return Err(GridError::Misaligned {
                    channel: modality,
                    expected: reference.dims(),
                    got: grid.dims(),
                    expected_spacing: reference.spacing(),
                    got_spacing: grid.spacing(),
                });
            }
        }
        for (grid, modality) in channels.iter().zip(Modality::ALL).skip(1) {
            if let Some(&value) = grid.voxels().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(GridError::TissueOutOfRange { channel: modality, value });
            }
        }
        Ok(ModalityStack { subject_id: subject_id.into(), channels })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn dims(&self) -> [usize; 3] {
        self.channels[0].dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.channels[0].spacing()
    }

    pub fn channel(&self, modality: Modality) -> &VolumeGrid {
        &self.channels[modality.channel()]
    }

    pub fn channels(&self) -> &[VolumeGrid; 4] {
        &self.channels
    }
}
