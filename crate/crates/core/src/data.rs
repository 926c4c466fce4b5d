//! Annotation manifests, image preprocessing, flip augmentation and
//! subject-disjoint splitting.
//!
//! Coordinates are carried in pixels and only normalised (divided by the
//! post-downsample image width) when a training target is requested, so
//! mirroring with `x' = W - x` stays exact on integer inputs.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Error, Result};
use crate::image_io::{read_pnm, RawImage};
use crate::tensor::Tensor;

/// Exact manifest header.
pub const MANIFEST_HEADER: [&str; 11] = [
    "image_path",
    "subject_id",
    "laterality",
    "modality",
    "gaze",
    "x_od",
    "y_od",
    "x_fovea",
    "y_fovea",
    "width",
    "height",
];

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Format(format!(
                        concat!("unknown ", stringify!($name), " '{}'"),
                        other
                    ))),
                }
            }
        }
    };
}

label_enum!(
    /// Which eye an image shows.
    Laterality { Left => "L", Right => "R" }
);
label_enum!(
    /// Capture modality: red-green reflectance or autofluorescence.
    Modality { Rg => "RG", Af => "AF" }
);
label_enum!(
    /// Central-pole or eyesteered capture.
    Gaze { Cp => "CP", Es => "ES" }
);

impl Laterality {
    pub fn swapped(self) -> Self {
        match self {
            Laterality::Left => Laterality::Right,
            Laterality::Right => Laterality::Left,
        }
    }

    /// Binary class label used by the laterality head (right eye = 1).
    pub fn class_label(self) -> f32 {
        match self {
            Laterality::Left => 0.0,
            Laterality::Right => 1.0,
        }
    }
}

/// OD and fovea positions, in whatever unit the owner declares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmarks {
    pub x_od: f64,
    pub y_od: f64,
    pub x_fovea: f64,
    pub y_fovea: f64,
}

impl Landmarks {
    pub fn new(x_od: f64, y_od: f64, x_fovea: f64, y_fovea: f64) -> Self {
        Self { x_od, y_od, x_fovea, y_fovea }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_od, self.y_od, self.x_fovea, self.y_fovea]
    }

    pub fn od(self) -> (f64, f64) {
        (self.x_od, self.y_od)
    }

    pub fn fovea(self) -> (f64, f64) {
        (self.x_fovea, self.y_fovea)
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_array(self.to_array().map(f))
    }

    /// Horizontal mirror about an image of width `width`: `x' = width - x`.
    pub fn mirrored(self, width: f64) -> Self {
        Self { x_od: width - self.x_od, x_fovea: width - self.x_fovea, ..self }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_path: String,
    pub subject_id: String,
    pub laterality: Laterality,
    pub modality: Modality,
    pub gaze: Gaze,
    /// Pixel coordinates at the stored image resolution.
    pub landmarks: Landmarks,
    pub width: usize,
    pub height: usize,
    /// Set on augmentation twins: the image must be mirrored when loaded, and
    /// `landmarks`/`laterality` already describe the mirrored image.
    pub flipped: bool,
}

impl AnnotationRecord {
    fn validate(&self, row: usize) -> Result<()> {
        let (w, h) = (self.width as f64, self.height as f64);
        let lm = self.landmarks;
        let checks = [("x_od", lm.x_od, w), ("y_od", lm.y_od, h), ("x_fovea", lm.x_fovea, w), ("y_fovea", lm.y_fovea, h)];
        for (name, value, limit) in checks {
            if !(value.is_finite() && value >= 0.0 && value < limit) {
                return Err(Error::Validation(format!(
                    "row {row}: {name} = {value} outside [0, {limit})"
                )));
            }
        }
        Ok(())
    }
}

/// Reads a manifest CSV. Lines starting with `#` are comments.
pub fn load_manifest(path: &Path) -> Result<Vec<AnnotationRecord>> {
    read_manifest(std::fs::File::open(path)?)
}

pub fn read_manifest<R: Read>(reader: R) -> Result<Vec<AnnotationRecord>> {
    let mut csv = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    let mut columns = [0usize; 11];
    for (slot, name) in columns.iter_mut().zip(MANIFEST_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("manifest is missing column '{name}'")))?;
    }
    if headers.len() != MANIFEST_HEADER.len() || columns.iter().enumerate().any(|(i, c)| i != *c) {
        return Err(Error::Format(format!(
            "manifest header must be exactly `{}`",
            MANIFEST_HEADER.join(",")
        )));
    }

    let mut records = Vec::new();
    for (i, row) in csv.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let field = |c: usize| row.get(c).unwrap_or("");
        let num = |c: usize| -> Result<f64> {
            field(c).parse::<f64>().map_err(|_| {
                Error::Validation(format!("row {row_no}: {} = '{}' is not a number", MANIFEST_HEADER[c], field(c)))
            })
        };
        let size = |c: usize| -> Result<usize> {
            field(c).parse::<usize>().map_err(|_| {
                Error::Validation(format!("row {row_no}: {} = '{}' is not a pixel count", MANIFEST_HEADER[c], field(c)))
            })
        };
        let with_row = |e: Error| match e {
            Error::Format(m) => Error::Format(format!("row {row_no}: {m}")),
            other => other,
        };
        let record = AnnotationRecord {
            image_path: field(0).to_string(),
            subject_id: field(1).to_string(),
            laterality: field(2).parse().map_err(with_row)?,
            modality: field(3).parse().map_err(with_row)?,
            gaze: field(4).parse().map_err(with_row)?,
            landmarks: Landmarks::new(num(5)?, num(6)?, num(7)?, num(8)?),
            width: size(9)?,
            height: size(10)?,
            flipped: false,
        };
        if record.subject_id.is_empty() {
            return Err(Error::Validation(format!("row {row_no}: empty subject_id")));
        }
        record.validate(row_no)?;
        records.push(record);
    }
    Ok(records)
}

/// Writes a manifest with `#` comment lines ahead of the header.
pub fn write_manifest<W: Write>(mut out: W, records: &[AnnotationRecord], comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record(MANIFEST_HEADER)?;
    for r in records {
        let lm = r.landmarks;
        csv.write_record([
            r.image_path.clone(),
            r.subject_id.clone(),
            r.laterality.to_string(),
            r.modality.to_string(),
            r.gaze.to_string(),
            lm.x_od.to_string(),
            lm.y_od.to_string(),
            lm.x_fovea.to_string(),
            lm.y_fovea.to_string(),
            r.width.to_string(),
            r.height.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn save_manifest(path: &Path, records: &[AnnotationRecord], comments: &[String]) -> Result<()> {
    write_manifest(std::fs::File::create(path)?, records, comments)
}

/// A preprocessed image ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_path: String,
    pub subject_id: String,
    /// `[H, W, 1]`, standardised to zero mean and unit variance.
    pub image: Tensor<f32>,
    /// Post-downsample pixel coordinates.
    pub landmarks: Landmarks,
    pub laterality: Laterality,
    pub modality: Modality,
    pub gaze: Gaze,
    pub flipped: bool,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Landmarks divided by the image width (all in `[0, 1]`).
    pub fn target(&self) -> [f64; 4] {
        normalize(self.landmarks, self.width()).to_array()
    }
}

/// Pixel coordinates to width-normalised coordinates.
pub fn normalize(landmarks: Landmarks, width: usize) -> Landmarks {
    let w = width as f64;
    landmarks.map(|v| v / w)
}

/// Width-normalised coordinates back to pixels.
pub fn denormalize(landmarks: Landmarks, width: usize) -> Landmarks {
    let w = width as f64;
    landmarks.map(|v| v * w)
}

/// Green channel (index 1) of RGB images, or the single channel of grey ones.
fn green_channel(image: &RawImage) -> Result<Vec<f64>> {
    match image.channels {
        1 => Ok(image.data.iter().map(|v| *v as f64).collect()),
        3 => Ok(image.data.chunks_exact(3).map(|px| px[1] as f64).collect()),
        c => Err(Error::Format(format!("unsupported channel layout with {c} channels"))),
    }
}

/// Mean of each `factor x factor` block; trailing rows/columns that do not fill
/// a block are dropped.
pub fn box_downsample(pixels: &[f64], width: usize, height: usize, factor: usize) -> (Vec<f64>, usize, usize) {
    let (w, h) = (width / factor, height / factor);
    let area = (factor * factor) as f64;
    let mut out = Vec::with_capacity(w * h);
    for by in 0..h {
        for bx in 0..w {
            let mut acc = 0.0;
            for y in by * factor..(by + 1) * factor {
                acc += pixels[y * width + bx * factor..][..factor].iter().sum::<f64>();
            }
            out.push(acc / area);
        }
    }
    (out, w, h)
}

/// Zero mean, unit (population) standard deviation.
pub fn standardize(pixels: &[f64]) -> Result<Vec<f32>> {
    let n = pixels.len() as f64;
    let mean = pixels.iter().sum::<f64>() / n;
    let var = pixels.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12) {
        return Err(Error::DegenerateImage("image has zero intensity variance".into()));
    }
    Ok(pixels.iter().map(|v| ((v - mean) / std) as f32).collect())
}

fn mirror_columns<T: Copy>(pixels: &mut [T], width: usize) {
    for row in pixels.chunks_exact_mut(width) {
        row.reverse();
    }
}

/// Green-channel extraction, box downsampling and standardisation; landmarks
/// are rescaled into the downsampled pixel grid.
pub fn preprocess(record: &AnnotationRecord, image: &RawImage, factor: usize) -> Result<Sample> {
    if factor == 0 {
        return arg_err("downsample factor must be at least 1");
    }
    if image.width != record.width || image.height != record.height {
        return Err(Error::Format(format!(
            "{}: image is {}x{} but the manifest says {}x{}",
            record.image_path, image.width, image.height, record.width, record.height
        )));
    }
    if image.width < factor || image.height < factor {
        return arg_err(format!("image {}x{} is smaller than the downsample factor {factor}", image.width, image.height));
    }
    let mut green = green_channel(image)?;
    if record.flipped {
        mirror_columns(&mut green, image.width);
    }
    let (small, w, h) = box_downsample(&green, image.width, image.height, factor);
    let data = standardize(&small).map_err(|e| match e {
        Error::DegenerateImage(m) => Error::DegenerateImage(format!("{}: {m}", record.image_path)),
        other => other,
    })?;
    let f = factor as f64;
    Ok(Sample {
        image_path: record.image_path.clone(),
        subject_id: record.subject_id.clone(),
        image: Tensor::new(&[h, w, 1], data)?,
        landmarks: record.landmarks.map(|v| v / f),
        laterality: record.laterality,
        modality: record.modality,
        gaze: record.gaze,
        flipped: record.flipped,
    })
}

/// Mirrors the image, maps `x' = W - x`, and swaps laterality.
pub fn flip_sample(sample: &Sample) -> Sample {
    let width = sample.width();
    let mut image = sample.image.clone();
    mirror_columns(image.data_mut(), width);
    Sample {
        image,
        landmarks: sample.landmarks.mirrored(width as f64),
        laterality: sample.laterality.swapped(),
        flipped: !sample.flipped,
        ..sample.clone()
    }
}

/// Appends a mirrored twin for every original record (twins are not re-mirrored).
pub fn augment_double(records: &[AnnotationRecord]) -> Vec<AnnotationRecord> {
    let mut out = Vec::with_capacity(records.len() * 2);
    out.extend(records.iter().cloned());
    for r in records.iter().filter(|r| !r.flipped) {
        out.push(AnnotationRecord {
            landmarks: r.landmarks.mirrored(r.width as f64),
            laterality: r.laterality.swapped(),
            flipped: true,
            ..r.clone()
        });
    }
    out
}

/// Reads and preprocesses every record, resolving relative image paths
/// against `base_dir`. Output order matches input order.
pub fn load_samples(records: &[AnnotationRecord], base_dir: &Path, factor: usize) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            let image = read_pnm(&resolve(base_dir, &r.image_path))?;
            preprocess(r, &image, factor)
        })
        .collect()
}

pub fn resolve(base_dir: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Target fractions for a subject-disjoint split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.7, val: 0.2, test: 0.1, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return arg_err(format!("split fractions must be positive, got {f:?}"));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return arg_err(format!("split fractions must sum to 1, got {}", f.iter().sum::<f64>()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<AnnotationRecord>,
    pub val: Vec<AnnotationRecord>,
    pub test: Vec<AnnotationRecord>,
}

/// Shuffles subjects by seed and hands each to the set whose image share is
/// furthest below its target. Records keep their manifest order within a set.
pub fn subject_split(records: &[AnnotationRecord], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut subjects: Vec<&str> = Vec::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        let c = counts.entry(r.subject_id.as_str()).or_insert_with(|| {
            subjects.push(r.subject_id.as_str());
            0
        });
        *c += 1;
    }
    if subjects.len() < 3 {
        return arg_err(format!("need at least 3 subjects to split, found {}", subjects.len()));
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let total = records.len() as f64;
    let targets = [spec.train, spec.val, spec.test];
    let mut assigned = [0usize; 3];
    let mut set_of: HashMap<&str, usize> = HashMap::new();
    for s in subjects {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (i, target) in targets.iter().enumerate() {
            let deficit = target - assigned[i] as f64 / total;
            if deficit > best_deficit {
                best = i;
                best_deficit = deficit;
            }
        }
        assigned[best] += counts[s];
        set_of.insert(s, best);
    }

    let mut split = Split::default();
    for r in records {
        match set_of[r.subject_id.as_str()] {
            0 => split.train.push(r.clone()),
            1 => split.val.push(r.clone()),
            _ => split.test.push(r.clone()),
        }
    }
    Ok(split)
}
