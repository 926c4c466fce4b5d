//! Localisation and laterality metrics.
//!
//! Distances are expressed in optic-disc radii, where each image's radius is
//! one fifth of its ground-truth disc-fovea distance. A landmark counts as
//! found within `n` radii only when its distance is strictly below `n * r`.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};

use crate::data::{AnnotationRecord, Gaze, Landmarks, Laterality, Modality};
use crate::error::{Error, Result, Unmatched};
use crate::synth::OD_FOVEA_RADII;

/// Column thresholds of the stratified report, in disc radii.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.25, 0.5, 1.0];

/// Header of the prediction CSV.
pub const PREDICTION_HEADER: [&str; 5] = ["image_path", "x_od", "y_od", "x_fovea", "y_fovea"];

/// Header of the laterality-classifier output CSV.
pub const CLASS_OUTPUT_HEADER: [&str; 2] = ["image_path", "p_right"];

/// Predicted landmarks for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_path: String,
    pub landmarks: Landmarks,
}

/// Laterality classifier output: probability of a right eye.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassOutput {
    pub image_path: String,
    pub p_right: f64,
}

/// One grader's annotation of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GraderAnnotation {
    pub grader_id: String,
    pub image_path: String,
    pub landmarks: Landmarks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Landmark {
    OpticDisc,
    Fovea,
}

impl Landmark {
    fn point(self, l: Landmarks) -> (f64, f64) {
        match self {
            Landmark::OpticDisc => l.od(),
            Landmark::Fovea => l.fovea(),
        }
    }
}

impl fmt::Display for Landmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Landmark::OpticDisc => "od",
            Landmark::Fovea => "fovea",
        })
    }
}

/// Disc radius estimate: OD-fovea distance divided by five.
pub fn od_radius(truth: Landmarks) -> Result<f64> {
    let dist = distance(truth.od(), truth.fovea());
    if !dist.is_finite() {
        return Err(Error::DegenerateAnnotation("non-finite landmark coordinates".into()));
    }
    if dist == 0.0 {
        return Err(Error::DegenerateAnnotation("optic disc and fovea coincide".into()));
    }
    Ok(dist / OD_FOVEA_RADII)
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Pairs each truth with the entry of `items` sharing its image path. Every
/// path must match on both sides.
fn join<'a, P>(
    items: &'a [P],
    path_of: impl Fn(&P) -> &str,
    truths: &'a [AnnotationRecord],
) -> Result<Vec<(&'a P, &'a AnnotationRecord)>> {
    let by_path: HashMap<&str, &P> = items.iter().map(|p| (path_of(p), p)).collect();
    let truth_paths: HashMap<&str, ()> = truths.iter().map(|t| (t.image_path.as_str(), ())).collect();
    let mut unmatched: Vec<String> = truths
        .iter()
        .filter(|t| !by_path.contains_key(t.image_path.as_str()))
        .map(|t| t.image_path.clone())
        .collect();
    unmatched.extend(
        items
            .iter()
            .map(&path_of)
            .filter(|p| !truth_paths.contains_key(p))
            .map(str::to_string),
    );
    if !unmatched.is_empty() {
        return Err(Error::Join(Unmatched(unmatched)));
    }
    Ok(truths.iter().map(|t| (by_path[t.image_path.as_str()], t)).collect())
}

/// Per-image distances in disc radii; degenerate truths are skipped and counted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormalizedDistances {
    pub od: Vec<f64>,
    pub fovea: Vec<f64>,
    pub excluded: usize,
}

impl NormalizedDistances {
    pub fn of(&self, landmark: Landmark) -> &[f64] {
        match landmark {
            Landmark::OpticDisc => &self.od,
            Landmark::Fovea => &self.fovea,
        }
    }
}

fn distances_of(pairs: &[(&Prediction, &AnnotationRecord)]) -> NormalizedDistances {
    let mut out = NormalizedDistances::default();
    for (pred, truth) in pairs {
        let Ok(r) = od_radius(truth.landmarks) else {
            out.excluded += 1;
            continue;
        };
        for (lm, dst) in [(Landmark::OpticDisc, &mut out.od), (Landmark::Fovea, &mut out.fovea)] {
            dst.push(distance(lm.point(pred.landmarks), lm.point(truth.landmarks)) / r);
        }
    }
    out
}

pub fn normalized_distances(preds: &[Prediction], truths: &[AnnotationRecord]) -> Result<NormalizedDistances> {
    Ok(distances_of(&join(preds, |p| p.image_path.as_str(), truths)?))
}

/// Percentage of `distances` strictly below `n`.
pub fn percent_within(distances: &[f64], n: f64) -> f64 {
    if distances.is_empty() {
        return f64::NAN;
    }
    100.0 * distances.iter().filter(|d| **d < n).count() as f64 / distances.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkAccuracy {
    pub thresholds: Vec<f64>,
    /// Percentages aligned with `thresholds`.
    pub od: Vec<f64>,
    pub fovea: Vec<f64>,
    pub images: usize,
    pub excluded: usize,
}

pub fn landmark_accuracy(preds: &[Prediction], truths: &[AnnotationRecord], thresholds: &[f64]) -> Result<LandmarkAccuracy> {
    let d = normalized_distances(preds, truths)?;
    Ok(accuracy_from(&d, thresholds))
}

fn accuracy_from(d: &NormalizedDistances, thresholds: &[f64]) -> LandmarkAccuracy {
    LandmarkAccuracy {
        thresholds: thresholds.to_vec(),
        od: thresholds.iter().map(|n| percent_within(&d.od, *n)).collect(),
        fovea: thresholds.iter().map(|n| percent_within(&d.fovea, *n)).collect(),
        images: d.od.len(),
        excluded: d.excluded,
    }
}

/// Grid `0, step, 2*step, ..., n_max`.
pub fn curve_grid(n_max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && n_max >= 0.0 && n_max.is_finite()) {
        return Err(Error::Argument(format!("bad curve grid: n_max {n_max}, step {step}")));
    }
    let steps = (n_max / step).round() as usize;
    // an integral number of steps per radius keeps grid points like 1.0 exact
    let per_unit = 1.0 / step;
    let exact = (per_unit - per_unit.round()).abs() < 1e-9;
    Ok((0..=steps)
        .map(|k| if exact { k as f64 / per_unit.round() } else { k as f64 * step })
        .collect())
}

/// Accuracy (percent) as a function of the threshold in disc radii.
pub fn accuracy_curve(
    preds: &[Prediction],
    truths: &[AnnotationRecord],
    landmark: Landmark,
    n_max: f64,
    step: f64,
) -> Result<Vec<(f64, f64)>> {
    let d = normalized_distances(preds, truths)?;
    accuracy_curve_from_distances(d.of(landmark), n_max, step)
}

/// Accuracy curve over precomputed normalised distances.
pub fn accuracy_curve_from_distances(distances: &[f64], n_max: f64, step: f64) -> Result<Vec<(f64, f64)>> {
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total = sorted.len() as f64;
    Ok(curve_grid(n_max, step)?
        .into_iter()
        .map(|n| {
            let below = sorted.partition_point(|d| *d < n);
            let pct = if sorted.is_empty() { f64::NAN } else { 100.0 * below as f64 / total };
            (n, pct)
        })
        .collect())
}

/// Laterality read from landmark order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferredLaterality {
    Left,
    Right,
    Indeterminate,
}

impl InferredLaterality {
    pub fn matches(self, truth: Laterality) -> bool {
        matches!(
            (self, truth),
            (InferredLaterality::Left, Laterality::Left) | (InferredLaterality::Right, Laterality::Right)
        )
    }
}

/// Left eye when the disc lies left of the fovea, right eye when it lies to
/// the right, indeterminate on a tie.
pub fn infer_laterality(landmarks: Landmarks) -> InferredLaterality {
    if landmarks.x_od < landmarks.x_fovea {
        InferredLaterality::Left
    } else if landmarks.x_od > landmarks.x_fovea {
        InferredLaterality::Right
    } else {
        InferredLaterality::Indeterminate
    }
}

/// Class decision for a classifier probability: right eye when `p > 0.5`.
pub fn classify_laterality(p_right: f64) -> Laterality {
    if p_right > 0.5 {
        Laterality::Right
    } else {
        Laterality::Left
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LateralityAccuracy {
    pub percent: f64,
    pub correct: usize,
    pub total: usize,
    /// Tied inferences; counted as incorrect.
    pub indeterminate: usize,
}

impl LateralityAccuracy {
    fn from_counts(correct: usize, total: usize, indeterminate: usize) -> Self {
        let percent = if total == 0 { f64::NAN } else { 100.0 * correct as f64 / total as f64 };
        Self { percent, correct, total, indeterminate }
    }
}

fn inferred_accuracy_of(pairs: &[(&Prediction, &AnnotationRecord)]) -> LateralityAccuracy {
    let mut correct = 0;
    let mut tied = 0;
    for (pred, truth) in pairs {
        let inferred = infer_laterality(pred.landmarks);
        if inferred == InferredLaterality::Indeterminate {
            tied += 1;
        } else if inferred.matches(truth.laterality) {
            correct += 1;
        }
    }
    LateralityAccuracy::from_counts(correct, pairs.len(), tied)
}

/// Accuracy of laterality inferred from predicted landmark order.
pub fn inferred_laterality_accuracy(preds: &[Prediction], truths: &[AnnotationRecord]) -> Result<LateralityAccuracy> {
    Ok(inferred_accuracy_of(&join(preds, |p| p.image_path.as_str(), truths)?))
}

fn classifier_accuracy_of(pairs: &[(&ClassOutput, &AnnotationRecord)]) -> LateralityAccuracy {
    let correct = pairs
        .iter()
        .filter(|(out, truth)| classify_laterality(out.p_right) == truth.laterality)
        .count();
    LateralityAccuracy::from_counts(correct, pairs.len(), 0)
}

/// Accuracy of a laterality classifier thresholded at 0.5.
pub fn classifier_laterality_accuracy(outputs: &[ClassOutput], truths: &[AnnotationRecord]) -> Result<LateralityAccuracy> {
    Ok(classifier_accuracy_of(&join(outputs, |o| o.image_path.as_str(), truths)?))
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

/// One row of the grader agreement table; cells are `None` when the grader
/// annotated no image of that modality.
#[derive(Debug, Clone, PartialEq)]
pub struct GraderRow {
    pub grader_id: String,
    pub rg_od: Option<MeanStd>,
    pub rg_fovea: Option<MeanStd>,
    pub af_od: Option<MeanStd>,
    pub af_fovea: Option<MeanStd>,
}

impl GraderRow {
    fn cells(&self) -> [Option<MeanStd>; 4] {
        [self.rg_od, self.rg_fovea, self.af_od, self.af_fovea]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraderStats {
    pub graders: Vec<GraderRow>,
    /// Unweighted mean of the per-grader means and standard deviations.
    pub mean: GraderRow,
    /// Annotations skipped because their ground truth is degenerate.
    pub excluded: usize,
}

/// Distances between each grader and the ground truth, in disc radii.
pub fn grader_stats(annotations: &[GraderAnnotation], truths: &[AnnotationRecord]) -> Result<GraderStats> {
    let truth_by_path: HashMap<&str, &AnnotationRecord> = truths.iter().map(|t| (t.image_path.as_str(), t)).collect();
    let unknown: Vec<String> = annotations
        .iter()
        .filter(|a| !truth_by_path.contains_key(a.image_path.as_str()))
        .map(|a| a.image_path.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Join(Unmatched(unknown)));
    }

    let mut order: Vec<&str> = Vec::new();
    // grader -> [rg_od, rg_fovea, af_od, af_fovea] distance lists
    let mut dists: HashMap<&str, [Vec<f64>; 4]> = HashMap::new();
    let mut excluded = 0;
    for a in annotations {
        let truth = truth_by_path[a.image_path.as_str()];
        let Ok(r) = od_radius(truth.landmarks) else {
            excluded += 1;
            continue;
        };
        let slot = dists.entry(a.grader_id.as_str()).or_insert_with(|| {
            order.push(a.grader_id.as_str());
            Default::default()
        });
        let base = match truth.modality {
            Modality::Rg => 0,
            Modality::Af => 2,
        };
        slot[base].push(distance(a.landmarks.od(), truth.landmarks.od()) / r);
        slot[base + 1].push(distance(a.landmarks.fovea(), truth.landmarks.fovea()) / r);
    }

    let graders: Vec<GraderRow> = order
        .iter()
        .map(|id| {
            let d = &dists[id];
            GraderRow {
                grader_id: id.to_string(),
                rg_od: MeanStd::of(&d[0]),
                rg_fovea: MeanStd::of(&d[1]),
                af_od: MeanStd::of(&d[2]),
                af_fovea: MeanStd::of(&d[3]),
            }
        })
        .collect();

    let mean_cell = |i: usize| -> Option<MeanStd> {
        let cells: Vec<MeanStd> = graders.iter().filter_map(|g| g.cells()[i]).collect();
        if cells.is_empty() {
            return None;
        }
        let n = cells.len() as f64;
        Some(MeanStd {
            mean: cells.iter().map(|c| c.mean).sum::<f64>() / n,
            std: cells.iter().map(|c| c.std).sum::<f64>() / n,
        })
    };
    let mean = GraderRow {
        grader_id: "Mean".into(),
        rg_od: mean_cell(0),
        rg_fovea: mean_cell(1),
        af_od: mean_cell(2),
        af_fovea: mean_cell(3),
    };
    Ok(GraderStats { graders, mean, excluded })
}

/// One (modality, gaze) stratum; `None` means "All".
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub modality: Option<Modality>,
    pub gaze: Option<Gaze>,
    pub od: Vec<f64>,
    pub fovea: Vec<f64>,
    pub lat_inferred: f64,
    pub lat_classifier: Option<f64>,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub rows: Vec<ReportRow>,
    /// Omitted strata and exclusions.
    pub notes: Vec<String>,
    pub excluded: usize,
}

fn label<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "All".to_string(), |v| v.to_string())
}

/// Accuracy table split by modality and gaze, rows ordered RG, AF, All and
/// within each All, CP, ES.
pub fn stratified_report(
    preds: &[Prediction],
    truths: &[AnnotationRecord],
    class_outputs: Option<&[ClassOutput]>,
    thresholds: &[f64],
) -> Result<EvalReport> {
    let pairs = join(preds, |p| p.image_path.as_str(), truths)?;
    let class_pairs = class_outputs
        .map(|outs| join(outs, |o| o.image_path.as_str(), truths))
        .transpose()?;

    let modalities = [Some(Modality::Rg), Some(Modality::Af), None];
    let gazes = [None, Some(Gaze::Cp), Some(Gaze::Es)];
    let keep = |t: &AnnotationRecord, m: Option<Modality>, g: Option<Gaze>| {
        m.is_none_or(|m| t.modality == m) && g.is_none_or(|g| t.gaze == g)
    };

    let mut rows = Vec::new();
    let mut notes = Vec::new();
    let mut excluded = 0;
    for m in modalities {
        for g in gazes {
            let stratum: Vec<_> = pairs.iter().copied().filter(|(_, t)| keep(t, m, g)).collect();
            if stratum.is_empty() {
                notes.push(format!("stratum {}/{} has no images and was omitted", label(m), label(g)));
                continue;
            }
            let d = distances_of(&stratum);
            if m.is_none() && g.is_none() {
                excluded = d.excluded;
            }
            let acc = accuracy_from(&d, thresholds);
            let lat_classifier = class_pairs.as_ref().map(|cp| {
                let s: Vec<_> = cp.iter().copied().filter(|(_, t)| keep(t, m, g)).collect();
                classifier_accuracy_of(&s).percent
            });
            rows.push(ReportRow {
                modality: m,
                gaze: g,
                od: acc.od,
                fovea: acc.fovea,
                lat_inferred: inferred_accuracy_of(&stratum).percent,
                lat_classifier,
                images: stratum.len(),
            });
        }
    }
    if excluded > 0 {
        notes.push(format!("{excluded} image(s) with coincident OD and fovea excluded from distance metrics"));
    }
    Ok(EvalReport { thresholds: thresholds.to_vec(), rows, notes, excluded })
}

fn threshold_label(n: f64) -> String {
    format!("{n}r")
}

fn fmt_pct(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.2}")
    }
}

/// Writes the stratified report as CSV; notes become trailing comments.
pub fn write_report_csv<W: Write>(mut out: W, report: &EvalReport, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut header = vec!["mode".to_string(), "gaze".to_string()];
    for lm in ["od", "fovea"] {
        for n in &report.thresholds {
            header.push(format!("{lm}_acc_{}", threshold_label(*n)));
        }
    }
    header.extend(["lat_inferred", "lat_classifier", "images"].map(String::from));
    writeln!(out, "{}", header.join(","))?;
    for row in &report.rows {
        let mut cells = vec![label(row.modality), label(row.gaze)];
        cells.extend(row.od.iter().chain(&row.fovea).map(|v| fmt_pct(*v)));
        cells.push(fmt_pct(row.lat_inferred));
        cells.push(row.lat_classifier.map(fmt_pct).unwrap_or_default());
        cells.push(row.images.to_string());
        writeln!(out, "{}", cells.join(","))?;
    }
    for note in &report.notes {
        writeln!(out, "# note: {note}")?;
    }
    Ok(())
}

pub fn write_curve_csv<W: Write>(mut out: W, curve: &[(f64, f64)], comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "n,accuracy_percent")?;
    for (n, pct) in curve {
        writeln!(out, "{n},{}", fmt_pct(*pct))?;
    }
    Ok(())
}

pub fn write_grader_csv<W: Write>(mut out: W, stats: &GraderStats, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(
        out,
        "grader,rg_od_mu,rg_od_sigma,rg_fovea_mu,rg_fovea_sigma,af_od_mu,af_od_sigma,af_fovea_mu,af_fovea_sigma"
    )?;
    for row in stats.graders.iter().chain(std::iter::once(&stats.mean)) {
        let mut cells = vec![row.grader_id.clone()];
        for cell in row.cells() {
            match cell {
                Some(ms) => cells.extend([format!("{:.3}", ms.mean), format!("{:.3}", ms.std)]),
                None => cells.extend([String::new(), String::new()]),
            }
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    if stats.excluded > 0 {
        writeln!(out, "# note: {} annotation(s) on degenerate ground truth excluded", stats.excluded)?;
    }
    Ok(())
}

pub fn write_predictions<W: Write>(mut out: W, preds: &[Prediction], comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record(PREDICTION_HEADER)?;
    for p in preds {
        let lm = p.landmarks;
        csv.write_record([
            p.image_path.clone(),
            lm.x_od.to_string(),
            lm.y_od.to_string(),
            lm.x_fovea.to_string(),
            lm.y_fovea.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_class_outputs<W: Write>(mut out: W, outputs: &[ClassOutput], comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record(CLASS_OUTPUT_HEADER)?;
    for o in outputs {
        csv.write_record([o.image_path.clone(), o.p_right.to_string()])?;
    }
    csv.flush()?;
    Ok(())
}

fn csv_rows<R: Read>(reader: R, expected: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut csv = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    if headers.iter().ne(expected.iter().copied()) {
        if let Some(missing) = expected.iter().find(|c| !headers.iter().any(|h| h == **c)) {
            return Err(Error::Format(format!("missing column '{missing}'")));
        }
        return Err(Error::Format(format!("header must be exactly `{}`", expected.join(","))));
    }
    csv.records().map(|r| r.map_err(Error::from)).collect()
}

fn parse_f64(row: usize, name: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Validation(format!("row {row}: {name} = '{v}' is not a number")))
}

fn parse_landmarks(row_no: usize, row: &csv::StringRecord, first: usize) -> Result<Landmarks> {
    let names = ["x_od", "y_od", "x_fovea", "y_fovea"];
    let mut v = [0.0; 4];
    for (i, name) in names.iter().enumerate() {
        v[i] = parse_f64(row_no, name, row.get(first + i).unwrap_or(""))?;
        if !v[i].is_finite() {
            return Err(Error::Validation(format!("row {row_no}: {name} is not finite")));
        }
    }
    Ok(Landmarks::from_array(v))
}

pub fn read_predictions<R: Read>(reader: R) -> Result<Vec<Prediction>> {
    csv_rows(reader, &PREDICTION_HEADER)?
        .iter()
        .enumerate()
        .map(|(i, row)| {
            Ok(Prediction { image_path: row[0].to_string(), landmarks: parse_landmarks(i + 1, row, 1)? })
        })
        .collect()
}

pub fn read_class_outputs<R: Read>(reader: R) -> Result<Vec<ClassOutput>> {
    csv_rows(reader, &CLASS_OUTPUT_HEADER)?
        .iter()
        .enumerate()
        .map(|(i, row)| {
            Ok(ClassOutput { image_path: row[0].to_string(), p_right: parse_f64(i + 1, "p_right", &row[1])? })
        })
        .collect()
}

pub fn read_grader_annotations<R: Read>(reader: R) -> Result<Vec<GraderAnnotation>> {
    let header = ["grader_id", "image_path", "x_od", "y_od", "x_fovea", "y_fovea"];
    csv_rows(reader, &header)?
        .iter()
        .enumerate()
        .map(|(i, row)| {
            Ok(GraderAnnotation {
                grader_id: row[0].to_string(),
                image_path: row[1].to_string(),
                landmarks: parse_landmarks(i + 1, row, 2)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(path: &str, lm: Landmarks, modality: Modality, gaze: Gaze) -> AnnotationRecord {
        let laterality = if lm.x_od < lm.x_fovea { Laterality::Left } else { Laterality::Right };
        AnnotationRecord {
            image_path: path.into(),
            subject_id: "S".into(),
            laterality,
            modality,
            gaze,
            landmarks: lm,
            width: 1000,
            height: 1000,
            flipped: false,
        }
    }

    fn pred(path: &str, lm: Landmarks) -> Prediction {
        Prediction { image_path: path.into(), landmarks: lm }
    }

    #[test]
    fn radius_fixtures() {
        assert_eq!(od_radius(Landmarks::new(300.0, 400.0, 0.0, 0.0)).unwrap(), 100.0);
        assert_eq!(od_radius(Landmarks::new(5.0, 0.0, 0.0, 0.0)).unwrap(), 1.0);
        let base = Landmarks::new(13.0, 7.0, 2.0, 3.0);
        let r = od_radius(base).unwrap();
        assert!((od_radius(base.map(|v| v * 3.0)).unwrap() - 3.0 * r).abs() < 1e-12);
        assert!(matches!(od_radius(Landmarks::new(1.0, 1.0, 1.0, 1.0)), Err(Error::DegenerateAnnotation(_))));
    }

    #[test]
    fn three_image_enumeration() {
        // r = 100 for every truth; OD predictions at 0.2r, 0.6r, 1.5r
        let lm = Landmarks::new(300.0, 400.0, 0.0, 0.0);
        let truths: Vec<_> = (0..3).map(|i| truth(&format!("{i}"), lm, Modality::Rg, Gaze::Cp)).collect();
        let preds: Vec<_> = [20.0, 60.0, 150.0]
            .iter()
            .enumerate()
            .map(|(i, dx)| pred(&format!("{i}"), Landmarks { x_od: lm.x_od + dx, ..lm }))
            .collect();
        let acc = landmark_accuracy(&preds, &truths, &DEFAULT_THRESHOLDS).unwrap();
        let expect = [100.0 / 3.0, 100.0 / 3.0, 200.0 / 3.0];
        for (a, e) in acc.od.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(acc.fovea, vec![100.0; 3]);
    }

    #[test]
    fn strict_inequality_step() {
        let lm = Landmarks::new(300.0, 400.0, 0.0, 0.0);
        let truths = [truth("a", lm, Modality::Rg, Gaze::Cp)];
        let preds = [pred("a", Landmarks { x_od: 350.0, ..lm })];
        let curve = accuracy_curve(&preds, &truths, Landmark::OpticDisc, 2.0, 0.01).unwrap();
        assert_eq!(curve.len(), 201);
        for (n, pct) in curve {
            assert_eq!(pct, if n > 0.5 { 100.0 } else { 0.0 }, "n = {n}");
        }
    }

    #[test]
    fn curve_grid_hits_unit_exactly() {
        let grid = curve_grid(2.0, 0.01).unwrap();
        assert_eq!(grid[100], 1.0);
        assert_eq!(grid[50], 0.5);
        assert_eq!(*grid.last().unwrap(), 2.0);
    }

    #[test]
    fn join_errors_list_offenders() {
        let lm = Landmarks::new(300.0, 400.0, 0.0, 0.0);
        let truths = [truth("a", lm, Modality::Rg, Gaze::Cp), truth("b", lm, Modality::Rg, Gaze::Cp)];
        let preds = [pred("a", lm), pred("zzz", lm)];
        match landmark_accuracy(&preds, &truths, &DEFAULT_THRESHOLDS) {
            Err(Error::Join(Unmatched(paths))) => assert_eq!(paths, vec!["b".to_string(), "zzz".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn laterality_rules() {
        assert_eq!(infer_laterality(Landmarks::new(300.0, 0.0, 600.0, 0.0)), InferredLaterality::Left);
        assert_eq!(infer_laterality(Landmarks::new(600.0, 0.0, 300.0, 0.0)), InferredLaterality::Right);
        assert_eq!(infer_laterality(Landmarks::new(5.0, 1.0, 5.0, 9.0)), InferredLaterality::Indeterminate);
    }

    #[test]
    fn laterality_accuracy_counts_ties_as_wrong() {
        let lm = Landmarks::new(300.0, 400.0, 600.0, 400.0);
        let truths: Vec<_> = (0..1000).map(|i| truth(&format!("{i}"), lm, Modality::Af, Gaze::Cp)).collect();
        let mut preds: Vec<_> = truths.iter().map(|t| pred(&t.image_path, lm)).collect();
        preds[17].landmarks.x_od = 600.0;
        let acc = inferred_laterality_accuracy(&preds, &truths).unwrap();
        assert_eq!((acc.correct, acc.indeterminate), (999, 1));
        assert!((acc.percent - 99.9).abs() < 1e-9);
    }

    #[test]
    fn classifier_threshold() {
        let lm = Landmarks::new(600.0, 400.0, 300.0, 400.0);
        let truths = [truth("a", lm, Modality::Rg, Gaze::Cp), truth("b", lm, Modality::Rg, Gaze::Cp)];
        let outs = [
            ClassOutput { image_path: "a".into(), p_right: 0.9 },
            ClassOutput { image_path: "b".into(), p_right: 0.5 },
        ];
        let acc = classifier_laterality_accuracy(&outs, &truths).unwrap();
        assert_eq!(acc.correct, 1);
    }

    #[test]
    fn grader_fixtures() {
        let lm = Landmarks::new(300.0, 400.0, 0.0, 0.0);
        let truths = vec![
            truth("rg", lm, Modality::Rg, Gaze::Cp),
            truth("af", lm, Modality::Af, Gaze::Cp),
        ];
        let mut ann = Vec::new();
        for t in &truths {
            ann.push(GraderAnnotation { grader_id: "self".into(), image_path: t.image_path.clone(), landmarks: lm });
            let shifted = Landmarks::new(lm.x_od + 50.0, lm.y_od, lm.x_fovea, lm.y_fovea - 50.0);
            ann.push(GraderAnnotation { grader_id: "half".into(), image_path: t.image_path.clone(), landmarks: shifted });
        }
        let stats = grader_stats(&ann, &truths).unwrap();
        assert_eq!(stats.graders[0].grader_id, "self");
        for cell in stats.graders[0].cells() {
            assert_eq!(cell, Some(MeanStd { mean: 0.0, std: 0.0 }));
        }
        for cell in stats.graders[1].cells() {
            assert_eq!(cell, Some(MeanStd { mean: 0.5, std: 0.0 }));
        }
        assert_eq!(stats.mean.rg_od, Some(MeanStd { mean: 0.25, std: 0.0 }));

        let bad = [GraderAnnotation { grader_id: "x".into(), image_path: "nope".into(), landmarks: lm }];
        assert!(matches!(grader_stats(&bad, &truths), Err(Error::Join(_))));
    }

    #[test]
    fn report_for_rg_cp_only() {
        let lm = Landmarks::new(300.0, 400.0, 0.0, 0.0);
        let truths: Vec<_> = (0..4).map(|i| truth(&format!("{i}"), lm, Modality::Rg, Gaze::Cp)).collect();
        let preds: Vec<_> = truths.iter().map(|t| pred(&t.image_path, lm)).collect();
        let report = stratified_report(&preds, &truths, None, &DEFAULT_THRESHOLDS).unwrap();
        let keys: Vec<_> = report.rows.iter().map(|r| (label(r.modality), label(r.gaze))).collect();
        let expect = [("RG", "All"), ("RG", "CP"), ("All", "All"), ("All", "CP")]
            .map(|(a, b)| (a.to_string(), b.to_string()));
        assert_eq!(keys, expect);
        assert_eq!(report.notes.len(), 5);

        let mut buf = Vec::new();
        write_report_csv(&mut buf, &report, &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "mode,gaze,od_acc_0.25r,od_acc_0.5r,od_acc_1r,fovea_acc_0.25r,fovea_acc_0.5r,fovea_acc_1r,lat_inferred,lat_classifier,images\n"
        ));
        assert!(text.contains("RG,CP,100.00,100.00,100.00,100.00,100.00,100.00,100.00,,4\n"));
    }

    #[test]
    fn prediction_csv_roundtrip() {
        let preds = vec![pred("a.pgm", Landmarks::new(1.5, 2.25, 3.0, 4.125))];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &preds, &["c".into()]).unwrap();
        assert_eq!(read_predictions(&buf[..]).unwrap(), preds);
        assert!(matches!(read_predictions(&b"image_path,x_od\n"[..]), Err(Error::Format(_))));
    }
}
