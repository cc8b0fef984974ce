//! Per-class segmentation metrics, report assembly, and the two
//! experiment drivers (feasibility and robustness).
//!
//! Dice is undefined for a class absent from both maps and TPR for a
//! class absent from the reference; both carry through aggregation as
//! N/A and are excluded from means.

use std::collections::HashMap;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};

use crate::config::format_f64;
use crate::error::{CoreError, Result};
use crate::models::{predict_labels, Architecture, InputMode, Model};
use crate::phantom::sample_id;
use crate::seeding::sub_seed;
use crate::split::DatasetSplit;
use crate::trainer::{self, resolve_ids, TrainConfig, TrainOutcome};
use crate::types::{LabelMap, Sample, SampleId, SampleMeta, Side, Site, TissueClass};

/// One-vs-rest pixel tallies per class. For every class,
/// TP + FP + FN + TN equals the pixel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: [u64; TissueClass::COUNT],
    pub fp: [u64; TissueClass::COUNT],
    pub fn_: [u64; TissueClass::COUNT],
    pub tn: [u64; TissueClass::COUNT],
}

impl ConfusionCounts {
    pub fn zeros() -> ConfusionCounts {
        ConfusionCounts {
            tp: [0; TissueClass::COUNT],
            fp: [0; TissueClass::COUNT],
            fn_: [0; TissueClass::COUNT],
            tn: [0; TissueClass::COUNT],
        }
    }
}

/// Tallies reference/prediction agreement one class against the rest.
pub fn confusion(reference: &LabelMap, prediction: &LabelMap) -> Result<ConfusionCounts> {
    if (reference.height(), reference.width()) != (prediction.height(), prediction.width()) {
        return Err(CoreError::invalid(
            "confusion",
            format!(
                "dimension mismatch: reference {}x{}, prediction {}x{}",
                reference.height(),
                reference.width(),
                prediction.height(),
                prediction.width()
            ),
        ));
    }
    let mut counts = ConfusionCounts::zeros();
    let total = (reference.height() * reference.width()) as u64;
    // Count the joint (ref, pred) histogram once, then derive the
    // one-vs-rest tallies from it.
    let mut joint = [[0u64; TissueClass::COUNT]; TissueClass::COUNT];
    for (&r, &p) in reference.values().iter().zip(prediction.values().iter()) {
        joint[r as usize][p as usize] += 1;
    }
    for c in 0..TissueClass::COUNT {
        let tp = joint[c][c];
        let fn_: u64 = joint[c].iter().sum::<u64>() - tp;
        let fp: u64 = (0..TissueClass::COUNT).map(|r| joint[r][c]).sum::<u64>() - tp;
        counts.tp[c] = tp;
        counts.fn_[c] = fn_;
        counts.fp[c] = fp;
        counts.tn[c] = total - tp - fn_ - fp;
    }
    Ok(counts)
}

/// 2TP / (2TP + FP + FN); `None` when the class appears in neither map.
pub fn dice(counts: &ConfusionCounts, cls: TissueClass) -> Option<f64> {
    let c = cls.code() as usize;
    let denom = 2 * counts.tp[c] + counts.fp[c] + counts.fn_[c];
    if denom == 0 {
        None
    } else {
        Some(2.0 * counts.tp[c] as f64 / denom as f64)
    }
}

/// TP / (TP + FN); `None` when the class is absent from the reference.
pub fn tpr(counts: &ConfusionCounts, cls: TissueClass) -> Option<f64> {
    let c = cls.code() as usize;
    let denom = counts.tp[c] + counts.fn_[c];
    if denom == 0 {
        None
    } else {
        Some(counts.tp[c] as f64 / denom as f64)
    }
}

/// Mean of per-class Dice over the classes present in the reference
/// map; the per-image "all structures" score.
pub fn mean_dice_present(reference: &LabelMap, prediction: &LabelMap) -> Result<f64> {
    let counts = confusion(reference, prediction)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for cls in TissueClass::ALL {
        if tpr(&counts, cls).is_some() {
            // Present in the reference, so Dice is defined.
            sum += dice(&counts, cls).expect("present class has defined dice");
            n += 1;
        }
    }
    debug_assert!(n > 0, "a label map always contains at least one class");
    Ok(sum / n as f64)
}

/// Per-class scores derived from one confusion tally.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub class: TissueClass,
    pub dice: Option<f64>,
    pub tpr: Option<f64>,
}

pub fn class_scores(counts: &ConfusionCounts) -> [ClassScore; TissueClass::COUNT] {
    TissueClass::ALL.map(|class| ClassScore {
        class,
        dice: dice(counts, class),
        tpr: tpr(counts, class),
    })
}

/// Sums confusion tallies over (reference, prediction) pairs. Scores
/// computed from the sum are pixel-pooled rather than means of
/// per-image scores.
pub fn pooled_confusion(pairs: &[(&LabelMap, &LabelMap)]) -> Result<ConfusionCounts> {
    let mut total = ConfusionCounts::zeros();
    for (reference, prediction) in pairs {
        let c = confusion(reference, prediction)?;
        for k in 0..TissueClass::COUNT {
            total.tp[k] += c.tp[k];
            total.fp[k] += c.fp[k];
            total.fn_[k] += c.fn_[k];
            total.tn[k] += c.tn[k];
        }
    }
    Ok(total)
}

/// The five model combinations of the comparison studies, in report
/// column order.
pub const MODEL_COMBOS: [(Architecture, InputMode); 5] = [
    (Architecture::UNet, InputMode::Pa),
    (Architecture::UNet, InputMode::Paus),
    (Architecture::UNet, InputMode::Us),
    (Architecture::Fcnn, InputMode::Pa),
    (Architecture::Fcnn, InputMode::Paus),
];

/// One (model, sample, class) score line of an experiment report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub architecture: Architecture,
    pub input: InputMode,
    pub sample_id: SampleId,
    pub meta: SampleMeta,
    pub class: TissueClass,
    pub dice: Option<f64>,
    pub tpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

/// Scores one model on the given samples: one row per (sample, class),
/// samples ordered by id, classes by code.
pub fn evaluate_model(
    model: &Model<f32>,
    input: InputMode,
    samples: &[&Sample],
) -> Result<Vec<ReportRow>> {
    let mut ordered: Vec<&Sample> = samples.to_vec();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rows = Vec::with_capacity(ordered.len() * TissueClass::COUNT);
    for s in ordered {
        let pred = predict_labels(model, s, input)?;
        let counts = confusion(&s.labels, &pred)?;
        for score in class_scores(&counts) {
            rows.push(ReportRow {
                architecture: model.architecture(),
                input,
                sample_id: s.id.clone(),
                meta: s.meta,
                class: score.class,
                dice: score.dice,
                tpr: score.tpr,
            });
        }
    }
    Ok(rows)
}

/// Metadata dimensions a report can be grouped over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupField {
    Architecture,
    Input,
    Class,
    Volunteer,
    Site,
    Side,
}

/// Values of the grouped fields; ungrouped fields stay `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct GroupKey {
    pub architecture: Option<Architecture>,
    pub input: Option<InputMode>,
    pub class: Option<TissueClass>,
    pub volunteer: Option<u32>,
    pub site: Option<Site>,
    pub side: Option<Side>,
}

impl GroupKey {
    fn of(row: &ReportRow, fields: &[GroupField]) -> GroupKey {
        let mut key = GroupKey::default();
        for f in fields {
            match f {
                GroupField::Architecture => key.architecture = Some(row.architecture),
                GroupField::Input => key.input = Some(row.input),
                GroupField::Class => key.class = Some(row.class),
                GroupField::Volunteer => key.volunteer = Some(row.meta.volunteer_id),
                GroupField::Site => key.site = Some(row.meta.site),
                GroupField::Side => key.side = Some(row.meta.side),
            }
        }
        key
    }

    fn sort_index(&self) -> (usize, usize, u8, u64, usize, usize) {
        let pos = |v: Option<usize>| v.map_or(0, |i| i + 1);
        (
            pos(self
                .architecture
                .map(|a| Architecture::ALL.iter().position(|x| *x == a).unwrap())),
            pos(self
                .input
                .map(|m| InputMode::ALL.iter().position(|x| *x == m).unwrap())),
            self.class.map_or(0, |c| c.code() + 1),
            self.volunteer.map_or(0, |v| v as u64 + 1),
            pos(self.site.map(|s| Site::ALL.iter().position(|x| *x == s).unwrap())),
            pos(self.side.map(|s| Side::ALL.iter().position(|x| *x == s).unwrap())),
        )
    }
}

/// Mean scores for one group; `rows` counts all constituents, defined
/// or not.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupScores {
    pub key: GroupKey,
    pub dice: Option<f64>,
    pub tpr: Option<f64>,
    pub rows: usize,
}

fn mean_opt(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Arithmetic means over the non-N/A scores per group; a group whose
/// constituents are all N/A stays N/A.
pub fn aggregate(report: &ExperimentReport, group_by: &[GroupField]) -> Result<Vec<GroupScores>> {
    if report.rows.is_empty() {
        return Err(CoreError::Query("cannot aggregate an empty report".to_string()));
    }
    let mut groups: HashMap<GroupKey, (Vec<f64>, Vec<f64>, usize)> = HashMap::new();
    for row in &report.rows {
        let entry = groups.entry(GroupKey::of(row, group_by)).or_default();
        if let Some(d) = row.dice {
            entry.0.push(d);
        }
        if let Some(t) = row.tpr {
            entry.1.push(t);
        }
        entry.2 += 1;
    }
    let mut out: Vec<GroupScores> = groups
        .into_iter()
        .map(|(key, (d, t, n))| GroupScores {
            key,
            dice: mean_opt(&d),
            tpr: mean_opt(&t),
            rows: n,
        })
        .collect();
    out.sort_by_key(|g| g.key.sort_index());
    Ok(out)
}

/// Per-sample all-structures score for one model column: mean Dice
/// over the classes present in the sample (present exactly when TPR
/// is defined). Order follows the report's row order.
pub fn per_image_scores(
    report: &ExperimentReport,
    architecture: Architecture,
    input: InputMode,
) -> Vec<(SampleId, Option<f64>)> {
    let mut order: Vec<SampleId> = Vec::new();
    let mut acc: HashMap<SampleId, (f64, usize)> = HashMap::new();
    for row in &report.rows {
        if row.architecture != architecture || row.input != input {
            continue;
        }
        if !acc.contains_key(&row.sample_id) {
            order.push(row.sample_id.clone());
            acc.insert(row.sample_id.clone(), (0.0, 0));
        }
        if row.tpr.is_some() {
            if let Some(d) = row.dice {
                let e = acc.get_mut(&row.sample_id).unwrap();
                e.0 += d;
                e.1 += 1;
            }
        }
    }
    order
        .into_iter()
        .map(|id| {
            let (sum, n) = acc[&id];
            (id, if n > 0 { Some(sum / n as f64) } else { None })
        })
        .collect()
}

/// Mean over samples of one class's per-image Dice for one model
/// column; `None` when every sample's score is N/A.
pub fn mean_class_dice(
    report: &ExperimentReport,
    architecture: Architecture,
    input: InputMode,
    class: TissueClass,
) -> Option<f64> {
    let values: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.architecture == architecture && r.input == input && r.class == class)
        .filter_map(|r| r.dice)
        .collect();
    mean_opt(&values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseStatistic {
    Best,
    Median,
    Worst,
}

/// Picks the sample whose Dice for `class` under one model column is
/// maximal, median (lower-middle on even counts), or minimal. Ties go
/// to the lowest sample id.
pub fn select_cases(
    report: &ExperimentReport,
    architecture: Architecture,
    input: InputMode,
    class: TissueClass,
    statistic: CaseStatistic,
) -> Result<SampleId> {
    let mut scored: Vec<(&SampleId, f64)> = report
        .rows
        .iter()
        .filter(|r| r.architecture == architecture && r.input == input && r.class == class)
        .filter_map(|r| r.dice.map(|d| (&r.sample_id, d)))
        .collect();
    if scored.is_empty() {
        return Err(CoreError::Query(format!(
            "no sample has a defined {} dice for {} {}",
            class, architecture, input
        )));
    }
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("dice is never NaN"));
    let target = match statistic {
        CaseStatistic::Worst => scored[0].1,
        CaseStatistic::Best => scored[scored.len() - 1].1,
        CaseStatistic::Median => scored[(scored.len() - 1) / 2].1,
    };
    Ok(scored
        .iter()
        .filter(|(_, s)| *s == target)
        .map(|(id, _)| (*id).clone())
        .min()
        .expect("target score came from the list"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_else(|| "NA".to_string())
}

pub const REPORT_HEADER: &str = "architecture,input,volunteer,site,side,location,class,dice,tpr";

pub fn write_report_csv(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut text = String::from(REPORT_HEADER);
    text.push('\n');
    for r in &report.rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.architecture,
            r.input,
            r.meta.volunteer_id,
            r.meta.site,
            r.meta.side,
            r.meta.location_index,
            r.class,
            fmt_opt(r.dice),
            fmt_opt(r.tpr),
        ));
    }
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

fn parse_opt(s: &str, what: &'static str) -> Result<Option<f64>> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| CoreError::invalid(what, format!("unparseable number '{s}'")))
}

/// Reads a report back from CSV. Sample ids are rebuilt from the
/// metadata columns via the dataset naming scheme.
pub fn read_report_csv(path: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == REPORT_HEADER => {}
        other => {
            return Err(CoreError::invalid(
                "report csv",
                format!("bad header {:?}", other.unwrap_or("")),
            ))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(CoreError::invalid(
                "report csv",
                format!("line {}: expected 9 fields, got {}", i + 2, f.len()),
            ));
        }
        let volunteer: u32 = f[2]
            .parse()
            .map_err(|_| CoreError::invalid("report csv", format!("bad volunteer '{}'", f[2])))?;
        let location: u8 = f[5]
            .parse()
            .map_err(|_| CoreError::invalid("report csv", format!("bad location '{}'", f[5])))?;
        let meta = SampleMeta::new(volunteer, Site::parse(f[3])?, Side::parse(f[4])?, location)?;
        rows.push(ReportRow {
            architecture: Architecture::parse(f[0])?,
            input: InputMode::parse(f[1])?,
            sample_id: sample_id(&meta),
            meta,
            class: TissueClass::parse(f[6])?,
            dice: parse_opt(f[7], "report csv")?,
            tpr: parse_opt(f[8], "report csv")?,
        });
    }
    Ok(ExperimentReport { rows })
}

/// Display colors for the seven classes, indexed by class code. The
/// table is injective; `docs/palette.md` lists the entries.
pub const LABEL_PALETTE: [[u8; 3]; TissueClass::COUNT] = [
    [158, 11, 15],   // blood
    [233, 180, 130], // skin
    [130, 200, 232], // us_gel
    [247, 216, 66],  // membrane
    [38, 58, 150],   // heavy_water
    [186, 130, 169], // other_tissue
    [96, 96, 96],    // coupling_artefact
];

/// Encodes the label map as an RGB PNG via `LABEL_PALETTE`. The
/// encoder settings are fixed, so equal maps give equal bytes.
pub fn encode_labels_png(labels: &LabelMap) -> Result<Vec<u8>> {
    let (h, w) = (labels.height(), labels.width());
    let mut raw = Vec::with_capacity(h * w * 3);
    for &code in labels.values().iter() {
        raw.extend_from_slice(&LABEL_PALETTE[code as usize]);
    }
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(&raw, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| CoreError::invalid("label image", e.to_string()))?;
    Ok(buf)
}

pub fn render_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    std::fs::write(path, encode_labels_png(labels)?).map_err(|e| CoreError::io(path, e))
}

/// Inverts `LABEL_PALETTE` on an encoded label image; every pixel must
/// be an exact palette color.
pub fn decode_labels_png(bytes: &[u8]) -> Result<LabelMap> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| CoreError::invalid("label image", e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut values = ndarray::Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        let code = LABEL_PALETTE
            .iter()
            .position(|c| *c == p.0)
            .ok_or_else(|| {
                CoreError::invalid(
                    "label image",
                    format!("pixel ({x}, {y}) has a non-palette colour {:?}", p.0),
                )
            })?;
        values[[y as usize, x as usize]] = code as u8;
    }
    LabelMap::new(values)
}

/// Settings of one comparison run: a master seed plus one training
/// template per architecture. Every combination trains from the
/// template matching its architecture, with the combination's input
/// mode and a per-combination sub-seed.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub unet: TrainConfig,
    pub fcnn: TrainConfig,
}

impl ExperimentConfig {
    pub fn new(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            unet: TrainConfig::unet(InputMode::Paus),
            fcnn: TrainConfig::fcnn(InputMode::Paus),
        }
    }
}

/// One trained combination with its resolved config and audit trail.
#[derive(Debug, Clone)]
pub struct ComboRun {
    pub config: TrainConfig,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub runs: Vec<ComboRun>,
}

fn run_combos(
    cfg: &ExperimentConfig,
    train_set: &[&Sample],
    val_set: &[&Sample],
    test_set: &[&Sample],
) -> Result<ExperimentRun> {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (i, (arch, input)) in MODEL_COMBOS.iter().enumerate() {
        let mut tc = match arch {
            Architecture::UNet => cfg.unet.clone(),
            Architecture::Fcnn => cfg.fcnn.clone(),
        };
        tc.architecture = *arch;
        tc.input_mode = *input;
        tc.seed = sub_seed(cfg.seed, i as u64);
        let outcome = trainer::train(&tc, train_set, val_set)?;
        rows.extend(evaluate_model(&outcome.model, *input, test_set)?);
        runs.push(ComboRun {
            config: tc,
            outcome,
        });
    }
    Ok(ExperimentRun {
        report: ExperimentReport { rows },
        runs,
    })
}

/// Trains all five combinations on the split and scores the test set.
pub fn run_feasibility(
    samples: &[Sample],
    split: &DatasetSplit,
    cfg: &ExperimentConfig,
) -> Result<ExperimentRun> {
    let train_set = resolve_ids(samples, &split.train)?;
    let val_set = resolve_ids(samples, &split.val)?;
    let test_set = resolve_ids(samples, &split.test)?;
    run_combos(cfg, &train_set, &val_set, &test_set)
}

/// Site-transfer variant: training (and validation) restricted to
/// forearm and calf acquisitions, scoring restricted to neck.
pub fn run_robustness(
    samples: &[Sample],
    split: &DatasetSplit,
    cfg: &ExperimentConfig,
) -> Result<ExperimentRun> {
    let on_limb = |s: &&Sample| matches!(s.meta.site, Site::Forearm | Site::Calf);
    let train_set: Vec<&Sample> = resolve_ids(samples, &split.train)?
        .into_iter()
        .filter(on_limb)
        .collect();
    let val_set: Vec<&Sample> = resolve_ids(samples, &split.val)?
        .into_iter()
        .filter(on_limb)
        .collect();
    let test_set: Vec<&Sample> = resolve_ids(samples, &split.test)?
        .into_iter()
        .filter(|s| s.meta.site == Site::Neck)
        .collect();
    if train_set.is_empty() {
        return Err(CoreError::config(
            "site-transfer run needs forearm or calf samples in the training split",
        ));
    }
    if test_set.is_empty() {
        return Err(CoreError::config(
            "site-transfer run needs neck samples in the test split",
        ));
    }
    run_combos(cfg, &train_set, &val_set, &test_set)
}
