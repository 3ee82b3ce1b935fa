//! Clip segmentation, exclusion filtering and per-subset metric aggregation.
//!
//! Videos are cut into fixed-length overlapping segments; segments touching
//! a flagged frame (u-turn, reversing, bad gaze, bad GPS) are dropped; the
//! survivors are evaluated on their last frame and the four saliency
//! metrics are aggregated overall, per action and per driving context.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::metrics::{self, FixationSet, MeanAccumulator, SaliencyMap};

/// Frames per segment.
pub const CLIP_LEN_FRAMES: usize = 16;

/// Stride between segment starts (8-frame overlap at length 16).
pub const STRIDE_FRAMES: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("frame {frame}: {message}")]
    BadLabel { frame: usize, message: String },
    #[error("labels cover {have} frames, segment needs frame {need}")]
    MissingLabels { have: usize, need: usize },
    #[error("no labels for video {0}")]
    UnknownVideo(String),
    #[error("frame column must be contiguous from 0, got {got} at row {row}")]
    NonContiguousFrames { row: usize, got: usize },
    #[error("unknown {what}: {value:?}")]
    UnknownValue { what: &'static str, value: String },
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Maneuver label; exactly one per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    None,
    Acc,
    Dec,
    Lat,
    LatLon,
    Stop,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::None => "None",
            Action::Acc => "Acc",
            Action::Dec => "Dec",
            Action::Lat => "Lat",
            Action::LatLon => "Lat/Lon",
            Action::Stop => "Stop",
        })
    }
}

impl FromStr for Action {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "None" => Action::None,
            "Acc" => Action::Acc,
            "Dec" => Action::Dec,
            "Lat" => Action::Lat,
            "Lat/Lon" => Action::LatLon,
            "Stop" => Action::Stop,
            _ => return Err(DatasetError::UnknownValue { what: "action", value: s.into() }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IntersectionType {
    Signalized,
    Unsignalized,
    Roundabout,
    Highway,
    None,
}

impl fmt::Display for IntersectionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntersectionType::Signalized => "Signalized",
            IntersectionType::Unsignalized => "Unsignalized",
            IntersectionType::Roundabout => "Roundabout",
            IntersectionType::Highway => "Highway",
            IntersectionType::None => "none",
        })
    }
}

impl FromStr for IntersectionType {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Signalized" => IntersectionType::Signalized,
            "Unsignalized" => IntersectionType::Unsignalized,
            "Roundabout" => IntersectionType::Roundabout,
            "Highway" => IntersectionType::Highway,
            "none" => IntersectionType::None,
            _ => {
                return Err(DatasetError::UnknownValue { what: "intersection_type", value: s.into() })
            }
        })
    }
}

/// Right-of-way at the frame's intersection; `NA` outside intersections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Priority {
    RoW,
    Yield,
    NA,
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Priority::RoW => "RoW",
            Priority::Yield => "Yield",
            Priority::NA => "n/a",
        })
    }
}

impl FromStr for Priority {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "RoW" => Priority::RoW,
            "Yield" => Priority::Yield,
            "n/a" => Priority::NA,
            _ => return Err(DatasetError::UnknownValue { what: "priority", value: s.into() }),
        })
    }
}

/// Events that disqualify any segment containing them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionFlags {
    pub u_turn: bool,
    pub reversing: bool,
    pub bad_gaze: bool,
    pub bad_gps: bool,
}

impl ExclusionFlags {
    pub fn any(&self) -> bool {
        self.u_turn || self.reversing || self.bad_gaze || self.bad_gps
    }

    /// Parse the semicolon-separated `flags` CSV column; empty means none.
    pub fn parse(s: &str) -> Result<Self, DatasetError> {
        let mut f = Self::default();
        for tok in s.split(';').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "u-turn" => f.u_turn = true,
                "reversing" => f.reversing = true,
                "bad-gaze" => f.bad_gaze = true,
                "bad-gps" => f.bad_gps = true,
                _ => return Err(DatasetError::UnknownValue { what: "flag", value: tok.into() }),
            }
        }
        Ok(f)
    }
}

impl fmt::Display for ExclusionFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.u_turn {
            parts.push("u-turn");
        }
        if self.reversing {
            parts.push("reversing");
        }
        if self.bad_gaze {
            parts.push("bad-gaze");
        }
        if self.bad_gps {
            parts.push("bad-gps");
        }
        f.write_str(&parts.join(";"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub action: Action,
    pub intersection_type: IntersectionType,
    pub priority: Priority,
    pub flags: ExclusionFlags,
}

impl FrameLabel {
    /// Priority must be n/a exactly when there is no intersection.
    pub fn validate(&self, frame: usize) -> Result<(), DatasetError> {
        let at_intersection = self.intersection_type != IntersectionType::None;
        match (at_intersection, self.priority) {
            (true, Priority::NA) => Err(DatasetError::BadLabel {
                frame,
                message: format!("priority required at a {} intersection", self.intersection_type),
            }),
            (false, p) if p != Priority::NA => Err(DatasetError::BadLabel {
                frame,
                message: format!("priority {p} given outside an intersection"),
            }),
            _ => Ok(()),
        }
    }

    /// Table-style context key, e.g. `Signalized/RoW` or `none/n-a`.
    pub fn context_key(&self) -> String {
        format!("{}/{}", self.intersection_type, self.priority).replace("n/a", "n-a")
    }
}

/// Per-frame labels of one video, index = frame number.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLabels {
    pub video: String,
    pub frames: Vec<FrameLabel>,
}

impl VideoLabels {
    /// CSV with header `frame,action,intersection_type,priority,flags`;
    /// frames must run 0, 1, 2, ... without gaps.
    pub fn read_csv<R: Read>(reader: R, video: &str) -> Result<Self, DatasetError> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut frames = Vec::new();
        for (row, rec) in rd.deserialize::<LabelRow>().enumerate() {
            let rec = rec?;
            if rec.frame != row {
                return Err(DatasetError::NonContiguousFrames { row, got: rec.frame });
            }
            let label = FrameLabel {
                action: rec.action.parse()?,
                intersection_type: rec.intersection_type.parse()?,
                priority: rec.priority.parse()?,
                flags: ExclusionFlags::parse(&rec.flags)?,
            };
            label.validate(rec.frame)?;
            frames.push(label);
        }
        Ok(Self { video: video.to_string(), frames })
    }

    pub fn read_csv_file<P: AsRef<Path>>(path: P, video: &str) -> Result<Self, DatasetError> {
        Self::read_csv(std::fs::File::open(path)?, video)
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<(), DatasetError> {
        let mut wr = csv::Writer::from_path(path)?;
        wr.write_record(["frame", "action", "intersection_type", "priority", "flags"])?;
        for (frame, l) in self.frames.iter().enumerate() {
            wr.write_record([
                frame.to_string(),
                l.action.to_string(),
                l.intersection_type.to_string(),
                l.priority.to_string(),
                l.flags.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct LabelRow {
    frame: usize,
    action: String,
    intersection_type: String,
    priority: String,
    flags: String,
}

/// One evaluation clip: frames `start .. start + len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub video: String,
    pub start: usize,
    pub len: usize,
}

impl SegmentSpec {
    /// The prediction target frame.
    pub fn last_frame(&self) -> usize {
        self.start + self.len - 1
    }

    /// Basename (no extension) of this segment's map files.
    pub fn sample_name(&self) -> String {
        format!("{}_{}", self.video, self.last_frame())
    }
}

/// Starts at 0, stride, 2*stride, ... while a full clip still fits. A video
/// shorter than one clip yields nothing (with a warning).
pub fn generate_segments(video: &str, video_length: usize, clip_len: usize, stride: usize) -> Vec<SegmentSpec> {
    assert!(clip_len >= 1 && stride >= 1, "clip_len and stride must be positive");
    if video_length < clip_len {
        log::warn!("video {video} has {video_length} frames, shorter than one {clip_len}-frame clip");
        return Vec::new();
    }
    (0..)
        .map(|i| i * stride)
        .take_while(|start| start + clip_len <= video_length)
        .map(|start| SegmentSpec { video: video.to_string(), start, len: clip_len })
        .collect()
}

/// Split segments into (kept, excluded): a segment is excluded iff any of
/// its frames carries an exclusion flag.
pub fn filter_segments(
    segments: &[SegmentSpec],
    labels: &VideoLabels,
) -> Result<(Vec<SegmentSpec>, Vec<SegmentSpec>), DatasetError> {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for seg in segments {
        if seg.start + seg.len > labels.frames.len() {
            return Err(DatasetError::MissingLabels {
                have: labels.frames.len(),
                need: seg.start + seg.len - 1,
            });
        }
        if labels.frames[seg.start..seg.start + seg.len].iter().any(|l| l.flags.any()) {
            excluded.push(seg.clone());
        } else {
            kept.push(seg.clone());
        }
    }
    Ok((kept, excluded))
}

/// Mean / count / NaN-count triple for one subset and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub mean: Option<f64>,
    pub count: usize,
    pub nan_count: usize,
}

impl From<&MeanAccumulator> for SubsetStats {
    fn from(acc: &MeanAccumulator) -> Self {
        Self { mean: acc.mean(), count: acc.count(), nan_count: acc.nan_count() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub sample: String,
    pub message: String,
}

/// Aggregated evaluation results; serializes with stable key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total_segments: usize,
    pub evaluated: usize,
    pub missing_predictions: Vec<String>,
    pub errors: Vec<SampleError>,
    /// Keys: kld, cc, nss, sim.
    pub overall: BTreeMap<String, SubsetStats>,
    /// Per-action KLD, keyed by action name.
    pub per_action: BTreeMap<String, SubsetStats>,
    /// Per-context KLD, keyed `type/priority`.
    pub per_context: BTreeMap<String, SubsetStats>,
}

impl MetricsReport {
    pub fn save_json<P: AsRef<Path>>(&self, path: P) -> Result<(), DatasetError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json<P: AsRef<Path>>(path: P) -> Result<Self, DatasetError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// True when any sample could not be evaluated.
    pub fn has_problems(&self) -> bool {
        !self.errors.is_empty() || !self.missing_predictions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Percentile used to derive fixations from the ground truth map.
    pub fixation_percentile: f64,
    /// Optional directory of `<video>_<frame>.csv` fixation files; when
    /// absent, fixations are derived from the ground truth.
    pub fixations_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { fixation_percentile: metrics::DEFAULT_FIXATION_PERCENTILE, fixations_dir: None }
    }
}

/// Load `<dir>/<name>.pgm`, falling back to `<name>.bin` float tensors.
/// Returns Ok(None) when neither exists.
fn load_map(dir: &Path, name: &str) -> Result<Option<SaliencyMap>, String> {
    let pgm = dir.join(format!("{name}.pgm"));
    if pgm.exists() {
        return SaliencyMap::from_pgm(&pgm).map(Some).map_err(|e| e.to_string());
    }
    let bin = dir.join(format!("{name}.bin"));
    if bin.exists() {
        return SaliencyMap::from_float_binary(&bin).map(Some).map_err(|e| e.to_string());
    }
    Ok(None)
}

/// Evaluate every kept segment's last frame: predictions against ground
/// truth, KLD/CC/NSS/SIM, aggregated overall and per subset. Subset
/// membership comes from the last frame's labels. Deterministic: segments
/// are processed in (video, start) order regardless of input order.
pub fn evaluate_run(
    kept: &[SegmentSpec],
    labels: &BTreeMap<String, VideoLabels>,
    pred_dir: &Path,
    gt_dir: &Path,
    opts: &EvalOptions,
) -> Result<MetricsReport, DatasetError> {
    let mut order: Vec<&SegmentSpec> = kept.iter().collect();
    order.sort_by(|a, b| (&a.video, a.start).cmp(&(&b.video, b.start)));

    let mut overall: BTreeMap<String, MeanAccumulator> = ["kld", "cc", "nss", "sim"]
        .into_iter()
        .map(|k| (k.to_string(), MeanAccumulator::default()))
        .collect();
    let mut per_action: BTreeMap<String, MeanAccumulator> = BTreeMap::new();
    let mut per_context: BTreeMap<String, MeanAccumulator> = BTreeMap::new();
    let mut missing = Vec::new();
    let mut errors = Vec::new();
    let mut evaluated = 0usize;

    for seg in order {
        let name = seg.sample_name();
        let video_labels =
            labels.get(&seg.video).ok_or_else(|| DatasetError::UnknownVideo(seg.video.clone()))?;
        let frame = seg.last_frame();
        if frame >= video_labels.frames.len() {
            return Err(DatasetError::MissingLabels { have: video_labels.frames.len(), need: frame });
        }
        let label = video_labels.frames[frame];

        let gt = match load_map(gt_dir, &name) {
            Ok(Some(m)) => m,
            Ok(None) => {
                errors.push(SampleError { sample: name, message: "ground truth map missing".into() });
                continue;
            }
            Err(e) => {
                errors.push(SampleError { sample: name, message: format!("ground truth: {e}") });
                continue;
            }
        };
        let pred = match load_map(pred_dir, &name) {
            Ok(Some(m)) => m,
            Ok(None) => {
                missing.push(name);
                continue;
            }
            Err(e) => {
                errors.push(SampleError { sample: name, message: format!("prediction: {e}") });
                continue;
            }
        };

        let fixations = match &opts.fixations_dir {
            Some(dir) => {
                let p = dir.join(format!("{name}.csv"));
                match FixationSet::read_csv_file(&p) {
                    Ok(f) => f,
                    Err(e) => {
                        errors.push(SampleError { sample: name, message: format!("fixations: {e}") });
                        continue;
                    }
                }
            }
            None => match metrics::fixations_from_map(&gt, opts.fixation_percentile) {
                Ok(f) => f,
                Err(e) => {
                    errors.push(SampleError { sample: name, message: format!("fixations: {e}") });
                    continue;
                }
            },
        };

        let scores = (|| -> Result<[f64; 4], metrics::MetricError> {
            Ok([
                metrics::kld(&pred, &gt)?,
                metrics::cc(&pred, &gt)?,
                metrics::nss(&pred, &fixations)?,
                metrics::sim(&pred, &gt)?,
            ])
        })();
        let [kld, cc, nss, sim] = match scores {
            Ok(s) => s,
            Err(e) => {
                errors.push(SampleError { sample: name, message: e.to_string() });
                continue;
            }
        };

        evaluated += 1;
        overall.get_mut("kld").unwrap().push(kld);
        overall.get_mut("cc").unwrap().push(cc);
        overall.get_mut("nss").unwrap().push(nss);
        overall.get_mut("sim").unwrap().push(sim);
        per_action.entry(label.action.to_string()).or_default().push(kld);
        per_context.entry(label.context_key()).or_default().push(kld);
    }

    Ok(MetricsReport {
        total_segments: kept.len(),
        evaluated,
        missing_predictions: missing,
        errors,
        overall: overall.iter().map(|(k, v)| (k.clone(), v.into())).collect(),
        per_action: per_action.iter().map(|(k, v)| (k.clone(), v.into())).collect(),
        per_context: per_context.iter().map(|(k, v)| (k.clone(), v.into())).collect(),
    })
}
