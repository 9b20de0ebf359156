//! NGSIM-format trajectory ingestion, lane-change event detection and
//! yield/pass labeling.
//!
//! # Input format
//!
//! A CSV with a header row. Column names are matched case-insensitively and
//! extra columns are ignored:
//!
//! | column      | meaning                                   |
//! |-------------|-------------------------------------------|
//! | `Vehicle_ID`| vehicle identifier                        |
//! | `Frame_ID`  | frame index, 0.1 s apart                  |
//! | `Local_X`   | lateral position                          |
//! | `Local_Y`   | longitudinal position (direction of travel) |
//! | `v_Vel`     | speed                                     |
//! | `v_Acc`     | acceleration                              |
//! | `Lane_ID`   | lane, 1 = leftmost main lane              |
//! | `v_Class`   | 1 motorcycle, 2 auto, 3 truck             |
//!
//! Raw NGSIM files are in feet. An optional first line `#units=meters` (or
//! `#units=feet`) declares the unit system; without it, feet are assumed and
//! lengths, speeds and accelerations are converted with 0.3048 m/ft.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::intent_bn::{EvidenceVector, Intent, LabeledEvidence};
use crate::svo;
use crate::{Error, Result};

pub const FEET_TO_METERS: f64 = 0.3048;
pub const FRAME_DT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Feet,
    Meters,
}

impl Units {
    fn scale(self) -> f64 {
        match self {
            Units::Feet => FEET_TO_METERS,
            Units::Meters => 1.0,
        }
    }
}

/// One vehicle at one frame, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub vehicle_id: u32,
    pub frame_id: u32,
    pub local_x: f64,
    pub local_y: f64,
    pub speed: f64,
    pub accel: f64,
    pub lane_id: u32,
    pub vehicle_class: u32,
}

const COLUMNS: [&str; 8] = [
    "vehicle_id",
    "frame_id",
    "local_x",
    "local_y",
    "v_vel",
    "v_acc",
    "lane_id",
    "v_class",
];

pub fn load_trajectories(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trajectories(file, path)
}

/// Parses the CSV format described in the module docs; `source` only labels
/// error messages.
pub fn parse_trajectories<R: Read>(mut input: R, source: &Path) -> Result<Vec<TrajectoryRecord>> {
    let mut text = String::new();
    input
        .read_to_string(&mut text)
        .map_err(|e| Error::io(source, e))?;
    let data_err = |line: u64, message: String| Error::Data {
        path: source.to_path_buf(),
        line,
        message,
    };

    let mut units = Units::Feet;
    if let Some(first) = text.lines().next() {
        if let Some(directive) = first.trim().strip_prefix('#') {
            let value = directive
                .trim()
                .strip_prefix("units=")
                .ok_or_else(|| data_err(1, format!("unknown directive {first:?}")))?;
            units = match value.trim().to_ascii_lowercase().as_str() {
                "feet" | "ft" => Units::Feet,
                "meters" | "m" => Units::Meters,
                other => return Err(data_err(1, format!("unknown units {other:?}"))),
            };
        }
    }

    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 8];
    for (slot, name) in idx.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| data_err(1, format!("missing column {name:?}")))?;
    }

    let scale = units.scale();
    let mut out = Vec::new();
    let mut lines_of = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<&str> {
            row.get(idx[i])
                .ok_or_else(|| data_err(line, format!("missing field {:?}", COLUMNS[i])))
        };
        let int = |i: usize| -> Result<u32> {
            let s = field(i)?;
            s.parse::<u32>()
                .or_else(|_| {
                    // Some exports write integers as "12.0".
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.fract() == 0.0 && *v >= 0.0 && *v <= u32::MAX as f64)
                        .map(|v| v as u32)
                        .ok_or(())
                })
                .map_err(|_| data_err(line, format!("{}: expected a non-negative integer, got {s:?}", COLUMNS[i])))
        };
        let real = |i: usize| -> Result<f64> {
            let s = field(i)?;
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| data_err(line, format!("{}: expected a number, got {s:?}", COLUMNS[i])))
        };
        lines_of.push(line);
        out.push(TrajectoryRecord {
            vehicle_id: int(0)?,
            frame_id: int(1)?,
            local_x: real(2)? * scale,
            local_y: real(3)? * scale,
            speed: real(4)? * scale,
            accel: real(5)? * scale,
            lane_id: int(6)?,
            vehicle_class: int(7)?,
        });
    }

    let mut seen: HashMap<(u32, u32), u64> = HashMap::with_capacity(out.len());
    for (r, &line) in out.iter().zip(&lines_of) {
        if let Some(first) = seen.insert((r.vehicle_id, r.frame_id), line) {
            return Err(data_err(
                line,
                format!(
                    "duplicate record for vehicle {} frame {} (first at line {first})",
                    r.vehicle_id, r.frame_id
                ),
            ));
        }
    }
    out.sort_by_key(|r| (r.vehicle_id, r.frame_id));
    Ok(out)
}

pub fn write_trajectories<W: Write>(records: &[TrajectoryRecord], units: Units, mut out: W) -> Result<()> {
    let tag = match units {
        Units::Feet => "feet",
        Units::Meters => "meters",
    };
    writeln!(out, "#units={tag}").map_err(|e| Error::io("<trajectories>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["Vehicle_ID", "Frame_ID", "Local_X", "Local_Y", "v_Vel", "v_Acc", "Lane_ID", "v_Class"])?;
    let s = 1.0 / units.scale();
    for r in records {
        w.write_record([
            r.vehicle_id.to_string(),
            r.frame_id.to_string(),
            (r.local_x * s).to_string(),
            (r.local_y * s).to_string(),
            (r.speed * s).to_string(),
            (r.accel * s).to_string(),
            r.lane_id.to_string(),
            r.vehicle_class.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<trajectories>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Frames on each side of the lane-change point.
    pub half_window: u32,
    pub svo_window_s: f64,
    pub excluded_lanes: Vec<u32>,
    pub excluded_classes: Vec<u32>,
    /// Mean conflict-vehicle SVO at or above this supports a yield label.
    pub svo_yield_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            half_window: 30,
            svo_window_s: svo::DEFAULT_WINDOW_S,
            excluded_lanes: vec![6, 7, 8],
            excluded_classes: vec![1, 3],
            svo_yield_threshold: 45.0,
        }
    }
}

/// Drops ramp/auxiliary lanes and motorcycles and trucks.
pub fn filter_records(records: &[TrajectoryRecord], cfg: &PipelineConfig) -> Vec<TrajectoryRecord> {
    records
        .iter()
        .filter(|r| !cfg.excluded_lanes.contains(&r.lane_id) && !cfg.excluded_classes.contains(&r.vehicle_class))
        .copied()
        .collect()
}

/// Lookup structure over a record set.
#[derive(Debug, Clone)]
pub struct TrajectoryIndex {
    records: Vec<TrajectoryRecord>,
    by_vehicle: BTreeMap<u32, std::ops::Range<usize>>,
    by_key: HashMap<(u32, u32), usize>,
    by_frame: HashMap<u32, Vec<usize>>,
}

impl TrajectoryIndex {
    pub fn new(records: &[TrajectoryRecord]) -> Self {
        let mut records = records.to_vec();
        records.sort_by_key(|r| (r.vehicle_id, r.frame_id));
        let mut by_vehicle = BTreeMap::new();
        let mut by_key = HashMap::with_capacity(records.len());
        let mut by_frame: HashMap<u32, Vec<usize>> = HashMap::new();
        let mut start = 0;
        for i in 0..records.len() {
            let r = &records[i];
            by_key.insert((r.vehicle_id, r.frame_id), i);
            by_frame.entry(r.frame_id).or_default().push(i);
            let last = i + 1 == records.len() || records[i + 1].vehicle_id != r.vehicle_id;
            if last {
                by_vehicle.insert(r.vehicle_id, start..i + 1);
                start = i + 1;
            }
        }
        Self {
            records,
            by_vehicle,
            by_key,
            by_frame,
        }
    }

    pub fn vehicle(&self, id: u32) -> &[TrajectoryRecord] {
        self.by_vehicle
            .get(&id)
            .map(|r| &self.records[r.clone()])
            .unwrap_or(&[])
    }

    pub fn vehicle_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_vehicle.keys().copied()
    }

    pub fn at(&self, vehicle: u32, frame: u32) -> Option<&TrajectoryRecord> {
        self.by_key.get(&(vehicle, frame)).map(|&i| &self.records[i])
    }

    pub fn in_frame(&self, frame: u32) -> impl Iterator<Item = &TrajectoryRecord> {
        self.by_frame
            .get(&frame)
            .into_iter()
            .flatten()
            .map(|&i| &self.records[i])
    }

    /// `(time, longitudinal position)` series of one vehicle.
    pub fn longitudinal(&self, vehicle: u32) -> Vec<(f64, f64)> {
        self.vehicle(vehicle)
            .iter()
            .map(|r| (r.frame_id as f64 * FRAME_DT, r.local_y))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventLabel {
    Yield,
    Pass,
    Ambiguous,
}

impl EventLabel {
    pub fn intent(self) -> Option<Intent> {
        match self {
            EventLabel::Yield => Some(Intent::Yield),
            EventLabel::Pass => Some(Intent::Pass),
            EventLabel::Ambiguous => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneChangeEvent {
    pub ego_id: u32,
    pub conflict_id: Option<u32>,
    pub lc_frame: u32,
    pub start_frame: u32,
    pub end_frame: u32,
    pub source_lane: u32,
    pub target_lane: u32,
    pub label: Option<EventLabel>,
    /// Mean conflict-vehicle SVO over the window, when computable.
    pub mean_svo: Option<f64>,
}

/// Adjacent-lane changes with a full window inside the vehicle's span and a
/// leader in the source lane at the window start.
pub fn detect_lane_changes(index: &TrajectoryIndex, cfg: &PipelineConfig) -> Vec<LaneChangeEvent> {
    let hw = cfg.half_window;
    let mut events = Vec::new();
    for id in index.vehicle_ids() {
        let recs = index.vehicle(id);
        let (Some(first), Some(last)) = (recs.first(), recs.last()) else {
            continue;
        };
        for pair in recs.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.lane_id == b.lane_id || a.lane_id.abs_diff(b.lane_id) != 1 {
                continue;
            }
            let lc = b.frame_id;
            let Some(start) = lc.checked_sub(hw) else {
                continue;
            };
            let end = lc + hw;
            if start < first.frame_id || end > last.frame_id {
                continue;
            }
            let Some(ego_start) = index.at(id, start) else {
                continue;
            };
            let has_leader = index.in_frame(start).any(|r| {
                r.vehicle_id != id && r.lane_id == ego_start.lane_id && r.local_y > ego_start.local_y
            });
            if !has_leader {
                continue;
            }
            events.push(LaneChangeEvent {
                ego_id: id,
                conflict_id: None,
                lc_frame: lc,
                start_frame: start,
                end_frame: end,
                source_lane: a.lane_id,
                target_lane: b.lane_id,
                label: None,
                mean_svo: None,
            });
        }
    }
    events
}

/// Nearest vehicle behind the ego in the target lane at the window start.
pub fn find_conflicting_vehicle(event: &LaneChangeEvent, index: &TrajectoryIndex) -> Option<u32> {
    let ego = index.at(event.ego_id, event.start_frame)?;
    index
        .in_frame(event.start_frame)
        .filter(|r| r.vehicle_id != event.ego_id && r.lane_id == event.target_lane && r.local_y < ego.local_y)
        .max_by(|a, b| a.local_y.total_cmp(&b.local_y).then(b.vehicle_id.cmp(&a.vehicle_id)))
        .map(|r| r.vehicle_id)
}

/// Mean SVO of the conflict vehicle over the event window, ego as its sole
/// neighbor; frames lacking a full history window are left out.
pub fn mean_conflict_svo(event: &LaneChangeEvent, index: &TrajectoryIndex, cfg: &PipelineConfig) -> Option<f64> {
    let conflict = event.conflict_id?;
    let subject = index.longitudinal(conflict);
    let neighbor = index.longitudinal(event.ego_id);
    let angles: Vec<f64> = (event.start_frame..=event.end_frame)
        .filter_map(|f| svo::pairwise_svo(&subject, &neighbor, f as f64 * FRAME_DT, cfg.svo_window_s).ok())
        .map(|a| a.degrees())
        .collect();
    (!angles.is_empty()).then(|| angles.iter().sum::<f64>() / angles.len() as f64)
}

/// Primary criterion: who is ahead between the window start and the
/// lane-change point. The ego's lane index flips when its lateral center
/// crosses the boundary, so being ahead at `lc_frame` means it completed the
/// change first.
fn primary_label(event: &LaneChangeEvent, index: &TrajectoryIndex) -> Option<EventLabel> {
    let conflict = event.conflict_id?;
    for f in event.start_frame..=event.lc_frame {
        let (Some(e), Some(c)) = (index.at(event.ego_id, f), index.at(conflict, f)) else {
            continue;
        };
        if c.local_y >= e.local_y {
            return Some(EventLabel::Pass);
        }
    }
    let e = index.at(event.ego_id, event.lc_frame)?;
    let c = index.at(conflict, event.lc_frame)?;
    (e.local_y > c.local_y).then_some(EventLabel::Yield)
}

/// Combines the positional and SVO criteria; disagreement, or no usable
/// positional evidence, gives `Ambiguous`. When the SVO mean cannot be
/// computed the positional label stands alone.
pub fn label_event(event: &LaneChangeEvent, index: &TrajectoryIndex, cfg: &PipelineConfig) -> EventLabel {
    let Some(primary) = primary_label(event, index) else {
        return EventLabel::Ambiguous;
    };
    let secondary = mean_conflict_svo(event, index, cfg).map(|m| {
        if m >= cfg.svo_yield_threshold {
            EventLabel::Yield
        } else {
            EventLabel::Pass
        }
    });
    match secondary {
        Some(s) if s != primary => EventLabel::Ambiguous,
        _ => primary,
    }
}

/// One frame of evidence with its event's label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub evidence: EvidenceVector,
    pub label: Intent,
    pub ego_id: u32,
    pub conflict_id: u32,
    pub frame: u32,
}

impl LabeledSample {
    pub fn labeled_evidence(&self) -> LabeledEvidence {
        LabeledEvidence {
            evidence: self.evidence,
            intent: self.label,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleExtraction {
    pub samples: Vec<LabeledSample>,
    /// In-window frames dropped for lack of SVO history or missing records.
    pub skipped_frames: usize,
}

pub fn extract_samples(events: &[LaneChangeEvent], index: &TrajectoryIndex, cfg: &PipelineConfig) -> SampleExtraction {
    let mut out = SampleExtraction::default();
    for ev in events {
        let (Some(conflict), Some(intent)) = (ev.conflict_id, ev.label.and_then(EventLabel::intent)) else {
            continue;
        };
        let subject = index.longitudinal(conflict);
        let neighbor = index.longitudinal(ev.ego_id);
        for f in ev.start_frame..=ev.end_frame {
            let t = f as f64 * FRAME_DT;
            let pair = index.at(ev.ego_id, f).zip(index.at(conflict, f));
            let angle = svo::pairwise_svo(&subject, &neighbor, t, cfg.svo_window_s);
            let (Some((e, c)), Ok(angle)) = (pair, angle) else {
                out.skipped_frames += 1;
                continue;
            };
            out.samples.push(LabeledSample {
                evidence: EvidenceVector {
                    svo: angle.degrees(),
                    ra: e.accel - c.accel,
                    rv: e.speed - c.speed,
                    rd: e.local_y - c.local_y,
                },
                label: intent,
                ego_id: ev.ego_id,
                conflict_id: conflict,
                frame: f,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub records_loaded: usize,
    pub records_kept: usize,
    pub events_detected: usize,
    pub events_without_conflict: usize,
    pub yield_events: usize,
    pub pass_events: usize,
    pub ambiguous_events: usize,
    pub yield_frames: usize,
    pub pass_frames: usize,
    pub skipped_frames: usize,
    pub mean_svo_yield: Option<f64>,
    pub mean_svo_pass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelOutput {
    pub events: Vec<LaneChangeEvent>,
    pub samples: Vec<LabeledSample>,
    pub report: LabelReport,
}

/// Full pipeline: filter, detect, resolve conflicts, label, extract.
pub fn label_dataset(records: &[TrajectoryRecord], cfg: &PipelineConfig) -> LabelOutput {
    let kept = filter_records(records, cfg);
    let index = TrajectoryIndex::new(&kept);
    let detected = detect_lane_changes(&index, cfg);
    let mut report = LabelReport {
        records_loaded: records.len(),
        records_kept: kept.len(),
        events_detected: detected.len(),
        ..Default::default()
    };
    let mut events = Vec::new();
    for mut ev in detected {
        let Some(conflict) = find_conflicting_vehicle(&ev, &index) else {
            report.events_without_conflict += 1;
            continue;
        };
        ev.conflict_id = Some(conflict);
        ev.mean_svo = mean_conflict_svo(&ev, &index, cfg);
        let label = label_event(&ev, &index, cfg);
        match label {
            EventLabel::Yield => report.yield_events += 1,
            EventLabel::Pass => report.pass_events += 1,
            EventLabel::Ambiguous => report.ambiguous_events += 1,
        }
        ev.label = Some(label);
        events.push(ev);
    }
    let extraction = extract_samples(&events, &index, cfg);
    report.skipped_frames = extraction.skipped_frames;
    let mean = |intent: Intent| {
        let v: Vec<f64> = extraction
            .samples
            .iter()
            .filter(|s| s.label == intent)
            .map(|s| s.evidence.svo)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    report.yield_frames = extraction.samples.iter().filter(|s| s.label == Intent::Yield).count();
    report.pass_frames = extraction.samples.len() - report.yield_frames;
    report.mean_svo_yield = mean(Intent::Yield);
    report.mean_svo_pass = mean(Intent::Pass);
    LabelOutput {
        events,
        samples: extraction.samples,
        report,
    }
}

const SAMPLE_HEADER: [&str; 8] = ["svo", "ra", "rv", "rd", "label", "ego_id", "conflict_id", "frame"];

pub fn write_samples<W: Write>(samples: &[LabeledSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SAMPLE_HEADER)?;
    for s in samples {
        w.write_record([
            s.evidence.svo.to_string(),
            s.evidence.ra.to_string(),
            s.evidence.rv.to_string(),
            s.evidence.rd.to_string(),
            s.label.name().to_string(),
            s.ego_id.to_string(),
            s.conflict_id.to_string(),
            s.frame.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<samples>", e))?;
    Ok(())
}

pub fn read_samples<R: Read>(input: R, source: &Path) -> Result<Vec<LabeledSample>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let data_err = |line: u64, message: String| Error::Data {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut idx = [0usize; 8];
    for (slot, name) in idx.iter_mut().zip(SAMPLE_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| data_err(1, format!("missing column {name:?}")))?;
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let get = |i: usize| row.get(idx[i]).unwrap_or("");
        let real = |i: usize| -> Result<f64> {
            get(i)
                .parse::<f64>()
                .map_err(|_| data_err(line, format!("{}: expected a number, got {:?}", SAMPLE_HEADER[i], get(i))))
        };
        let int = |i: usize| -> Result<u32> {
            get(i)
                .parse::<u32>()
                .map_err(|_| data_err(line, format!("{}: expected an integer, got {:?}", SAMPLE_HEADER[i], get(i))))
        };
        let label = match get(4).to_ascii_lowercase().as_str() {
            "yield" => Intent::Yield,
            "pass" => Intent::Pass,
            other => return Err(data_err(line, format!("label must be yield or pass, got {other:?}"))),
        };
        out.push(LabeledSample {
            evidence: EvidenceVector {
                svo: real(0)?,
                ra: real(1)?,
                rv: real(2)?,
                rd: real(3)?,
            },
            label,
            ego_id: int(5)?,
            conflict_id: int(6)?,
            frame: int(7)?,
        });
    }
    Ok(out)
}

pub fn load_samples(path: &Path) -> Result<Vec<LabeledSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_samples(file, path)
}
