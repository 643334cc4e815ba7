//! Person-level track format, label taxonomy, windowing and dataset splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{BBox, NUM_KEYPOINTS};

pub const TRACKS_SCHEMA: &str = "jpl_social_tracks/1";
pub const CANONICAL_FPS: f64 = 30.0;
pub const DEFAULT_WINDOW: usize = 30;

/// Stored pixel coordinates live on a dyadic grid of this many steps per pixel,
/// which keeps `x -> W - x` and crop translations exact in f64.
const COORD_GRID: f64 = 65536.0;

#[inline]
pub fn snap(v: f64) -> f64 {
    (v * COORD_GRID).round() / COORD_GRID
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentLabel {
    Interacting,
    Interested,
    NotInterested,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttitudeLabel {
    Positive,
    Negative,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionLabel {
    Handshake,
    Hug,
    Pet,
    Wave,
    PointConverse,
    Punch,
    Throw,
    Leave,
    Gaze,
    NoResponse,
}

impl IntentLabel {
    pub const ALL: [IntentLabel; 3] = [
        IntentLabel::Interacting,
        IntentLabel::Interested,
        IntentLabel::NotInterested,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            IntentLabel::Interacting => "interacting",
            IntentLabel::Interested => "interested",
            IntentLabel::NotInterested => "not_interested",
        }
    }
}

impl AttitudeLabel {
    /// The two classes the attitude head predicts.
    pub const CLASSES: [AttitudeLabel; 2] = [AttitudeLabel::Positive, AttitudeLabel::Negative];

    /// Class index for the 2-way head; `None` for not_applicable.
    pub fn index(self) -> Option<usize> {
        match self {
            AttitudeLabel::Positive => Some(0),
            AttitudeLabel::Negative => Some(1),
            AttitudeLabel::NotApplicable => None,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::CLASSES.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AttitudeLabel::Positive => "positive",
            AttitudeLabel::Negative => "negative",
            AttitudeLabel::NotApplicable => "not_applicable",
        }
    }
}

impl ActionLabel {
    pub const ALL: [ActionLabel; 10] = [
        ActionLabel::Handshake,
        ActionLabel::Hug,
        ActionLabel::Pet,
        ActionLabel::Wave,
        ActionLabel::PointConverse,
        ActionLabel::Punch,
        ActionLabel::Throw,
        ActionLabel::Leave,
        ActionLabel::Gaze,
        ActionLabel::NoResponse,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionLabel::Handshake => "handshake",
            ActionLabel::Hug => "hug",
            ActionLabel::Pet => "pet",
            ActionLabel::Wave => "wave",
            ActionLabel::PointConverse => "point_converse",
            ActionLabel::Punch => "punch",
            ActionLabel::Throw => "throw",
            ActionLabel::Leave => "leave",
            ActionLabel::Gaze => "gaze",
            ActionLabel::NoResponse => "no_response",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|a| a.name() == s)
    }
}

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn intent_from_action(action: ActionLabel) -> IntentLabel {
    match action {
        ActionLabel::Gaze => IntentLabel::Interested,
        ActionLabel::NoResponse => IntentLabel::NotInterested,
        _ => IntentLabel::Interacting,
    }
}

pub fn attitude_from_action(action: ActionLabel) -> AttitudeLabel {
    match action {
        ActionLabel::Punch | ActionLabel::Throw => AttitudeLabel::Negative,
        ActionLabel::Gaze | ActionLabel::NoResponse => AttitudeLabel::NotApplicable,
        _ => AttitudeLabel::Positive,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Labels {
    pub intent: IntentLabel,
    pub attitude: AttitudeLabel,
    pub action: ActionLabel,
}

impl Labels {
    pub fn from_action(action: ActionLabel) -> Self {
        Labels {
            intent: intent_from_action(action),
            attitude: attitude_from_action(action),
            action,
        }
    }

    pub fn check(&self, track_id: &str) -> Result<()> {
        let expected = Labels::from_action(self.action);
        if self.intent != expected.intent {
            return Err(Error::InconsistentLabels {
                track_id: track_id.to_string(),
                message: format!(
                    "labels.intent is {} but action {} implies {}",
                    self.intent.name(),
                    self.action,
                    expected.intent.name()
                ),
            });
        }
        if self.attitude != expected.attitude {
            return Err(Error::InconsistentLabels {
                track_id: track_id.to_string(),
                message: format!(
                    "labels.attitude is {} but action {} implies {}",
                    self.attitude.name(),
                    self.action,
                    expected.attitude.name()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub t: u64,
    pub bbox: BBox,
    pub keypoints: Vec<Keypoint>,
}

impl FrameRecord {
    pub(crate) fn snap_in_place(&mut self) {
        self.bbox = BBox::new(
            snap(self.bbox.x),
            snap(self.bbox.y),
            snap(self.bbox.w),
            snap(self.bbox.h),
        );
        for kp in &mut self.keypoints {
            kp.x = snap(kp.x);
            kp.y = snap(kp.y);
        }
    }
}

/// Links an augmented track back to the track it was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_track_id: String,
    pub transform: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: String,
    pub video_id: String,
    pub fps: f64,
    pub frames: Vec<FrameRecord>,
    pub labels: Labels,
    pub provenance: Option<Provenance>,
}

impl Track {
    /// Id of the original track this one descends from (itself when not augmented).
    pub fn source_id(&self) -> &str {
        self.provenance
            .as_ref()
            .map(|p| p.source_track_id.as_str())
            .unwrap_or(&self.track_id)
    }

    pub fn validate(&self) -> Result<()> {
        let rec = || format!("track {}", self.track_id);
        if self.frames.is_empty() {
            return Err(Error::schema(rec(), "frames", "track has no frames"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::schema(rec(), "fps", format!("fps must be positive, got {}", self.fps)));
        }
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.keypoints.len() != NUM_KEYPOINTS {
                return Err(Error::schema(
                    rec(),
                    format!("frames[{i}].keypoints"),
                    format!("expected {NUM_KEYPOINTS} keypoints, found {}", frame.keypoints.len()),
                ));
            }
            let b = frame.bbox;
            if ![b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite()) || b.w <= 0.0 || b.h <= 0.0 {
                return Err(Error::schema(
                    rec(),
                    format!("frames[{i}].bbox"),
                    format!("box must be finite with w,h > 0, got {:?}", b.to_array()),
                ));
            }
            for (k, kp) in frame.keypoints.iter().enumerate() {
                if !(kp.x.is_finite() && kp.y.is_finite()) {
                    return Err(Error::schema(
                        rec(),
                        format!("frames[{i}].keypoints[{k}]"),
                        "non-finite coordinate",
                    ));
                }
                if !(0.0..=1.0).contains(&kp.c) {
                    return Err(Error::schema(
                        rec(),
                        format!("frames[{i}].keypoints[{k}][2]"),
                        format!("confidence {} outside [0,1]", kp.c),
                    ));
                }
            }
            if i > 0 && frame.t <= self.frames[i - 1].t {
                return Err(Error::Monotonicity {
                    track_id: self.track_id.clone(),
                    index: i,
                    prev: self.frames[i - 1].t,
                    next: frame.t,
                });
            }
        }
        self.labels.check(&self.track_id)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: String,
}

#[derive(Serialize, Deserialize)]
struct RawFrame {
    t: u64,
    bbox: [f64; 4],
    keypoints: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrack {
    track_id: String,
    video_id: String,
    fps: f64,
    labels: Labels,
    frames: Vec<RawFrame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl From<&Track> for RawTrack {
    fn from(t: &Track) -> Self {
        RawTrack {
            track_id: t.track_id.clone(),
            video_id: t.video_id.clone(),
            fps: t.fps,
            labels: t.labels,
            frames: t
                .frames
                .iter()
                .map(|f| RawFrame {
                    t: f.t,
                    bbox: f.bbox.to_array(),
                    keypoints: f.keypoints.iter().map(|k| [k.x, k.y, k.c]).collect(),
                })
                .collect(),
            provenance: t.provenance.clone(),
        }
    }
}

impl From<RawTrack> for Track {
    fn from(r: RawTrack) -> Self {
        let mut frames: Vec<FrameRecord> = r
            .frames
            .into_iter()
            .map(|f| FrameRecord {
                t: f.t,
                bbox: BBox::new(f.bbox[0], f.bbox[1], f.bbox[2], f.bbox[3]),
                keypoints: f
                    .keypoints
                    .into_iter()
                    .map(|[x, y, c]| Keypoint { x, y, c })
                    .collect(),
            })
            .collect();
        frames.iter_mut().for_each(FrameRecord::snap_in_place);
        Track {
            track_id: r.track_id,
            video_id: r.video_id,
            fps: r.fps,
            frames,
            labels: r.labels,
            provenance: r.provenance,
        }
    }
}

/// One JSON line for a track (no trailing newline).
pub fn track_to_json(track: &Track) -> String {
    serde_json::to_string(&RawTrack::from(track)).expect("track serializes")
}

pub fn write_tracks<'a, W: Write>(mut out: W, tracks: impl IntoIterator<Item = &'a Track>) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::to_string(&Header { schema_version: TRACKS_SCHEMA.into() })?)?;
    for track in tracks {
        writeln!(out, "{}", track_to_json(track))?;
    }
    out.flush()
}

pub fn save_tracks(path: &Path, tracks: &[Track]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tracks(BufWriter::new(file), tracks).map_err(|e| Error::io(path, e))
}

/// Reads and validates a JSON-Lines track file from any reader.
pub fn read_tracks<R: BufRead>(reader: R, source: &str) -> Result<Vec<Track>> {
    let mut lines = reader.lines().enumerate();
    let header_line = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(source, e))?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
            None => return Err(Error::schema(source, "schema_version", "empty file")),
        }
    };
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| Error::schema(format!("{source}:1"), "schema_version", e.to_string()))?;
    if header.schema_version != TRACKS_SCHEMA {
        return Err(Error::schema(
            format!("{source}:1"),
            "schema_version",
            format!("expected {TRACKS_SCHEMA}, found {}", header.schema_version),
        ));
    }
    let mut tracks = Vec::new();
    for (n, line) in lines {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTrack = serde_json::from_str(&line).map_err(|e| {
            Error::schema(format!("{source}:{}", n + 1), format!("column {}", e.column()), e.to_string())
        })?;
        let track = Track::from(raw);
        track.validate()?;
        tracks.push(track);
    }
    Ok(tracks)
}

pub fn parse_tracks(path: &Path) -> Result<Vec<Track>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tracks(BufReader::new(file), &path.display().to_string())
}

/// Resamples to 30 fps by nearest-frame selection; tracks already at 30 fps are returned as-is.
pub fn resample_to_canonical(track: &Track) -> Track {
    if (track.fps - CANONICAL_FPS).abs() < 1e-9 {
        return track.clone();
    }
    let n = track.frames.len();
    let duration = n as f64 / track.fps;
    let out_len = ((duration * CANONICAL_FPS).round() as usize).max(1);
    let frames = (0..out_len)
        .map(|k| {
            let src = ((k as f64 * track.fps / CANONICAL_FPS).round() as usize).min(n - 1);
            FrameRecord {
                t: k as u64,
                ..track.frames[src].clone()
            }
        })
        .collect();
    Track {
        fps: CANONICAL_FPS,
        frames,
        ..track.clone()
    }
}

/// The first `len` frames of a track at 30 fps, padded by repeating the last frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    pub track_id: String,
    pub frames: Vec<FrameRecord>,
    /// `true` marks padded (repeated) frames; they always form a suffix.
    pub pad_mask: Vec<bool>,
    pub labels: Labels,
}

impl ObservationWindow {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.pad_mask.iter().filter(|p| !**p).count()
    }

    pub fn padded(&self) -> usize {
        self.len() - self.valid_len()
    }

    /// Re-windows this window to `len` frames using only its unpadded frames.
    pub fn rewindow(&self, len: usize) -> ObservationWindow {
        window_from_frames(&self.frames[..self.valid_len()], len, &self.track_id, self.labels)
    }
}

fn window_from_frames(frames: &[FrameRecord], len: usize, track_id: &str, labels: Labels) -> ObservationWindow {
    assert!(len >= 1, "window length must be at least 1");
    let take = frames.len().min(len);
    let mut out: Vec<FrameRecord> = frames[..take].to_vec();
    let mut pad_mask = vec![false; take];
    let last = out.last().cloned().expect("track has frames");
    for k in 0..len - take {
        out.push(FrameRecord {
            t: last.t + 1 + k as u64,
            ..last.clone()
        });
        pad_mask.push(true);
    }
    ObservationWindow {
        track_id: track_id.to_string(),
        frames: out,
        pad_mask,
        labels,
    }
}

pub fn make_window(track: &Track, len: usize) -> ObservationWindow {
    let track = resample_to_canonical(track);
    window_from_frames(&track.frames, len, &track.track_id, track.labels)
}

/// Index sets of a train/val/test split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn select<'a>(tracks: &'a [Track], idx: &[usize]) -> Vec<&'a Track> {
        idx.iter().map(|&i| &tracks[i]).collect()
    }

    pub fn materialize(&self, tracks: &[Track]) -> (Vec<Track>, Vec<Track>, Vec<Track>) {
        let pick = |idx: &[usize]| idx.iter().map(|&i| tracks[i].clone()).collect();
        (pick(&self.train), pick(&self.val), pick(&self.test))
    }
}

/// Stratified-by-action, grouped-by-video split. Deterministic in `seed`.
pub fn split_dataset(tracks: &[Track], seed: u64, ratios: [f64; 3]) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    // video -> member track indices, in first-seen order of the input
    let mut videos: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in tracks.iter().enumerate() {
        videos.entry(t.video_id.as_str()).or_default().push(i);
    }
    let mut strata: BTreeMap<ActionLabel, Vec<Vec<usize>>> = BTreeMap::new();
    for members in videos.into_values() {
        let action = tracks[members[0]].labels.action;
        strata.entry(action).or_default().push(members);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit::default();
    for (action, mut groups) in strata {
        groups.shuffle(&mut rng);
        let n = groups.len();
        let (n_val, n_test) = if n < 3 {
            let msg = format!("class {action} has {n} video group(s), fewer than 3 splits; assigned to train");
            log::warn!("{msg}");
            split.warnings.push(msg);
            (0, 0)
        } else {
            let n_val = (n as f64 * ratios[1]).round() as usize;
            let n_test = ((n as f64 * ratios[2]).round() as usize).min(n - n_val);
            (n_val, n_test)
        };
        for (k, g) in groups.into_iter().enumerate() {
            let dest = if k < n_val {
                &mut split.val
            } else if k < n_val + n_test {
                &mut split.test
            } else {
                &mut split.train
            };
            dest.extend(g);
        }
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Drops every training track that shares a source track with any held-out track.
pub fn exclude_kin(train: Vec<Track>, held_out: &[Track]) -> Vec<Track> {
    let blocked: HashSet<&str> = held_out.iter().map(|t| t.source_id()).collect();
    train
        .into_iter()
        .filter(|t| !blocked.contains(t.source_id()))
        .collect()
}
