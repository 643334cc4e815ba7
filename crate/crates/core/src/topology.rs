//! Whole-body skeleton topology in the 133-point COCO-WholeBody layout.
//!
//! Global keypoint order is `body[0..23]`, `face[23..91]`, `hands[91..133]`
//! (left hand first). Everything in this module is a pure function of the
//! constant tables below; those tables are the single source of truth for the
//! keypoint order used by the track format, the encoder and the augmenter.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_KEYPOINTS: usize = 133;
pub const TOPOLOGY_SCHEMA: &str = "pose_topology/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Body,
    Face,
    Hands,
}

impl BodyPart {
    pub const ALL: [BodyPart; 3] = [BodyPart::Body, BodyPart::Face, BodyPart::Hands];

    pub const fn node_count(self) -> usize {
        match self {
            BodyPart::Body => 23,
            BodyPart::Face => 68,
            BodyPart::Hands => 42,
        }
    }

    /// First global keypoint index of this part.
    pub const fn offset(self) -> usize {
        match self {
            BodyPart::Body => 0,
            BodyPart::Face => 23,
            BodyPart::Hands => 91,
        }
    }

    pub fn range(self) -> std::ops::Range<usize> {
        self.offset()..self.offset() + self.node_count()
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyPart::Body => "body",
            BodyPart::Face => "face",
            BodyPart::Hands => "hands",
        }
    }

    pub fn parse(s: &str) -> Option<BodyPart> {
        match s {
            "body" => Some(BodyPart::Body),
            "face" => Some(BodyPart::Face),
            "hands" => Some(BodyPart::Hands),
            _ => None,
        }
    }
}

/// Body keypoints: COCO-17 followed by the six foot points.
pub const BODY_NAMES: [&str; 23] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "left_big_toe",
    "left_small_toe",
    "left_heel",
    "right_big_toe",
    "right_small_toe",
    "right_heel",
];

/// Local body indices used throughout the crate.
pub mod body {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;
    pub const LEFT_BIG_TOE: usize = 17;
    pub const LEFT_SMALL_TOE: usize = 18;
    pub const LEFT_HEEL: usize = 19;
    pub const RIGHT_BIG_TOE: usize = 20;
    pub const RIGHT_SMALL_TOE: usize = 21;
    pub const RIGHT_HEEL: usize = 22;
}

/// Local face indices (68-point landmark layout) that other modules refer to.
pub mod face {
    pub const JAW_RIGHT_END: usize = 0;
    pub const CHIN: usize = 8;
    pub const JAW_LEFT_END: usize = 16;
    pub const NOSE_TIP: usize = 30;
    pub const MOUTH_INNER_TOP: usize = 62;
    pub const MOUTH_INNER_BOTTOM: usize = 66;
}

/// Hand keypoint names, local to one hand (21 points).
pub const HAND_NAMES: [&str; 21] = [
    "wrist", "thumb1", "thumb2", "thumb3", "thumb4", "index1", "index2", "index3", "index4",
    "middle1", "middle2", "middle3", "middle4", "ring1", "ring2", "ring3", "ring4", "pinky1",
    "pinky2", "pinky3", "pinky4",
];

const BODY_EDGES: [(usize, usize); 25] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
    (15, 17),
    (15, 18),
    (15, 19),
    (16, 20),
    (16, 21),
    (16, 22),
];

const BODY_MIRROR: [usize; 23] = [
    0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15, 20, 21, 22, 17, 18, 19,
];

const FACE_MIRROR: [usize; 68] = [
    // jaw 0..16
    16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0, //
    // eyebrows 17..26
    26, 25, 24, 23, 22, 21, 20, 19, 18, 17, //
    // nose bridge 27..30, lower nose 31..35
    27, 28, 29, 30, 35, 34, 33, 32, 31, //
    // eyes 36..47
    45, 44, 43, 42, 47, 46, 39, 38, 37, 36, 41, 40, //
    // outer lip 48..59
    54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55, //
    // inner lip 60..67
    64, 63, 62, 61, 60, 67, 66, 65,
];

fn face_edges() -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    let mut chain = |lo: usize, hi: usize, closed: bool| {
        for i in lo..hi {
            edges.push((i, i + 1));
        }
        if closed {
            edges.push((hi, lo));
        }
    };
    chain(0, 16, false); // jaw
    chain(17, 21, false); // right brow
    chain(22, 26, false); // left brow
    chain(27, 30, false); // nose bridge
    chain(31, 35, false); // nostrils
    chain(36, 41, true); // right eye
    chain(42, 47, true); // left eye
    chain(48, 59, true); // outer lip
    chain(60, 67, true); // inner lip
    edges.push((30, 33));
    edges
}

fn hand_edges() -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(40);
    for hand in 0..2 {
        let base = hand * 21;
        for finger in 0..5 {
            let first = 1 + finger * 4;
            edges.push((base, base + first));
            for j in 0..3 {
                edges.push((base + first + j, base + first + j + 1));
            }
        }
    }
    edges
}

/// Undirected skeleton edges of one part, in local indices.
pub fn part_edges(part: BodyPart) -> Vec<(usize, usize)> {
    match part {
        BodyPart::Body => BODY_EDGES.to_vec(),
        BodyPart::Face => face_edges(),
        BodyPart::Hands => hand_edges(),
    }
}

/// Binary symmetric adjacency without self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub part: BodyPart,
    pub matrix: Array2<f64>,
}

impl AdjacencyMatrix {
    pub fn node_count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.matrix.row(node).iter().filter(|&&v| v != 0.0).count()
    }
}

pub fn build_part_adjacency(part: BodyPart) -> AdjacencyMatrix {
    let n = part.node_count();
    let mut matrix = Array2::zeros((n, n));
    for (a, b) in part_edges(part) {
        matrix[[a, b]] = 1.0;
        matrix[[b, a]] = 1.0;
    }
    AdjacencyMatrix { part, matrix }
}

/// Left/right swap for one part's local indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MirrorTable {
    pub part: BodyPart,
    pub perm: Vec<usize>,
}

pub fn mirror_table(part: BodyPart) -> MirrorTable {
    let perm = match part {
        BodyPart::Body => BODY_MIRROR.to_vec(),
        BodyPart::Face => FACE_MIRROR.to_vec(),
        BodyPart::Hands => (0..42).map(|i| (i + 21) % 42).collect(),
    };
    MirrorTable { part, perm }
}

/// The mirror permutation over all 133 global keypoint indices.
pub fn whole_body_mirror() -> Vec<usize> {
    let mut perm = Vec::with_capacity(NUM_KEYPOINTS);
    for part in BodyPart::ALL {
        let table = mirror_table(part);
        perm.extend(table.perm.iter().map(|&i| i + part.offset()));
    }
    perm
}

/// Axis-aligned person box in pixels: top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::InvalidInput(format!(
                "degenerate bounding box (w={}, h={})",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Maps pixel coordinates into the box frame: centre -> (0,0), top-left -> (-1,-1).
/// Points outside the box are not clamped.
pub fn normalize_keypoints(coords: &[(f64, f64)], bbox: BBox) -> Result<Vec<(f64, f64)>> {
    bbox.check()?;
    Ok(coords
        .iter()
        .map(|&(x, y)| normalize_point(x, y, bbox))
        .collect())
}

/// Inverse of [`normalize_keypoints`].
pub fn denormalize_keypoints(coords: &[(f64, f64)], bbox: BBox) -> Result<Vec<(f64, f64)>> {
    bbox.check()?;
    Ok(coords
        .iter()
        .map(|&(u, v)| {
            (
                bbox.x + (u + 1.0) * bbox.w / 2.0,
                bbox.y + (v + 1.0) * bbox.h / 2.0,
            )
        })
        .collect())
}

#[inline]
pub(crate) fn normalize_point(x: f64, y: f64, bbox: BBox) -> (f64, f64) {
    (
        2.0 * (x - bbox.x) / bbox.w - 1.0,
        2.0 * (y - bbox.y) / bbox.h - 1.0,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PartTopology {
    pub part: BodyPart,
    pub offset: usize,
    pub node_count: usize,
    pub names: Vec<String>,
    pub edges: Vec<[usize; 2]>,
    pub mirror: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TopologyExport {
    pub schema_version: String,
    pub num_keypoints: usize,
    pub parts: Vec<PartTopology>,
}

fn part_names(part: BodyPart) -> Vec<String> {
    match part {
        BodyPart::Body => BODY_NAMES.iter().map(|s| s.to_string()).collect(),
        BodyPart::Face => (0..68).map(|i| format!("face_{i}")).collect(),
        BodyPart::Hands => ["left", "right"]
            .iter()
            .flat_map(|side| HAND_NAMES.iter().map(move |n| format!("{side}_hand_{n}")))
            .collect(),
    }
}

/// Machine-readable description of the topology, for byte comparison across runtimes.
pub fn topology_export() -> TopologyExport {
    TopologyExport {
        schema_version: TOPOLOGY_SCHEMA.to_string(),
        num_keypoints: NUM_KEYPOINTS,
        parts: BodyPart::ALL
            .iter()
            .map(|&part| PartTopology {
                part,
                offset: part.offset(),
                node_count: part.node_count(),
                names: part_names(part),
                edges: part_edges(part).into_iter().map(|(a, b)| [a, b]).collect(),
                mirror: mirror_table(part).perm,
            })
            .collect(),
    }
}

pub fn topology_json() -> String {
    serde_json::to_string_pretty(&topology_export()).expect("topology serializes") + "\n"
}
