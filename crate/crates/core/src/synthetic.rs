//! Procedural generator of labelled whole-body pose tracks.
//!
//! Each action class drives a canonical 2-D rest skeleton with its own motion
//! motif (sinusoids and ramps on arm angles, face yaw, gait and root motion)
//! plus per-track parameter jitter and per-keypoint Gaussian noise. Tracks are a
//! pure function of `(seed, action, index)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{track_to_json, ActionLabel, FrameRecord, Keypoint, Labels, Track, TRACKS_SCHEMA};
use crate::error::{Error, Result};
use crate::topology::{body, BBox, BodyPart, NUM_KEYPOINTS};

pub const GENERATOR_VERSION: &str = "egointent-synth/1";
pub const SYNTH_SPEC_SCHEMA: &str = "synth_spec/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_spec_schema")]
    pub schema_version: String,
    /// Tracks to generate per action, keyed by action name.
    pub counts: BTreeMap<String, usize>,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default = "default_frame_size")]
    pub frame_size: [f64; 2],
    /// Keypoint jitter, in body-height units (about 1/1.8 of standing height).
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_spec_schema() -> String {
    SYNTH_SPEC_SCHEMA.to_string()
}
fn default_frames() -> usize {
    90
}
fn default_fps() -> f64 {
    30.0
}
fn default_frame_size() -> [f64; 2] {
    [320.0, 240.0]
}
fn default_noise() -> f64 {
    0.008
}

impl SynthSpec {
    /// `per_class` tracks of every action.
    pub fn uniform(per_class: usize, seed: u64) -> Self {
        Self::with_counts(ActionLabel::ALL.iter().map(|a| (*a, per_class)), seed)
    }

    pub fn with_counts(counts: impl IntoIterator<Item = (ActionLabel, usize)>, seed: u64) -> Self {
        SynthSpec {
            schema_version: default_spec_schema(),
            counts: counts.into_iter().map(|(a, n)| (a.name().to_string(), n)).collect(),
            frames: default_frames(),
            fps: default_fps(),
            frame_size: default_frame_size(),
            noise: default_noise(),
            seed,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SYNTH_SPEC_SCHEMA {
            return Err(Error::Config(format!(
                "schema_version: expected {SYNTH_SPEC_SCHEMA}, found {}",
                self.schema_version
            )));
        }
        for name in self.counts.keys() {
            if ActionLabel::parse(name).is_none() {
                return Err(Error::Config(format!("counts.{name}: unknown action")));
            }
        }
        if self.frames == 0 {
            return Err(Error::Config("frames: must be at least 1".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("fps: must be positive".into()));
        }
        if !(self.frame_size[0] > 0.0 && self.frame_size[1] > 0.0) {
            return Err(Error::Config("frame_size: must be positive".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise: must be non-negative".into()));
        }
        Ok(())
    }

    /// Counts in canonical action order, zero for omitted actions.
    pub fn action_counts(&self) -> Vec<(ActionLabel, usize)> {
        ActionLabel::ALL
            .iter()
            .map(|a| (*a, self.counts.get(a.name()).copied().unwrap_or(0)))
            .collect()
    }

    pub fn total(&self) -> usize {
        self.action_counts().iter().map(|(_, n)| n).sum()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn track_seed(seed: u64, action: ActionLabel, index: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ action.index() as u64) ^ index as u64)
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

#[derive(Debug, Clone, Copy)]
struct ArmPose {
    /// Upper-arm angle from hanging straight down, positive away from the body.
    raise: f64,
    /// Forearm angle relative to the upper arm.
    bend: f64,
    /// Projected length factor (< 1 when reaching toward the camera).
    reach: f64,
    /// Finger curl, 0 open .. 1 fist.
    curl: f64,
    pointing: bool,
    hand_scale: f64,
}

const REST_ARM: ArmPose = ArmPose {
    raise: 0.12,
    bend: 0.15,
    reach: 1.0,
    curl: 0.4,
    pointing: false,
    hand_scale: 1.0,
};

#[derive(Debug, Clone, Copy)]
struct PoseParams {
    /// Index 0 is the subject's left arm, 1 the right arm.
    arms: [ArmPose; 2],
    yaw: f64,
    pitch: f64,
    mouth_open: f64,
    gait: f64,
    gait_phase: f64,
    lean: f64,
    root: (f64, f64),
    scale: f64,
}

/// Per-track randomised motif parameters.
struct Motif {
    action: ActionLabel,
    dom: usize,
    freq: f64,
    phase: f64,
    amp: f64,
    onset: f64,
    yaw0: f64,
    dir: f64,
    speed: f64,
    walk: Vec<(f64, f64)>,
}

impl Motif {
    fn new(action: ActionLabel, frames: usize, rng: &mut ChaCha8Rng) -> Self {
        let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let mut walk = Vec::with_capacity(frames);
        let step = Normal::new(0.0, 0.035).unwrap();
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..frames {
            a = (a + step.sample(rng)) * 0.97;
            b = (b + step.sample(rng)) * 0.97;
            walk.push((a, b));
        }
        Motif {
            action,
            dom: rng.gen_range(0..2),
            freq: rng.gen_range(0.8..1.25),
            phase: rng.gen_range(0.0..2.0 * PI),
            amp: rng.gen_range(0.85..1.15),
            onset: rng.gen_range(0.0..1.0),
            yaw0: rng.gen_range(-1.0..1.0),
            dir,
            speed: rng.gen_range(0.8..1.2),
            walk,
        }
    }

    fn pose(&self, frame: usize, s: f64) -> PoseParams {
        let mut p = PoseParams {
            arms: [REST_ARM; 2],
            yaw: 0.1 * self.yaw0,
            pitch: 0.0,
            mouth_open: 0.0,
            gait: 0.0,
            gait_phase: 0.0,
            lean: 0.0,
            root: (0.0, 0.0),
            scale: 1.0,
        };
        let d = self.dom;
        let o = 1 - d;
        let osc = |f: f64| (2.0 * PI * f * self.freq * s + self.phase).sin();
        match self.action {
            ActionLabel::Wave => {
                p.arms[d] = ArmPose {
                    raise: 2.3 + 0.1 * self.yaw0,
                    bend: 0.55 + 0.5 * self.amp * osc(2.0),
                    curl: 0.05,
                    ..REST_ARM
                };
            }
            ActionLabel::Punch => {
                let t0 = 0.12 + 0.25 * self.onset;
                let strike = smoothstep((s - t0) / 0.12) - smoothstep((s - t0 - 0.35) / 0.3);
                let guard = ArmPose {
                    raise: 0.45,
                    bend: 2.3,
                    reach: 0.9,
                    curl: 1.0,
                    ..REST_ARM
                };
                p.arms[o] = guard;
                p.arms[d] = ArmPose {
                    raise: lerp(0.45, 1.45, strike),
                    bend: lerp(2.3, 0.05, strike),
                    reach: lerp(0.9, 0.4, strike),
                    hand_scale: lerp(1.0, 1.5, strike),
                    ..guard
                };
                p.lean = 0.06 * strike;
            }
            ActionLabel::Hug => {
                let r = smoothstep(s * self.speed / 1.0);
                let arm = ArmPose {
                    raise: lerp(0.15, 1.35 * self.amp, r),
                    bend: lerp(0.1, -2.7, r),
                    reach: lerp(1.0, 0.8, r),
                    curl: 0.1,
                    ..REST_ARM
                };
                p.arms = [arm; 2];
                p.scale = 1.0 + 0.15 * r;
            }
            ActionLabel::Pet => {
                let r = smoothstep(s * self.speed / 0.4);
                p.arms[d] = ArmPose {
                    raise: lerp(0.12, 1.35, r),
                    bend: lerp(0.15, 0.7 + 0.45 * self.amp * osc(0.8), r),
                    reach: lerp(1.0, 0.55, r),
                    curl: 0.05,
                    ..REST_ARM
                };
                p.pitch = 0.08 * r;
            }
            ActionLabel::Handshake => {
                let r = smoothstep(s * self.speed / 0.5);
                p.arms[d] = ArmPose {
                    raise: lerp(0.12, 0.45, r),
                    bend: lerp(0.15, 1.05 + 0.2 * r * osc(2.0), r),
                    reach: lerp(1.0, 0.6, r),
                    curl: 0.2,
                    ..REST_ARM
                };
            }
            ActionLabel::Throw => {
                let t1 = 0.35 + 0.2 * self.onset;
                let cock = smoothstep(s / t1);
                let release = smoothstep((s - t1) / 0.15);
                let (raise, bend) = if s < t1 {
                    (lerp(0.12, 2.6, cock), lerp(0.15, 1.2, cock))
                } else {
                    (lerp(2.6, 1.0, release), lerp(1.2, 0.0, release))
                };
                p.arms[d] = ArmPose {
                    raise,
                    bend,
                    reach: if s < t1 { 1.0 } else { lerp(1.0, 0.5, release) },
                    curl: 0.7,
                    ..REST_ARM
                };
                p.arms[o] = ArmPose {
                    raise: 0.8,
                    bend: 0.3,
                    reach: 0.8,
                    ..REST_ARM
                };
                p.lean = 0.05 * (release - cock);
            }
            ActionLabel::PointConverse => {
                let (j1, j2) = self.walk[frame];
                p.arms[d] = ArmPose {
                    raise: 1.5 + 0.3 * j1,
                    bend: 0.05 + 0.3 * j2,
                    reach: 0.7,
                    curl: 0.9,
                    pointing: true,
                    hand_scale: 1.1,
                };
                p.mouth_open = 0.05 + 0.05 * osc(4.0).abs();
                p.yaw = 0.08 * self.yaw0;
            }
            ActionLabel::Leave => {
                p.gait = 0.35 * self.amp;
                p.gait_phase = 2.0 * PI * 1.1 * self.freq * s + self.phase;
                let swing = 0.3 * p.gait_phase.sin();
                p.arms[0].raise = 0.12 + swing;
                p.arms[1].raise = 0.12 - swing;
                p.yaw = self.dir * (0.75 + 0.2 * self.yaw0.abs() + 0.35 * smoothstep(s / 1.5));
                p.root = (self.dir * 0.7 * self.speed * s, 0.0);
                p.scale = 1.0 - 0.12 * smoothstep(s / 3.0);
            }
            ActionLabel::Gaze => {
                p.yaw = 0.12 * self.yaw0;
                p.pitch = 0.03 * osc(0.3);
                p.lean = 0.01 * osc(0.25);
            }
            ActionLabel::NoResponse => {
                let (j1, j2) = self.walk[frame];
                p.yaw = self.dir * (1.05 + 0.3 * self.yaw0.abs());
                p.pitch = 0.15;
                p.arms[d] = ArmPose {
                    raise: 0.35 + 0.8 * j1,
                    bend: 1.7 + 1.2 * j2,
                    curl: 0.6,
                    ..REST_ARM
                };
                p.arms[o].raise = 0.15 + 0.8 * j2;
                p.arms[o].bend = 0.2 + 0.8 * j1;
            }
        }
        p
    }
}

/// Canonical 3-D face template (68 landmarks) in face units, z toward the camera.
fn face_template(mouth_open: f64) -> [[f64; 3]; 68] {
    let mut f = [[0.0; 3]; 68];
    for (i, pt) in f.iter_mut().enumerate().take(17) {
        let th = PI * i as f64 / 16.0;
        *pt = [-0.5 * th.cos(), 0.62 * th.sin() - 0.02, 0.35 * th.sin() - 0.3];
    }
    for i in 0..5 {
        let x = -0.4 + 0.08 * i as f64;
        let y = -0.25 - 0.05 * (PI * i as f64 / 4.0).sin();
        f[17 + i] = [x, y, 0.12];
        f[26 - i] = [-x, y, 0.12];
    }
    for i in 0..4 {
        f[27 + i] = [0.0, -0.15 + 0.1 * i as f64, 0.2 + 0.05 * i as f64];
    }
    for i in 0..5 {
        let x = -0.12 + 0.06 * i as f64;
        f[31 + i] = [x, 0.22, if i == 2 { 0.26 } else { 0.2 }];
    }
    let eye = |cx: f64| {
        let w = 0.1;
        [
            [cx - w, -0.1],
            [cx - 0.5 * w, -0.13],
            [cx + 0.5 * w, -0.13],
            [cx + w, -0.1],
            [cx + 0.5 * w, -0.07],
            [cx - 0.5 * w, -0.07],
        ]
    };
    for (k, [x, y]) in eye(-0.22).iter().enumerate() {
        f[36 + k] = [*x, *y, 0.1];
    }
    // left eye runs inner -> outer along the top
    for (k, [x, y]) in eye(0.22).iter().enumerate() {
        f[42 + k] = [*x, *y, 0.1];
    }
    for j in 0..12 {
        let psi = PI - j as f64 * PI / 6.0;
        f[48 + j] = [0.2 * psi.cos(), 0.38 - 0.08 * psi.sin(), 0.18];
    }
    for j in 0..8 {
        let psi = PI - j as f64 * PI / 4.0;
        let half_h = if psi.sin() > 0.0 { 0.015 } else { 0.015 + mouth_open };
        f[60 + j] = [0.13 * psi.cos(), 0.38 - half_h * psi.sin().signum() * psi.sin().abs(), 0.19];
    }
    f
}

/// Local hand template: (along forearm, lateral) for 21 points, open hand.
const HAND_TEMPLATE: [[f64; 2]; 21] = [
    [0.0, 0.0],
    [0.02, 0.025],
    [0.04, 0.04],
    [0.055, 0.05],
    [0.07, 0.055],
    [0.08, 0.02],
    [0.105, 0.022],
    [0.125, 0.023],
    [0.14, 0.024],
    [0.085, 0.0],
    [0.11, 0.0],
    [0.13, 0.0],
    [0.15, 0.0],
    [0.08, -0.018],
    [0.105, -0.02],
    [0.122, -0.021],
    [0.137, -0.022],
    [0.072, -0.034],
    [0.09, -0.038],
    [0.103, -0.04],
    [0.115, -0.042],
];

struct Person {
    scale_px: f64,
    anchor: (f64, f64),
    shoulder_w: f64,
    hip_w: f64,
}

/// Positions (body units, y down, hip centre at origin) plus a per-point visibility factor.
fn skeleton(p: &PoseParams, person: &Person) -> Vec<(f64, f64, f64)> {
    let mut out = vec![(0.0, 0.0, 1.0); NUM_KEYPOINTS];
    let lean = p.lean;
    let sh_y = -0.55;
    // subject's left appears on image right (+x) when facing the camera
    let side = [1.0, -1.0];
    let shoulders = [
        (person.shoulder_w + lean, sh_y + lean.abs()),
        (-person.shoulder_w + lean, sh_y + lean.abs()),
    ];
    out[body::LEFT_SHOULDER] = (shoulders[0].0, shoulders[0].1, 1.0);
    out[body::RIGHT_SHOULDER] = (shoulders[1].0, shoulders[1].1, 1.0);
    out[body::LEFT_HIP] = (person.hip_w, 0.0, 1.0);
    out[body::RIGHT_HIP] = (-person.hip_w, 0.0, 1.0);

    // legs
    for (k, sgn) in side.iter().enumerate() {
        let ph = p.gait_phase + PI * k as f64;
        let lift = p.gait * ph.sin().max(0.0);
        let swing = 0.4 * p.gait * ph.cos();
        let hip_x = sgn * person.hip_w;
        let knee = (hip_x + 0.01 * sgn + 0.3 * swing, 0.45 - 0.3 * lift);
        let ankle = (hip_x + 0.02 * sgn + 0.5 * swing, 0.88 - 0.35 * lift);
        let (knee_i, ankle_i, big, small, heel) = if k == 0 {
            (body::LEFT_KNEE, body::LEFT_ANKLE, body::LEFT_BIG_TOE, body::LEFT_SMALL_TOE, body::LEFT_HEEL)
        } else {
            (body::RIGHT_KNEE, body::RIGHT_ANKLE, body::RIGHT_BIG_TOE, body::RIGHT_SMALL_TOE, body::RIGHT_HEEL)
        };
        out[knee_i] = (knee.0, knee.1, 1.0);
        out[ankle_i] = (ankle.0, ankle.1, 1.0);
        out[big] = (ankle.0 + 0.02 * sgn, ankle.1 + 0.06, 1.0);
        out[small] = (ankle.0 + 0.06 * sgn, ankle.1 + 0.05, 1.0);
        out[heel] = (ankle.0 - 0.01 * sgn, ankle.1 + 0.03, 1.0);
    }

    // arms and hands
    let hand_base = BodyPart::Hands.offset();
    for k in 0..2 {
        let arm = p.arms[k];
        let sgn = side[k];
        let s = shoulders[k];
        let a1 = arm.raise;
        let a2 = arm.raise + arm.bend;
        let elbow = (s.0 + sgn * 0.3 * arm.reach * a1.sin(), s.1 + 0.3 * arm.reach * a1.cos());
        let wrist = (
            elbow.0 + sgn * 0.28 * arm.reach * a2.sin(),
            elbow.1 + 0.28 * arm.reach * a2.cos(),
        );
        let (elbow_i, wrist_i) = if k == 0 {
            (body::LEFT_ELBOW, body::LEFT_WRIST)
        } else {
            (body::RIGHT_ELBOW, body::RIGHT_WRIST)
        };
        out[elbow_i] = (elbow.0, elbow.1, 1.0);
        out[wrist_i] = (wrist.0, wrist.1, 1.0);

        let axis = (sgn * a2.sin(), a2.cos());
        let lateral = (-axis.1 * sgn, axis.0 * sgn);
        let hs = 0.75 * arm.hand_scale;
        for (j, tpl) in HAND_TEMPLATE.iter().enumerate() {
            let finger = if j == 0 { usize::MAX } else { (j - 1) / 4 };
            let joint = if j == 0 { 0 } else { (j - 1) % 4 };
            let curl = if arm.pointing && finger == 1 {
                0.0
            } else {
                arm.curl
            };
            // curled fingers fold back toward the knuckle
            let knuckle = if j == 0 { [0.0, 0.0] } else { HAND_TEMPLATE[1 + finger * 4] };
            let fold = if joint == 0 { 0.0 } else { curl * 0.8 };
            let along = lerp(tpl[0], knuckle[0] - 0.01 * joint as f64, fold);
            let lat = lerp(tpl[1], knuckle[1], fold * 0.5);
            let x = wrist.0 + hs * (along * axis.0 + lat * lateral.0);
            let y = wrist.1 + hs * (along * axis.1 + lat * lateral.1);
            out[hand_base + 21 * k + j] = (x, y, 1.0);
        }
    }

    // head and face
    let neck = ((shoulders[0].0 + shoulders[1].0) / 2.0, sh_y);
    let head = (neck.0, neck.1 - 0.24 + p.pitch * 0.05);
    let (cy, sy) = (p.yaw.cos(), p.yaw.sin());
    let face_size = 0.17;
    let face_base = BodyPart::Face.offset();
    let tpl = face_template(p.mouth_open);
    let mut face_xy = [(0.0, 0.0); 68];
    for (i, [fx, fy, fz]) in tpl.iter().enumerate() {
        let x = fx * cy + fz * sy;
        let depth = -fx * sy + fz * cy;
        let y = fy + p.pitch * fz;
        let vis = if depth < -0.2 { 0.35 } else { 1.0 };
        let pt = (head.0 + face_size * x, head.1 + face_size * y);
        face_xy[i] = pt;
        out[face_base + i] = (pt.0, pt.1, vis);
    }
    let mean = |idx: std::ops::Range<usize>| {
        let n = idx.len() as f64;
        let (sx, sy) = idx.fold((0.0, 0.0), |acc, i| (acc.0 + face_xy[i].0, acc.1 + face_xy[i].1));
        (sx / n, sy / n)
    };
    let nose = face_xy[30];
    let right_eye = mean(36..42);
    let left_eye = mean(42..48);
    let ear_vis = |z: f64| if z < -0.25 { 0.3 } else { 1.0 };
    out[body::NOSE] = (nose.0, nose.1, 1.0);
    out[body::LEFT_EYE] = (left_eye.0, left_eye.1, out[face_base + 45].2);
    out[body::RIGHT_EYE] = (right_eye.0, right_eye.1, out[face_base + 36].2);
    out[body::LEFT_EAR] = (face_xy[16].0, face_xy[16].1 - 0.01, ear_vis(-0.5 * sy - 0.3 * cy));
    out[body::RIGHT_EAR] = (face_xy[0].0, face_xy[0].1 - 0.01, ear_vis(0.5 * sy - 0.3 * cy));
    out
}

/// Generates one track; a pure function of `(spec.seed, action, index)`.
pub fn generate_track(action: ActionLabel, spec: &SynthSpec, index: usize) -> Track {
    let mut rng = ChaCha8Rng::seed_from_u64(track_seed(spec.seed, action, index));
    let [fw, fh] = spec.frame_size;
    let base = fh / 240.0;
    let person = Person {
        scale_px: rng.gen_range(58.0..80.0) * base,
        anchor: (rng.gen_range(0.3..0.7) * fw, rng.gen_range(0.52..0.6) * fh),
        shoulder_w: rng.gen_range(0.17..0.22),
        hip_w: rng.gen_range(0.1..0.13),
    };
    let motif = Motif::new(action, spec.frames, &mut rng);
    let jitter = Normal::new(0.0, spec.noise.max(1e-12)).unwrap();
    let ego = Normal::new(0.0, 0.4 * base).unwrap();
    let mut cam = (0.0, 0.0);

    let mut frames = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let s = f as f64 / spec.fps;
        let pose = motif.pose(f, s);
        let pts = skeleton(&pose, &person);
        cam = (cam.0 * 0.95 + ego.sample(&mut rng), cam.1 * 0.95 + ego.sample(&mut rng));
        let scale = person.scale_px * pose.scale;
        let origin = (
            person.anchor.0 + pose.root.0 * person.scale_px + cam.0,
            person.anchor.1 + pose.root.1 * person.scale_px + cam.1,
        );
        let mut keypoints = Vec::with_capacity(NUM_KEYPOINTS);
        for (k, &(x, y, vis)) in pts.iter().enumerate() {
            let (nx, ny) = if spec.noise > 0.0 {
                (jitter.sample(&mut rng), jitter.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            let px = origin.0 + (x + nx) * scale;
            let py = origin.1 + (y + ny) * scale;
            let base_conf = if BodyPart::Hands.range().contains(&k) {
                rng.gen_range(0.45..0.9)
            } else if BodyPart::Face.range().contains(&k) {
                rng.gen_range(0.65..0.95)
            } else {
                rng.gen_range(0.8..1.0)
            };
            let inside = (0.0..=fw).contains(&px) && (0.0..=fh).contains(&py);
            let c = base_conf * vis * if inside { 1.0 } else { 0.3 };
            keypoints.push(Keypoint { x: px, y: py, c });
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for kp in &keypoints {
            x0 = x0.min(kp.x);
            y0 = y0.min(kp.y);
            x1 = x1.max(kp.x);
            y1 = y1.max(kp.y);
        }
        let (mx, my) = (0.05 * (x1 - x0), 0.05 * (y1 - y0));
        let mut frame = FrameRecord {
            t: f as u64,
            bbox: BBox::new(x0 - mx, y0 - my, (x1 - x0) + 2.0 * mx, (y1 - y0) + 2.0 * my),
            keypoints,
        };
        frame.snap_in_place();
        frames.push(frame);
    }
    Track {
        track_id: format!("syn-{}-{index:05}", action.name()),
        video_id: format!("synvid-{}-{index:05}", action.name()),
        fps: spec.fps,
        frames,
        labels: Labels::from_action(action),
        provenance: None,
    }
}

/// All tracks of a spec in canonical (action, index) order.
pub fn generate_tracks(spec: &SynthSpec) -> Vec<Track> {
    spec.action_counts()
        .into_iter()
        .flat_map(|(a, n)| (0..n).map(move |i| (a, i)))
        .map(|(a, i)| generate_track(a, spec, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub generator_version: String,
    pub schema_version: String,
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
}

pub fn summary_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".summary.json");
    out.with_file_name(name)
}

/// Writes the tracks as JSON-Lines to `out` and a sidecar summary next to it.
pub fn generate_dataset(spec: &SynthSpec, out: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(out, e);
    writeln!(w, "{{\"schema_version\":\"{TRACKS_SCHEMA}\"}}").map_err(io)?;
    let mut counts = BTreeMap::new();
    for (action, n) in spec.action_counts() {
        for i in 0..n {
            let track = generate_track(action, spec, i);
            writeln!(w, "{}", track_to_json(&track)).map_err(io)?;
        }
        counts.insert(action.name().to_string(), n);
    }
    w.flush().map_err(io)?;
    let summary = SynthSummary {
        generator_version: GENERATOR_VERSION.to_string(),
        schema_version: TRACKS_SCHEMA.to_string(),
        seed: spec.seed,
        counts,
        total: spec.total(),
    };
    let sp = summary_path(out);
    std::fs::write(&sp, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&sp, e))?;
    Ok(summary)
}

/// Hand-crafted feature oracle used to certify that generated classes are separable.
pub mod oracle {
    use super::*;
    use crate::topology::face;

    pub const FEATURE_NAMES: [&str; 12] = [
        "wrist_speed_max",
        "wrist_speed_min",
        "wrist_height_max",
        "wrist_height_min",
        "face_yaw",
        "ankle_speed",
        "bbox_drift",
        "mouth_motion",
        "wrist_burst",
        "wrist_spread",
        "wrist_reach_max",
        "wrist_speed_periodicity",
    ];

    /// Keypoints relative to the hip centre, in units of torso length.
    pub fn body_frame(frame: &FrameRecord) -> Vec<(f64, f64)> {
        let k = &frame.keypoints;
        let mid = |a: usize, b: usize| ((k[a].x + k[b].x) / 2.0, (k[a].y + k[b].y) / 2.0);
        let hip = mid(body::LEFT_HIP, body::RIGHT_HIP);
        let sh = mid(body::LEFT_SHOULDER, body::RIGHT_SHOULDER);
        let torso = ((sh.0 - hip.0).powi(2) + (sh.1 - hip.1).powi(2)).sqrt().max(1e-6);
        k.iter().map(|p| ((p.x - hip.0) / torso, (p.y - hip.1) / torso)).collect()
    }

    /// Mean wrist speed of the faster and slower hand, in torso lengths per frame.
    pub fn wrist_velocity_features(track: &Track, window: usize) -> [f64; 2] {
        let f = features(track, window);
        [f[0], f[1]]
    }

    /// Feature vector over the first `window` frames.
    pub fn features(track: &Track, window: usize) -> Vec<f64> {
        let frames = &track.frames[..window.min(track.frames.len())];
        let norm: Vec<Vec<(f64, f64)>> = frames.iter().map(body_frame).collect();
        let n = frames.len().max(1) as f64;
        let speed = |idx: usize| -> Vec<f64> {
            norm.windows(2)
                .map(|w| ((w[1][idx].0 - w[0][idx].0).powi(2) + (w[1][idx].1 - w[0][idx].1).powi(2)).sqrt())
                .collect()
        };
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let sl = speed(body::LEFT_WRIST);
        let sr = speed(body::RIGHT_WRIST);
        let (ml, mr) = (mean(&sl), mean(&sr));
        let height = |w: usize, s: usize| norm.iter().map(|p| p[s].1 - p[w].1).sum::<f64>() / n;
        let hl = height(body::LEFT_WRIST, body::LEFT_SHOULDER);
        let hr = height(body::RIGHT_WRIST, body::RIGHT_SHOULDER);
        let fo = BodyPart::Face.offset();
        let yaw = norm
            .iter()
            .map(|p| {
                let l = p[fo + face::JAW_RIGHT_END].0;
                let r = p[fo + face::JAW_LEFT_END].0;
                let mid = (l + r) / 2.0;
                ((p[fo + face::NOSE_TIP].0 - mid) / (r - l).abs().max(1e-3)).abs()
            })
            .sum::<f64>()
            / n;
        let ankles = (mean(&speed(body::LEFT_ANKLE)) + mean(&speed(body::RIGHT_ANKLE))) / 2.0;
        let drift = {
            let a = frames.first().unwrap().bbox;
            let b = frames.last().unwrap().bbox;
            ((b.x + b.w / 2.0) - (a.x + a.w / 2.0)).abs() / a.w + (b.h / a.h - 1.0).abs()
        };
        let mouth: Vec<f64> = norm
            .iter()
            .map(|p| p[fo + face::MOUTH_INNER_BOTTOM].1 - p[fo + face::MOUTH_INNER_TOP].1)
            .collect();
        let mouth_motion = mean(&mouth.windows(2).map(|w| (w[1] - w[0]).abs()).collect::<Vec<_>>());
        let burst = {
            let peak = sl.iter().chain(sr.iter()).copied().fold(0.0, f64::max);
            peak / (ml.max(mr) + 0.02)
        };
        let spread = norm
            .iter()
            .map(|p| (p[body::LEFT_WRIST].0 - p[body::RIGHT_WRIST].0).abs())
            .sum::<f64>()
            / n;
        let reach = |w: usize, s: usize| {
            norm.iter()
                .map(|p| ((p[w].0 - p[s].0).powi(2) + (p[w].1 - p[s].1).powi(2)).sqrt())
                .sum::<f64>()
                / n
        };
        let reach_max = reach(body::LEFT_WRIST, body::LEFT_SHOULDER).max(reach(body::RIGHT_WRIST, body::RIGHT_SHOULDER));
        let periodicity = {
            let s = if ml > mr { &sl } else { &sr };
            let m = mean(s);
            let crossings = s.windows(2).filter(|w| (w[0] - m) * (w[1] - m) < 0.0).count();
            crossings as f64 / n
        };
        vec![
            ml.max(mr),
            ml.min(mr),
            hl.max(hr),
            hl.min(hr),
            yaw,
            ankles,
            drift,
            mouth_motion,
            burst,
            spread,
            reach_max,
            periodicity,
        ]
    }

    /// Nearest-centroid classifier on z-scored features.
    #[derive(Debug, Clone)]
    pub struct NearestCentroid {
        mean: Vec<f64>,
        std: Vec<f64>,
        centroids: Vec<(usize, Vec<f64>)>,
    }

    impl NearestCentroid {
        pub fn fit(xs: &[Vec<f64>], ys: &[usize]) -> Self {
            let d = xs[0].len();
            let n = xs.len() as f64;
            let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
            let std: Vec<f64> = (0..d)
                .map(|j| (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-9))
                .collect();
            let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
            for (x, &y) in xs.iter().zip(ys) {
                let e = sums.entry(y).or_insert_with(|| (vec![0.0; d], 0));
                for j in 0..d {
                    e.0[j] += (x[j] - mean[j]) / std[j];
                }
                e.1 += 1;
            }
            let centroids = sums
                .into_iter()
                .map(|(y, (s, c))| (y, s.into_iter().map(|v| v / c as f64).collect()))
                .collect();
            NearestCentroid { mean, std, centroids }
        }

        pub fn predict(&self, x: &[f64]) -> usize {
            let z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect();
            self.centroids
                .iter()
                .map(|(y, c)| (*y, c.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(y, _)| y)
                .expect("fitted on at least one class")
        }
    }

    /// Two-fold (even/odd index) nearest-centroid accuracy of `features` on action labels.
    pub fn two_fold_accuracy(xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let mut correct = 0;
        for fold in 0..2 {
            let (train_x, train_y): (Vec<_>, Vec<_>) = xs
                .iter()
                .zip(ys)
                .enumerate()
                .filter(|(i, _)| i % 2 != fold)
                .map(|(_, (x, y))| (x.clone(), *y))
                .unzip();
            let model = NearestCentroid::fit(&train_x, &train_y);
            correct += xs
                .iter()
                .zip(ys)
                .enumerate()
                .filter(|(i, _)| i % 2 == fold)
                .filter(|(_, (x, y))| model.predict(x) == **y)
                .count();
        }
        correct as f64 / xs.len() as f64
    }

    /// 10-class two-fold accuracy of the full feature oracle over tracks.
    pub fn action_separability(tracks: &[Track], window: usize) -> f64 {
        let xs: Vec<Vec<f64>> = tracks.iter().map(|t| features(t, window)).collect();
        let ys: Vec<usize> = tracks.iter().map(|t| t.labels.action.index()).collect();
        two_fold_accuracy(&xs, &ys)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_tracks, AttitudeLabel, IntentLabel};

    #[test]
    fn deterministic_and_valid() {
        let spec = SynthSpec::uniform(1, 42);
        for a in ActionLabel::ALL {
            let t1 = generate_track(a, &spec, 3);
            let t2 = generate_track(a, &spec, 3);
            assert_eq!(t1, t2);
            t1.validate().unwrap();
            assert_eq!(t1.frames.len(), 90);
            assert!(t1.frames.iter().all(|f| f.keypoints.len() == 133
                && f.keypoints.iter().all(|k| (0.0..=1.0).contains(&k.c))));
        }
        assert_ne!(
            generate_track(ActionLabel::Wave, &spec, 0),
            generate_track(ActionLabel::Wave, &spec, 1)
        );
    }

    #[test]
    fn punch_labels() {
        let t = generate_track(ActionLabel::Punch, &SynthSpec::uniform(1, 0), 0);
        assert_eq!(t.labels.intent, IntentLabel::Interacting);
        assert_eq!(t.labels.attitude, AttitudeLabel::Negative);
        assert_eq!(t.labels.action, ActionLabel::Punch);
    }

    #[test]
    fn dataset_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.jsonl");
        let spec = SynthSpec::uniform(2, 7);
        let summary = generate_dataset(&spec, &path).unwrap();
        assert_eq!(summary.total, 20);
        let parsed = parse_tracks(&path).unwrap();
        assert_eq!(parsed, generate_tracks(&spec));
        assert!(summary_path(&path).exists());
    }

    #[test]
    fn spec_toml() {
        let spec = SynthSpec::from_toml(
            "schema_version = \"synth_spec/1\"\nseed = 3\n[counts]\nwave = 4\ngaze = 2\n",
        )
        .unwrap();
        assert_eq!(spec.total(), 6);
        assert!(SynthSpec::from_toml("[counts]\nwalz = 1\n").is_err());
    }
}

#[cfg(test)]
mod separability {
    use super::oracle::*;
    use super::*;

    #[test]
    fn oracle_separates_actions() {
        let tracks = generate_tracks(&SynthSpec::uniform(20, 12));
        let acc = action_separability(&tracks, 30);
        assert!(acc >= 0.9, "{acc}");
    }

    #[test]
    fn wrist_speed_separates_wave_from_gaze() {
        let spec = SynthSpec::with_counts([(ActionLabel::Wave, 100), (ActionLabel::Gaze, 100)], 5);
        let tracks = generate_tracks(&spec);
        let xs: Vec<Vec<f64>> = tracks.iter().map(|t| wrist_velocity_features(t, 30).to_vec()).collect();
        let ys: Vec<usize> = tracks.iter().map(|t| t.labels.action.index()).collect();
        let acc = two_fold_accuracy(&xs, &ys);
        assert!(acc >= 0.95, "{acc}");
    }
}
