//! Training-set augmentation in keypoint space: window crops, horizontal flips
//! and box-proportional Gaussian jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{snap, Provenance, Track};
use crate::error::{Error, Result};
use crate::topology::{whole_body_mirror, BBox};

pub const AUGMENT_POLICY_SCHEMA: &str = "augment_policy/1";
pub const DEFAULT_CROP_SCALES: [f64; 3] = [0.95, 0.85, 0.75];
pub const DEFAULT_NOISE_RANGE: (f64, f64) = (0.005, 0.01);

/// Crop window placements per scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropOffsets {
    /// This many uniformly drawn offsets per scale.
    Random(usize),
    /// The same explicit offsets for every scale.
    Fixed(Vec<[f64; 2]>),
}

impl CropOffsets {
    pub fn count(&self) -> usize {
        match self {
            CropOffsets::Random(n) => *n,
            CropOffsets::Fixed(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    #[serde(default = "default_policy_schema")]
    pub schema_version: String,
    #[serde(default = "default_scales")]
    pub crop_scales: Vec<f64>,
    #[serde(default = "default_offsets")]
    pub offsets: CropOffsets,
    #[serde(default = "default_true")]
    pub flip: bool,
    #[serde(default = "default_noise_range")]
    pub noise_scale_range: (f64, f64),
    #[serde(default = "default_replicas")]
    pub noise_replicas: usize,
    /// Frame size used for crops and flips.
    #[serde(default = "default_frame_size")]
    pub frame_size: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

fn default_policy_schema() -> String {
    AUGMENT_POLICY_SCHEMA.to_string()
}
fn default_scales() -> Vec<f64> {
    DEFAULT_CROP_SCALES.to_vec()
}
fn default_offsets() -> CropOffsets {
    CropOffsets::Random(3)
}
fn default_true() -> bool {
    true
}
fn default_noise_range() -> (f64, f64) {
    DEFAULT_NOISE_RANGE
}
fn default_replicas() -> usize {
    5
}
fn default_frame_size() -> [f64; 2] {
    [320.0, 240.0]
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            schema_version: default_policy_schema(),
            crop_scales: default_scales(),
            offsets: default_offsets(),
            flip: true,
            noise_scale_range: DEFAULT_NOISE_RANGE,
            noise_replicas: default_replicas(),
            frame_size: default_frame_size(),
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// The policy that maps every track to itself.
    pub fn identity() -> Self {
        AugmentPolicy {
            crop_scales: vec![1.0],
            offsets: CropOffsets::Fixed(vec![[0.0, 0.0]]),
            flip: false,
            noise_replicas: 0,
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: AugmentPolicy = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != AUGMENT_POLICY_SCHEMA {
            return Err(Error::Config(format!(
                "schema_version: expected {AUGMENT_POLICY_SCHEMA}, found {}",
                self.schema_version
            )));
        }
        if let Some(s) = self.crop_scales.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
            return Err(Error::Config(format!("crop_scales: {s} not in (0, 1]")));
        }
        let (lo, hi) = self.noise_scale_range;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(Error::Config(format!("noise_scale_range: need 0 <= lo <= hi, got ({lo}, {hi})")));
        }
        if let CropOffsets::Fixed(v) = &self.offsets {
            if let Some(o) = v.iter().find(|o| !o.iter().all(|c| (0.0..=1.0).contains(c))) {
                return Err(Error::Config(format!("offsets: {o:?} not in [0, 1]^2")));
            }
        }
        if !(self.frame_size[0] > 0.0 && self.frame_size[1] > 0.0) {
            return Err(Error::Config("frame_size: must be positive".into()));
        }
        Ok(())
    }

    /// True when every output would equal its input.
    pub fn is_identity(&self) -> bool {
        self.crop_scales == [1.0]
            && !self.flip
            && self.noise_replicas == 0
            && matches!(&self.offsets, CropOffsets::Fixed(v) if v.len() == 1)
    }

    /// Number of outputs per input track.
    pub fn expansion_factor(&self) -> usize {
        self.crop_scales.len() * self.offsets.count() * if self.flip { 2 } else { 1 } * (self.noise_replicas + 1)
    }
}

/// Crops a `(scale·W, scale·H)` window whose origin is `offset·(W−scale·W, H−scale·H)`.
pub fn apply_crop(track: &Track, scale: f64, offset: (f64, f64), frame_size: [f64; 2]) -> Result<Track> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidInput(format!("crop scale {scale} not in (0, 1]")));
    }
    if !((0.0..=1.0).contains(&offset.0) && (0.0..=1.0).contains(&offset.1)) {
        return Err(Error::InvalidInput(format!(
            "crop offset ({}, {}) places the window outside the frame",
            offset.0, offset.1
        )));
    }
    let [w, h] = frame_size;
    let (cw, ch) = (scale * w, scale * h);
    let (ox, oy) = (snap(offset.0 * (w - cw)), snap(offset.1 * (h - ch)));
    let mut out = track.clone();
    for frame in &mut out.frames {
        frame.bbox.x -= ox;
        frame.bbox.y -= oy;
        for k in &mut frame.keypoints {
            k.x -= ox;
            k.y -= oy;
            if !((0.0..=cw).contains(&k.x) && (0.0..=ch).contains(&k.y)) {
                k.c = 0.0;
            }
        }
    }
    Ok(out)
}

/// Horizontal mirror: `x -> W - x` with left/right keypoint rows swapped.
pub fn apply_flip(track: &Track, frame_size: [f64; 2]) -> Track {
    let w = frame_size[0];
    let perm = whole_body_mirror();
    let mut out = track.clone();
    for (frame, src) in out.frames.iter_mut().zip(&track.frames) {
        frame.bbox = BBox::new(w - src.bbox.x - src.bbox.w, src.bbox.y, src.bbox.w, src.bbox.h);
        for (i, k) in frame.keypoints.iter_mut().enumerate() {
            let s = src.keypoints[perm[i]];
            k.x = w - s.x;
            k.y = s.y;
            k.c = s.c;
        }
    }
    out
}

/// Standard deviation of the jitter for one frame's box.
pub fn noise_sigma(scale_factor: f64, bbox: BBox) -> f64 {
    scale_factor * (bbox.w * bbox.h).sqrt()
}

/// Adds zero-mean Gaussian noise with σ = s·√(w·h) of each frame's box.
pub fn apply_keypoint_noise(track: &Track, scale_factor: f64, seed: u64) -> Track {
    let (lo, hi) = DEFAULT_NOISE_RANGE;
    if !(lo..=hi).contains(&scale_factor) && scale_factor != 0.0 {
        log::warn!("noise scale factor {scale_factor} outside the default range [{lo}, {hi}]");
    }
    let mut out = track.clone();
    if scale_factor == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for frame in &mut out.frames {
        let sigma = noise_sigma(scale_factor, frame.bbox);
        let dist = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
        for k in &mut frame.keypoints {
            k.x = snap(k.x + dist.sample(&mut rng));
            k.y = snap(k.y + dist.sample(&mut rng));
        }
    }
    out
}

/// 64-bit FNV-1a.
fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed for one track, independent of processing order.
pub fn track_seed(seed: u64, track_id: &str) -> u64 {
    seed ^ fnv1a(track_id)
}

/// Augmented variants of one track, noiseless geometric variant first in each group.
pub fn expand_track(track: &Track, policy: &AugmentPolicy) -> Result<Vec<Track>> {
    let mut rng = ChaCha8Rng::seed_from_u64(track_seed(policy.seed, &track.track_id));
    let source = track.source_id().to_string();
    let flips: &[bool] = if policy.flip { &[false, true] } else { &[false] };
    let mut out = Vec::with_capacity(policy.expansion_factor());
    for &flip in flips {
        let base = if flip {
            apply_flip(track, policy.frame_size)
        } else {
            track.clone()
        };
        for &scale in &policy.crop_scales {
            let offsets: Vec<(f64, f64)> = match &policy.offsets {
                CropOffsets::Random(n) => (0..*n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect(),
                CropOffsets::Fixed(v) => v.iter().map(|o| (o[0], o[1])).collect(),
            };
            for offset in offsets {
                let geo = apply_crop(&base, scale, offset, policy.frame_size)?;
                let desc = format!("flip={};crop={scale}@({:.6},{:.6})", flip as u8, offset.0, offset.1);
                for r in 0..=policy.noise_replicas {
                    let (variant, desc) = if r == 0 {
                        (geo.clone(), desc.clone())
                    } else {
                        let (lo, hi) = policy.noise_scale_range;
                        let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                        let noise_seed = rng.gen::<u64>();
                        (apply_keypoint_noise(&geo, s, noise_seed), format!("{desc};noise={s:.6}"))
                    };
                    out.push(Track {
                        track_id: format!("{}#aug{}", track.track_id, out.len()),
                        provenance: Some(Provenance {
                            source_track_id: source.clone(),
                            transform: desc,
                        }),
                        ..variant
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Expands every track by the policy; an identity policy returns the input unchanged.
pub fn expand_training_set(tracks: &[Track], policy: &AugmentPolicy) -> Result<Vec<Track>> {
    policy.validate()?;
    if policy.is_identity() {
        return Ok(tracks.to_vec());
    }
    let mut out = Vec::with_capacity(tracks.len() * policy.expansion_factor());
    for t in tracks {
        out.extend(expand_track(t, policy)?);
    }
    Ok(out)
}
