//! Synthetic laparoscopic-like procedures.
//!
//! Each procedure is one Pringle-maneuver cycle: five contiguous phases in a
//! fixed order, dual-rate timestamps, an instrument glyph during the two
//! blocking-relevant phases and an ischemia patch whose colour trajectory
//! encodes blocking effectiveness. Generation is a pure function of
//! `(seed, index)`.

mod dataset;
mod render;

pub use dataset::{
    read_dataset, read_manifest, read_one, read_split, write_dataset, Dataset, Manifest, ManifestEntry, Split,
    SplitSizes,
};
pub use render::{render_frame, FrameScene, Rgb};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Triangular};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Surgical phase of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum PhaseLabel {
    Preparing = 0,
    Knotting = 1,
    Resecting = 2,
    Releasing = 3,
    Postprocessing = 4,
}

impl PhaseLabel {
    pub const COUNT: usize = 5;
    pub const ALL: [PhaseLabel; 5] = [
        PhaseLabel::Preparing,
        PhaseLabel::Knotting,
        PhaseLabel::Resecting,
        PhaseLabel::Releasing,
        PhaseLabel::Postprocessing,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PhaseLabel::Preparing => "Preparing",
            PhaseLabel::Knotting => "Knotting",
            PhaseLabel::Resecting => "Resecting",
            PhaseLabel::Releasing => "Releasing",
            PhaseLabel::Postprocessing => "Postprocessing",
        }
    }

    /// Knotting and Releasing are the catheter operations the masking keeps.
    pub fn is_blocking_relevant(self) -> bool {
        matches!(self, PhaseLabel::Knotting | PhaseLabel::Releasing)
    }
}

impl std::fmt::Display for PhaseLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned box in pixel units, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn fits(&self, height: usize, width: usize) -> bool {
        (self.x + self.w) as usize <= width && (self.y + self.h) as usize <= height
    }

    pub fn full(height: usize, width: usize) -> Self {
        BoundingBox {
            x: 0,
            y: 0,
            w: width as u32,
            h: height as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub n_procedures: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub frames_mean: usize,
    pub phase_fractions: [f64; 5],
    pub ineffective_fraction: f64,
    pub high_rate_fps: f64,
    pub low_rate_fps: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
    /// Lower bound on Knotting + Releasing frames per procedure.
    pub min_blocking_frames: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            n_procedures: 50,
            frames_min: 313,
            frames_max: 726,
            frames_mean: 501,
            phase_fractions: [0.0966, 0.0938, 0.6661, 0.0586, 0.0849],
            ineffective_fraction: 0.10,
            high_rate_fps: 3.0,
            low_rate_fps: 0.33,
            image_height: 64,
            image_width: 64,
            seed: 7,
            min_blocking_frames: 30,
        }
    }
}

/// Dirichlet concentration multiplier applied to the phase fractions.
const SEGMENT_CONCENTRATION: f64 = 50.0;
const SEGMENT_RETRIES: usize = 64;

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.phase_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("phase fractions sum to {sum}, expected 1")));
        }
        if self.phase_fractions.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::Config("phase fractions must be positive".into()));
        }
        if self.frames_min > self.frames_max {
            return Err(Error::Config(format!(
                "frames_min {} exceeds frames_max {}",
                self.frames_min, self.frames_max
            )));
        }
        if self.frames_mean < self.frames_min || self.frames_mean > self.frames_max {
            return Err(Error::Config(format!(
                "frames_mean {} outside [{}, {}]",
                self.frames_mean, self.frames_min, self.frames_max
            )));
        }
        if self.frames_min < PhaseLabel::COUNT {
            return Err(Error::Config(format!(
                "frames_min must be at least {} (one frame per phase)",
                PhaseLabel::COUNT
            )));
        }
        if !(0.0..=1.0).contains(&self.ineffective_fraction) {
            return Err(Error::Config("ineffective_fraction must lie in [0, 1]".into()));
        }
        if !(self.high_rate_fps > 0.0 && self.low_rate_fps > 0.0) {
            return Err(Error::Config("sampling rates must be positive".into()));
        }
        if self.image_height < 16 || self.image_width < 16 {
            return Err(Error::Config("images must be at least 16x16".into()));
        }
        Ok(())
    }

    /// Indices of the ineffective-blocking procedures, spread evenly over the
    /// index range so every split receives its share.
    pub fn ineffective_indices(&self) -> Vec<usize> {
        let n = self.n_procedures;
        let m = (n as f64 * self.ineffective_fraction).round() as usize;
        (0..m)
            .map(|k| (((k as f64 + 0.5) * n as f64) / m as f64).floor() as usize)
            .collect()
    }

    pub fn is_effective(&self, index: usize) -> bool {
        !self.ineffective_indices().contains(&index)
    }

    fn fps(&self, phase: PhaseLabel) -> f64 {
        if phase.is_blocking_relevant() {
            self.high_rate_fps
        } else {
            self.low_rate_fps
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    /// Row-major `H x W x 3` intensities in `[0, 1]`.
    pub image: Vec<f32>,
    pub phase: PhaseLabel,
    /// Present only on Knotting frames.
    pub effective: Option<bool>,
    pub bbox: BoundingBox,
    pub t_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProcedure {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<FrameRecord>,
    pub effective_case: bool,
}

impl SyntheticProcedure {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn phases(&self) -> Vec<PhaseLabel> {
        self.frames.iter().map(|f| f.phase).collect()
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }
}

pub fn procedure_id(index: usize) -> String {
    format!("proc_{index:03}")
}

/// Draws the frame count: triangular on `[frames_min, frames_max]` with the
/// mode placed so the expectation equals `frames_mean`.
fn sample_frame_count(params: &GeneratorParams, rng: &mut ChaCha8Rng) -> usize {
    let (lo, hi) = (params.frames_min as f64, params.frames_max as f64);
    if params.frames_min == params.frames_max {
        return params.frames_min;
    }
    let mode = (3.0 * params.frames_mean as f64 - lo - hi).clamp(lo, hi);
    let tri = Triangular::new(lo, hi + 1.0 - 1e-9, mode).expect("validated bounds");
    (tri.sample(rng).floor() as usize).clamp(params.frames_min, params.frames_max)
}

/// Largest-remainder rounding of `fractions * total` to integers summing to `total`.
pub fn largest_remainder(fractions: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn segments_ok(counts: &[usize], min_blocking: usize) -> bool {
    counts.iter().all(|&c| c >= 1)
        && counts[PhaseLabel::Knotting.id()] + counts[PhaseLabel::Releasing.id()] >= min_blocking
}

fn sample_segments(params: &GeneratorParams, total: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let min_blocking = params.min_blocking_frames.min(total.saturating_sub(3));
    for _ in 0..SEGMENT_RETRIES {
        let draws: Vec<f64> = params
            .phase_fractions
            .iter()
            .map(|&p| {
                Gamma::new(SEGMENT_CONCENTRATION * p, 1.0)
                    .expect("positive shape")
                    .sample(rng)
            })
            .collect();
        let sum: f64 = draws.iter().sum();
        if sum <= 0.0 {
            continue;
        }
        let fractions: Vec<f64> = draws.iter().map(|d| d / sum).collect();
        let counts = largest_remainder(&fractions, total);
        if segments_ok(&counts, min_blocking) {
            return counts;
        }
    }
    // Fall back to the expected split, then move frames into the short phases.
    let mut counts = largest_remainder(&params.phase_fractions, total);
    let largest = |c: &[usize]| (0..c.len()).max_by_key(|&i| c[i]).unwrap();
    for i in 0..counts.len() {
        while counts[i] == 0 {
            let j = largest(&counts);
            counts[j] -= 1;
            counts[i] += 1;
        }
    }
    let (k, r) = (PhaseLabel::Knotting.id(), PhaseLabel::Releasing.id());
    while counts[k] + counts[r] < min_blocking {
        let j = largest(&counts);
        if j == k || j == r || counts[j] <= 1 {
            break;
        }
        counts[j] -= 1;
        if counts[k] <= counts[r] {
            counts[k] += 1;
        } else {
            counts[r] += 1;
        }
    }
    counts
}

/// Generates procedure `index` of the dataset described by `params`.
pub fn generate_procedure(params: &GeneratorParams, index: usize) -> Result<SyntheticProcedure> {
    params.validate()?;
    if index >= params.n_procedures {
        return Err(Error::Config(format!(
            "procedure index {index} out of range for {} procedures",
            params.n_procedures
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64 + 1);

    let effective_case = params.is_effective(index);
    let total = sample_frame_count(params, &mut rng);
    let counts = sample_segments(params, total, &mut rng);

    let (h, w) = (params.image_height, params.image_width);
    let box_w = rng.random_range(w / 5..=w / 3) as u32;
    let box_h = rng.random_range(h / 5..=h / 3) as u32;
    let bbox = BoundingBox {
        x: rng.random_range(0..=(w as u32 - box_w)),
        y: rng.random_range(h as u32 / 2 - box_h / 2..=(h as u32 - box_h)),
        w: box_w,
        h: box_h,
    };

    let mut starts = [0usize; 5];
    for p in 1..5 {
        starts[p] = starts[p - 1] + counts[p - 1];
    }
    let knot_start = starts[PhaseLabel::Knotting.id()];
    let knot_len = counts[PhaseLabel::Knotting.id()];
    let ramp = (knot_len as f64 / 3.0).max(1.0);

    let mut frames = Vec::with_capacity(total);
    let mut t = 0.0f64;
    for (p, &count) in counts.iter().enumerate() {
        let phase = PhaseLabel::from_id(p).unwrap();
        for local in 0..count {
            let i = starts[p] + local;
            if i > 0 {
                t += 1.0 / params.fps(phase);
            }
            let progress = local as f64 / count.max(1) as f64;
            let darkness = if effective_case && i >= knot_start {
                let trend = ((i - knot_start + 1) as f64 / ramp).min(1.0);
                (trend + 0.04 * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let scene = FrameScene {
                phase,
                progress,
                frame_index: i,
                darkness,
                bbox,
            };
            let image = render_frame(&scene, h, w, &mut rng);
            frames.push(FrameRecord {
                image,
                phase,
                effective: (phase == PhaseLabel::Knotting).then_some(effective_case),
                bbox,
                t_seconds: t,
            });
        }
    }

    Ok(SyntheticProcedure {
        id: procedure_id(index),
        height: h,
        width: w,
        frames,
        effective_case,
    })
}

/// Generates every procedure; procedures are independent and built in parallel.
pub fn generate_all(params: &GeneratorParams) -> Result<Vec<SyntheticProcedure>> {
    params.validate()?;
    (0..params.n_procedures)
        .into_par_iter()
        .map(|i| generate_procedure(params, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorParams {
        GeneratorParams {
            n_procedures: 6,
            frames_min: 60,
            frames_max: 90,
            frames_mean: 70,
            image_height: 32,
            image_width: 32,
            ..Default::default()
        }
    }

    #[test]
    fn default_procedure_has_bounded_length_and_fixed_order() {
        let p = generate_procedure(&GeneratorParams::default(), 0).unwrap();
        assert!((313..=726).contains(&p.len()), "len {}", p.len());
        let phases = p.phases();
        assert!(phases.windows(2).all(|w| w[0] <= w[1]));
        for phase in PhaseLabel::ALL {
            assert!(phases.contains(&phase));
        }
    }

    #[test]
    fn zero_ineffective_fraction_gives_all_effective() {
        let params = GeneratorParams {
            ineffective_fraction: 0.0,
            ..small()
        };
        for i in 0..params.n_procedures {
            assert!(generate_procedure(&params, i).unwrap().effective_case);
        }
    }

    #[test]
    fn ineffective_count_for_fifty() {
        let params = GeneratorParams::default();
        let idx = params.ineffective_indices();
        assert_eq!(idx.len(), 5);
        assert_eq!(idx, vec![5, 15, 25, 35, 45]);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = small();
        p.phase_fractions[0] += 0.01;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let p = GeneratorParams {
            frames_min: 100,
            frames_max: 50,
            frames_mean: 70,
            ..small()
        };
        assert!(matches!(generate_procedure(&p, 0), Err(Error::Config(_))));
        assert!(matches!(generate_procedure(&small(), 6), Err(Error::Config(_))));
    }

    #[test]
    fn frame_invariants_hold() {
        let params = small();
        for i in 0..params.n_procedures {
            let p = generate_procedure(&params, i).unwrap();
            for (k, f) in p.frames.iter().enumerate() {
                assert!(f.bbox.fits(p.height, p.width));
                assert_eq!(f.effective.is_some(), f.phase == PhaseLabel::Knotting);
                assert!(f.image.iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(f.image.len(), p.frame_len());
                if k > 0 {
                    let dt = f.t_seconds - p.frames[k - 1].t_seconds;
                    let expect = if f.phase.is_blocking_relevant() { 1.0 / 3.0 } else { 1.0 / 0.33 };
                    assert!((dt - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn generation_is_pure() {
        let params = small();
        assert_eq!(generate_procedure(&params, 3).unwrap(), generate_procedure(&params, 3).unwrap());
        assert_ne!(
            generate_procedure(&params, 3).unwrap().frames[0].image,
            generate_procedure(&params, 4).unwrap().frames[0].image
        );
    }

    #[test]
    fn largest_remainder_sums_to_total() {
        let c = largest_remainder(&[0.0966, 0.0938, 0.6661, 0.0586, 0.0849], 501);
        assert_eq!(c.iter().sum::<usize>(), 501);
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
    }
}
