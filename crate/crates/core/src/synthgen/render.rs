use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BoundingBox, PhaseLabel};

pub type Rgb = [f32; 3];

/// Everything needed to draw one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameScene {
    pub phase: PhaseLabel,
    /// Position inside the current phase, in `[0, 1)`.
    pub progress: f64,
    pub frame_index: usize,
    /// Ischemia darkening level, 0 = perfused (bright red), 1 = ischemic.
    pub darkness: f64,
    pub bbox: BoundingBox,
}

struct Texture {
    tint: Rgb,
    angle: f32,
    cycles: f32,
}

// Knotting and Releasing share one texture; only glyph motion and context
// tell them apart.
fn texture(phase: PhaseLabel) -> Texture {
    match phase {
        PhaseLabel::Preparing => Texture { tint: [0.55, 0.45, 0.40], angle: 0.0, cycles: 3.0 },
        PhaseLabel::Knotting | PhaseLabel::Releasing => {
            Texture { tint: [0.50, 0.38, 0.42], angle: 0.785, cycles: 5.0 }
        }
        PhaseLabel::Resecting => Texture { tint: [0.62, 0.35, 0.30], angle: 1.571, cycles: 4.0 },
        PhaseLabel::Postprocessing => {
            Texture { tint: [0.45, 0.50, 0.48], angle: 2.356, cycles: 2.0 }
        }
    }
}

const PERFUSED: Rgb = [0.90, 0.25, 0.22];
const ISCHEMIC: Rgb = [0.45, 0.08, 0.10];
const GLYPH: Rgb = [0.92, 0.92, 0.95];

/// Glyph anchor for a blocking-relevant frame. Releasing replays the
/// Knotting path backwards.
fn glyph_anchor(scene: &FrameScene, height: usize, width: usize) -> (f64, f64) {
    let p = match scene.phase {
        PhaseLabel::Releasing => 1.0 - scene.progress,
        _ => scene.progress,
    };
    let wobble = (std::f64::consts::TAU * scene.frame_index as f64 / 5.0).sin();
    let x = 2.0 + (width as f64 - 14.0) * p + 2.0 * wobble;
    let y = height as f64 / 6.0 + (height as f64 / 8.0) * (std::f64::consts::PI * p).sin();
    (x, y)
}

/// Renders one `height x width x 3` frame with values in `[0, 1]`.
pub fn render_frame(scene: &FrameScene, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let tex = texture(scene.phase);
    let (dx, dy) = (tex.angle.cos(), tex.angle.sin());
    let shift: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let brightness: f32 = rng.random_range(-0.04..0.04);
    let mut img = vec![0f32; height * width * 3];
    for y in 0..height {
        for x in 0..width {
            let u = (x as f32 * dx + y as f32 * dy) / width as f32;
            let stripe = 0.12 * (std::f32::consts::TAU * tex.cycles * u + shift).sin();
            for ch in 0..3 {
                let noise: f32 = rng.random_range(-0.05..0.05);
                img[(y * width + x) * 3 + ch] = tex.tint[ch] + stripe + brightness + noise;
            }
        }
    }

    let b = scene.bbox;
    let dark = scene.darkness as f32;
    let patch: Rgb = std::array::from_fn(|c| PERFUSED[c] + (ISCHEMIC[c] - PERFUSED[c]) * dark);
    for y in b.y as usize..(b.y + b.h) as usize {
        for x in b.x as usize..(b.x + b.w) as usize {
            for ch in 0..3 {
                let mottle: f32 = rng.random_range(-0.03..0.03);
                img[(y * width + x) * 3 + ch] = patch[ch] + mottle;
            }
        }
    }

    if scene.phase.is_blocking_relevant() {
        let (gx, gy) = glyph_anchor(scene, height, width);
        let (gw, gh) = (10usize, 3usize);
        let x0 = gx.round().max(0.0) as usize;
        let y0 = gy.round().max(0.0) as usize;
        for y in y0..(y0 + gh).min(height) {
            for x in x0..(x0 + gw).min(width) {
                img[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&GLYPH);
            }
        }
        // instrument tip
        let tip_x = (x0 + gw).min(width - 1);
        for y in y0.saturating_sub(2)..(y0 + gh + 2).min(height) {
            img[(y * width + tip_x) * 3..(y * width + tip_x) * 3 + 3].copy_from_slice(&GLYPH);
        }
    }

    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn scene(phase: PhaseLabel, progress: f64, darkness: f64) -> FrameScene {
        FrameScene {
            phase,
            progress,
            frame_index: 3,
            darkness,
            bbox: BoundingBox { x: 20, y: 36, w: 14, h: 12 },
        }
    }

    fn box_mean_red(img: &[f32], b: BoundingBox, width: usize) -> f32 {
        let mut s = 0.0;
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                s += img[((y as usize) * width + x as usize) * 3];
            }
        }
        s / (b.w * b.h) as f32
    }

    #[test]
    fn darkening_lowers_box_intensity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bright = render_frame(&scene(PhaseLabel::Resecting, 0.5, 0.0), 64, 64, &mut rng);
        let dark = render_frame(&scene(PhaseLabel::Resecting, 0.5, 1.0), 64, 64, &mut rng);
        let b = scene(PhaseLabel::Resecting, 0.0, 0.0).bbox;
        assert!(box_mean_red(&bright, b, 64) - box_mean_red(&dark, b, 64) > 0.3);
    }

    #[test]
    fn releasing_reverses_knotting_path() {
        let s = scene(PhaseLabel::Knotting, 0.2, 0.0);
        let r = scene(PhaseLabel::Releasing, 0.8, 0.0);
        let (a, b) = (glyph_anchor(&s, 64, 64), glyph_anchor(&r, 64, 64));
        assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
    }
}
