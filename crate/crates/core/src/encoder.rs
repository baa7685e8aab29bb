//! Frame and ischemia-region encoders.
//!
//! Both are small stride-2 convolution stacks ending in a global spatial
//! average, producing one `c`-vector per frame.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Conv, LayerNorm, ParamStore};
use crate::synthgen::BoundingBox;

/// Side of the square patch region crops are resampled to.
pub const REGION_PATCH: usize = 32;

/// Borrowed `height x width x 3` image.
#[derive(Debug, Clone, Copy)]
pub struct Image<'a> {
    pub data: &'a [f32],
    pub height: usize,
    pub width: usize,
}

impl<'a> Image<'a> {
    pub fn new(data: &'a [f32], height: usize, width: usize) -> Self {
        Self { data, height, width }
    }
}

/// Frame-level features `F`, shape `(N, c)`.
#[derive(Debug, Clone)]
pub struct FeatureSequence(pub Tensor);

/// Region features `F_r`, shape `(N, c)`.
#[derive(Debug, Clone)]
pub struct RegionSequence(pub Tensor);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub channels: usize,
    pub share_region_encoder: bool,
}

struct ConvStack {
    stages: Vec<Conv>,
    norm: LayerNorm,
}

impl ConvStack {
    fn new(store: &mut ParamStore, name: &str, widths: &[usize]) -> Result<Self> {
        let stages = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv::new(store, &format!("{name}.stage{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), *widths.last().expect("non-empty widths"))?;
        Ok(Self { stages, norm })
    }

    /// `(N, 3, H, W)` -> `(N, c)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.forward(&h)?.silu()?;
        }
        self.norm.forward(&h.mean((2, 3))?)
    }
}

pub struct Encoder {
    frame: ConvStack,
    region: Option<ConvStack>,
    dtype: DType,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig) -> Result<Self> {
        let c = cfg.channels;
        let frame = ConvStack::new(store, "encoder.frame", &[3, 8, 16, 32, c])?;
        let region = if cfg.share_region_encoder {
            None
        } else {
            Some(ConvStack::new(store, "encoder.region", &[3, 8, c])?)
        };
        Ok(Self {
            frame,
            region,
            dtype: store.dtype(),
        })
    }

    /// Packs images into a centred `(N, 3, H, W)` tensor.
    pub fn images_to_tensor(&self, images: &[Image<'_>]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("no frames to encode".into()))?;
        let (h, w) = (first.height, first.width);
        let mut chw = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.height != h || img.width != w || img.data.len() != h * w * 3 {
                return Err(Error::Input(format!(
                    "frame shape {}x{} ({} values) differs from {h}x{w}x3",
                    img.height,
                    img.width,
                    img.data.len()
                )));
            }
            for ch in 0..3 {
                chw.extend(img.data.iter().skip(ch).step_by(3).map(|v| v - 0.5));
            }
        }
        Ok(Tensor::from_vec(chw, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// Crops each frame to its box, resamples to the region patch and packs
    /// the patches as `(N, 3, P, P)`.
    pub fn regions_to_tensor(&self, images: &[Image<'_>], boxes: &[BoundingBox]) -> Result<Tensor> {
        if images.len() != boxes.len() {
            return Err(Error::Input(format!("{} frames but {} boxes", images.len(), boxes.len())));
        }
        if images.is_empty() {
            return Err(Error::Input("no frames to encode".into()));
        }
        let p = REGION_PATCH;
        let mut chw = Vec::with_capacity(images.len() * 3 * p * p);
        for (img, b) in images.iter().zip(boxes) {
            chw.extend(crop_resize(img, b, p)?.into_iter().map(|v| v - 0.5));
        }
        Ok(Tensor::from_vec(chw, (images.len(), 3, p, p), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    pub fn encode_frames(&self, images: &[Image<'_>]) -> Result<FeatureSequence> {
        Ok(FeatureSequence(self.frame.forward(&self.images_to_tensor(images)?)?))
    }

    pub fn encode_region(&self, images: &[Image<'_>], boxes: &[BoundingBox]) -> Result<RegionSequence> {
        self.encode_region_patches(&self.regions_to_tensor(images, boxes)?)
    }

    pub fn encode_frame_tensor(&self, x: &Tensor) -> Result<FeatureSequence> {
        Ok(FeatureSequence(self.frame.forward(x)?))
    }

    pub fn encode_region_patches(&self, patches: &Tensor) -> Result<RegionSequence> {
        let stack = self.region.as_ref().unwrap_or(&self.frame);
        Ok(RegionSequence(stack.forward(patches)?))
    }
}

/// Bilinear resampling of the boxed area to `size x size`, returned in
/// channel-major order `(3, size, size)`.
pub fn crop_resize(img: &Image<'_>, b: &BoundingBox, size: usize) -> Result<Vec<f32>> {
    if b.w < 2 || b.h < 2 {
        return Err(Error::Input(format!("degenerate box {}x{}", b.w, b.h)));
    }
    if !b.fits(img.height, img.width) {
        return Err(Error::Input(format!(
            "box {:?} exceeds {}x{} frame",
            b, img.height, img.width
        )));
    }
    let at = |y: usize, x: usize, c: usize| img.data[(y * img.width + x) * 3 + c];
    let sample_axis = |o: usize, start: u32, len: u32| -> (usize, usize, f32) {
        let s = ((o as f32 + 0.5) * len as f32 / size as f32 - 0.5).clamp(0.0, (len - 1) as f32);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len as usize - 1);
        (start as usize + i0, start as usize + i1, s - i0 as f32)
    };
    let mut out = vec![0f32; 3 * size * size];
    for oy in 0..size {
        let (y0, y1, fy) = sample_axis(oy, b.y, b.h);
        for ox in 0..size {
            let (x0, x1, fx) = sample_axis(ox, b.x, b.w);
            for c in 0..3 {
                let top = at(y0, x0, c) * (1.0 - fx) + at(y0, x1, c) * fx;
                let bottom = at(y1, x0, c) * (1.0 - fx) + at(y1, x1, c) * fx;
                out[(c * size + oy) * size + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}
