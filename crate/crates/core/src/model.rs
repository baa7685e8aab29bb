//! The assembled recognition network: encoders, masked temporal encoding,
//! compressed sequence modeling, retrieval and the two heads.

use std::time::{Duration, Instant};

use candle_core::{DType, Tensor};

use crate::csm::{retrieve, Csm, CsmConfig, EffectivenessHead, LongMemory};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::mte::{Mte, MteConfig};
use crate::nn::{Mlp, ParamStore};
use crate::objectives::PrototypeBank;
use crate::synthgen::PhaseLabel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub window: usize,
    /// Frame spacing inside a window.
    pub stride: usize,
    pub clip_width: usize,
    pub tokens: usize,
    pub heads: usize,
    pub n_swaps: usize,
    pub masking: bool,
    pub n_blocks: usize,
    pub state_dim: usize,
    pub region_in_all_blocks: bool,
    pub share_region_encoder: bool,
    pub csm_identity: bool,
}

impl ModelConfig {
    pub fn padded_window(&self) -> usize {
        self.window.div_ceil(self.clip_width) * self.clip_width
    }
}

/// Everything the temporal part produces for a batch of windows.
pub struct WindowOutput {
    /// `(B, N_padded, 5)`
    pub phase_logits: Tensor,
    /// `(B, 2)` logits `{ineffective, effective}`.
    pub effect_logits: Tensor,
    /// Retrieval-enriched clip features `f''_k`, `(B, K, w, c)`.
    pub enriched: Tensor,
    /// Temporal mean of `f''_k` per clip, `(B, K, c)`.
    pub clip_pooled: Tensor,
    pub padding: Vec<bool>,
    pub memory: LongMemory,
    pub mte_passes: usize,
    pub masked: Vec<bool>,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub mte: Duration,
    pub csm: Duration,
    pub heads: Duration,
}

pub struct PmModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub mte: Mte,
    pub csm: Csm,
    pub phase_head: Mlp,
    pub effect_head: EffectivenessHead,
    cfg: ModelConfig,
}

impl PmModel {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        if cfg.window == 0 || cfg.clip_width == 0 || cfg.stride == 0 {
            return Err(Error::Config("window, stride and clip width must be positive".into()));
        }
        if cfg.clip_width > cfg.window {
            return Err(Error::Config(format!(
                "clip width {} exceeds window {}",
                cfg.clip_width, cfg.window
            )));
        }
        let mut store = ParamStore::new(seed, dtype);
        let c = cfg.channels;
        let encoder = Encoder::new(
            &mut store,
            EncoderConfig {
                channels: c,
                share_region_encoder: cfg.share_region_encoder,
            },
        )?;
        let mte = Mte::new(
            &mut store,
            MteConfig {
                channels: c,
                clip_width: cfg.clip_width,
                tokens: cfg.tokens,
                heads: cfg.heads,
                n_swaps: cfg.n_swaps,
                masking: cfg.masking,
                max_frames: cfg.padded_window(),
            },
        )?;
        let csm = Csm::new(
            &mut store,
            CsmConfig {
                channels: c,
                state_dim: cfg.state_dim,
                n_blocks: cfg.n_blocks,
                clip_width: cfg.clip_width,
                region_in_all_blocks: cfg.region_in_all_blocks,
                identity: cfg.csm_identity,
            },
        )?;
        let phase_head = Mlp::new(&mut store, "phase_head", c, 2 * c, PhaseLabel::COUNT)?;
        let effect_head = EffectivenessHead::new(&mut store, c)?;
        Ok(Self {
            store,
            encoder,
            mte,
            csm,
            phase_head,
            effect_head,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Temporal part on pre-encoded windows: `frame_features` and
    /// `region_features` are `(B, N, c)`.
    pub fn temporal(&self, frame_features: &Tensor, region_features: &Tensor, bank: &PrototypeBank) -> Result<WindowOutput> {
        let (b, n, c) = frame_features.dims3()?;
        if region_features.dims() != frame_features.dims() {
            return Err(Error::Input(format!(
                "region features {:?} do not match frame features {:?}",
                region_features.dims(),
                frame_features.dims()
            )));
        }
        let t0 = Instant::now();
        let mte = self.mte.forward(frame_features, bank)?;
        let t1 = Instant::now();

        let padded = mte.padding.len();
        let region = if padded > n {
            let last = region_features.narrow(1, n - 1, 1)?.repeat((1, padded - n, 1))?;
            Tensor::cat(&[region_features, &last], 1)?
        } else {
            region_features.clone()
        };
        let f_prime = mte.clips.sequence()?;
        let memory = self.csm.forward(&f_prime, &region)?;
        let (enriched_seq, _) = retrieve(&f_prime, &memory)?;
        let t2 = Instant::now();

        let phase_logits = self.phase_head.forward(&enriched_seq)?;
        let effect_logits = self.effect_head.forward(&memory)?;
        let k = mte.clips.n_clips;
        let w = padded / k;
        let enriched = enriched_seq.reshape((b, k, w, c))?;
        let clip_pooled = enriched.mean(2)?;
        let t3 = Instant::now();
        Ok(WindowOutput {
            phase_logits,
            effect_logits,
            enriched,
            clip_pooled,
            padding: mte.padding,
            memory,
            mte_passes: mte.passes,
            masked: mte.masked,
            timings: StageTimings {
                mte: t1 - t0,
                csm: t2 - t1,
                heads: t3 - t2,
            },
        })
    }
}
