//! Masked temporal encoding.
//!
//! A window of frame features is cut into non-overlapping clips. Each clip
//! carries `d` message tokens; clips attend internally, then trade token sets
//! with other clips according to a [`SwapSchedule`]. Before the last
//! attention pass, clips whose pooled feature is closest to a
//! blocking-irrelevant prototype have their tokens masked out of the keys.

mod swap;

pub use swap::{build_swap_schedule, full_mixing_swap_count, permute, step_permutation, SwapSchedule};

use candle_core::{Device, Tensor};
use log::trace;

use crate::error::{Error, Result};
use crate::nn::{softmax_last, LayerNorm, Linear, Mlp, ParamStore};
use crate::objectives::{compute_relevance, PrototypeBank};
use crate::synthgen::PhaseLabel;

/// Additive logit for masked keys; its exponential underflows to exactly 0.
const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MteConfig {
    pub channels: usize,
    pub clip_width: usize,
    pub tokens: usize,
    pub heads: usize,
    pub n_swaps: usize,
    pub masking: bool,
    /// Longest (padded) window the positional table covers.
    pub max_frames: usize,
}

/// One clip: `w x c` features, `d x c` message tokens and their mask.
#[derive(Debug, Clone)]
pub struct ClipState {
    pub features: Tensor,
    pub tokens: Option<Tensor>,
    /// `true` = token participates as key/value.
    pub token_mask: Vec<bool>,
    pub clip_index: usize,
}

/// All clips of a batch of windows, stored densely.
#[derive(Debug, Clone)]
pub struct ClipBatch {
    /// `(B, K, w, c)`
    pub features: Tensor,
    /// `(B, K, d, c)`, absent when `d == 0`.
    pub tokens: Option<Tensor>,
    /// `B * K` rows of `d` flags.
    pub token_mask: Vec<Vec<bool>>,
    /// For each `(b, k)` slot, the clip the tokens there were created for.
    pub token_owner: Vec<usize>,
    pub batch: usize,
    pub n_clips: usize,
}

impl ClipBatch {
    pub fn clip(&self, b: usize, k: usize) -> Result<ClipState> {
        Ok(ClipState {
            features: self.features.get(b)?.get(k)?,
            tokens: match &self.tokens {
                Some(t) => Some(t.get(b)?.get(k)?),
                None => None,
            },
            token_mask: self.token_mask[b * self.n_clips + k].clone(),
            clip_index: k,
        })
    }

    pub fn clip_width(&self) -> Result<usize> {
        Ok(self.features.dim(2)?)
    }

    /// Temporal mean of each clip's features, `(B, K, c)`.
    pub fn pooled(&self) -> Result<Tensor> {
        Ok(self.features.mean(2)?)
    }

    /// Features flattened back to a sequence `(B, K * w, c)`.
    pub fn sequence(&self) -> Result<Tensor> {
        let (b, k, w, c) = self.features.dims4()?;
        Ok(self.features.reshape((b, k * w, c))?)
    }
}

/// Splits `(B, N, c)` features into clips of width `w`, padding by repeating
/// the last frame. Returns the clips and per-position padding flags.
pub fn partition_clips(features: &Tensor, w: usize, tokens: Option<&Tensor>) -> Result<(ClipBatch, Vec<bool>)> {
    let (b, n, c) = features.dims3()?;
    if w == 0 || w > n {
        return Err(Error::Config(format!("clip width {w} invalid for window of {n} frames")));
    }
    let padded = n.div_ceil(w) * w;
    let mut padding = vec![false; n];
    padding.resize(padded, true);
    let features = if padded > n {
        let last = features.narrow(1, n - 1, 1)?;
        let reps = last.repeat((1, padded - n, 1))?;
        Tensor::cat(&[features, &reps], 1)?
    } else {
        features.clone()
    };
    let k = padded / w;
    let features = features.reshape((b, k, w, c))?;
    let (tokens, d) = match tokens {
        Some(t) => {
            let d = t.dim(0)?;
            (Some(t.reshape((1, 1, d, c))?.repeat((b, k, 1, 1))?), d)
        }
        None => (None, 0),
    };
    Ok((
        ClipBatch {
            features,
            tokens,
            token_mask: vec![vec![true; d]; b * k],
            token_owner: (0..b).flat_map(|_| 0..k).collect(),
            batch: b,
            n_clips: k,
        },
        padding,
    ))
}

/// Intra-clip transformer layer over clip features and message tokens.
pub struct ClipAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
    heads: usize,
}

impl ClipAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), channels, channels)?,
            key: Linear::new(store, &format!("{name}.key"), channels, channels)?,
            value: Linear::new(store, &format!("{name}.value"), channels, channels)?,
            out: Linear::new(store, &format!("{name}.out"), channels, channels)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), channels, 4 * channels, channels)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels)?,
            heads,
        })
    }

    /// Multi-head self-attention over `(G, L, c)`; `key_bias` is `(G, L)`
    /// and added to every query's logits. Returns the layer output and the
    /// attention weights `(G, heads, L, L)`.
    pub fn forward_seq(&self, x: &Tensor, key_bias: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (g, l, c) = x.dims3()?;
        let hd = c / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((g, l, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let xn = self.norm1.forward(x)?;
        let q = split(self.query.forward(&xn)?)?;
        let k = split(self.key.forward(&xn)?)?;
        let v = split(self.value.forward(&xn)?)?;
        let mut logits = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        if let Some(bias) = key_bias {
            logits = logits.broadcast_add(&bias.reshape((g, 1, 1, l))?)?;
        }
        let weights = softmax_last(&logits)?;
        let ctx = weights.matmul(&v)?.transpose(1, 2)?.reshape((g, l, c))?;
        let h = (x + self.out.forward(&ctx)?)?;
        let y = (&h + self.ffn.forward(&self.norm2.forward(&h)?)?)?;
        Ok((y, weights))
    }

    /// Concatenates features and tokens per clip, attends, and splits back.
    pub fn attend(&self, clips: &ClipBatch) -> Result<ClipBatch> {
        Ok(self.attend_with_weights(clips)?.0)
    }

    pub fn attend_with_weights(&self, clips: &ClipBatch) -> Result<(ClipBatch, Tensor)> {
        let (b, k, w, c) = clips.features.dims4()?;
        let (x, d) = match &clips.tokens {
            Some(t) => (Tensor::cat(&[&clips.features, t], 2)?, t.dim(2)?),
            None => (clips.features.clone(), 0),
        };
        let l = w + d;
        let x = x.reshape((b * k, l, c))?;
        let bias = if clips.token_mask.iter().any(|m| m.iter().any(|on| !on)) {
            let mut v = Vec::with_capacity(b * k * l);
            for mask in &clips.token_mask {
                v.extend(std::iter::repeat_n(0.0, w));
                v.extend(mask.iter().map(|&on| if on { 0.0 } else { MASKED_LOGIT }));
            }
            Some(Tensor::from_vec(v, (b * k, l), &Device::Cpu)?.to_dtype(x.dtype())?)
        } else {
            None
        };
        let (y, weights) = self.forward_seq(&x, bias.as_ref())?;
        let y = y.reshape((b, k, l, c))?;
        let out = ClipBatch {
            features: y.narrow(2, 0, w)?,
            tokens: if d > 0 { Some(y.narrow(2, w, d)?) } else { None },
            token_mask: clips.token_mask.clone(),
            token_owner: clips.token_owner.clone(),
            batch: b,
            n_clips: k,
        };
        Ok((out, weights))
    }
}

/// Exchanges token sets between clips according to step `step` of the
/// schedule. Token tensors and masks move together; features stay put.
pub fn apply_swap(clips: &ClipBatch, schedule: &SwapSchedule, step: usize) -> Result<ClipBatch> {
    if schedule.n_clips != clips.n_clips {
        return Err(Error::Internal(format!(
            "swap schedule built for {} clips applied to {}",
            schedule.n_clips, clips.n_clips
        )));
    }
    let perm = schedule.permutation(step);
    let mut mask = Vec::with_capacity(clips.token_mask.len());
    let mut owner = Vec::with_capacity(clips.token_owner.len());
    for b in 0..clips.batch {
        let row = b * clips.n_clips;
        mask.extend(permute(&clips.token_mask[row..row + clips.n_clips], &perm));
        owner.extend(permute(&clips.token_owner[row..row + clips.n_clips], &perm));
    }
    let tokens = match &clips.tokens {
        Some(t) => {
            let idx: Vec<u32> = perm.iter().map(|&p| p as u32).collect();
            let idx = Tensor::new(idx, &Device::Cpu)?;
            Some(t.contiguous()?.index_select(&idx, 1)?)
        }
        None => None,
    };
    Ok(ClipBatch {
        features: clips.features.clone(),
        tokens,
        token_mask: mask,
        token_owner: owner,
        batch: clips.batch,
        n_clips: clips.n_clips,
    })
}

/// Masks all tokens of clips whose most relevant prototype is not a
/// blocking-relevant phase. No-op until every prototype exists. Returns the
/// per-slot masking decisions.
pub fn mask_tokens(clips: &mut ClipBatch, bank: &PrototypeBank) -> Result<Vec<bool>> {
    let mut decisions = vec![false; clips.batch * clips.n_clips];
    if !bank.is_complete() || clips.tokens.is_none() {
        return Ok(decisions);
    }
    let pooled = clips.pooled()?.to_dtype(candle_core::DType::F64)?.flatten(0, 1)?.to_vec2::<f64>()?;
    for (slot, feature) in pooled.iter().enumerate() {
        let relevance = compute_relevance(feature, bank);
        let best = relevance
            .iter()
            .enumerate()
            .filter_map(|(j, r)| r.map(|r| (j, r)))
            .fold(None, |acc: Option<(usize, f64)>, (j, r)| match acc {
                Some((_, br)) if br >= r => acc,
                _ => Some((j, r)),
            });
        if let Some((j, _)) = best {
            let phase = PhaseLabel::from_id(j).unwrap();
            if !phase.is_blocking_relevant() {
                clips.token_mask[slot].iter_mut().for_each(|m| *m = false);
                decisions[slot] = true;
            }
        }
    }
    trace!("masked {} of {} clips", decisions.iter().filter(|d| **d).count(), decisions.len());
    Ok(decisions)
}

pub struct MteOutput {
    /// Clips after the final attention pass; `features` are `f'_k`.
    pub clips: ClipBatch,
    pub padding: Vec<bool>,
    /// Attention passes each clip went through.
    pub passes: usize,
    pub masked: Vec<bool>,
}

pub struct Mte {
    cfg: MteConfig,
    message_tokens: Option<Tensor>,
    position: Tensor,
    layers: Vec<ClipAttention>,
}

impl Mte {
    pub fn new(store: &mut ParamStore, cfg: MteConfig) -> Result<Self> {
        let c = cfg.channels;
        let message_tokens = if cfg.tokens > 0 {
            Some(store.normal("mte.message_tokens", &[cfg.tokens, c], 0.5)?)
        } else {
            None
        };
        let position = store.normal("mte.position", &[cfg.max_frames, c], 0.1)?;
        let layers = (0..=cfg.n_swaps)
            .map(|i| ClipAttention::new(store, &format!("mte.layer{i}"), c, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            message_tokens,
            position,
            layers,
        })
    }

    pub fn config(&self) -> &MteConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[ClipAttention] {
        &self.layers
    }

    /// Runs attention/swap alternation on `(B, N, c)` features.
    pub fn forward(&self, features: &Tensor, bank: &PrototypeBank) -> Result<MteOutput> {
        let (clips, padding) = partition_clips(features, self.cfg.clip_width, self.message_tokens.as_ref())?;
        let padded = padding.len();
        if padded > self.cfg.max_frames {
            return Err(Error::Input(format!(
                "window of {padded} frames exceeds positional table of {}",
                self.cfg.max_frames
            )));
        }
        let (b, k, w, c) = clips.features.dims4()?;
        let pos = self.position.narrow(0, 0, padded)?.reshape((1, k, w, c))?;
        let mut clips = ClipBatch {
            features: clips.features.broadcast_add(&pos)?,
            ..clips
        };
        let schedule = build_swap_schedule(k, self.cfg.n_swaps);
        let mut passes = 0;
        for (step, layer) in self.layers[..self.cfg.n_swaps].iter().enumerate() {
            clips = layer.attend(&clips)?;
            passes += 1;
            clips = apply_swap(&clips, &schedule, step)?;
        }
        let masked = if self.cfg.masking {
            mask_tokens(&mut clips, bank)?
        } else {
            vec![false; b * k]
        };
        clips = self.layers[self.cfg.n_swaps].attend(&clips)?;
        passes += 1;
        Ok(MteOutput {
            clips,
            padding,
            passes,
            masked,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use proptest::prelude::*;

    fn store() -> ParamStore {
        ParamStore::new(3, DType::F64)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut s = ParamStore::new(seed, DType::F64);
        s.normal("x", shape, 1.0).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    fn cfg(n_swaps: usize, masking: bool) -> MteConfig {
        MteConfig {
            channels: 8,
            clip_width: 4,
            tokens: 2,
            heads: 2,
            n_swaps,
            masking,
            max_frames: 20,
        }
    }

    fn complete_bank(c: usize, blocking_only: bool) -> PrototypeBank {
        let mut bank = PrototypeBank::new(c, 0.5);
        for p in PhaseLabel::ALL {
            let v = if p.is_blocking_relevant() == blocking_only { vec![1.0; c] } else { vec![-1.0; c] };
            bank.set_prototype(p, v);
        }
        bank
    }

    #[test]
    fn partition_pads_with_last_frame() {
        let x = random(&[1, 6, 3], 1);
        let (clips, padding) = partition_clips(&x, 4, None).unwrap();
        assert_eq!(clips.features.dims(), &[1, 2, 4, 3]);
        assert_eq!(padding, vec![false, false, false, false, false, false, true, true]);
        let seq = clips.sequence().unwrap();
        let last = x.narrow(1, 5, 1).unwrap();
        assert_eq!(max_diff(&seq.narrow(1, 7, 1).unwrap(), &last), 0.0);
        assert!(partition_clips(&x, 0, None).is_err());
        assert!(partition_clips(&x, 7, None).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut s = store();
        let layer = ClipAttention::new(&mut s, "a", 8, 2).unwrap();
        let tokens = random(&[2, 8], 5);
        let (clips, _) = partition_clips(&random(&[2, 8, 8], 4), 4, Some(&tokens)).unwrap();
        let (_, w) = layer.attend_with_weights(&clips).unwrap();
        assert_eq!(w.dims(), &[4, 2, 6, 6]);
        let sums: Vec<f64> = w.sum(3).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn masked_tokens_match_removed_tokens() {
        let mut s = store();
        let layer = ClipAttention::new(&mut s, "a", 8, 2).unwrap();
        let feats = random(&[1, 8, 8], 6);
        let tokens = random(&[2, 8], 7);
        let (mut masked, _) = partition_clips(&feats, 4, Some(&tokens)).unwrap();
        masked.token_mask[1] = vec![false, false];
        let (bare, _) = partition_clips(&feats, 4, None).unwrap();
        let with_mask = layer.attend(&masked).unwrap();
        let without = layer.attend(&bare).unwrap();
        let a = with_mask.features.narrow(1, 1, 1).unwrap();
        let b = without.features.narrow(1, 1, 1).unwrap();
        assert!(max_diff(&a, &b) < 1e-12);
        // The unmasked clip still sees its tokens.
        let a0 = with_mask.features.narrow(1, 0, 1).unwrap();
        let b0 = without.features.narrow(1, 0, 1).unwrap();
        assert!(max_diff(&a0, &b0) > 1e-6);
    }

    #[test]
    fn pass_count_follows_swap_count() {
        let bank = PrototypeBank::new(8, 0.5);
        let x = random(&[1, 20, 8], 8);
        for n_swaps in [0, 1, 4] {
            let mut s = store();
            let mte = Mte::new(&mut s, cfg(n_swaps, true)).unwrap();
            let out = mte.forward(&x, &bank).unwrap();
            assert_eq!(out.passes, n_swaps + 1);
            assert_eq!(out.clips.features.dims(), &[1, 5, 4, 8]);
        }
    }

    #[test]
    fn masking_off_ignores_bank() {
        let mut s = store();
        let mte = Mte::new(&mut s, cfg(4, false)).unwrap();
        let x = random(&[2, 20, 8], 9);
        let a = mte.forward(&x, &PrototypeBank::new(8, 0.5)).unwrap();
        let b = mte.forward(&x, &complete_bank(8, false)).unwrap();
        assert_eq!(max_diff(&a.clips.features, &b.clips.features), 0.0);
        assert!(b.masked.iter().all(|m| !m));
    }

    #[test]
    fn masking_needs_every_prototype() {
        let mut clips = partition_clips(&random(&[1, 8, 8], 10), 4, Some(&random(&[2, 8], 11))).unwrap().0;
        let mut bank = PrototypeBank::new(8, 0.5);
        bank.set_prototype(PhaseLabel::Resecting, vec![1.0; 8]);
        assert!(mask_tokens(&mut clips, &bank).unwrap().iter().all(|m| !m));
    }

    #[test]
    fn clips_near_irrelevant_prototype_are_masked() {
        let feats = Tensor::ones((1, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let mut clips = partition_clips(&feats, 4, Some(&random(&[2, 8], 12))).unwrap().0;
        // Irrelevant phases sit at +1, blocking-relevant ones at -1.
        let decisions = mask_tokens(&mut clips, &complete_bank(8, false)).unwrap();
        assert_eq!(decisions, vec![true, true]);
        assert!(clips.token_mask.iter().flatten().all(|m| !m));

        let mut clips = partition_clips(&feats, 4, Some(&random(&[2, 8], 12))).unwrap().0;
        let decisions = mask_tokens(&mut clips, &complete_bank(8, true)).unwrap();
        assert_eq!(decisions, vec![false, false]);
    }

    fn distinct_tokens(b: usize, k: usize, c: usize) -> ClipBatch {
        let features = Tensor::zeros((b, k, 1, c), DType::F64, &Device::Cpu).unwrap();
        let vals: Vec<f64> = (0..b * k * c).map(|i| (i / c) as f64).collect();
        ClipBatch {
            features,
            tokens: Some(Tensor::from_vec(vals, (b, k, 1, c), &Device::Cpu).unwrap()),
            token_mask: (0..b * k).map(|i| vec![i % 2 == 0]).collect(),
            token_owner: (0..b).flat_map(|_| 0..k).collect(),
            batch: b,
            n_clips: k,
        }
    }

    fn token_ids(clips: &ClipBatch) -> Vec<usize> {
        let t: Vec<f64> = clips.tokens.as_ref().unwrap().narrow(3, 0, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        t.into_iter().map(|v| v as usize).collect()
    }

    #[test]
    fn swap_twice_is_identity() {
        let clips = distinct_tokens(2, 5, 3);
        let schedule = build_swap_schedule(5, 4);
        for step in 0..4 {
            let twice = apply_swap(&apply_swap(&clips, &schedule, step).unwrap(), &schedule, step).unwrap();
            assert_eq!(token_ids(&twice), token_ids(&clips));
            assert_eq!(twice.token_owner, clips.token_owner);
            assert_eq!(twice.token_mask, clips.token_mask);
        }
    }

    #[test]
    fn schedule_for_wrong_clip_count_is_rejected() {
        let clips = distinct_tokens(1, 5, 2);
        assert!(apply_swap(&clips, &build_swap_schedule(4, 2), 0).is_err());
    }

    proptest! {
        #[test]
        fn swaps_conserve_tokens(k in 1usize..12, n_swaps in 0usize..8, b in 1usize..3) {
            let mut clips = distinct_tokens(b, k, 2);
            let schedule = build_swap_schedule(k, n_swaps);
            for step in 0..schedule.len() {
                clips = apply_swap(&clips, &schedule, step).unwrap();
            }
            let ids = token_ids(&clips);
            for bi in 0..b {
                let row = &clips.token_owner[bi * k..(bi + 1) * k];
                let mut sorted = row.to_vec();
                sorted.sort_unstable();
                prop_assert_eq!(sorted, (0..k).collect::<Vec<_>>());
                for (slot, &owner) in row.iter().enumerate() {
                    // Token values encode their origin slot; masks travel along.
                    prop_assert_eq!(ids[bi * k + slot], bi * k + owner);
                    prop_assert_eq!(clips.token_mask[bi * k + slot][0], (bi * k + owner) % 2 == 0);
                }
            }
        }
    }
}
