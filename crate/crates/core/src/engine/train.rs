//! Training loop: grouped window sampling, the combined objective, per-epoch
//! prototype flushes, validation and checkpointing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{debug, info};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, TrainState};
use super::config::RunConfig;
use super::eval::evaluate_procedures;
use super::metrics::MetricReport;
use super::windows::window_indices;
use crate::encoder::{Image, REGION_PATCH};
use crate::error::{Error, Result};
use crate::model::PmModel;
use crate::nn::softmax_last;
use crate::objectives::{contrastive_loss_tensor, cross_entropy_logits, total_loss, LossReport, PrototypeBank};
use crate::synthgen::{read_dataset, BoundingBox, Dataset, PhaseLabel, Split, SyntheticProcedure};

/// Keeps the sampling stream apart from parameter initialisation.
const SAMPLER_STREAM: u64 = 1 << 32;

/// One optimisation batch: the distinct frames it needs and how windows
/// index into them.
pub struct TrainBatch {
    /// `(U, 3, H, W)`
    pub frames: Tensor,
    /// `(U, 3, P, P)`
    pub patches: Tensor,
    /// `B * N` rows into the frame axis.
    pub gather: Tensor,
    pub phase_labels: Vec<u32>,
    /// `{0: ineffective, 1: effective}` for windows touching Knotting.
    pub effect_labels: Vec<Option<u32>>,
    pub windows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: LossReport,
    pub fp_clips: usize,
    pub tp_clips: usize,
    pub masked_clips: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_ce_phase: f64,
    pub mean_ce_effect: f64,
    pub mean_contrastive: f64,
    pub first_step_loss: f64,
    pub val: Option<MetricReport>,
    pub elapsed: Duration,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: PmModel,
    pub bank: PrototypeBank,
    opt: AdamW,
    rng: ChaCha8Rng,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = PmModel::new(cfg.model_config(), cfg.seed, cfg.precision.dtype())?;
        let opt = AdamW::new(
            model.store.vars(),
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: cfg.weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SAMPLER_STREAM);
        let state = TrainState {
            rng_seed: cfg.seed,
            rng_stream: SAMPLER_STREAM,
            ..TrainState::default()
        };
        Ok(Self {
            bank: PrototypeBank::new(cfg.channels, cfg.alpha),
            cfg,
            model,
            opt,
            rng,
            state,
        })
    }

    fn sync_rng_state(&mut self) {
        self.state.rng_word_pos = self.rng.get_word_pos();
    }

    pub fn sample_batch(&mut self, train: &[&SyntheticProcedure]) -> Result<TrainBatch> {
        let weights: Vec<usize> = train.iter().map(|p| p.len()).collect();
        let picker = WeightedIndex::new(&weights)
            .map_err(|e| Error::Input(format!("no frames to train on: {e}")))?;
        let (n, r, g) = (self.cfg.window, self.cfg.stride, self.cfg.group_size);
        let groups = self.cfg.batch_size / g;
        let (h, w) = (train[0].height, train[0].width);

        let mut images: Vec<Vec<f32>> = Vec::new();
        let mut boxes = Vec::new();
        let mut gather = Vec::with_capacity(self.cfg.batch_size * n);
        let mut phase_labels = Vec::with_capacity(self.cfg.batch_size * n);
        let mut effect_labels = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..groups {
            let proc = train[picker.sample(&mut self.rng)];
            if proc.height != h || proc.width != w {
                return Err(Error::Input(format!("procedure {} has a different frame size", proc.id)));
            }
            let len = proc.len();
            let span = (g - 1) * r;
            let t0 = self.rng.random_range(0..len.saturating_sub(span).max(1));
            let targets: Vec<usize> = (0..g).map(|j| (t0 + j * r).min(len - 1)).collect();

            let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
            for &t in &targets {
                for i in window_indices(t, n, r) {
                    slots.entry(i).or_insert(0);
                }
            }
            let jitter = self.cfg.color_jitter.then(|| {
                let base: f32 = self.rng.random_range(0.9..1.1);
                [0; 3].map(|_| base * self.rng.random_range(0.95f32..1.05))
            });
            let flip = self.cfg.horizontal_flip && self.rng.random_bool(0.5);
            for (frame, slot) in slots.iter_mut() {
                *slot = images.len();
                let rec = &proc.frames[*frame];
                images.push(augment(&rec.image, h, w, jitter, flip));
                boxes.push(if flip { mirror_box(rec.bbox, w) } else { rec.bbox });
            }
            for &t in &targets {
                let idx = window_indices(t, n, r);
                let touches_knot = idx.iter().any(|&i| proc.frames[i].phase == PhaseLabel::Knotting);
                effect_labels.push(touches_knot.then_some(proc.effective_case as u32));
                for i in idx {
                    gather.push(slots[&i] as u32);
                    phase_labels.push(proc.frames[i].phase.id() as u32);
                }
            }
        }
        let views: Vec<Image<'_>> = images.iter().map(|d| Image::new(d, h, w)).collect();
        let enc = &self.model.encoder;
        let frames = enc.images_to_tensor(&views)?;
        let patches = enc.regions_to_tensor(&views, &boxes)?;
        debug_assert_eq!(patches.dim(2)?, REGION_PATCH);
        Ok(TrainBatch {
            frames,
            patches,
            gather: Tensor::from_vec(gather, self.cfg.batch_size * n, &Device::Cpu)?,
            phase_labels,
            effect_labels,
            windows: self.cfg.batch_size,
        })
    }

    /// Loss graph for a batch plus the clip bookkeeping; accumulates true
    /// positives into the bank.
    pub fn loss(&mut self, batch: &TrainBatch) -> Result<(Tensor, StepReport)> {
        let (b, n, c) = (batch.windows, self.cfg.window, self.cfg.channels);
        let dev = Device::Cpu;
        let enc = &self.model.encoder;
        let f = enc.encode_frame_tensor(&batch.frames)?.0;
        let r = enc.encode_region_patches(&batch.patches)?.0;
        let fw = f.index_select(&batch.gather, 0)?.reshape((b, n, c))?;
        let rw = r.index_select(&batch.gather, 0)?.reshape((b, n, c))?;
        let out = self.model.temporal(&fw, &rw, &self.bank)?;

        let classes = PhaseLabel::COUNT;
        let logits = out.phase_logits.narrow(1, 0, n)?.reshape((b * n, classes))?;
        let labels = Tensor::from_vec(batch.phase_labels.clone(), b * n, &dev)?;
        let ce_phase = cross_entropy_logits(&logits, &labels)?;

        let zero = Tensor::zeros((), self.model.dtype(), &dev)?;
        let (rows, eff): (Vec<u32>, Vec<u32>) = batch
            .effect_labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|l| (i as u32, l)))
            .unzip();
        let ce_effect = if rows.is_empty() {
            zero.clone()
        } else {
            let n_rows = rows.len();
            let sel = out.effect_logits.index_select(&Tensor::from_vec(rows, n_rows, &dev)?, 0)?;
            cross_entropy_logits(&sel, &Tensor::from_vec(eff, n_rows, &dev)?)?
        };

        // Clip-level predictions decide which clips calibrate prototypes and
        // which are pulled by the contrastive term.
        let probs: Vec<Vec<Vec<f64>>> = softmax_last(&out.phase_logits)?.to_dtype(DType::F64)?.to_vec3()?;
        let (_, k, w, _) = out.enriched.dims4()?;
        let pooled: Vec<Vec<f64>> = out.clip_pooled.detach().to_dtype(DType::F64)?.flatten(0, 1)?.to_vec2()?;
        let mut fp_rows = Vec::new();
        let mut p_true = Vec::new();
        let mut p_pred = Vec::new();
        let mut tp = 0;
        for bi in 0..b {
            for ki in 0..k {
                let positions: Vec<usize> = (ki * w..(ki + 1) * w).filter(|&p| p < n).collect();
                if positions.is_empty() {
                    continue;
                }
                let mut votes = [0usize; PhaseLabel::COUNT];
                let mut mean = [0.0; PhaseLabel::COUNT];
                for &p in &positions {
                    votes[batch.phase_labels[bi * n + p] as usize] += 1;
                    for (m, v) in mean.iter_mut().zip(&probs[bi][p]) {
                        *m += v;
                    }
                }
                let y = argmax_usize(&votes);
                let y_hat = argmax_f64(&mean);
                let slot = bi * k + ki;
                let (y_l, y_hat_l) = (PhaseLabel::from_id(y).unwrap(), PhaseLabel::from_id(y_hat).unwrap());
                if y == y_hat {
                    self.bank.accumulate_tp(&pooled[slot], y_l);
                    tp += 1;
                } else if let (Some(pt), Some(pp)) = (self.bank.prototype(y_l), self.bank.prototype(y_hat_l)) {
                    fp_rows.push(slot as u32);
                    p_true.extend(unit(pt));
                    p_pred.extend(unit(pp));
                }
            }
        }
        let fp = fp_rows.len();
        let contrastive = if fp == 0 || self.cfg.lambda_cl == 0.0 {
            zero
        } else {
            let dtype = self.model.dtype();
            // Compared on the unit sphere, where the unit margin is meaningful.
            let feats = out
                .clip_pooled
                .flatten(0, 1)?
                .index_select(&Tensor::from_vec(fp_rows, fp, &dev)?, 0)?;
            let norms = feats.sqr()?.sum_keepdim(1)?.affine(1.0, 1e-12)?.sqrt()?;
            let feats = feats.broadcast_div(&norms)?;
            let pt = Tensor::from_vec(p_true, (fp, c), &dev)?.to_dtype(dtype)?;
            let pp = Tensor::from_vec(p_pred, (fp, c), &dev)?.to_dtype(dtype)?;
            contrastive_loss_tensor(&feats, &pt, &pp)?
        };

        let total = ((&ce_phase + &ce_effect)? + (&contrastive * self.cfg.lambda_cl)?)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let loss = total_loss(scalar(&ce_phase)?, scalar(&ce_effect)?, scalar(&contrastive)?, self.cfg.lambda_cl)?;
        Ok((
            total,
            StepReport {
                loss,
                fp_clips: fp,
                tp_clips: tp,
                masked_clips: out.masked.iter().filter(|m| **m).count(),
            },
        ))
    }

    pub fn step(&mut self, train: &[&SyntheticProcedure]) -> Result<StepReport> {
        let batch = self.sample_batch(train)?;
        let (total, report) = self.loss(&batch)?;
        let mut grads = total.backward()?;
        if self.cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, &self.model.store.vars(), self.cfg.grad_clip)?;
        }
        self.opt.step(&grads)?;
        debug!(
            "step loss {:.4} (phase {:.4}, effect {:.4}, contrastive {:.4}), fp {} tp {} masked {}",
            report.loss.total,
            report.loss.ce_phase,
            report.loss.ce_effect,
            report.loss.contrastive,
            report.fp_clips,
            report.tp_clips,
            report.masked_clips
        );
        Ok(report)
    }

    /// Runs `steps_per_epoch` steps, then folds the accumulated true positives
    /// into the prototypes.
    pub fn train_epoch(&mut self, train: &[&SyntheticProcedure]) -> Result<EpochReport> {
        let start = Instant::now();
        let steps = self.cfg.steps_per_epoch;
        let mut sums = [0.0; 4];
        let mut first = None;
        for _ in 0..steps {
            let s = self.step(train)?;
            first.get_or_insert(s.loss.total);
            for (acc, v) in sums.iter_mut().zip([s.loss.total, s.loss.ce_phase, s.loss.ce_effect, s.loss.contrastive]) {
                *acc += v;
            }
        }
        self.bank.flush_ema();
        self.state.epoch += 1;
        self.sync_rng_state();
        let m = steps as f64;
        Ok(EpochReport {
            epoch: self.state.epoch - 1,
            mean_loss: sums[0] / m,
            mean_ce_phase: sums[1] / m,
            mean_ce_effect: sums[2] / m,
            mean_contrastive: sums[3] / m,
            first_step_loss: first.unwrap_or(f64::NAN),
            val: None,
            elapsed: start.elapsed(),
        })
    }

    pub fn validate(&self, val: &[&SyntheticProcedure]) -> Result<Option<MetricReport>> {
        if val.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate_procedures(&self.model, &self.bank, val)?.0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.cfg, &self.model, &self.bank, &self.state)
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

fn argmax_usize(v: &[usize]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn argmax_f64(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn augment(image: &[f32], h: usize, w: usize, jitter: Option<[f32; 3]>, flip: bool) -> Vec<f32> {
    let mut out = Vec::with_capacity(image.len());
    for y in 0..h {
        for x in 0..w {
            let sx = if flip { w - 1 - x } else { x };
            let o = (y * w + sx) * 3;
            for ch in 0..3 {
                let v = image[o + ch];
                out.push(match jitter {
                    Some(g) => (v * g[ch]).clamp(0.0, 1.0),
                    None => v,
                });
            }
        }
    }
    out
}

fn mirror_box(b: BoundingBox, width: usize) -> BoundingBox {
    BoundingBox {
        x: width as u32 - b.x - b.w,
        ..b
    }
}

/// Path of the most recent checkpoint next to the best one.
pub fn last_checkpoint_path(best: &Path) -> PathBuf {
    let mut name = best.file_name().unwrap_or_default().to_os_string();
    name.push(".last");
    best.with_file_name(name)
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub epochs: Vec<EpochReport>,
}

/// Full run on an in-memory dataset. With `out`, the best-validation
/// checkpoint goes to `out` and the latest to `out.last` after every epoch.
pub fn train_dataset(cfg: RunConfig, dataset: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let val = dataset.split(Split::Val);
    let mut trainer = Trainer::new(cfg)?;
    info!(
        "training {} parameters on {} procedures ({} validation)",
        trainer.model.store.num_parameters(),
        train.len(),
        val.len()
    );
    let mut epochs = Vec::new();
    for _ in 0..trainer.cfg.epochs {
        let mut report = trainer.train_epoch(&train)?;
        report.val = trainer.validate(&val)?;
        let score = report.val.as_ref().and_then(|v| v.macro_jaccard);
        let improved = match (score, trainer.state.best_val_jaccard) {
            (Some(s), Some(best)) => s > best,
            (Some(_), None) => true,
            (None, _) => trainer.state.best_val_jaccard.is_none(),
        };
        if improved {
            trainer.state.best_val_jaccard = score;
        }
        info!(
            "epoch {}: loss {:.4} (phase {:.4}, effect {:.4}, contrastive {:.4}), val jaccard {}, {:.1}s",
            report.epoch,
            report.mean_loss,
            report.mean_ce_phase,
            report.mean_ce_effect,
            report.mean_contrastive,
            score.map_or("undef".into(), |s| format!("{s:.2}")),
            report.elapsed.as_secs_f64()
        );
        if let Some(path) = out {
            trainer.save(&last_checkpoint_path(path))?;
            if improved {
                trainer.save(path)?;
            }
        }
        epochs.push(report);
    }
    Ok(TrainOutcome { trainer, epochs })
}

pub fn train(cfg: RunConfig, data_root: &Path, out: &Path) -> Result<TrainOutcome> {
    let dataset = read_dataset(data_root)?;
    train_dataset(cfg, &dataset, Some(out))
}

fn unit(v: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(move |x| x / norm)
}
