//! Causal frame-by-frame inference with a rolling feature cache.

use std::collections::VecDeque;
use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::windows::{history_span, window_indices};
use crate::encoder::Image;
use crate::error::{Error, Result};
use crate::model::PmModel;
use crate::nn::softmax_last;
use crate::objectives::PrototypeBank;
use crate::synthgen::{FrameRecord, PhaseLabel, SyntheticProcedure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub procedure: String,
    pub index: usize,
    pub t_seconds: f64,
    pub phase: PhaseLabel,
    pub probs: [f64; PhaseLabel::COUNT],
    /// Ground truth, carried along for ribbons and metrics.
    pub label: Option<PhaseLabel>,
    pub effective_label: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub procedure: String,
    pub target: usize,
    pub window_start: usize,
    /// `{ineffective, effective}`.
    pub effect_logits: [f64; 2],
}

impl WindowPrediction {
    pub fn effective(&self) -> bool {
        self.effect_logits[1] > self.effect_logits[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TraceRecord {
    Frame(FramePrediction),
    Window(WindowPrediction),
}

/// Append-only, time-ordered predictions for one procedure.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionTrace {
    pub frames: Vec<FramePrediction>,
    pub windows: Vec<WindowPrediction>,
}

impl PredictionTrace {
    pub fn push(&mut self, frame: FramePrediction, window: WindowPrediction) -> Result<()> {
        if let Some(last) = self.frames.last() {
            if frame.index != last.index + 1 {
                return Err(Error::Internal(format!(
                    "trace frame {} does not follow {}",
                    frame.index, last.index
                )));
            }
        }
        self.frames.push(frame);
        self.windows.push(window);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for (f, w) in self.frames.iter().zip(&self.windows) {
            s += &serde_json::to_string(&TraceRecord::Frame(f.clone())).expect("trace serializes");
            s.push('\n');
            s += &serde_json::to_string(&TraceRecord::Window(w.clone())).expect("trace serializes");
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut trace = Self::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: TraceRecord = serde_json::from_str(line)
                .map_err(|e| Error::data_format(path, format!("line {}: {e}", i + 1)))?;
            match rec {
                TraceRecord::Frame(f) => trace.frames.push(f),
                TraceRecord::Window(w) => trace.windows.push(w),
            }
        }
        if trace.frames.iter().enumerate().any(|(i, f)| f.index != i) {
            return Err(Error::data_format(path, "frame records are not consecutive from 0"));
        }
        Ok(trace)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StreamStats {
    pub frames: usize,
    pub elapsed: Duration,
    pub encode: Duration,
    pub mte: Duration,
    pub csm: Duration,
    pub heads: Duration,
}

impl StreamStats {
    pub fn fps(&self) -> f64 {
        let s = self.elapsed.as_secs_f64();
        if s > 0.0 {
            self.frames as f64 / s
        } else {
            0.0
        }
    }

    fn per_frame_ms(&self, d: Duration) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            d.as_secs_f64() * 1e3 / self.frames as f64
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{} frames in {:.2}s: {:.1} fps; per frame encode {:.2} ms, mte {:.2} ms, csm {:.2} ms, heads {:.2} ms",
            self.frames,
            self.elapsed.as_secs_f64(),
            self.fps(),
            self.per_frame_ms(self.encode),
            self.per_frame_ms(self.mte),
            self.per_frame_ms(self.csm),
            self.per_frame_ms(self.heads)
        )
    }
}

/// Online runner: each pushed frame is encoded once, cached, and predicted
/// from the cached window ending at it.
pub struct StreamRunner<'a> {
    model: &'a PmModel,
    bank: &'a PrototypeBank,
    procedure: String,
    frames: VecDeque<Tensor>,
    regions: VecDeque<Tensor>,
    /// Index of the oldest cached frame.
    first: usize,
    next: usize,
    pub stats: StreamStats,
}

impl<'a> StreamRunner<'a> {
    pub fn new(model: &'a PmModel, bank: &'a PrototypeBank, procedure: impl Into<String>) -> Self {
        Self {
            model,
            bank,
            procedure: procedure.into(),
            frames: VecDeque::new(),
            regions: VecDeque::new(),
            first: 0,
            next: 0,
            stats: StreamStats::default(),
        }
    }

    fn capacity(&self) -> usize {
        let cfg = self.model.config();
        history_span(cfg.window, cfg.stride) + 1
    }

    fn cached(&self, cache: &VecDeque<Tensor>, idx: usize) -> Result<Tensor> {
        cache
            .get(idx - self.first)
            .cloned()
            .ok_or_else(|| Error::Internal(format!("frame {idx} not in feature cache")))
    }

    pub fn push(&mut self, record: &FrameRecord, height: usize, width: usize) -> Result<(FramePrediction, WindowPrediction)> {
        let start = Instant::now();
        let t = self.next;
        let image = [Image::new(&record.image, height, width)];
        let enc = &self.model.encoder;
        let f = enc.encode_frames(&image)?.0;
        let r = enc.encode_region(&image, &[record.bbox])?.0;
        // The cache holds frames `first..=t`; frame 0 stays until the window
        // no longer reaches it.
        self.frames.push_back(f);
        self.regions.push_back(r);
        while self.frames.len() > self.capacity() {
            self.frames.pop_front();
            self.regions.pop_front();
            self.first += 1;
        }
        let encode_done = Instant::now();

        let cfg = *self.model.config();
        let idx = window_indices(t, cfg.window, cfg.stride);
        let fw = idx.iter().map(|&i| self.cached(&self.frames, i)).collect::<Result<Vec<_>>>()?;
        let rw = idx.iter().map(|&i| self.cached(&self.regions, i)).collect::<Result<Vec<_>>>()?;
        let fw = Tensor::cat(&fw, 0)?.unsqueeze(0)?;
        let rw = Tensor::cat(&rw, 0)?.unsqueeze(0)?;
        let out = self.model.temporal(&fw, &rw, self.bank)?;

        let logits = out.phase_logits.narrow(1, cfg.window - 1, 1)?.flatten_all()?;
        let probs: Vec<f64> = softmax_last(&logits)?.to_dtype(DType::F64)?.to_vec1()?;
        let probs: [f64; PhaseLabel::COUNT] = probs
            .try_into()
            .map_err(|_| Error::Internal("phase head width mismatch".into()))?;
        let phase = argmax(&probs);
        let effect: Vec<f64> = out.effect_logits.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;

        self.next += 1;
        self.stats.frames += 1;
        self.stats.encode += encode_done - start;
        self.stats.mte += out.timings.mte;
        self.stats.csm += out.timings.csm;
        self.stats.heads += out.timings.heads;
        self.stats.elapsed += start.elapsed();
        Ok((
            FramePrediction {
                procedure: self.procedure.clone(),
                index: t,
                t_seconds: record.t_seconds,
                phase: PhaseLabel::from_id(phase).expect("argmax within phase count"),
                probs,
                label: Some(record.phase),
                effective_label: record.effective,
            },
            WindowPrediction {
                procedure: self.procedure.clone(),
                target: t,
                window_start: idx[0],
                effect_logits: [effect[0], effect[1]],
            },
        ))
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Streams the first `limit` frames (all when `None`) of a procedure.
pub fn stream_procedure(
    model: &PmModel,
    bank: &PrototypeBank,
    procedure: &SyntheticProcedure,
    limit: Option<usize>,
) -> Result<(PredictionTrace, StreamStats)> {
    let mut runner = StreamRunner::new(model, bank, procedure.id.clone());
    let mut trace = PredictionTrace::default();
    let n = limit.map_or(procedure.len(), |l| l.min(procedure.len()));
    for record in &procedure.frames[..n] {
        let (f, w) = runner.push(record, procedure.height, procedure.width)?;
        trace.push(f, w)?;
    }
    Ok((trace, runner.stats))
}
