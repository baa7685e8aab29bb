//! Split evaluation through the streaming path.

use std::path::Path;

use rayon::prelude::*;

use super::checkpoint::load_checkpoint;
use super::metrics::{FrameOutcome, MetricReport};
use super::stream::{stream_procedure, PredictionTrace};
use crate::error::Result;
use crate::model::PmModel;
use crate::objectives::PrototypeBank;
use crate::synthgen::{read_split, Split, SyntheticProcedure};

pub fn trace_outcomes(trace: &PredictionTrace) -> Vec<FrameOutcome> {
    trace
        .frames
        .iter()
        .zip(&trace.windows)
        .filter_map(|(f, w)| {
            f.label.map(|label| FrameOutcome {
                label,
                pred: f.phase,
                effective_label: f.effective_label,
                effective_pred: w.effective(),
            })
        })
        .collect()
}

/// Streams every procedure and scores all frames together.
pub fn evaluate_procedures(
    model: &PmModel,
    bank: &PrototypeBank,
    procedures: &[&SyntheticProcedure],
) -> Result<(MetricReport, Vec<PredictionTrace>)> {
    let traces = procedures
        .par_iter()
        .map(|p| stream_procedure(model, bank, p, None).map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<FrameOutcome> = traces.iter().flat_map(trace_outcomes).collect();
    Ok((MetricReport::compute(&outcomes), traces))
}

pub fn evaluate(checkpoint: &Path, data_root: &Path, split: Split) -> Result<MetricReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let procedures = read_split(data_root, split)?;
    let refs: Vec<&SyntheticProcedure> = procedures.iter().collect();
    Ok(evaluate_procedures(&ckpt.model, &ckpt.bank, &refs)?.0)
}
