//! Frame-level phase metrics and Knotting-only effectiveness metrics.

use std::fmt::Write as _;

use serde::Serialize;

use crate::synthgen::PhaseLabel;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn jaccard(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.tp + self.fp + self.fn_ + self.tn)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Mean of the defined values; undefined when none are.
fn macro_mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseMetrics {
    pub counts: Counts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub jaccard: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EffectMetrics {
    /// Positive class is "ineffective".
    pub counts: Counts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub jaccard: Option<f64>,
}

/// All values are percentages; `None` marks an undefined metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub frames: usize,
    pub per_phase: [PhaseMetrics; PhaseLabel::COUNT],
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_jaccard: Option<f64>,
    pub accuracy: Option<f64>,
    pub effectiveness: EffectMetrics,
}

/// One evaluated frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameOutcome {
    pub label: PhaseLabel,
    pub pred: PhaseLabel,
    pub effective_label: Option<bool>,
    pub effective_pred: bool,
}

#[derive(Debug, Serialize)]
pub struct MetricRecord {
    pub name: &'static str,
    pub phase: Option<&'static str>,
    pub value: Option<f64>,
}

impl MetricReport {
    pub fn compute(frames: &[FrameOutcome]) -> Self {
        let mut phase_counts = [Counts::default(); PhaseLabel::COUNT];
        let mut correct = 0;
        let mut effect = Counts::default();
        for f in frames {
            if f.label == f.pred {
                correct += 1;
            }
            for (j, c) in phase_counts.iter_mut().enumerate() {
                match (f.label.id() == j, f.pred.id() == j) {
                    (true, true) => c.tp += 1,
                    (false, true) => c.fp += 1,
                    (true, false) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
            if f.label == PhaseLabel::Knotting {
                if let Some(eff) = f.effective_label {
                    match (!eff, !f.effective_pred) {
                        (true, true) => effect.tp += 1,
                        (false, true) => effect.fp += 1,
                        (true, false) => effect.fn_ += 1,
                        (false, false) => effect.tn += 1,
                    }
                }
            }
        }
        let per_phase = phase_counts.map(|counts| PhaseMetrics {
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            jaccard: counts.jaccard(),
        });
        let knot_frames = effect.tp + effect.fp + effect.fn_ + effect.tn;
        let defined = |v: Option<f64>| if knot_frames > 0 { v } else { None };
        Self {
            frames: frames.len(),
            per_phase,
            macro_precision: macro_mean(per_phase.iter().map(|p| p.precision)),
            macro_recall: macro_mean(per_phase.iter().map(|p| p.recall)),
            macro_jaccard: macro_mean(per_phase.iter().map(|p| p.jaccard)),
            accuracy: ratio(correct, frames.len()),
            effectiveness: EffectMetrics {
                counts: effect,
                precision: defined(effect.precision()),
                recall: defined(effect.recall()),
                accuracy: effect.accuracy(),
                jaccard: defined(effect.jaccard()),
            },
        }
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for phase in PhaseLabel::ALL {
            let m = &self.per_phase[phase.id()];
            for (name, value) in [("precision", m.precision), ("recall", m.recall), ("jaccard", m.jaccard)] {
                out.push(MetricRecord {
                    name,
                    phase: Some(phase.name()),
                    value,
                });
            }
        }
        for (name, value) in [
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_jaccard", self.macro_jaccard),
            ("accuracy", self.accuracy),
        ] {
            out.push(MetricRecord { name, phase: None, value });
        }
        let e = &self.effectiveness;
        for (name, value) in [
            ("effect_precision", e.precision),
            ("effect_recall", e.recall),
            ("effect_accuracy", e.accuracy),
            ("effect_jaccard", e.jaccard),
        ] {
            out.push(MetricRecord {
                name,
                phase: Some(PhaseLabel::Knotting.name()),
                value,
            });
        }
        out
    }

    /// Line-delimited JSON, one record per metric.
    pub fn to_jsonl(&self) -> String {
        self.records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("metric record serializes") + "\n")
            .collect()
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undef".to_string(), |v| format!("{v:.2}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>10}{:>10}{:>10}", "phase", "precision", "recall", "jaccard");
        for phase in PhaseLabel::ALL {
            let m = &self.per_phase[phase.id()];
            let _ = writeln!(
                s,
                "{:<16}{:>10}{:>10}{:>10}",
                phase.name(),
                fmt(m.precision),
                fmt(m.recall),
                fmt(m.jaccard)
            );
        }
        let _ = writeln!(
            s,
            "{:<16}{:>10}{:>10}{:>10}",
            "macro",
            fmt(self.macro_precision),
            fmt(self.macro_recall),
            fmt(self.macro_jaccard)
        );
        let _ = writeln!(s, "accuracy        {} ({} frames)", fmt(self.accuracy), self.frames);
        let e = &self.effectiveness;
        let _ = writeln!(
            s,
            "effectiveness   precision {}  recall {}  accuracy {}  jaccard {}  (Knotting frames: {})",
            fmt(e.precision),
            fmt(e.recall),
            fmt(e.accuracy),
            fmt(e.jaccard),
            e.counts.tp + e.counts.fp + e.counts.fn_ + e.counts.tn
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use PhaseLabel::*;

    fn outcome(label: PhaseLabel, pred: PhaseLabel) -> FrameOutcome {
        FrameOutcome {
            label,
            pred,
            effective_label: Some(true),
            effective_pred: true,
        }
    }

    #[test]
    fn perfect_predictions() {
        let frames: Vec<_> = PhaseLabel::ALL.iter().map(|&p| outcome(p, p)).collect();
        let r = MetricReport::compute(&frames);
        assert_eq!(r.accuracy, Some(100.0));
        assert!(r.per_phase.iter().all(|p| p.jaccard == Some(100.0)));
        assert_eq!(r.macro_jaccard, Some(100.0));
    }

    #[test]
    fn three_frame_toy() {
        let frames = [
            outcome(Knotting, Knotting),
            outcome(Knotting, Resecting),
            outcome(Resecting, Resecting),
        ];
        let r = MetricReport::compute(&frames);
        let k = r.per_phase[Knotting.id()];
        assert_eq!((k.precision, k.recall, k.jaccard), (Some(100.0), Some(50.0), Some(50.0)));
        let s = r.per_phase[Resecting.id()];
        assert_eq!((s.precision, s.recall, s.jaccard), (Some(50.0), Some(100.0), Some(50.0)));
        assert!((r.accuracy.unwrap() - 66.67).abs() < 0.01);
        assert_eq!(r.per_phase[Preparing.id()].jaccard, None);
    }

    #[test]
    fn no_knotting_frames_leaves_effectiveness_undefined() {
        let r = MetricReport::compute(&[outcome(Resecting, Resecting)]);
        assert_eq!(r.effectiveness.accuracy, None);
        assert_eq!(r.effectiveness.jaccard, None);
        assert!(r.to_jsonl().contains("\"value\":null"));
        assert!(r.to_table().contains("undef"));
    }

    #[test]
    fn ineffective_is_positive_class() {
        let f = FrameOutcome {
            label: Knotting,
            pred: Knotting,
            effective_label: Some(false),
            effective_pred: false,
        };
        let r = MetricReport::compute(&[f]);
        assert_eq!(r.effectiveness.counts.tp, 1);
        assert_eq!(r.effectiveness.precision, Some(100.0));
    }
}
