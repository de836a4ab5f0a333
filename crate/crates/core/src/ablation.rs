//! Predictor comparison: identical seeds, data and budgets, one row per kind.

use std::fmt::Write as _;

use crate::abx::{abx_score, extract_segments, AbxMode, AbxOptions};
use crate::data::Dataset;
use crate::error::Result;
use crate::model::ModelConfig;
use crate::predictor::PredictorKind;
use crate::trainer::{StepRecord, TrainConfig, TrainData, Trainer};

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub predictor: PredictorKind,
    /// Mean loss over the last `tail` steps.
    pub loss: f64,
    /// Mean horizon-1 accuracy over the same steps.
    pub accuracy_k1: f64,
    pub abx_within: f64,
    pub abx_across: f64,
    pub trace: Vec<StepRecord>,
}

impl AblationRow {
    pub fn is_valid(&self) -> bool {
        self.loss.is_finite()
            && (0.0..=1.0).contains(&self.accuracy_k1)
            && (0.0..=100.0).contains(&self.abx_within)
            && (0.0..=100.0).contains(&self.abx_across)
    }
}

/// Steps averaged for the row summary.
pub const TAIL_STEPS: usize = 100;

/// Pretrains one model per predictor kind on `train` and scores ABX on `eval`.
pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    kinds: &[PredictorKind],
    train: &Dataset,
    eval: &Dataset,
    abx: &AbxOptions,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut model = base.clone();
        model.predictor.kind = kind;
        let mut trainer = Trainer::new(model, train_cfg.clone())?;
        let data = TrainData::new(train, &trainer.model, &trainer.train)?;
        let mut trace = Vec::new();
        trainer.run(
            &data,
            |r| {
                trace.push(r.clone());
                Ok(())
            },
            |_| Ok(()),
        )?;
        let tail = &trace[trace.len().saturating_sub(TAIL_STEPS)..];
        let n = tail.len().max(1) as f64;
        let segments = extract_segments(eval, &trainer.model, &trainer.params)?;
        let within = abx_score(&segments, &AbxOptions { mode: AbxMode::Within, ..abx.clone() })?;
        let across = abx_score(&segments, &AbxOptions { mode: AbxMode::Across, ..abx.clone() })?;
        rows.push(AblationRow {
            predictor: kind,
            loss: tail.iter().map(|r| r.loss).sum::<f64>() / n,
            accuracy_k1: tail.iter().map(|r| r.accuracy.first().copied().unwrap_or(0.0)).sum::<f64>() / n,
            abx_within: within.error,
            abx_across: across.error,
            trace,
        });
    }
    Ok(rows)
}

/// Tab-separated comparison table with a header row.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("predictor\tloss\tacc_k1\tabx_within\tabx_across\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{:.4}\t{:.4}\t{:.2}\t{:.2}",
            r.predictor.as_str(),
            r.loss,
            r.accuracy_k1,
            r.abx_within,
            r.abx_across
        );
    }
    s
}
