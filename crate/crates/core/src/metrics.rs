//! Masked multi-task ROC-AUC and robustness evaluation.

use serde::{Deserialize, Serialize};

use crate::attack::{attack_batch, graph_seed, AdversarialSample, PerturbationBudget};
use crate::diffcore::{Matrix, Tape};
use crate::error::{Error, Result};
use crate::graphdata::{Dataset, Graph};
use crate::model::{GraphBatch, Model};

/// Graphs per forward pass or attack call during evaluation.
pub const EVAL_CHUNK: usize = 64;

/// Attack repetitions per evaluation.
pub const DEFAULT_REPETITIONS: usize = 5;

/// Probability that a random positive outranks a random negative, ties
/// counting ½. Missing labels are skipped. `None` when fewer than two
/// classes are present.
pub fn roc_auc(scores: &[f64], labels: &[Option<bool>]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let mut items: Vec<(f64, bool)> =
        scores.iter().zip(labels).filter_map(|(&s, l)| l.map(|l| (s, l))).collect();
    let pos = items.iter().filter(|(_, l)| *l).count() as u64;
    let neg = items.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the Mann-Whitney U, accumulated exactly in integers
    let mut twice_u: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j < items.len() && items[j].0 == items[i].0 {
            j += 1;
        }
        let group_pos = items[i..j].iter().filter(|(_, l)| *l).count() as u64;
        let group_neg = (j - i) as u64 - group_pos;
        twice_u += group_pos * (2 * negatives_below + group_neg);
        negatives_below += group_neg;
        i = j;
    }
    Some(twice_u as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `clean` or the attack mode.
    pub mode: String,
    /// Per-task AUC; `None` for single-class tasks.
    pub per_task: Vec<Option<f64>>,
    pub mean_auc: f64,
    pub n_valid_tasks: usize,
    pub clean_auc: f64,
    /// `clean_auc - mean_auc`.
    pub drop: f64,
}

/// Eval-mode logits for every graph, one row per graph.
pub fn predict_all(model: &Model, graphs: &[&Graph], samples: Option<&[AdversarialSample]>) -> Result<Matrix> {
    let mut rows = Vec::with_capacity(graphs.len());
    for (c, chunk) in graphs.chunks(EVAL_CHUNK).enumerate() {
        let batch = GraphBatch::new(chunk)?;
        let logits = match samples {
            None => model.predict(&batch)?,
            Some(s) => {
                let s = &s[c * EVAL_CHUNK..c * EVAL_CHUNK + chunk.len()];
                let ex: Vec<&Matrix> = s.iter().map(|s| &s.e_x).collect();
                let x = batch.x.add(&Matrix::vstack(&ex)?)?;
                let adjs = chunk.iter().zip(s).map(|(g, s)| g.a.add(&s.e_a)).collect::<Result<Vec<_>>>()?;
                model.predict_perturbed(&batch, &x, &adjs)?
            }
        };
        rows.extend(logits.to_rows());
    }
    Matrix::from_rows(&rows)
}

/// Each graph's mean BCE over its labelled tasks.
pub fn per_graph_losses(model: &Model, graphs: &[&Graph], samples: Option<&[AdversarialSample]>) -> Result<Vec<f64>> {
    let logits = predict_all(model, graphs, samples)?;
    graphs
        .iter()
        .enumerate()
        .map(|(b, g)| {
            let (t, m) = g.label_rows();
            let tape = Tape::new();
            let z = tape.constant(Matrix::row_vector(&logits.row(b))?);
            z.bce_with_logits(&Matrix::row_vector(&t)?, &Matrix::row_vector(&m)?)?.scalar()
        })
        .collect()
}

/// Attacks every graph once under base seed `seed`.
pub fn attack_all(model: &Model, graphs: &[&Graph], budget: &PerturbationBudget, seed: u64) -> Result<Vec<AdversarialSample>> {
    let mut out = Vec::with_capacity(graphs.len());
    for (c, chunk) in graphs.chunks(EVAL_CHUNK).enumerate() {
        let seeds: Vec<u64> = (0..chunk.len()).map(|k| graph_seed(seed, &[], c * EVAL_CHUNK + k)).collect();
        out.extend(attack_batch(chunk, model, budget, &seeds, None)?);
    }
    Ok(out)
}

fn task_aucs(logits: &Matrix, graphs: &[&Graph]) -> Vec<Option<f64>> {
    let tasks = logits.cols();
    (0..tasks)
        .map(|t| {
            let scores: Vec<f64> = (0..graphs.len()).map(|b| logits.get(b, t)).collect();
            let labels: Vec<Option<bool>> = graphs.iter().map(|g| g.labels[t]).collect();
            roc_auc(&scores, &labels)
        })
        .collect()
}

fn mean_valid(per_task: &[Option<f64>]) -> (f64, usize) {
    let valid: Vec<f64> = per_task.iter().flatten().copied().collect();
    if valid.is_empty() {
        (f64::NAN, 0)
    } else {
        (valid.iter().sum::<f64>() / valid.len() as f64, valid.len())
    }
}

/// Clean evaluation, or attacked evaluation averaged over one attack run per
/// seed in `attack.1`.
pub fn evaluate(model: &Model, data: &Dataset, attack: Option<(&PerturbationBudget, &[u64])>) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let graphs: Vec<&Graph> = data.graphs.iter().collect();
    let clean = task_aucs(&predict_all(model, &graphs, None)?, &graphs);
    let (clean_auc, n_valid) = mean_valid(&clean);
    let Some((budget, seeds)) = attack else {
        return Ok(EvalResult { mode: "clean".into(), per_task: clean, mean_auc: clean_auc, n_valid_tasks: n_valid, clean_auc, drop: 0.0 });
    };
    if seeds.is_empty() {
        return Err(Error::Config("attacked evaluation needs at least one seed".into()));
    }
    let mut sums = vec![0.0; data.task_count];
    for &seed in seeds {
        let samples = attack_all(model, &graphs, budget, seed)?;
        let aucs = task_aucs(&predict_all(model, &graphs, Some(&samples))?, &graphs);
        for (s, a) in sums.iter_mut().zip(&aucs) {
            *s += a.unwrap_or(0.0);
        }
    }
    let per_task: Vec<Option<f64>> =
        clean.iter().zip(&sums).map(|(c, s)| c.map(|_| s / seeds.len() as f64)).collect();
    let (mean_auc, n_valid_tasks) = mean_valid(&per_task);
    Ok(EvalResult {
        mode: budget.mode.to_string(),
        per_task,
        mean_auc,
        n_valid_tasks,
        clean_auc,
        drop: clean_auc - mean_auc,
    })
}

/// Base seeds for `n` attack repetitions.
pub fn repetition_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n).map(|r| crate::rng::derive_seed(base, &[50, r as u64])).collect()
}
