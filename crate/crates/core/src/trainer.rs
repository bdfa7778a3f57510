//! Losses, Adam, and the training loops: warm-up, adversarial prompt tuning,
//! the baseline tuning modes, and supervised pretraining of the backbone.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_batch, graph_seed, PerturbationBudget};
use crate::backbone::{BackboneConfig, BackboneParams};
use crate::diffcore::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graphdata::{Dataset, Graph};
use crate::metrics::{evaluate, repetition_seeds};
use crate::model::{GraphBatch, Model, NormModes, ParamGroup};
use crate::prompt::{init_prompt_stack, PromptConfig, PromptScheme, PromptStack};
use crate::rng::{derive_seed, rng_for};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    Agp,
    AgpS,
    Gpf,
    FullFt,
    LinearProbe,
    /// The AGP prompt architecture trained on clean data only.
    CleanPrompt,
}

impl TuningMode {
    pub const ALL: [TuningMode; 6] =
        [Self::Agp, Self::AgpS, Self::Gpf, Self::FullFt, Self::LinearProbe, Self::CleanPrompt];

    pub fn prompt_scheme(self) -> PromptScheme {
        match self {
            Self::Agp | Self::CleanPrompt => PromptScheme::Agp,
            Self::AgpS => PromptScheme::AgpS,
            Self::Gpf => PromptScheme::Gpf,
            Self::FullFt | Self::LinearProbe => PromptScheme::None,
        }
    }

    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        match self {
            Self::FullFt => &[ParamGroup::Encoder, ParamGroup::Head],
            Self::LinearProbe => &[ParamGroup::Head],
            _ => &[ParamGroup::Prompt, ParamGroup::Head],
        }
    }

    fn norm_modes(self) -> NormModes {
        match self {
            Self::FullFt => NormModes::train_all(),
            _ => NormModes::tuning(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Agp => "agp",
            Self::AgpS => "agp_s",
            Self::Gpf => "gpf",
            Self::FullFt => "full_ft",
            Self::LinearProbe => "linear_probe",
            Self::CleanPrompt => "clean_prompt",
        }
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TuningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown tuning mode '{s}'")))
    }
}

/// Which of the three loss terms are live. Serialized as `adv+ori+consis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LossMask {
    pub adv: bool,
    pub ori: bool,
    pub consis: bool,
}

impl LossMask {
    pub const ALL: LossMask = LossMask { adv: true, ori: true, consis: true };
    pub const ORI: LossMask = LossMask { adv: false, ori: true, consis: false };

    /// Whether training needs adversarial samples at all.
    pub fn needs_attack(self) -> bool {
        self.adv || self.consis
    }
}

impl fmt::Display for LossMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.adv, "adv"), (self.ori, "ori"), (self.consis, "consis")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&parts.join("+"))
    }
}

impl From<LossMask> for String {
    fn from(m: LossMask) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for LossMask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for LossMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut mask = LossMask { adv: false, ori: false, consis: false };
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "adv" => mask.adv = true,
                "ori" => mask.ori = true,
                "consis" => mask.consis = true,
                other => return Err(Error::Config(format!("unknown loss term '{other}'"))),
            }
        }
        if mask == (LossMask { adv: false, ori: false, consis: false }) {
            return Err(Error::Config("loss mask selects no terms".into()));
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub eta: f64,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tuning_mode: TuningMode,
    pub loss_mask: LossMask,
    pub bottleneck_dim: usize,
    /// Pair γ with the consistency term and η with the clean term instead.
    pub swap_coefficients: bool,
    /// Attack the validation split after every epoch for the log.
    pub log_attacked_auc: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            eta: 0.6,
            lr: 0.001,
            warmup_epochs: 30,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            tuning_mode: TuningMode::Agp,
            loss_mask: LossMask::ALL,
            bottleneck_dim: 64,
            swap_coefficients: false,
            log_attacked_auc: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.eta >= 0.0) {
            return Err(Error::Config("gamma and eta must be non-negative".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Coefficients of (adv, ori, consis) after masking.
    pub fn coefficients(&self) -> (f64, f64, f64) {
        let (ori, consis) = if self.swap_coefficients { (self.eta, self.gamma) } else { (self.gamma, self.eta) };
        let m = self.loss_mask;
        let pick = |on: bool, w: f64| if on { w } else { 0.0 };
        (pick(m.adv, 1.0), pick(m.ori, ori), pick(m.consis, consis))
    }
}

/// Masked mean binary cross-entropy with logits. `targets` may be soft.
pub fn task_loss(logits: &Matrix, targets: &Matrix, mask: &Matrix) -> Result<f64> {
    let tape = Tape::new();
    tape.constant(logits.clone()).bce_with_logits(targets, mask)?.scalar()
}

/// `l_adv + γ l_ori + η l_consis`, with masked terms dropped.
pub fn total_loss(l_adv: f64, l_ori: f64, l_consis: f64, cfg: &TrainConfig) -> f64 {
    let (a, o, c) = cfg.coefficients();
    let mut total = 0.0;
    for (w, l) in [(a, l_adv), (o, l_ori), (c, l_consis)] {
        if w != 0.0 {
            total += w * l;
        }
    }
    total
}

/// Adam moments for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

/// One bias-corrected Adam update (no weight decay).
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!("{} parameters, {} gradients", params.len(), grads.len())));
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
        state.v = state.m.clone();
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != g.shape() {
            return Err(Error::Shape { op: "adam_step", left: p.shape(), right: g.shape() });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                let gi = g.get(r, c);
                let mi = ADAM_BETA1 * m.get(r, c) + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v.get(r, c) + (1.0 - ADAM_BETA2) * gi * gi;
                m.set(r, c, mi);
                v.set(r, c, vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
                p.set(r, c, p.get(r, c) - update);
            }
        }
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub clean_loss: f64,
    pub adv_loss: Option<f64>,
    pub consis_loss: Option<f64>,
    pub val_auc_clean: Option<f64>,
    pub val_auc_attacked: Option<f64>,
}

/// Writes the log as CSV; missing values are empty fields.
pub fn write_log_csv(log: &[EpochLog], mut w: impl Write) -> Result<()> {
    writeln!(w, "epoch,clean_loss,adv_loss,consis_loss,val_auc_clean,val_auc_attacked")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for row in log {
        writeln!(
            w,
            "{},{:?},{},{},{},{}",
            row.epoch,
            row.clean_loss,
            opt(row.adv_loss),
            opt(row.consis_loss),
            opt(row.val_auc_clean),
            opt(row.val_auc_attacked)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Shared state of one tuning run.
struct Run<'a> {
    model: Model,
    state: OptimizerState,
    cfg: &'a TrainConfig,
    budget: &'a PerturbationBudget,
    groups: &'static [ParamGroup],
    modes: NormModes,
    log: Vec<EpochLog>,
}

impl Run<'_> {
    /// One pass over `train`; clean-only when `adversarial` is false.
    fn epoch(&mut self, train: &Dataset, val: Option<&Dataset>, adversarial: bool) -> Result<()> {
        let epoch = self.log.len();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(self.cfg.seed, &[40, epoch as u64]));
        let attack = adversarial && self.cfg.loss_mask.needs_attack();
        let (mut clean_sum, mut adv_sum, mut consis_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let graphs: Vec<&Graph> = chunk.iter().map(|&i| &train.graphs[i]).collect();
            let batch = GraphBatch::new(&graphs)?;
            let samples = if attack {
                let seeds: Vec<u64> = chunk.iter().map(|&i| graph_seed(self.cfg.seed, &[41, epoch as u64], i)).collect();
                Some(attack_batch(&graphs, &self.model, self.budget, &seeds, None)?)
            } else {
                None
            };

            let tape = Tape::new();
            let bound = self.model.bind(&tape, self.groups);
            let adjs: Vec<Var<'_>> = batch.adjs.iter().map(|a| tape.constant(a.clone())).collect();
            let clean = self.model.forward(&bound, tape.constant(batch.x.clone()), &adjs, &batch.offsets, self.modes)?;
            let l_ori = clean.logits.bce_with_logits(&batch.targets, &batch.mask)?;
            let mut updates = clean.norm_updates;
            let loss = match &samples {
                None => {
                    // warm-up and the clean baselines optimize the plain task loss
                    if adversarial { l_ori.scale(self.cfg.coefficients().1)? } else { l_ori }
                }
                Some(samples) => {
                    let ex: Vec<&Matrix> = samples.iter().map(|s| &s.e_x).collect();
                    let x_adv = tape.constant(batch.x.add(&Matrix::vstack(&ex)?)?);
                    let a_adv = graphs
                        .iter()
                        .zip(samples)
                        .map(|(g, s)| Ok(tape.constant(g.a.add(&s.e_a)?)))
                        .collect::<Result<Vec<_>>>()?;
                    let adv = self.model.forward(&bound, x_adv, &a_adv, &batch.offsets, self.modes)?;
                    updates.extend(adv.norm_updates);
                    let l_adv = adv.logits.bce_with_logits(&batch.targets, &batch.mask)?;
                    let soft = clean.logits.value().sigmoid();
                    let all = Matrix::filled(soft.rows(), soft.cols(), 1.0);
                    let l_consis = adv.logits.bce_with_logits(&soft, &all)?;
                    adv_sum += l_adv.scalar()? * graphs.len() as f64;
                    consis_sum += l_consis.scalar()? * graphs.len() as f64;
                    let (wa, wo, wc) = self.cfg.coefficients();
                    let mut terms = Vec::new();
                    for (w, term) in [(wa, l_adv), (wo, l_ori), (wc, l_consis)] {
                        if w != 0.0 {
                            terms.push(term.scale(w)?);
                        }
                    }
                    let mut total = l_adv.scale(0.0)?;
                    for t in &terms {
                        total = total.add(t)?;
                    }
                    total
                }
            };
            clean_sum += l_ori.scalar()? * graphs.len() as f64;
            seen += graphs.len();
            let value = loss.scalar()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let vars = bound.trainable(self.groups);
            let grads = tape.gradients(loss, &vars)?;
            drop(bound);
            self.model.apply_norm_updates(&updates);
            let mut params = self.model.tensors_mut(self.groups);
            adam_step(&mut params, &grads, &mut self.state, self.cfg.lr)?;
        }
        let n = seen.max(1) as f64;
        let (val_clean, val_attacked) = self.validate(val, epoch)?;
        self.log.push(EpochLog {
            epoch,
            clean_loss: clean_sum / n,
            adv_loss: attack.then_some(adv_sum / n),
            consis_loss: attack.then_some(consis_sum / n),
            val_auc_clean: val_clean,
            val_auc_attacked: val_attacked,
        });
        Ok(())
    }

    fn validate(&self, val: Option<&Dataset>, epoch: usize) -> Result<(Option<f64>, Option<f64>)> {
        let Some(val) = val.filter(|v| !v.is_empty()) else {
            return Ok((None, None));
        };
        let clean = evaluate(&self.model, val, None)?.mean_auc;
        let attacked = if self.cfg.log_attacked_auc {
            let seeds = repetition_seeds(derive_seed(self.cfg.seed, &[42, epoch as u64]), 1);
            Some(evaluate(&self.model, val, Some((self.budget, &seeds)))?.mean_auc)
        } else {
            None
        };
        let finite = |v: f64| v.is_finite().then_some(v);
        Ok((finite(clean), attacked.and_then(finite)))
    }
}

/// The model a tuning run starts from: the frozen backbone, a fresh head for
/// the downstream tasks, and freshly initialized prompts for the mode.
pub fn initial_model(backbone: &BackboneParams, task_count: usize, cfg: &TrainConfig) -> Result<Model> {
    let mut backbone = backbone.clone();
    backbone.reset_head(task_count, derive_seed(cfg.seed, &[43]));
    let scheme = cfg.tuning_mode.prompt_scheme();
    let prompts = if scheme == PromptScheme::None {
        PromptStack::none()
    } else {
        let pc = PromptConfig::new(scheme, cfg.bottleneck_dim, &backbone.config)?;
        init_prompt_stack(&pc, &backbone.config, derive_seed(cfg.seed, &[44]))?
    };
    Ok(Model { backbone, prompts })
}

fn start<'a>(model: Model, cfg: &'a TrainConfig, budget: &'a PerturbationBudget) -> Run<'a> {
    Run {
        model,
        state: OptimizerState::default(),
        cfg,
        budget,
        groups: cfg.tuning_mode.trainable_groups(),
        modes: cfg.tuning_mode.norm_modes(),
        log: Vec::new(),
    }
}

/// Clean-only training of prompts and head for `cfg.warmup_epochs`.
pub fn warmup(model: Model, train: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    let budget = PerturbationBudget::default();
    let quiet = TrainConfig { log_attacked_auc: false, ..cfg.clone() };
    let mut run = start(model, &quiet, &budget);
    for _ in 0..cfg.warmup_epochs {
        run.epoch(train, None, false)?;
    }
    Ok(run.model)
}

/// Warm-up followed by `cfg.epochs` of alternating attack and prompt update.
pub fn agp_finetune(
    train: &Dataset,
    val: Option<&Dataset>,
    backbone: &BackboneParams,
    cfg: &TrainConfig,
    budget: &PerturbationBudget,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    budget.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !matches!(cfg.tuning_mode, TuningMode::Agp | TuningMode::AgpS | TuningMode::CleanPrompt) {
        return Err(Error::Config(format!("{} is not a prompt-tuning mode", cfg.tuning_mode)));
    }
    let model = initial_model(backbone, train.task_count, cfg)?;
    let mut run = start(model, cfg, budget);
    for _ in 0..cfg.warmup_epochs {
        run.epoch(train, val, false)?;
    }
    for _ in 0..cfg.epochs {
        run.epoch(train, val, true)?;
    }
    Ok(TrainOutcome { model: run.model, log: run.log })
}

/// Clean training for the baselines. `clean_prompt` is the AGP loop with only
/// the clean loss term.
pub fn baseline_finetune(
    train: &Dataset,
    val: Option<&Dataset>,
    backbone: &BackboneParams,
    cfg: &TrainConfig,
    budget: &PerturbationBudget,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    match cfg.tuning_mode {
        TuningMode::CleanPrompt => {
            let clean = TrainConfig { loss_mask: LossMask::ORI, ..cfg.clone() };
            agp_finetune(train, val, backbone, &clean, budget)
        }
        TuningMode::Gpf | TuningMode::FullFt | TuningMode::LinearProbe => {
            let model = initial_model(backbone, train.task_count, cfg)?;
            let mut run = start(model, cfg, budget);
            for _ in 0..cfg.warmup_epochs + cfg.epochs {
                run.epoch(train, val, false)?;
            }
            Ok(TrainOutcome { model: run.model, log: run.log })
        }
        other => Err(Error::Config(format!("{other} is not a baseline mode"))),
    }
}

/// Dispatches on `cfg.tuning_mode`.
pub fn finetune(
    train: &Dataset,
    val: Option<&Dataset>,
    backbone: &BackboneParams,
    cfg: &TrainConfig,
    budget: &PerturbationBudget,
) -> Result<TrainOutcome> {
    match cfg.tuning_mode {
        TuningMode::Agp | TuningMode::AgpS => agp_finetune(train, val, backbone, cfg, budget),
        _ => baseline_finetune(train, val, backbone, cfg, budget),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 0.01, batch_size: 32, seed: 0 }
    }
}

/// Trains encoder and head end to end on a labelled surrogate dataset.
pub fn pretrain(data: &Dataset, config: BackboneConfig, pc: &PretrainConfig) -> Result<(BackboneParams, Vec<EpochLog>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.input_dim != data.feature_dim {
        return Err(Error::Config(format!("backbone input dim {} != data dim {}", config.input_dim, data.feature_dim)));
    }
    let backbone = BackboneParams::init(config, data.task_count, derive_seed(pc.seed, &[45]))?;
    let cfg = TrainConfig {
        lr: pc.lr,
        batch_size: pc.batch_size,
        seed: pc.seed,
        tuning_mode: TuningMode::FullFt,
        warmup_epochs: 0,
        epochs: pc.epochs,
        log_attacked_auc: false,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let budget = PerturbationBudget::default();
    let mut run = start(Model { backbone, prompts: PromptStack::none() }, &cfg, &budget);
    for _ in 0..pc.epochs {
        run.epoch(data, Some(data), false)?;
    }
    Ok((run.model.backbone, run.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneMode;
    use crate::graphdata::{generate_synthetic, LabelRule, SyntheticSpec};
    use agp_oracles::bce_from_probability;

    #[test]
    fn task_loss_examples() {
        let l = task_loss(&Matrix::scalar(0.0).unwrap(), &Matrix::scalar(1.0).unwrap(), &Matrix::scalar(1.0).unwrap()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = task_loss(&Matrix::scalar(40.0).unwrap(), &Matrix::scalar(1.0).unwrap(), &Matrix::scalar(1.0).unwrap()).unwrap();
        assert!(l < 1e-15);
        let logits = Matrix::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap();
        let targets = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mask = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let got = task_loss(&logits, &targets, &mask).unwrap();
        let p = |z: f64| 1.0 / (1.0 + (-z).exp());
        let expected = (bce_from_probability(p(0.3), 1.0) + bce_from_probability(p(2.0), 0.0) + bce_from_probability(p(0.7), 1.0)) / 3.0;
        assert!((got - expected).abs() < 1e-12);
        assert!(matches!(task_loss(&logits, &targets, &Matrix::zeros(2, 2)), Err(Error::AllLabelsMissing)));
    }

    #[test]
    fn soft_targets_match_direct_formula() {
        let y_adv = Matrix::row_vector(&[0.4, -2.0]).unwrap();
        let y_ori = Matrix::row_vector(&[1.5, 0.2]).unwrap();
        let soft = y_ori.sigmoid();
        let got = task_loss(&y_adv, &soft, &Matrix::filled(1, 2, 1.0)).unwrap();
        let p = |z: f64| 1.0 / (1.0 + (-z).exp());
        let expected = (bce_from_probability(p(0.4), p(1.5)) + bce_from_probability(p(-2.0), p(0.2))) / 2.0;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let cfg = TrainConfig::default();
        assert!((total_loss(1.0, 1.0, 1.0, &cfg) - 1.9).abs() < 1e-15);
        let zero = TrainConfig { gamma: 0.0, eta: 0.0, ..TrainConfig::default() };
        assert_eq!(total_loss(0.7, 5.0, 9.0, &zero), 0.7);
        let ori = TrainConfig { loss_mask: LossMask::ORI, ..TrainConfig::default() };
        assert_eq!(total_loss(4.0, 2.0, 8.0, &ori), 0.3 * 2.0);
        let swapped = TrainConfig { swap_coefficients: true, ..TrainConfig::default() };
        assert!((total_loss(0.0, 1.0, 0.0, &swapped) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn total_loss_is_linear() {
        let cfg = TrainConfig { gamma: 0.37, eta: 1.3, ..TrainConfig::default() };
        for (a, o, c) in [(0.1, 2.0, 3.0), (5.0, 0.0, 0.25), (1.0, 1.0, 1.0)] {
            let expected = a + 0.37 * o + 1.3 * c;
            assert!((total_loss(a, o, c, &cfg) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn loss_mask_parsing() {
        assert_eq!("adv+consis".parse::<LossMask>().unwrap(), LossMask { adv: true, ori: false, consis: true });
        assert_eq!(LossMask::ALL.to_string(), "adv+ori+consis");
        assert!("".parse::<LossMask>().is_err());
        assert!("adv+foo".parse::<LossMask>().is_err());
        assert_eq!("agp_s".parse::<TuningMode>().unwrap(), TuningMode::AgpS);
    }

    #[test]
    fn adam_examples() {
        let mut p = Matrix::filled(2, 2, 0.5);
        let mut state = OptimizerState::default();
        adam_step(&mut [&mut p], &[Matrix::zeros(2, 2)], &mut state, 0.001).unwrap();
        assert_eq!(p, Matrix::filled(2, 2, 0.5));

        let mut p = Matrix::scalar(0.0).unwrap();
        let mut state = OptimizerState::default();
        let g = Matrix::scalar(1.0).unwrap();
        adam_step(&mut [&mut p], &[g.clone()], &mut state, 0.001).unwrap();
        let d1 = p.get(0, 0);
        assert!((d1 + 0.001 / (1.0 + ADAM_EPS)).abs() < 1e-18);
        adam_step(&mut [&mut p], &[g], &mut state, 0.001).unwrap();
        let d2 = p.get(0, 0) - d1;
        assert!(d2.abs() <= d1.abs() * 1.01);

        assert!(adam_step(&mut [&mut p], &[Matrix::zeros(2, 1)], &mut state, 0.001).is_err());
    }

    fn tiny_setup() -> (Dataset, Dataset, BackboneParams) {
        let spec = SyntheticSpec { num_graphs: 48, nodes_min: 5, nodes_max: 8, feature_signal: 1.0, ..Default::default() };
        let data = generate_synthetic(&spec, 3).unwrap();
        let (train, val, _) = crate::graphdata::split(&data, (0.5, 0.25, 0.25), 0).unwrap();
        let backbone = BackboneParams::init(BackboneConfig::new(8, 8, 2, BackboneMode::Full), 2, 5).unwrap();
        (train, val, backbone)
    }

    fn small_cfg(mode: TuningMode) -> TrainConfig {
        TrainConfig {
            warmup_epochs: 2,
            epochs: 2,
            batch_size: 8,
            bottleneck_dim: 3,
            tuning_mode: mode,
            lr: 0.01,
            ..TrainConfig::default()
        }
    }

    fn small_budget() -> PerturbationBudget {
        PerturbationBudget { steps: 3, ..Default::default() }
    }

    #[test]
    fn warmup_zero_epochs_is_identity() {
        let (train, _, backbone) = tiny_setup();
        let cfg = TrainConfig { warmup_epochs: 0, ..small_cfg(TuningMode::Agp) };
        let m = initial_model(&backbone, 1, &cfg).unwrap();
        assert_eq!(warmup(m.clone(), &train, &cfg).unwrap(), m);
    }

    #[test]
    fn warmup_reduces_clean_loss_and_keeps_backbone() {
        let (train, _, backbone) = tiny_setup();
        let cfg = TrainConfig { warmup_epochs: 15, ..small_cfg(TuningMode::Agp) };
        let m = initial_model(&backbone, 1, &cfg).unwrap();
        let graphs: Vec<&Graph> = train.graphs.iter().collect();
        let before = crate::metrics::per_graph_losses(&m, &graphs, None).unwrap().iter().sum::<f64>();
        let after_model = warmup(m, &train, &cfg).unwrap();
        let after = crate::metrics::per_graph_losses(&after_model, &graphs, None).unwrap().iter().sum::<f64>();
        assert!(after <= before, "{after} > {before}");
        assert_eq!(after_model.backbone.encoder_fingerprint(), backbone.encoder_fingerprint());
    }

    #[test]
    fn agp_run_is_deterministic_and_freezes_backbone() {
        let (train, val, backbone) = tiny_setup();
        let cfg = small_cfg(TuningMode::Agp);
        let a = agp_finetune(&train, Some(&val), &backbone, &cfg, &small_budget()).unwrap();
        let b = agp_finetune(&train, Some(&val), &backbone, &cfg, &small_budget()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.len(), 4);
        assert!(a.log[0].adv_loss.is_none() && a.log[3].adv_loss.is_some());
        assert_eq!(a.model.backbone.encoder_fingerprint(), backbone.encoder_fingerprint());
    }

    #[test]
    fn zero_epochs_returns_warmup_output() {
        let (train, _, backbone) = tiny_setup();
        let cfg = TrainConfig { epochs: 0, log_attacked_auc: false, ..small_cfg(TuningMode::Agp) };
        let out = agp_finetune(&train, None, &backbone, &cfg, &small_budget()).unwrap();
        let warm = warmup(initial_model(&backbone, 1, &cfg).unwrap(), &train, &cfg).unwrap();
        assert_eq!(out.model, warm);
    }

    #[test]
    fn clean_prompt_equals_ori_only_agp() {
        let (train, val, backbone) = tiny_setup();
        let clean = baseline_finetune(&train, Some(&val), &backbone, &small_cfg(TuningMode::CleanPrompt), &small_budget()).unwrap();
        let ori = TrainConfig { loss_mask: LossMask::ORI, ..small_cfg(TuningMode::Agp) };
        let agp = agp_finetune(&train, Some(&val), &backbone, &ori, &small_budget()).unwrap();
        assert_eq!(clean.model, agp.model);
        assert_eq!(clean.log.iter().map(|r| r.clean_loss).collect::<Vec<_>>(), agp.log.iter().map(|r| r.clean_loss).collect::<Vec<_>>());
        assert!(clean.log.iter().all(|r| r.adv_loss.is_none()));
    }

    #[test]
    fn baselines_train_only_their_groups() {
        let (train, _, backbone) = tiny_setup();
        let lp = baseline_finetune(&train, None, &backbone, &small_cfg(TuningMode::LinearProbe), &small_budget()).unwrap();
        assert_eq!(lp.model.backbone.encoder_fingerprint(), backbone.encoder_fingerprint());
        assert_eq!(lp.model.prompts.param_count(), 0);

        let gpf = baseline_finetune(&train, None, &backbone, &small_cfg(TuningMode::Gpf), &small_budget()).unwrap();
        assert_eq!(gpf.model.backbone.encoder_fingerprint(), backbone.encoder_fingerprint());
        assert_eq!(gpf.model.prompts.param_count(), 8);
        assert_ne!(gpf.model.prompts.shared, Some(Matrix::zeros(1, 8)));

        let ft = baseline_finetune(&train, None, &backbone, &small_cfg(TuningMode::FullFt), &small_budget()).unwrap();
        assert_ne!(ft.model.backbone.encoder_fingerprint(), backbone.encoder_fingerprint());
        assert_eq!(ft.log.len(), 4);
    }

    #[test]
    fn log_csv_leaves_missing_values_empty() {
        let log = vec![EpochLog { epoch: 0, clean_loss: 0.5, adv_loss: None, consis_loss: Some(0.25), val_auc_clean: None, val_auc_attacked: None }];
        let mut out = Vec::new();
        write_log_csv(&log, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "0,0.5,,0.25,,");
    }

    #[test]
    fn pretraining_learns_separable_surrogate() {
        let spec = SyntheticSpec {
            num_graphs: 120,
            nodes_min: 6,
            nodes_max: 10,
            feature_signal: 1.0,
            label_rule: LabelRule::MultiTask,
            ..Default::default()
        };
        let data = generate_synthetic(&spec, 8).unwrap();
        let cfg = BackboneConfig::new(8, 16, 2, BackboneMode::Full);
        let pc = PretrainConfig { epochs: 15, ..Default::default() };
        let (params, log) = pretrain(&data, cfg.clone(), &pc).unwrap();
        assert!(log.last().unwrap().val_auc_clean.unwrap() > 0.9, "{:?}", log.last());
        let (again, _) = pretrain(&data, cfg, &pc).unwrap();
        assert_eq!(params, again);
    }
}
