//! The subcommands. Each returns a serializable summary that `main` prints to
//! stdout.

use std::path::{Path, PathBuf};

use agp_core::attack::AttackMode;
use agp_core::backbone::BackboneParams;
use agp_core::graphdata::{Dataset, Graph};
use agp_core::metrics::{attack_all, evaluate, per_graph_losses, repetition_seeds};
use agp_core::model::Model;
use agp_core::prompt::PromptStack;
use agp_core::rng::{derive_seed, rng_for};
use agp_core::theory::{
    figure4_cases, sample_scenario, scaled_linear_backbone, verify_input_prompt_only, verify_theorem1, IllustrationCase,
    NoiseScenario,
};
use agp_core::trainer::{finetune, pretrain, write_log_csv, EpochLog, TuningMode};
use anyhow::{Context, Result};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::rundir::{write_atomic, Meta, Staging, BACKBONE_FILE, CONFIG_FILE, LOG_FILE, META_FILE, MODEL_FILE};
use crate::Failure;

fn log_bytes(log: &[EpochLog]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_log_csv(log, &mut buf)?;
    Ok(buf)
}

fn meta(command: &str, cfg: &ExperimentConfig, data: &Dataset) -> Result<Meta> {
    let tuning = command == "train";
    Ok(Meta {
        command: command.into(),
        seed: cfg.seed,
        deterministic: cfg.deterministic,
        dataset_name: data.name.clone(),
        dataset_hash: data.content_hash()?,
        tuning_mode: tuning.then(|| cfg.train.tuning_mode.to_string()),
        loss_mask: tuning.then(|| cfg.train.loss_mask.to_string()),
        attack_mode: cfg.attack.mode.to_string(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

fn finite_or_numeric(v: Option<f64>, what: &str) -> Result<Option<f64>> {
    match v {
        Some(x) if !x.is_finite() => Err(Failure::numeric(format!("{what} is not finite")).into()),
        other => Ok(other),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub run_dir: PathBuf,
    pub epochs: usize,
    pub final_loss: f64,
    pub final_auc: Option<f64>,
}

fn pretrain_backbone(cfg: &ExperimentConfig) -> Result<(BackboneParams, Vec<EpochLog>, Dataset)> {
    let data = cfg.pretrain_dataset()?;
    let (backbone, log) = pretrain(&data, cfg.backbone_config(data.feature_dim), &cfg.pretrain_config())?;
    if let Some(last) = log.last() {
        if !last.clean_loss.is_finite() {
            return Err(Failure::numeric("pretraining loss diverged").into());
        }
    }
    Ok((backbone, log, data))
}

/// Supervised training of the encoder on the surrogate tasks.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainSummary> {
    let stage = Staging::new(out)?;
    let (backbone, log, data) = pretrain_backbone(cfg)?;
    Model { backbone, prompts: PromptStack::none() }.save(stage.path(BACKBONE_FILE))?;
    stage.write(LOG_FILE, log_bytes(&log)?)?;
    stage.write(CONFIG_FILE, cfg.to_toml()?)?;
    stage.write_json(META_FILE, &meta("pretrain", cfg, &data)?)?;
    let run_dir = stage.commit()?;
    let last = log.last();
    Ok(PretrainSummary {
        run_dir,
        epochs: log.len(),
        final_loss: last.map_or(f64::NAN, |l| l.clean_loss),
        final_auc: finite_or_numeric(last.and_then(|l| l.val_auc_clean), "surrogate AUC")?,
    })
}

/// Loads the encoder named by `backbone.checkpoint`, or pretrains one.
pub fn resolve_backbone(cfg: &ExperimentConfig) -> Result<BackboneParams> {
    match &cfg.backbone.checkpoint {
        Some(p) => {
            let file = if p.is_dir() { p.join(BACKBONE_FILE) } else { p.clone() };
            Ok(Model::load(&file).with_context(|| format!("loading backbone {}", file.display()))?.backbone)
        }
        None => Ok(pretrain_backbone(cfg)?.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub tuning_mode: String,
    pub loss_mask: String,
    pub epochs: usize,
    pub final_val_auc: Option<f64>,
    pub final_val_auc_attacked: Option<f64>,
}

/// Warm-up and tuning; writes the model, log, config snapshot and metadata.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    let stage = Staging::new(out)?;
    let data = cfg.dataset()?;
    let (train, val, _) = cfg.splits(&data)?;
    let backbone = resolve_backbone(cfg)?;
    if backbone.config.input_dim != data.feature_dim {
        return Err(Failure::config(format!(
            "backbone expects {} features, dataset has {}",
            backbone.config.input_dim, data.feature_dim
        ))
        .into());
    }
    let val = (!val.is_empty()).then_some(&val);
    let outcome = finetune(&train, val, &backbone, &cfg.train, &cfg.attack)?;
    outcome.model.save(stage.path(MODEL_FILE))?;
    stage.write(LOG_FILE, log_bytes(&outcome.log)?)?;
    stage.write(CONFIG_FILE, cfg.to_toml()?)?;
    stage.write_json(META_FILE, &meta("train", cfg, &data)?)?;
    let run_dir = stage.commit()?;
    let last = outcome.log.last();
    Ok(TrainSummary {
        run_dir,
        tuning_mode: cfg.train.tuning_mode.to_string(),
        loss_mask: cfg.train.loss_mask.to_string(),
        epochs: outcome.log.len(),
        final_val_auc: last.and_then(|l| l.val_auc_clean),
        final_val_auc_attacked: last.and_then(|l| l.val_auc_attacked),
    })
}

/// A trained run reopened from disk.
pub struct Run {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub meta: Meta,
    pub model: Model,
    pub test: Dataset,
}

/// Reloads a train run and regenerates its test split, refusing to continue
/// if the dataset no longer matches the recorded hash.
pub fn open_run(dir: &Path) -> Result<Run> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Failure::data(format!("{}: {e}", cfg_path.display())))?;
    let config = ExperimentConfig::from_toml(&text)?;
    let meta = Meta::read(dir)?;
    let model = Model::load(dir.join(MODEL_FILE)).with_context(|| format!("loading model from {}", dir.display()))?;
    let data = config.dataset()?;
    let hash = data.content_hash()?;
    if hash != meta.dataset_hash {
        return Err(Failure::data(format!(
            "dataset hash {hash} does not match the run's {}",
            meta.dataset_hash
        ))
        .into());
    }
    let (_, _, test) = config.splits(&data)?;
    if test.is_empty() {
        return Err(Failure::data("test split is empty").into());
    }
    Ok(Run { dir: dir.to_path_buf(), config, meta, model, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub graph_id: usize,
    pub mode: AttackMode,
    pub clean_loss: f64,
    pub adv_loss: f64,
    pub flips_used: usize,
    pub linf_used: f64,
}

/// Attacks every test graph once and reports per-graph losses and budget use.
pub fn cmd_attack(run: &Run, mode: Option<AttackMode>, seed: Option<u64>, out: Option<&Path>) -> Result<Vec<AttackRecord>> {
    let mode = mode.unwrap_or(run.config.attack.mode);
    let budget = run.config.attack.clone().with_mode(mode);
    let graphs: Vec<&Graph> = run.test.graphs.iter().collect();
    let seed = seed.unwrap_or_else(|| derive_seed(run.config.seed, &[60]));
    let samples = attack_all(&run.model, &graphs, &budget, seed)?;
    let clean = per_graph_losses(&run.model, &graphs, None)?;
    let adv = per_graph_losses(&run.model, &graphs, Some(&samples))?;
    let records: Vec<AttackRecord> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| AttackRecord {
            graph_id: i,
            mode,
            clean_loss: clean[i],
            adv_loss: adv[i],
            flips_used: s.flips(),
            linf_used: s.linf(),
        })
        .collect();
    if let Some(path) = out {
        write_atomic(path, serde_json::to_string_pretty(&records)? + "\n")?;
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: AttackMode,
    pub clean_auc: f64,
    pub attacked_auc: f64,
    pub drop: f64,
    pub per_task: Vec<Option<f64>>,
    pub repetitions: usize,
    pub seed: u64,
}

pub fn eval_file(mode: AttackMode) -> String {
    format!("eval-{mode}.json")
}

/// Clean and attacked test ROC-AUC, averaged over attack repetitions. The
/// report is also stored in the run directory for `report`.
pub fn cmd_eval(run: &Run, mode: Option<AttackMode>, repetitions: Option<usize>, seed: Option<u64>) -> Result<EvalReport> {
    let mode = mode.unwrap_or(run.config.attack.mode);
    let reps = repetitions.unwrap_or(run.config.eval.repetitions);
    if reps == 0 {
        return Err(Failure::config("repetitions must be positive").into());
    }
    let seed = seed.unwrap_or_else(|| derive_seed(run.config.seed, &[61]));
    let budget = run.config.attack.clone().with_mode(mode);
    let r = evaluate(&run.model, &run.test, Some((&budget, &repetition_seeds(seed, reps))))?;
    if !r.clean_auc.is_finite() {
        return Err(Failure::data("no test task has both classes").into());
    }
    let report = EvalReport {
        mode,
        clean_auc: r.clean_auc,
        attacked_auc: r.mean_auc,
        drop: r.drop,
        per_task: r.per_task,
        repetitions: reps,
        seed,
    };
    write_atomic(&run.dir.join(eval_file(mode)), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

pub const THEOREM_TOLERANCE: f64 = 1e-8;
pub const INPUT_ONLY_TOLERANCE: f64 = 1e-12;
pub const SCENARIO_MAX_CONDITION: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub index: usize,
    pub nodes: usize,
    pub layers: usize,
    pub edge_flips: usize,
    pub deviation: f64,
    pub conditions: Vec<f64>,
    pub rejections: usize,
    pub pass: bool,
    /// The same scenario with the edge noise removed and only `−E_x` on the
    /// input layer.
    pub input_only_deviation: f64,
    pub input_only_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub tolerance: f64,
    pub input_only_tolerance: f64,
    pub max_deviation: f64,
    pub max_input_only_deviation: f64,
    pub scenarios: Vec<ScenarioResult>,
    pub illustrations: Vec<IllustrationCase>,
    pub pass: bool,
}

/// Random linear-encoder scenarios checked against the closed-form prompts.
pub fn cmd_verify_theorem(scenarios: usize, seed: u64, max_nodes: usize, max_layers: usize) -> Result<TheoremReport> {
    if max_nodes < 3 || max_layers == 0 || scenarios == 0 {
        return Err(Failure::config("need scenarios >= 1, max_nodes >= 3 and max_layers >= 1").into());
    }
    let mut results = Vec::with_capacity(scenarios);
    for index in 0..scenarios {
        let mut rng = rng_for(seed, &[70, index as u64]);
        let nodes = rng.random_range(3..=max_nodes);
        let layers = rng.random_range(1..=max_layers);
        let dim = rng.random_range(1..=4);
        let hidden = rng.random_range(2..=6);
        let sampled = sample_scenario(nodes, dim, layers, 0.25, SCENARIO_MAX_CONDITION, &mut rng)?;
        let s = &sampled.scenario;
        let backbone = scaled_linear_backbone(s, hidden, sampled.epsilon_gin.clone(), derive_seed(seed, &[71, index as u64]))?;
        let check = verify_theorem1(s, &backbone)?;
        let clean_a = s.clean_a()?;
        let features_only = NoiseScenario::from_clean(&s.clean_x()?, &clean_a, s.e_x.clone(), agp_core::diffcore::Matrix::zeros(nodes, nodes))?;
        let input_only = verify_input_prompt_only(&features_only, &backbone)?;
        results.push(ScenarioResult {
            index,
            nodes,
            layers,
            edge_flips: s.e_a.nnz() / 2,
            pass: check.deviation <= THEOREM_TOLERANCE,
            deviation: check.deviation,
            conditions: check.conditions,
            rejections: sampled.rejections,
            input_only_pass: input_only.deviation <= INPUT_ONLY_TOLERANCE,
            input_only_deviation: input_only.deviation,
        });
    }
    let illustrations = figure4_cases()?;
    let max_deviation = results.iter().map(|r| r.deviation).fold(0.0, f64::max);
    let max_input_only_deviation = results.iter().map(|r| r.input_only_deviation).fold(0.0, f64::max);
    let pass = results.iter().all(|r| r.pass && r.input_only_pass) && illustrations.iter().all(|c| c.restored);
    Ok(TheoremReport {
        tolerance: THEOREM_TOLERANCE,
        input_only_tolerance: INPUT_ONLY_TOLERANCE,
        max_deviation,
        max_input_only_deviation,
        scenarios: results,
        illustrations,
        pass,
    })
}

/// Label used to group runs in reports.
pub fn method_label(meta: &Meta) -> String {
    let mode = meta.tuning_mode.clone().unwrap_or_else(|| meta.command.clone());
    match (&meta.loss_mask, mode.parse::<TuningMode>()) {
        (Some(mask), Ok(TuningMode::Agp | TuningMode::AgpS)) if mask != "adv+ori+consis" => format!("{mode}[{mask}]"),
        _ => mode,
    }
}
