//! Command implementations behind the CLI: train, eval, ablate, ensemble,
//! and generate. Every command works out of a run directory holding an
//! echoed config, the vocabulary, checkpoints, the evaluation history, and
//! metric reports, so any run can be reproduced or re-scored from disk.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand_chacha::ChaCha8Rng;

use clozefit_core::catalog::{builtin_pvp, builtin_pvps};
use clozefit_core::checkpoint::{self, Checkpoint};
use clozefit_core::eval::{self, EnsembleSource, ModelSource};
use clozefit_core::metrics::{EvalReport, MetricKind};
use clozefit_core::model::{ModelConfig, Params, RtdHead};
use clozefit_core::pvp::{parse_pvp_file, Pvp};
use clozefit_core::synthetic::{generate, Generated};
use clozefit_core::task::{load_task_examples, TaskExample, TaskId};
use clozefit_core::tokenizer::Vocabulary;
use clozefit_core::trainer::{train, Objective, RunHistory};

use crate::config::{AblateArms, RunConfig, Settings};

pub const CONFIG_ECHO: &str = "config.echo";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint_best.bin";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const DEV_REPORT_FILE: &str = "report_dev.json";
pub const TEST_REPORT_FILE: &str = "report_test.json";
pub const ABLATION_FILE: &str = "ablation.jsonl";

pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub history: RunHistory,
    pub dev_report: EvalReport,
    pub test_report: Option<EvalReport>,
    pub train_report: EvalReport,
}

/// Creates (or, with `resume`, reuses) a run directory.
fn ensure_run_dir(path: &Path, resume: bool) -> Result<()> {
    if path.exists() && !resume {
        let occupied = std::fs::read_dir(path)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if occupied {
            bail!(
                "output directory {} is not empty (pass --resume to reuse it)",
                path.display()
            );
        }
    }
    std::fs::create_dir_all(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    Ok(())
}

fn resolve_pvps(cfg: &RunConfig) -> Result<Vec<Pvp>> {
    if let Some(path) = &cfg.pvp_custom {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read custom pvp file {}", path.display()))?;
        return Ok(vec![parse_pvp_file(&text, cfg.task)?]);
    }
    if cfg.train.mtmp {
        return Ok(builtin_pvps(cfg.task)?);
    }
    Ok(vec![builtin_pvp(cfg.task, cfg.pvp_index)?])
}

/// The vocabulary covers the training examples plus every selected
/// pattern's literals and fixed verbalizations.
fn build_vocab(
    cfg: &RunConfig,
    train_examples: &[TaskExample],
    pvps: &[Pvp],
) -> Result<Vocabulary> {
    let mut corpus: Vec<String> =
        train_examples.iter().map(|e| e.document_text()).collect();
    for pvp in pvps {
        corpus.extend(pvp.vocab_seed_text());
    }
    Ok(Vocabulary::build(&corpus, cfg.vocab_min_count)?)
}

fn load_required(path: Option<&PathBuf>, key: &str, task: TaskId) -> Result<Vec<TaskExample>> {
    let path = path.ok_or_else(|| anyhow!("config key {key} is required"))?;
    if !path.exists() {
        bail!("{key} path {} does not exist", path.display());
    }
    Ok(load_task_examples(path, task)?)
}

/// Scores examples with the objective's prediction rule.
fn evaluate_checkpoint(
    params: &Params<f32>,
    head: Option<&RtdHead<f32>>,
    objective: Objective,
    pvp: &Pvp,
    vocab: &Vocabulary,
    examples: &[TaskExample],
    max_len: usize,
    metric: MetricKind,
) -> Result<EvalReport> {
    if objective == Objective::Rtd {
        let head = head.ok_or_else(|| anyhow!("rtd run has no binary head in its checkpoint"))?;
        let mut preds = Vec::with_capacity(examples.len());
        for ex in examples {
            preds.push(eval::predict_rtd(params, head, pvp, vocab, ex, max_len)?);
        }
        return Ok(eval::report_from_predictions(&preds, examples, metric)?);
    }
    let mut source = ModelSource { params };
    Ok(eval::evaluate(&mut source, pvp, vocab, examples, max_len, metric)?)
}

/// Trains a model per the settings and persists the run.
pub fn cmd_train(settings: &Settings, out_dir: &Path, resume: bool) -> Result<TrainSummary> {
    let cfg = RunConfig::resolve(settings)?;
    let train_examples = load_required(cfg.data_train.as_ref(), "data.train", cfg.task)?;
    let dev_examples = load_required(cfg.data_dev.as_ref(), "data.dev", cfg.task)?;
    let test_examples = match &cfg.data_test {
        Some(path) if path.exists() => Some(load_task_examples(path, cfg.task)?),
        Some(path) => bail!("data.test path {} does not exist", path.display()),
        None => None,
    };

    ensure_run_dir(out_dir, resume)?;
    let pvps = resolve_pvps(&cfg)?;
    let vocab = build_vocab(&cfg, &train_examples, &pvps)?;
    let model_config = ModelConfig { vocab_size: vocab.len(), ..cfg.model };
    let metric = eval::metric_for(cfg.task, cfg.metric);

    std::fs::write(out_dir.join(CONFIG_ECHO), settings.to_echo())?;
    std::fs::write(out_dir.join(VOCAB_FILE), vocab.to_text())?;

    let outcome = train::<f32>(
        &model_config,
        &cfg.train,
        &pvps,
        &vocab,
        &train_examples,
        &dev_examples,
        metric,
    )?;

    checkpoint::save(
        &out_dir.join(CHECKPOINT_FILE),
        &outcome.best,
        outcome.best_head.as_ref(),
    )?;
    std::fs::write(out_dir.join(HISTORY_FILE), outcome.history.to_jsonl())?;

    let eval_pvp = &pvps[0];
    let dev_report = evaluate_checkpoint(
        &outcome.best,
        outcome.best_head.as_ref(),
        cfg.train.objective,
        eval_pvp,
        &vocab,
        &dev_examples,
        model_config.max_len,
        metric,
    )?;
    std::fs::write(out_dir.join(DEV_REPORT_FILE), serde_json::to_string_pretty(&dev_report)?)?;

    let train_report = evaluate_checkpoint(
        &outcome.best,
        outcome.best_head.as_ref(),
        cfg.train.objective,
        eval_pvp,
        &vocab,
        &train_examples,
        model_config.max_len,
        metric,
    )?;

    let test_report = match &test_examples {
        Some(examples) => {
            let report = evaluate_checkpoint(
                &outcome.best,
                outcome.best_head.as_ref(),
                cfg.train.objective,
                eval_pvp,
                &vocab,
                examples,
                model_config.max_len,
                metric,
            )?;
            std::fs::write(
                out_dir.join(TEST_REPORT_FILE),
                serde_json::to_string_pretty(&report)?,
            )?;
            Some(report)
        }
        None => None,
    };

    Ok(TrainSummary {
        run_dir: out_dir.to_path_buf(),
        history: outcome.history,
        dev_report,
        test_report,
        train_report,
    })
}

/// A persisted run, reloaded from its directory.
pub struct LoadedRun {
    pub settings: Settings,
    pub cfg: RunConfig,
    pub vocab: Vocabulary,
    pub checkpoint: Checkpoint,
    pub pvps: Vec<Pvp>,
}

pub fn load_run(run_dir: &Path) -> Result<LoadedRun> {
    let settings = Settings::from_file(&run_dir.join(CONFIG_ECHO))?;
    let cfg = RunConfig::resolve(&settings)?;
    let vocab_text = std::fs::read_to_string(run_dir.join(VOCAB_FILE))
        .with_context(|| format!("cannot read {}", run_dir.join(VOCAB_FILE).display()))?;
    let vocab = Vocabulary::from_text(&vocab_text)?;
    let checkpoint = checkpoint::load(&run_dir.join(CHECKPOINT_FILE))?;
    let expected = ModelConfig { vocab_size: vocab.len(), ..cfg.model };
    checkpoint.require_config(&expected)?;
    let pvps = resolve_pvps(&cfg)?;
    Ok(LoadedRun { settings, cfg, vocab, checkpoint, pvps })
}

/// Scores a persisted run on a data file (default: its dev split). Never
/// mutates the run directory.
pub fn cmd_eval(run_dir: &Path, data: Option<&Path>) -> Result<EvalReport> {
    let run = load_run(run_dir)?;
    let data_path = match data {
        Some(p) => p.to_path_buf(),
        None => run
            .cfg
            .data_dev
            .clone()
            .ok_or_else(|| anyhow!("run config has no data.dev; pass --data"))?,
    };
    let examples = load_task_examples(&data_path, run.cfg.task)?;
    let metric = eval::metric_for(run.cfg.task, run.cfg.metric);
    evaluate_checkpoint(
        &run.checkpoint.params,
        run.checkpoint.rtd_head.as_ref(),
        run.cfg.train.objective,
        &run.pvps[0],
        &run.vocab,
        &examples,
        run.cfg.model.max_len,
        metric,
    )
}

/// Averages the logits of several runs' best checkpoints and scores the
/// result. All runs must share the model config and vocabulary.
pub fn cmd_ensemble(run_dirs: &[PathBuf], data: Option<&Path>) -> Result<EvalReport> {
    if run_dirs.is_empty() {
        bail!("ensemble needs at least one run directory");
    }
    let runs: Vec<LoadedRun> = run_dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let first = &runs[0];
    if first.cfg.train.objective == Objective::Rtd {
        bail!("ensembling averages vocabulary logits; rtd runs score with a binary head");
    }
    let vocab_text = first.vocab.to_text();
    for run in &runs[1..] {
        if run.vocab.to_text() != vocab_text {
            bail!("ensemble members disagree on vocabulary");
        }
        if run.checkpoint.config != first.checkpoint.config {
            bail!(
                "ensemble members disagree on model config: {:?} vs {:?}",
                run.checkpoint.config,
                first.checkpoint.config
            );
        }
    }
    let data_path = match data {
        Some(p) => p.to_path_buf(),
        None => first
            .cfg
            .data_dev
            .clone()
            .ok_or_else(|| anyhow!("run config has no data.dev; pass --data"))?,
    };
    let examples = load_task_examples(&data_path, first.cfg.task)?;
    let metric = eval::metric_for(first.cfg.task, first.cfg.metric);
    let params: Vec<&Params<f32>> = runs.iter().map(|r| &r.checkpoint.params).collect();
    let mut source = EnsembleSource::new(params)?;
    Ok(eval::evaluate(
        &mut source,
        &first.pvps[0],
        &first.vocab,
        &examples,
        first.cfg.model.max_len,
        metric,
    )?)
}

/// One ablation arm's outcome.
#[derive(Debug, Clone, serde::Serialize, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    pub metric: String,
    pub dev_value: f64,
    pub best_batch: usize,
}

/// Runs the configured arm set with one shared seed so arms differ only in
/// the swept setting, and writes one comparison record per arm.
pub fn cmd_ablate(settings: &Settings, out_dir: &Path, resume: bool) -> Result<Vec<AblationRow>> {
    let cfg = RunConfig::resolve(settings)?;
    ensure_run_dir(out_dir, resume)?;

    let arms: Vec<(String, Vec<(String, String)>)> = match cfg.ablate_arms {
        AblateArms::Objectives => ["adapet", "adapet_no_lc", "adapet_lc_pos_only", "pet"]
            .iter()
            .map(|name| {
                (name.to_string(), vec![("objective".to_string(), name.to_string())])
            })
            .collect(),
        AblateArms::MaskGrid => {
            let mut arms = Vec::new();
            for kind in ["fixed", "variable"] {
                for (pct, ratio) in
                    [("15", "0.15"), ("10.5", "0.105"), ("10", "0.10"), ("7.5", "0.075")]
                {
                    arms.push((
                        format!("{pct}pct_{kind}"),
                        vec![
                            ("objective".to_string(), "adapet".to_string()),
                            ("mask.kind".to_string(), kind.to_string()),
                            ("mask.ratio".to_string(), ratio.to_string()),
                        ],
                    ));
                }
            }
            arms
        }
    };

    let mut rows = Vec::with_capacity(arms.len());
    for (name, sets) in &arms {
        let mut arm_settings = settings.clone();
        for (k, v) in sets {
            arm_settings.set(k, v)?;
        }
        let arm_dir = out_dir.join("arms").join(name);
        let summary = cmd_train(&arm_settings, &arm_dir, resume)?;
        let metric = eval::metric_for(cfg.task, cfg.metric);
        rows.push(AblationRow {
            arm: name.clone(),
            metric: metric.name().to_string(),
            dev_value: summary.history.best_value,
            best_batch: summary.history.best_batch,
        });
    }

    let mut jsonl = String::new();
    for row in &rows {
        jsonl.push_str(&serde_json::to_string(row)?);
        jsonl.push('\n');
    }
    std::fs::write(out_dir.join(ABLATION_FILE), jsonl)?;
    Ok(rows)
}

/// Renders the ablation rows as an aligned text table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let arm_width = rows.iter().map(|r| r.arm.len()).max().unwrap_or(3).max(3);
    let mut out = format!("{:<arm_width$}  {:>10}  {:>10}\n", "arm", "dev", "best@");
    for row in rows {
        out.push_str(&format!(
            "{:<arm_width$}  {:>10.4}  {:>10}\n",
            row.arm, row.dev_value, row.best_batch
        ));
    }
    out
}

/// Generates synthetic task data files.
pub fn cmd_generate(settings: &Settings, out_dir: &Path, resume: bool) -> Result<Generated> {
    use rand::SeedableRng;
    let cfg = RunConfig::resolve(settings)?;
    ensure_run_dir(out_dir, resume)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let data = generate(&cfg.synthetic, &mut rng)?;
    std::fs::write(
        out_dir.join("train.jsonl"),
        clozefit_core::task::examples_to_jsonl(&data.train),
    )?;
    std::fs::write(
        out_dir.join("dev.jsonl"),
        clozefit_core::task::examples_to_jsonl(&data.dev),
    )?;
    std::fs::write(
        out_dir.join("test.jsonl"),
        clozefit_core::task::examples_to_jsonl(&data.test),
    )?;
    std::fs::write(out_dir.join(CONFIG_ECHO), settings.to_echo())?;
    Ok(data)
}

/// sha256 of a file, used to compare run artifacts.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
