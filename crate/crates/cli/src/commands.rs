//! The five pipeline commands. Each writes its resolved configuration into
//! the run directory next to its outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use sha2::{Digest, Sha256};

use dualrec::autodiff::checkpoint::{encode_optimizer, encode_params, load_params};
use dualrec::dataset::{assign_slices, ingest, load_prepared, save_prepared, Manifest, SlicedLog};
use dualrec::eval::{evaluate, heldout_tpp_nll, EvalReport};
use dualrec::gradcheck::{self, GradcheckReport, Status};
use dualrec::graphs::{build_slice_graphs, SliceGraph};
use dualrec::model::Model;
use dualrec::rng::{stream, Purpose};
use dualrec::synthetic::generate;
use dualrec::tpp::{extract_event_times, EventTimes};
use dualrec::training::{train, EpochRecord, TrainInputs, TrainOutcome};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::variants::{self, Grid};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "training.jsonl";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const EVAL_FILE: &str = "eval.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write(&dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(dir)
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Dataset, graphs and event times for a configuration.
pub struct Prepared {
    pub data: SlicedLog,
    pub graphs: Vec<SliceGraph>,
    pub events: EventTimes,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let data = if let Some(dir) = &cfg.data_dir {
            load_prepared(dir)?.0
        } else if let Some(path) = &cfg.input {
            assign_slices(ingest(path, cfg.min_interactions)?, cfg.slices)?
        } else {
            let pattern = cfg.synthetic.expect("validated: one data source is set");
            generate(&cfg.synthetic_config(pattern))?
        };
        let graphs = build_slice_graphs(&data);
        let events = extract_event_times(&data);
        Ok(Self { data, graphs, events })
    }

    pub fn inputs(&self) -> TrainInputs<'_> {
        TrainInputs { data: &self.data, graphs: &self.graphs, events: &self.events }
    }
}

/// Fresh model for `cfg` over `prep`, initialised from the run seed.
pub fn init_model(cfg: &RunConfig, prep: &Prepared) -> Result<Model> {
    Ok(Model::new(cfg.model_config(), prep.data.num_users(), prep.data.num_items(), &mut stream(cfg.seed, Purpose::Init))?)
}

/// Trains and streams each epoch record to `log` as one JSON line.
pub fn fit(cfg: &RunConfig, prep: &Prepared, log: &mut dyn Write, dump_dir: Option<&Path>) -> Result<TrainOutcome> {
    let model = init_model(cfg, prep)?;
    let outcome = train(model, &prep.inputs(), &cfg.train_config(), dump_dir, |r: &EpochRecord| {
        let line = serde_json::to_string(r)?;
        writeln!(log, "{line}")?;
        Ok(())
    })?;
    Ok(outcome)
}

pub fn cmd_prepare(input: &Path, slices: usize, min_interactions: usize, out: &Path) -> Result<Manifest> {
    let data = assign_slices(ingest(input, min_interactions)?, slices)?;
    Ok(save_prepared(out, &data, min_interactions)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub best_epoch: usize,
    pub epochs: usize,
    pub best_validation: EvalReport,
    pub checkpoint_id: String,
}

/// Writes `config.toml`, `training.jsonl`, `params.bin` (best epoch) and
/// `optimizer.bin` into the run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let dir = prepare_run_dir(cfg)?;
    let prep = Prepared::load(cfg)?;
    let log_path = dir.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let outcome = fit(cfg, &prep, &mut log, Some(&dir))?;
    let params = encode_params(&outcome.model.params);
    write(&dir.join(PARAMS_FILE), &params)?;
    write(&dir.join(OPTIMIZER_FILE), encode_optimizer(&outcome.optimizer, &outcome.model.params))?;
    Ok(TrainSummary {
        run_dir: dir,
        best_epoch: outcome.best_epoch,
        epochs: outcome.log.len(),
        best_validation: outcome.best_validation,
        checkpoint_id: short_hash(&params),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Valid,
    Test,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    #[serde(flatten)]
    pub report: EvalReport,
    pub split: Split,
    pub slice: usize,
    /// Mean held-out temporal negative log-likelihood on the same slice.
    pub tpp_nll: Option<f64>,
    pub config_hash: String,
    pub checkpoint_id: String,
}

/// Ranks the chosen split with the checkpoint in `run_dir` (default: the
/// configuration's own run directory) and writes `eval.json` there.
pub fn cmd_evaluate(cfg: &RunConfig, run_dir: Option<&Path>, split: Split) -> Result<EvalOutput> {
    let dir = run_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_dir());
    let params_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&params_path).map_err(|e| CliError::io(&params_path, e))?;
    let prep = Prepared::load(cfg)?;
    let model = Model::from_params(cfg.model_config(), load_params(&params_path)?, prep.data.num_users(), prep.data.num_items())?;
    let sp = prep.data.split();
    let slice = match split {
        Split::Valid => sp.valid_slice(),
        Split::Test => sp.test_slice(),
    };
    let report = evaluate(&model, &prep.data, &prep.graphs, slice, cfg.eval_k, cfg.seed)?;
    let tpp_nll = if model.config.has_slice_states() {
        let (nll, n) = heldout_tpp_nll(&model, &prep.events, &prep.graphs, slice)?;
        (n > 0).then_some(nll)
    } else {
        None
    };
    let out = EvalOutput { report, split, slice, tpp_nll, config_hash: cfg.hash(), checkpoint_id: short_hash(&bytes) };
    let mut json = serde_json::to_string_pretty(&out)?;
    json.push('\n');
    write(&dir.join(EVAL_FILE), json)?;
    Ok(out)
}

/// Gradient check on the fixed micro-instance with the configured model
/// switches and `beta`. Writes `gradcheck.json`; a failing group is an error.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let dir = prepare_run_dir(cfg)?;
    let report = gradcheck::run(&cfg.model_config(), cfg.beta, cfg.seed, None)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write(&dir.join(GRADCHECK_FILE), json)?;
    if !report.passed {
        let failed: Vec<&str> = report.groups.iter().filter(|g| g.status == Status::Fail).map(|g| g.group.as_str()).collect();
        return Err(CliError::GradcheckFailed(failed.join(", ")));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub mrr: f64,
    pub k: usize,
    pub best_epoch: usize,
    pub epochs: usize,
    pub val_ndcg10: f64,
}

/// Trains and tests every row on the same data and seed, writing
/// `ablation.csv` and `ablation.json`. Rows run on `cfg.workers` threads and
/// come back in request order.
pub fn cmd_ablate(cfg: &RunConfig, names: &[String], grid: Option<Grid>) -> Result<Vec<AblationRow>> {
    let mut rows_cfg = if names.is_empty() && grid.is_none() { variants::expand(cfg, &cfg.variants)? } else { variants::expand(cfg, names)? };
    if let Some(g) = grid {
        rows_cfg.extend(variants::grid(cfg, g));
    }
    if rows_cfg.is_empty() {
        return Err(CliError::Config("no variants or grid requested".into()));
    }
    for (_, c) in &rows_cfg {
        c.validate()?;
    }
    let dir = prepare_run_dir(cfg)?;

    let run_one = |prep: &Prepared, (name, c): &(String, RunConfig)| -> Result<AblationRow> {
        let test = prep.data.split().test_slice();
        let mut log = Vec::new();
        let outcome = fit(c, &prep, &mut log, None)?;
        let report = evaluate(&outcome.model, &prep.data, &prep.graphs, test, c.eval_k, c.seed)?;
        write(&dir.join(format!("{}.jsonl", name.replace('=', "_"))), &log)?;
        Ok(AblationRow {
            variant: name.clone(),
            hr_at_k: report.hr_at_k,
            ndcg_at_k: report.ndcg_at_k,
            mrr: report.mrr,
            k: report.k,
            best_epoch: outcome.best_epoch,
            epochs: outcome.log.len(),
            val_ndcg10: outcome.best_validation.ndcg_at_k,
        })
    };

    // Graphs are not shareable across threads, so each worker loads its own
    // copy of the (deterministic) dataset.
    let slots: Vec<Mutex<Option<Result<AblationRow>>>> = rows_cfg.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.min(rows_cfg.len()) {
            scope.spawn(|| {
                let prep = Prepared::load(cfg);
                loop {
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    if k >= rows_cfg.len() {
                        break;
                    }
                    let row = match &prep {
                        Ok(p) => run_one(p, &rows_cfg[k]),
                        Err(e) => Err(CliError::Config(format!("loading data: {e}"))),
                    };
                    *slots[k].lock().unwrap() = Some(row);
                }
            });
        }
    });
    let rows = slots.into_iter().map(|s| s.into_inner().unwrap().expect("every slot is filled")).collect::<Result<Vec<_>>>()?;

    let csv_path = dir.join(ABLATION_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    let mut json = serde_json::to_string_pretty(&rows)?;
    json.push('\n');
    write(&dir.join(ABLATION_JSON), json)?;
    Ok(rows)
}
