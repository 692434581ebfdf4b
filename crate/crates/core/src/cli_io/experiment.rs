use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::format::{load_field, save_field};
use super::manifest::{write_dataset, DatasetManifest, MANIFEST_FILE};
use crate::adapt::{run_adaptation, run_pretraining, AdaptationConfig, TrainState, METRICS_HEADER};
use crate::error::{Error, Result};
use crate::eval::{evaluate_case, summarize, EvalReport, SDLOGJ_SPACING, TRE_SIGMA};
use crate::geometry::{gaussian_interpolate, DisplacementField};
use crate::model::{load_checkpoint, predict, save_checkpoint, Checkpoint, ModelConfig, ModelParameters};
use crate::synth::toy::{toy_dataset, ToyConfig};
use crate::synth::RegistrationCase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// External dataset; when unset, `synth` writes a toy dataset into the run
    /// directory and later stages read it from there.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Toy cases generated by `synth`.
    pub n_cases: usize,
    /// Cases are split in manifest order: train, then validation, then test.
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            n_cases: 60,
            n_train: 40,
            n_val: 10,
            n_test: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    #[default]
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// SDlogJ grid spacing (mm).
    pub spacing: f64,
    /// Which parameter set of the checkpoint to evaluate.
    pub params: ParamSource,
    /// Explicit checkpoint; defaults to the latest stage output in the run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Worker threads for per-case prediction.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            spacing: SDLOGJ_SPACING,
            params: ParamSource::Student,
            checkpoint: None,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed of the toy data stream. `--seed` also sets `model.init_seed` and
    /// `adapt.seed`.
    pub seed: u64,
    /// Run directory; overridden by `--out` or the environment.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub toy: ToyConfig,
    pub model: ModelConfig,
    pub adapt: AdaptationConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            toy: ToyConfig::default(),
            model: ModelConfig::default(),
            adapt: AdaptationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.toy.validate()?;
        self.model.validate()?;
        self.adapt.validate()?;
        let d = &self.data;
        if d.n_train == 0 || d.n_test == 0 {
            return Err(Error::Config("data.n_train and data.n_test must be >= 1".into()));
        }
        if self.data.manifest.is_none() && d.n_train + d.n_val + d.n_test > d.n_cases {
            return Err(Error::Config("data.n_train + n_val + n_test exceeds data.n_cases".into()));
        }
        if self.eval.spacing.is_nan() || self.eval.spacing <= 0.0 || self.eval.threads == 0 {
            return Err(Error::Config("eval.spacing must be > 0 and eval.threads >= 1".into()));
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.init_seed = seed;
        self.adapt.seed = seed;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Pretrain,
    Adapt,
    Eval,
    PlotData,
}

/// Fixed file layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/pretrain.ckpt")
    }
    pub fn adapt_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/adapt.ckpt")
    }
    pub fn metrics(&self, stage: &str) -> PathBuf {
        self.root.join(format!("metrics/{stage}.csv"))
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn report(&self) -> PathBuf {
        self.eval_dir().join("report.json")
    }
    pub fn prediction(&self, id: &str) -> PathBuf {
        self.eval_dir().join("phi").join(format!("{id}.xyz"))
    }
    pub fn plot(&self, id: &str) -> PathBuf {
        self.root.join("plot").join(format!("{id}.tsv"))
    }
}

/// Run one stage. Progress lines go to `log`; returns the main artifacts.
pub fn run_experiment(cfg: &ExperimentConfig, stage: Stage, log: &mut dyn FnMut(&str)) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    match stage {
        Stage::Synth => synth_stage(cfg, &paths),
        Stage::Pretrain => pretrain_stage(cfg, &paths, log),
        Stage::Adapt => adapt_stage(cfg, &paths, log),
        Stage::Eval => eval_stage(cfg, &paths).map(|(p, _)| p),
        Stage::PlotData => emit_plot_data(&paths.root, cfg),
    }
}

fn synth_stage(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    if cfg.data.manifest.is_some() {
        return Err(Error::Config("synth generates toy data; unset data.manifest".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cases = toy_dataset(cfg.data.n_cases, &cfg.toy, &mut rng)?;
    write_dataset(&paths.data(), &cases)?;
    Ok(vec![paths.data().join(MANIFEST_FILE)])
}

/// The case list and its train / validation / test split.
pub struct Splits {
    pub train: Vec<RegistrationCase>,
    pub val: Vec<RegistrationCase>,
    pub test: Vec<RegistrationCase>,
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let manifest = match &cfg.data.manifest {
        Some(p) => p.clone(),
        None => {
            let p = RunPaths::new(&cfg.out_dir).data().join(MANIFEST_FILE);
            if !p.is_file() {
                return Err(Error::StageOrder(format!(
                    "no dataset at {}; run `synth` first or set data.manifest",
                    p.display()
                )));
            }
            p
        }
    };
    let mut cases = DatasetManifest::load(&manifest)?.load_cases()?;
    let d = &cfg.data;
    let need = d.n_train + d.n_val + d.n_test;
    if cases.len() < need {
        return Err(Error::Config(format!("dataset has {} cases, splits need {need}", cases.len())));
    }
    cases.truncate(need);
    let test = cases.split_off(d.n_train + d.n_val);
    let val = cases.split_off(d.n_train);
    Ok(Splits { train: cases, val, test })
}

fn metrics_writer(path: PathBuf) -> Result<impl FnMut(&TrainState) -> Result<()>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
    let mut written = 0;
    Ok(move |state: &TrainState| {
        let mut rows = String::new();
        for r in &state.metrics[written..] {
            let _ = writeln!(rows, "{}", r.csv_row());
        }
        written = state.metrics.len();
        let mut f = fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(rows.as_bytes()).map_err(|e| Error::io(&path, e))
    })
}

fn write_state(path: &Path, state: &TrainState) -> Result<()> {
    let ckpt = Checkpoint::new(&state.model, state.student.clone(), state.adam.clone(), Some(state.teacher.clone()));
    save_checkpoint(path, &ckpt)
}

fn pretrain_stage(cfg: &ExperimentConfig, paths: &RunPaths, log: &mut dyn FnMut(&str)) -> Result<Vec<PathBuf>> {
    let splits = load_splits(cfg)?;
    let mut metrics = metrics_writer(paths.metrics("pretrain"))?;
    let ckpt = paths.pretrain_checkpoint();
    let total = cfg.adapt.pretrain_epochs;
    let mut state = run_pretraining(&splits.train, &cfg.model, &cfg.adapt, &mut |epoch, s| {
        metrics(s)?;
        let last = s.metrics.last().map_or(f64::NAN, |r| r.l_sup);
        log(&format!("pretrain epoch {epoch}/{total} l_sup {last:.4}"));
        Ok(())
    })?;
    state.teacher = state.student.clone();
    write_state(&ckpt, &state)?;
    Ok(vec![ckpt, paths.metrics("pretrain")])
}

fn load_state(path: &Path, model: &ModelConfig) -> Result<TrainState> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check(model)?;
    let teacher = ckpt.teacher.unwrap_or_else(|| ckpt.params.clone());
    TrainState::from_parts(model, ckpt.params, teacher, ckpt.adam)
}

fn adapt_stage(cfg: &ExperimentConfig, paths: &RunPaths, log: &mut dyn FnMut(&str)) -> Result<Vec<PathBuf>> {
    let pre = paths.pretrain_checkpoint();
    if !pre.is_file() {
        return Err(Error::StageOrder(format!("adapt needs a pretrained checkpoint at {}; run `pretrain` first", pre.display())));
    }
    let state = load_state(&pre, &cfg.model)?;
    let splits = load_splits(cfg)?;
    let mut metrics = metrics_writer(paths.metrics("adapt"))?;
    let ckpt = paths.adapt_checkpoint();
    let total = cfg.adapt.adapt_epochs;
    let state = run_adaptation(&splits.train, state, &cfg.adapt, &mut |epoch, s| {
        metrics(s)?;
        write_state(&ckpt, s)?;
        let rate = s.metrics.last().and_then(|r| r.indicator_rate).unwrap_or(f64::NAN);
        log(&format!("adapt epoch {epoch}/{total} indicator rate {rate:.2}"));
        Ok(())
    })?;
    write_state(&ckpt, &state)?;
    Ok(vec![ckpt, paths.metrics("adapt")])
}

fn eval_params(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<ModelParameters> {
    let path = match &cfg.eval.checkpoint {
        Some(p) => p.clone(),
        None => [paths.adapt_checkpoint(), paths.pretrain_checkpoint()]
            .into_iter()
            .find(|p| p.is_file())
            .ok_or_else(|| Error::StageOrder("eval needs a checkpoint; run `pretrain` first".into()))?,
    };
    let state = load_state(&path, &cfg.model)?;
    Ok(match cfg.eval.params {
        ParamSource::Student => state.student,
        ParamSource::Teacher => state.teacher,
    })
}

/// Predict on every case with up to `threads` workers, in case order.
pub fn predict_all(params: &ModelParameters, cases: &[RegistrationCase], model: &ModelConfig, threads: usize) -> Result<Vec<DisplacementField>> {
    let chunk = cases.len().div_ceil(threads.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|c| predict(params, &c.moving, &c.fixed, model)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(cases.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}

/// Evaluate `params` on `cases`.
pub fn evaluate_params(params: &ModelParameters, cases: &[RegistrationCase], cfg: &ExperimentConfig) -> Result<(EvalReport, Vec<DisplacementField>)> {
    let phis = predict_all(params, cases, &cfg.model, cfg.eval.threads)?;
    let per_case = cases
        .iter()
        .zip(&phis)
        .map(|(c, phi)| evaluate_case(c, phi, cfg.eval.spacing))
        .collect::<Result<Vec<_>>>()?;
    Ok((summarize(per_case)?, phis))
}

fn eval_stage(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<(Vec<PathBuf>, EvalReport)> {
    let params = eval_params(cfg, paths)?;
    let splits = load_splits(cfg)?;
    let (report, phis) = evaluate_params(&params, &splits.test, cfg)?;
    for (c, phi) in splits.test.iter().zip(&phis) {
        save_field(&paths.prediction(&c.id), phi)?;
    }
    let path = paths.report();
    fs::create_dir_all(paths.eval_dir()).map_err(|e| Error::io(paths.eval_dir(), e))?;
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok((vec![path], report))
}

pub const PLOT_HEADER: &str = "x\ty\tz\tdx\tdy\tdz\ttre_mm";

/// One TSV per evaluated case: landmark position, interpolated flow and TRE.
pub fn emit_plot_data(run_dir: &Path, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let paths = RunPaths::new(run_dir);
    let rp = paths.report();
    if !rp.is_file() {
        return Err(Error::StageOrder(format!("no evaluation report at {}; run `eval` first", rp.display())));
    }
    let text = fs::read_to_string(&rp).map_err(|e| Error::io(&rp, e))?;
    let report: EvalReport = serde_json::from_str(&text)?;
    if report.per_case.is_empty() {
        return Err(Error::Missing("evaluated cases"));
    }
    let splits = load_splits(cfg)?;
    let mut out = Vec::new();
    for cr in &report.per_case {
        let case = splits
            .test
            .iter()
            .find(|c| c.id == cr.id)
            .ok_or_else(|| Error::Config(format!("evaluated case {:?} is not in the test split", cr.id)))?;
        let lm = case.landmarks.as_ref().ok_or(Error::Missing("landmarks"))?;
        let phi = load_field(&paths.prediction(&cr.id))?;
        let flow = gaussian_interpolate(&case.moving, &phi, &lm.moving, TRE_SIGMA)?;
        if cr.landmark_errors_mm.len() != lm.len() {
            return Err(Error::LengthMismatch {
                what: "report landmark errors",
                expected: lm.len(),
                got: cr.landmark_errors_mm.len(),
            });
        }
        let mut s = format!("{PLOT_HEADER}\n");
        for ((p, v), e) in lm.moving.iter().zip(flow.vectors()).zip(&cr.landmark_errors_mm) {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}\t{}", p[0], p[1], p[2], v[0], v[1], v[2], e);
        }
        let path = paths.plot(&cr.id);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}
