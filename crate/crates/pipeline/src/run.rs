//! The five pipeline commands as library functions. The binary is a thin
//! argument-parsing layer over these.

use std::cell::Cell;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use shallowdiff_autodiff::ParamStore;
use shallowdiff_core::boundary::{
    accuracy_at, boundary_report, bp_train, kl_prior, kl_trajectory, margin_profile, select_k_kl, BoundaryClassifier,
    BoundaryReport, BpTrainConfig,
};
use shallowdiff_core::diffusion::{naive_sample, shallow_sample, NoisePredictor};
use shallowdiff_core::rng::stream;
use shallowdiff_core::synth::blur_proxy;
use shallowdiff_core::training::{
    eval_aux, eval_denoiser, train_aux, train_denoiser, DenoiserExample, DenoiserTrainConfig, LoopConfig,
};
use shallowdiff_core::{checkpoint, ConditionSeq, CoreError, Denoiser, Grid, MusicScore, NoisedGrid, Schedule, ScoreModel};

use crate::config::{BoundaryMethod, BoundaryProxy, RunConfig, StepRange};
use crate::dataset::{self, Dataset, Split};
use crate::error::{PipelineError, Result};
use crate::gridfile::{self, write_atomic};

pub const AUX_CKPT: &str = "aux.sdck";
pub const CLASSIFIER_CKPT: &str = "classifier.sdck";
pub const DENOISER_CKPT: &str = "denoiser.sdck";
pub const META: &str = "run.meta";
pub const WARMUP_LOG: &str = "warmup_log.csv";
pub const BP_LOG: &str = "bp_log.csv";
pub const TRAIN_LOG: &str = "train_log.csv";

// Independent RNG stream ids, one per pipeline stage.
const STREAM_AUX: u64 = 101;
const STREAM_BP: u64 = 102;
const STREAM_REPORT: u64 = 103;
const STREAM_MAIN: u64 = 104;
const STREAM_EVAL: u64 = 105;
const STREAM_INFER: u64 = 10_000;
const STREAM_ANALYZE: u64 = 20_000;

/// (t, ε) draws per item when measuring denoiser loss before and after training.
const EVAL_DRAWS: usize = 4;

fn save_params(path: &Path, params: &ParamStore) -> Result<()> {
    write_atomic(path, &checkpoint::to_bytes(params))
}

fn load_params(path: &Path) -> Result<ParamStore> {
    if !path.exists() {
        return Err(PipelineError::Missing(format!("checkpoint {} (run train first)", path.display())));
    }
    let buf = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    checkpoint::from_bytes(&buf).map_err(|e| PipelineError::format(path, e.to_string()))
}

fn ckpt(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.checkpoint_dir.join(name)
}

pub fn load_aux(cfg: &RunConfig) -> Result<ScoreModel> {
    let path = ckpt(cfg, AUX_CKPT);
    ScoreModel::from_params(cfg.encoder_config(), load_params(&path)?)
        .map_err(|e| PipelineError::format(path, e.to_string()))
}

pub fn load_classifier(cfg: &RunConfig) -> Result<BoundaryClassifier> {
    let path = ckpt(cfg, CLASSIFIER_CKPT);
    BoundaryClassifier::from_params(cfg.classifier_config(), load_params(&path)?)
        .map_err(|e| PipelineError::format(path, e.to_string()))
}

pub fn load_denoiser(cfg: &RunConfig) -> Result<Denoiser> {
    let path = ckpt(cfg, DENOISER_CKPT);
    Denoiser::from_params(cfg.denoiser_config(), load_params(&path)?)
        .map_err(|e| PipelineError::format(path, e.to_string()))
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:.17e}");
    }
    s
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub items: usize,
    pub train: usize,
    pub holdout: usize,
    pub clipped_harmonics: usize,
}

pub fn gen_data(cfg: &RunConfig) -> Result<GenSummary> {
    cfg.validate()?;
    let ds = dataset::generate(cfg)?;
    Ok(GenSummary {
        items: ds.items.len(),
        train: cfg.train_items(),
        holdout: cfg.holdout,
        clipped_harmonics: ds.clipped_harmonics,
    })
}

// ---------------------------------------------------------------- boundary

/// `(M, M̃)` pairs over the training split, with `M̃` chosen by the proxy
/// setting. Aux outputs are clipped into the grid range.
pub fn proxy_pairs(cfg: &RunConfig, ds: &Dataset, aux: Option<&ScoreModel>) -> Result<Vec<(Grid, Grid)>> {
    ds.split(Split::Train)
        .into_iter()
        .map(|it| proxy_pair(cfg, &it.score, &it.target, aux))
        .collect()
}

fn proxy_pair(cfg: &RunConfig, score: &MusicScore, target: &Grid, aux: Option<&ScoreModel>) -> Result<(Grid, Grid)> {
    let fake = match cfg.boundary_proxy {
        BoundaryProxy::Aux => {
            let model = aux.ok_or_else(|| PipelineError::Missing("auxiliary decoder for the aux proxy".into()))?;
            model.encode_and_decode(score)?.1.clipped_unit()
        }
        BoundaryProxy::Blur => blur_proxy(target, cfg.blur_radius)?,
        BoundaryProxy::Target => target.clone(),
    };
    Ok((target.clone(), fake))
}

pub fn train_classifier(
    cfg: &RunConfig,
    pairs: &[(Grid, Grid)],
    s: &Schedule,
) -> Result<(BoundaryClassifier, Vec<f64>)> {
    let mut rng = stream(cfg.seed, STREAM_BP);
    let mut clf = BoundaryClassifier::init(cfg.classifier_config(), &mut rng)?;
    let bcfg = BpTrainConfig {
        steps: cfg.bp_steps,
        batch: cfg.batch,
        adam: cfg.adam(cfg.bp_lr),
    };
    let losses = bp_train(&mut clf, pairs, s, &bcfg, &mut rng)?;
    Ok((clf, losses))
}

pub fn report(cfg: &RunConfig, clf: &BoundaryClassifier, pairs: &[(Grid, Grid)], s: &Schedule) -> Result<BoundaryReport> {
    let mut rng = stream(cfg.seed, STREAM_REPORT);
    Ok(boundary_report(clf, pairs, cfg.tau, cfg.margin_draws, s, &mut rng)?)
}

/// The `k` used for main-stage training and shallow inference.
pub fn chosen_k(cfg: &RunConfig, rep: &BoundaryReport) -> Result<usize> {
    match cfg.boundary_method {
        BoundaryMethod::Classifier => Ok(rep.classifier_k()?),
        BoundaryMethod::Kl => Ok(rep.k_kl),
        BoundaryMethod::Fixed => Ok(cfg.fixed_k),
    }
}

/// Classification accuracy at `t = 0` and `t = T`, `draws` noise samples per pair.
pub fn classifier_accuracy(
    cfg: &RunConfig,
    clf: &BoundaryClassifier,
    pairs: &[(Grid, Grid)],
    s: &Schedule,
    draws: usize,
) -> Result<(f64, f64)> {
    let mut rng = stream(cfg.seed, STREAM_EVAL);
    let mut at = |t: usize| -> Result<f64> {
        let mut acc = 0.0;
        for _ in 0..draws {
            acc += accuracy_at(clf, pairs, t, s, &mut rng)?;
        }
        Ok(acc / draws as f64)
    };
    let a0 = at(0)?;
    Ok((a0, at(s.steps())?))
}

pub fn cmd_boundary(cfg: &RunConfig) -> Result<BoundaryReport> {
    cfg.validate()?;
    let s = cfg.schedule()?;
    let ds = dataset::load(cfg)?;
    let aux = match cfg.boundary_proxy {
        BoundaryProxy::Aux => Some(load_aux(cfg)?),
        _ => None,
    };
    let clf = load_classifier(cfg)?;
    let pairs = proxy_pairs(cfg, &ds, aux.as_ref())?;
    let rep = report(cfg, &clf, &pairs, &s)?;
    write_atomic(&cfg.output_dir.join("boundary.csv"), rep.to_csv().as_bytes())?;
    Ok(rep)
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub k: usize,
    pub k_classifier: Option<usize>,
    pub k_kl: usize,
    pub kl_crossed: bool,
    pub t_max: usize,
    pub aux_l1_initial: f64,
    pub aux_l1_final: f64,
    pub bp_accuracy_t0: f64,
    pub bp_accuracy_t_final: f64,
    pub denoiser_loss_initial: f64,
    pub denoiser_loss_final: f64,
    pub timings: Vec<(&'static str, Duration)>,
}

impl TrainSummary {
    fn meta_text(&self, cfg: &RunConfig) -> String {
        let mut s = String::new();
        let opt = |k: Option<usize>| k.map_or("none".to_string(), |v| v.to_string());
        let _ = writeln!(s, "seed = {}", cfg.seed);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "boundary_method = {}", cfg.boundary_method);
        let _ = writeln!(s, "boundary_proxy = {}", cfg.boundary_proxy);
        let _ = writeln!(s, "k_classifier = {}", opt(self.k_classifier));
        let _ = writeln!(s, "k_kl = {}", self.k_kl);
        let _ = writeln!(s, "kl_crossed = {}", self.kl_crossed);
        let _ = writeln!(s, "t_max = {}", self.t_max);
        let _ = writeln!(s, "aux_l1_initial = {:?}", self.aux_l1_initial);
        let _ = writeln!(s, "aux_l1_final = {:?}", self.aux_l1_final);
        let _ = writeln!(s, "bp_accuracy_t0 = {:?}", self.bp_accuracy_t0);
        let _ = writeln!(s, "bp_accuracy_tT = {:?}", self.bp_accuracy_t_final);
        let _ = writeln!(s, "denoiser_loss_initial = {:?}", self.denoiser_loss_initial);
        let _ = writeln!(s, "denoiser_loss_final = {:?}", self.denoiser_loss_final);
        s
    }
}

/// Reads `k` from the metadata written by `train`.
pub fn trained_k(cfg: &RunConfig) -> Result<usize> {
    let path = ckpt(cfg, META);
    let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == "k")
        .and_then(|(_, v)| v.trim().parse().ok())
        .ok_or_else(|| PipelineError::format(&path, "no k entry"))
}

/// Warmup (encoder + aux decoder, then boundary classifier and `k`), then
/// the main denoiser stage on `t ~ U{1..k}`.
///
/// Progress lines go to `log`. On divergence the last good parameters of
/// the failing stage are written before the error is returned.
pub fn cmd_train(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<TrainSummary> {
    cfg.validate()?;
    let s = cfg.schedule()?;
    let ds = dataset::load(cfg)?;
    let train = ds.pairs(Split::Train);
    let mut timings = Vec::new();

    // warmup: encoder + auxiliary decoder on L1
    let t0 = Instant::now();
    let mut rng = stream(cfg.seed, STREAM_AUX);
    let mut model = ScoreModel::init(cfg.encoder_config(), &mut rng)?;
    let aux_l1_initial = eval_aux(&model, &train)?;
    let mut losses = Vec::with_capacity(cfg.warmup_steps);
    let lp = LoopConfig {
        steps: cfg.warmup_steps,
        batch: cfg.batch,
        adam: cfg.adam(cfg.aux_lr),
    };
    let res = train_aux(&mut model, &train, &lp, &mut rng, |step, loss, _| {
        losses.push(loss);
        if step % 100 == 0 {
            log(&format!("warmup step {step} l1 {loss:.5}"));
        }
        Ok(())
    });
    write_atomic(&ckpt(cfg, WARMUP_LOG), loss_csv(&losses).as_bytes())?;
    save_params(&ckpt(cfg, AUX_CKPT), &model.params)?;
    res?;
    let aux_l1_final = eval_aux(&model, &train)?;
    log(&format!("warmup l1 {aux_l1_initial:.5} -> {aux_l1_final:.5}"));
    timings.push(("warmup", t0.elapsed()));

    // boundary predictor and k
    let t0 = Instant::now();
    let pairs = proxy_pairs(cfg, &ds, Some(&model))?;
    let (clf, bp_losses) = train_classifier(cfg, &pairs, &s)?;
    write_atomic(&ckpt(cfg, BP_LOG), loss_csv(&bp_losses).as_bytes())?;
    save_params(&ckpt(cfg, CLASSIFIER_CKPT), &clf.params)?;
    let (bp_accuracy_t0, bp_accuracy_t_final) = classifier_accuracy(cfg, &clf, &pairs, &s, 1)?;
    let rep = report(cfg, &clf, &pairs, &s)?;
    if !rep.kl_crossed {
        log(&format!("warning: mean trajectory KL never reaches the prior KL; k_kl set to T = {}", s.steps()));
    }
    let k = chosen_k(cfg, &rep)?;
    let opt = |k: Option<usize>| k.map_or("none".to_string(), |v| v.to_string());
    log(&format!(
        "boundary: k_classifier {} k_kl {} -> k = {k} ({})",
        opt(rep.k_classifier),
        rep.k_kl,
        cfg.boundary_method
    ));
    timings.push(("boundary", t0.elapsed()));

    // main stage: denoiser on the frozen encoder's conditions
    let t0 = Instant::now();
    let t_max = match cfg.step_range {
        StepRange::Shallow => k,
        StepRange::Full => s.steps(),
    };
    let examples: Vec<DenoiserExample> = train
        .iter()
        .map(|(score, target)| {
            Ok(DenoiserExample {
                cond: model.encode(score)?,
                target: target.clone(),
            })
        })
        .collect::<std::result::Result<_, CoreError>>()?;
    let mut rng = stream(cfg.seed, STREAM_MAIN);
    let mut den = Denoiser::init(cfg.denoiser_config(), &mut rng)?;
    let denoiser_loss_initial = eval_denoiser(&den, &examples, &s, t_max, EVAL_DRAWS, cfg.seed)?;
    let dcfg = DenoiserTrainConfig {
        lp: LoopConfig {
            steps: cfg.main_steps,
            batch: cfg.batch,
            adam: cfg.adam(cfg.lr),
        },
        t_max,
        weighting: cfg.loss_weighting.0,
    };
    let mut losses = Vec::with_capacity(cfg.main_steps);
    let res = train_denoiser(&mut den, &examples, &s, &dcfg, &mut rng, |step, loss, _| {
        losses.push(loss);
        if step % 100 == 0 {
            log(&format!("main step {step} loss {loss:.5}"));
        }
        Ok(())
    });
    write_atomic(&ckpt(cfg, TRAIN_LOG), loss_csv(&losses).as_bytes())?;
    save_params(&ckpt(cfg, DENOISER_CKPT), &den.params)?;
    res?;
    let denoiser_loss_final = eval_denoiser(&den, &examples, &s, t_max, EVAL_DRAWS, cfg.seed)?;
    log(&format!("main loss {denoiser_loss_initial:.5} -> {denoiser_loss_final:.5}"));
    timings.push(("main", t0.elapsed()));

    let summary = TrainSummary {
        k,
        k_classifier: rep.k_classifier,
        k_kl: rep.k_kl,
        kl_crossed: rep.kl_crossed,
        t_max,
        aux_l1_initial,
        aux_l1_final,
        bp_accuracy_t0,
        bp_accuracy_t_final,
        denoiser_loss_initial,
        denoiser_loss_final,
        timings,
    };
    write_atomic(&ckpt(cfg, META), summary.meta_text(cfg).as_bytes())?;
    Ok(summary)
}

// ---------------------------------------------------------------- infer

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Naive,
    Shallow,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "naive" => Ok(Mode::Naive),
            "shallow" => Ok(Mode::Shallow),
            _ => Err(format!("unknown mode {s:?}, expected naive or shallow")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Naive => "naive",
            Mode::Shallow => "shallow",
        })
    }
}

/// Counts denoiser evaluations.
struct Counting<'a> {
    inner: &'a Denoiser,
    calls: Cell<usize>,
}

impl NoisePredictor for Counting<'_> {
    fn bins(&self) -> usize {
        self.inner.bins()
    }

    fn predict_noise(&self, noisy: &NoisedGrid, cond: &ConditionSeq) -> shallowdiff_core::Result<Grid> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict_noise(noisy, cond)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferMetric {
    pub id: usize,
    pub mode: Mode,
    pub k: Option<usize>,
    pub calls: usize,
    pub wall: Duration,
    pub path: PathBuf,
}

impl std::fmt::Display for InferMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "item={} mode={} calls={} wall_ms={:.3} out={}",
            self.id,
            self.mode,
            self.calls,
            self.wall.as_secs_f64() * 1e3,
            self.path.display()
        )
    }
}

pub struct InferRequest<'a> {
    pub mode: Mode,
    /// Overrides the trained `k` in shallow mode.
    pub k: Option<usize>,
    /// Scores file; defaults to the dataset's held-out items.
    pub scores: Option<&'a Path>,
}

pub fn infer_dir(cfg: &RunConfig, mode: Mode) -> PathBuf {
    cfg.output_dir.join(format!("infer-{mode}"))
}

/// Generates one grid per score. Each item draws from its own RNG stream,
/// so outputs do not depend on which other items are in the batch.
pub fn cmd_infer(cfg: &RunConfig, req: &InferRequest<'_>, log: &mut dyn FnMut(&str)) -> Result<Vec<InferMetric>> {
    cfg.validate()?;
    let s = cfg.schedule()?;
    let model = load_aux(cfg)?;
    let den = load_denoiser(cfg)?;
    let k = match req.mode {
        Mode::Naive => None,
        Mode::Shallow => {
            let k = match req.k {
                Some(k) => k,
                None => trained_k(cfg)?,
            };
            s.check_step(k, 1)
                .map_err(|_| PipelineError::Config(format!("k must lie in [1, {}], got {k}", s.steps())))?;
            Some(k)
        }
    };
    let items: Vec<(usize, MusicScore)> = match req.scores {
        Some(path) => dataset::read_scores(path)?.into_iter().enumerate().collect(),
        None => dataset::load(cfg)?
            .split(Split::Holdout)
            .into_iter()
            .map(|i| (i.id, i.score.clone()))
            .collect(),
    };
    let dir = infer_dir(cfg, req.mode);
    let mut out = Vec::with_capacity(items.len());
    for (id, score) in items {
        if score.frames() != cfg.frames {
            return Err(CoreError::FrameMismatch {
                expected: cfg.frames,
                found: score.frames(),
            }
            .into());
        }
        score.check_vocab(cfg.vocab, cfg.pitch_vocab)?;
        let counting = Counting {
            inner: &den,
            calls: Cell::new(0),
        };
        let mut rng = stream(cfg.seed, STREAM_INFER + id as u64);
        let t0 = Instant::now();
        let (cond, aux) = model.encode_and_decode(&score)?;
        let grid = match k {
            None => naive_sample(&counting, &cond, &s, &mut rng)?,
            Some(k) => shallow_sample(&counting, &aux.clipped_unit(), k, &cond, &s, &mut rng)?,
        };
        let wall = t0.elapsed();
        // persisted grids honour the [-1, 1] range
        let grid = grid.clipped_unit();
        let path = dir.join(dataset::grid_name(id));
        gridfile::write(&path, &grid)?;
        let m = InferMetric {
            id,
            mode: req.mode,
            k,
            calls: counting.calls.get(),
            wall,
            path,
        };
        log(&m.to_string());
        out.push(m);
    }
    Ok(out)
}

// ---------------------------------------------------------------- analyze

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeRow {
    pub t: usize,
    pub kl_traj: f64,
    pub kl_prior: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub rows: Vec<AnalyzeRow>,
    /// First `t` with `kl_traj ≤ kl_prior`.
    pub crossing: Option<usize>,
    pub path: PathBuf,
}

pub fn analysis_csv(rows: &[AnalyzeRow]) -> String {
    let mut s = String::from("t,kl_traj,kl_prior,margin\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.17e},{:.17e},{:.17e}", r.t, r.kl_traj, r.kl_prior, r.margin);
    }
    s
}

/// KL trajectory of one dataset item against its proxy, with the trained
/// classifier's margin at every step.
pub fn cmd_analyze(cfg: &RunConfig, id: usize) -> Result<Analysis> {
    cfg.validate()?;
    let s = cfg.schedule()?;
    let ds = dataset::load(cfg)?;
    let item = ds.item(id)?;
    let aux = match cfg.boundary_proxy {
        BoundaryProxy::Aux => Some(load_aux(cfg)?),
        _ => None,
    };
    let clf = load_classifier(cfg)?;
    let (m, mt) = proxy_pair(cfg, &item.score, &item.target, aux.as_ref())?;
    let mut rng = stream(cfg.seed, STREAM_ANALYZE + id as u64);
    let margins = margin_profile(&clf, &m, &mt, &s, cfg.margin_draws, &mut rng)?.margins();
    let prior = kl_prior(&m, &s)?;
    let rows = (1..=s.steps())
        .map(|t| {
            Ok(AnalyzeRow {
                t,
                kl_traj: kl_trajectory(&m, &mt, t, &s)?,
                kl_prior: prior,
                margin: margins[t - 1],
            })
        })
        .collect::<std::result::Result<Vec<_>, CoreError>>()?;
    let crossing = rows.iter().find(|r| r.kl_traj <= r.kl_prior).map(|r| r.t);
    debug_assert_eq!(
        crossing.unwrap_or(s.steps()),
        select_k_kl(&[(m.clone(), mt.clone())], &s)?.k
    );
    let path = cfg.output_dir.join(format!("analyze_item_{id:04}.csv"));
    write_atomic(&path, analysis_csv(&rows).as_bytes())?;
    Ok(Analysis { rows, crossing, path })
}
