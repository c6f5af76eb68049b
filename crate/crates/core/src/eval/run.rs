use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::{evaluate, probe_cases, test_episodes, MetricsRow, ProbeCase};
use crate::episodes::{export_split, load_split, render_scene_with, Contamination, EpisodeSource, Phase};
use crate::error::{Error, Result};
use crate::model::{
    forward_baseline, forward_episode, init_params, save_checkpoint, sgd_step, BgMethod, BgSource, ParamStore,
};

pub const CSV_HEADER: &str = "run_id,axis_value,class_id,iou,miou,bias_rate,seconds";

// Independent ChaCha streams under one seed, so the model's own draws never
// shift the episode sequence.
const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_MODEL: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_PROBE: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Procedural scenes, or the exported dataset under `data_dir`.
pub fn episode_source(config: &RunConfig) -> Result<EpisodeSource> {
    match &config.data_dir {
        None => Ok(EpisodeSource::Procedural(config.scene_spec())),
        Some(dir) => Ok(EpisodeSource::Pool {
            train: load_split(&dir.join("train"))?,
            test: load_split(&dir.join("test"))?,
        }),
    }
}

/// Renders the fold's dataset into `out/train` (base classes, contaminated)
/// and `out/test` (novel classes).
pub fn gen_data(config: &RunConfig, out: &Path) -> Result<(usize, usize)> {
    config.validate()?;
    let spec = config.scene_spec();
    let split = config.split()?;
    let mut rng = stream(config.seed, STREAM_DATA);
    let mut written = [0usize; 2];
    for (slot, (phase, dir)) in [(Phase::Train, "train"), (Phase::Test, "test")].into_iter().enumerate() {
        let mut scenes = Vec::new();
        for &class in split.classes(phase) {
            for _ in 0..config.scenes_per_class {
                scenes.push(render_scene_with(&spec, class, rng.random(), Contamination::Sample)?);
            }
        }
        let path = out.join(dir);
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        export_split(&path, &scenes)?;
        written[slot] = scenes.len();
    }
    Ok((written[0], written[1]))
}

/// Losses of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_specific: f64,
    pub loss_agnostic: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: ParamStore,
    pub losses: Vec<LossRecord>,
    pub metrics: MetricsRow,
}

/// Trains on base-class episodes, then evaluates on the novel fold. Writes
/// `metrics.csv`, `losses.csv`, `config.txt` and `checkpoint.scn` into
/// `out_dir`.
pub fn run_train(config: &RunConfig) -> Result<TrainReport> {
    config.validate()?;
    let source = episode_source(config)?;
    let (params, losses) = train(config, &source)?;
    let metrics = evaluate_params(config, &source, &params)?;

    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join("config.txt"), config.to_text().as_bytes())?;
    write_file(&out.join("losses.csv"), losses_csv(&losses).as_bytes())?;
    write_metrics_csv(
        &out.join("metrics.csv"),
        &[(config.run_id.clone(), String::new(), metrics.clone())],
        config.record_wall_clock,
    )?;
    save_checkpoint(&params, &out.join("checkpoint.scn"))?;
    Ok(TrainReport {
        params,
        losses,
        metrics,
    })
}

/// The seeded training loop alone.
pub fn train(config: &RunConfig, source: &EpisodeSource) -> Result<(ParamStore, Vec<LossRecord>)> {
    let split = config.split()?;
    let cfg = &config.model;
    let mut params = init_params(cfg, &mut stream(config.seed, STREAM_INIT))?;
    let mut data_rng = stream(config.seed, STREAM_DATA);
    let mut model_rng = stream(config.seed, STREAM_MODEL);
    let steps = config.epochs * config.episodes_per_epoch;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let episode = source.sample(&split, Phase::Train, cfg.shots, &mut data_rng)?;
        let mut pass = if config.baseline {
            forward_baseline(&episode, &params, cfg)?
        } else {
            forward_episode(&episode, &params, cfg, &mut model_rng)?
        };
        pass.backward(&mut params)?;
        sgd_step(&mut params, cfg.lr, cfg.momentum);
        losses.push(LossRecord {
            step,
            loss: pass.loss,
            loss_specific: pass.loss_specific,
            loss_agnostic: pass.loss_agnostic,
        });
    }
    Ok((params, losses))
}

/// Evaluates `params` on the run's seeded test episodes and probe scenes.
/// Every model evaluated under the same seed sees the same episodes.
pub fn evaluate_params(config: &RunConfig, source: &EpisodeSource, params: &ParamStore) -> Result<MetricsRow> {
    let split = config.split()?;
    let shots = config.model.shots;
    let episodes = test_episodes(
        source,
        &split,
        config.eval_episodes,
        shots,
        &mut stream(config.seed, STREAM_EVAL),
    )?;
    evaluate(params, &episodes, &probe_set(config, source)?, &config.model)
}

/// The run's seeded bias-probe scenes.
pub fn probe_set(config: &RunConfig, source: &EpisodeSource) -> Result<Vec<ProbeCase>> {
    let mut rng = stream(config.seed, STREAM_PROBE);
    probe_cases(
        source,
        &config.split()?,
        config.probe_episodes,
        config.model.shots,
        &mut rng,
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn losses_csv(losses: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,loss_specific,loss_agnostic\n");
    for r in losses {
        let agn = r.loss_agnostic.map(|v| v.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{}", r.step, r.loss, r.loss_specific, agn).expect("string write");
    }
    s
}

/// One CSV row per evaluated class.
pub fn metrics_csv(rows: &[(String, String, MetricsRow)], record_wall_clock: bool) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for (run_id, axis_value, m) in rows {
        let seconds = if record_wall_clock { m.seconds } else { 0.0 };
        for (class, iou) in &m.class_iou {
            writeln!(
                s,
                "{run_id},{axis_value},{class},{iou:.6},{:.6},{:.6},{seconds:.6}",
                m.miou, m.bias_rate
            )
            .expect("string write");
        }
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[(String, String, MetricsRow)], record_wall_clock: bool) -> Result<()> {
    write_file(path, metrics_csv(rows, record_wall_clock).as_bytes())
}

/// Hyperparameter swept by [`run_ablation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// Number of background clusters; 0 trains the baseline.
    N,
    Lambda,
    /// Background prototypes from the query or from the supports.
    Source,
    /// Grid-pooled background regions at the given level.
    Spp,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(Self::N),
            "lambda" => Ok(Self::Lambda),
            "source" => Ok(Self::Source),
            "spp" => Ok(Self::Spp),
            _ => Err(Error::config(format!(
                "unknown ablation axis {s:?}; expected n, lambda, source or spp"
            ))),
        }
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::N => "n",
            Self::Lambda => "lambda",
            Self::Source => "source",
            Self::Spp => "spp",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            Self::N => {
                let n: usize = value
                    .parse()
                    .map_err(|_| Error::config(format!("bad cluster count {value:?}")))?;
                if n == 0 {
                    cfg.baseline = true;
                } else {
                    cfg.model.n_clusters = n;
                }
            }
            Self::Lambda => cfg.set("lambda", value)?,
            Self::Source => {
                cfg.set("bg_source", value)?;
            }
            Self::Spp => {
                cfg.set("spp_level", value)?;
                cfg.model.bg_method = BgMethod::Spp;
                cfg.model.bg_source = BgSource::Query;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One full train and evaluate per value, all under the base seed. Each run
/// writes into `out_dir/<axis>_<value>`; the combined table goes to
/// `out_dir/ablation.csv` with rows in input order.
pub fn run_ablation(base: &RunConfig, axis: AblationAxis, values: &[String]) -> Result<Vec<(String, MetricsRow)>> {
    if values.is_empty() {
        return Err(Error::config("ablation needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = axis.apply(base, v)?;
            cfg.out_dir = base.out_dir.join(format!("{}_{v}", axis.name()));
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::with_capacity(values.len());
    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(&configs) {
        let start = Instant::now();
        let mut report = run_train(cfg)?;
        report.metrics.seconds = start.elapsed().as_secs_f64();
        rows.push((axis.name().to_string(), value.clone(), report.metrics.clone()));
        results.push((value.clone(), report.metrics));
    }
    fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    write_metrics_csv(&base.out_dir.join("ablation.csv"), &rows, base.record_wall_clock)?;
    Ok(results)
}
