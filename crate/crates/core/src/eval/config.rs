use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::episodes::{FoldSplit, SceneSpec};
use crate::error::{Error, Result};
use crate::model::{BgMethod, BgSource, ModelConfig};

/// Classes in the synthetic benchmark; each fold holds one out.
pub const NUM_CLASSES: usize = 5;

/// Everything a training or evaluation run needs. Parsed from flat
/// `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub eval_episodes: usize,
    pub probe_episodes: usize,
    pub seed: u64,
    /// Exported dataset root with `train/` and `test/`; scenes are rendered
    /// on the fly when unset.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub fold: usize,
    pub image_size: usize,
    pub contamination_rate: f64,
    /// Half-extent range of rendered objects, in pixels.
    pub object_radius: (f64, f64),
    /// Scenes per class written by `gen-data`.
    pub scenes_per_class: usize,
    /// Train without the class-agnostic branch.
    pub baseline: bool,
    /// Write measured seconds into metrics.csv instead of 0.
    pub record_wall_clock: bool,
    pub run_id: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 20,
            episodes_per_epoch: 200,
            eval_episodes: 200,
            probe_episodes: 200,
            seed: 0,
            data_dir: None,
            out_dir: PathBuf::from("runs"),
            fold: 0,
            image_size: 64,
            contamination_rate: 0.25,
            object_radius: (14.0, 20.0),
            scenes_per_class: 200,
            baseline: false,
            record_wall_clock: false,
            run_id: "run".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value for {key}: {value:?}")))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "channels" => m.channels = parse(key, value)?,
            "high_channels" => m.high_channels = parse(key, value)?,
            "n_clusters" => m.n_clusters = parse(key, value)?,
            "lambda" => m.lambda = parse(key, value)?,
            "shots" => m.shots = parse(key, value)?,
            "bg_source" => {
                m.bg_source = match value {
                    "query" => BgSource::Query,
                    "support" => BgSource::Support,
                    _ => {
                        return Err(Error::config(format!(
                            "bg_source must be query or support, got {value:?}"
                        )))
                    }
                }
            }
            "bg_method" => {
                m.bg_method = match value {
                    "kmeans" => BgMethod::KMeans,
                    "spp" => BgMethod::Spp,
                    _ => return Err(Error::config(format!("bg_method must be kmeans or spp, got {value:?}"))),
                }
            }
            "spp_level" => m.spp_level = parse(key, value)?,
            "freeze_encoder" => m.freeze_encoder = parse(key, value)?,
            "lr" => m.lr = parse(key, value)?,
            "momentum" => m.momentum = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "episodes_per_epoch" => self.episodes_per_epoch = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "probe_episodes" => self.probe_episodes = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_dir" => self.data_dir = if value.is_empty() { None } else { Some(value.into()) },
            "out_dir" => self.out_dir = value.into(),
            "fold" => self.fold = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "contamination_rate" => self.contamination_rate = parse(key, value)?,
            "object_radius_min" => self.object_radius.0 = parse(key, value)?,
            "object_radius_max" => self.object_radius.1 = parse(key, value)?,
            "scenes_per_class" => self.scenes_per_class = parse(key, value)?,
            "baseline" => self.baseline = parse(key, value)?,
            "record_wall_clock" => self.record_wall_clock = parse(key, value)?,
            "run_id" => self.run_id = value.to_string(),
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses config text over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.fold >= NUM_CLASSES {
            return Err(Error::config(format!("fold must be below {NUM_CLASSES}")));
        }
        if self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes must be at least 1"));
        }
        if self.probe_episodes == 0 {
            return Err(Error::config("probe_episodes must be at least 1"));
        }
        if self.run_id.contains([',', '\n']) {
            return Err(Error::config("run_id may not contain commas or newlines"));
        }
        self.scene_spec().validate()
    }

    pub fn split(&self) -> Result<FoldSplit> {
        FoldSplit::for_fold(self.fold, NUM_CLASSES)
    }

    /// Scene generator for this fold: novel classes hide, unlabeled, in
    /// base-class scenes at `contamination_rate`.
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            image_size: self.image_size,
            contamination_rate: self.contamination_rate,
            contamination_classes: vec![self.fold],
            object_radius: self.object_radius,
            ..SceneSpec::default()
        }
    }

    /// The resolved configuration as parseable text.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("channels", m.channels.to_string());
        kv("high_channels", m.high_channels.to_string());
        kv("n_clusters", m.n_clusters.to_string());
        kv("lambda", m.lambda.to_string());
        kv("shots", m.shots.to_string());
        kv(
            "bg_source",
            match m.bg_source {
                BgSource::Query => "query",
                BgSource::Support => "support",
            }
            .into(),
        );
        kv(
            "bg_method",
            match m.bg_method {
                BgMethod::KMeans => "kmeans",
                BgMethod::Spp => "spp",
            }
            .into(),
        );
        kv("spp_level", m.spp_level.to_string());
        kv("freeze_encoder", m.freeze_encoder.to_string());
        kv("lr", m.lr.to_string());
        kv("momentum", m.momentum.to_string());
        kv("epochs", self.epochs.to_string());
        kv("episodes_per_epoch", self.episodes_per_epoch.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("probe_episodes", self.probe_episodes.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "data_dir",
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("out_dir", self.out_dir.display().to_string());
        kv("fold", self.fold.to_string());
        kv("image_size", self.image_size.to_string());
        kv("contamination_rate", self.contamination_rate.to_string());
        kv("object_radius_min", self.object_radius.0.to_string());
        kv("object_radius_max", self.object_radius.1.to_string());
        kv("scenes_per_class", self.scenes_per_class.to_string());
        kv("baseline", self.baseline.to_string());
        kv("record_wall_clock", self.record_wall_clock.to_string());
        kv("run_id", self.run_id.clone());
        s
    }
}
