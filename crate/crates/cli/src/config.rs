//! Run configuration files.
//!
//! A file holds optional `model` and `train` objects whose fields are those
//! of [`ModelConfig`] and [`TrainConfig`]; missing fields take their
//! defaults. Precedence, lowest first: built-in defaults, the file, flags.
//! The two resolution fields always agree: when the file sets only one of
//! them, the other follows it.

use std::fs;
use std::path::Path;

use realsmile::model::{HeadKind, ModelConfig};
use realsmile::training::{TrainConfig, Weighting};
use realsmile::{Error, Result};
use serde_json::{json, Map, Value};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Values given on the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_videos: Option<usize>,
    pub lr: Option<f64>,
    pub fps: Option<f64>,
    pub resolution: Option<usize>,
    pub weighting: Option<Weighting>,
    pub head: Option<HeadKind>,
    pub no_tsa: bool,
}

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Json {
        path: path.to_path_buf(),
        source: e,
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| json_err(path, e))?;
        let Value::Object(mut top) = value else {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        };
        let mut section = |name: &str| -> Result<Map<String, Value>> {
            match top.remove(name) {
                None => Ok(Map::new()),
                Some(Value::Object(m)) => Ok(m),
                Some(_) => Err(Error::Config(format!("{}: `{name}` must be an object", path.display()))),
            }
        };
        let mut model = section("model")?;
        let mut train = section("train")?;
        if let Some(key) = top.keys().next() {
            return Err(Error::Config(format!(
                "{}: unknown section `{key}` (expected `model` or `train`)",
                path.display()
            )));
        }
        match (model.get("resolution").cloned(), train.get("resolution").cloned()) {
            (Some(r), None) => {
                train.insert("resolution".into(), r);
            }
            (None, Some(r)) => {
                model.insert("resolution".into(), r);
            }
            _ => {}
        }
        let model: ModelConfig = serde_json::from_value(Value::Object(model)).map_err(|e| json_err(path, e))?;
        let train: TrainConfig = serde_json::from_value(Value::Object(train)).map_err(|e| json_err(path, e))?;
        Ok(Self { model, train })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&json!({ "model": self.model, "train": self.train }))
            .expect("configuration serializes");
        fs::write(path, text + "\n").map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Applies flags and validates the result.
    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        let t = &mut self.train;
        if let Some(v) = o.seed {
            t.seed = v;
        }
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if let Some(v) = o.batch_videos {
            t.batch_videos = v;
        }
        if let Some(v) = o.lr {
            t.lr = v;
        }
        if let Some(v) = o.fps {
            t.target_fps = v;
        }
        if let Some(v) = o.weighting {
            t.weighting = v;
        }
        if let Some(v) = o.resolution {
            t.resolution = v;
            self.model.resolution = v;
        }
        if let Some(v) = o.head {
            self.model.head = v;
        }
        if o.no_tsa {
            self.model.use_tsa = false;
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.model.resolution != self.train.resolution {
            return Err(Error::Config(format!(
                "model resolution {} differs from train resolution {}",
                self.model.resolution, self.train.resolution
            )));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig> {
        RunConfig::parse(s, Path::new("cfg.json"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.train.epochs, c.train.batch_videos, c.train.lr), (60, 16, 1e-3));
    }

    #[test]
    fn one_resolution_sets_both() {
        let c = parse(r#"{"train": {"resolution": 64}}"#).unwrap();
        assert_eq!(c.model.resolution, 64);
        let c = parse(r#"{"model": {"resolution": 32}}"#).unwrap();
        assert_eq!(c.train.resolution, 32);
        let c = parse(r#"{"model": {"resolution": 32}, "train": {"resolution": 64}}"#).unwrap();
        assert!(c.apply(&Overrides::default()).is_err());
    }

    #[test]
    fn flags_override_file() {
        let c = parse(r#"{"train": {"epochs": 3, "weighting": "proportion"}, "model": {"use_tsa": true}}"#).unwrap();
        let c = c
            .apply(&Overrides {
                epochs: Some(5),
                weighting: Some(Weighting::Unit),
                head: Some(HeadKind::Softmax),
                resolution: Some(64),
                fps: Some(3.0),
                no_tsa: true,
                ..Default::default()
            })
            .unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.weighting, Weighting::Unit);
        assert_eq!(c.model.head, HeadKind::Softmax);
        assert_eq!((c.model.resolution, c.train.resolution), (64, 64));
        assert_eq!(c.train.target_fps, 3.0);
        assert!(!c.model.use_tsa);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse(r#"{"optim": {}}"#).is_err());
        assert!(parse(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(parse(r#"{"model": 3}"#).is_err());
        assert!(parse("[").is_err());
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let mut c = RunConfig::default();
        c.train.lr = 0.1 + 0.2;
        c.model.use_tsa = false;
        c.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), c);
    }
}
