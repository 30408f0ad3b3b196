//! Run configuration: one struct covering corpus generation, model shape,
//! and the training schedule, plus a plain-text dotted-key file format.
//!
//! A config file is a list of `section.path = value` lines (`#` comments and
//! blank lines allowed); values are JSON scalars or arrays. Keys must name
//! existing fields — unknown keys are rejected, not ignored. The model's
//! shape fields (feature dim, categories, segments) follow the corpus unless
//! a file sets them explicitly, and any disagreement is an error.

use crate::corpus::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{config_hash, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

/// Everything one run needs, in one self-describing value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = SyntheticSpec::default();
        let model = ModelConfig::for_corpus(
            corpus.num_categories,
            corpus.feature_dim,
            corpus.segments_per_video,
        );
        RunConfig {
            corpus,
            model,
            train: TrainConfig::default(),
        }
    }
}

/// The shape fields that must agree between the corpus and the model.
const SHAPE_KEYS: [(&str, &str); 3] = [
    ("num_categories", "num_categories"),
    ("feature_dim", "feature_dim"),
    ("segments_per_video", "segments_per_video"),
];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let pairs = [
            (
                "num_categories",
                self.corpus.num_categories,
                self.model.num_categories,
            ),
            ("feature_dim", self.corpus.feature_dim, self.model.feature_dim),
            (
                "segments_per_video",
                self.corpus.segments_per_video,
                self.model.segments_per_video,
            ),
        ];
        for (name, c, m) in pairs {
            if c != m {
                return Err(Error::Config(format!(
                    "corpus.{name} = {c} but model.{name} = {m}; they must agree"
                )));
            }
        }
        Ok(())
    }

    /// Parse dotted-key overrides on top of the defaults.
    pub fn from_overrides(text: &str) -> Result<RunConfig> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        let overrides = parse_dotted(text)?;
        let model_shape_overridden: Vec<&str> = SHAPE_KEYS
            .iter()
            .filter(|(_, m)| {
                overrides
                    .iter()
                    .any(|(path, _)| path.len() == 2 && path[0] == "model" && path[1] == *m)
            })
            .map(|(_, m)| *m)
            .collect();
        for (path, value) in &overrides {
            set_path(&mut tree, path, value.clone())?;
        }
        // The model follows the corpus shape unless a line pinned it.
        for (c, m) in SHAPE_KEYS {
            if !model_shape_overridden.contains(&m) {
                let v = tree["corpus"][c].clone();
                tree["model"][m] = v;
            }
        }
        let cfg: RunConfig = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("bad value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_overrides(&std::fs::read_to_string(path)?)
    }

    /// The full configuration as sorted dotted-key lines.
    pub fn to_dotted(&self) -> Result<String> {
        let tree = serde_json::to_value(self)?;
        let mut lines = Vec::new();
        flatten("", &tree, &mut lines);
        lines.sort();
        Ok(lines.join("\n") + "\n")
    }

    /// The echo written into every output directory: build identity, the
    /// model-config hash, and every effective key.
    pub fn effective_text(&self) -> Result<String> {
        let header = format!(
            "# {} {}\n# model-config-hash = {}\n",
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION"),
            config_hash(&self.model),
        );
        Ok(header + &self.to_dotted()?)
    }
}

/// Parse `a.b.c = value` lines; `#` starts a comment, blank lines are
/// skipped. Values are JSON (numbers, booleans, `null`, arrays, quoted
/// strings); anything unparseable is taken as a bare string.
fn parse_dotted(text: &str) -> Result<Vec<(Vec<String>, Value)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{raw}`",
                lineno + 1
            )));
        };
        let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::Config(format!(
                "line {}: malformed key `{}`",
                lineno + 1,
                key.trim()
            )));
        }
        let rhs = value.trim();
        let parsed = serde_json::from_str::<Value>(rhs)
            .unwrap_or_else(|_| Value::String(rhs.to_string()));
        out.push((path, parsed));
    }
    Ok(out)
}

/// Assign into the tree at a dotted path, demanding every segment exists.
fn set_path(tree: &mut Value, path: &[String], value: Value) -> Result<()> {
    let dotted = path.join(".");
    let mut node = tree;
    for (i, seg) in path.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "key `{dotted}`: `{}` is not a section",
                path[..i].join(".")
            ))
        })?;
        node = map
            .get_mut(seg)
            .ok_or_else(|| Error::Config(format!("unknown key `{dotted}`")))?;
    }
    if node.is_object() {
        return Err(Error::Config(format!(
            "key `{dotted}` names a section, not a value"
        )));
    }
    *node = value;
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_the_dotted_form() {
        let cfg = RunConfig::default();
        let text = cfg.to_dotted().unwrap();
        let back = RunConfig::from_overrides(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_apply_and_comments_are_ignored() {
        let text = "\
# schedule
train.epochs = 5          # short run
train.learning_rate = 0.001

corpus.n_normal = 50
model.topk = 4
model.ablation.use_motar = false
corpus.anomaly_span = [3, 6]
";
        let cfg = RunConfig::from_overrides(text).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.corpus.n_normal, 50);
        assert_eq!(cfg.model.topk, 4);
        assert!(!cfg.model.ablation.use_motar);
        assert_eq!(cfg.corpus.anomaly_span, (3, 6));
    }

    #[test]
    fn model_shape_follows_corpus_overrides() {
        let cfg = RunConfig::from_overrides("corpus.feature_dim = 32\n").unwrap();
        assert_eq!(cfg.corpus.feature_dim, 32);
        assert_eq!(cfg.model.feature_dim, 32);

        let cfg = RunConfig::from_overrides(
            "corpus.num_categories = 2\ncorpus.segments_per_video = 16\n",
        )
        .unwrap();
        assert_eq!(cfg.model.num_categories, 2);
        assert_eq!(cfg.model.segments_per_video, 16);
    }

    #[test]
    fn explicit_shape_disagreement_is_an_error() {
        let err = RunConfig::from_overrides("model.feature_dim = 32\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("must agree"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "train.momentum = 0.9\n",
            "optimizer.lr = 1.0\n",
            "model.motar.window = 3\n",
        ] {
            let err = RunConfig::from_overrides(text).unwrap_err();
            assert!(
                err.to_string().contains("unknown key"),
                "`{text}` gave: {err}"
            );
        }
    }

    #[test]
    fn sections_cannot_be_assigned() {
        let err = RunConfig::from_overrides("model.motar = 3\n").unwrap_err();
        assert!(err.to_string().contains("names a section"), "{err}");
    }

    #[test]
    fn type_errors_are_rejected() {
        let err = RunConfig::from_overrides("train.epochs = fast\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = RunConfig::from_overrides("train.epochs = 1.5\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(RunConfig::from_overrides("train.epochs 5\n").is_err());
        assert!(RunConfig::from_overrides("train..epochs = 5\n").is_err());
    }

    #[test]
    fn embed_dim_accepts_null_and_integers() {
        let cfg = RunConfig::from_overrides("model.embed_dim = 16\n").unwrap();
        assert_eq!(cfg.model.embed_dim, Some(16));
        let cfg = RunConfig::from_overrides("model.embed_dim = null\n").unwrap();
        assert_eq!(cfg.model.embed_dim, None);
    }

    #[test]
    fn effective_text_names_the_build_and_hash() {
        let cfg = RunConfig::default();
        let text = cfg.effective_text().unwrap();
        assert!(text.starts_with(&format!("# {}", env!("CARGO_PKG_NAME"))));
        assert!(text.contains("# model-config-hash = "));
        assert!(text.contains("train.seed = 7"));
        // The echo itself parses back to the same config.
        let back = RunConfig::from_overrides(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn bad_validation_is_caught_after_parsing() {
        // topk larger than the segment count.
        let err = RunConfig::from_overrides("model.topk = 99\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
