//! Flat key=value run configuration.
//!
//! One global registry covers every subcommand: plain keys are typed and
//! validated as they arrive, `model.*` keys are parse-checked through the
//! model's own override machinery. Values resolve in application order —
//! built-in defaults, the `--config` file top to bottom, each `--set`
//! pair, then the dedicated flags — and every run writes the resolved
//! result next to its artifacts in a form `--config` accepts back.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gsvsr_core::ablate::AblationSettings;
use gsvsr_core::bench::BenchSettings;
use gsvsr_core::pipeline::ModelConfig;
use gsvsr_core::{Error, Result};

/// Value syntax accepted by one plain (non-`model.*`) key.
#[derive(Debug, Clone, Copy)]
enum Kind {
    Usize,
    U64,
    F64,
    Bool,
    Text,
    Choice(&'static [&'static str]),
    /// Comma-separated unsigned integers.
    UsizeList,
}

impl Kind {
    fn check(&self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::config(format!("{key}: cannot parse {value:?} as {what}"));
        match self {
            Kind::Usize => value.parse::<usize>().map(drop).map_err(|_| bad("an unsigned integer")),
            Kind::U64 => value.parse::<u64>().map(drop).map_err(|_| bad("an unsigned integer")),
            Kind::F64 => value.parse::<f64>().map(drop).map_err(|_| bad("a number")),
            Kind::Bool => value.parse::<bool>().map(drop).map_err(|_| bad("true/false")),
            Kind::Text => Ok(()),
            Kind::Choice(options) => {
                if options.contains(&value) {
                    Ok(())
                } else {
                    Err(Error::config(format!(
                        "{key}: {value:?} is not one of {}",
                        options.join("|")
                    )))
                }
            }
            Kind::UsizeList => {
                let mut items = value.split(',').map(str::trim);
                if items.clone().count() > 0 && items.all(|t| t.parse::<usize>().is_ok()) {
                    Ok(())
                } else {
                    Err(bad("a comma-separated integer list"))
                }
            }
        }
    }
}

struct KeySpec {
    key: &'static str,
    kind: Kind,
    default: String,
}

/// Every plain key the tool understands, with its default value. The
/// study and benchmark defaults mirror the library presets so a bare
/// `ablate` or `bench` run reproduces them.
fn registry() -> Vec<KeySpec> {
    let ablate = AblationSettings::benchmark(0);
    let bench = BenchSettings::default();
    let lengths = bench
        .lengths
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let spec = |key, kind, default: String| KeySpec { key, kind, default };
    vec![
        spec("seed", Kind::U64, "0".into()),
        spec("preset", Kind::Choice(&["toy", "full"]), "toy".into()),
        spec("gen.clips", Kind::Usize, "4".into()),
        spec("gen.t_len", Kind::Usize, "6".into()),
        spec("gen.lr_extent", Kind::Usize, "16".into()),
        spec("gen.scale", Kind::Usize, "4".into()),
        spec("gen.motion_scale", Kind::F64, "1".into()),
        spec("gen.flow_radius", Kind::Usize, "4".into()),
        spec("check.filter", Kind::Text, String::new()),
        spec("check.fault", Kind::Choice(&["none", "scan-sign"]), "none".into()),
        spec("train.dataset", Kind::Text, String::new()),
        spec("train.steps", Kind::Usize, "200".into()),
        spec("train.base_lr", Kind::F64, "0.001".into()),
        spec("train.holdout", Kind::Usize, "1".into()),
        spec("sr.checkpoint", Kind::Text, String::new()),
        spec("sr.dataset", Kind::Text, String::new()),
        spec("sr.clip", Kind::Text, String::new()),
        spec("ablate.steps", Kind::Usize, ablate.steps.to_string()),
        spec("ablate.t_len", Kind::Usize, ablate.t_len.to_string()),
        spec("ablate.lr_extent", Kind::Usize, ablate.lr_extent.to_string()),
        spec("ablate.train_clips", Kind::Usize, ablate.train_clips.to_string()),
        spec("ablate.eval_clips", Kind::Usize, ablate.eval_clips.to_string()),
        spec("ablate.gsm_blocks", Kind::Usize, ablate.gsm_blocks.to_string()),
        spec("ablate.zero_motion", Kind::Bool, "false".into()),
        spec("ablate.min_gap", Kind::F64, "0.2".into()),
        spec("bench.lengths", Kind::UsizeList, lengths),
        spec("bench.d_model", Kind::Usize, bench.d_model.to_string()),
        spec("bench.d_state", Kind::Usize, bench.d_state.to_string()),
        spec("bench.heads", Kind::Usize, bench.heads.to_string()),
        spec(
            "bench.target_sample_secs",
            Kind::F64,
            bench.target_sample_secs.to_string(),
        ),
    ]
}

/// Resolved run configuration: the registry defaults overlaid with file
/// and command-line values, plus ordered `model.*` overrides.
#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
    model: Vec<(String, String)>,
}

impl Default for Settings {
    fn default() -> Self {
        Self::new()
    }
}

impl Settings {
    pub fn new() -> Self {
        Self {
            values: registry().into_iter().map(|s| (s.key, s.default)).collect(),
            model: Vec::new(),
        }
    }

    /// Applies one `key=value` pair, validating both halves. Later values
    /// win over earlier ones.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(field) = key.strip_prefix("model.") {
            // Parse-check against a scratch config now; cross-field rules
            // run when the effective config is built.
            let mut scratch = ModelConfig::toy();
            scratch.set(field, value)?;
            self.model.push((field.to_string(), value.to_string()));
            return Ok(());
        }
        let spec = registry()
            .into_iter()
            .find(|s| s.key == key)
            .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
        spec.kind.check(key, value)?;
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    /// Loads a flat key=value file. Blank lines and lines starting with
    /// `#` are skipped; errors carry the file and line number.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let located = |msg: String| {
                Error::config(format!("{}:{}: {msg}", path.display(), i + 1))
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| located(format!("expected key=value, got {line:?}")))?;
            self.apply(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => located(msg),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("unregistered config key {key}"))
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated on entry")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated on entry")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated on entry")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key).parse().expect("validated on entry")
    }

    pub fn usize_list(&self, key: &str) -> Vec<usize> {
        self.get(key)
            .split(',')
            .map(|t| t.trim().parse().expect("validated on entry"))
            .collect()
    }

    /// The effective model configuration: the preset overlaid with every
    /// `model.*` override in application order.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(self.get("preset"))?;
        for (field, value) in &self.model {
            cfg.set(field, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The full resolved configuration, one sorted key per line, ready to
    /// feed back through `--config`.
    pub fn snapshot(&self, command: &str) -> Result<String> {
        let mut lines: Vec<String> = self
            .values
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        for (field, value) in self.model_config()?.entries() {
            lines.push(format!("model.{field}={value}"));
        }
        lines.sort();
        let mut s = format!("# resolved configuration ({command} run)\n");
        for line in &lines {
            s.push_str(line);
            s.push('\n');
        }
        Ok(s)
    }
}
