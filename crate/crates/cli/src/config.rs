//! Run configuration. Values resolve as defaults < TOML file < flags; the
//! resolved result is written next to the outputs and can be fed back with
//! `--config` to replay the run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    pub command: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub sampler: SamplerSettings,
    pub generate: GenerateSettings,
    pub infill: InfillSettings,
    pub pipeline: PipelineSettings,
    pub ppl: PplSettings,
    pub synth: SynthSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            vocab: None,
            checkpoint: None,
            data: None,
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            sampler: SamplerSettings::default(),
            generate: GenerateSettings::default(),
            infill: InfillSettings::default(),
            pipeline: PipelineSettings::default(),
            ppl: PplSettings::default(),
            synth: SynthSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub d_ff: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: 32,
            d_ff: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// stage kinds in order, `FS` or `RO`
    pub stages: Vec<String>,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// per-stage default (FS 8, RO 4) when absent
    pub epochs: Option<usize>,
    /// `fixed-count` or `bernoulli`
    pub mask_sampler: String,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            stages: vec!["FS".into()],
            peak_lr: 3e-4,
            warmup_steps: 50,
            batch_size: 32,
            epochs: None,
            mask_sampler: "fixed-count".into(),
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSettings {
    pub steps: usize,
    pub gen_length: usize,
    pub temperature: f64,
    /// `confidence` or `random`
    pub strategy: String,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            steps: 128,
            gen_length: 128,
            temperature: 0.8,
            strategy: "confidence".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSettings {
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfillSettings {
    /// template text, `<mask*k>` marks positions to fill
    pub template: Option<String>,
    /// clean text appended after the template as conditioning
    pub response: Option<String>,
    /// `name=value` slot assignments
    pub slots: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    pub template: Option<PathBuf>,
    /// few-shot examples, JSON lines `{"slots": {...}, "response": "..."}`
    pub examples: Option<PathBuf>,
    /// optional test inputs in the same format, answered with the selected prompt
    pub test: Option<PathBuf>,
    pub num_candidates: usize,
    /// `exact-match` or `absolute-error`
    pub scorer: String,
    pub scorer_range: f64,
    pub infill_temperature: f64,
    pub infill_steps: usize,
    pub validation_temperature: f64,
    pub validation_steps: usize,
    pub window: usize,
    pub stride: usize,
    pub mask_size: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            template: None,
            examples: None,
            test: None,
            num_candidates: 8,
            scorer: "exact-match".into(),
            scorer_range: 4.0,
            infill_temperature: 0.8,
            infill_steps: 128,
            validation_temperature: 0.0,
            validation_steps: 128,
            window: 8,
            stride: 4,
            mask_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PplSettings {
    pub mc_samples: usize,
    pub sigma_max: f64,
    /// `full` or `response`
    pub region: String,
    /// `mask-count` or `time-sampled`
    pub estimator: String,
    pub t_min: f64,
}

impl Default for PplSettings {
    fn default() -> Self {
        Self {
            mc_samples: 1000,
            sigma_max: 10.0,
            region: "full".into(),
            estimator: "mask-count".into(),
            t_min: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    /// `template-recovery` or `arithmetic`
    pub task: String,
    pub size: usize,
    pub heldout_size: usize,
    /// few-shot examples written for the pipeline
    pub fewshot: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            task: "template-recovery".into(),
            size: 20_000,
            heldout_size: 1000,
            fewshot: 4,
        }
    }
}

/// Flag values keyed by their dotted config path.
#[derive(Debug, Default)]
pub struct Overrides(Vec<(&'static str, Value)>);

impl Overrides {
    pub fn put<T: Into<Value>>(&mut self, path: &'static str, v: Option<T>) {
        if let Some(v) = v {
            self.0.push((path, v.into()));
        }
    }

    pub fn put_usize(&mut self, path: &'static str, v: Option<usize>) {
        self.put(path, v.map(|n| n as i64));
    }

    pub fn put_u64(&mut self, path: &'static str, v: Option<u64>) {
        self.put(path, v.map(|n| n as i64));
    }

    pub fn put_path(&mut self, path: &'static str, v: Option<&PathBuf>) {
        self.put(path, v.map(|p| p.to_string_lossy().into_owned()));
    }

    pub fn put_list(&mut self, path: &'static str, v: &[String]) {
        if !v.is_empty() {
            self.0.push((path, Value::Array(v.iter().cloned().map(Value::String).collect())));
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, path: &str, value: Value) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("config sections are tables");
    }
    cur.insert(last.to_string(), value);
}

/// Defaults, then the file (if any), then flags.
pub fn resolve(command: &str, file: Option<&Path>, overrides: Overrides) -> Result<Settings> {
    let mut table = Table::try_from(Settings::default()).context("serializing defaults")?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let file_table: Table = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        if let Some(cmd) = file_table.get("command").and_then(Value::as_str) {
            if !cmd.is_empty() && cmd != command {
                bail!("config {} was written for `{cmd}`, not `{command}`", path.display());
            }
        }
        merge(&mut table, file_table);
    }
    for (path, value) in overrides.0 {
        set_path(&mut table, path, value);
    }
    table.insert("command".into(), Value::String(command.into()));
    let settings: Settings = Value::Table(table).try_into().context("invalid configuration")?;
    Ok(settings)
}

impl Settings {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 5\n[train]\npeak_lr = 0.01\nbatch_size = 4\n").unwrap();
        let mut o = Overrides::default();
        o.put_usize("train.batch_size", Some(8));
        let s = resolve("train", Some(&path), o).unwrap();
        assert_eq!(s.seed, 5);
        assert_eq!(s.train.peak_lr, 0.01);
        assert_eq!(s.train.batch_size, 8);
        assert_eq!(s.train.warmup_steps, 50);
        assert_eq!(s.command, "train");
    }

    #[test]
    fn snapshot_round_trips() {
        let mut o = Overrides::default();
        o.put_path("vocab", Some(&PathBuf::from("v.txt")));
        o.put_list("train.stages", &["FS".into(), "RO".into()]);
        let s = resolve("train", None, o).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.toml");
        std::fs::write(&path, s.to_toml().unwrap()).unwrap();
        assert_eq!(resolve("train", Some(&path), Overrides::default()).unwrap(), s);
        assert!(resolve("ppl", Some(&path), Overrides::default()).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nlearning_rate = 1.0\n").unwrap();
        assert!(resolve("train", Some(&path), Overrides::default()).is_err());
    }
}
