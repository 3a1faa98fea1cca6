//! TOML experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use quarc_core::data::{generate_synthetic, load_csv, load_idx, split_and_batch, Dataset, SplitData, SyntheticSpec};
use quarc_core::model::{ConvBlock, ModelDef};
use quarc_core::train::{PretrainConfig, RunConfig};
use quarc_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Full-precision checkpoint used by every command except `pretrain`.
    pub fp_checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub run: RunConfig,
    pub ablate: AblateConfig,
    pub correlate: CorrelateConfig,
    pub bench: BenchConfig,
    pub layer_kl: LayerKlConfig,
    pub scores: ScoresConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    pub eval_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SyntheticSpec {
                dims: 16,
                ..SyntheticSpec::blobs(4, 1000, 1.2, 7)
            }),
            eval_fraction: 0.2,
            split_seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Header `label,f0,f1,...`.
    Csv {
        path: PathBuf,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths of the MLP, or of nothing when `conv` is set.
    pub hidden: Vec<usize>,
    /// Convolution blocks; requires image-shaped data.
    pub conv: Option<Vec<ConvBlock>>,
    pub taps: Option<Vec<String>>,
    pub quantize_first_last: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            conv: None,
            taps: None,
            quantize_first_last: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Custom variants; the standard four are used when empty.
    pub runs: Vec<AblateRun>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            runs: vec![],
        }
    }
}

/// A named variant given as overrides on top of `[run]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateRun {
    pub name: String,
    #[serde(default)]
    pub overrides: toml::Table,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelateConfig {
    pub buckets: usize,
    pub fraction: f64,
    pub seeds: Vec<u64>,
    /// Model whose RES orders the samples; a fresh quantized clone when unset.
    pub quantized_checkpoint: Option<PathBuf>,
}

impl Default for CorrelateConfig {
    fn default() -> Self {
        Self {
            buckets: 8,
            fraction: 0.05,
            seeds: (0..5).collect(),
            quantized_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub fractions: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.01, 0.05, 0.1],
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerKlConfig {
    /// Student checkpoints; KD-only and KD+CLC students are trained when empty.
    pub students: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoresConfig {
    pub student_checkpoint: Option<PathBuf>,
    pub epoch: usize,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Config = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data.source {
            DataSource::Synthetic(_) => {}
            DataSource::Csv { path } => fix(path),
            DataSource::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
        }
        for p in [
            &mut self.fp_checkpoint,
            &mut self.correlate.quantized_checkpoint,
            &mut self.scores.student_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.layer_kl.students.iter_mut().for_each(fix);
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.run.seed = seed;
        self.pretrain.seed = seed;
        self.ablate.seeds = vec![seed];
        self.correlate.seeds = vec![seed];
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain batch size must be at least 1".into()));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds is empty".into()));
        }
        let mut names: Vec<&str> = self.ablate.runs.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("ablate run names must be unique".into()));
        }
        if let Some(bad) = self.bench.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("bench fraction {bad} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data.source {
            DataSource::Synthetic(spec) => generate_synthetic(spec),
            DataSource::Csv { path } => load_csv(path),
            DataSource::Idx { images, labels } => load_idx(images, labels),
        }
    }

    pub fn split(&self) -> Result<SplitData> {
        let mut ds = self.load_dataset()?;
        if self.model.conv.is_none() && ds.features.shape().len() > 2 {
            let (n, d) = (ds.len(), ds.sample_size());
            ds.features = ds.features.clone().reshape(vec![n, d])?;
        }
        let batch = self.run.batch_size.max(1);
        Ok(split_and_batch(&ds, self.data.eval_fraction, batch, self.data.split_seed)?.0)
    }

    /// Model definition sized to the dataset.
    pub fn model_def(&self, data: &Dataset) -> Result<ModelDef> {
        let shape = data.features.shape();
        let mut def = match (&self.model.conv, shape.len()) {
            (Some(blocks), 4) => ModelDef::cnn(shape[1], shape[2], shape[3], blocks, data.classes),
            (Some(_), _) => return Err(Error::Config("conv blocks need image data [N, C, H, W]".into())),
            (None, _) => ModelDef::mlp(data.sample_size(), &self.model.hidden, data.classes),
        };
        if let Some(taps) = &self.model.taps {
            def.taps = taps.clone();
        }
        def.quantize_first_last = self.model.quantize_first_last;
        def.validate()?;
        Ok(def)
    }

    /// `[run]` with one variant's overrides merged in.
    pub fn run_variant(&self, overrides: &toml::Table) -> Result<RunConfig> {
        let mut base = toml::Table::try_from(&self.run).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, overrides);
        let cfg: RunConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: Config = toml::from_str("").unwrap();
        assert_eq!(cfg.run, RunConfig::default());
        assert!(matches!(cfg.data.source, DataSource::Synthetic(_)));
    }

    #[test]
    fn sections_parse() {
        let cfg: Config = toml::from_str(
            r#"
            fp_checkpoint = "fp.json"
            [data]
            source = "csv"
            path = "d.csv"
            eval_fraction = 0.25
            [run]
            epochs = 12
            interval = 4
            optimizer = { kind = "adam", lr = 0.001 }
            [[ablate.runs]]
            name = "kd-only"
            overrides = { clc = false }
            "#,
        )
        .unwrap();
        assert!(matches!(cfg.data.source, DataSource::Csv { .. }));
        assert_eq!(cfg.data.eval_fraction, 0.25);
        assert_eq!(cfg.run.epochs, 12);
        let v = cfg.run_variant(&cfg.ablate.runs[0].overrides).unwrap();
        assert!(!v.clc);
        assert_eq!(v.epochs, 12);
    }

    #[test]
    fn nested_overrides_merge() {
        let cfg = Config::default();
        let over: toml::Table = toml::from_str("optimizer = { lr = 0.5 }\nfraction = 0.2").unwrap();
        let v = cfg.run_variant(&over).unwrap();
        assert_eq!(v.optimizer.lr(), 0.5);
        assert_eq!(v.fraction, 0.2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<Config>("[model]\nwidth = 3").is_err());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let mut cfg: Config = toml::from_str("fp_checkpoint = \"a/fp.json\"").unwrap();
        cfg.resolve_paths(Path::new("/x"));
        assert_eq!(cfg.fp_checkpoint.unwrap(), Path::new("/x/a/fp.json"));
    }

    #[test]
    fn seed_override_reaches_every_seeded_section() {
        let mut cfg = Config::default();
        cfg.apply_seed(9);
        assert_eq!((cfg.run.seed, cfg.pretrain.seed), (9, 9));
        assert_eq!(cfg.ablate.seeds, [9]);
    }
}
