//! Run configuration files.
//!
//! ```toml
//! name = "cifar-ge"
//! seed = 0
//! output_dir = "runs"          # run directory is <output_dir>/<name>
//! placement = "theta-minus:global:all"
//!
//! [arch]
//! family = "cifar-resnet-110"
//!
//! [data]
//! variant = "cifar10"
//! dir = "data/cifar-10-batches-bin"   # or: synthetic = { train = 1000, test = 500 }
//!
//! [train]
//! epochs = 2
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use gather_excite::data::{self, Dataset, NormStats, Split, Variant};
use gather_excite::train::{Experiment, TrainConfig};
use gather_excite::zoo::{ArchSpec, GePlacement};
use gather_excite::{Error, Result};
use serde::{Deserialize, Serialize};

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_variant() -> Variant {
    Variant::Cifar10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Synthetic {
    pub train: usize,
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// Directory holding the CIFAR binary batches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Generated class-pattern images instead of CIFAR.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<Synthetic>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<GePlacement>,
    pub arch: ArchSpec,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Train and test splits with the statistics used to normalise both.
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub stats: NormStats,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Config(format!("invalid run name `{}`", self.name)));
        }
        self.arch.plan()?;
        if let Some(p) = &self.placement {
            p.validate(&self.arch)?;
        }
        if self.arch.classes != self.data.variant.classes() {
            return Err(Error::Config(format!(
                "arch has {} classes but {:?} has {}",
                self.arch.classes,
                self.data.variant,
                self.data.variant.classes()
            )));
        }
        if self.arch.input != [3, data::SIDE, data::SIDE] {
            return Err(Error::Config(format!(
                "arch input {:?} does not match 3x{}x{} images",
                self.arch.input,
                data::SIDE,
                data::SIDE
            )));
        }
        match (&self.data.dir, &self.data.synthetic) {
            (Some(_), None) => {}
            (None, Some(s)) if s.train >= 2 && s.test >= 1 => {}
            (None, Some(_)) => return Err(Error::Config("synthetic data needs train >= 2 and test >= 1".into())),
            _ => return Err(Error::Config("data needs exactly one of `dir` and `synthetic`".into())),
        }
        self.train.validate()
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            arch: self.arch.clone(),
            placement: self.placement.clone(),
            seed: self.seed,
            train: self.train.clone(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain data serialises")
    }

    /// Loads both splits, applying the configured subsets.
    pub fn load_data(&self) -> Result<Splits> {
        let d = &self.data;
        let (train, test, stats) = match (&d.dir, &d.synthetic) {
            (Some(dir), _) => {
                let train = data::load_cifar(dir, d.variant, Split::Train)?;
                let test = data::load_cifar(dir, d.variant, Split::Test)?;
                let stats = NormStats::for_train(dir, &train);
                (train, test, stats)
            }
            (None, Some(s)) => {
                let train = data::synthetic(d.variant, Split::Train, s.train, s.seed);
                let test = data::synthetic(d.variant, Split::Test, s.test, s.seed);
                let stats = NormStats::compute(&train);
                (train, test, stats)
            }
            (None, None) => unreachable!("validated"),
        };
        let cut = |ds: Dataset, n: Option<usize>| match n {
            Some(n) if n < ds.len() => ds.take(n),
            _ => ds,
        };
        Ok(Splits {
            train: cut(train, self.train.train_subset),
            test: cut(test, self.train.test_subset),
            stats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"
        name = "smoke"
        seed = 3
        placement = "theta-minus:global:all"
        [arch]
        family = "cifar-resnet-20"
        [data]
        synthetic = { train = 64, test = 16 }
        [train]
        epochs = 2
    "#;

    #[test]
    fn parses_and_round_trips() {
        let c = RunConfig::parse(SMOKE).unwrap();
        assert_eq!(c.run_dir(), PathBuf::from("runs/smoke"));
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.experiment().seed, 3);
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_configs() {
        for (bad, needle) in [
            (SMOKE.replace("epochs = 2", "epochs = 2\nepoch = 3"), "unknown field"),
            (SMOKE.replace("cifar-resnet-20", "cifar-resnet-21"), "depth"),
            (
                SMOKE.replace("synthetic = { train = 64, test = 16 }", ""),
                "exactly one",
            ),
            (SMOKE.replace("name = \"smoke\"", "name = \"../x\""), "run name"),
            (SMOKE.replace("theta-minus:global:all", "se:e2:all"), "global"),
            (SMOKE.replace("[data]", "[data]\nvariant = \"cifar100\""), "classes"),
        ] {
            let e = RunConfig::parse(&bad).unwrap_err();
            assert!(e.is_config(), "{e}");
            assert!(e.to_string().contains(needle), "{e}");
        }
    }

    #[test]
    fn shipped_configs_parse() {
        for text in [
            include_str!("../../../configs/smoke.toml"),
            include_str!("../../../configs/cifar10-resnet110.toml"),
            include_str!("../../../configs/cifar10-resnet110-ge.toml"),
            include_str!("../../../configs/cifar100-wrn-16-8-ge.toml"),
        ] {
            let c = RunConfig::parse(text).unwrap();
            assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn subsets_apply() {
        let mut c = RunConfig::parse(SMOKE).unwrap();
        c.train.train_subset = Some(10);
        let s = c.load_data().unwrap();
        assert_eq!((s.train.len(), s.test.len()), (10, 16));
    }
}
