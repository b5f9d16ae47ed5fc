use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mmnet::data::{Split, SynthConfig, Target};
use mmnet::network::NetworkConfig;
use mmnet::train::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "mmnet", version, about = "Sparse voxel network for forest biomass and volume regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with point files and a split manifest.
    Synth {
        #[command(flatten)]
        flags: Flags,
        /// Number of plots.
        #[arg(long)]
        plots: Option<usize>,
    },
    /// Train one target model on the train split.
    Train {
        #[command(flatten)]
        flags: Flags,
    },
    /// Evaluate a trained run directory on one split.
    Eval {
        #[command(flatten)]
        flags: Flags,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        flags: Flags,
    },
    /// Print the block layout and parameter count.
    Audit {
        #[command(flatten)]
        flags: Flags,
    },
    /// Time the selective scan and sparse convolution.
    Bench {
        #[command(flatten)]
        flags: Flags,
    },
    /// Train MMB-only, FFM-only and full variants over several seeds.
    Ablate {
        #[command(flatten)]
        flags: Flags,
        /// Runs per variant.
        #[arg(long)]
        runs: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Audit { .. } => "audit",
            Command::Bench { .. } => "bench",
            Command::Ablate { .. } => "ablate",
        }
    }

    pub fn flags(&self) -> &Flags {
        match self {
            Command::Synth { flags, .. }
            | Command::Train { flags }
            | Command::Eval { flags, .. }
            | Command::Gradcheck { flags }
            | Command::Audit { flags }
            | Command::Bench { flags }
            | Command::Ablate { flags, .. } => flags,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<Target>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Voxel edge length in meters.
    #[arg(long)]
    pub voxel: Option<f64>,
    /// Worker threads for voxelization; 1 keeps every output bit-identical.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Run directory; every artifact is written inside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics report to diff against.
    #[arg(long = "reference-report")]
    pub reference_report: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(mmnet::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use mmnet::Error as E;
        match self {
            CliError::Usage(_) => crate::EXIT_USAGE,
            CliError::Core(E::Config(_) | E::Parse { .. } | E::Validation(_) | E::Ingestion(_) | E::Io { .. }) => {
                crate::EXIT_USAGE
            }
            CliError::Core(_) => crate::EXIT_VERIFY,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<mmnet::Error> for CliError {
    fn from(e: mmnet::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub cosine: bool,
    pub frozen_norm_fraction: f64,
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            clip_norm: t.clip_norm,
            cosine: t.cosine,
            frozen_norm_fraction: t.frozen_norm_fraction,
            augment: t.augment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub min_pow: u32,
    pub max_pow: u32,
    pub channels: usize,
    pub state_dim: usize,
    pub reps: usize,
    pub conv_voxels: Vec<usize>,
    pub conv_channels: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            min_pow: 10,
            max_pow: 14,
            channels: 16,
            state_dim: 16,
            reps: 5,
            conv_voxels: vec![1000, 4000, 16000],
            conv_channels: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub runs: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { runs: 3 }
    }
}

/// Everything a command needs, after merging the config file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub target: Target,
    pub threads: usize,
    /// Train, validation and test fractions used by `synth`.
    pub splits: [f64; 3],
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub synth: SynthConfig,
    pub bench: BenchSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            manifest: None,
            out: None,
            target: Target::Agb,
            threads: 1,
            splits: [0.7, 0.15, 0.15],
            network: NetworkConfig::default(),
            train: TrainSection::default(),
            synth: SynthConfig::default(),
            bench: BenchSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| io_err(p, e))
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("{}: {e}", origin.display())))
    }

    /// Loads the optional config file, applies flag overrides, and resolves
    /// every path to an absolute one. Paths inside the file are relative to
    /// the file's directory.
    pub fn resolve(flags: &Flags) -> CliResult<Self> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                let mut c = Self::parse(&text, path)?;
                let base = absolute(path)?.parent().map(Path::to_path_buf).unwrap_or_default();
                c.manifest = c.manifest.map(|m| base.join(m));
                c.out = c.out.map(|o| base.join(o));
                c
            }
            None => Self::default(),
        };
        if let Some(v) = &flags.manifest {
            cfg.manifest = Some(v.clone());
        }
        if let Some(v) = &flags.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = flags.target {
            cfg.target = v;
        }
        if let Some(v) = flags.seed {
            cfg.seed = Some(v);
        }
        if let Some(v) = flags.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = flags.batch {
            cfg.train.batch_size = v;
        }
        if let Some(v) = flags.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = flags.voxel {
            cfg.network.voxel_size = v;
        }
        if let Some(v) = flags.threads {
            cfg.threads = v;
        }
        if cfg.threads == 0 {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        cfg.manifest = cfg.manifest.as_deref().map(absolute).transpose()?;
        cfg.out = cfg.out.as_deref().map(absolute).transpose()?;
        Ok(cfg)
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::Usage("a seed is required: pass --seed or set seed in the config".into()))
    }

    pub fn manifest(&self) -> CliResult<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| CliError::Usage("a manifest is required: pass --manifest or set manifest in the config".into()))
    }

    /// The run directory, `runs/<command>-seed<seed>` unless given.
    pub fn out_dir(&self, command: &str) -> CliResult<PathBuf> {
        match &self.out {
            Some(o) => Ok(o.clone()),
            None => absolute(&PathBuf::from(format!("runs/{command}-seed{}", self.seed()?))),
        }
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: self.seed()?,
            target: self.target,
            clip_norm: t.clip_norm,
            cosine: t.cosine,
            frozen_norm_fraction: t.frozen_norm_fraction,
            augment: t.augment,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("seed = 1\nbogus = 2\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let err = RunConfig::parse("[network]\nwidth = 3\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("width"));
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\nmanifest = \"data/m.csv\"\n[train]\nepochs = 7\nlr = 0.5\n").unwrap();
        let flags = Flags {
            config: Some(path),
            epochs: Some(2),
            ..Flags::default()
        };
        let cfg = RunConfig::resolve(&flags).unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.manifest.unwrap(), dir.path().join("data/m.csv"));
    }

    #[test]
    fn round_trips_through_text() {
        let cfg = RunConfig {
            seed: Some(4),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&cfg.to_text(), Path::new("x")).unwrap(), cfg);
    }
}
