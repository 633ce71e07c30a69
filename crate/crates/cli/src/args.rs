use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "gem2",
    version,
    about = "Many-body axial attention for molecular property prediction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Axial,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Loss {
    L1,
    BinaryCrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Label {
    AngleMix,
    BondLength,
    Binary,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Featurize a JSON-lines molecule file into a cache directory.
    Featurize {
        input: PathBuf,
        out_dir: PathBuf,
        /// Report malformed lines and continue instead of aborting.
        #[arg(long)]
        skip_bad: bool,
        /// Featurizer settings (JSON); defaults otherwise.
        #[arg(long)]
        featurizer: Option<PathBuf>,
    },
    /// Train from a run configuration file.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on a JSON-lines dataset.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Also report MAE per molecular-diameter group.
        #[arg(long)]
        group_topo: bool,
        /// Additionally evaluate with attention limited to atoms at most this many bonds apart.
        #[arg(long)]
        long_range_level: Option<u32>,
        /// Run configuration the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Metric to report; taken from --config when given.
        #[arg(long, value_enum)]
        loss: Option<Loss>,
    },
    /// Time axial against full attention and print CSV.
    Bench {
        #[arg(long, value_delimiter = ',', required = true)]
        orders: Vec<u32>,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<u64>,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 7)]
        repetitions: usize,
    },
    /// Print the attention weights of one query m-body as JSON.
    InspectAttention {
        checkpoint: PathBuf,
        molecule: PathBuf,
        /// Comma-separated atom indices of the query (0-based).
        #[arg(long, value_delimiter = ',', required = true)]
        query: Vec<usize>,
        /// Block index (0-based).
        #[arg(long, default_value_t = 0)]
        block: usize,
        /// Attended axis (1-based).
        #[arg(long, default_value_t = 1)]
        axis: usize,
        /// Molecule id when the file holds several records.
        #[arg(long)]
        id: Option<String>,
    },
    /// Write a synthetic dataset with closed-form labels as JSON lines.
    Synth {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        min_atoms: usize,
        #[arg(long, default_value_t = 8)]
        max_atoms: usize,
        #[arg(long, value_enum, default_value_t = Label::AngleMix)]
        label: Label,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}
