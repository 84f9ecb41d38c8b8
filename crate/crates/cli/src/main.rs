//! `refspawn`: operate a store directory from the command line.
//!
//! Output is canonical JSON on stdout unless `--human` is given. Domain errors
//! print their code on stderr and exit 1; usage errors exit 2.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use refspawn::{DefinitionPin, ScopeLevel};

#[derive(Debug, Parser)]
#[command(name = "refspawn", version, about = "Reference-based instance store")]
pub struct Cli {
    /// Store directory holding the journal and snapshots.
    #[arg(long, global = true, env = "AETHON_STORE", default_value = ".refspawn")]
    pub store: PathBuf,

    /// Indented, human-oriented output instead of canonical JSON.
    #[arg(long, global = true)]
    pub human: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Definitions: register, publish, show.
    #[command(subcommand)]
    Def(DefCommand),
    /// Shared memory layers.
    #[command(subcommand)]
    Layer(LayerCommand),
    /// Instance references and their overlays.
    #[command(subcommand)]
    Instance(InstanceCommand),
    /// Execution-time resolution.
    #[command(subcommand)]
    Resolve(ResolveCommand),
    /// Parent chains and divergence.
    #[command(subcommand)]
    Lineage(LineageCommand),
    /// Snapshots and replay.
    #[command(subcommand)]
    Store(StoreCommand),
    /// Reference versus materialization benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Debug, Args)]
pub struct DefinitionArgs {
    #[arg(long)]
    pub instructions: String,
    /// Allowed capability; repeatable.
    #[arg(long = "cap")]
    pub caps: Vec<String>,
    /// Interface contract as NAME=DESCRIPTION; repeatable.
    #[arg(long = "contract", value_parser = parse_pair)]
    pub contracts: Vec<(String, String)>,
    /// Metadata as KEY=VALUE; repeatable.
    #[arg(long = "meta", value_parser = parse_pair)]
    pub metadata: Vec<(String, String)>,
}

#[derive(Debug, Subcommand)]
pub enum DefCommand {
    Register(DefinitionArgs),
    Publish {
        #[arg(long = "def")]
        definition: String,
        #[command(flatten)]
        content: DefinitionArgs,
    },
    /// Show `ID@VERSION`, or the latest version of `ID`.
    Show {
        #[arg(long = "def")]
        definition: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum LayerCommand {
    Create {
        #[arg(long)]
        scope: ScopeLevel,
        /// Initial entry as KEY=VALUE; VALUE is JSON or bare text. Repeatable.
        #[arg(long = "entry", value_parser = parse_pair)]
        entries: Vec<(String, String)>,
    },
    Write {
        #[arg(long)]
        layer: String,
        #[arg(long)]
        key: String,
        #[arg(long, required_unless_present = "delete")]
        value: Option<String>,
        #[arg(long, conflicts_with = "value")]
        delete: bool,
    },
    Show {
        #[arg(long)]
        layer: String,
    },
}

#[derive(Debug, Args)]
pub struct ScopeArgs {
    /// Layer to bind; repeatable, in binding order.
    #[arg(long = "layer")]
    pub layers: Vec<String>,
    /// Capability restriction; repeatable. Omitted means everything allowed
    /// by the definition or parent.
    #[arg(long = "cap")]
    pub caps: Vec<String>,
    /// Restrict to no capabilities at all.
    #[arg(long, conflicts_with = "caps")]
    pub no_caps: bool,
    /// Context binding as KEY=VALUE; repeatable.
    #[arg(long = "ctx", value_parser = parse_pair)]
    pub context: Vec<(String, String)>,
}

#[derive(Debug, Subcommand)]
pub enum InstanceCommand {
    Spawn {
        /// Definition pin, `ID@VERSION`.
        #[arg(long = "def")]
        pin: DefinitionPin,
        #[command(flatten)]
        scope: ScopeArgs,
    },
    Derive {
        #[arg(long)]
        parent: String,
        #[command(flatten)]
        scope: ScopeArgs,
    },
    Retire {
        #[arg(long)]
        instance: String,
    },
    /// Write or tombstone a key in the instance's own overlay.
    Write {
        #[arg(long)]
        instance: String,
        #[arg(long)]
        key: String,
        #[arg(long, required_unless_present = "delete")]
        value: Option<String>,
        #[arg(long, conflicts_with = "value")]
        delete: bool,
    },
    /// Fold retired single-child ancestors into the instance's overlay.
    Compact {
        #[arg(long)]
        instance: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ResolveCommand {
    Key {
        #[arg(long)]
        instance: String,
        #[arg(long)]
        key: String,
    },
    View {
        #[arg(long)]
        instance: String,
    },
    Flatten {
        #[arg(long)]
        instance: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum LineageCommand {
    Show {
        #[arg(long)]
        instance: String,
    },
    Diff {
        #[arg(long)]
        instance: String,
        #[arg(long)]
        ancestor: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum StoreCommand {
    /// Write a snapshot of the current state into the store directory.
    Snapshot,
    /// Replay this store's journal into a fresh directory.
    Replay {
        #[arg(long)]
        into: PathBuf,
        #[arg(long)]
        up_to: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct WorkloadArgs {
    #[arg(long, default_value_t = 1024)]
    pub d: u64,
    #[arg(long, default_value_t = 1000)]
    pub m: u64,
    #[arg(long, default_value_t = 16)]
    pub b: u64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Report file, one canonical JSON row per line.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Sweep {
    D,
    M,
    B,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    SpawnScaling {
        #[command(flatten)]
        workload: WorkloadArgs,
        /// Dimension to sweep; the others stay at their flag values.
        #[arg(long, value_enum, default_value = "m")]
        sweep: Sweep,
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000,100000")]
        values: Vec<u64>,
        #[arg(long, default_value_t = 1000)]
        repetitions: usize,
        #[arg(long, default_value_t = 15)]
        baseline_repetitions: usize,
    },
    MemoryDivergence {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long, default_value_t = 10_000)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        k: u64,
        /// Fan out on all cores; timings are then not comparable.
        #[arg(long)]
        parallel: bool,
    },
}

fn parse_pair(raw: &str) -> Result<(String, String), String> {
    raw.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {raw:?}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(output) => {
            if !output.is_empty() {
                println!("{output}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}: {e}", e.code());
            ExitCode::from(1)
        }
    }
}
