use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use hpcc_core::launchsim::{Layout, StartMode};

#[derive(Debug, Parser)]
#[command(
    name = "hpcctl",
    version,
    about = "Container launch tooling for HPC clusters"
)]
pub struct Cli {
    /// Site configuration (TOML); defaults apply to keys it leaves out.
    #[arg(long, global = true, env = "HPCCTL_SITE")]
    pub site: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse, expand and validate an environment definition.
    Validate(ValidateArgs),
    /// Print the engine invocation for an environment definition, one token
    /// per line.
    Render(RenderArgs),
    /// Manage the shared image store.
    Images(ImagesArgs),
    /// Run a command in a container described by an environment definition.
    Run(RunArgs),
    /// Simulate a multi-node job step.
    SimLaunch(SimLaunchArgs),
    /// Run a pod manifest on one simulated node.
    KubeRun(KubeRunArgs),
    /// Simulated benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Debug, Args)]
pub struct EnvArgs {
    /// Extra `NAME=VALUE` for variable expansion (repeatable).
    #[arg(long = "env", value_name = "NAME=VALUE")]
    pub env: Vec<String>,
    /// Expand against `--env` only, ignoring the process environment.
    #[arg(long)]
    pub clean_env: bool,
}

#[derive(Debug, Args)]
pub struct StepArgs {
    #[arg(long, default_value_t = 0)]
    pub job: u64,
    #[arg(long, default_value_t = 0)]
    pub step: u64,
    /// Defaults to `$USER` from the expansion environment.
    #[arg(long)]
    pub user: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub uid: u32,
    #[arg(long, default_value_t = 1000)]
    pub gid: u32,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub edf: PathBuf,
    #[command(flatten)]
    pub env: EnvArgs,
    /// Print the report as one JSON record.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub edf: PathBuf,
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub step: StepArgs,
    #[arg(long)]
    pub detach: bool,
    /// One shell-quoted line instead of one token per line.
    #[arg(long)]
    pub shell: bool,
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    /// Shared image store directory.
    #[arg(long, env = "HPCCTL_STORE")]
    pub store: PathBuf,
    /// Local staging directory for imported images; defaults to
    /// `<store>.staging`.
    #[arg(long, env = "HPCCTL_STAGING")]
    pub staging: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImagesArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    #[command(subcommand)]
    pub command: ImagesCommand,
}

#[derive(Debug, Subcommand)]
pub enum ImagesCommand {
    /// Verify an image directory and stage it locally.
    Import { layout: PathBuf },
    /// Flatten a staged image into the shared store.
    Migrate {
        /// Reference of a staged image.
        #[arg(required_unless_present = "layout")]
        reference: Option<String>,
        /// Import this image directory first.
        #[arg(long, conflicts_with = "reference")]
        layout: Option<PathBuf>,
        /// Creation time in seconds since the epoch.
        #[arg(long, env = "SOURCE_DATE_EPOCH")]
        created_at: Option<u64>,
    },
    /// List stored images: reference, digest, created-at.
    List {
        #[arg(long)]
        json: bool,
    },
    /// Remove an image from the shared store.
    Remove { reference: String },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub edf: PathBuf,
    #[command(flatten)]
    pub store: StoreArgs,
    /// Hook configuration directory (`host.toml`, `pce.toml`, `cdi/`).
    #[arg(long, env = "HPCCTL_HOOKS")]
    pub hooks: Option<PathBuf>,
    /// Import and migrate this image directory when the image is missing.
    #[arg(long)]
    pub import: Option<PathBuf>,
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub step: StepArgs,
    /// Write a JSON report (exit code, upper-layer paths, hook actions).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Command to run instead of the image entrypoint.
    #[arg(last = true)]
    pub command: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SimLaunchArgs {
    pub edf: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub nodes: u32,
    #[arg(long, default_value_t = 4)]
    pub ranks_per_node: u32,
    #[arg(long, default_value = "warm")]
    pub mode: StartMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `trace.jsonl`, `report.txt` and `report.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Injected fault, e.g. `acquire:migrate` (repeatable).
    #[arg(long = "fault")]
    pub faults: Vec<String>,
    /// Image directory published to the simulated registry; a generated
    /// image is used otherwise.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Submission environment overrides `NAME=VALUE`.
    #[arg(long = "env", value_name = "NAME=VALUE")]
    pub env: Vec<String>,
}

#[derive(Debug, Args)]
pub struct KubeRunArgs {
    pub manifest: PathBuf,
    /// Shared store directory; an in-memory store is used otherwise.
    #[arg(long, env = "HPCCTL_STORE")]
    pub store: Option<PathBuf>,
    /// Directory of image directories migrated on demand.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long, env = "HPCCTL_HOOKS")]
    pub hooks: Option<PathBuf>,
    /// Resolve hostPath volumes below this directory.
    #[arg(long)]
    pub host_root: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `trace.jsonl` and `result.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "alice")]
    pub user: String,
    #[arg(long, default_value_t = 1000)]
    pub uid: u32,
    #[arg(long, default_value_t = 1000)]
    pub gid: u32,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Warm-start decomposition over repeated steps.
    Startup(BenchStartupArgs),
    /// Shared-store metadata load of a Python-style import storm.
    Pynamic(BenchPynamicArgs),
}

#[derive(Debug, Args)]
pub struct BenchStartupArgs {
    #[arg(long, default_value_t = 4)]
    pub nodes: u32,
    #[arg(long, default_value_t = 4)]
    pub ranks_per_node: u32,
    #[arg(long, default_value_t = 10)]
    pub reps: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Environment definition; a built-in one is used otherwise.
    #[arg(long)]
    pub edf: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
    /// Directory for per-repetition traces and the decomposition.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchPynamicArgs {
    #[arg(long, default_value_t = 64)]
    pub nodes: u32,
    #[arg(long, default_value_t = 280)]
    pub modules: u32,
    #[arg(long, default_value_t = 215)]
    pub libraries: u32,
    #[arg(long, default_value_t = 1850)]
    pub functions: u32,
    /// `squashed`, `plain`, or both when omitted.
    #[arg(long)]
    pub layout: Option<Layout>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}
