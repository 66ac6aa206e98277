use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "irloc",
    version,
    about = "Bag-of-words place recognition and relocalization for thermal imagery"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contrast-limited adaptive histogram equalization of a binary PGM.
    Clahe(ClaheArgs),
    /// Render a synthetic scenario: descriptor sets, matches, ground truth.
    Simgen(SimgenArgs),
    /// Train a vocabulary tree from matched frame pairs.
    VocabTrain(VocabTrainArgs),
    /// Build an image database from a directory of descriptor sets.
    DbBuild(DbBuildArgs),
    /// Score one descriptor set against a database.
    DbQuery(DbQueryArgs),
    /// Loop-closure detection over a sequence of frames.
    Loopdetect(LoopdetectArgs),
    /// Build a keyframe map from one pass of a simulated scenario.
    MapBuild(MapBuildArgs),
    /// Relocalize query frames against a map.
    Reloc(RelocArgs),
    /// Place recognition recall at 100% precision.
    EvalRecall(EvalRecallArgs),
    /// Correct-match counts of a static camera over the day.
    Timelapse(TimelapseArgs),
    /// Micro-benchmarks.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Float,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Best,
    Islands,
}

#[derive(Debug, Args)]
pub struct ClaheArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tile grid as COLSxROWS.
    #[arg(long, default_value = "8x8")]
    pub tiles: String,
    #[arg(long, default_value_t = 3.0)]
    pub clip: f64,
}

#[derive(Debug, Args)]
pub struct SimgenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Scenario manifest; without it the default day/night loop is used.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Kind::Float)]
    pub kind: Kind,
    /// Override the number of frames of every pass.
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VocabTrainArgs {
    /// Directories of `.dsc` frames with `A__B.mch` match files.
    #[arg(long, required = true, num_args = 1..)]
    pub pairs: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub max_iters: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DbBuildArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Directory of `.dsc` frames, added in file-name order.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub di_levels: usize,
    /// Keep only features that take part in a match file of the directory.
    #[arg(long)]
    pub matched_only: bool,
    /// Do not store descriptor sets in the database.
    #[arg(long)]
    pub no_descriptors: bool,
}

#[derive(Debug, Args)]
pub struct DbQueryArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long, default_value_t = 2)]
    pub di_levels: usize,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LoopParamArgs {
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f64,
    #[arg(long, default_value_t = 3)]
    pub max_island_gap: u32,
    #[arg(long, default_value_t = 3)]
    pub temporal_k: usize,
    #[arg(long, default_value_t = 20)]
    pub dislocal: u32,
    #[arg(long, default_value_t = 12)]
    pub min_inliers: usize,
    #[arg(long, default_value_t = 0.8)]
    pub ratio: f32,
    #[arg(long, default_value_t = 64)]
    pub hamming_threshold: u32,
    #[arg(long, default_value_t = 2.0)]
    pub ransac_threshold_px: f64,
    #[arg(long, default_value_t = 2)]
    pub di_levels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LoopdetectArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Existing database to search; without it the frames are detected and
    /// added online.
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Islands)]
    pub mode: Mode,
    /// Precomputed `q{query:06}_e{entry:06}.mch` matches.
    #[arg(long)]
    pub matches_dir: Option<PathBuf>,
    #[command(flatten)]
    pub params: LoopParamArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MapBuildArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Pass name in the manifest.
    #[arg(long, default_value = "day1")]
    pub pass: String,
    /// Mapped section as START:END arc length in meters.
    #[arg(long, default_value = "0:150")]
    pub section_m: String,
    #[arg(long, default_value_t = 2e-4)]
    pub yaw_drift: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub climb_drift: f64,
    #[arg(long, default_value_t = 0.003)]
    pub landmark_noise: f64,
    #[arg(long, default_value_t = 2)]
    pub di_levels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Keyframe ground-truth CSV.
    #[arg(long)]
    pub gt_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RelocArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Query ground truth; row `entry_id` i belongs to the i-th query file.
    #[arg(long)]
    pub gt: PathBuf,
    /// Keyframe ground truth.
    #[arg(long)]
    pub map_gt: PathBuf,
    /// Camera intrinsics as FX,FY,CX,CY.
    #[arg(long, conflicts_with = "manifest")]
    pub intrinsics: Option<String>,
    /// Take the intrinsics from a scenario manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub window: u32,
    #[arg(long, default_value_t = 10.0)]
    pub gate_m: f64,
    #[arg(long, default_value_t = 15)]
    pub min_inliers: usize,
    #[arg(long, default_value_t = 3.0)]
    pub pnp_threshold_px: f64,
    #[arg(long, default_value_t = 0.15)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1)]
    pub temporal_k: usize,
    #[arg(long, default_value_t = 2)]
    pub di_levels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-query records CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted poses CSV.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalRecallArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub db_frames: PathBuf,
    #[arg(long)]
    pub db_gt: PathBuf,
    #[arg(long)]
    pub query_frames: PathBuf,
    #[arg(long)]
    pub query_gt: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub radius_m: f64,
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    /// Restrict frames to features taking part in a match file.
    #[arg(long)]
    pub matched_only: bool,
    #[command(flatten)]
    pub params: LoopParamArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TimelapseArgs {
    /// Scenario manifest; the default loop otherwise.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
    /// Restrict matching to shared direct-index nodes of this vocabulary.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Camera position: frame index of the first pass.
    #[arg(long, default_value_t = 10)]
    pub frame: usize,
    /// Frames over the day (tau = i / steps for i in 0..=steps).
    #[arg(long, default_value_t = 144)]
    pub steps: usize,
    /// Reference time-of-day fraction; the nearest grid frame is used.
    #[arg(long, default_value_t = 0.0)]
    pub tau0: f64,
    #[arg(long, default_value_t = 3.0)]
    pub px_tol: f64,
    #[arg(long, default_value_t = 2)]
    pub di_levels: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(subcommand)]
    pub which: BenchCommand,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// L2 versus Hamming per-pair cost.
    Distances {
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long, default_value_t = 256)]
        bits: usize,
        #[arg(long, default_value_t = 100_000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Add+query throughput of the image database.
    Database {
        /// Vocabulary to use; a random-data one is trained otherwise.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        entries: usize,
        #[arg(long, default_value_t = 500)]
        features: usize,
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        levels: usize,
        #[arg(long, default_value_t = 2)]
        di_levels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}
