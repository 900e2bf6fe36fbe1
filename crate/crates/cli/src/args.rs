use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "padlab", version, about = "Padding-space GAN inversion laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; missing keys take the desk defaults (or the
    /// consumed checkpoint's settings).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory [default: $PADLAB_OUT/<subcommand>, else runs/<subcommand>].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run seed (same as `--set seed=N`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the synthetic-data generator and its discriminator.
    PretrainGan {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train an inversion encoder against a frozen generator.
    TrainEncoder {
        #[command(flatten)]
        common: Common,
        /// GAN checkpoint (or the pretrain-gan output directory).
        #[arg(long, value_name = "DIR")]
        gan: PathBuf,
    },
    /// Invert one image into W+ codes and a padding set.
    Invert {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint (or the train-encoder output directory).
        #[arg(long, value_name = "DIR")]
        encoder: PathBuf,
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// GAN checkpoint [default: the one the encoder was trained against].
        #[arg(long, value_name = "DIR")]
        gan: Option<PathBuf>,
    },
    /// Render A's codes with B's padding.
    Blend {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        a: PathBuf,
        #[arg(long, value_name = "DIR")]
        b: PathBuf,
        #[arg(long, value_name = "DIR")]
        gan: Option<PathBuf>,
    },
    /// Interpolate one code space between two inversions.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        a: PathBuf,
        #[arg(long, value_name = "DIR")]
        b: PathBuf,
        #[arg(long, value_enum)]
        space: InterpSpace,
        /// Number of frames including both endpoints.
        #[arg(long, default_value_t = 5)]
        frames: usize,
        /// Hold the other space at A's value or at the average/native point.
        #[arg(long, value_enum, default_value_t = HoldArg::First)]
        hold: HoldArg,
        #[arg(long, value_name = "DIR")]
        gan: Option<PathBuf>,
    },
    /// Edit direction from the inversions of an image pair.
    MakeDirection {
        #[command(flatten)]
        common: Common,
        /// Inversion of the original image.
        #[arg(long, value_name = "DIR")]
        a: PathBuf,
        /// Inversion of the edited image.
        #[arg(long = "a-edit", value_name = "DIR")]
        a_edit: PathBuf,
        #[arg(long, default_value = "")]
        label: String,
        /// Non-edited region mask (white = keep) instead of the automatic one.
        #[arg(long, value_name = "FILE")]
        mask: Option<PathBuf>,
    },
    /// Apply a direction in one space to an inversion.
    ApplyDirection {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        inv: PathBuf,
        #[arg(long, value_name = "DIR")]
        direction: PathBuf,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        strength: f64,
        /// `style` or `padding`.
        #[arg(long)]
        space: String,
        #[arg(long, value_name = "DIR")]
        gan: Option<PathBuf>,
    },
    /// Held-out reconstruction metrics, optionally with an editing factor.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        encoder: PathBuf,
        #[arg(long, value_name = "DIR")]
        gan: Option<PathBuf>,
        /// Also report non-edited-region MSE per space for this direction.
        #[arg(long, value_name = "DIR")]
        direction: Option<PathBuf>,
        /// Held-out images used for the editing factor.
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
    /// Tile images (or inversion directories) into one PNG.
    ExportGrid {
        #[command(flatten)]
        common: Common,
        /// Image file or inversion directory. Repeatable.
        #[arg(long = "image", value_name = "PATH", required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 4)]
        cols: usize,
        #[arg(long, default_value = "grid.png")]
        name: String,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PretrainGan { .. } => "pretrain-gan",
            Command::TrainEncoder { .. } => "train-encoder",
            Command::Invert { .. } => "invert",
            Command::Blend { .. } => "blend",
            Command::Interpolate { .. } => "interpolate",
            Command::MakeDirection { .. } => "make-direction",
            Command::ApplyDirection { .. } => "apply-direction",
            Command::Evaluate { .. } => "evaluate",
            Command::ExportGrid { .. } => "export-grid",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::PretrainGan { common, .. }
            | Command::TrainEncoder { common, .. }
            | Command::Invert { common, .. }
            | Command::Blend { common, .. }
            | Command::Interpolate { common, .. }
            | Command::MakeDirection { common, .. }
            | Command::ApplyDirection { common, .. }
            | Command::Evaluate { common, .. }
            | Command::ExportGrid { common, .. } => common,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InterpSpace {
    Latent,
    Padding,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HoldArg {
    First,
    Average,
}
