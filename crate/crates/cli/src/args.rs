use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hiseg_core::dataset::DatasetId;

#[derive(Debug, Parser)]
#[command(name = "hiseg", version, about = "Training-free open-vocabulary semantic segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every verb. They override the config file and `--set`.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Pipeline configuration (TOML, flat dotted keys allowed).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Image encoder: vit_b_16, vit_l_14, or toy (random weights, no download).
    #[arg(long, global = true)]
    pub backbone: Option<String>,

    /// Skip diffusion-attention compensation.
    #[arg(long, global = true)]
    pub no_compensation: bool,

    /// Evaluate only the first N samples.
    #[arg(long, global = true, value_name = "N")]
    pub limit: Option<usize>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Use recorded fixtures from DIR instead of the models.
    #[arg(long, global = true, value_name = "DIR")]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment one image.
    Segment {
        image: PathBuf,
        #[command(flatten)]
        categories: CategoryArgs,
        /// Also record the coarse scores (and diffusion attention) in replay layout under OUT/replay.
        #[arg(long)]
        save_scores: bool,
    },
    /// Evaluate on a benchmark split and write metrics and a run manifest.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Re-run with the configuration recorded in a previous manifest.
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        /// Write predicted label images under OUT/predictions.
        #[arg(long)]
        save_predictions: bool,
    },
    /// Predict masks restricted to each image's ground-truth classes.
    PseudoMasks {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write intermediate arrays as fixtures plus rendered heatmaps.
    Dump {
        kind: DumpKind,
        image: PathBuf,
        #[command(flatten)]
        categories: CategoryArgs,
        /// Query pixel `x,y` for attention heatmaps; repeatable. Defaults to the image centre.
        #[arg(long = "point", value_name = "X,Y", value_parser = parse_point)]
        points: Vec<(u32, u32)>,
    },
    /// Download model weights into the weights root.
    FetchWeights {
        /// vit_b_16, vit_l_14 and/or sd.
        #[arg(required = true)]
        ids: Vec<String>,
        /// Download again even if the files are present.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DumpKind {
    #[value(name = "layer_trace")]
    LayerTrace,
    #[value(name = "sd_attention")]
    SdAttention,
    #[value(name = "similarity")]
    Similarity,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CategoryArgs {
    /// Category name, synonyms separated by commas; repeatable.
    #[arg(short = 'c', long = "category", value_name = "NAME")]
    pub category: Vec<String>,

    /// Class-list file: one category per line, `!` marks the background names.
    #[arg(long, value_name = "FILE", conflicts_with = "category")]
    pub classes: Option<PathBuf>,

    /// Label every pixel with a category (no background label).
    #[arg(long)]
    pub no_background: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub dataset: Option<DatasetId>,

    #[arg(long, value_name = "DIR")]
    pub data_root: Option<PathBuf>,

    #[arg(long)]
    pub split: Option<String>,
}

fn parse_point(s: &str) -> Result<(u32, u32), String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let p = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(x)?, p(y)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_follow_the_verb() {
        let cli = Cli::try_parse_from(["hiseg", "eval", "--limit", "5", "--seed", "3", "--no-compensation"]).unwrap();
        assert_eq!(cli.common.limit, Some(5));
        assert_eq!(cli.common.seed, Some(3));
        assert!(cli.common.no_compensation);
    }

    #[test]
    fn points_parse() {
        assert_eq!(parse_point("3, 4").unwrap(), (3, 4));
        assert!(parse_point("3").is_err());
        assert!(parse_point("a,1").is_err());
    }
}
