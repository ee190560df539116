//! `nvtwin`: command-line front end for the NV writing digital twin.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Simulate laser writing of oriented NV centers and analyse its data.
#[derive(Debug, Parser)]
#[command(name = "nvtwin", version, about, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config file, seed and overrides shared by the stochastic subcommands.
#[derive(Debug, Clone, Args, Default)]
pub struct Common {
    /// TOML configuration file with [plan], [kinetics], [emission], [controller] and [g2] sections.
    #[arg(long, short = 'c', value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set kinetics.p_form=1e-5`; repeatable, later wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// RNG seed; takes precedence over any seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    /// Thin-lens projection of the dipole plane.
    Projection,
    /// Numerical high-NA collection through the diamond interface.
    HighNa,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fabricate a grid of NV centers on the simulated bench.
    Campaign {
        #[command(flatten)]
        common: Common,
        /// Directory for campaign.jsonl, summary.csv, image.csv and image.pgm.
        #[arg(long, short = 'o', value_name = "DIR")]
        out: PathBuf,
        /// Exit with status 5 if any site fails.
        #[arg(long)]
        strict: bool,
        /// Pixel pitch of the post-campaign confocal scan, µm.
        #[arg(long, default_value_t = 0.25)]
        pixel: f64,
    },
    /// Write the model polarization pattern of one NV axis as CSV.
    Pattern {
        /// Surface cut: 100 or 111.
        #[arg(long)]
        surface: String,
        /// NV axis as a crystal label like [1-1-1], or a lab-frame vector `x,y,z`.
        #[arg(long, conflicts_with = "class")]
        axis: Option<String>,
        /// Orientation class id instead of an axis.
        #[arg(long)]
        class: Option<u8>,
        /// Number of analyzer angles over [0, π).
        #[arg(long, default_value_t = 19)]
        angles: usize,
        /// Emission model.
        #[arg(long, value_enum, default_value_t = ModelArg::Projection)]
        model: ModelArg,
        /// Draw Poisson counts with this mean per angle instead of the exact pattern (needs --seed).
        #[arg(long, value_name = "COUNTS")]
        budget: Option<f64>,
        /// RNG seed for --budget.
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV; stdout when omitted.
        #[arg(long, short = 'o', value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Fit a pattern CSV and report its orientation class.
    Classify {
        /// Surface cut: 100 or 111.
        #[arg(long)]
        surface: String,
        /// Pattern CSV with columns theta_rad,intensity[,error].
        #[arg(long, short = 'i', value_name = "FILE")]
        input: PathBuf,
        /// Lab azimuth of the crystal reference direction, rad.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        offset: f64,
        /// Emission model used for the class templates.
        #[arg(long, value_enum, default_value_t = ModelArg::Projection)]
        model: ModelArg,
        /// Smallest margin (in σ) accepted as a reliable classification.
        #[arg(long, default_value_t = 2.0)]
        min_margin: f64,
    },
    /// Synthesize an HBT measurement (or read a histogram) and fit g².
    G2 {
        #[command(flatten)]
        common: Common,
        /// Fit this histogram CSV (tau_ns,coincidences,g2_norm) instead of synthesizing one.
        #[arg(long, short = 'i', value_name = "FILE")]
        input: Option<PathBuf>,
        /// Signal fraction used for background correction; defaults to the configured rates (1 with --input).
        #[arg(long)]
        rho: Option<f64>,
        /// Classic start-stop histogramming instead of full correlation.
        #[arg(long)]
        start_stop: bool,
        /// Write the histogram CSV here.
        #[arg(long, short = 'o', value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Render a confocal image of point emitters as CSV and 16-bit PGM.
    Image {
        /// CSV of emitters with columns x,y,brightness (µm, counts/s).
        #[arg(long, value_name = "FILE", conflicts_with = "grid")]
        emitters: Option<PathBuf>,
        /// Square grid of emitters `ROWSxCOLS` at --pitch spacing.
        #[arg(long, value_name = "RxC")]
        grid: Option<String>,
        /// Grid pitch, µm.
        #[arg(long, default_value_t = 10.0)]
        pitch: f64,
        /// Brightness of grid emitters, counts/s.
        #[arg(long, default_value_t = 5e4)]
        brightness: f64,
        /// Gaussian PSF sigma, µm.
        #[arg(long, default_value_t = 0.25)]
        sigma: f64,
        /// Pixel pitch, µm.
        #[arg(long, default_value_t = 0.25)]
        pixel: f64,
        /// Scan window `x0,y0,x1,y1` in µm; defaults to the emitters plus half a pitch.
        #[arg(long, allow_hyphen_values = true)]
        region: Option<String>,
        /// Uniform background, counts/s.
        #[arg(long, default_value_t = 5e3)]
        background: f64,
        /// Output prefix; writes PREFIX.csv and PREFIX.pgm.
        #[arg(long, short = 'o', value_name = "PREFIX")]
        out: PathBuf,
    },
    /// Run a bench command script on the simulated bench and log it.
    Script {
        #[command(flatten)]
        common: Common,
        /// Script file (MOVE/HWP/SEED/TRAIN/ACQ/SCAN, one per line).
        #[arg(long, short = 'i', value_name = "FILE")]
        input: PathBuf,
        /// Surface cut of the simulated sample: 100 or 111.
        #[arg(long, default_value = "111")]
        surface: String,
        /// JSONL log output.
        #[arg(long, short = 'o', value_name = "FILE")]
        log: PathBuf,
    },
    /// Re-execute a JSONL log on a fresh bench and check every observable.
    Replay {
        /// JSONL log to verify.
        #[arg(long, short = 'i', value_name = "FILE")]
        log: PathBuf,
    },
    /// Run many independent single-site fabrications and tabulate them.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Number of independent sites.
        #[arg(long, default_value_t = 1000)]
        trials: u32,
        /// Worker threads; output is identical for any value.
        #[arg(long, short = 'j', default_value_t = 1)]
        jobs: usize,
        /// Per-trial CSV output.
        #[arg(long, short = 'o', value_name = "FILE")]
        out: PathBuf,
    },
}

/// Process exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const INPUT: u8 = 2;
    pub const COMMAND: u8 = 3;
    pub const DIVERGENCE: u8 = 4;
    pub const STRICT: u8 = 5;
    pub const WARNING: u8 = 6;
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_flag_is_documented() {
        let root = Cli::command();
        for sub in root.get_subcommands() {
            assert!(sub.get_about().is_some(), "{} lacks a description", sub.get_name());
            for arg in sub.get_arguments() {
                let id = arg.get_id().as_str();
                if id == "help" || id == "version" {
                    continue;
                }
                let help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
                assert!(!help.trim().is_empty(), "{} --{id} has no help text", sub.get_name());
            }
        }
    }

    #[test]
    fn help_mentions_every_flag() {
        let mut root = Cli::command();
        root.build();
        for sub in root.get_subcommands_mut() {
            let names: Vec<String> = sub.get_arguments().filter_map(|a| a.get_long().map(String::from)).collect();
            let help = sub.render_long_help().to_string();
            for n in names {
                assert!(help.contains(&format!("--{n}")), "--{n} missing from help");
            }
        }
    }
}
