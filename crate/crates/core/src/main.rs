use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use capfuse::config::RunConfig;
use capfuse::corpus::Split;
use capfuse::fixture::{self, FixtureConfig};
use capfuse::pipeline::{self, CaptionLine, CaptionTarget};

#[derive(Parser)]
#[command(
    name = "capfuse",
    about = "Hybrid image captioner: kNN consensus + LSTM decoder, fused by a logistic-regression gate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration file (TOML).
    #[arg(long, default_value = "capfuse.toml")]
    config: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the neighbor count k.
    #[arg(long)]
    k: Option<usize>,
    /// Override the consensus subset size m.
    #[arg(long)]
    m: Option<usize>,
    /// Override the decoder beam width.
    #[arg(long)]
    beam: Option<usize>,
}

impl CommonArgs {
    fn load(&self) -> capfuse::Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(k) = self.k {
            config.k = k;
        }
        if let Some(m) = self.m {
            config.m = m;
        }
        if let Some(beam) = self.beam {
            config.beam = beam;
        }
        config.validate()?;
        Ok(config)
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Command {
    /// Load the corpus, build the vocabulary and persist the neighbor index.
    Prepare(CommonArgs),
    /// Train the neural captioner and the gate, writing both checkpoints.
    Train(CommonArgs),
    /// Caption images with both models and let the gate pick; one JSON line per image.
    Caption {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated image ids (defaults to the test split).
        #[arg(long, value_delimiter = ',')]
        ids: Option<Vec<String>>,
        /// Caption an external features JSONL file instead of corpus images.
        #[arg(long, conflicts_with = "ids")]
        features_file: Option<PathBuf>,
        /// Bypass the gate with a constant decision (0 = neural, 1 = consensus).
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
        force_gate: Option<u8>,
    },
    /// Score both captioners, the hybrid and the oracle-gated hybrid on a split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Score the neural captioner across beam widths.
    SweepBeam {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Beam widths to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 5, 7])]
        beams: Vec<usize>,
    },
    /// Generate the synthetic corpus (clustered features + template captions).
    GenFixture {
        /// Output directory for captions.tsv, features.jsonl and splits.tsv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        images: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn run() -> capfuse::Result<()> {
    match Cli::parse().command {
        Command::Prepare(common) => {
            let config = common.load()?;
            let summary = pipeline::prepare(&config)?;
            println!(
                "prepared {} images (train {}, val {}, test {}); vocabulary {} tokens ({} + specials); feature dim {}",
                summary.images,
                summary.train,
                summary.validation,
                summary.test,
                summary.vocab_size,
                summary.real_tokens,
                summary.feature_dim
            );
        }
        Command::Train(common) => {
            let config = common.load()?;
            let summary = pipeline::train(&config)?;
            for (epoch, loss) in summary.nic_epoch_token_loss.iter().enumerate() {
                println!("epoch {:>3}: mean token loss {loss:.4}", epoch + 1);
            }
            println!(
                "gate: {} samples ({} label-1), accuracy {:.4}, majority baseline {:.4}, final loss {:.4}{}",
                summary.gate_samples,
                summary.gate_label_ones,
                summary.gate_accuracy,
                summary.majority_baseline,
                summary.gate_final_loss,
                if summary.degenerate_gate { " (degenerate)" } else { "" }
            );
        }
        Command::Caption {
            common,
            ids,
            features_file,
            force_gate,
        } => {
            let config = common.load()?;
            let target = match (ids, features_file) {
                (Some(ids), _) => CaptionTarget::Ids(ids),
                (None, Some(path)) => CaptionTarget::FeaturesFile(path),
                (None, None) => CaptionTarget::TestSplit,
            };
            let lines = pipeline::caption(&config, &target, force_gate)?;
            for line in &lines {
                println!("{}", serde_json::to_string(line).expect("line serializes"));
            }
            let errors = lines
                .iter()
                .filter(|l| matches!(l, CaptionLine::Error { .. }))
                .count();
            if errors > 0 {
                eprintln!("{errors} image(s) failed; see error records above");
            }
        }
        Command::Evaluate { common, split } => {
            let config = common.load()?;
            let report = pipeline::evaluate(&config, split)?;
            print!("{}", pipeline::render_eval(&report));
        }
        Command::SweepBeam { common, split, beams } => {
            let config = common.load()?;
            let report = pipeline::sweep_beam(&config, split, &beams)?;
            print!("{}", pipeline::render_sweep(&report));
        }
        Command::GenFixture { out, images, seed } => {
            let config = FixtureConfig {
                images,
                seed,
                ..Default::default()
            };
            let (captions, features, splits) = fixture::write(&config, &out)?;
            println!(
                "wrote {} images to {}, {} and {}",
                images,
                captions.display(),
                features.display(),
                splits.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
