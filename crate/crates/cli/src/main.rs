//! `g2p`: ingest dictionaries, split them, train, predict and evaluate.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 configuration error,
//! 3 data error (bad input, missing splits, corrupt checkpoint), 4 numeric failure.

use std::fs::File;
use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use g2p_core::commands::{self, IngestInput, RunConfig};
use g2p_core::{Error, LanguageTag, Result};

#[derive(Parser)]
#[command(name = "g2p", version, about = "Multilingual byte-level grapheme-to-phoneme toolkit")]
struct Cli {
    /// JSON run configuration; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and merge dictionaries into one canonical TSV per language.
    Ingest {
        /// Dictionary as LANG:SOURCE:PATH; repeatable.
        #[arg(long = "input", required = true)]
        inputs: Vec<IngestInput>,
        /// Source names, highest priority first.
        #[arg(long, value_delimiter = ',')]
        priority: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Set aside dev and test words for every eligible language.
    Partition {
        #[arg(long)]
        lexicons: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// 50 dev / 200 test words instead of 50 / 500.
        #[arg(long)]
        low_resource: bool,
        /// Languages need strictly more entries than this.
        #[arg(long)]
        min_entries: Option<usize>,
    },
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training a checkpoint on new data.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Transcribe words, one per line, from a file or stdin.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Language tag, or `unk` for an unseen language.
        #[arg(long, default_value = "unk")]
        tag: LanguageTag,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score a checkpoint on the test splits.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        languages: Option<Vec<LanguageTag>>,
        /// Add Spearman's rho between training size and PER.
        #[arg(long)]
        correlate: bool,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict training to these tags, e.g. `--languages spa,por`.
    #[arg(long, value_delimiter = ',')]
    languages: Option<Vec<LanguageTag>>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from the last periodic checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

impl TrainArgs {
    fn apply(self, cfg: &mut RunConfig) {
        override_with(&mut cfg.split_dir, self.splits);
        override_with(&mut cfg.output_dir, self.out);
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(langs) = self.languages {
            cfg.train.language_filter = Some(langs);
        }
        if let Some(epochs) = self.epochs {
            cfg.train.epochs = epochs;
        }
        cfg.resume |= self.resume;
    }
}

fn override_with<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Ingest {
            inputs,
            priority,
            out,
        } => {
            let out = required(out.or(cfg.lexicon_dir), "out")?;
            let manifest = commands::ingest(&inputs, &priority, &out)?;
            for l in &manifest.languages {
                println!("{}\t{} entries", l.language, l.entries);
            }
        }
        Command::Partition {
            lexicons,
            out,
            seed,
            low_resource,
            min_entries,
        } => {
            let lexicons = required(lexicons.or(cfg.lexicon_dir.clone()), "lexicons")?;
            let out = required(out.or(cfg.split_dir.clone()), "out")?;
            if let Some(seed) = seed {
                cfg.split_seed = seed;
            }
            cfg.low_resource |= low_resource;
            let min_entries = min_entries.unwrap_or(cfg.min_entries);
            let manifest = commands::partition(&lexicons, &out, cfg.split_spec(), min_entries)?;
            for l in &manifest.languages {
                println!("{}\t{}/{}/{}", l.language, l.train.words, l.dev.words, l.test.words);
            }
            for l in &manifest.ineligible {
                println!("{}\tineligible ({} entries)", l.language, l.entries);
            }
        }
        Command::Train(args) => {
            args.apply(&mut cfg);
            report_training(commands::train(&cfg)?);
        }
        Command::Finetune { checkpoint, train } => {
            override_with(&mut cfg.checkpoint, checkpoint);
            train.apply(&mut cfg);
            report_training(commands::finetune(&cfg)?);
        }
        Command::Predict {
            checkpoint,
            tag,
            beam,
            input,
        } => {
            let path = required(checkpoint.or(cfg.checkpoint), "checkpoint")?;
            if let Some(beam) = beam {
                cfg.decode.beam_size = beam;
            }
            let params = commands::load_model(&path)?;
            let stdout = io::stdout().lock();
            match input {
                Some(p) => {
                    let file = File::open(&p).map_err(|e| Error::io(&p, e))?;
                    commands::predict(&params, BufReader::new(file), &tag, &cfg.decode, stdout)?;
                }
                None => {
                    commands::predict(&params, io::stdin().lock(), &tag, &cfg.decode, stdout)?;
                }
            }
        }
        Command::Eval {
            checkpoint,
            splits,
            out,
            beam,
            languages,
            correlate,
            json,
        } => {
            override_with(&mut cfg.checkpoint, checkpoint);
            override_with(&mut cfg.split_dir, splits);
            override_with(&mut cfg.output_dir, out);
            if let Some(beam) = beam {
                cfg.decode.beam_size = beam;
            }
            let report = commands::eval(&cfg, languages.as_deref(), correlate)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_table());
            }
        }
    }
    Ok(())
}

fn report_training(outcome: commands::TrainOutcome) {
    let report = &outcome.report;
    match report.selected_point() {
        Some(p) => println!(
            "selected step {} (epoch {}): dev PER {:.2} WER {:.2}",
            p.step,
            p.epoch + 1,
            p.dev_per,
            p.dev_wer
        ),
        None => println!("no evaluation was run"),
    }
    println!("wrote {}", outcome.model_path.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(e.kind()) as u8)
        }
    }
}
