//! `satswin`: data generation, pretraining, finetuning, evaluation, and
//! reconstruction previews.
//!
//! Exit codes: 0 success, 1 user error (bad arguments, config, or data),
//! 2 internal error.

mod eval;
mod image;
mod reconstruct;
mod run;
mod synth;
mod train;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use satswin::data::Split;

#[derive(Parser)]
#[command(name = "satswin", version, about = "Spatio-temporal Swin masked autoencoder for satellite time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic chips and a manifest.
    Synth(synth::SynthArgs),
    /// Masked-autoencoder pretraining.
    Pretrain(train::PretrainArgs),
    /// Supervised finetuning from a pretrained checkpoint or from scratch.
    Finetune(train::FinetuneArgs),
    /// Score one or more finetuned checkpoints on a manifest split.
    Eval(eval::EvalArgs),
    /// Render original / masked / reconstructed triptychs for one chip.
    Reconstruct(reconstruct::ReconstructArgs),
}

/// A failure caused by the invocation rather than by the program.
#[derive(Debug)]
pub struct UserError(String);

impl UserError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

/// Exit code for an error chain: anything traceable to inputs is a user error.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UserError>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<satswin::Error>() {
            return match e {
                satswin::Error::NonFiniteGradient(_) => 2,
                _ => 1,
            };
        }
    }
    2
}

pub fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (expected train, val, or test)")),
    }
}

/// Writes `bytes` to `path` through a temporary sibling so readers never see
/// a partial file.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = std::panic::catch_unwind(|| match cli.command {
        Command::Synth(a) => synth::run(&a),
        Command::Pretrain(a) => train::pretrain(&a),
        Command::Finetune(a) => train::finetune(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Reconstruct(a) => reconstruct::run(&a),
    });
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
        // The panic hook has already printed the message.
        Err(_) => ExitCode::from(2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_cause() {
        assert_eq!(exit_code(&UserError::new("bad").into()), 1);
        let e: anyhow::Error = satswin::Error::Invalid("x".into()).into();
        assert_eq!(exit_code(&e.context("while loading")), 1);
        assert_eq!(exit_code(&satswin::Error::NonFiniteGradient("w".into()).into()), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("unexpected")), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
