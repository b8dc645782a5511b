//! Command-line front end for maskwright: dataset generation, training,
//! mask export and evaluation, plus the model file format.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod export;
pub mod modelfile;

use std::ffi::OsString;
use std::io::Write;

use clap::error::ErrorKind;
use clap::Parser;

pub use error::{CliError, CliResult};

use args::{Cli, Command};

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 for usage errors, 2 otherwise.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    let res = match cli.command {
        Command::GenTask(a) => commands::gen_task(a, out),
        Command::TrainBase(a) => commands::train_base_cmd(a, out),
        Command::TrainExplainer(a) => commands::train_explainer_cmd(a, out),
        Command::Explain(a) => commands::explain_cmd(a, out),
        Command::Eval(a) => commands::eval_cmd(a, out),
        Command::Gradcheck(a) => match commands::gradcheck_cmd(a, out) {
            Ok(true) => Ok(()),
            Ok(false) => {
                let _ = writeln!(err, "error: gradient check failed");
                return 2;
            }
            Err(e) => Err(e),
        },
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
