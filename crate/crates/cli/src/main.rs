//! Command-line surface for the face super-resolution pipeline.
//!
//! Subcommands: `synth` (generate a dataset), `train` (two-stage
//! protocol), `infer` (single image, with parsing-map overrides), `eval`
//! (metrics over a dataset), `gradcheck` (finite-difference oracle).
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure,
//! 4 verification failure. Every command prints its fully resolved
//! configuration first and lists all files it wrote after a `WROTE:`
//! sentinel, one path per line.

mod args;
mod commands;

pub type ExitCode = i32;
pub const EXIT_OK: ExitCode = 0;
pub const EXIT_USAGE: ExitCode = 2;
pub const EXIT_NUMERIC: ExitCode = 3;
pub const EXIT_VERIFY: ExitCode = 4;

const USAGE: &str = "\
usage: fishsr <command> [--config <file>] [--<key> <value> ...]

commands:
  synth      generate a synthetic dataset
             --seed N --count N --scale {4|8|16} --out DIR
  train      run the two-stage training protocol
             --stage {parsing|sr|both} --data DIR --steps N --seed N
             --ckpt-dir DIR --batch N --lr F --channels N
             [--ckpt-interval N] [--joint]
             [--no-msrb] [--no-ca] [--no-sa] [--no-pmb]
  infer      super-resolve one image
             --ckpt FILE --input FILE.{ften|ppm} --out STEM
             [--parsing-map FILE] [--zero-parsing] [--rotate-parsing DEG]
  eval       metrics over a dataset
             --ckpt FILE --data DIR [--split NAME] [--out FILE]
  gradcheck  finite-difference gradient verification
             [--block NAME|all] [--seed N]

a config file holds `key = value` lines (# comments); command-line flags
override it.";

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = argv.first() else {
        eprintln!("{USAGE}");
        std::process::exit(EXIT_USAGE);
    };
    let rest = &argv[1..];
    let outcome = match command.as_str() {
        "synth" => commands::cmd_synth(rest),
        "train" => commands::cmd_train(rest),
        "infer" => commands::cmd_infer(rest),
        "eval" => commands::cmd_eval(rest),
        "gradcheck" => commands::cmd_gradcheck(rest),
        "--help" | "-h" | "help" => {
            println!("{USAGE}");
            return;
        }
        other => {
            eprintln!("unknown command {other:?}\n{USAGE}");
            std::process::exit(EXIT_USAGE);
        }
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err((code, message)) => {
            eprintln!("error: {message}");
            std::process::exit(code);
        }
    }
}
