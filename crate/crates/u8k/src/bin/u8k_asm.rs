use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

/// Assemble u8k source into a `u8k-image v1` text image.
#[derive(Parser)]
#[command(name = "u8k-asm", version)]
struct Args {
    /// Assembly source file
    input: PathBuf,
    /// Output image path
    #[arg(short, long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let source = match std::fs::read_to_string(&args.input) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}: {e}", args.input.display());
            return ExitCode::FAILURE;
        }
    };
    let image = match u8k::asm::assemble(&source) {
        Ok(img) => img,
        Err(e) => {
            eprintln!("{}: {e}", args.input.display());
            return ExitCode::FAILURE;
        }
    };
    if let Err(e) = std::fs::write(&args.output, image.serialize()) {
        eprintln!("{}: {e}", args.output.display());
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
