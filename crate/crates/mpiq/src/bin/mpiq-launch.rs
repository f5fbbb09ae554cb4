//! Job launcher: spawns one monitor process per configured device plus the
//! requested number of classical program processes, waits for all of them,
//! and exits with the first nonzero child code.

use std::path::PathBuf;

use clap::Parser;
use mpiq::runtime::launch;

#[derive(Parser, Debug)]
#[command(
    name = "mpiq-launch",
    about = "Launch monitors and classical processes for one hybrid job",
    trailing_var_arg = true
)]
struct Args {
    /// Number of classical processes.
    #[arg(long)]
    np: u32,

    /// Quantum node configuration file.
    #[arg(long)]
    qconfig: PathBuf,

    /// Seed forwarded to monitors and programs.
    #[arg(long, default_value_t = 0x4d50_4951)]
    seed: u64,

    /// Program and its arguments (after `--`).
    #[arg(required = true)]
    program: Vec<String>,
}

fn main() {
    let args = Args::parse();
    match launch(args.np, &args.qconfig, &args.program, args.seed) {
        Ok(report) => {
            for (rank, code) in &report.program_exits {
                println!("rank {rank}: exit {code}");
            }
            for (dev, code) in &report.monitor_exits {
                println!("monitor {dev}: exit {code}");
            }
            std::process::exit(report.first_nonzero().unwrap_or(0));
        }
        Err(e) => {
            eprintln!("mpiq-launch: {e}");
            std::process::exit(1);
        }
    }
}
