use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smoothlab_cli::commands::{self, FuseArgs, GenArgs, GraphArgs, KdeArgs, RunArgs, ShareTableArgs, VerifyArgs};

/// Over-smoothing diagnostics for post-LayerNorm Transformer stacks.
#[derive(Parser)]
#[command(name = "smoothlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded stack parameters.
    Gen(GenArgs),
    /// Run a stack and write its trace and metrics.
    Run(RunArgs),
    /// Check the distance inequalities and the block contraction bound on random instances.
    Verify(VerifyArgs),
    /// Fuse the layer outputs of a trace.
    Fuse(FuseArgs),
    /// Export one head's attention as a graph.
    Graph(GraphArgs),
    /// Kernel density estimate of sampled values.
    Kde(KdeArgs),
    /// Self-attention FLOPs under attention sharing.
    ShareTable(ShareTableArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Run(a) => commands::run(a, &mut out),
        Command::Verify(a) => commands::verify(a, &mut out),
        Command::Fuse(a) => commands::fuse(a),
        Command::Graph(a) => commands::graph(a),
        Command::Kde(a) => commands::kde_cmd(a, &mut out),
        Command::ShareTable(a) => commands::share_table(a, &mut out),
    };
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
