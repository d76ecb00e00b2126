use clap::{Parser, Subcommand};
use regina_cli::commands::{
    cmd_eval, cmd_fuse, cmd_gradcheck, cmd_ssm, cmd_synth, cmd_train, EvalArgs, FuseArgs,
    GradcheckArgs, SsmArgs, SynthArgs, TrainArgs,
};

/// Skeleton action recognition with self-similarity tap re-weighting:
/// dataset generation, descriptor export, training, evaluation, gradient
/// checking, and two-stream fusion.
#[derive(Parser)]
#[command(name = "regina", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic skeleton dataset with a manifest
    Synth(SynthArgs),
    /// Compute and export a sequence's self-similarity matrix
    Ssm(SsmArgs),
    /// Train a model on one side of a dataset split
    Train(TrainArgs),
    /// Score a checkpoint on a split and write per-sample probabilities
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Fuse two score files and report combined accuracy
    Fuse(FuseArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Ssm(args) => cmd_ssm(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Fuse(args) => cmd_fuse(args),
    };
    if let Err(e) = result {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}
