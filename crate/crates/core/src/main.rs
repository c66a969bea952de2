use clap::Parser;
use viscosim::cli::{run, Cli};

fn main() {
    if let Ok(threads) = std::env::var("VISCOSIM_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    std::process::exit(run(Cli::parse()));
}
