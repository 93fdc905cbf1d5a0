use clap::Parser;
use laser::cli::{dispatch, Cli};

fn main() {
    // LASER_THREADS caps rollout parallelism; results are identical at any
    // thread count.
    if let Ok(threads) = std::env::var("LASER_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    std::process::exit(dispatch(Cli::parse()));
}
