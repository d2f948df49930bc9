use std::process::exit;

fn main() {
    exit(consensus_sos::cli::run(std::env::args_os()));
}
