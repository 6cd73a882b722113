use clap::Parser;

use kinetic_herding::cli::{main_with, Cli};

fn main() {
    std::process::exit(main_with(Cli::parse()));
}
