use clap::Parser;

fn main() {
    let args = cqlimit::cli::Args::parse();
    std::process::exit(cqlimit::cli::main_with_args(args));
}
