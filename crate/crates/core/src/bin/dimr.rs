use clap::Parser;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let cli = dimr::cli::Cli::parse();
    if let Err(e) = dimr::cli::run(cli) {
        eprintln!("{}", dimr::cli::error_line(&e));
        std::process::exit(e.exit_code());
    }
}
