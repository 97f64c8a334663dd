fn main() {
    std::process::exit(blocks_sim::cli::main_with_args(std::env::args_os()));
}
