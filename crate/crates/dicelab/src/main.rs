fn main() {
    std::process::exit(dicelab::cli::run(std::env::args_os()));
}
