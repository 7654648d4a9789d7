fn main() {
    std::process::exit(tcrgpt::cli::run(std::env::args_os()));
}
