fn main() {
    std::process::exit(slicesr::cli::run(std::env::args_os()));
}
