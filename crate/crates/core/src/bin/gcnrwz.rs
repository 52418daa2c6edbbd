fn main() {
    std::process::exit(gcnrwz::cli::run(std::env::args_os()));
}
