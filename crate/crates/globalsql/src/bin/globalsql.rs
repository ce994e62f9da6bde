fn main() {
    std::process::exit(globalsql::cli::run(std::env::args_os()));
}
