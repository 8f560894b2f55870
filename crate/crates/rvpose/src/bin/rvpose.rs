fn main() {
    std::process::exit(rvpose::cli::run_from_env());
}
