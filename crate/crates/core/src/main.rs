fn main() {
    std::process::exit(agedict::cli::run(std::env::args_os()));
}
