fn main() {
    std::process::exit(balred_ssm::cli::run(std::env::args_os()));
}
