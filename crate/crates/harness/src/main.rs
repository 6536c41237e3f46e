fn main() {
    std::process::exit(snp_harness::cli::run(std::env::args_os()));
}
