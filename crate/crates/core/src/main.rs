fn main() {
    waterhe::trainer::retain_large_allocations();
    std::process::exit(waterhe::cli::run(std::env::args_os()));
}
