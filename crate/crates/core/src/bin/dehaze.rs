fn main() {
    std::process::exit(moe_dehaze::harness::cli::run(std::env::args_os()));
}
