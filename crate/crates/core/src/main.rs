fn main() {
    std::process::exit(moe_offload::cli::run_from(std::env::args_os()));
}
