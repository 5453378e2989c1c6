fn main() {
    std::process::exit(sdde_optlab::cli::run(std::env::args_os()));
}
