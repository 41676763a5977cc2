fn main() {
    std::process::exit(chamfer_align_cli::run(std::env::args_os()));
}
