fn main() {
    std::process::exit(csi_hdfm::cli::run_from(std::env::args_os()));
}
