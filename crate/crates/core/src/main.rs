fn main() {
    std::process::exit(sdi_core::harness::cli_main(std::env::args_os()));
}
