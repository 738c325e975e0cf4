fn main() {
    std::process::exit(sidb_designer::io_cli::cli::main_with_args(std::env::args_os()));
}
