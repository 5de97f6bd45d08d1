fn main() {
    std::process::exit(sparse_steer::cli::run(std::env::args_os()));
}
