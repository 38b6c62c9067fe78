fn main() {
    std::process::exit(depthadapt::cli::run(std::env::args_os()));
}
