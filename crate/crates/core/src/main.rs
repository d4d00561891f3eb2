fn main() {
    env_logger::init();
    std::process::exit(eptq::cli::run(std::env::args_os()));
}
