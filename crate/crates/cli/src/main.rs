fn main() {
    std::process::exit(tweezer_cli::app::run(std::env::args_os()));
}
