fn main() {
    std::process::exit(flowsight_cli::run(std::env::args_os()));
}
