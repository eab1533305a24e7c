fn main() {
    std::process::exit(taskhedge_cli::run(std::env::args_os()));
}
