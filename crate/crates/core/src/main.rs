fn main() {
    std::process::exit(holofair::commands::run(std::env::args_os()));
}
