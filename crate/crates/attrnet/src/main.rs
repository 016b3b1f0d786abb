fn main() {
    let code = attrnet::cli::run(std::env::args_os());
    std::process::exit(code);
}
