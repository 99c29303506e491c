fn main() {
    let code = mcbmt_cli::run(std::env::args_os());
    std::process::exit(code);
}
