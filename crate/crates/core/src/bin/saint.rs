fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(saint::harness::cli::run(&argv));
}
