fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(sstg_cli::dispatch(&argv));
}
