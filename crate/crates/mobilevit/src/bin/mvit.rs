fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(mobilevit::cli::run(&args[1..]));
}
