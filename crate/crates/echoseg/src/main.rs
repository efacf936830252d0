fn main() {
    std::process::exit(echoseg::cli::main_entry());
}
