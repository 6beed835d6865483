fn main() {
    std::process::exit(sparseflow::cli::main_entry());
}
