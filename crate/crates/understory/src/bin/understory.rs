fn main() {
    std::process::exit(understory::cli::main_entry());
}
