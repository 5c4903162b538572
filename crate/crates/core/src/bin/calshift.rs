fn main() {
    std::process::exit(calshift::cli::main());
}
