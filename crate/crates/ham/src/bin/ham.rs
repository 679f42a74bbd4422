fn main() {
    std::process::exit(ham::cli_main());
}
