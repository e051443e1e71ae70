fn main() {
    std::process::exit(corvus::run_cli());
}
