fn main() {
    std::process::exit(moelab::run_cli());
}
