fn main() {
    std::process::exit(pointmvs::cli::main());
}
