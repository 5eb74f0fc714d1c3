fn main() {
    std::process::exit(spikeforge::cli::run());
}
