fn main() {
    std::process::exit(deep_kmeans::cli::run(std::env::args().collect()));
}
