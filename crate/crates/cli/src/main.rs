fn main() {
    std::process::exit(nbr_gcn_cli::run(std::env::args().collect()));
}
