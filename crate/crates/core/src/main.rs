fn main() {
    std::process::exit(advtrain::harness::cli(std::env::args().skip(1)));
}
