fn main() {
    std::process::exit(tonicnet::cli::dispatch(std::env::args_os()));
}
