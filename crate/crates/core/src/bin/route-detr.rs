fn main() {
    std::process::exit(route_detr::cli::run(std::env::args_os()));
}
