fn main() {
    std::process::exit(fedmesh::cli::main_with_args(std::env::args_os()));
}
