fn main() { std::process::exit(voxelsl::cli::main_exit_code()) }
