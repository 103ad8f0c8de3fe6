fn main() -> std::process::ExitCode {
    reflect_loop::cli::main()
}
