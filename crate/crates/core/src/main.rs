fn main() -> std::process::ExitCode {
    vlsa::cli::main()
}
