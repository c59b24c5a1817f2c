fn main() -> std::process::ExitCode {
    cdr_core::cli::main()
}
