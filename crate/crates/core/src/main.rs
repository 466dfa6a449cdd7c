fn main() -> std::process::ExitCode {
    rpm_core::cli::main()
}
