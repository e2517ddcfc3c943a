fn main() -> std::process::ExitCode {
    burst_core::cli::main()
}
