fn main() -> std::process::ExitCode {
    blockcs::cli::main()
}
