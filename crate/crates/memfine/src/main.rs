fn main() -> std::process::ExitCode {
    memfine::cli::main()
}
