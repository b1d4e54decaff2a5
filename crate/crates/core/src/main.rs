fn main() -> std::process::ExitCode {
    varlift::cli::main()
}
