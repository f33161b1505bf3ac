fn main() -> std::process::ExitCode {
    rmgcr::cli::main()
}
