fn main() -> std::process::ExitCode {
    triseg::cli::main()
}
