fn main() -> std::process::ExitCode {
    pln::cli::main()
}
