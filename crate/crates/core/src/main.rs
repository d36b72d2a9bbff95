fn main() -> std::process::ExitCode {
    spatialkd::cli::main()
}
