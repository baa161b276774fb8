fn main() -> std::process::ExitCode {
    netstab::cli::main()
}
