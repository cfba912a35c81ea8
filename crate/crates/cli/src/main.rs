fn main() -> std::process::ExitCode {
    moes_cli::main_entry()
}
