fn main() -> std::process::ExitCode {
    lgcav::cli::main_with_args(std::env::args_os())
}
