fn main() -> std::process::ExitCode {
    dbhmap::cli::run(std::env::args_os())
}
