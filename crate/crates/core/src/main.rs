fn main() -> std::process::ExitCode {
    ringbench::bench::main_with_args(std::env::args_os())
}
