fn main() {
    std::process::exit(popctrl_cli::run_command(std::env::args_os()));
}
