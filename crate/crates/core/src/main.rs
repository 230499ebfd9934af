fn main() {
    if let Err(e) = partlab::cli::run_from(std::env::args_os()) {
        if let partlab::Error::Task(ref m) = e {
            if m == "help shown" {
                return;
            }
        }
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
