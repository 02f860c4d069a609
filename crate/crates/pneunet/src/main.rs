use clap::Parser;

fn main() {
    let cli = match pneunet::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are validation failures; help and version are not errors.
            std::process::exit(if e.use_stderr() { 3 } else { 0 });
        }
    };
    if let Err(e) = pneunet::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
