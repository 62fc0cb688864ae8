use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::default().default_filter_or("info")).init();
    let result = cuebeat::cli::run(std::env::args_os());
    if result.exit_code == 0 {
        println!("{}", result.summary.trim_end());
        for path in &result.written {
            println!("wrote {}", path.display());
        }
    } else {
        eprintln!("{}", result.summary.trim_end());
    }
    std::process::exit(result.exit_code);
}
