use dualdiff::cli::{run, Cli};

/// Worker threads from `DUALDIFF_THREADS` (default: rayon's choice).
fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("DUALDIFF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DUALDIFF_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() {
    let cli = match Cli::parse_from_args(std::env::args()) {
        Ok((c, _)) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
