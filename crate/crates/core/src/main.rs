fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let threads = std::env::var("LAYOUTFUSE_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    layoutfuse::par::init_threads(threads);
    std::process::exit(layoutfuse::cli::run(std::env::args_os()));
}
