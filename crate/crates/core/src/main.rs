fn main() {
    std::process::exit(latent_grpo::cli::run(std::env::args_os()));
}
