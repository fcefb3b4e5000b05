fn main() -> anyhow::Result<()> {
    conformer::cli::run(std::env::args_os(), &mut std::io::stdout().lock())
}
