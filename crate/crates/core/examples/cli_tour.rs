//! Drives the command-line entry point in-process.

pub fn run_example() -> flashmem::Result<i32> {
    let dir = std::env::temp_dir().join(format!("flashmem-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, "[backbone]\nn_layers = 2\nd_model = 16\nn_heads = 2\nd_head = 8\nd_ff = 64\n[train]\nk_memory_tokens = 2\n")?;
    let values = dir.join("entropies.txt");
    std::fs::write(&values, (1..=20).map(|v| format!("{v}\n")).collect::<String>())?;
    let cfg_s = cfg.to_string_lossy().to_string();
    let code = flashmem::cli::run(["flashmem", "calibrate", "--config", &cfg_s, "--entropies", &values.to_string_lossy()]);
    if code == 0 {
        let trace = dir.join("run.trace.jsonl");
        let code = flashmem::cli::run(["flashmem", "generate", "--config", &cfg_s, "--trace-out", &trace.to_string_lossy()]);
        std::fs::remove_dir_all(&dir)?;
        return Ok(code);
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(code)
}

#[allow(dead_code)]
fn main() {
    std::process::exit(run_example().expect("cli"));
}
