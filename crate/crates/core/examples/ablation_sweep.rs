//! Sweeps the pipeline mode on a small corpus and prints the ablation table.
//! The same runs are available as `r2seg ablate --sweep mode=...`.

use r2seg::cli::{ablation_table, cmd_ablate, cmd_gen, RunConfig};

fn main() -> r2seg::Result<()> {
    let dir = std::env::temp_dir().join("r2seg_ablation_example");
    let mut cfg = RunConfig::default();
    cfg.data.scenes = 20;
    cfg.data.points = 512;
    cfg.model.dim = 32;
    cfg.train.steps = 100;
    cfg.train.lr_max = 1e-3;
    cmd_gen(&cfg, &dir.join("data"))?;
    let rows = cmd_ablate(&cfg, &dir.join("data"), "mode=baseline,wo_pr,text_based,full_r2s", &[0, 1], &dir.join("ablation"))?;
    print!("{}", ablation_table(&rows));
    Ok(())
}
