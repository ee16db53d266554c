//! Regenerates the bundled toy inputs under `data/toy`, then collects the
//! training corpus through the scripted mock gateway and filters it.
//!
//! ```text
//! cargo run --example toy_corpus [OUT_DIR]
//! ```

use std::path::PathBuf;

use role_clarity::synthetic::{collect_toy_corpus, write_toy_bundle, CorpusSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy");
    write_toy_bundle(&data)?;
    println!("wrote {}", data.display());

    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&out)?;
    let traj = out.join("toy_train.jsonl");
    let _ = std::fs::remove_file(&traj);
    let outcome = collect_toy_corpus(&CorpusSpec::train(), &traj)?;
    println!(
        "{}: {} accepted, {} rejected ({:.1}% kept)",
        traj.display(),
        outcome.filtered.accepted.len(),
        outcome.filtered.rejected.len(),
        100.0 * outcome.filtered.acceptance_rate()
    );
    for r in outcome.filtered.rejected.iter().take(3) {
        println!("  {} rejected: {:?}", r.trajectory.run_id(), r.reasons);
    }
    Ok(())
}
