//! Trains CEO and CPO adapters on the synthetic two-role corpus with and
//! without the role-clarity term, then compares the composed models.
//!
//! ```text
//! cargo run --release --example toy_experiment
//! ```

use std::time::Instant;

use role_clarity::synthetic::toy_experiment;
use role_clarity::training::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let dir = tempfile::tempdir()?;
    let start = Instant::now();
    let exp = toy_experiment(dir.path(), &[0.1, 0.0], &TrainConfig::toy())?;
    println!("{} training dialogues, {} test dialogues", exp.train_accepted, exp.test_cases);
    println!(
        "base:     C = {:.5}, argmax overstep rate = {:.3}",
        exp.base.clarity_score_mean, exp.base.overstep_rate_strict
    );
    for run in &exp.runs {
        println!(
            "lambda {:<4} C = {:.5}, argmax overstep rate = {:.3}",
            run.lambda, run.eval.clarity_score_mean, run.eval.overstep_rate_strict
        );
        for r in &run.reports {
            let last = r.steps.last().expect("steps");
            println!(
                "  {}: selected {}, last batch mle {:.3} rc {:.3}",
                r.role_id, r.selected_checkpoint, last.mle, last.rc
            );
        }
    }
    println!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
