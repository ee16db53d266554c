//! Evaluates the toy test corpus on the base encoder and scores a small set of
//! generated artifacts for completeness, executability and consistency.

use std::collections::BTreeMap;

use role_clarity::eval::{
    artifact_files, completeness_alpha, consistency_gamma, evaluate, executability_beta, read_texts, BetaHook,
    EvalModels, DEFAULT_PLACEHOLDERS,
};
use role_clarity::model::{AgentModel, LoraConfig, ModelConfig};
use role_clarity::synthetic::{collect_toy_corpus, toy_eval_options, toy_registry, CorpusSpec};
use role_clarity::trajectory::load_trajectories;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("test.jsonl");
    collect_toy_corpus(&CorpusSpec::test(), &path)?;
    let registry = toy_registry();
    let test = load_trajectories(&path, &registry)?;

    let base = AgentModel::new(ModelConfig::default(), LoraConfig::toy())?;
    let mut report = evaluate(&test, &registry, &EvalModels::new(base.clone(), BTreeMap::new())?, &toy_eval_options())?;

    let art = dir.path().join("artifacts");
    std::fs::create_dir_all(&art)?;
    std::fs::write(art.join("main.py"), "print('timer started')\n")?;
    std::fs::write(art.join("ui.py"), "def draw():\n    pass  # placeholder\n")?;
    let files = artifact_files(&art)?;
    let patterns: Vec<String> = DEFAULT_PLACEHOLDERS.iter().map(|s| s.to_string()).collect();
    let alpha = completeness_alpha(&read_texts(&files)?, &patterns)?;
    let beta = executability_beta(
        &files,
        &BetaHook {
            program: "test".into(),
            args: vec!["-s".into(), "{}".into()],
        },
    )?;
    let gamma = consistency_gamma(&base.base_encoder(), "Build a simple timer.", &read_texts(&files)?.join("\n"))?;
    report.set_software_metrics(Some(alpha), Some(beta), Some(gamma))?;

    println!("{}", report.to_csv()?);
    println!("{}", serde_json::to_string_pretty(&report.subsets)?);
    Ok(())
}
