//! Fresh adapters leave the base untouched; trained adapters fold into the
//! base weights without changing outputs.

use role_clarity::model::{tokenize, AgentModel, LoraConfig, ModelConfig};
use role_clarity::selfcheck::merge_probe;
use role_clarity::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = ModelConfig {
        context_len: 64,
        ..ModelConfig::default()
    };
    let mut model = AgentModel::new(config, LoraConfig::toy())?;
    let tokens = tokenize("The CEO approves the budget.");

    let base = model.merged();
    let diff = model.forward_logits(&tokens)?.max_abs_diff(&base.forward_logits(&tokens)?);
    println!("fresh adapters vs base: {diff:e}");

    // pretend training moved B away from zero
    let moved: Vec<Tensor> = model
        .lora_tensors()
        .iter()
        .map(|t| t.map(|v| if v == 0.0 { 0.01 } else { v }))
        .collect::<Result<_, _>>()?;
    model.set_lora_tensors(&moved)?;
    let merged = model.merged();
    let adapted = model.forward_logits(&tokens)?;
    println!(
        "adapted vs base: {:.3e}, adapted vs merged: {:.3e}",
        adapted.max_abs_diff(&base.forward_logits(&tokens)?),
        adapted.max_abs_diff(&merged.forward_logits(&tokens)?)
    );
    println!("fingerprint kept by adapters: {}", model.base_fingerprint() == base.base_fingerprint());

    let p = merge_probe(42, 1000);
    println!(
        "{} random probes: zero-init identical {}, max merge error {:.3e}",
        p.probes, p.zero_init_identical, p.max_merge_error
    );
    Ok(())
}
