//! Assembles the full model and each single-component ablation, showing how
//! the parameter manifest changes.
//!
//! Run with: `cargo run --example ablation_grid`

use std::collections::BTreeSet;

use seqmark::config::ModelConfig;
use seqmark::model::{Ablation, Model};

fn groups(model: &Model) -> BTreeSet<String> {
    model
        .store
        .iter()
        .map(|(_, name, _)| match name.rsplit_once('.') {
            Some((prefix, _)) => prefix.to_string(),
            None => name.to_string(),
        })
        .collect()
}

fn main() -> seqmark::Result<()> {
    let base = ModelConfig {
        n_max: 24,
        vocab_size: 64,
        ..ModelConfig::default()
    };

    let full = Model::assemble(base.clone())?;
    let full_groups = groups(&full);
    println!(
        "{:<14}  {:>10}  changes against the full model",
        "variant", "scalars"
    );
    println!("{:<14}  {:>10}  -", "full", full.store.total_scalars());

    for ablation in Ablation::ALL {
        let mut config = base.clone();
        ablation.apply(&mut config);
        let model = Model::assemble(config)?;
        let these = groups(&model);
        let dropped: Vec<&str> = full_groups.difference(&these).map(String::as_str).collect();
        let added: Vec<&str> = these.difference(&full_groups).map(String::as_str).collect();
        let mut delta = String::new();
        if !dropped.is_empty() {
            delta.push_str(&format!("-{}", dropped.join(" -")));
        }
        if !added.is_empty() {
            if !delta.is_empty() {
                delta.push(' ');
            }
            delta.push_str(&format!("+{}", added.join(" +")));
        }
        if delta.is_empty() {
            delta.push('-');
        }
        println!(
            "{:<14}  {:>10}  {delta}",
            ablation.name(),
            model.store.total_scalars()
        );
    }
    Ok(())
}
