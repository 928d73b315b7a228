//! Out-of-fold propensity scores and trimming to the region of overlap,
//! with a strongly confounded design so the trimming bites.
//!
//! cargo run --release --example overlap_trimming

use agrocausal::learners::LearnerSpec;
use agrocausal::overlap::{estimate_propensity, trim_overlap, PropensitySpec};
use agrocausal::synthetic::{generate_plm, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for gamma in [0.5, 3.0] {
        let data = generate_plm(&SyntheticSpec {
            n: 2000,
            confounding_strength: gamma,
            seed: 5,
            ..Default::default()
        })?;
        let x = data.features();
        for model in [LearnerSpec::Logistic { l2_penalty: 0.0 }, PropensitySpec::default().model] {
            let spec = PropensitySpec {
                model,
                ..Default::default()
            };
            let scores = estimate_propensity(x.view(), &data.treatments(), &spec)?;
            let (kept, _) = trim_overlap(&scores, 0.2, 0.8)?;
            let err = scores.iter().zip(&data.propensity).map(|(a, b)| (a - b).abs()).sum::<f64>() / scores.len() as f64;
            println!(
                "gamma {gamma}: {:<40} kept {:>4}/{} mean |e_hat - e| {err:.3}",
                spec.describe(),
                kept.len(),
                scores.len()
            );
        }
    }
    Ok(())
}
