//! Cross-fitted residualization and a linear final stage. The naive
//! difference in means is biased by confounding; the orthogonalized
//! estimate is not.
//!
//! cargo run --release --example dml_ate

use agrocausal::dml::{fit_dml, DmlConfig, FinalStage, LinearBasis, NuisanceSpec};
use agrocausal::learners::{ForestParams, LearnerSpec};
use agrocausal::synthetic::{difference_in_means, generate_plm, SyntheticSpec, ThetaSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_plm(&SyntheticSpec {
        n: 3000,
        theta: ThetaSpec::Linear { a: vec![1.0], b: 0.5 },
        confounding_strength: 1.5,
        seed: 8,
        ..Default::default()
    })?;
    let x = data.features();
    let (y, t) = (data.outcomes(), data.treatments());
    let truth = data.true_cate.iter().sum::<f64>() / data.true_cate.len() as f64;
    println!("true ATE {truth:.3}, difference in means {:.3}", difference_in_means(&y, &t));

    let nuisance = NuisanceSpec::fixed(
        LearnerSpec::RandomForest(ForestParams {
            n_trees: 100,
            min_samples_leaf: 20,
            ..Default::default()
        }),
        LearnerSpec::Logistic { l2_penalty: 0.0 },
    );
    for basis in [LinearBasis::InterceptOnly, LinearBasis::LinearInX] {
        let fit = fit_dml(
            x.view(),
            &data.table.feature_names,
            &y,
            &t,
            &DmlConfig {
                nuisance: nuisance.clone(),
                final_stage: FinalStage::Linear { basis },
                seed: 8,
                ..Default::default()
            },
        )?;
        let m = &fit.model;
        println!(
            "{basis:?}: ATE {:.3} (se {:.3}, 95% CI {:.3} to {:.3})",
            m.ate, m.ate_se, m.ate_ci.0, m.ate_ci.1
        );
        if let agrocausal::dml::CateEstimator::Linear(l) = &m.estimator {
            println!("  coefficients {:?}", l.coefficients.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>());
        }
        if let Some(fs) = &m.first_stage {
            println!("  first stage {}", serde_json::to_string(fs)?);
        }
    }
    Ok(())
}
