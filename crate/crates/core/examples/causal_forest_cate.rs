//! Heterogeneous effects from an honest causal forest on cross-fitted
//! residuals, summarized by a shallow interpretation tree.
//!
//! cargo run --release --example causal_forest_cate

use agrocausal::causal_forest::interpret_tree;
use agrocausal::dml::{crossfit_residualize, NuisanceSpec};
use agrocausal::learners::{ForestParams, LearnerSpec};
use agrocausal::synthetic::{generate_plm, SyntheticSpec, ThetaSpec};
use agrocausal::{CausalForest, CausalForestSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_plm(&SyntheticSpec {
        n: 2000,
        theta: ThetaSpec::Step {
            feature: 0,
            threshold: 0.5,
            value: 2.0,
        },
        seed: 3,
        ..Default::default()
    })?;
    let x = data.features();
    let nuisance = NuisanceSpec::fixed(
        LearnerSpec::RandomForest(ForestParams {
            n_trees: 100,
            min_samples_leaf: 20,
            ..Default::default()
        }),
        LearnerSpec::Logistic { l2_penalty: 0.0 },
    );
    let res = crossfit_residualize(x.view(), &data.outcomes(), &data.treatments(), &nuisance, 3)?;

    let forest = CausalForest::fit(
        x.view(),
        &res.y_res,
        &res.t_res,
        &CausalForestSpec {
            n_trees: 300,
            seed: 3,
            ..Default::default()
        },
    )?;
    let cates = forest.predict(x.view())?;
    let rmse = (cates.iter().zip(&data.true_cate).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / cates.len() as f64).sqrt();
    println!("{} trees, CATE RMSE against the oracle {rmse:.3}\n", forest.trees.len());

    let tree = interpret_tree(x.view(), &data.table.feature_names, cates.as_slice().unwrap(), 2, 1)?;
    print!("{}", tree.render_text());
    Ok(())
}
