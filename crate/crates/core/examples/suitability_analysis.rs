//! Post-estimation analysis: feature correlations with the CATEs, a CATE
//! histogram, map exports and a counterfactual shift of one feature.
//!
//! cargo run --release --example suitability_analysis -- [out_dir]

use agrocausal::analysis::{
    cate_histogram, counterfactual_shift, export_map, spearman_table, summarize_cates, ShiftSpec, SuitabilityMap,
};
use agrocausal::dml::{fit_dml_table, DmlConfig, FinalStage, NuisanceSpec};
use agrocausal::learners::LearnerSpec;
use agrocausal::synthetic::{generate_plm, SyntheticSpec, ThetaSpec};
use agrocausal::CausalForestSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(std::env::temp_dir, Into::into);
    let data = generate_plm(&SyntheticSpec {
        n: 1500,
        theta: ThetaSpec::Linear {
            a: vec![2.0, 0.0, -1.0],
            b: 0.0,
        },
        seed: 4,
        ..Default::default()
    })?;
    let table = &data.table;
    let fit = fit_dml_table(
        table,
        &DmlConfig {
            nuisance: NuisanceSpec::fixed(LearnerSpec::Lasso { l1_penalty: 0.0 }, LearnerSpec::Logistic { l2_penalty: 0.0 }),
            final_stage: FinalStage::CausalForest {
                spec: CausalForestSpec {
                    n_trees: 200,
                    ..Default::default()
                },
            },
            seed: 4,
            ..Default::default()
        },
    )?;
    let x = table.feature_matrix();

    for e in spearman_table(x.view(), &table.feature_names, &fit.cates)? {
        println!("spearman {:<3} {}", e.feature, e.rho.map_or("constant".into(), |r| format!("{r:+.3}")));
    }
    let summary = summarize_cates(&fit.cates)?;
    println!("{}", serde_json::to_string(&summary)?);
    let hist = cate_histogram(&fit.cates, 10)?;
    for (w, c) in hist.edges.windows(2).zip(&hist.counts) {
        println!("[{:+.2}, {:+.2}) {}", w[0], w[1], "#".repeat(c / 10));
    }

    let map = SuitabilityMap::build(table, &fit.cates)?;
    let [csv, geojson] = export_map(&map, &out, "suitability_map")?;
    println!("wrote {} and {}", csv.display(), geojson.display());

    let shift = counterfactual_shift(&fit.model, x.view(), &ShiftSpec::new([("x1".to_string(), 0.1)]))?;
    println!(
        "x1 + 0.1: mean CATE change {:+.3}, {:.1}% of cells leave the training range",
        shift.mean_change,
        100.0 * shift.flagged_fraction
    );
    Ok(())
}
