//! The nuisance learners on one regression and one classification task,
//! with cross-validated grid search choosing between model families.
//!
//! cargo run --release --example first_stage_learners

use agrocausal::learners::{default_searches, f1_score, r2_score, select_model, train_test_split, Task};
use agrocausal::synthetic::{generate_plm, SyntheticSpec};
use ndarray::Axis;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_plm(&SyntheticSpec {
        n: 1500,
        ..Default::default()
    })?;
    let x = data.features();
    let (y, t) = (data.outcomes(), data.treatments());
    let (train, test) = train_test_split(y.len(), 0.2, 1);
    let pick = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let (xt, xv) = (x.select(Axis(0), &train), x.select(Axis(0), &test));

    for (task, target) in [(Task::Regression, &y), (Task::Classification, &t)] {
        let (model, searches) = select_model(&default_searches(task, 1), xt.view(), &pick(target, &train), task)?;
        for s in &searches {
            println!("{task:?} {:<18} cv score {:.4}", s.best_spec.family(), s.best_score);
        }
        let (pt, pv) = (model.predict(xt.view()), model.predict(xv.view()));
        let score = |truth: &[f64], p: &[f64]| match task {
            Task::Regression => r2_score(truth, p),
            Task::Classification => {
                let labels: Vec<f64> = p.iter().map(|v| f64::from(u8::from(*v >= 0.5))).collect();
                f1_score(truth, &labels)
            }
        };
        println!(
            "{task:?} train {:.4} test {:.4}\n",
            score(&pick(target, &train), pt.as_slice().unwrap())?,
            score(&pick(target, &test), pv.as_slice().unwrap())?
        );
    }
    Ok(())
}
