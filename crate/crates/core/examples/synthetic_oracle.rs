//! Synthetic partially linear data with a known effect function. Writes the
//! sample, with its oracle CATE column, to stdout.
//!
//! cargo run --example synthetic_oracle > sample.csv

use agrocausal::synthetic::{difference_in_means, generate_plm, Assignment, SyntheticSpec, ThetaSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SyntheticSpec {
        n: 200,
        d: 4,
        theta: ThetaSpec::Quadratic {
            feature: 0,
            a: 1.0,
            b: 1.0,
            c: 0.5,
        },
        assignment: Assignment::ContinuousMedian,
        uniform_range: (-1.0, 1.0),
        seed: 12,
        ..Default::default()
    };
    let data = generate_plm(&spec)?;
    let treated = data.treatments().iter().filter(|t| **t == 1.0).count();
    eprintln!(
        "theta(0.5) = {:.3}, {treated} of {} treated, difference in means {:.3}",
        spec.oracle_cate(&[0.5, 0.0, 0.0, 0.0])?,
        spec.n,
        difference_in_means(&data.outcomes(), &data.treatments())
    );
    data.write_csv(std::io::stdout())?;
    Ok(())
}
