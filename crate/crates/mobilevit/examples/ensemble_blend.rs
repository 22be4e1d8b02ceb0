//! Combine member prediction matrices three ways: plain averaging, accuracy-
//! proportional weighting, and a stacked logistic meta-learner.

use mobilevit::ensemble::{
    accuracy_weights, average_ensemble, stacked_apply, stacked_train, weighted_ensemble,
    PredictionMatrix, StackedConfig,
};
use mobilevit::Tensor;

fn matrix(tag: &str, rows: Vec<f64>, labels: Vec<usize>) -> mobilevit::Result<PredictionMatrix> {
    let n = labels.len();
    let paths: Vec<String> = (0..n).map(|i| format!("sample_{i}.png")).collect();
    PredictionMatrix::new(
        tag.to_string(),
        vec!["left".into(), "right".into()],
        paths,
        labels,
        Tensor::new(vec![n, 2], rows)?,
    )
}

fn main() -> mobilevit::Result<()> {
    // Member A is confident and right on the first four samples, member B on
    // the last four; each is mildly wrong elsewhere.
    let labels = vec![0, 0, 1, 1, 0, 1, 0, 1];
    let a = matrix(
        "member_a",
        vec![
            0.9, 0.1, 0.8, 0.2, 0.1, 0.9, 0.2, 0.8, // right
            0.45, 0.55, 0.55, 0.45, 0.4, 0.6, 0.6, 0.4, // wrong
        ],
        labels.clone(),
    )?;
    let b = matrix(
        "member_b",
        vec![
            0.48, 0.52, 0.52, 0.48, 0.45, 0.55, 0.55, 0.45, // wrong
            0.85, 0.15, 0.2, 0.8, 0.9, 0.1, 0.25, 0.75, // right
        ],
        labels,
    )?;
    println!("member_a accuracy {:.3}", a.accuracy()?);
    println!("member_b accuracy {:.3}", b.accuracy()?);

    let members = [&a, &b];
    let avg = average_ensemble(&members)?;
    println!("average ensemble accuracy {:.3}", avg.accuracy()?);

    let weights = accuracy_weights(&[a.accuracy()?, b.accuracy()?])?;
    let weighted = weighted_ensemble(&members, &weights)?;
    println!(
        "weighted ensemble (weights {:?}) accuracy {:.3}",
        weights.values().iter().map(|w| (w * 100.0).round() / 100.0).collect::<Vec<_>>(),
        weighted.accuracy()?
    );

    let meta = stacked_train(&members, &StackedConfig::default())?;
    let stacked = stacked_apply(&meta, &members)?;
    println!("stacked ensemble accuracy {:.3}", stacked.accuracy()?);
    Ok(())
}
