//! Shapley attribution over image patches: recover analytic values on an
//! additive scoring function, then attribute a tiny model's class
//! probability and verify the efficiency identity.

use mobilevit::model::{micro_config, Model};
use mobilevit::tensor::Tensor;
use mobilevit::xai::{shapley_patches, shapley_patches_fn};

fn main() -> mobilevit::Result<()> {
    // Additive score: sum of weighted patch means. The exact Shapley value
    // of patch p is w_p * (mean(image_p) - mean(baseline_p)).
    let image = Tensor::from_fn(&[1, 8, 8], |ix| ((ix[1] * 8 + ix[2]) % 7) as f64 / 7.0);
    let baseline = Tensor::full(&[1, 8, 8], 0.0);
    let weights = [1.0, -0.5, 2.0, 0.25];
    let patch_mean = |t: &Tensor, p: usize| {
        let (pr, pc) = (p / 2, p % 2);
        let mut sum = 0.0;
        for dy in 0..4 {
            for dx in 0..4 {
                sum += t.at(&[0, pr * 4 + dy, pc * 4 + dx]);
            }
        }
        sum / 16.0
    };
    let score = |t: &Tensor| -> mobilevit::Result<f64> {
        Ok((0..4).map(|p| weights[p] * patch_mean(t, p)).sum())
    };
    let map = shapley_patches_fn(score, &image, 4, &baseline, 64, 1)?;
    println!("additive surrogate, {} permutations:", map.permutations);
    for p in 0..4 {
        let analytic = weights[p] * (patch_mean(&image, p) - patch_mean(&baseline, p));
        println!("  patch {p}: estimate {:+.5}  analytic {:+.5}", map.values[p], analytic);
    }

    // The same estimator on a real model's class-0 probability.
    let model = Model::new(micro_config(3, 8), 11)?;
    let img = Tensor::from_fn(&[2, 8, 8], |ix| ((ix[0] + ix[1] + ix[2]) % 5) as f64 / 5.0);
    let base = Tensor::full(&[2, 8, 8], 0.5);
    let map = shapley_patches(&model, &img, 0, 4, &base, 16, 2)?;
    println!("model probability attribution (grid {:?}):", map.grid);
    for (p, v) in map.values.iter().enumerate() {
        println!("  patch {p}: {v:+.5}");
    }
    let total: f64 = map.values.iter().sum();
    let p_img = model.predict_probs(&img.reshape(&[1, 2, 8, 8])?)?.at(&[0, 0]);
    let p_base = model.predict_probs(&base.reshape(&[1, 2, 8, 8])?)?.at(&[0, 0]);
    println!(
        "efficiency: sum {:+.6} vs f(image) - f(baseline) = {:+.6}",
        total,
        p_img - p_base
    );
    Ok(())
}
