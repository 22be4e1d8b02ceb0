//! Train a small model to tell a planted square from other motifs, then
//! render a class-activation overlay showing where the evidence sits.

use mobilevit::data::{chw_to_hwc, synthesize_images, SyntheticSpec};
use mobilevit::model::{preset, Model};
use mobilevit::tensor::Tensor;
use mobilevit::train::{train, LabeledSet, TrainConfig};
use mobilevit::xai::{grad_cam, render_overlay, SaliencySource};

fn to_set(samples: &[mobilevit::data::SynthSample]) -> mobilevit::Result<LabeledSet> {
    let images = samples
        .iter()
        .map(|s| s.image.permute(&[2, 0, 1]))
        .collect::<mobilevit::Result<Vec<Tensor>>>()?;
    LabeledSet::new(images, samples.iter().map(|s| s.label).collect())
}

fn main() -> mobilevit::Result<()> {
    let size = 16;
    let train_samples = synthesize_images(&SyntheticSpec { classes: 2, per_class: 24, size, seed: 3 })?;
    let probe_samples = synthesize_images(&SyntheticSpec { classes: 2, per_class: 4, size, seed: 91 })?;
    let train_set = to_set(&train_samples)?;
    let probe_set = to_set(&probe_samples)?;

    let model = Model::new(preset("xs_toy", 2, size)?, 3)?;
    let cfg = TrainConfig { batch_size: 12, epochs: 6, seed: 3, ..Default::default() };
    let result = train(model, &train_set, &probe_set, &cfg)?;
    println!("val acc {:.3}", result.best_val_acc);

    // Explain the first held-out square image.
    let sample = &probe_samples[0];
    let img_chw = sample.image.permute(&[2, 0, 1])?;
    let map = grad_cam(&result.model, &img_chw, 0)?;
    println!("saliency at layer '{}', peak {:.3}", map.layer, map.values.data().iter().cloned().fold(0.0, f64::max));
    let (r0, c0, r1, c1) = sample.motif_box;
    let mut inside = 0.0;
    let mut outside = 0.0;
    let (mut n_in, mut n_out) = (0usize, 0usize);
    for r in 0..size {
        for c in 0..size {
            if r >= r0 && r < r1 && c >= c0 && c < c1 {
                inside += map.values.at(&[r, c]);
                n_in += 1;
            } else {
                outside += map.values.at(&[r, c]);
                n_out += 1;
            }
        }
    }
    println!(
        "mean saliency inside the planted square {:.3} vs outside {:.3}",
        inside / n_in as f64,
        outside / n_out.max(1) as f64
    );

    std::fs::create_dir_all("examples_out")?;
    let out = std::path::Path::new("examples_out/saliency_overlay.png");
    render_overlay(&chw_to_hwc(&img_chw)?, SaliencySource::Heat(&map), out)?;
    println!("overlay written to {}", out.display());
    Ok(())
}
