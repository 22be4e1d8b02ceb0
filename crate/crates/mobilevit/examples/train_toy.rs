//! End-to-end pipeline at desk scale: synthesize a motif dataset, derive the
//! stratified 64:16:20 split, train the small hybrid model, and score the
//! held-out test split.

use mobilevit::data::{index_directory, load_split, render_audit, split_index, SplitSpec, SyntheticSpec};
use mobilevit::model::{preset, Model};
use mobilevit::train::{evaluate_accuracy, train_with_callback, TrainConfig};

fn main() -> mobilevit::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = SyntheticSpec { classes: 3, per_class: 40, size: 16, seed: 7 };
    let summary = mobilevit::data::synthesize_dataset(&spec, dir.path(), false)?;
    println!("synthesized {} images -> {}", summary.files_written, summary.root.display());

    let index = index_directory(dir.path(), &[])?;
    let splits = split_index(&index, &SplitSpec { seed: 7, ..Default::default() })?;
    print!("{}", render_audit(&splits));

    let train_set = load_split(&splits.train, spec.size)?;
    let val_set = load_split(&splits.val, spec.size)?;
    let test_set = load_split(&splits.test, spec.size)?;

    let model = Model::new(preset("xs_toy", spec.classes, spec.size)?, 7)?;
    let (total, trainable) = model.count_parameters();
    println!("xs_toy: {total} parameters ({trainable} trainable)");

    let cfg = TrainConfig { batch_size: 16, epochs: 12, seed: 7, ..Default::default() };
    let mut log = |s: &mobilevit::train::EpochStats| {
        println!(
            "epoch {:>2}  loss {:.4}  train {:.3}  val {:.3}  lr {:.5}",
            s.epoch, s.train_loss, s.train_acc, s.val_acc, s.lr
        );
        false
    };
    let result = train_with_callback(model, &train_set.set, &val_set.set, &cfg, Some(&mut log))?;
    let test_acc = evaluate_accuracy(&result.model, &test_set.set, 16)?;
    println!("best val acc {:.3}; test acc {:.3}", result.best_val_acc, test_acc);
    Ok(())
}
