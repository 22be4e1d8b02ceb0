//! Saliency: gradient-weighted class activation maps (Grad-CAM) over a named
//! feature map, Monte-Carlo patch Shapley attribution, and overlay rendering.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::{resize_bilinear, write_image};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Mode;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Per-pixel saliency in `[0, 1]` for one class, taken at a named layer.
#[derive(Clone, Debug)]
pub struct Heatmap {
    /// `(H, W)` values, normalized so the peak is 1 unless the map is all
    /// zero (degenerate gradient).
    pub values: Tensor,
    pub layer: String,
    pub class_id: usize,
}

/// Signed per-patch attributions from permutation sampling.
#[derive(Clone, Debug)]
pub struct ShapleyMap {
    /// Running means, row-major over the patch grid.
    pub values: Vec<f64>,
    /// Marginal contributions accumulated per patch.
    pub counts: Vec<usize>,
    /// `(rows, cols)` of the patch grid; tiles the image exactly.
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub baseline: String,
    pub permutations: usize,
}

impl ShapleyMap {
    pub fn value_grid(&self) -> Tensor {
        Tensor::from_fn(&[self.grid.0, self.grid.1], |ix| self.values[ix[0] * self.grid.1 + ix[1]])
    }

    /// Expand patch values to a piecewise-constant `(H, W)` map.
    pub fn pixel_map(&self) -> Tensor {
        let (gr, gc) = self.grid;
        let ps = self.patch_size;
        Tensor::from_fn(&[gr * ps, gc * ps], |ix| self.values[(ix[0] / ps) * gc + ix[1] / ps])
    }
}

/// Channel-importance map: per-channel weights are the spatial mean of the
/// class-score gradient, the weighted activation sum is rectified, and the
/// result is peak-normalized (all-zero stays all-zero).
fn cam_from_parts(act: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let s = act.shape();
    if s.len() != 4 || s[0] != 1 || grad.shape() != s {
        return Err(Error::shape(
            "cam",
            format!("expected matching (1,C,h,w) activation and gradient, got {:?} and {:?}", s, grad.shape()),
        ));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let hw = (h * w) as f64;
    let mut alpha = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                sum += grad.at(&[0, ch, y, x]);
            }
        }
        alpha[ch] = sum / hw;
    }
    let mut cam = Tensor::from_fn(&[h, w], |ix| {
        let mut v = 0.0;
        for ch in 0..c {
            v += alpha[ch] * act.at(&[0, ch, ix[0], ix[1]]);
        }
        v.max(0.0)
    });
    let peak = cam.data().iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        cam = cam.map(|v| v / peak);
    }
    Ok(cam)
}

/// Saliency for `class_id` at the output of the last stage (the final
/// block's fusion convolution feeds it).
pub fn grad_cam(model: &Model, image: &Tensor, class_id: usize) -> Result<Heatmap> {
    let layer = model
        .stage_names()
        .last()
        .cloned()
        .ok_or_else(|| Error::Invalid("model has no stages".into()))?;
    grad_cam_at(model, image, class_id, &layer)
}

/// Saliency taken at a specific stage output, chosen by name.
pub fn grad_cam_at(model: &Model, image: &Tensor, class_id: usize, layer: &str) -> Result<Heatmap> {
    let k = model.config.num_classes;
    if class_id >= k {
        return Err(Error::Invalid(format!("class {class_id} out of range for {k} classes")));
    }
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("grad_cam", format!("expected (C,H,W), got {:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    let batch = image.reshape(&[1, s[0], h, w])?;
    let mut tape = Tape::new();
    let x = tape.leaf(&batch);
    let parts = model.forward_on(&mut tape, x, None, Mode::Eval)?;
    let act = parts
        .activations
        .iter()
        .find(|(name, _)| name == layer)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            Error::Invalid(format!("unknown layer '{}'; stages: {}", layer, model.stage_names().join(", ")))
        })?;
    // Score: the raw class logit, selected with a one-hot mask.
    let mask = tape.constant(&Tensor::from_fn(&[1, k], |ix| if ix[1] == class_id { 1.0 } else { 0.0 }));
    let picked = tape.mul(parts.logits, mask)?;
    let score = tape.sum_all(picked)?;
    let grads = tape.backward(score)?;
    let grad = grads.get_or_zeros(&tape, act);
    let cam = cam_from_parts(tape.value(act), &grad)?;
    let cs = cam.shape().to_vec();
    let up = resize_bilinear(&cam.reshape(&[cs[0], cs[1], 1])?, h, w)?.reshape(&[h, w])?;
    // Bilinear interpolation of values in [0,1] stays in [0,1]; clamp only
    // guards against rounding at the boundaries.
    let values = up.map(|v| v.clamp(0.0, 1.0));
    Ok(Heatmap { values, layer: layer.to_string(), class_id })
}

/// Elementwise mean of a set of same-shape images, the usual attribution
/// baseline when dataset statistics are available.
pub fn mean_image(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Invalid("mean_image needs at least one image".into()))?;
    let mut acc = vec![0.0; first.data().len()];
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::shape("mean_image", "images differ in shape".to_string()));
        }
        for (a, &v) in acc.iter_mut().zip(img.data()) {
            *a += v;
        }
    }
    let n = images.len() as f64;
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|v| v / n).collect())
}

/// Attribution of the model's `class_id` probability over image patches.
pub fn shapley_patches(
    model: &Model,
    image: &Tensor,
    class_id: usize,
    patch_size: usize,
    baseline: &Tensor,
    permutations: usize,
    seed: u64,
) -> Result<ShapleyMap> {
    let k = model.config.num_classes;
    if class_id >= k {
        return Err(Error::Invalid(format!("class {class_id} out of range for {k} classes")));
    }
    let s = image.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("shapley_patches", format!("expected (C,H,W), got {:?}", s)));
    }
    let score = |img: &Tensor| -> Result<f64> {
        let batch = img.reshape(&[1, s[0], s[1], s[2]])?;
        let probs = model.predict_probs(&batch)?;
        Ok(probs.at(&[0, class_id]))
    };
    shapley_patches_fn(score, image, patch_size, baseline, permutations, seed)
}

/// Permutation-sampling Shapley estimator over non-overlapping patches of a
/// `(C, H, W)` image, for any scalar scoring function. Patches are revealed
/// (baseline pixels replaced by image pixels) in sampled orders; each
/// sampled permutation is also replayed reversed to pair high and low
/// positions. A patch whose pixels equal the baseline contributes exactly
/// zero, and the per-permutation marginals telescope, so the attributions
/// sum to `score(image) - score(baseline)` up to accumulation error.
pub fn shapley_patches_fn(
    mut score: impl FnMut(&Tensor) -> Result<f64>,
    image: &Tensor,
    patch_size: usize,
    baseline: &Tensor,
    permutations: usize,
    seed: u64,
) -> Result<ShapleyMap> {
    let s = image.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("shapley_patches", format!("expected (C,H,W), got {:?}", s)));
    }
    if baseline.shape() != s.as_slice() {
        return Err(Error::shape(
            "shapley_patches",
            format!("baseline shape {:?} does not match image {:?}", baseline.shape(), s),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Invalid(format!(
            "patch size {patch_size} does not tile a {h}x{w} image"
        )));
    }
    if permutations == 0 {
        return Err(Error::Invalid("need at least one permutation".into()));
    }
    let (gr, gc) = (h / patch_size, w / patch_size);
    let n_patches = gr * gc;

    // Row segments covered by one patch, as flat ranges into the CHW buffer.
    let patch_rows = |p: usize| -> Vec<std::ops::Range<usize>> {
        let (pr, pc) = (p / gc, p % gc);
        let mut rows = Vec::with_capacity(c * patch_size);
        for ch in 0..c {
            for dy in 0..patch_size {
                let y = pr * patch_size + dy;
                let start = ch * h * w + y * w + pc * patch_size;
                rows.push(start..start + patch_size);
            }
        }
        rows
    };
    let img_data = image.data();
    let base_data = baseline.data();
    let is_dummy: Vec<bool> = (0..n_patches)
        .map(|p| patch_rows(p).into_iter().all(|r| img_data[r.clone()] == base_data[r]))
        .collect();

    let v_empty = score(baseline)?;
    let v_full = score(image)?;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_patches).collect();
    let mut sums = vec![0.0; n_patches];
    let mut counts = vec![0usize; n_patches];
    let mut used = 0;
    while used < permutations {
        order.shuffle(&mut rng);
        let forward = order.clone();
        let mut reversed = forward.clone();
        reversed.reverse();
        for perm in [forward, reversed] {
            if used == permutations {
                break;
            }
            let mut cur = base_data.to_vec();
            let mut revealed = 0usize;
            let mut prev = v_empty;
            for &p in &perm {
                revealed += 1;
                let marginal = if is_dummy[p] {
                    // Identical pixels: the input tensor is unchanged, so
                    // the contribution is identically zero.
                    0.0
                } else {
                    for r in patch_rows(p) {
                        cur[r.clone()].copy_from_slice(&img_data[r]);
                    }
                    let value = if revealed == n_patches {
                        // All patches revealed: the buffer equals the image
                        // bitwise, so reuse its score.
                        v_full
                    } else {
                        score(&Tensor::new(s.clone(), cur.clone())?)?
                    };
                    let m = value - prev;
                    prev = value;
                    m
                };
                sums[p] += marginal;
                counts[p] += 1;
            }
            used += 1;
        }
    }
    let values = sums.iter().zip(&counts).map(|(&s, &n)| s / n as f64).collect();
    let base_mean = base_data.iter().sum::<f64>() / base_data.len() as f64;
    Ok(ShapleyMap {
        values,
        counts,
        grid: (gr, gc),
        patch_size,
        baseline: format!("mean {base_mean:.4}"),
        permutations,
    })
}

// ---- overlays ----

/// Red-intensity blend of a heatmap onto an `(H, W, 3)` image at alpha 0.5.
/// An all-zero map yields the uniformly dimmed original.
pub fn cam_overlay(image_hwc: &Tensor, map: &Heatmap) -> Result<Tensor> {
    let s = image_hwc.shape();
    let m = map.values.shape();
    if s.len() != 3 || s[2] != 3 || m != [s[0], s[1]] {
        return Err(Error::shape(
            "cam_overlay",
            format!("image {:?} and map {:?} do not align", s, m),
        ));
    }
    Ok(Tensor::from_fn(s, |ix| {
        let tint = if ix[2] == 0 { map.values.at(&[ix[0], ix[1]]) } else { 0.0 };
        0.5 * image_hwc.at(ix) + 0.5 * tint
    }))
}

/// Diverging blend: positive attributions tint red, negative blue, scaled
/// by the largest absolute value (zero map stays neutral).
pub fn shapley_overlay(image_hwc: &Tensor, map: &ShapleyMap) -> Result<Tensor> {
    let s = image_hwc.shape();
    let pix = map.pixel_map();
    if s.len() != 3 || s[2] != 3 || pix.shape() != [s[0], s[1]] {
        return Err(Error::shape(
            "shapley_overlay",
            format!("image {:?} and patch grid {:?}x{} do not align", s, map.grid, map.patch_size),
        ));
    }
    let scale = map.values.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    Ok(Tensor::from_fn(s, |ix| {
        let t = if scale > 0.0 { pix.at(&[ix[0], ix[1]]) / scale } else { 0.0 };
        let tint = match ix[2] {
            0 => t.max(0.0),
            2 => (-t).max(0.0),
            _ => 0.0,
        };
        0.5 * image_hwc.at(ix) + 0.5 * tint
    }))
}

pub enum SaliencySource<'a> {
    Heat(&'a Heatmap),
    Patches(&'a ShapleyMap),
}

/// Render a saliency overlay and write it as PNG or binary PPM by file
/// extension.
pub fn render_overlay(image_hwc: &Tensor, map: SaliencySource, path: &Path) -> Result<()> {
    let blended = match map {
        SaliencySource::Heat(hm) => cam_overlay(image_hwc, hm)?,
        SaliencySource::Patches(sm) => shapley_overlay(image_hwc, sm)?,
    };
    write_image(&blended, path)
}

/// Patch values as CSV rows `row,col,value` for external inspection.
pub fn shapley_csv(map: &ShapleyMap) -> String {
    let mut out = String::from("row,col,value\n");
    for r in 0..map.grid.0 {
        for c in 0..map.grid.1 {
            out.push_str(&format!("{},{},{}\n", r, c, map.values[r * map.grid.1 + c]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{micro_config, Model};

    fn micro_model(seed: u64) -> Model {
        Model::new(micro_config(3, 8), seed).unwrap()
    }

    fn micro_image(seed: u64) -> Tensor {
        let mut state = seed.wrapping_add(99);
        Tensor::from_fn(&[2, 8, 8], |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) as f64 / (1u64 << 24) as f64
        })
    }

    #[test]
    fn cam_matches_hand_gradient_oracle() {
        // Single channel, gradient constant 0.25 everywhere (a head that
        // global-averages the map with weight 1): weights equal the mean
        // gradient, so the map is rectified 0.25*A, then peak-normalized.
        let act = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.0]).unwrap();
        let grad = Tensor::full(&[1, 1, 2, 2], 0.25);
        let cam = cam_from_parts(&act, &grad).unwrap();
        let expect = [1.0 / 3.0, 0.0, 1.0, 0.0];
        for (got, want) in cam.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        // Negative weights on a positive map rectify to all-zero.
        let pos = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 0.5]).unwrap();
        let neg = cam_from_parts(&pos, &Tensor::full(&[1, 1, 2, 2], -1.0)).unwrap();
        assert!(neg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_head_row_gives_all_zero_map() {
        let mut model = micro_model(3);
        let head = model.params.get("head.weight").unwrap().clone();
        let hs = head.shape().to_vec();
        let zeroed = Tensor::from_fn(&hs, |ix| if ix[0] == 0 { 0.0 } else { head.at(ix) });
        model.params.set("head.weight", zeroed).unwrap();
        let img = micro_image(1);
        let map = grad_cam(&model, &img, 0).unwrap();
        assert_eq!(map.values.shape(), &[8, 8]);
        assert!(map.values.data().iter().all(|&v| v == 0.0));
        // The untouched class still produces signal.
        let other = grad_cam(&model, &img, 1).unwrap();
        assert!(other.values.data().iter().any(|&v| v > 0.0));
        assert!(other.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cam_is_invariant_to_positive_score_rescaling() {
        let model = micro_model(7);
        let img = micro_image(2);
        let base = grad_cam(&model, &img, 1).unwrap();
        let mut scaled_model = model.clone();
        let head = scaled_model.params.get("head.weight").unwrap().clone();
        let hs = head.shape().to_vec();
        let scaled = Tensor::from_fn(&hs, |ix| if ix[0] == 1 { 3.0 * head.at(ix) } else { head.at(ix) });
        scaled_model.params.set("head.weight", scaled).unwrap();
        let rescaled = grad_cam(&scaled_model, &img, 1).unwrap();
        assert!(base.values.max_abs_diff(&rescaled.values) < 1e-9);
    }

    #[test]
    fn cam_rejects_bad_class_and_unknown_layer() {
        let model = micro_model(0);
        let img = micro_image(0);
        assert!(grad_cam(&model, &img, 5).is_err());
        let err = grad_cam_at(&model, &img, 0, "nope").unwrap_err().to_string();
        assert!(err.contains("nope") && err.contains("stem"), "{err}");
        let named = grad_cam_at(&model, &img, 0, "stem").unwrap();
        assert_eq!(named.layer, "stem");
    }

    fn patch_mean(t: &Tensor, ps: usize, gc: usize, p: usize) -> f64 {
        let s = t.shape();
        let c = s[0];
        let (pr, pc) = (p / gc, p % gc);
        let mut sum = 0.0;
        for ch in 0..c {
            for dy in 0..ps {
                for dx in 0..ps {
                    sum += t.at(&[ch, pr * ps + dy, pc * ps + dx]);
                }
            }
        }
        sum / (c * ps * ps) as f64
    }

    #[test]
    fn shapley_recovers_additive_surrogate_exactly() {
        // For an additive score every permutation yields the same marginal,
        // so estimates equal the analytic values up to float error even at
        // small sample counts.
        let img = micro_image(5).reshape(&[1, 8, 16]).unwrap();
        let base = Tensor::full(&[1, 8, 16], 0.25);
        let weights = [0.5, -1.0, 2.0, 0.75, -0.25, 1.5, 0.0, 3.0];
        let f = |x: &Tensor| -> crate::error::Result<f64> {
            Ok((0..8).map(|p| weights[p] * patch_mean(x, 4, 4, p)).sum())
        };
        let map = shapley_patches_fn(f, &img, 4, &base, 16, 42).unwrap();
        assert_eq!(map.grid, (2, 4));
        for p in 0..8 {
            let analytic = weights[p] * (patch_mean(&img, 4, 4, p) - patch_mean(&base, 4, 4, p));
            assert!(
                (map.values[p] - analytic).abs() < 1e-2,
                "patch {p}: {} vs {analytic}",
                map.values[p]
            );
            assert_eq!(map.counts[p], 16);
        }
    }

    #[test]
    fn shapley_dummy_patch_is_exactly_zero_and_efficiency_holds() {
        let mut data = micro_image(8).data().to_vec();
        let base = Tensor::full(&[2, 8, 8], 0.5);
        // Make patch (0,1) of a 4x4 grid identical to the baseline.
        for ch in 0..2 {
            for y in 0..4 {
                for x in 4..8 {
                    data[ch * 64 + y * 8 + x] = 0.5;
                }
            }
        }
        let img = Tensor::new(vec![2, 8, 8], data).unwrap();
        let f = |x: &Tensor| -> crate::error::Result<f64> {
            let m = x.data().iter().sum::<f64>() / x.data().len() as f64;
            Ok((3.0 * m).tanh())
        };
        let map = shapley_patches_fn(f, &img, 4, &base, 9, 3).unwrap();
        assert_eq!(map.values[1], 0.0);
        let total: f64 = map.values.iter().sum();
        let expected = f(&img).unwrap() - f(&base).unwrap();
        assert!((total - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{total} vs {expected}");
    }

    #[test]
    fn shapley_null_contrast_and_seeded_determinism() {
        let img = micro_image(4);
        let same = shapley_patches_fn(|x| Ok(x.data().iter().sum()), &img, 4, &img, 5, 0).unwrap();
        assert!(same.values.iter().all(|&v| v == 0.0));
        let base = Tensor::full(&[2, 8, 8], 0.0);
        let f = |x: &Tensor| -> crate::error::Result<f64> {
            let m = x.data().iter().sum::<f64>() / 128.0;
            Ok(m * m)
        };
        let a = shapley_patches_fn(f, &img, 2, &base, 7, 11).unwrap();
        let b = shapley_patches_fn(f, &img, 2, &base, 7, 11).unwrap();
        assert_eq!(a.values, b.values);
        let c = shapley_patches_fn(f, &img, 2, &base, 7, 12).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn shapley_symmetric_patches_get_equal_estimates() {
        // Two patches with identical means have identical marginals in an
        // additive score, so their estimates coincide.
        let mut data = vec![0.0; 64];
        for y in 0..4 {
            for x in 0..4 {
                data[y * 8 + x] = 0.8;
                data[y * 8 + 4 + x] = if (y + x) % 2 == 0 { 0.6 } else { 1.0 };
            }
        }
        let img = Tensor::new(vec![1, 8, 8], data).unwrap();
        let base = Tensor::full(&[1, 8, 8], 0.0);
        let f = |x: &Tensor| -> crate::error::Result<f64> { Ok(x.data().iter().sum()) };
        let map = shapley_patches_fn(f, &img, 4, &base, 8, 2).unwrap();
        assert!((map.values[0] - map.values[1]).abs() < 1e-9);
    }

    #[test]
    fn shapley_rejects_bad_geometry() {
        let img = micro_image(0);
        let base = Tensor::full(&[2, 8, 8], 0.0);
        assert!(shapley_patches_fn(|_| Ok(0.0), &img, 3, &base, 4, 0).is_err());
        assert!(shapley_patches_fn(|_| Ok(0.0), &img, 4, &base, 0, 0).is_err());
        let wrong = Tensor::full(&[2, 8, 4], 0.0);
        assert!(shapley_patches_fn(|_| Ok(0.0), &img, 4, &wrong, 4, 0).is_err());
    }

    #[test]
    fn model_shapley_is_seed_deterministic() {
        let model = micro_model(1);
        let img = micro_image(3);
        let base = Tensor::full(&[2, 8, 8], 0.5);
        let a = shapley_patches(&model, &img, 0, 4, &base, 3, 7).unwrap();
        let b = shapley_patches(&model, &img, 0, 4, &base, 3, 7).unwrap();
        assert_eq!(a.values, b.values);
        assert!(shapley_patches(&model, &img, 9, 4, &base, 3, 7).is_err());
    }

    #[test]
    fn overlays_blend_tint_and_respect_sign() {
        let img = Tensor::full(&[4, 4, 3], 0.4);
        let zero = Heatmap { values: Tensor::full(&[4, 4], 0.0), layer: "l".into(), class_id: 0 };
        let dimmed = cam_overlay(&img, &zero).unwrap();
        assert!(dimmed.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
        let map = ShapleyMap {
            values: vec![1.0, 0.0, 0.0, 0.0],
            counts: vec![1; 4],
            grid: (2, 2),
            patch_size: 2,
            baseline: "test".into(),
            permutations: 1,
        };
        let over = shapley_overlay(&img, &map).unwrap();
        // Red tint confined to the first patch; blue untouched everywhere.
        assert!((over.at(&[0, 0, 0]) - 0.7).abs() < 1e-12);
        assert!((over.at(&[0, 0, 2]) - 0.2).abs() < 1e-12);
        assert!((over.at(&[3, 3, 0]) - 0.2).abs() < 1e-12);
        let mut flipped = map.clone();
        flipped.values = map.values.iter().map(|v| -v).collect();
        let neg = shapley_overlay(&img, &flipped).unwrap();
        assert!((neg.at(&[0, 0, 2]) - 0.7).abs() < 1e-12);
        assert!((neg.at(&[0, 0, 0]) - 0.2).abs() < 1e-12);
        // Zero scale is neutral.
        let mut null = map.clone();
        null.values = vec![0.0; 4];
        let flat = shapley_overlay(&img, &null).unwrap();
        assert!(flat.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn render_overlay_writes_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::full(&[8, 8, 3], 0.3);
        let hm = Heatmap { values: Tensor::from_fn(&[8, 8], |ix| ix[0] as f64 / 7.0), layer: "l".into(), class_id: 0 };
        for name in ["o.png", "o.ppm"] {
            let path = dir.path().join(name);
            render_overlay(&img, SaliencySource::Heat(&hm), &path).unwrap();
            let (back, _) = crate::data::read_image(&path).unwrap();
            assert_eq!(back.shape(), &[8, 8, 3]);
        }
        let bad = dir.path().join("missing/dir/o.png");
        assert!(render_overlay(&img, SaliencySource::Heat(&hm), &bad).is_err());
    }

    #[test]
    fn shapley_csv_lists_grid_cells() {
        let map = ShapleyMap {
            values: vec![0.5, -0.25],
            counts: vec![2; 2],
            grid: (1, 2),
            patch_size: 4,
            baseline: "test".into(),
            permutations: 2,
        };
        let csv = shapley_csv(&map);
        assert_eq!(csv, "row,col,value\n0,0,0.5\n0,1,-0.25\n");
    }

    #[test]
    fn mean_image_averages_elementwise() {
        let a = Tensor::full(&[1, 2, 2], 0.2);
        let b = Tensor::full(&[1, 2, 2], 0.6);
        let m = mean_image(&[a, b]).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
        assert!(mean_image(&[]).is_err());
    }
}
