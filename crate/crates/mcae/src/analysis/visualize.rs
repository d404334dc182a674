//! Renderers: reconstruction grids, class-evidence heatmaps, and embedding
//! exports.
//!
//! Reconstruction grids show, per image, what the model saw and what it
//! predicted: the original, the masked view (visible patches on gray), and
//! the reconstruction with predicted pixels only at masked positions —
//! visible patches pass through untouched, so reconstruction quality is
//! judged purely on what the model could not see.
//!
//! The heatmap adapts gradient-weighted class activation mapping to the
//! transformer: the "feature map" is the last block's token activations on
//! the patch grid, weighted by the gradient of the chosen class logit.

use std::path::Path;

use crate::autodiff::Tape;
use crate::data::{Image, Liveness};
use crate::error::{Error, Result};
use crate::model::{
    classify_on_tape, decode, encode, is_encoder_param, is_head_param, register_params, ModelParams,
};
use crate::tensor::Tensor;
use crate::tokenizer::{paste_tokens, patchify, sample_mask, MaskPlan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fill value for masked patches in the "what the model saw" view.
const MASK_GRAY: f64 = 0.5;

/// A 2-D embedding with the labels and domains of its points, ready for
/// plotting.
#[derive(Clone, Debug)]
pub struct EmbeddingCloud {
    /// N×2 coordinates.
    pub points: Tensor,
    pub labels: Vec<Liveness>,
    pub domains: Vec<String>,
}

impl EmbeddingCloud {
    pub fn validate(&self) -> Result<()> {
        if self.points.cols() != 2 {
            return Err(Error::shape(
                "embedding points",
                "2 columns",
                format!("{} columns", self.points.cols()),
            ));
        }
        let n = self.points.rows();
        if self.labels.len() != n || self.domains.len() != n {
            return Err(Error::shape(
                "embedding annotations",
                format!("{n} labels and domains"),
                format!(
                    "{} labels, {} domains",
                    self.labels.len(),
                    self.domains.len()
                ),
            ));
        }
        if !self.points.all_finite() {
            return Err(Error::InvalidArgument(
                "embedding coordinates must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Write an embedding as `x,y,label,domain` rows.
pub fn write_embedding_csv(cloud: &EmbeddingCloud, path: &Path) -> Result<()> {
    cloud.validate()?;
    let mut out = String::from("x,y,label,domain\n");
    for i in 0..cloud.points.rows() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            cloud.points.get(i, 0),
            cloud.points.get(i, 1),
            cloud.labels[i].dir_name(),
            cloud.domains[i]
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn require_decoder(params: &ModelParams) -> Result<()> {
    if params.store.get("dec.head.w").is_none() {
        return Err(Error::Config(
            "model has no decoder; reconstruction needs pre-training weights".into(),
        ));
    }
    Ok(())
}

/// The masked view and the reconstruction for one image under `plan`.
///
/// The masked view paints every masked patch mid-gray and passes visible
/// patches through. The reconstruction starts from the original and
/// replaces only the masked patches with the decoder's (clamped)
/// predictions, so visible pixels are bit-identical to the input.
pub fn reconstruction_views(
    params: &ModelParams,
    image: &Image,
    plan: &MaskPlan,
) -> Result<(Image, Image)> {
    require_decoder(params)?;
    let seq = patchify(image, params.enc.patch_size)?;
    if plan.n != seq.len() {
        return Err(Error::shape(
            "reconstruction plan",
            format!("{} tokens", seq.len()),
            format!("{} tokens", plan.n),
        ));
    }
    let grid = params.enc.grid();
    let patch = params.enc.patch_size;

    let mut visible_flag = vec![false; plan.n];
    for &i in &plan.visible_idx {
        visible_flag[i] = true;
    }

    let mut masked_view = Image::new(image.height(), image.width());
    for v in masked_view.data_mut() {
        *v = MASK_GRAY;
    }
    paste_tokens(&mut masked_view, &seq.tokens, grid, patch, |i| {
        visible_flag[i]
    });

    let mut recon = image.clone();
    if !plan.masked_idx.is_empty() {
        let latent = encode(params, &seq, plan)?;
        let mut pred = decode(params, &latent, plan)?;
        for v in pred.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        paste_tokens(&mut recon, &pred, grid, patch, |i| !visible_flag[i]);
    }
    Ok((masked_view, recon))
}

/// Render `images` as a 3-column grid: original, masked view,
/// reconstruction — one row per image, no separators.
pub fn reconstruction_grid(
    params: &ModelParams,
    images: &[Image],
    mask_ratio: f64,
    seed: u64,
) -> Result<Image> {
    require_decoder(params)?;
    if images.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one image to render".into(),
        ));
    }
    let s = params.enc.image_size;
    for (i, img) in images.iter().enumerate() {
        if img.height() != s || img.width() != s {
            return Err(Error::shape(
                "grid image",
                format!("{s}x{s}"),
                format!("{}x{} at image {i}", img.height(), img.width()),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid_img = Image::new(images.len() * s, 3 * s);
    for (row, img) in images.iter().enumerate() {
        let plan = sample_mask(params.enc.n_tokens(), mask_ratio, &mut rng)?;
        let (masked_view, recon) = reconstruction_views(params, img, &plan)?;
        for (col, view) in [img, &masked_view, &recon].into_iter().enumerate() {
            for y in 0..s {
                for x in 0..s {
                    for c in 0..3 {
                        grid_img.set(row * s + y, col * s + x, c, view.get(y, x, c));
                    }
                }
            }
        }
    }
    Ok(grid_img)
}

/// Write an image as an 8-bit PNG.
pub fn save_image_png(img: &Image, path: &Path) -> Result<()> {
    img.to_rgb8().save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Write a single-channel map with values in `[0, 1]` as a grayscale PNG.
pub fn save_heatmap_png(map: &Tensor, path: &Path) -> Result<()> {
    let mut img = Image::new(map.rows(), map.cols());
    for y in 0..map.rows() {
        for x in 0..map.cols() {
            let v = map.get(y, x);
            for c in 0..3 {
                img.set(y, x, c, v);
            }
        }
    }
    save_image_png(&img, path)
}

/// Render the reconstruction grid and write it as a PNG.
pub fn render_reconstructions(
    params: &ModelParams,
    images: &[Image],
    mask_ratio: f64,
    seed: u64,
    out_path: &Path,
) -> Result<()> {
    let grid = reconstruction_grid(params, images, mask_ratio, seed)?;
    save_image_png(&grid, out_path)
}

/// Bilinear upsample of a square single-channel map, sampling at pixel
/// centers (same convention as image resizing).
fn upsample_square(map: &Tensor, out: usize) -> Tensor {
    let n = map.rows();
    if n == out {
        return map.clone();
    }
    let scale = n as f64 / out as f64;
    Tensor::from_fn(out, out, |y, x| {
        let fy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let fx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
        let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
        let top = map.get(y0, x0) * (1.0 - wx) + map.get(y0, x1) * wx;
        let bot = map.get(y1, x0) * (1.0 - wx) + map.get(y1, x1) * wx;
        top * (1.0 - wy) + bot * wy
    })
}

/// Heatmap of the evidence for `target_class` (0 = spoof, 1 = live) in
/// `image`, at full image resolution, scaled to `[0, 1]`.
///
/// The gradient of the chosen logit with respect to the last encoder
/// block's token activations gives one weight per channel (averaged over
/// tokens); the rectified weighted sum of activations, reshaped onto the
/// patch grid and bilinearly upsampled, is the map. A constant map
/// normalizes to all zeros.
pub fn attention_map(params: &ModelParams, image: &Image, target_class: usize) -> Result<Tensor> {
    if target_class >= 2 {
        return Err(Error::InvalidArgument(format!(
            "target_class must be 0 (spoof) or 1 (live), got {target_class}"
        )));
    }
    let seq = patchify(image, params.enc.patch_size)?;
    let mut tape = Tape::new();
    let binds = register_params(
        &mut tape,
        params,
        |n| is_encoder_param(n) || is_head_param(n),
        |_| true,
    );
    let trace = classify_on_tape(&mut tape, &binds, &params.enc, &seq)?;
    let mut pick = Tensor::zeros(1, 2);
    pick.set(0, target_class, 1.0);
    let target = tape.weighted_sum_all(trace.logits, pick);
    let grads = tape.backward(target);

    let acts = tape.value(trace.last_block).clone();
    let grad = grads.get_or_zero(trace.last_block, &tape);
    let (n_tokens, channels) = acts.shape();

    // One weight per channel: the token-averaged gradient.
    let mut alpha = vec![0.0; channels];
    for t in 0..n_tokens {
        for (c, a) in alpha.iter_mut().enumerate() {
            *a += grad.get(t, c);
        }
    }
    for a in &mut alpha {
        *a /= n_tokens as f64;
    }

    let g = params.enc.grid();
    let mut cam = Tensor::zeros(g, g);
    for t in 0..n_tokens {
        let weighted: f64 = acts.row(t).iter().zip(&alpha).map(|(act, a)| act * a).sum();
        cam.set(t / g, t % g, weighted.max(0.0));
    }

    let mut full = upsample_square(&cam, params.enc.image_size);
    let min = full.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = full
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        let inv = 1.0 / (max - min);
        for v in full.data_mut() {
            *v = ((*v - min) * inv).clamp(0.0, 1.0);
        }
    } else {
        for v in full.data_mut() {
            *v = 0.0;
        }
    }
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, DecoderConfig, EncoderConfig};
    use rand::Rng;

    fn micro_params(seed: u64) -> ModelParams {
        init_params(EncoderConfig::micro(), DecoderConfig::micro(), seed).unwrap()
    }

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(size, size);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn nothing_masked_reproduces_the_original_exactly() {
        let params = micro_params(1);
        let img = random_image(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = sample_mask(4, 0.0, &mut rng).unwrap();
        let (masked_view, recon) = reconstruction_views(&params, &img, &plan).unwrap();
        assert_eq!(recon.data(), img.data());
        assert_eq!(masked_view.data(), img.data(), "everything visible");
    }

    #[test]
    fn visible_patches_pass_through_and_masked_view_is_gray() {
        let params = micro_params(4);
        let img = random_image(8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let plan = sample_mask(4, 0.5, &mut rng).unwrap();
        let (masked_view, recon) = reconstruction_views(&params, &img, &plan).unwrap();

        let mut visible = [false; 4];
        for &i in &plan.visible_idx {
            visible[i] = true;
        }
        for (token, &vis) in visible.iter().enumerate() {
            let (gy, gx) = (token / 2, token % 2);
            for py in 0..4 {
                for px in 0..4 {
                    for c in 0..3 {
                        let (y, x) = (gy * 4 + py, gx * 4 + px);
                        if vis {
                            assert_eq!(recon.get(y, x, c), img.get(y, x, c));
                            assert_eq!(masked_view.get(y, x, c), img.get(y, x, c));
                        } else {
                            assert_eq!(masked_view.get(y, x, c), MASK_GRAY);
                            assert!((0.0..=1.0).contains(&recon.get(y, x, c)));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn grid_is_three_columns_by_image_count() {
        let params = micro_params(7);
        let images: Vec<Image> = (0..3).map(|i| random_image(8, 50 + i)).collect();
        let grid = reconstruction_grid(&params, &images, 0.75, 9).unwrap();
        assert_eq!(grid.height(), 3 * 8);
        assert_eq!(grid.width(), 3 * 8);
        // First column is the originals, untouched.
        for (row, img) in images.iter().enumerate() {
            for y in 0..8 {
                for x in 0..8 {
                    for c in 0..3 {
                        assert_eq!(grid.get(row * 8 + y, x, c), img.get(y, x, c));
                    }
                }
            }
        }
    }

    #[test]
    fn render_writes_a_readable_png() {
        let params = micro_params(8);
        let images = vec![random_image(8, 60)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recon.png");
        render_reconstructions(&params, &images, 0.5, 1, &path).unwrap();
        let reread = image::open(&path).unwrap().to_rgb8();
        assert_eq!(reread.width(), 24);
        assert_eq!(reread.height(), 8);
    }

    #[test]
    fn models_without_a_decoder_cannot_render() {
        let mut params = micro_params(9);
        // Simulate a classifier-only model: blank out the decoder store
        // entries by rebuilding a store without them.
        let mut store = crate::model::ParamStore::new();
        for (name, tensor, trainable) in params.store.iter() {
            if !crate::model::is_decoder_param(name) {
                store.insert(name, tensor.clone(), trainable);
            }
        }
        params.store = store;
        let img = random_image(8, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let plan = sample_mask(4, 0.5, &mut rng).unwrap();
        assert!(reconstruction_views(&params, &img, &plan).is_err());
        assert!(reconstruction_grid(&params, &[img], 0.5, 1).is_err());
    }

    #[test]
    fn heatmap_lies_in_unit_range_with_full_resolution() {
        let params = micro_params(12);
        let img = random_image(8, 13);
        let map = attention_map(&params, &img, 1).unwrap();
        assert_eq!(map.shape(), (8, 8));
        assert!(map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(map.data().contains(&0.0), "min-max puts a zero somewhere");
        assert!(
            map.data().iter().any(|&v| v > 1.0 - 1e-9),
            "min-max puts the top value at one"
        );
        assert!(attention_map(&params, &img, 2).is_err());
    }

    #[test]
    fn zero_classifier_head_yields_an_all_zero_map() {
        let mut params = micro_params(14);
        // With head.w = 0 the logit ignores the tokens, so the gradient at
        // the last block vanishes and the rectified map is constant zero.
        let zero = Tensor::zeros(params.enc.embed_dim, 2);
        *params.store.get_mut("head.w").unwrap() = zero;
        let img = random_image(8, 15);
        let map = attention_map(&params, &img, 0).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hot_patches_carry_more_class_evidence_than_random_ones() {
        use crate::data::make_synthetic_domains;
        use crate::trainer::{finetune, FinetuneConfig};

        // A small finetuned model on 16x16 images (4x4 patch grid), so the
        // map has 16 cells to rank.
        let enc = EncoderConfig {
            embed_dim: 8,
            depth: 1,
            heads: 1,
            patch_size: 4,
            image_size: 16,
            mlp_ratio: 4.0,
        };
        let params = init_params(enc, DecoderConfig::micro(), 3).unwrap();
        let domains = make_synthetic_domains(2, 12, 16, 77).unwrap();
        let cfg = FinetuneConfig {
            epochs: 6,
            batch_size: 8,
            warmup_epochs: 1,
            seed: 5,
            ..FinetuneConfig::default()
        };
        let (params, _) = finetune(params, &domains, &cfg).unwrap();

        let logit_for =
            |img: &Image, class: usize| crate::model::classify(&params, img).unwrap().get(0, class);
        let gray_out = |img: &Image, patches: &[usize]| {
            let mut out = img.clone();
            for &t in patches {
                let (gy, gx) = (t / 4, t % 4);
                for py in 0..4 {
                    for px in 0..4 {
                        for c in 0..3 {
                            out.set(gy * 4 + py, gx * 4 + px, c, MASK_GRAY);
                        }
                    }
                }
            }
            out
        };

        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let k = 3;
        let mut top_changes = 0.0;
        let mut rand_changes = 0.0;
        let mut count = 0;
        for dataset in &domains {
            for sample in dataset.samples.iter().take(10) {
                let class = sample.label.as_index();
                let map = attention_map(&params, &sample.image, class).unwrap();
                // Rank patches by their average heat.
                let mut heat: Vec<(f64, usize)> = (0..16)
                    .map(|t| {
                        let (gy, gx) = (t / 4, t % 4);
                        let mut sum = 0.0;
                        for py in 0..4 {
                            for px in 0..4 {
                                sum += map.get(gy * 4 + py, gx * 4 + px);
                            }
                        }
                        (sum, t)
                    })
                    .collect();
                heat.sort_by(|a, b| b.0.total_cmp(&a.0));
                let top: Vec<usize> = heat[..k].iter().map(|&(_, t)| t).collect();
                let random: Vec<usize> = rand::seq::index::sample(&mut rng, 16, k).into_vec();

                let base = logit_for(&sample.image, class);
                top_changes += (logit_for(&gray_out(&sample.image, &top), class) - base).abs();
                rand_changes += (logit_for(&gray_out(&sample.image, &random), class) - base).abs();
                count += 1;
            }
        }
        assert_eq!(count, 20);
        assert!(
            top_changes > rand_changes,
            "erasing hot patches moved the logit by {top_changes:.4} total, \
             random patches by {rand_changes:.4}"
        );
    }

    #[test]
    fn embedding_csv_round_trips_labels_and_domains() {
        let cloud = EmbeddingCloud {
            points: Tensor::from_vec(2, 2, vec![0.5, -1.25, 3.0, 4.0]).unwrap(),
            labels: vec![Liveness::Live, Liveness::Spoof],
            domains: vec!["alpha".into(), "beta".into()],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embed.csv");
        write_embedding_csv(&cloud, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,y,label,domain");
        assert_eq!(lines[1], "0.5,-1.25,live,alpha");
        assert_eq!(lines[2], "3,4,spoof,beta");

        let bad = EmbeddingCloud {
            points: Tensor::zeros(2, 2),
            labels: vec![Liveness::Live],
            domains: vec!["a".into(), "b".into()],
        };
        assert!(bad.validate().is_err());
    }
}
