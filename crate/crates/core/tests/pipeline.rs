//! End-to-end runs through the public API: images to tokens, training,
//! sampling and decoding back to pixels.

use vqdiff_core::codec::{decode, encode, fit_codebook, Image};
use vqdiff_core::objective::{l_t_gap, total_loss};
use vqdiff_core::rng::substream;
use vqdiff_core::sampler::{inpaint, sample, SamplerConfig};
use vqdiff_core::trainer::{evaluate, train, TrainConfig};
use vqdiff_core::{Condition, Denoiser, OracleDenoiser};

fn stripes(phase: usize) -> Image {
    let (w, h) = (4, 4);
    let data = (0..w * h)
        .map(|i| if (i % w + phase).is_multiple_of(2) { 0.9 } else { 0.1 })
        .collect();
    Image::new(w, h, 1, data).unwrap()
}

#[test]
fn images_train_sample_decode() {
    let images = [stripes(0), stripes(1)];
    let cb = fit_codebook(&images, 2, 2, 20, 4).unwrap();
    let data: Vec<_> = images
        .iter()
        .enumerate()
        .map(|(i, img)| (encode(img, &cb).unwrap(), Condition::new(vec![i])))
        .collect();
    assert_eq!(data[0].0.len(), 4);

    let cfg = TrainConfig {
        steps: 20,
        width: 16,
        ffn_hidden: 32,
        cond_vocab: 2,
        iterations: 400,
        warmup: 40,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let state = train(cfg, &data).unwrap();
    let s = state.schedule().unwrap();
    let scfg = SamplerConfig {
        stride: 2,
        seed: 9,
        ..SamplerConfig::default()
    };
    for (i, (grid, y)) in data.iter().enumerate() {
        let out = sample(&state.model, 2, 2, y, &s, &scfg, &mut substream(5, &[i as u64])).unwrap();
        assert_eq!(out.forward_passes, 10);
        assert_eq!(&out.grid, grid);
        assert_eq!(decode(&out.grid, &cb).unwrap(), decode(grid, &cb).unwrap());
    }
    let m = evaluate(&state.model, &data, &s, &scfg, 50, 0.0005).unwrap();
    assert!(m.exact_tv.unwrap() < 0.1, "{m:?}");
    assert!(m.aux < 0.1, "{m:?}");
}

#[test]
fn oracle_loss_and_inpainting() {
    let images = [stripes(0), stripes(1)];
    let cb = fit_codebook(&images, 2, 1, 20, 4).unwrap();
    let data: Vec<_> = images
        .iter()
        .map(|img| (encode(img, &cb).unwrap(), Condition::empty()))
        .collect();
    let s = vqdiff_core::build_schedule(30, 2, 0.9, 0.1, vqdiff_core::Strategy::MaskAndReplace).unwrap();
    let oracle = OracleDenoiser::from_samples(&data, s.clone()).unwrap();
    assert_eq!(oracle.seq_len(), Some(16));

    // any position reveals the phase, so inpainting from a single known
    // token recovers the whole grid
    let (target, y) = &data[1];
    let mut known = vec![false; 16];
    known[5] = true;
    let out = inpaint(&oracle, target, &known, y, &s, &SamplerConfig::default(), &mut substream(1, &[])).unwrap();
    assert_eq!(&out.grid, target);

    assert_eq!(l_t_gap(target, &s).unwrap(), 0.0);
    let mut rng = substream(2, &[]);
    let x_t = vqdiff_core::diffusion::sample_xt(target, &s, 12, &mut rng).unwrap();
    let b = total_loss(target, &x_t, y, 12, &oracle, &s, 0.0005).unwrap();
    assert!(b.vlb >= -1e-12);
}
